//! Desk-scale regressors mapping standardized features to a signed radial
//! magnitude, and their binary persistence.
//!
//! File layout, little-endian:
//!
//! ```text
//! "RRNM1"                        5 bytes (version is the trailing '1')
//! kind                           u8: 0 = linear, 1 = one-hidden-layer tanh MLP
//! radius                         u32
//! edge_cutoff                    f64
//! n_features                     u32
//! hidden                         u32 (0 for linear)
//! mean[n_features], std[n_features]   f64
//! linear: weights[n], bias
//! mlp:    w1[hidden][n] row-major, b1[hidden], w2[hidden], b2
//! ```

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureGrid, FeatureSchema};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"RRNM";
pub const MODEL_VERSION: u8 = b'1';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub schema: FeatureSchema,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub net: Network,
}

impl Regressor {
    /// Identity standardization and an all-zero network: predicts `s = 0` everywhere.
    pub fn zero(schema: FeatureSchema, kind: ModelKind, hidden: usize) -> Self {
        let n = schema.len();
        let net = match kind {
            ModelKind::Linear => Network::Linear {
                weights: vec![0.0; n],
                bias: 0.0,
            },
            ModelKind::Mlp => Network::Mlp {
                hidden,
                w1: vec![0.0; hidden * n],
                b1: vec![0.0; hidden],
                w2: vec![0.0; hidden],
                b2: 0.0,
            },
        };
        Self {
            schema,
            mean: vec![0.0; n],
            std: vec![1.0; n],
            net,
        }
    }

    /// Hidden layer uniform in `±1/sqrt(fan_in)`, output layer zero.
    pub fn init(
        schema: FeatureSchema,
        kind: ModelKind,
        hidden: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut m = Self::zero(schema, kind, hidden);
        m.mean = mean;
        m.std = std;
        if let Network::Mlp { w1, b1, .. } = &mut m.net {
            let bound = 1.0 / (schema.len() as f64).sqrt();
            for v in w1.iter_mut().chain(b1.iter_mut()) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        m
    }

    pub fn kind(&self) -> ModelKind {
        match self.net {
            Network::Linear { .. } => ModelKind::Linear,
            Network::Mlp { .. } => ModelKind::Mlp,
        }
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn n_params(&self) -> usize {
        match &self.net {
            Network::Linear { weights, .. } => weights.len() + 1,
            Network::Mlp { w1, b1, w2, .. } => w1.len() + b1.len() + w2.len() + 1,
        }
    }

    /// Parameters flattened in file order.
    pub fn params(&self) -> Vec<f64> {
        match &self.net {
            Network::Linear { weights, bias } => {
                let mut p = weights.clone();
                p.push(*bias);
                p
            }
            Network::Mlp { w1, b1, w2, b2, .. } => {
                let mut p = Vec::with_capacity(self.n_params());
                p.extend_from_slice(w1);
                p.extend_from_slice(b1);
                p.extend_from_slice(w2);
                p.push(*b2);
                p
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        match &mut self.net {
            Network::Linear { weights, bias } => {
                let n = weights.len();
                weights.copy_from_slice(&p[..n]);
                *bias = p[n];
            }
            Network::Mlp { w1, b1, w2, b2, .. } => {
                let (a, b, c) = (w1.len(), b1.len(), w2.len());
                w1.copy_from_slice(&p[..a]);
                b1.copy_from_slice(&p[a..a + b]);
                w2.copy_from_slice(&p[a + b..a + b + c]);
                *b2 = p[a + b + c];
            }
        }
    }

    pub fn standardize(&self, raw: &[f64], out: &mut [f64]) {
        for ((o, &x), (m, s)) in out.iter_mut().zip(raw).zip(self.mean.iter().zip(&self.std)) {
            *o = (x - m) / s;
        }
    }

    /// Output for a standardized feature vector.
    pub fn forward(&self, z: &[f64]) -> f64 {
        match &self.net {
            Network::Linear { weights, bias } => {
                weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + bias
            }
            Network::Mlp {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                let n = z.len();
                let mut out = *b2;
                for h in 0..*hidden {
                    let row = &w1[h * n..(h + 1) * n];
                    let a = row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b1[h];
                    out += w2[h] * a.tanh();
                }
                out
            }
        }
    }

    /// Output and adds `upstream · ∂s/∂θ` into `grad` (file order).
    pub fn forward_backward(&self, z: &[f64], upstream: f64, grad: &mut [f64]) -> f64 {
        match &self.net {
            Network::Linear { weights, bias } => {
                let n = weights.len();
                for (g, x) in grad[..n].iter_mut().zip(z) {
                    *g += upstream * x;
                }
                grad[n] += upstream;
                weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + bias
            }
            Network::Mlp {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                let n = z.len();
                let hn = *hidden;
                let (o_b1, o_w2) = (hn * n, hn * n + hn);
                let o_b2 = o_w2 + hn;
                let mut out = *b2;
                for h in 0..hn {
                    let row = &w1[h * n..(h + 1) * n];
                    let a = (row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b1[h]).tanh();
                    out += w2[h] * a;
                    grad[o_w2 + h] += upstream * a;
                    let back = upstream * w2[h] * (1.0 - a * a);
                    if back != 0.0 {
                        for (g, x) in grad[h * n..(h + 1) * n].iter_mut().zip(z) {
                            *g += back * x;
                        }
                        grad[o_b1 + h] += back;
                    }
                }
                grad[o_b2] += upstream;
                out
            }
        }
    }

    /// Signed radial magnitude per pixel; zero where features are invalid.
    pub fn predict(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        if grid.schema != self.schema {
            return Err(Error::Shape(format!(
                "model expects {:?}, features use {:?}",
                self.schema, grid.schema
            )));
        }
        let n = self.n_features();
        let mut z = vec![0.0; n];
        Ok((0..grid.height * grid.width)
            .map(|i| {
                if grid.is_valid(i) {
                    self.standardize(grid.get(i), &mut z);
                    self.forward(&z)
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let n = self.n_features();
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[MODEL_VERSION, self.kind().tag()])?;
        w.write_all(&(self.schema.radius as u32).to_le_bytes())?;
        w.write_all(&self.schema.edge_cutoff.to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        let hidden = match &self.net {
            Network::Linear { .. } => 0u32,
            Network::Mlp { hidden, .. } => *hidden as u32,
        };
        w.write_all(&hidden.to_le_bytes())?;
        for v in self.mean.iter().chain(&self.std).chain(&self.params()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = CountingReader { inner: r, pos: 0 };
        let mut magic = [0u8; 4];
        reader.fill(&mut magic)?;
        let mut head = [0u8; 2];
        reader.fill(&mut head)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: "RRNM1".into(),
                actual: String::from_utf8_lossy(&[&magic[..], &head[..1]].concat()).into(),
            });
        }
        if head[0] != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: MODEL_VERSION,
                actual: head[0],
            });
        }
        let kind = match head[1] {
            0 => ModelKind::Linear,
            1 => ModelKind::Mlp,
            k => {
                return Err(Error::Parse {
                    offset: 5,
                    msg: format!("unknown model kind {k}"),
                })
            }
        };
        let radius = reader.u32()? as usize;
        let edge_cutoff = reader.f64()?;
        let n = reader.u32()? as usize;
        let hidden = reader.u32()? as usize;
        let schema = FeatureSchema {
            radius,
            edge_cutoff,
        };
        if schema.len() != n {
            return Err(Error::Parse {
                offset: 14,
                msg: format!("radius {radius} implies {} features, header says {n}", schema.len()),
            });
        }
        if kind == ModelKind::Mlp && hidden == 0 {
            return Err(Error::Parse {
                offset: 18,
                msg: "mlp with zero hidden units".into(),
            });
        }
        let mut model = Self::zero(schema, kind, hidden);
        for v in model.mean.iter_mut().chain(model.std.iter_mut()) {
            *v = reader.f64()?;
        }
        let mut p = vec![0.0; model.n_params()];
        for v in p.iter_mut() {
            *v = reader.f64()?;
        }
        model.set_params(&p);
        let mut extra = [0u8; 1];
        if reader.inner.read(&mut extra)? != 0 {
            return Err(Error::Parse {
                offset: reader.pos,
                msg: "trailing bytes after model parameters".into(),
            });
        }
        Ok(model)
    }
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    pos: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Parse {
                offset: self.pos,
                msg: "unexpected end of model file".into(),
            },
            _ => Error::Io(e),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Regressor {
        let schema = FeatureSchema::default();
        let n = schema.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Regressor::init(
            schema,
            ModelKind::Mlp,
            4,
            (0..n).map(|i| i as f64 * 0.1).collect(),
            vec![2.0; n],
            &mut rng,
        );
        let p: Vec<f64> = (0..m.n_params()).map(|i| (i as f64 * 0.37).sin()).collect();
        m.set_params(&p);
        m
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = Regressor::zero(FeatureSchema::default(), ModelKind::Linear, 0);
        assert_eq!(m.forward(&vec![3.0; m.n_features()]), 0.0);
    }

    #[test]
    fn init_bounds_hidden_layer_and_zeroes_output() {
        let schema = FeatureSchema::default();
        let n = schema.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Regressor::init(schema, ModelKind::Mlp, 16, vec![0.0; n], vec![1.0; n], &mut rng);
        let Network::Mlp { w1, b1, w2, b2, .. } = &m.net else { panic!() };
        let bound = 1.0 / (n as f64).sqrt();
        assert!(w1.iter().chain(b1).all(|v| v.abs() <= bound));
        assert!(w1.iter().any(|v| *v != 0.0));
        assert!(w2.iter().all(|v| *v == 0.0) && *b2 == 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = mlp();
        let z: Vec<f64> = (0..m.n_features()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut g = vec![0.0; m.n_params()];
        m.forward_backward(&z, 1.0, &mut g);
        let p0 = m.params();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut a = m.clone();
            let mut p = p0.clone();
            p[k] += h;
            a.set_params(&p);
            let up = a.forward(&z);
            p[k] -= 2.0 * h;
            a.set_params(&p);
            let down = a.forward(&z);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-7 * (1.0 + g[k].abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn persistence_round_trip() {
        let m = mlp();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..5], b"RRNM1");
        let back = Regressor::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);

        let lin = Regressor::zero(FeatureSchema::default(), ModelKind::Linear, 0);
        let back = Regressor::read_from(&mut lin.to_bytes().as_slice()).unwrap();
        assert_eq!(back, lin);
    }

    #[test]
    fn persistence_errors() {
        let mut bytes = mlp().to_bytes();
        bytes[4] = b'2';
        assert!(matches!(
            Regressor::read_from(&mut bytes.as_slice()),
            Err(Error::UnsupportedVersion { actual: b'2', .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Regressor::read_from(&mut bytes.as_slice()), Err(Error::BadMagic { .. })));
        let good = mlp().to_bytes();
        assert!(matches!(
            Regressor::read_from(&mut &good[..good.len() - 3]),
            Err(Error::Parse { .. })
        ));
    }
}
