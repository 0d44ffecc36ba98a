//! File formats. All multi-byte values are little-endian.
//!
//! `RVIMG1` range image:
//!
//! ```text
//! "RVIMG1"                    6 bytes (version is the trailing '1')
//! height, width               u32, u32
//! sigma_v                     f64   azimuth pixels per radian, must equal width / 2π
//! kind                        u8    0 = uniform, 1 = table
//! uniform: sigma_u, center    f64, f64
//! table:   elevation[height]  f64 each
//! depth[height * width]       f32, row-major, 0 = no return
//! ```
//!
//! `RVLBL1` corruption labels:
//!
//! ```text
//! "RVLBL1", height u32, width u32, label[height * width] u8
//!   (0 no return, 1 clean, 2 variance artifact, 3 bias region),
//! chunks_requested u32, n_chunks u32, then per chunk row, col, height, width u32 and shift f64
//! ```

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::geometry::{ElevationMap, PointCloud, ProjectionConfig, RangeImage};
use crate::rectify::Regressor;
use crate::scene::{BiasChunk, CorruptionReport, Label, Rect};

pub const RVIMG_MAGIC: &[u8; 5] = b"RVIMG";
pub const RVIMG_VERSION: u8 = b'1';
pub const LABEL_MAGIC: &[u8; 5] = b"RVLBL";
pub const LABEL_VERSION: u8 = b'1';
pub const PNG_SCALE: f64 = 256.0;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn magic(&mut self, magic: &[u8; 5], version: u8, name: &str) -> Result<()> {
        let head = self.take(6, "magic")?;
        if &head[..5] != magic {
            return Err(Error::BadMagic {
                expected: name.into(),
                actual: String::from_utf8_lossy(head).into(),
            });
        }
        if head[5] != version {
            return Err(Error::UnsupportedVersion {
                expected: version,
                actual: head[5],
            });
        }
        Ok(())
    }
}

/// KITTI velodyne layout: `(x, y, z, intensity)` f32 quadruples.
pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() / 16 * 16) as u64,
            msg: format!("length {} is not a multiple of 16", bytes.len()),
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let v: [f32; 4] = std::array::from_fn(|k| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Parse {
                offset: (16 * i + 4 * k) as u64,
                msg: format!("non-finite value in point {i}"),
            });
        }
        let p = [v[0] as f64, v[1] as f64, v[2] as f64];
        if p == [0.0; 3] {
            return Err(Error::Parse {
                offset: (16 * i) as u64,
                msg: format!("point {i} lies at the sensor origin"),
            });
        }
        points.push(p);
        intensity.push(v[3] as f64);
    }
    PointCloud::new(points, Some(intensity))
}

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    parse_kitti_bin(&read_file(path)?)
}

/// Intensity defaults to 0 when the cloud carries none.
pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let int = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], int] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, &encode_kitti_bin(cloud))
}

pub fn encode_rvimg(image: &RangeImage) -> Vec<u8> {
    let cfg = image.config();
    let mut out = Vec::with_capacity(64 + 4 * cfg.len());
    out.extend_from_slice(RVIMG_MAGIC);
    out.push(RVIMG_VERSION);
    out.extend_from_slice(&(cfg.height as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.width as u32).to_le_bytes());
    out.extend_from_slice(&cfg.sigma_v().to_le_bytes());
    match &cfg.elevation {
        ElevationMap::Uniform { sigma_u, center } => {
            out.push(0);
            out.extend_from_slice(&sigma_u.to_le_bytes());
            out.extend_from_slice(&center.to_le_bytes());
        }
        ElevationMap::Table(rows) => {
            out.push(1);
            for r in rows {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    for &d in image.depths() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_rvimg(bytes: &[u8]) -> Result<RangeImage> {
    let mut c = Cursor::new(bytes);
    c.magic(RVIMG_MAGIC, RVIMG_VERSION, "RVIMG1")?;
    let height = c.u32("height")? as usize;
    let width = c.u32("width")? as usize;
    let sv_at = c.pos;
    let sigma_v = c.f64("sigma_v")?;
    let kind_at = c.pos;
    let elevation = match c.u8("elevation kind")? {
        0 => ElevationMap::Uniform {
            sigma_u: c.f64("sigma_u")?,
            center: c.f64("center")?,
        },
        1 => {
            let mut rows = Vec::with_capacity(height);
            for _ in 0..height {
                rows.push(c.f64("elevation table")?);
            }
            ElevationMap::Table(rows)
        }
        k => {
            return Err(Error::Parse {
                offset: kind_at as u64,
                msg: format!("unknown elevation kind {k}"),
            })
        }
    };
    let config = ProjectionConfig {
        height,
        width,
        elevation,
    };
    config.validate()?;
    if sigma_v != config.sigma_v() {
        return Err(Error::Parse {
            offset: sv_at as u64,
            msg: format!("sigma_v {sigma_v} does not match width {width}"),
        });
    }
    let expect = 4 * height * width;
    if c.remaining() != expect {
        return Err(Error::Shape(format!(
            "header declares {height}x{width} ({expect} depth bytes), payload has {}",
            c.remaining()
        )));
    }
    let mut depth = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        let at = c.pos;
        let d = f32::from_le_bytes(c.take(4, "depth")?.try_into().unwrap());
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::Parse {
                offset: at as u64,
                msg: format!("invalid depth {d}"),
            });
        }
        depth.push(d as f64);
    }
    RangeImage::from_depths(config, depth)
}

pub fn write_rvimg(path: &Path, image: &RangeImage) -> Result<()> {
    write_file(path, &encode_rvimg(image))
}

pub fn read_rvimg(path: &Path) -> Result<RangeImage> {
    decode_rvimg(&read_file(path)?)
}

/// Rounds depths to the stored precision so that `decode(encode(x)) == x`.
pub fn quantize(image: &RangeImage) -> RangeImage {
    let d = image.depths().iter().map(|&v| v as f32 as f64).collect();
    RangeImage::from_depths(image.config().clone(), d).expect("rounding keeps depths valid")
}

fn label_code(l: Label) -> u8 {
    match l {
        Label::NoReturn => 0,
        Label::Clean => 1,
        Label::VarianceArtifact => 2,
        Label::BiasRegion => 3,
    }
}

pub fn encode_labels(report: &CorruptionReport) -> Vec<u8> {
    let height = report.labels.len() / report.width.max(1);
    let mut out = Vec::with_capacity(32 + report.labels.len() + 24 * report.chunks.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.push(LABEL_VERSION);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(report.width as u32).to_le_bytes());
    out.extend(report.labels.iter().map(|&l| label_code(l)));
    out.extend_from_slice(&(report.chunks_requested as u32).to_le_bytes());
    out.extend_from_slice(&(report.chunks.len() as u32).to_le_bytes());
    for ch in &report.chunks {
        for v in [ch.rect.row, ch.rect.col, ch.rect.height, ch.rect.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&ch.shift.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<CorruptionReport> {
    let mut c = Cursor::new(bytes);
    c.magic(LABEL_MAGIC, LABEL_VERSION, "RVLBL1")?;
    let height = c.u32("height")? as usize;
    let width = c.u32("width")? as usize;
    let at = c.pos;
    let labels = c
        .take(height * width, "labels")?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(Label::NoReturn),
            1 => Ok(Label::Clean),
            2 => Ok(Label::VarianceArtifact),
            3 => Ok(Label::BiasRegion),
            _ => Err(Error::Parse {
                offset: (at + i) as u64,
                msg: format!("unknown label code {b}"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks_requested = c.u32("chunk count")? as usize;
    let n = c.u32("chunk count")? as usize;
    let mut chunks = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rect = Rect {
            row: c.u32("chunk")? as usize,
            col: c.u32("chunk")? as usize,
            height: c.u32("chunk")? as usize,
            width: c.u32("chunk")? as usize,
        };
        chunks.push(BiasChunk {
            rect,
            shift: c.f64("chunk shift")?,
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Parse {
            offset: c.pos as u64,
            msg: "trailing bytes after label file".into(),
        });
    }
    Ok(CorruptionReport {
        width,
        labels,
        chunks,
        chunks_requested,
    })
}

pub fn write_labels(path: &Path, report: &CorruptionReport) -> Result<()> {
    write_file(path, &encode_labels(report))
}

pub fn read_labels(path: &Path) -> Result<CorruptionReport> {
    decode_labels(&read_file(path)?)
}

pub fn write_model(path: &Path, model: &Regressor) -> Result<()> {
    write_file(path, &model.to_bytes())
}

pub fn read_model(path: &Path) -> Result<Regressor> {
    Regressor::read_from(&mut read_file(path)?.as_slice())
}

pub fn png16_pixels(image: &RangeImage, scale: f64) -> Result<Vec<u16>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParam(format!("png scale must be > 0, got {scale}")));
    }
    Ok(image
        .depths()
        .iter()
        .zip(image.mask())
        .map(|(&d, &m)| if m { (d * scale).min(65535.0).round() as u16 } else { 0 })
        .collect())
}

pub fn export_png16(image: &RangeImage, path: &Path, scale: f64) -> Result<()> {
    let px = png16_pixels(image, scale)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, px)
            .expect("buffer matches image size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
