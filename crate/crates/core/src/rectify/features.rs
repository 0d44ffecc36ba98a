//! Per-pixel local-window features for the radial regressor.
//!
//! The window is the plus-shaped stencil of radius `r` around a pixel
//! (azimuth wraps, elevation does not). Feature order for `r > 0`:
//!
//! ```text
//! depth,
//! left_1..left_r, right_1..right_r, up_1..up_r, down_1..down_r,   d(neighbor) - d(center)
//! variance,                                                     over the 4r + 1 stencil depths
//! curv_h_1..curv_h_r, curv_v_1..curv_v_r                          d - planar prediction from d_-k, d_+k
//! ```
//!
//! Along a column the inverse depth of a plane is `α cos θ + β sin θ`, so the
//! two vertical neighbours predict the centre exactly and `curv_v` is zero on
//! any plane. Horizontally the prediction is the harmonic mean, which is exact
//! on the ground and second-order small on walls.
//! With `r = 0` the only feature is the depth.
//!
//! A pixel is invalid when its stencil leaves the image vertically, touches a
//! pixel without a return, or any curvature exceeds `edge_cutoff` in magnitude
//! (the stencil straddles a depth discontinuity).

use serde::{Deserialize, Serialize};

use crate::geometry::RangeImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub radius: usize,
    /// Largest allowed deviation from the planar prediction, meters.
    pub edge_cutoff: f64,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            radius: 2,
            edge_cutoff: 0.06,
        }
    }
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        if self.radius == 0 {
            1
        } else {
            2 + 6 * self.radius
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub schema: FeatureSchema,
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureGrid {
    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        self.valid[pixel]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Feature vector of `pixel`; zeros when invalid.
    pub fn get(&self, pixel: usize) -> &[f64] {
        let n = self.n_features();
        &self.values[pixel * n..(pixel + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn extract_features(image: &RangeImage, schema: FeatureSchema) -> FeatureGrid {
    let (h, w) = (image.height(), image.width());
    let n = schema.len();
    let r = schema.radius;
    let mut values = vec![0.0; h * w * n];
    let mut valid = vec![false; h * w];
    let d = image.depths();
    let m = image.mask();
    // arm offsets: left, right, up, down
    let mut arms = vec![[0usize; 4]; r];
    let cfg = image.config();
    for row in 0..h {
        if r > 0 && (row < r || row + r >= h) {
            continue;
        }
        // (w_up, w_down) per k: u(θ) = w_up u(θ_up) + w_down u(θ_down) for u = (cos, sin)
        let vweights: Vec<(f64, f64)> = (1..=r)
            .map(|k| {
                let (a, b, t) = (
                    cfg.row_elevation(row - k),
                    cfg.row_elevation(row + k),
                    cfg.row_elevation(row),
                );
                let s = (a - b).sin();
                ((t - b).sin() / s, (a - t).sin() / s)
            })
            .collect();
        'pixel: for col in 0..w {
            let i = row * w + col;
            if !m[i] {
                continue;
            }
            let center = d[i];
            for k in 1..=r {
                arms[k - 1] = [
                    row * w + (col + w * r - k) % w,
                    row * w + (col + k) % w,
                    (row - k) * w + col,
                    (row + k) * w + col,
                ];
            }
            if arms.iter().any(|a| a.iter().any(|&j| !m[j])) {
                continue 'pixel;
            }
            let f = &mut values[i * n..(i + 1) * n];
            f[0] = center;
            if r > 0 {
                let mut sum = center;
                let mut sum2 = center * center;
                for arm in 0..4 {
                    for k in 0..r {
                        let v = d[arms[k][arm]];
                        f[1 + arm * r + k] = v - center;
                        sum += v;
                        sum2 += v * v;
                    }
                }
                let cnt = (4 * r + 1) as f64;
                let mean = sum / cnt;
                f[1 + 4 * r] = (sum2 / cnt - mean * mean).max(0.0);
                for k in 0..r {
                    let [left, right, up, down] = arms[k].map(|j| d[j]);
                    f[2 + 4 * r + k] = center - 2.0 / (1.0 / left + 1.0 / right);
                    let (wu, wd) = vweights[k];
                    f[2 + 5 * r + k] = center - 1.0 / (wu / up + wd / down);
                }
                if f[2 + 4 * r..].iter().any(|c| !(c.abs() <= schema.edge_cutoff)) {
                    f.iter_mut().for_each(|v| *v = 0.0);
                    continue 'pixel;
                }
            }
            valid[i] = true;
        }
    }
    FeatureGrid {
        schema,
        height: h,
        width: w,
        values,
        valid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProjectionConfig;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RangeImage {
        let cfg = ProjectionConfig::uniform(h, w, 0.2, -0.2).unwrap();
        let d = (0..h * w).map(|i| f(i / w, i % w)).collect();
        RangeImage::from_depths(cfg, d).unwrap()
    }

    #[test]
    fn constant_interior_has_zero_differences() {
        let img = image(9, 32, |_, _| 12.0);
        let fg = extract_features(&img, FeatureSchema::default());
        let i = 4 * 32 + 7;
        assert!(fg.is_valid(i));
        let f = fg.get(i);
        assert_eq!(f[0], 12.0);
        let r = 2;
        assert!(f[1..=4 * r + 1].iter().all(|&v| v.abs() < 1e-12));
        // border rows are invalid
        assert!(!fg.is_valid(32 + 3));
    }

    #[test]
    fn step_edge_differences() {
        let step = 2.5;
        let img = image(5, 16, |_, c| if c < 8 { 10.0 } else { 10.0 + step });
        let schema = FeatureSchema {
            radius: 1,
            edge_cutoff: 3.0,
        };
        let fg = extract_features(&img, schema);
        let left_of_edge = fg.get(2 * 16 + 7);
        // [depth, left, right, up, down, var, curv_h, curv_v]
        assert_eq!(left_of_edge[1], 0.0);
        assert!((left_of_edge[2] - step).abs() < 1e-12);
        let right_of_edge = fg.get(2 * 16 + 8);
        assert!((right_of_edge[1] + step).abs() < 1e-12);
        assert_eq!(right_of_edge[2], 0.0);
        assert_eq!(left_of_edge[3], 0.0);
        assert_eq!(left_of_edge[4], 0.0);
        assert!(left_of_edge[5] > 0.0);
    }

    #[test]
    fn large_gaps_invalidate() {
        let img = image(5, 16, |_, c| if c < 8 { 10.0 } else { 20.0 });
        let fg = extract_features(
            &img,
            FeatureSchema {
                radius: 1,
                edge_cutoff: 3.0,
            },
        );
        assert!(!fg.is_valid(2 * 16 + 7));
        assert!(!fg.is_valid(2 * 16 + 8));
        assert!(fg.is_valid(2 * 16 + 3));
    }

    #[test]
    fn radius_zero_is_depth_only() {
        let img = image(3, 8, |r, c| 5.0 + r as f64 + c as f64);
        let schema = FeatureSchema {
            radius: 0,
            edge_cutoff: 3.0,
        };
        let fg = extract_features(&img, schema);
        assert_eq!(fg.n_features(), 1);
        assert_eq!(fg.valid_count(), 24);
        assert_eq!(fg.get(8 + 3), &[9.0]);
    }

    #[test]
    fn curvature_vanishes_on_planes() {
        // wall x = 10: d = 10 / (cos θ cos φ)
        let cfg = ProjectionConfig::uniform(9, 1024, 0.1, -0.1).unwrap();
        let mut img = RangeImage::empty(cfg.clone());
        for r in 0..9 {
            for c in 480..544 {
                let (t, p) = (cfg.row_elevation(r), cfg.col_azimuth(c));
                img.set(r, c, 10.0 / (t.cos() * p.cos()));
            }
        }
        let fg = extract_features(&img, FeatureSchema::default());
        let f = fg.get(4 * 1024 + 500);
        let r = 2;
        for k in 0..2 * r {
            assert!(f[2 + 4 * r + k].abs() < 2e-3, "curvature {k}: {}", f[2 + 4 * r + k]);
        }
        for k in r..2 * r {
            assert!(f[2 + 4 * r + k].abs() < 1e-9, "vertical curvature {k}: {}", f[2 + 4 * r + k]);
        }

        // tilted plane n·p = 8 with n = (1, 0.3, 0.2)
        let mut img = RangeImage::empty(cfg.clone());
        for r in 0..9 {
            for c in 480..544 {
                let u = crate::geometry::ray_direction(cfg.row_elevation(r), cfg.col_azimuth(c));
                let dn = u[0] + 0.3 * u[1] + 0.2 * u[2];
                img.set(r, c, 8.0 / dn);
            }
        }
        let fg = extract_features(&img, FeatureSchema::default());
        for col in [490, 512, 530] {
            assert!(fg.is_valid(4 * 1024 + col));
            let f = fg.get(4 * 1024 + col);
            for k in r..2 * r {
                let tol = 1e-9 * f[0];
                assert!(f[2 + 4 * r + k].abs() < tol, "col {col}: {}", f[2 + 4 * r + k]);
            }
        }
    }
}
