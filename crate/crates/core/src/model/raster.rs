use crate::geom::Point2;
use crate::scene::{CameraFrameSet, PerceptionRange, PointCloud};
use crate::tensor::Tensor;

use super::ModelConfig;

pub const LIDAR_FEATURES: usize = 9;

/// BEV cell layout: row `i` runs from the front edge backwards, column `j`
/// from the left edge rightwards.
#[derive(Debug, Clone, Copy)]
pub struct BevLayout {
    pub h: usize,
    pub w: usize,
    pub range: PerceptionRange,
}

impl BevLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            h: cfg.fusion.bev_h,
            w: cfg.fusion.bev_w,
            range: cfg.range,
        }
    }

    /// Cell extent `(dx, dy)` in metres.
    pub fn cell_size(&self) -> [f64; 2] {
        [
            2.0 * self.range.longitudinal / self.h as f64,
            2.0 * self.range.lateral / self.w as f64,
        ]
    }

    /// Ego-frame point at fractional cell coordinates.
    pub fn point_at(&self, row: f64, col: f64) -> Point2 {
        let [dx, dy] = self.cell_size();
        [self.range.longitudinal - row * dx, self.range.lateral - col * dy]
    }

    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let [dx, dy] = self.cell_size();
        let r = (self.range.longitudinal - p[0]) / dx;
        let c = (self.range.lateral - p[1]) / dy;
        if r >= 0.0 && c >= 0.0 && r < self.h as f64 && c < self.w as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    /// `HW×2` cell centres in token order.
    pub fn centres(&self) -> Tensor {
        let mut d = Vec::with_capacity(self.h * self.w * 2);
        for i in 0..self.h {
            for j in 0..self.w {
                d.extend(self.point_at(i as f64 + 0.5, j as f64 + 0.5));
            }
        }
        Tensor::new(&[self.h * self.w, 2], d).expect("sized above")
    }
}

/// Inverse perspective mapping onto the ground plane.
///
/// Every cell is sampled on an `s×s` sub-grid. Each sample takes the pixel
/// its ground point projects to in the covering camera whose centre is
/// closest, or stays zero if no camera sees it. Output is `HW × 3s²` with
/// channels ordered (sub-row, sub-col, rgb) and values in `[0, 1]`.
pub fn camera_raster(frames: &CameraFrameSet, cfg: &ModelConfig) -> Tensor {
    let lay = BevLayout::new(cfg);
    let s = cfg.subsamples;
    let ch = 3 * s * s;
    let mut out = vec![0.0; lay.h * lay.w * ch];
    for i in 0..lay.h {
        for j in 0..lay.w {
            for a in 0..s {
                for b in 0..s {
                    let p = lay.point_at(i as f64 + (a as f64 + 0.5) / s as f64, j as f64 + (b as f64 + 0.5) / s as f64);
                    let g = [p[0], p[1], 0.0];
                    let mut best: Option<(f64, usize, usize, usize)> = None;
                    for (ci, (cam, img)) in frames.cameras.iter().zip(&frames.images).enumerate() {
                        let Some([u, v]) = cam.project(g) else { continue };
                        if !(u >= 0.0 && v >= 0.0 && u < img.width as f64 && v < img.height as f64) {
                            continue;
                        }
                        let t = cam.extrinsics.translation;
                        let d = (g[0] - t[0]).powi(2) + (g[1] - t[1]).powi(2) + t[2] * t[2];
                        if best.is_none_or(|b| d < b.0) {
                            best = Some((d, ci, u as usize, v as usize));
                        }
                    }
                    if let Some((_, ci, u, v)) = best {
                        let px = frames.images[ci].pixel(u, v);
                        let base = (i * lay.w + j) * ch + (a * s + b) * 3;
                        for c in 0..3 {
                            out[base + c] = px[c] as f64 / 255.0;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[lay.h * lay.w, ch], out).expect("sized above")
}

/// Reflectivity above which a return counts as road paint.
const PAINT_REFLECTIVITY: f32 = 0.6;
/// Height above which a return counts as kerb.
const KERB_Z: f32 = 0.05;

/// Pillar statistics per cell: `ln(1+n)/4`, mean and max height (clamped to
/// `[-0.5, 1]` m, ×4), mean reflectivity, paint fraction, then the mean
/// in-cell offset (x, y scaled to `[-1, 1]`) of paint returns and of kerb
/// returns. Empty pillars, and offsets with no qualifying return, are zero.
pub fn lidar_raster(cloud: &PointCloud, cfg: &ModelConfig) -> Tensor {
    let lay = BevLayout::new(cfg);
    let [dx, dy] = lay.cell_size();
    let n_cells = lay.h * lay.w;
    let mut count = vec![0usize; n_cells];
    // z sum, z max, reflectivity sum, paint count, paint dx, paint dy,
    // kerb count, kerb dx, kerb dy
    let mut acc = vec![[0.0f64; 9]; n_cells];
    for p in &cloud.points {
        let (x, y) = (p.x as f64, p.y as f64);
        let Some((i, j)) = lay.cell_of([x, y]) else { continue };
        let k = i * lay.w + j;
        let z = (p.z as f64).clamp(-0.5, 1.0) * 4.0;
        let centre = lay.point_at(i as f64 + 0.5, j as f64 + 0.5);
        let (ox, oy) = ((x - centre[0]) / (dx / 2.0), (y - centre[1]) / (dy / 2.0));
        let a = &mut acc[k];
        a[0] += z;
        a[1] = if count[k] == 0 { z } else { a[1].max(z) };
        a[2] += p.reflectivity as f64;
        if p.reflectivity > PAINT_REFLECTIVITY {
            a[3] += 1.0;
            a[4] += ox;
            a[5] += oy;
        }
        if p.z > KERB_Z {
            a[6] += 1.0;
            a[7] += ox;
            a[8] += oy;
        }
        count[k] += 1;
    }
    let mut out = vec![0.0; n_cells * LIDAR_FEATURES];
    for k in 0..n_cells {
        let n = count[k];
        if n == 0 {
            continue;
        }
        let a = acc[k];
        let nf = n as f64;
        let per = |s: f64, c: f64| if c > 0.0 { s / c } else { 0.0 };
        out[k * LIDAR_FEATURES..(k + 1) * LIDAR_FEATURES].copy_from_slice(&[
            (1.0 + nf).ln() / 4.0,
            a[0] / nf,
            a[1],
            a[2] / nf,
            a[3] / nf,
            per(a[4], a[3]),
            per(a[5], a[3]),
            per(a[7], a[6]),
            per(a[8], a[6]),
        ]);
    }
    Tensor::new(&[n_cells, LIDAR_FEATURES], out).expect("sized above")
}
