//! Training-time augmentation: GridMask on images, random point dropout on
//! LiDAR clouds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Image, PointCloud};
use crate::seeding::rng_for;

/// Periodic square mask. Each `unit_px` cell keeps an L-shaped band of
/// relative width `keep_ratio` and zeroes the remaining square, so the masked
/// fraction is `(1 - keep_ratio)²` up to boundary effects.
///
/// `offset` and `rotation_deg` left as `None` are drawn from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMaskSpec {
    pub unit_px: usize,
    pub keep_ratio: f64,
    pub offset: Option<[f64; 2]>,
    pub rotation_deg: Option<f64>,
}

impl Default for GridMaskSpec {
    fn default() -> Self {
        Self {
            unit_px: 32,
            keep_ratio: 0.6,
            offset: None,
            rotation_deg: None,
        }
    }
}

impl GridMaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.unit_px < 2 {
            return Err(Error::Config(format!("grid mask unit must be >= 2 px, got {}", self.unit_px)));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio < 1.0) {
            return Err(Error::Config(format!("grid mask keep ratio must lie in (0, 1), got {}", self.keep_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDropoutSpec {
    pub drop_prob: f64,
}

impl Default for PointDropoutSpec {
    fn default() -> Self {
        Self { drop_prob: 0.1 }
    }
}

impl PointDropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("point drop probability must lie in [0, 1), got {}", self.drop_prob)));
        }
        Ok(())
    }
}

/// Binary mask, `true` where the pixel is zeroed.
pub fn grid_mask_pattern(width: usize, height: usize, spec: &GridMaskSpec, seed: u64) -> Result<Vec<bool>> {
    spec.validate()?;
    let mut rng = rng_for(seed, &["grid_mask"]);
    let d = spec.unit_px as f64;
    let offset = spec
        .offset
        .unwrap_or_else(|| [rng.random_range(0.0..d), rng.random_range(0.0..d)]);
    let theta = spec
        .rotation_deg
        .unwrap_or_else(|| rng.random_range(0.0..360.0))
        .to_radians();
    let (s, c) = theta.sin_cos();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let edge = spec.keep_ratio * d;
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (c * px - s * py + offset[0]).rem_euclid(d);
            let v = (s * px + c * py + offset[1]).rem_euclid(d);
            mask.push(u >= edge && v >= edge);
        }
    }
    Ok(mask)
}

pub fn grid_mask(image: &Image, spec: &GridMaskSpec, seed: u64) -> Result<Image> {
    let mask = grid_mask_pattern(image.width, image.height, spec, seed)?;
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_exact_mut(3).zip(&mask) {
        if m {
            px.fill(0);
        }
    }
    Ok(out)
}

/// Keeps each point independently with probability `1 - drop_prob`,
/// preserving order.
pub fn point_dropout(cloud: &PointCloud, spec: &PointDropoutSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if cloud.points.is_empty() {
        return Err(Error::Invalid("point dropout needs a nonempty cloud".into()));
    }
    let mut rng = rng_for(seed, &["point_dropout"]);
    let points = cloud
        .points
        .iter()
        .filter(|_| rng.random::<f64>() >= spec.drop_prob)
        .copied()
        .collect();
    Ok(PointCloud {
        points,
        beam_count: cloud.beam_count,
        timestamp: cloud.timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LidarPoint;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rng_for(seed, &["img"]);
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random_range(1..=255u8)).collect(),
        }
    }

    fn cloud(n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|i| LidarPoint {
                    x: i as f32,
                    y: -(i as f32),
                    z: 0.0,
                    reflectivity: 0.5,
                    beam: (i % 32) as u16,
                })
                .collect(),
            beam_count: 32,
            timestamp: 0.0,
        }
    }

    #[test]
    fn masked_fraction_bounded() {
        let img = noise_image(128, 96, 0);
        for &keep in &[0.5, 0.6, 0.8, 0.95] {
            let spec = GridMaskSpec {
                unit_px: 16,
                keep_ratio: keep,
                ..Default::default()
            };
            let mut total = 0.0;
            for seed in 0..20 {
                let m = grid_mask_pattern(img.width, img.height, &spec, seed).unwrap();
                total += m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
            }
            let frac = total / 20.0;
            assert!(frac <= 1.0 - keep * keep + 0.02, "keep {keep}: {frac}");
            assert!((frac - (1.0 - keep).powi(2)).abs() < 0.03, "keep {keep}: {frac}");
        }
    }

    #[test]
    fn zero_image_stays_zero() {
        let img = Image::new(64, 48);
        assert_eq!(grid_mask(&img, &GridMaskSpec::default(), 4).unwrap(), img);
    }

    #[test]
    fn bad_specs_rejected() {
        let img = Image::new(8, 8);
        let mut spec = GridMaskSpec::default();
        spec.unit_px = 1;
        assert!(grid_mask(&img, &spec, 0).is_err());
        spec.unit_px = 8;
        spec.keep_ratio = 1.0;
        assert!(grid_mask(&img, &spec, 0).is_err());
        assert!(point_dropout(&cloud(3), &PointDropoutSpec { drop_prob: 1.0 }, 0).is_err());
        assert!(point_dropout(&cloud(0), &PointDropoutSpec::default(), 0).is_err());
    }

    #[test]
    fn zero_drop_is_identity() {
        let c = cloud(500);
        assert_eq!(point_dropout(&c, &PointDropoutSpec { drop_prob: 0.0 }, 9).unwrap(), c);
    }

    #[test]
    fn half_drop_is_binomial() {
        let n = 100_000;
        let out = point_dropout(&cloud(n), &PointDropoutSpec { drop_prob: 0.5 }, 17).unwrap();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((out.points.len() as f64 - 50_000.0).abs() <= 3.0 * sigma);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mask_is_binary_and_channel_consistent(seed in any::<u64>(), unit in 2usize..40, keep in 0.05f64..0.95) {
            let img = noise_image(40, 30, seed);
            let spec = GridMaskSpec { unit_px: unit, keep_ratio: keep, ..Default::default() };
            let out = grid_mask(&img, &spec, seed).unwrap();
            prop_assert_eq!(&out, &grid_mask(&img, &spec, seed).unwrap());
            for (o, i) in out.data.chunks(3).zip(img.data.chunks(3)) {
                prop_assert!(o == [0, 0, 0] || o == i);
            }
        }

        #[test]
        fn dropout_is_ordered_subset(seed in any::<u64>(), p in 0.0f64..0.99) {
            let c = cloud(300);
            let out = point_dropout(&c, &PointDropoutSpec { drop_prob: p }, seed).unwrap();
            prop_assert_eq!(&out, &point_dropout(&c, &PointDropoutSpec { drop_prob: p }, seed).unwrap());
            let mut it = c.points.iter();
            for q in &out.points {
                prop_assert!(it.any(|p| p == q));
            }
        }
    }
}
