use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::render::surface_class;
use super::{LidarPoint, MapClass, PointCloud, SceneConfig, VectorMap};
use crate::error::{Error, Result};
use crate::geom::point_polyline_distance;
use crate::seeding::rng_for;

/// Ground-plane ray cast of a spinning multi-beam sensor.
///
/// Beam `b` hits the ground at a distance spaced geometrically between the
/// configured minimum and maximum ground ranges, so ring density falls off
/// with range. Returns that land on a road-boundary curb are raised to the
/// curb height. Painted surfaces reflect more strongly than asphalt.
pub fn sample_lidar(map: &VectorMap, cfg: &SceneConfig, seed: u64) -> Result<PointCloud> {
    let lc = &cfg.lidar;
    if lc.beams == 0 || !(lc.azimuth_res_deg > 0.0) {
        return Err(Error::Config("lidar needs at least one beam and a positive azimuth step".into()));
    }
    let mut rng = rng_for(seed, &["lidar"]);
    let noise = Normal::new(0.0, lc.range_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n_az = (360.0 / lc.azimuth_res_deg).round().max(1.0) as usize;
    let ratio = lc.max_ground_range / lc.min_ground_range;
    let curb_half = cfg.road.curb_width / 2.0;
    let boundaries: Vec<_> = map
        .elements
        .iter()
        .filter(|e| e.class == MapClass::RoadBoundary)
        .collect();

    let mut points = Vec::with_capacity(lc.beams * n_az);
    for b in 0..lc.beams {
        let frac = if lc.beams > 1 { b as f64 / (lc.beams - 1) as f64 } else { 0.0 };
        let ground = lc.min_ground_range * ratio.powf(frac);
        for i in 0..n_az {
            let az = (i as f64 * lc.azimuth_res_deg).to_radians();
            let d = (ground + noise.sample(&mut rng)).max(0.0);
            let (x, y) = (d * az.cos(), d * az.sin());
            let jitter: f64 = rng.random_range(-0.05..=0.05);
            if (d * d + lc.mount_height * lc.mount_height).sqrt() > lc.max_range {
                continue;
            }
            let on_curb = boundaries
                .iter()
                .any(|e| point_polyline_distance([x, y], &e.points) <= curb_half);
            let (z, base) = if on_curb {
                (lc.curb_height, 0.4)
            } else {
                match surface_class(map, cfg, [x, y]) {
                    Some(_) => (0.0, 0.8),
                    None => (0.0, 0.15),
                }
            };
            points.push(LidarPoint {
                x: x as f32,
                y: y as f32,
                z: z as f32,
                reflectivity: ((base + jitter) as f32).clamp(0.0, 1.0),
                beam: b as u16,
            });
        }
    }
    Ok(PointCloud {
        points,
        beam_count: lc.beams as u16,
        timestamp: 0.0,
    })
}
