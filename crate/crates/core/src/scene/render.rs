use super::{Camera, CameraFrameSet, Image, MapClass, SceneConfig, VectorMap};
use crate::error::{Error, Result};
use crate::geom::{point_in_polygon, point_polyline_distance, Point2};
use crate::seeding::derive_seed;

/// Paint colours indexed by [`MapClass::index`].
pub const CLASS_COLORS: [[u8; 3]; 3] = [[235, 235, 235], [230, 195, 40], [205, 45, 45]];

const SKY: [u8; 3] = [140, 175, 215];

fn texel(seed: u64, ix: i64, iy: i64) -> u64 {
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Asphalt: dark grey with 0.5 m texels of seeded brightness jitter.
fn ground_color(seed: u64, p: Point2) -> [u8; 3] {
    let h = texel(seed, (p[0] / 0.5).floor() as i64, (p[1] / 0.5).floor() as i64);
    let v = 70 + (h % 25) as u8;
    [v, v, v + 4]
}

/// Colour of the ground plane at `p`: boundaries over dividers over crossings.
pub(crate) fn surface_color(map: &VectorMap, cfg: &SceneConfig, seed: u64, p: Point2) -> [u8; 3] {
    surface_class(map, cfg, p)
        .map(|c| CLASS_COLORS[c.index()])
        .unwrap_or_else(|| ground_color(seed, p))
}

/// Which painted element, if any, covers ground point `p`.
pub(crate) fn surface_class(map: &VectorMap, cfg: &SceneConfig, p: Point2) -> Option<MapClass> {
    let half = cfg.road.paint_width / 2.0;
    let mut best: Option<MapClass> = None;
    for e in &map.elements {
        let hit = match e.class {
            MapClass::PedestrianCrossing => point_in_polygon(p, &e.points),
            _ => point_polyline_distance(p, &e.points) <= half,
        };
        if hit && best.is_none_or(|b| e.class > b) {
            best = Some(e.class);
        }
    }
    best
}

/// Ray-casts every pixel of every camera onto the ground plane, averaging a
/// `supersample × supersample` grid of rays per pixel.
pub fn render_images(map: &VectorMap, rig: &[Camera], cfg: &SceneConfig, seed: u64) -> Result<Vec<Image>> {
    let tex_seed = derive_seed(seed, &["ground"]);
    let (w, h) = (cfg.rig.image_width, cfg.rig.image_height);
    rig.iter()
        .enumerate()
        .map(|(ci, cam)| {
            let kinv = cam
                .intrinsics
                .inverse()
                .ok_or_else(|| Error::Invalid(format!("camera {ci} has singular intrinsics")))?;
            let mut img = Image::new(w, h);
            let origin = cam.extrinsics.translation;
            let ss = cfg.rig.supersample.max(1);
            let n = (ss * ss) as u32;
            for v in 0..h {
                for u in 0..w {
                    let mut acc = [0u32; 3];
                    for sv in 0..ss {
                        for su in 0..ss {
                            let pu = u as f64 + (su as f64 + 0.5) / ss as f64;
                            let pv = v as f64 + (sv as f64 + 0.5) / ss as f64;
                            let d = cam.extrinsics.rotation.mul_vec(kinv.mul_vec([pu, pv, 1.0]));
                            let rgb = if d[2] < -1e-9 {
                                let t = -origin[2] / d[2];
                                let g = [origin[0] + t * d[0], origin[1] + t * d[1]];
                                surface_color(map, cfg, tex_seed, g)
                            } else {
                                SKY
                            };
                            for (a, c) in acc.iter_mut().zip(rgb) {
                                *a += c as u32;
                            }
                        }
                    }
                    img.set_pixel(u, v, acc.map(|a| ((a + n / 2) / n) as u8));
                }
            }
            Ok(img)
        })
        .collect()
}

/// Renders the map through `rig` and packages the frames with calibration.
pub fn render_cameras(map: &VectorMap, rig: &[Camera], cfg: &SceneConfig, seed: u64) -> Result<CameraFrameSet> {
    Ok(CameraFrameSet {
        images: render_images(map, rig, cfg, seed)?,
        cameras: rig.to_vec(),
        timestamp: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Mat3;
    use crate::scene::MapElement;

    fn is_paint(rgb: [u8; 3]) -> bool {
        CLASS_COLORS.contains(&rgb)
    }

    #[test]
    fn empty_map_is_background_only() {
        let cfg = SceneConfig::default();
        let imgs = render_images(&VectorMap::default(), &cfg.rig.cameras(), &cfg, 5).unwrap();
        for img in &imgs {
            for v in 0..img.height {
                for u in 0..img.width {
                    assert!(!is_paint(img.pixel(u, v)));
                }
            }
        }
    }

    #[test]
    fn element_behind_camera_is_invisible() {
        let cfg = SceneConfig::default();
        let rig = cfg.rig.cameras();
        // A divider behind the vehicle: the front camera must not change.
        let map = VectorMap {
            elements: vec![MapElement {
                class: MapClass::LaneDivider,
                points: vec![[-8.0, -1.0], [-30.0, -1.0]],
            }],
        };
        let bare = render_images(&VectorMap::default(), &rig, &cfg, 1).unwrap();
        let imgs = render_images(&map, &rig, &cfg, 1).unwrap();
        assert_eq!(imgs[0], bare[0]);
        assert_ne!(imgs[3], bare[3]);
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let cfg = SceneConfig::default();
        let mut rig = cfg.rig.cameras();
        rig[2].intrinsics = Mat3([[0.0; 3]; 3]);
        assert!(render_images(&VectorMap::default(), &rig, &cfg, 0).is_err());
    }
}
