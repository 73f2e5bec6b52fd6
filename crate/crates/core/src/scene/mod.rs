//! Synthetic driving scenes on a flat ground plane.
//!
//! Ego frame: `x` forward, `y` left, `z` up, metres, origin on the ground.
//! Camera frame: `x` right, `y` down, `z` along the optical axis. Extrinsics
//! map camera coordinates into the ego frame.

mod bundle;
mod lidar;
mod render;

pub use bundle::{load_scene, save_scene, scene_hash};
pub use lidar::sample_lidar;
pub use render::{render_cameras, render_images, CLASS_COLORS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Point2, Vec3};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    PedestrianCrossing,
    LaneDivider,
    RoadBoundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [
        MapClass::PedestrianCrossing,
        MapClass::LaneDivider,
        MapClass::RoadBoundary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::PedestrianCrossing => "pedestrian_crossing",
            MapClass::LaneDivider => "lane_divider",
            MapClass::RoadBoundary => "road_boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: MapClass,
    pub points: Vec<Point2>,
}

/// Ground-truth vectorized map in the ego frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    pub elements: Vec<MapElement>,
}

impl VectorMap {
    pub fn validate(&self, range: &PerceptionRange) -> Result<()> {
        for (i, e) in self.elements.iter().enumerate() {
            if e.points.len() < 2 {
                return Err(Error::Invalid(format!("map element {i} has fewer than 2 points")));
            }
            if let Some(p) = e.points.iter().find(|p| !range.contains(**p)) {
                return Err(Error::Invalid(format!("map element {i} point {p:?} outside range")));
            }
        }
        Ok(())
    }

    pub fn count(&self, class: MapClass) -> usize {
        self.elements.iter().filter(|e| e.class == class).count()
    }
}

/// Half-extents of the BEV evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRange {
    pub lateral: f64,
    pub longitudinal: f64,
}

impl Default for PerceptionRange {
    fn default() -> Self {
        Self {
            lateral: 15.0,
            longitudinal: 30.0,
        }
    }
}

impl PerceptionRange {
    pub fn contains(&self, p: Point2) -> bool {
        p[0].abs() <= self.longitudinal && p[1].abs() <= self.lateral
    }
}

/// Rigid camera→ego transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn to_ego(&self, p: Vec3) -> Vec3 {
        let r = self.rotation.mul_vec(p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = crate::geom::sub3(p, self.translation);
        self.rotation.transpose().mul_vec(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub extrinsics: Pose,
}

impl Camera {
    /// Pixel coordinates `(u, v)` of an ego-frame point, `None` if the point
    /// is not strictly in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let c = self.extrinsics.to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        let h = self.intrinsics.mul_vec([c[0] / c[2], c[1] / c[2], 1.0]);
        Some([h[0] / h[2], h[1] / h[2]])
    }

    /// Depth along the optical axis.
    pub fn depth(&self, p: Vec3) -> f64 {
        self.extrinsics.to_camera(p)[2]
    }
}

/// 8-bit RGB image, row-major `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrameSet {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub timestamp: f64,
}

impl CameraFrameSet {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.cameras.len() {
            return Err(Error::Invalid(format!(
                "{} images for {} cameras",
                self.images.len(),
                self.cameras.len()
            )));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if c.extrinsics.rotation.orthonormality_error() > 1e-9 {
                return Err(Error::Invalid(format!("camera {i} extrinsic rotation is not orthonormal")));
            }
            if c.intrinsics.inverse().is_none() {
                return Err(Error::Invalid(format!("camera {i} has singular intrinsics")));
            }
        }
        Ok(())
    }
}

/// One LiDAR return. Stored in `f32` so on-disk round trips are exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectivity: f32,
    pub beam: u16,
}

impl LidarPoint {
    pub fn range_from(&self, origin: Vec3) -> f64 {
        let d = [
            self.x as f64 - origin[0],
            self.y as f64 - origin[1],
            self.z as f64 - origin[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub beam_count: u16,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.beam >= self.beam_count {
                return Err(Error::Invalid(format!("point {i} has beam {} of {}", p.beam, self.beam_count)));
            }
            if ![p.x, p.y, p.z, p.reflectivity].iter().all(|v| v.is_finite()) {
                return Err(Error::Invalid(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p.reflectivity) {
                return Err(Error::Invalid(format!("point {i} reflectivity out of [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    /// Cameras sit this far behind the ego origin along their own optical
    /// heading, so each one sees the ground under the vehicle centre.
    pub mount_offset: f64,
    pub mount_height: f64,
    pub pitch_deg: f64,
    /// Rays per pixel side when rendering.
    pub supersample: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            image_width: 64,
            image_height: 48,
            focal_px: 44.0,
            mount_offset: 2.0,
            mount_height: 1.5,
            pitch_deg: 15.0,
            supersample: 3,
        }
    }
}

impl RigConfig {
    /// Evenly spaced headings starting straight ahead, counter-clockwise.
    pub fn cameras(&self) -> Vec<Camera> {
        let k = Mat3([
            [self.focal_px, 0.0, self.image_width as f64 / 2.0],
            [0.0, self.focal_px, self.image_height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ]);
        let pitch = self.pitch_deg.to_radians();
        (0..self.cameras)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / self.cameras as f64;
                let (sy, cy) = yaw.sin_cos();
                let (sp, cp) = pitch.sin_cos();
                let forward = [cp * cy, cp * sy, -sp];
                let right = [sy, -cy, 0.0];
                let down = [-sp * cy, -sp * sy, -cp];
                Camera {
                    intrinsics: k,
                    extrinsics: Pose {
                        rotation: Mat3::from_cols(right, down, forward),
                        translation: [-self.mount_offset * cy, -self.mount_offset * sy, self.mount_height],
                    },
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub beams: usize,
    pub azimuth_res_deg: f64,
    pub mount_height: f64,
    /// Ground distance hit by the lowest and highest beams; the beams in
    /// between are spaced geometrically in ground distance.
    pub min_ground_range: f64,
    pub max_ground_range: f64,
    pub max_range: f64,
    pub range_noise: f64,
    pub curb_height: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 32,
            azimuth_res_deg: 1.0,
            mount_height: 1.8,
            min_ground_range: 3.0,
            max_ground_range: 42.0,
            max_range: 45.0,
            range_noise: 0.01,
            curb_height: 0.15,
        }
    }
}

impl LidarConfig {
    pub fn origin(&self) -> Vec3 {
        [0.0, 0.0, self.mount_height]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadConfig {
    pub lanes_min: usize,
    pub lanes_max: usize,
    pub lane_width: f64,
    pub max_offset: f64,
    pub max_heading_deg: f64,
    pub max_curvature: f64,
    pub crossing_prob: f64,
    pub max_crossings: usize,
    pub crossing_depth: f64,
    /// Longitudinal spacing of ground-truth polyline vertices.
    pub vertex_spacing: f64,
    pub paint_width: f64,
    pub curb_width: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            lanes_min: 2,
            lanes_max: 4,
            lane_width: 3.5,
            max_offset: 2.0,
            max_heading_deg: 5.0,
            max_curvature: 0.002,
            crossing_prob: 0.5,
            max_crossings: 1,
            crossing_depth: 4.0,
            vertex_spacing: 5.0,
            paint_width: 0.6,
            curb_width: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub range: PerceptionRange,
    pub rig: RigConfig,
    pub lidar: LidarConfig,
    pub road: RoadConfig,
    pub ego_speed: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: PerceptionRange::default(),
            rig: RigConfig::default(),
            lidar: LidarConfig::default(),
            road: RoadConfig::default(),
            ego_speed: [2.0, 12.0],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.range.lateral > 0.0 && self.range.longitudinal > 0.0) {
            return bad("perception range must be positive");
        }
        if self.rig.cameras == 0 || self.rig.image_width == 0 || self.rig.image_height == 0 {
            return bad("camera rig needs at least one camera with a non-empty image");
        }
        if !(self.rig.focal_px > 0.0) {
            return bad("focal length must be positive");
        }
        if self.lidar.beams == 0 || self.lidar.beams > u16::MAX as usize {
            return bad("beam count must be in 1..=65535");
        }
        if !(self.lidar.azimuth_res_deg > 0.0) {
            return bad("azimuth resolution must be positive");
        }
        if !(self.lidar.min_ground_range > 0.0 && self.lidar.max_ground_range >= self.lidar.min_ground_range) {
            return bad("lidar ground ranges must be positive and ordered");
        }
        let r = &self.road;
        if r.lanes_min == 0 || r.lanes_max < r.lanes_min {
            return bad("lane counts must satisfy 1 <= lanes_min <= lanes_max");
        }
        if !(r.lane_width > 0.0 && r.vertex_spacing > 0.0 && r.paint_width > 0.0) {
            return bad("lane width, vertex spacing and paint width must be positive");
        }
        if !(0.0..=1.0).contains(&r.crossing_prob) {
            return bad("crossing probability must lie in [0, 1]");
        }
        if !(self.ego_speed[0] >= 0.0 && self.ego_speed[1] >= self.ego_speed[0]) {
            return bad("ego speed range must be non-negative and ordered");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub map: VectorMap,
    pub cameras: CameraFrameSet,
    pub lidar: PointCloud,
    pub ego_velocity: [f64; 2],
    pub seed: u64,
    pub config: SceneConfig,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.map.validate(&self.config.range)?;
        self.cameras.validate()?;
        self.lidar.validate()?;
        if self.cameras.cameras.len() != self.config.rig.cameras {
            return Err(Error::Invalid("camera count differs from rig config".into()));
        }
        if self.lidar.beam_count as usize != self.config.lidar.beams {
            return Err(Error::Invalid("beam count differs from lidar config".into()));
        }
        Ok(())
    }
}

/// Centre line `y(x) = offset + tan(heading)·x + curvature·x²/2`.
#[derive(Debug, Clone, Copy)]
struct RoadShape {
    offset: f64,
    slope: f64,
    curvature: f64,
    lanes: usize,
    lane_width: f64,
}

impl RoadShape {
    fn lateral(&self, x: f64, shift: f64) -> f64 {
        self.offset + self.slope * x + 0.5 * self.curvature * x * x + shift
    }

    fn half_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0
    }
}

fn line_points(shape: &RoadShape, shift: f64, cfg: &SceneConfig) -> Vec<Point2> {
    let xmax = cfg.range.longitudinal;
    let steps = (2.0 * xmax / cfg.road.vertex_spacing).round().max(1.0) as usize;
    (0..=steps)
        .map(|i| {
            let x = xmax - 2.0 * xmax * i as f64 / steps as f64;
            [x, shape.lateral(x, shift)]
        })
        .filter(|p| cfg.range.contains(*p))
        .collect()
}

/// Seeded road layout: boundaries, dividers and optional crossings.
pub fn generate_map(seed: u64, cfg: &SceneConfig) -> Result<VectorMap> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &["road"]);
    let r = &cfg.road;
    let shape = RoadShape {
        offset: rng.random_range(-r.max_offset..=r.max_offset),
        slope: rng
            .random_range(-r.max_heading_deg..=r.max_heading_deg)
            .to_radians()
            .tan(),
        curvature: rng.random_range(-r.max_curvature..=r.max_curvature),
        lanes: rng.random_range(r.lanes_min..=r.lanes_max),
        lane_width: r.lane_width,
    };
    let half = shape.half_width();
    let mut elements = Vec::new();
    for shift in [half, -half] {
        elements.push(MapElement {
            class: MapClass::RoadBoundary,
            points: line_points(&shape, shift, cfg),
        });
    }
    for j in 1..shape.lanes {
        elements.push(MapElement {
            class: MapClass::LaneDivider,
            points: line_points(&shape, -half + j as f64 * r.lane_width, cfg),
        });
    }

    let mut taken: Vec<f64> = Vec::new();
    let reach = (cfg.range.longitudinal - r.crossing_depth).max(0.0) * 2.0 / 3.0;
    for _ in 0..r.max_crossings {
        let present = rng.random_bool(r.crossing_prob);
        let xc = rng.random_range(-reach..=reach);
        if !present || taken.iter().any(|t| (t - xc).abs() < 2.0 * r.crossing_depth) {
            continue;
        }
        taken.push(xc);
        let d = r.crossing_depth / 2.0;
        let (yl, yr) = (shape.lateral(xc, half), shape.lateral(xc, -half));
        let ring = vec![[xc + d, yl], [xc + d, yr], [xc - d, yr], [xc - d, yl], [xc + d, yl]];
        let clipped: Vec<Point2> = ring
            .into_iter()
            .map(|p| [p[0], p[1].clamp(-cfg.range.lateral, cfg.range.lateral)])
            .collect();
        elements.push(MapElement {
            class: MapClass::PedestrianCrossing,
            points: clipped,
        });
    }
    elements.retain(|e| e.points.len() >= 2);
    Ok(VectorMap { elements })
}

/// Full scene: map, camera renders, LiDAR sweep and ego velocity.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    let map = generate_map(seed, cfg)?;
    let mut rng = rng_for(seed, &["ego"]);
    let speed = rng.random_range(cfg.ego_speed[0]..=cfg.ego_speed[1]);
    // Drive along the road direction at the origin.
    let heading = map
        .elements
        .iter()
        .find(|e| e.class == MapClass::RoadBoundary)
        .map(|e| {
            let (a, b) = (e.points[0], e.points[e.points.len() - 1]);
            (a[1] - b[1]).atan2(a[0] - b[0])
        })
        .unwrap_or(0.0);
    let ego_velocity = [speed * heading.cos(), speed * heading.sin()];
    let rig = cfg.rig.cameras();
    let cameras = render_cameras(&map, &rig, cfg, seed)?;
    let lidar = sample_lidar(&map, cfg, seed)?;
    Ok(Scene {
        map,
        cameras,
        lidar,
        ego_velocity,
        seed,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_is_rigid() {
        for c in RigConfig::default().cameras() {
            assert!(c.extrinsics.rotation.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn ego_origin_projects_into_front_camera() {
        // Hand projection with the default rig: front camera at (-2, 0, 1.5)
        // pitched 15° down, f = 44 px, principal point (32, 24).
        let s15 = 15f64.to_radians().sin();
        let c15 = 15f64.to_radians().cos();
        let rel = [2.0, 0.0, -1.5];
        let xc = -rel[1];
        let yc = -s15 * rel[0] - c15 * rel[2];
        let zc = c15 * rel[0] - s15 * rel[2];
        let (u, v) = (44.0 * xc / zc + 32.0, 44.0 * yc / zc + 24.0);
        assert!((0.0..64.0).contains(&u) && (0.0..48.0).contains(&v));

        let front = RigConfig::default().cameras()[0];
        let uv = front.project([0.0, 0.0, 0.0]).expect("in front of camera");
        assert!((uv[0] - u).abs() < 1e-9 && (uv[1] - v).abs() < 1e-9, "{uv:?} vs {u},{v}");
    }

    #[test]
    fn zero_crossings_config() {
        let mut cfg = SceneConfig::default();
        cfg.road.max_crossings = 0;
        for seed in 0..20 {
            let map = generate_map(seed, &cfg).unwrap();
            assert_eq!(map.count(MapClass::PedestrianCrossing), 0);
            assert!(map.count(MapClass::RoadBoundary) == 2);
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.rig.cameras = 0;
        assert!(matches!(generate_scene(1, &cfg), Err(Error::Config(_))));
        let mut cfg = SceneConfig::default();
        cfg.range.lateral = 0.0;
        assert!(matches!(generate_scene(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scene_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(42, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(scene_hash(&a), scene_hash(&b));
        let c = generate_scene(43, &cfg).unwrap();
        assert_ne!(scene_hash(&a), scene_hash(&c));
    }
}
