//! The 13-kind multi-sensor corruption suite at three severity levels.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Mat3;
use crate::scene::{render_images, Image, LidarPoint, PointCloud, Scene};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    CameraOnly,
    LidarOnly,
    MultiModal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CorruptionKind {
    MotionBlur,
    TemporalMisalignment,
    SpatialMisalignment,
    Fog,
    Snow,
    CameraCrash,
    FrameLost,
    CrossSensor,
    Crosstalk,
    CameraCrashCrossSensor,
    CameraCrashCrosstalk,
    FrameLostCrossSensor,
    FrameLostCrosstalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CameraEffect {
    Crash,
    FrameLost,
    Fog,
    Snow,
    Blur,
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LidarEffect {
    Crosstalk,
    CrossSensor,
    Fog,
    Snow,
    Blur,
}

impl CorruptionKind {
    /// Report order, shared by every table and result file.
    pub const SUITE: [CorruptionKind; 13] = [
        CorruptionKind::MotionBlur,
        CorruptionKind::TemporalMisalignment,
        CorruptionKind::SpatialMisalignment,
        CorruptionKind::Fog,
        CorruptionKind::Snow,
        CorruptionKind::CameraCrash,
        CorruptionKind::FrameLost,
        CorruptionKind::CrossSensor,
        CorruptionKind::Crosstalk,
        CorruptionKind::CameraCrashCrossSensor,
        CorruptionKind::CameraCrashCrosstalk,
        CorruptionKind::FrameLostCrossSensor,
        CorruptionKind::FrameLostCrosstalk,
    ];

    pub fn name(self) -> &'static str {
        use CorruptionKind::*;
        match self {
            MotionBlur => "motion_blur",
            TemporalMisalignment => "temporal_misalignment",
            SpatialMisalignment => "spatial_misalignment",
            Fog => "fog",
            Snow => "snow",
            CameraCrash => "camera_crash",
            FrameLost => "frame_lost",
            CrossSensor => "cross_sensor",
            Crosstalk => "cross_talk",
            CameraCrashCrossSensor => "camera_crash+cross_sensor",
            CameraCrashCrosstalk => "camera_crash+cross_talk",
            FrameLostCrossSensor => "frame_lost+cross_sensor",
            FrameLostCrosstalk => "frame_lost+cross_talk",
        }
    }

    /// Column heading used in report tables.
    pub fn label(self) -> &'static str {
        use CorruptionKind::*;
        match self {
            MotionBlur => "Motion Blur",
            TemporalMisalignment => "Temporal Mis.",
            SpatialMisalignment => "Spatial Mis.",
            Fog => "Fog",
            Snow => "Snow",
            CameraCrash => "Camera Crash",
            FrameLost => "Frame Lost",
            CrossSensor => "Cross Sensor",
            Crosstalk => "Cross Talk",
            CameraCrashCrossSensor => "CC+CS",
            CameraCrashCrosstalk => "CC+CT",
            FrameLostCrossSensor => "FL+CS",
            FrameLostCrosstalk => "FL+CT",
        }
    }

    pub fn category(self) -> Category {
        match self.parts() {
            (Some(_), None) if !self.is_alignment() => Category::CameraOnly,
            (None, Some(_)) => Category::LidarOnly,
            _ => Category::MultiModal,
        }
    }

    /// Camera crash, frame loss and their LiDAR combinations.
    pub fn is_sensor_failure(self) -> bool {
        use CorruptionKind::*;
        matches!(
            self,
            CameraCrash | FrameLost | CameraCrashCrossSensor | CameraCrashCrosstalk | FrameLostCrossSensor | FrameLostCrosstalk
        )
    }

    fn is_alignment(self) -> bool {
        matches!(self, CorruptionKind::SpatialMisalignment | CorruptionKind::TemporalMisalignment)
    }

    fn parts(self) -> (Option<CameraEffect>, Option<LidarEffect>) {
        use CameraEffect as C;
        use CorruptionKind::*;
        use LidarEffect as L;
        match self {
            MotionBlur => (Some(C::Blur), Some(L::Blur)),
            TemporalMisalignment => (Some(C::Temporal), None),
            SpatialMisalignment => (Some(C::Spatial), None),
            Fog => (Some(C::Fog), Some(L::Fog)),
            Snow => (Some(C::Snow), Some(L::Snow)),
            CameraCrash => (Some(C::Crash), None),
            FrameLost => (Some(C::FrameLost), None),
            CrossSensor => (None, Some(L::CrossSensor)),
            Crosstalk => (None, Some(L::Crosstalk)),
            CameraCrashCrossSensor => (Some(C::Crash), Some(L::CrossSensor)),
            CameraCrashCrosstalk => (Some(C::Crash), Some(L::Crosstalk)),
            FrameLostCrossSensor => (Some(C::FrameLost), Some(L::CrossSensor)),
            FrameLostCrosstalk => (Some(C::FrameLost), Some(L::Crosstalk)),
        }
    }

    pub fn touches_camera(self) -> bool {
        self.parts().0.is_some()
    }

    pub fn touches_lidar(self) -> bool {
        self.parts().1.is_some()
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::SUITE.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::SUITE.iter().map(|k| k.name()).collect();
            Error::Corruption(format!("unknown corruption {s:?}; valid names: {}", valid.join(", ")))
        })
    }
}

impl TryFrom<String> for CorruptionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CorruptionKind> for String {
    fn from(k: CorruptionKind) -> String {
        k.name().to_string()
    }
}

/// All 13 kinds in report order with their category.
pub fn corruption_suite() -> Vec<(CorruptionKind, Category)> {
    CorruptionKind::SUITE.iter().map(|&k| (k, k.category())).collect()
}

/// Parses `all` or a comma-separated list of names.
pub fn parse_kind_list(s: &str) -> Result<Vec<CorruptionKind>> {
    if s.trim() == "all" {
        return Ok(CorruptionKind::SUITE.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

pub fn parse_severity_list(s: &str) -> Result<Vec<u8>> {
    s.split(',')
        .map(|p| {
            let l: u8 = p
                .trim()
                .parse()
                .map_err(|_| Error::Corruption(format!("invalid severity {p:?}")))?;
            validate_level(l)?;
            Ok(l)
        })
        .collect()
}

fn validate_level(level: u8) -> Result<()> {
    if !(1..=3).contains(&level) {
        return Err(Error::Corruption(format!("severity must be 1, 2 or 3, got {level}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        validate_level(severity)?;
        Ok(Self { kind, severity })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.severity)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    /// `name:level`, e.g. `frame_lost+cross_talk:1`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, level) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Corruption(format!("expected name:level, got {s:?}")))?;
        let level = level
            .parse()
            .map_err(|_| Error::Corruption(format!("invalid severity in {s:?}")))?;
        Self::new(name.parse()?, level)
    }
}

/// Per-level parameters, index 0 = easy, 2 = hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityTable {
    pub crashed_cameras: [usize; 3],
    pub frame_loss_prob: [f64; 3],
    pub crosstalk_frac: [f64; 3],
    pub cross_sensor_beams: [usize; 3],
    pub cross_sensor_sigma_m: [f64; 3],
    pub fog_blend: [f64; 3],
    pub fog_beta: [f64; 3],
    pub fog_noise_frac: [f64; 3],
    pub snow_pixel_frac: [f64; 3],
    pub snow_scatter_frac: [f64; 3],
    pub snow_drop_frac: [f64; 3],
    pub blur_width_px: [usize; 3],
    pub blur_sigma_m: [f64; 3],
    pub misalign_yaw_deg: [f64; 3],
    pub misalign_shift_m: [f64; 3],
    pub time_offset_s: [f64; 3],
    /// Beam count the cross-sensor subset is taken from.
    pub reference_beams: usize,
    /// Radius for fog and snow near-range scatter.
    pub near_range_m: f64,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            crashed_cameras: [2, 4, 6],
            frame_loss_prob: [0.25, 0.5, 0.75],
            crosstalk_frac: [0.02, 0.05, 0.10],
            cross_sensor_beams: [24, 16, 8],
            cross_sensor_sigma_m: [0.01, 0.02, 0.04],
            fog_blend: [0.3, 0.5, 0.7],
            fog_beta: [0.02, 0.05, 0.10],
            fog_noise_frac: [0.01, 0.02, 0.04],
            snow_pixel_frac: [0.01, 0.03, 0.05],
            snow_scatter_frac: [0.01, 0.03, 0.05],
            snow_drop_frac: [0.05, 0.10, 0.20],
            blur_width_px: [3, 5, 9],
            blur_sigma_m: [0.02, 0.05, 0.10],
            misalign_yaw_deg: [0.5, 1.0, 2.0],
            misalign_shift_m: [0.05, 0.10, 0.20],
            time_offset_s: [0.25, 0.5, 1.0],
            reference_beams: 32,
            near_range_m: 10.0,
        }
    }
}

fn usize3(a: [usize; 3]) -> [f64; 3] {
    a.map(|v| v as f64)
}

impl SeverityTable {
    /// Every parameter that should grow with level for `kind`, dominant
    /// magnitude first. Beam subsets count removed beams.
    pub fn magnitudes(&self, kind: CorruptionKind) -> Vec<(&'static str, [f64; 3])> {
        let (cam, lid) = kind.parts();
        let mut out = Vec::new();
        match cam {
            Some(CameraEffect::Crash) => out.push(("crashed_cameras", usize3(self.crashed_cameras))),
            Some(CameraEffect::FrameLost) => out.push(("frame_loss_prob", self.frame_loss_prob)),
            Some(CameraEffect::Fog) => out.push(("fog_blend", self.fog_blend)),
            Some(CameraEffect::Snow) => out.push(("snow_pixel_frac", self.snow_pixel_frac)),
            Some(CameraEffect::Blur) => out.push(("blur_width_px", usize3(self.blur_width_px))),
            Some(CameraEffect::Spatial) => {
                out.push(("misalign_yaw_deg", self.misalign_yaw_deg));
                out.push(("misalign_shift_m", self.misalign_shift_m));
            }
            Some(CameraEffect::Temporal) => out.push(("time_offset_s", self.time_offset_s)),
            None => {}
        }
        match lid {
            Some(LidarEffect::Crosstalk) => out.push(("crosstalk_frac", self.crosstalk_frac)),
            Some(LidarEffect::CrossSensor) => {
                let removed = self.cross_sensor_beams.map(|b| self.reference_beams as f64 - b as f64);
                out.push(("removed_beams", removed));
                out.push(("cross_sensor_sigma_m", self.cross_sensor_sigma_m));
            }
            Some(LidarEffect::Fog) => {
                out.push(("fog_beta", self.fog_beta));
                out.push(("fog_noise_frac", self.fog_noise_frac));
            }
            Some(LidarEffect::Snow) => {
                out.push(("snow_drop_frac", self.snow_drop_frac));
                out.push(("snow_scatter_frac", self.snow_scatter_frac));
            }
            Some(LidarEffect::Blur) => out.push(("blur_sigma_m", self.blur_sigma_m)),
            None => {}
        }
        out
    }

    pub fn dominant(&self, kind: CorruptionKind, level: u8) -> Result<f64> {
        validate_level(level)?;
        Ok(self.magnitudes(kind)[0].1[level as usize - 1])
    }

    /// Fails on any parameter that decreases from one level to the next.
    pub fn check_monotone(&self) -> Result<()> {
        for kind in CorruptionKind::SUITE {
            for (name, v) in self.magnitudes(kind) {
                if !(v[0] <= v[1] && v[1] <= v[2]) {
                    return Err(Error::Config(format!("{kind}: {name} is not monotone in level: {v:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionLog {
    pub injected: usize,
    pub dropped: usize,
    pub zeroed_cameras: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub scene: Scene,
    pub log: CorruptionLog,
}

pub fn apply_corruption(scene: &Scene, spec: &CorruptionSpec, seed: u64) -> Result<Corrupted> {
    apply_corruption_with(scene, spec, seed, &SeverityTable::default())
}

/// Replaces sensor data per `spec`. The map and the untouched modality are
/// copied verbatim. Combined kinds run the camera side, then the LiDAR side,
/// each on its own seeded stream.
pub fn apply_corruption_with(scene: &Scene, spec: &CorruptionSpec, seed: u64, table: &SeverityTable) -> Result<Corrupted> {
    validate_level(spec.severity)?;
    let l = spec.severity as usize - 1;
    let (cam, lid) = spec.kind.parts();
    let mut out = scene.clone();
    let mut log = CorruptionLog::default();
    if let Some(fx) = cam {
        let mut rng = rng_for(seed, &[spec.kind.name(), "camera"]);
        corrupt_camera(&mut out, fx, l, table, &mut rng, &mut log)?;
    }
    if let Some(fx) = lid {
        let mut rng = rng_for(seed, &[spec.kind.name(), "lidar"]);
        corrupt_lidar(&mut out, fx, l, table, &mut rng, &mut log)?;
    }
    Ok(Corrupted { scene: out, log })
}

fn corrupt_camera(
    scene: &mut Scene,
    fx: CameraEffect,
    l: usize,
    t: &SeverityTable,
    rng: &mut ChaCha8Rng,
    log: &mut CorruptionLog,
) -> Result<()> {
    let frames = &mut scene.cameras;
    let n = frames.images.len();
    match fx {
        CameraEffect::Crash => {
            let k = t.crashed_cameras[l].min(n);
            let mut idx = sample(rng, n, k).into_vec();
            idx.sort_unstable();
            for &i in &idx {
                frames.images[i].data.fill(0);
            }
            log.zeroed_cameras = idx;
        }
        CameraEffect::FrameLost => {
            let p = t.frame_loss_prob[l];
            for (i, img) in frames.images.iter_mut().enumerate() {
                if rng.random::<f64>() < p {
                    img.data.fill(0);
                    log.zeroed_cameras.push(i);
                }
            }
        }
        CameraEffect::Fog => {
            let f = t.fog_blend[l];
            for img in &mut frames.images {
                for v in &mut img.data {
                    *v = ((1.0 - f) * *v as f64 + f * 128.0).round() as u8;
                }
            }
        }
        CameraEffect::Snow => {
            for img in &mut frames.images {
                let px = img.width * img.height;
                let k = (t.snow_pixel_frac[l] * px as f64).round() as usize;
                for i in sample(rng, px, k.min(px)) {
                    img.data[i * 3..i * 3 + 3].fill(255);
                }
            }
        }
        CameraEffect::Blur => {
            for img in &mut frames.images {
                *img = box_blur_horizontal(img, t.blur_width_px[l]);
            }
        }
        CameraEffect::Spatial => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = Mat3::rot_z(sign * t.misalign_yaw_deg[l].to_radians());
            let shift = [t.misalign_shift_m[l] * dir.cos(), t.misalign_shift_m[l] * dir.sin(), 0.0];
            for cam in &mut frames.cameras {
                let e = &mut cam.extrinsics;
                e.rotation = rot.mul(&e.rotation);
                let p = rot.mul_vec(e.translation);
                e.translation = [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
            }
        }
        CameraEffect::Temporal => {
            let dt = t.time_offset_s[l];
            let mut rig = frames.cameras.clone();
            for cam in &mut rig {
                cam.extrinsics.translation[0] -= scene.ego_velocity[0] * dt;
                cam.extrinsics.translation[1] -= scene.ego_velocity[1] * dt;
            }
            frames.images = render_images(&scene.map, &rig, &scene.config, scene.seed)?;
            frames.timestamp -= dt;
        }
    }
    Ok(())
}

/// Box filter of odd `width` along rows, edges clamped.
pub fn box_blur_horizontal(img: &Image, width: usize) -> Image {
    let r = (width / 2) as isize;
    let n = (2 * r + 1) as u32;
    let mut out = img.clone();
    let w = img.width as isize;
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0u32; 3];
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                let p = img.pixel(xx, y);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
            out.set_pixel(x, y, acc.map(|a| ((a + n / 2) / n) as u8));
        }
    }
    out
}

fn random_point(rng: &mut ChaCha8Rng, radius: f64, z_max: f64, refl: (f64, f64), beams: u16) -> LidarPoint {
    let r = radius * rng.random::<f64>().sqrt();
    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    LidarPoint {
        x: (r * th.cos()) as f32,
        y: (r * th.sin()) as f32,
        z: rng.random_range(0.0..z_max) as f32,
        reflectivity: rng.random_range(refl.0..refl.1) as f32,
        beam: rng.random_range(0..beams.max(1)),
    }
}

fn corrupt_lidar(
    scene: &mut Scene,
    fx: LidarEffect,
    l: usize,
    t: &SeverityTable,
    rng: &mut ChaCha8Rng,
    log: &mut CorruptionLog,
) -> Result<()> {
    let origin = scene.config.lidar.origin();
    let max_range = scene.config.lidar.max_range;
    let cloud: &mut PointCloud = &mut scene.lidar;
    let p_in = cloud.points.len();
    let beams = cloud.beam_count;
    let count = |frac: f64| (frac * p_in as f64).round() as usize;
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Corruption(e.to_string()));
    match fx {
        LidarEffect::Crosstalk => {
            let n = count(t.crosstalk_frac[l]);
            for _ in 0..n {
                let p = random_point(rng, max_range, 3.0, (0.0, 1.0), beams);
                cloud.points.push(p);
            }
            log.injected += n;
        }
        LidarEffect::CrossSensor => {
            let b = beams as usize;
            let keep_n = t.cross_sensor_beams[l].min(b);
            let mut keep = vec![false; b];
            for j in 0..keep_n {
                keep[j * b / keep_n] = true;
            }
            let noise = normal(t.cross_sensor_sigma_m[l])?;
            let before = cloud.points.len();
            cloud.points.retain(|p| keep[p.beam as usize]);
            log.dropped += before - cloud.points.len();
            for p in &mut cloud.points {
                let r = p.range_from(origin);
                if r > 1e-9 {
                    let s = (r + noise.sample(rng)) / r;
                    p.x = (origin[0] + (p.x as f64 - origin[0]) * s) as f32;
                    p.y = (origin[1] + (p.y as f64 - origin[1]) * s) as f32;
                    p.z = (origin[2] + (p.z as f64 - origin[2]) * s) as f32;
                }
            }
        }
        LidarEffect::Fog => {
            let beta = t.fog_beta[l];
            let before = cloud.points.len();
            cloud
                .points
                .retain(|p| rng.random::<f64>() < (-2.0 * beta * p.range_from(origin)).exp());
            log.dropped += before - cloud.points.len();
            let n = count(t.fog_noise_frac[l]);
            for _ in 0..n {
                let p = random_point(rng, t.near_range_m, 2.0, (0.0, 0.3), beams);
                cloud.points.push(p);
            }
            log.injected += n;
        }
        LidarEffect::Snow => {
            let k = count(t.snow_drop_frac[l]).min(p_in);
            let mut gone = vec![false; p_in];
            for i in sample(rng, p_in, k) {
                gone[i] = true;
            }
            let mut i = 0;
            cloud.points.retain(|_| {
                i += 1;
                !gone[i - 1]
            });
            log.dropped += k;
            let n = count(t.snow_scatter_frac[l]);
            for _ in 0..n {
                let p = random_point(rng, t.near_range_m, 2.5, (0.5, 1.0), beams);
                cloud.points.push(p);
            }
            log.injected += n;
        }
        LidarEffect::Blur => {
            let [vx, vy] = scene.ego_velocity;
            let speed = vx.hypot(vy);
            let dir = if speed > 1e-9 { [vx / speed, vy / speed] } else { [1.0, 0.0] };
            let noise = normal(t.blur_sigma_m[l])?;
            for p in &mut cloud.points {
                let e = noise.sample(rng);
                p.x = (p.x as f64 + e * dir[0]) as f32;
                p.y = (p.y as f64 + e * dir[1]) as f32;
            }
        }
    }
    Ok(())
}
