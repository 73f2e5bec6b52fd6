//! On-disk scene bundle: one directory per scene.
//!
//! * `map.json`: classes and polylines
//! * `cam_<i>.ppm`: binary P6, 8-bit RGB
//! * `lidar.f32`: little-endian `f32` quintuples `x, y, z, reflectivity, beam`
//! * `meta.json`: calibration (row-major), timestamps, ego velocity, seed, config

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, CameraFrameSet, Image, LidarPoint, PointCloud, Pose, Scene, SceneConfig, VectorMap};
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::geom::Mat3;
use crate::seeding::sha256_hex;

#[derive(Serialize, Deserialize)]
struct CameraMeta {
    intrinsics: Vec<f64>,
    /// `[R | t]`, 3×4 row-major, camera→ego.
    extrinsics: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    camera_timestamp: f64,
    lidar_timestamp: f64,
    ego_velocity: [f64; 2],
    beam_count: u16,
    cameras: Vec<CameraMeta>,
    config: SceneConfig,
}

fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |m: &str| Error::format(path, m);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected binary P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad PPM width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad PPM height"))?;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(bad("PPM pixel data length mismatch"));
    }
    Ok(Image {
        width: w,
        height: h,
        data: data.to_vec(),
    })
}

fn encode_lidar(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.points.len() * 20);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.reflectivity, p.beam as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_lidar(bytes: &[u8], path: &Path) -> Result<Vec<LidarPoint>> {
    if bytes.len() % 20 != 0 {
        return Err(Error::format(path, "length is not a multiple of 20 bytes"));
    }
    bytes
        .chunks_exact(20)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
            let beam = f(4);
            if beam < 0.0 || beam.fract() != 0.0 || beam > u16::MAX as f32 {
                return Err(Error::format(path, format!("invalid beam index {beam}")));
            }
            Ok(LidarPoint {
                x: f(0),
                y: f(1),
                z: f(2),
                reflectivity: f(3),
                beam: beam as u16,
            })
        })
        .collect()
}

fn encode_meta(scene: &Scene) -> Vec<u8> {
    let meta = Meta {
        seed: scene.seed,
        camera_timestamp: scene.cameras.timestamp,
        lidar_timestamp: scene.lidar.timestamp,
        ego_velocity: scene.ego_velocity,
        beam_count: scene.lidar.beam_count,
        cameras: scene
            .cameras
            .cameras
            .iter()
            .map(|c| {
                let r = c.extrinsics.rotation.0;
                let t = c.extrinsics.translation;
                CameraMeta {
                    intrinsics: c.intrinsics.to_row_major().to_vec(),
                    extrinsics: vec![
                        r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2],
                        t[2],
                    ],
                }
            })
            .collect(),
        config: scene.config.clone(),
    };
    serde_json::to_vec_pretty(&meta).expect("meta serializes")
}

/// File name and bytes of every file in the bundle, in a fixed order.
fn bundle_files(scene: &Scene) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(
        "map.json".to_string(),
        serde_json::to_vec_pretty(&scene.map).expect("map serializes"),
    )];
    for (i, img) in scene.cameras.images.iter().enumerate() {
        files.push((format!("cam_{i}.ppm"), encode_ppm(img)));
    }
    files.push(("lidar.f32".to_string(), encode_lidar(&scene.lidar)));
    files.push(("meta.json".to_string(), encode_meta(scene)));
    files
}

/// SHA-256 over the bundle bytes; equal hashes mean byte-identical bundles.
pub fn scene_hash(scene: &Scene) -> String {
    let mut all = Vec::new();
    for (name, bytes) in bundle_files(scene) {
        all.extend_from_slice(name.as_bytes());
        all.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        all.extend_from_slice(&bytes);
    }
    sha256_hex(&all)
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in bundle_files(scene) {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let map_path = dir.join("map.json");
    let map: VectorMap =
        serde_json::from_slice(&read(&map_path)?).map_err(|e| Error::format(&map_path, e))?;
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_slice(&read(&meta_path)?).map_err(|e| Error::format(&meta_path, e))?;

    let mut cameras = Vec::with_capacity(meta.cameras.len());
    let mut images = Vec::with_capacity(meta.cameras.len());
    for (i, cm) in meta.cameras.iter().enumerate() {
        let k = Mat3::from_row_major(&cm.intrinsics)
            .ok_or_else(|| Error::format(&meta_path, format!("camera {i} intrinsics need 9 values")))?;
        let e = &cm.extrinsics;
        if e.len() != 12 {
            return Err(Error::format(&meta_path, format!("camera {i} extrinsics need 12 values")));
        }
        cameras.push(Camera {
            intrinsics: k,
            extrinsics: Pose {
                rotation: Mat3([[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]]),
                translation: [e[3], e[7], e[11]],
            },
        });
        let p = dir.join(format!("cam_{i}.ppm"));
        images.push(decode_ppm(&read(&p)?, &p)?);
    }
    let lidar_path = dir.join("lidar.f32");
    let points = decode_lidar(&read(&lidar_path)?, &lidar_path)?;
    let scene = Scene {
        map,
        cameras: CameraFrameSet {
            images,
            cameras,
            timestamp: meta.camera_timestamp,
        },
        lidar: PointCloud {
            points,
            beam_count: meta.beam_count,
            timestamp: meta.lidar_timestamp,
        },
        ego_velocity: meta.ego_velocity,
        seed: meta.seed,
        config: meta.config,
    };
    scene.validate().map_err(|e| Error::format(dir, e))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    #[test]
    fn bundle_roundtrip_is_exact() {
        let scene = generate_scene(9, &SceneConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back, scene);
        assert_eq!(scene_hash(&back), scene_hash(&scene));
    }

    #[test]
    fn corrupt_lidar_names_file() {
        let scene = generate_scene(2, &SceneConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        std::fs::write(dir.path().join("lidar.f32"), [0u8; 7]).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lidar.f32"), "{err}");
    }
}
