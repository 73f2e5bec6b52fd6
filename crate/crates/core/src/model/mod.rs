//! Toy map-construction network: IPM camera encoder, pillar LiDAR encoder,
//! interaction-transformer fusion, and a fixed-query polyline decoder.

mod checkpoint;
mod loss;
mod raster;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{canonical_polyline, compute_loss, greedy_match, loss_graph, GtInstance, LossConfig};
pub use raster::{camera_raster, lidar_raster, BevLayout, LIDAR_FEATURES};
pub use train::{train, AugmentConfig, StepRecord, TrainConfig, TrainLog, DESK_LR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{cit_graph, dynamic_fuse_graph, BevGrid, CitParams, CitVars, FusionConfig, Modality, ModalityMask};
use crate::geom::{resample_polyline, Point2};
use crate::scene::{CameraFrameSet, MapClass, PerceptionRange, PointCloud};
use crate::seeding::rng_for;
use crate::tensor::{Graph, Tensor, Var};

/// Class slots in decoder logits; the last one is background.
pub const NUM_LOGITS: usize = 4;
pub const BACKGROUND: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub range: PerceptionRange,
    /// Sub-samples per cell side in the camera raster.
    pub subsamples: usize,
    pub cam_hidden: usize,
    pub queries: usize,
    pub points: usize,
    /// Learned point offsets are bounded by this many cells.
    pub offset_cells: f64,
    /// Width of the second-stage attention prior around the coarse point, cells.
    pub local_sigma_cells: f64,
    /// Bound of the refinement step, cells.
    pub refine_cells: f64,
    /// Width of the initial attention prior around each query anchor, cells.
    pub anchor_sigma_cells: f64,
    /// Lateral span of query anchors as a fraction of the lateral range.
    pub anchor_span: f64,
    /// Trailing queries whose anchors are closed boxes rather than lines.
    pub ring_queries: usize,
    /// Anchor box size (longitudinal, lateral) in metres.
    pub ring_size: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            range: PerceptionRange::default(),
            subsamples: 3,
            cam_hidden: 32,
            queries: 12,
            points: 10,
            offset_cells: 1.0,
            local_sigma_cells: 1.0,
            refine_cells: 0.5,
            anchor_sigma_cells: 3.0,
            anchor_span: 0.75,
            ring_queries: 3,
            ring_size: [4.0, 10.5],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.subsamples == 0 || self.cam_hidden == 0 || self.queries == 0 || self.points < 2 {
            return Err(Error::Config("model needs subsamples, hidden width and queries >= 1 and points >= 2".into()));
        }
        if !(self.range.lateral > 0.0 && self.range.longitudinal > 0.0) {
            return Err(Error::Config("model range must be positive".into()));
        }
        if self.ring_queries > self.queries {
            return Err(Error::Config("ring queries cannot exceed the query count".into()));
        }
        if !(self.ring_size[0] > 0.0 && self.ring_size[1] > 0.0) {
            return Err(Error::Config("ring anchor size must be positive".into()));
        }
        if !(self.offset_cells >= 0.0 && self.refine_cells >= 0.0) {
            return Err(Error::Config("offset bounds must be non-negative".into()));
        }
        if !(self.anchor_sigma_cells > 0.0 && self.local_sigma_cells > 0.0) {
            return Err(Error::Config("attention prior widths must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.fusion.bev_h * self.fusion.bev_w
    }

    pub fn camera_features(&self) -> usize {
        3 * self.subsamples * self.subsamples
    }
}

/// Every learnable tensor. Encoders carry no bias so an all-zero raster
/// encodes to an all-zero grid, the same state modality dropout produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cam_w1: Tensor,
    pub cam_w2: Tensor,
    pub lidar_w: Tensor,
    pub cit: CitParams,
    /// `QP×C` content keys, one per (query, point).
    pub dec_keys: Tensor,
    /// `QP×HW` learned spatial prior.
    pub dec_bias: Tensor,
    pub off_w: Tensor,
    pub off_b: Tensor,
    pub cls_w: Tensor,
    /// `Q×4` per-query class bias.
    pub cls_b: Tensor,
    /// `2C×2` refinement from the feature sampled at each point and its
    /// pooled feature.
    pub ref_w: Tensor,
    pub ref_b: Tensor,
    /// `QP×C` second-stage keys, shifted by `pooled·loc_w` (`C×C`).
    pub loc_keys: Tensor,
    pub loc_w: Tensor,
    pub loc_off_w: Tensor,
    pub loc_off_b: Tensor,
}

const OWN_NAMES: [&str; 15] = [
    "cam_w1", "cam_w2", "lidar_w", "dec_keys", "dec_bias", "off_w", "off_b", "cls_w", "cls_b", "ref_w", "ref_b",
    "loc_keys", "loc_w", "loc_off_w", "loc_off_b",
];

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &["init"]);
        let c = cfg.fusion.channels;
        let qp = cfg.queries * cfg.points;
        let u = |shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let cam_w1 = u(&[cfg.camera_features(), cfg.cam_hidden], cfg.camera_features(), &mut rng);
        let cam_w2 = u(&[cfg.cam_hidden, c], cfg.cam_hidden, &mut rng);
        let lidar_w = u(&[LIDAR_FEATURES, c], LIDAR_FEATURES, &mut rng);
        let cit = CitParams::init(&cfg.fusion, &mut rng)?;
        let dec_keys = Tensor::uniform(&[qp, c], 0.1, &mut rng);
        let off_w = Tensor::uniform(&[c, 2], 0.1, &mut rng);
        let cls_w = Tensor::uniform(&[c, NUM_LOGITS], 0.1, &mut rng);
        let ref_w = Tensor::uniform(&[2 * c, 2], 0.1, &mut rng);
        let loc_keys = Tensor::uniform(&[qp, c], 0.1, &mut rng);
        let loc_w = Tensor::uniform(&[c, c], 0.1, &mut rng);
        let loc_off_w = Tensor::uniform(&[c, 2], 0.1, &mut rng);
        Ok(Self {
            cam_w1,
            cam_w2,
            lidar_w,
            cit,
            dec_keys,
            dec_bias: anchor_prior(cfg),
            off_w,
            off_b: Tensor::zeros(&[1, 2]),
            cls_w,
            cls_b: Tensor::zeros(&[cfg.queries, NUM_LOGITS]),
            ref_w,
            ref_b: Tensor::zeros(&[1, 2]),
            loc_keys,
            loc_w,
            loc_off_w,
            loc_off_b: Tensor::zeros(&[1, 2]),
        })
    }

    /// Names and tensors in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let own = [
            &self.cam_w1, &self.cam_w2, &self.lidar_w, &self.dec_keys, &self.dec_bias, &self.off_w, &self.off_b,
            &self.cls_w, &self.cls_b, &self.ref_w, &self.ref_b, &self.loc_keys, &self.loc_w, &self.loc_off_w,
            &self.loc_off_b,
        ];
        let mut out: Vec<(String, &Tensor)> = OWN_NAMES.iter().map(|n| n.to_string()).zip(own).collect();
        for (n, t) in crate::fusion::CIT_PARAM_NAMES.iter().zip(self.cit.tensors()) {
            out.push((format!("cit.{n}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.cam_w1, &mut self.cam_w2, &mut self.lidar_w, &mut self.dec_keys, &mut self.dec_bias,
            &mut self.off_w, &mut self.off_b, &mut self.cls_w, &mut self.cls_b, &mut self.ref_w, &mut self.ref_b,
            &mut self.loc_keys, &mut self.loc_w, &mut self.loc_off_w, &mut self.loc_off_b,
        ];
        out.extend(self.cit.tensors_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn register(&self, g: &mut Graph) -> ModelVars {
        let leaf = |g: &mut Graph, t: &Tensor| g.leaf(t.clone());
        ModelVars {
            cam_w1: leaf(g, &self.cam_w1),
            cam_w2: leaf(g, &self.cam_w2),
            lidar_w: leaf(g, &self.lidar_w),
            dec_keys: leaf(g, &self.dec_keys),
            dec_bias: leaf(g, &self.dec_bias),
            off_w: leaf(g, &self.off_w),
            off_b: leaf(g, &self.off_b),
            cls_w: leaf(g, &self.cls_w),
            ref_w: leaf(g, &self.ref_w),
            ref_b: leaf(g, &self.ref_b),
            loc_keys: leaf(g, &self.loc_keys),
            loc_w: leaf(g, &self.loc_w),
            loc_off_w: leaf(g, &self.loc_off_w),
            loc_off_b: leaf(g, &self.loc_off_b),
            cls_b: leaf(g, &self.cls_b),
            cit: self.cit.register(g),
        }
    }
}

/// Anchor polylines: the first `Q - ring_queries` are longitudinal lines
/// spread across the road, the rest are boxes spaced along it, traced from
/// the front-left corner the way closed map elements are stored.
pub fn anchor_polylines(cfg: &ModelConfig) -> Vec<Vec<Point2>> {
    let lines = cfg.queries - cfg.ring_queries;
    let span = cfg.anchor_span * cfg.range.lateral;
    let lx = cfg.range.longitudinal;
    let mut out = Vec::with_capacity(cfg.queries);
    for q in 0..lines {
        let y = if lines == 1 {
            0.0
        } else {
            span - 2.0 * span * q as f64 / (lines - 1) as f64
        };
        out.push(resample_polyline(&[[lx, y], [-lx, y]], cfg.points));
    }
    let reach = 0.5 * lx;
    let (d, w) = (cfg.ring_size[0] / 2.0, cfg.ring_size[1] / 2.0);
    for r in 0..cfg.ring_queries {
        let x = if cfg.ring_queries == 1 {
            0.0
        } else {
            reach - 2.0 * reach * r as f64 / (cfg.ring_queries - 1) as f64
        };
        let ring = [[x + d, w], [x + d, -w], [x - d, -w], [x - d, w], [x + d, w]];
        out.push(resample_polyline(&ring, cfg.points));
    }
    out
}

/// Gaussian log-prior centring each query point's attention on its anchor,
/// so untrained queries already decode to their anchor polylines.
fn anchor_prior(cfg: &ModelConfig) -> Tensor {
    let lay = BevLayout::new(cfg);
    let centres = lay.centres();
    let [dx, dy] = lay.cell_size();
    let (sx, sy) = (cfg.anchor_sigma_cells * dx, cfg.anchor_sigma_cells * dy);
    let mut d = Vec::with_capacity(cfg.queries * cfg.points * cfg.cells());
    for [x, y] in anchor_polylines(cfg).into_iter().flatten() {
        for c in centres.data().chunks(2) {
            d.push(-0.5 * (((c[0] - x) / sx).powi(2) + ((c[1] - y) / sy).powi(2)));
        }
    }
    Tensor::new(&[cfg.queries * cfg.points, cfg.cells()], d).expect("sized above")
}

/// Graph handles mirroring [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub cam_w1: Var,
    pub cam_w2: Var,
    pub lidar_w: Var,
    pub cit: CitVars,
    pub dec_keys: Var,
    pub dec_bias: Var,
    pub off_w: Var,
    pub off_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub ref_w: Var,
    pub ref_b: Var,
    pub loc_keys: Var,
    pub loc_w: Var,
    pub loc_off_w: Var,
    pub loc_off_b: Var,
}

impl ModelVars {
    /// Inverse of [`ModelVars::all`].
    pub fn from_slice(heads: usize, v: &[Var]) -> Self {
        Self {
            cam_w1: v[0],
            cam_w2: v[1],
            lidar_w: v[2],
            dec_keys: v[3],
            dec_bias: v[4],
            off_w: v[5],
            off_b: v[6],
            cls_w: v[7],
            cls_b: v[8],
            ref_w: v[9],
            ref_b: v[10],
            loc_keys: v[11],
            loc_w: v[12],
            loc_off_w: v[13],
            loc_off_b: v[14],
            cit: CitVars::from_slice(heads, &v[15..]),
        }
    }

    /// Handles in [`ModelParams::tensors_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![
            self.cam_w1, self.cam_w2, self.lidar_w, self.dec_keys, self.dec_bias, self.off_w, self.off_b, self.cls_w,
            self.cls_b, self.ref_w, self.ref_b, self.loc_keys, self.loc_w, self.loc_off_w, self.loc_off_b,
        ];
        v.extend(self.cit.all());
        v
    }
}

/// Pre-encoder rasters for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasters {
    pub camera: Tensor,
    pub lidar: Tensor,
}

impl Rasters {
    pub fn new(frames: &CameraFrameSet, cloud: &PointCloud, cfg: &ModelConfig) -> Self {
        Self {
            camera: camera_raster(frames, cfg),
            lidar: lidar_raster(cloud, cfg),
        }
    }
}

pub fn camera_encoder_graph(g: &mut Graph, raster: Var, p: &ModelVars) -> Result<Var> {
    let h = g.matmul(raster, p.cam_w1)?;
    let h = g.relu(h);
    Ok(g.matmul(h, p.cam_w2)?)
}

pub fn lidar_encoder_graph(g: &mut Graph, raster: Var, p: &ModelVars) -> Result<Var> {
    Ok(g.matmul(raster, p.lidar_w)?)
}

/// Decoder outputs on the graph: `QP×2` points and `Q×4` logits, plus the
/// first-stage points when they should be supervised too.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOut {
    pub points: Var,
    pub logits: Var,
    pub coarse: Option<Var>,
}

/// Softmax attention over cells: the attention-weighted cell centre plus a
/// bounded offset from the pooled feature. Returns (points, pooled).
fn attend_points(g: &mut Graph, fused: Var, logits: Var, off_w: Var, off_b: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let lay = BevLayout::new(cfg);
    let attn = g.softmax_rows(logits)?;
    let pooled = g.matmul(attn, fused)?;
    let centres = g.leaf(lay.centres());
    let centroid = g.matmul(attn, centres)?;
    let off = g.matmul(pooled, off_w)?;
    let off = g.add_row(off, off_b)?;
    let off = g.tanh(off);
    let [dx, dy] = lay.cell_size();
    let reach = g.leaf(Tensor::new(&[1, 2], vec![cfg.offset_cells * dx, cfg.offset_cells * dy])?);
    let off = g.mul_row(off, reach)?;
    Ok((g.add(centroid, off)?, pooled))
}

/// `QP×HW` log-Gaussian around each point, up to a per-row constant:
/// `p·diag(1/σ²)·cᵀ − ½·c²/σ²`.
fn local_prior(g: &mut Graph, points: Var, cfg: &ModelConfig) -> Result<Var> {
    let lay = BevLayout::new(cfg);
    let [dx, dy] = lay.cell_size();
    let (sx, sy) = (cfg.local_sigma_cells * dx, cfg.local_sigma_cells * dy);
    let centres = lay.centres();
    let n = centres.shape()[0];
    let ct: Vec<f64> = (0..2).flat_map(|k| centres.data().iter().skip(k).step_by(2).copied()).collect();
    let ct = g.leaf(Tensor::new(&[2, n], ct)?);
    let inv = g.leaf(Tensor::new(&[1, 2], vec![1.0 / (sx * sx), 1.0 / (sy * sy)])?);
    let row: Vec<f64> = centres
        .data()
        .chunks(2)
        .map(|c| -0.5 * (c[0] * c[0] / (sx * sx) + c[1] * c[1] / (sy * sy)))
        .collect();
    let row = g.leaf(Tensor::new(&[1, n], row)?);
    let scaled = g.mul_row(points, inv)?;
    let cross = g.matmul(scaled, ct)?;
    Ok(g.add_row(cross, row)?)
}

/// Three stages per (query, point). Global attention under the learned
/// anchor prior gives a coarse point; attention again under a narrow
/// Gaussian around that point, with keys conditioned on the first pooled
/// feature, localises it; a bilinear refinement finishes. Class logits
/// come from the query's mean second-stage feature.
pub fn decoder_graph(g: &mut Graph, fused: Var, p: &ModelVars, cfg: &ModelConfig) -> Result<DecoderOut> {
    let c = cfg.fusion.channels;
    let (q, np) = (cfg.queries, cfg.points);
    let inv_sqrt_c = 1.0 / (c as f64).sqrt();
    let ft = g.transpose(fused)?;
    let logits = g.matmul(p.dec_keys, ft)?;
    let logits = g.scale(logits, inv_sqrt_c);
    let logits = g.add(logits, p.dec_bias)?;
    let (coarse, pooled) = attend_points(g, fused, logits, p.off_w, p.off_b, cfg)?;

    let keys = g.matmul(pooled, p.loc_w)?;
    let keys = g.add(keys, p.loc_keys)?;
    let logits = g.matmul(keys, ft)?;
    let logits = g.scale(logits, inv_sqrt_c);
    let prior = local_prior(g, coarse, cfg)?;
    let logits = g.add(logits, prior)?;
    let (local, pooled) = attend_points(g, fused, logits, p.loc_off_w, p.loc_off_b, cfg)?;
    let points = refine_graph(g, fused, local, pooled, p, cfg)?;

    let mut avg = vec![0.0; q * q * np];
    for i in 0..q {
        for k in 0..np {
            avg[i * q * np + i * np + k] = 1.0 / np as f64;
        }
    }
    let avg = g.leaf(Tensor::new(&[q, q * np], avg)?);
    let qfeat = g.matmul(avg, pooled)?;
    let cls = g.matmul(qfeat, p.cls_w)?;
    let cls = g.add(cls, p.cls_b)?;
    Ok(DecoderOut {
        points,
        logits: cls,
        coarse: Some(coarse),
    })
}

/// Last stage: bilinearly samples the fused grid at each point and
/// moves the point by a bounded residual predicted from that sample and the
/// point's pooled feature.
fn refine_graph(g: &mut Graph, fused: Var, coarse: Var, pooled: Var, p: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    let lay = BevLayout::new(cfg);
    let [dx, dy] = lay.cell_size();
    // Metric point -> fractional (row, col) with cell centres at integers.
    let to_grid = g.leaf(Tensor::new(&[1, 2], vec![-1.0 / dx, -1.0 / dy])?);
    let origin = g.leaf(Tensor::new(
        &[1, 2],
        vec![cfg.range.longitudinal / dx - 0.5, cfg.range.lateral / dy - 0.5],
    )?);
    let coords = g.mul_row(coarse, to_grid)?;
    let coords = g.add_row(coords, origin)?;
    let sampled = g.grid_sample(fused, coords, lay.h, lay.w)?;
    let feat = g.concat_cols(&[sampled, pooled])?;
    let delta = g.matmul(feat, p.ref_w)?;
    let delta = g.add_row(delta, p.ref_b)?;
    let delta = g.tanh(delta);
    let reach = g.leaf(Tensor::new(&[1, 2], vec![cfg.refine_cells * dx, cfg.refine_cells * dy])?);
    let delta = g.mul_row(delta, reach)?;
    Ok(g.add(coarse, delta)?)
}

/// Full forward pass. A modality absent from `mask` enters the fusion block
/// as an all-zero token grid.
pub fn forward_graph(
    g: &mut Graph,
    rasters: &Rasters,
    mask: ModalityMask,
    p: &ModelVars,
    cfg: &ModelConfig,
) -> Result<(DecoderOut, Var)> {
    let hw = cfg.cells();
    let c = cfg.fusion.channels;
    let cam = if mask.keeps_camera() {
        let r = g.leaf(rasters.camera.clone());
        camera_encoder_graph(g, r, p)?
    } else {
        g.leaf(Tensor::zeros(&[hw, c]))
    };
    let lidar = if mask.keeps_lidar() {
        let r = g.leaf(rasters.lidar.clone());
        lidar_encoder_graph(g, r, p)?
    } else {
        g.leaf(Tensor::zeros(&[hw, c]))
    };
    let (a, b) = cit_graph(g, cam, lidar, &p.cit)?;
    let fused = dynamic_fuse_graph(g, a, b, &p.cit)?;
    Ok((decoder_graph(g, fused, p, cfg)?, fused))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub points: Vec<Point2>,
    pub logits: [f64; NUM_LOGITS],
}

impl PredInstance {
    pub fn probabilities(&self) -> [f64; NUM_LOGITS] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.logits.map(|l| (l - m).exp());
        let s: f64 = e.iter().sum();
        e.map(|v| v / s)
    }

    pub fn score(&self, class: MapClass) -> f64 {
        self.probabilities()[class.index()]
    }
}

/// Fixed-size set of candidate instances for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPrediction {
    pub instances: Vec<PredInstance>,
}

impl MapPrediction {
    pub fn from_values(points: &Tensor, logits: &Tensor, n_points: usize) -> Self {
        let instances = logits
            .data()
            .chunks(NUM_LOGITS)
            .zip(points.data().chunks(2 * n_points))
            .map(|(l, pts)| PredInstance {
                points: pts.chunks(2).map(|p| [p[0], p[1]]).collect(),
                logits: [l[0], l[1], l[2], l[3]],
            })
            .collect();
        Self { instances }
    }

    pub fn is_finite(&self) -> bool {
        self.instances
            .iter()
            .all(|i| i.logits.iter().all(|v| v.is_finite()) && i.points.iter().flatten().all(|v| v.is_finite()))
    }
}

fn to_grid(t: Tensor, cfg: &ModelConfig, modality: Modality) -> Result<BevGrid> {
    let (h, w, c) = (cfg.fusion.bev_h, cfg.fusion.bev_w, cfg.fusion.channels);
    let mut t = t.reshape(&[h, w, c])?;
    t.grad = None;
    BevGrid::new(modality, t)
}

pub fn camera_to_bev(frames: &CameraFrameSet, params: &ModelParams, cfg: &ModelConfig) -> Result<BevGrid> {
    frames.validate()?;
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let r = g.leaf(camera_raster(frames, cfg));
    let out = camera_encoder_graph(&mut g, r, &p)?;
    to_grid(g.take(out), cfg, Modality::Camera)
}

pub fn lidar_to_bev(cloud: &PointCloud, params: &ModelParams, cfg: &ModelConfig) -> Result<BevGrid> {
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let r = g.leaf(lidar_raster(cloud, cfg));
    let out = lidar_encoder_graph(&mut g, r, &p)?;
    to_grid(g.take(out), cfg, Modality::Lidar)
}

pub fn decode_map(fused: &BevGrid, params: &ModelParams, cfg: &ModelConfig) -> Result<MapPrediction> {
    let (h, w, c) = fused.dims();
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let f = g.leaf(fused.features.reshape(&[h * w, c])?);
    let out = decoder_graph(&mut g, f, &p, cfg)?;
    Ok(MapPrediction::from_values(g.value(out.points), g.value(out.logits), cfg.points))
}

pub fn predict_rasters(rasters: &Rasters, params: &ModelParams, cfg: &ModelConfig, mask: ModalityMask) -> Result<MapPrediction> {
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let (out, _) = forward_graph(&mut g, rasters, mask, &p, cfg)?;
    Ok(MapPrediction::from_values(g.value(out.points), g.value(out.logits), cfg.points))
}

/// Runs the model on raw sensor data. `availability` names the modalities
/// present; a missing one is zero-filled exactly as in training.
pub fn infer(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &CameraFrameSet,
    cloud: &PointCloud,
    availability: Option<ModalityMask>,
) -> Result<MapPrediction> {
    let Some(mask) = availability else {
        return Err(Error::Invalid("inference needs at least one modality".into()));
    };
    frames.validate()?;
    predict_rasters(&Rasters::new(frames, cloud, cfg), params, cfg, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{apply_modality_mask, cit_forward, dynamic_fuse};
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn zero_decoder_gives_origin_and_uniform_logits() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        for t in [&mut p.dec_keys, &mut p.dec_bias, &mut p.off_w, &mut p.cls_w] {
            *t = Tensor::zeros(t.shape());
        }
        let fused = BevGrid::zeros(Modality::Camera, 20, 20, 32);
        let pred = decode_map(&fused, &p, &cfg).unwrap();
        assert_eq!(pred.instances.len(), 12);
        for inst in &pred.instances {
            assert_eq!(inst.points.len(), 10);
            assert!(inst.points.iter().flatten().all(|v| v.abs() < 1e-12));
            assert_eq!(inst.probabilities(), [0.25; 4]);
        }
    }

    #[test]
    fn untrained_queries_start_on_their_anchors() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let pred = decode_map(&BevGrid::zeros(Modality::Camera, 20, 20, 32), &p, &cfg).unwrap();
        let first = &pred.instances[0].points;
        assert!(first[0][0] > 20.0 && first[9][0] < -20.0);
        // The prior is truncated at the range edge, pulling outer lines in.
        assert!(first[4][1] > 9.0 && first[4][1] < 11.25, "{:?}", first[4]);
        assert!(pred.instances[1].points[4][1] < first[4][1]);
        // Middle ring query: a 4 x 10.5 m box at the origin.
        let ring = &pred.instances[10].points;
        let (cx, cy) = ring.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0] / 10.0, a.1 + p[1] / 10.0));
        assert!(cx.abs() < 1.0 && cy.abs() < 1.0, "{cx} {cy}");
        assert!(ring[0][1] > 2.0 && ring[3][1] < -2.0 && ring[6][0] < -1.0, "{ring:?}");
        assert_eq!(anchor_polylines(&cfg)[10][0], [2.0, 5.25]);
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        use crate::tensor::{finite_diff_report, TensorError};
        let cfg = ModelConfig {
            fusion: FusionConfig {
                bev_h: 6,
                bev_w: 6,
                channels: 8,
                heads: 2,
                mlp_hidden: 8,
            },
            subsamples: 1,
            cam_hidden: 4,
            queries: 7,
            points: 3,
            ring_queries: 1,
            ..ModelConfig::default()
        };
        for seed in 0..5 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            let rasters = Rasters::new(&s.cameras, &s.lidar, &cfg);
            let gt = GtInstance::from_map(&s.map, cfg.points);
            let params = ModelParams::init(&cfg, seed).unwrap();
            let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
            let rep = finite_diff_report(&inputs, 1e-4, |g, v| {
                let vars = ModelVars::from_slice(cfg.fusion.heads, v);
                let wrap = |e: Error| TensorError::Invalid(e.to_string());
                let (out, _) = forward_graph(g, &rasters, ModalityMask::Both, &vars, &cfg).map_err(wrap)?;
                Ok(loss_graph(g, &out, &gt, cfg.points, &LossConfig::default()).map_err(wrap)?.total)
            })
            .unwrap();
            assert!(rep.max_rel_err <= 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn staged_api_matches_graph_forward() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let cam = camera_to_bev(&s.cameras, &p, &cfg).unwrap();
        let lid = lidar_to_bev(&s.lidar, &p, &cfg).unwrap();
        assert_eq!(cam.features.shape(), &[20, 20, 32]);
        let (cam, lid) = apply_modality_mask(&cam, &lid, ModalityMask::Both);
        let (a, b) = cit_forward(&cam, &lid, &p.cit).unwrap();
        let fused = dynamic_fuse(&a, &b, &p.cit).unwrap();
        let staged = decode_map(&fused, &p, &cfg).unwrap();
        let direct = infer(&p, &cfg, &s.cameras, &s.lidar, Some(ModalityMask::Both)).unwrap();
        assert_eq!(staged, direct);
        assert!(direct.is_finite());
    }

    #[test]
    fn inference_modes() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let s = generate_scene(6, &SceneConfig::default()).unwrap();
        assert!(infer(&p, &cfg, &s.cameras, &s.lidar, None).is_err());
        for m in ModalityMask::ALL {
            let a = infer(&p, &cfg, &s.cameras, &s.lidar, Some(m)).unwrap();
            assert!(a.is_finite());
            assert_eq!(a, infer(&p, &cfg, &s.cameras, &s.lidar, Some(m)).unwrap());
        }
    }

    #[test]
    fn zero_sensors_zero_encodings() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let mut s = generate_scene(6, &SceneConfig::default()).unwrap();
        for img in &mut s.cameras.images {
            img.data.fill(0);
        }
        s.lidar.points.clear();
        assert!(camera_to_bev(&s.cameras, &p, &cfg).unwrap().is_zero());
        assert!(lidar_to_bev(&s.lidar, &p, &cfg).unwrap().is_zero());
    }
}
