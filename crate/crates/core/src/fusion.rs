//! Cross-modal interaction transformer over concatenated camera and LiDAR BEV
//! tokens, dynamic fusion of the refined grids, and modality dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mlp_graph, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Camera,
    Lidar,
}

/// `H×W×C` feature grid for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub modality: Modality,
    pub features: Tensor,
}

impl BevGrid {
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        if features.shape().len() != 3 {
            return Err(Error::Invalid(format!("BEV grid must be H×W×C, got {:?}", features.shape())));
        }
        Ok(Self { modality, features })
    }

    pub fn zeros(modality: Modality, h: usize, w: usize, c: usize) -> Self {
        Self {
            modality,
            features: Tensor::zeros(&[h, w, c]),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.features.shape();
        (s[0], s[1], s[2])
    }

    pub fn is_zero(&self) -> bool {
        self.features.data().iter().all(|&v| v == 0.0)
    }
}

/// `T×C` token matrix; token `t` is cell `(t / W, t % W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
}

pub fn flatten_to_tokens(grid: &BevGrid) -> TokenMatrix {
    let (h, w, c) = grid.dims();
    TokenMatrix {
        tokens: grid.features.reshape(&[h * w, c]).expect("same element count"),
    }
}

pub fn unflatten_tokens(tokens: &TokenMatrix, h: usize, w: usize, modality: Modality) -> Result<BevGrid> {
    let (t, c) = tokens.tokens.dims2()?;
    if t != h * w {
        return Err(Error::Invalid(format!("{t} tokens cannot fill a {h}×{w} grid")));
    }
    BevGrid::new(modality, tokens.tokens.reshape(&[h, w, c])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub bev_h: usize,
    pub bev_w: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            bev_h: 20,
            bev_w: 20,
            channels: 32,
            heads: 4,
            mlp_hidden: 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bev_h == 0 || self.bev_w == 0 || self.channels == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        check_heads(self.channels, self.heads)
    }
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible into {heads} heads")));
    }
    Ok(())
}

/// Learnable parameters of the interaction transformer and the fusion gate.
///
/// Dynamic fusion: `P = [F_cam | F_lidar]·fuse_w + fuse_b`, then
/// `out = P ⊙ sigmoid(mean_rows(P)·gate_w + gate_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CitParams {
    pub heads: usize,
    /// `2HW×C`
    pub pos_embed: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    /// `2C×C`
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

pub const CIT_PARAM_NAMES: [&str; 13] = [
    "pos_embed", "wq", "wk", "wv", "wo", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "fuse_w", "fuse_b", "gate_w", "gate_b",
];

impl CitParams {
    /// Gaussian `σ = 0.02` positional embedding, uniform `±1/√fan_in`
    /// projections, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, hd) = (cfg.channels, cfg.mlp_hidden);
        let t = 2 * cfg.bev_h * cfg.bev_w;
        let u = |shape: &[usize], fan_in: usize, rng: &mut R| Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng);
        Ok(Self {
            heads: cfg.heads,
            pos_embed: Tensor::normal(&[t, c], 0.02, rng),
            wq: u(&[c, c], c, rng),
            wk: u(&[c, c], c, rng),
            wv: u(&[c, c], c, rng),
            wo: u(&[c, c], c, rng),
            mlp_w1: u(&[c, hd], c, rng),
            mlp_b1: Tensor::zeros(&[1, hd]),
            mlp_w2: u(&[hd, c], hd, rng),
            mlp_b2: Tensor::zeros(&[1, c]),
            fuse_w: u(&[2 * c, c], 2 * c, rng),
            fuse_b: Tensor::zeros(&[1, c]),
            gate_w: u(&[c, c], c, rng),
            gate_b: Tensor::zeros(&[1, c]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.pos_embed, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2,
            &self.mlp_b2, &self.fuse_w, &self.fuse_b, &self.gate_w, &self.gate_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.pos_embed, &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.mlp_w1,
            &mut self.mlp_b1, &mut self.mlp_w2, &mut self.mlp_b2, &mut self.fuse_w, &mut self.fuse_b,
            &mut self.gate_w, &mut self.gate_b,
        ]
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Records every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph) -> CitVars {
        let t = self.tensors().map(|t| g.leaf(t.clone()));
        CitVars::from_slice(self.heads, &t)
    }
}

/// Graph handles mirroring [`CitParams`].
#[derive(Debug, Clone, Copy)]
pub struct CitVars {
    pub heads: usize,
    pub pos_embed: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

impl CitVars {
    /// Builds from 13 handles in [`CIT_PARAM_NAMES`] order.
    pub fn from_slice(heads: usize, v: &[Var]) -> Self {
        Self {
            heads,
            pos_embed: v[0],
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            mlp_w1: v[5],
            mlp_b1: v[6],
            mlp_w2: v[7],
            mlp_b2: v[8],
            fuse_w: v[9],
            fuse_b: v[10],
            gate_w: v[11],
            gate_b: v[12],
        }
    }

    pub fn all(&self) -> [Var; 13] {
        [
            self.pos_embed, self.wq, self.wk, self.wv, self.wo, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
            self.fuse_w, self.fuse_b, self.gate_w, self.gate_b,
        ]
    }
}

/// Multi-head scaled dot-product self-attention, `Concat(Z_1..Z_h)·W^O`.
pub fn attention_graph(g: &mut Graph, t_in: Var, p: &CitVars) -> Result<Var> {
    let (q, k, v, dk) = qkv(g, t_in, p)?;
    let mut zs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        zs.push(g.attention(qh, kh, vh)?);
    }
    let z = if zs.len() == 1 { zs[0] } else { g.concat_cols(&zs)? };
    Ok(g.matmul(z, p.wo)?)
}

/// Projections with `Q` already divided by `√D_k`.
fn qkv(g: &mut Graph, t_in: Var, p: &CitVars) -> Result<(Var, Var, Var, usize)> {
    let c = g.value(p.wq).shape()[0];
    check_heads(c, p.heads)?;
    let dk = c / p.heads;
    let q = g.matmul(t_in, p.wq)?;
    // Scaling Q rather than the score matrix touches N·C values, not N².
    let q = g.scale(q, 1.0 / (dk as f64).sqrt());
    let k = g.matmul(t_in, p.wk)?;
    let v = g.matmul(t_in, p.wv)?;
    Ok((q, k, v, dk))
}

/// `T_in = [cam; lidar] + pos`, `T_out = MLP(attn(T_in)) + T_in`, split back
/// into the camera half and the LiDAR half.
pub fn cit_graph(g: &mut Graph, cam: Var, lidar: Var, p: &CitVars) -> Result<(Var, Var)> {
    let (n_cam, c) = g.value(cam).dims2()?;
    let (n_lid, c2) = g.value(lidar).dims2()?;
    if n_cam != n_lid || c != c2 {
        return Err(Error::Invalid(format!("camera tokens {n_cam}×{c} vs lidar tokens {n_lid}×{c2}")));
    }
    let t = g.concat_rows(&[cam, lidar])?;
    let t_in = g.add(t, p.pos_embed)?;
    let z = attention_graph(g, t_in, p)?;
    let m = mlp_graph(g, z, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)?;
    let t_out = g.add(m, t_in)?;
    Ok((g.slice_rows(t_out, 0, n_cam)?, g.slice_rows(t_out, n_cam, n_lid)?))
}

pub fn dynamic_fuse_graph(g: &mut Graph, cam: Var, lidar: Var, p: &CitVars) -> Result<Var> {
    let x = g.concat_cols(&[cam, lidar])?;
    let proj = g.matmul(x, p.fuse_w)?;
    let proj = g.add_row(proj, p.fuse_b)?;
    let pooled = g.mean_rows(proj)?;
    let gate = g.matmul(pooled, p.gate_w)?;
    let gate = g.add_row(gate, p.gate_b)?;
    let gate = g.sigmoid(gate);
    Ok(g.mul_row(proj, gate)?)
}

pub fn multi_head_attention(t_in: &TokenMatrix, params: &CitParams) -> Result<TokenMatrix> {
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let x = g.leaf(t_in.tokens.clone());
    let out = attention_graph(&mut g, x, &p)?;
    Ok(TokenMatrix { tokens: g.take(out) })
}

/// Per-head `softmax(QKᵀ/√D_k)` matrices.
pub fn attention_weights(t_in: &TokenMatrix, params: &CitParams) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let x = g.leaf(t_in.tokens.clone());
    let (q, k, _, dk) = qkv(&mut g, x, &p)?;
    (0..p.heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let a = g.softmax_rows(s)?;
            Ok(g.value(a).clone())
        })
        .collect()
}

fn check_pair(cam: &BevGrid, lidar: &BevGrid) -> Result<(usize, usize, usize)> {
    if cam.dims() != lidar.dims() {
        return Err(Error::Invalid(format!(
            "camera grid {:?} and lidar grid {:?} differ",
            cam.features.shape(),
            lidar.features.shape()
        )));
    }
    Ok(cam.dims())
}

pub fn cit_forward(cam: &BevGrid, lidar: &BevGrid, params: &CitParams) -> Result<(BevGrid, BevGrid)> {
    let (h, w, _) = check_pair(cam, lidar)?;
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let a = g.leaf(flatten_to_tokens(cam).tokens);
    let b = g.leaf(flatten_to_tokens(lidar).tokens);
    let (ca, lb) = cit_graph(&mut g, a, b, &p)?;
    let ca = TokenMatrix { tokens: g.take(ca) };
    let lb = TokenMatrix { tokens: g.take(lb) };
    Ok((
        unflatten_tokens(&ca, h, w, Modality::Camera)?,
        unflatten_tokens(&lb, h, w, Modality::Lidar)?,
    ))
}

pub fn dynamic_fuse(cam: &BevGrid, lidar: &BevGrid, params: &CitParams) -> Result<BevGrid> {
    let (h, w, _) = check_pair(cam, lidar)?;
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let a = g.leaf(flatten_to_tokens(cam).tokens);
    let b = g.leaf(flatten_to_tokens(lidar).tokens);
    let f = dynamic_fuse_graph(&mut g, a, b, &p)?;
    let mut out = unflatten_tokens(&TokenMatrix { tokens: g.take(f) }, h, w, Modality::Camera)?;
    out.features.grad = None;
    Ok(out)
}

/// `p_md`: chance a modality is dropped; `p_l`: chance LiDAR is the one kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_md: f64,
    pub p_l: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { p_md: 0.3, p_l: 0.5 }
    }
}

impl DropoutPolicy {
    pub const NONE: DropoutPolicy = DropoutPolicy { p_md: 0.0, p_l: 0.5 };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_md", self.p_md), ("p_l", self.p_l)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Probabilities of `[Both, LidarOnly, CameraOnly]`.
    pub fn probabilities(&self) -> [f64; 3] {
        [1.0 - self.p_md, self.p_md * self.p_l, self.p_md * (1.0 - self.p_l)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMask {
    Both,
    LidarOnly,
    CameraOnly,
}

impl ModalityMask {
    pub const ALL: [ModalityMask; 3] = [ModalityMask::Both, ModalityMask::LidarOnly, ModalityMask::CameraOnly];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn keeps_camera(self) -> bool {
        self != ModalityMask::LidarOnly
    }

    pub fn keeps_lidar(self) -> bool {
        self != ModalityMask::CameraOnly
    }
}

/// One uniform draw split at `1 - p_md` and `1 - p_md + p_md·p_l`.
pub fn sample_modality_mask<R: Rng + ?Sized>(policy: &DropoutPolicy, rng: &mut R) -> ModalityMask {
    let [both, lidar, _] = policy.probabilities();
    let u: f64 = rng.random();
    if u < both {
        ModalityMask::Both
    } else if u < both + lidar {
        ModalityMask::LidarOnly
    } else {
        ModalityMask::CameraOnly
    }
}

/// Zero-fills the dropped modality; the kept one is returned unchanged.
pub fn apply_modality_mask(cam: &BevGrid, lidar: &BevGrid, mask: ModalityMask) -> (BevGrid, BevGrid) {
    let blank = |g: &BevGrid| {
        let (h, w, c) = g.dims();
        BevGrid::zeros(g.modality, h, w, c)
    };
    let cam = if mask.keeps_camera() { cam.clone() } else { blank(cam) };
    let lidar = if mask.keeps_lidar() { lidar.clone() } else { blank(lidar) };
    (cam, lidar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use crate::tensor::finite_diff_check_many;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            bev_h: 2,
            bev_w: 3,
            channels: 4,
            heads: 2,
            mlp_hidden: 5,
        }
    }

    fn identity_params(c: usize, t: usize) -> CitParams {
        let mut p = CitParams::init(
            &FusionConfig {
                bev_h: 1,
                bev_w: t.max(1),
                channels: c,
                heads: 1,
                mlp_hidden: c,
            },
            &mut rng_for(0, &[]),
        )
        .unwrap();
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            *w = Tensor::eye(c);
        }
        p
    }

    #[test]
    fn token_order_is_row_major() {
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let grid = BevGrid::new(Modality::Lidar, Tensor::new(&[2, 2, 2], data).unwrap()).unwrap();
        let t = flatten_to_tokens(&grid);
        assert_eq!(t.tokens.shape(), &[4, 2]);
        assert_eq!(t.tokens.data()[4..6], [4.0, 5.0]);
        assert_eq!(unflatten_tokens(&t, 2, 2, Modality::Lidar).unwrap(), grid);
        let one = BevGrid::new(Modality::Camera, Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(flatten_to_tokens(&one).tokens.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_token_identity() {
        let p = identity_params(3, 1);
        let x = TokenMatrix {
            tokens: Tensor::from_rows(&[&[0.3, -1.2, 2.5]]).unwrap(),
        };
        assert_eq!(multi_head_attention(&x, &p).unwrap().tokens.data(), x.tokens.data());
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let p = identity_params(2, 2);
        let x = TokenMatrix {
            tokens: Tensor::from_rows(&[&[0.7, -0.4], &[0.7, -0.4]]).unwrap(),
        };
        let out = multi_head_attention(&x, &p).unwrap();
        assert!(out.tokens.max_abs_diff(&x.tokens) < 1e-15);
        assert_eq!(attention_weights(&x, &p).unwrap()[0].data(), &[0.5; 4]);
    }

    #[test]
    fn head_divisibility_checked() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(matches!(CitParams::init(&cfg, &mut rng_for(0, &[])), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_halves_match() {
        let cfg = small_cfg();
        let mut p = CitParams::init(&cfg, &mut rng_for(1, &[])).unwrap();
        p.pos_embed = Tensor::zeros(p.pos_embed.shape());
        let f = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng_for(2, &[]));
        let cam = BevGrid::new(Modality::Camera, f.clone()).unwrap();
        let lid = BevGrid::new(Modality::Lidar, f).unwrap();
        let (a, b) = cit_forward(&cam, &lid, &p).unwrap();
        assert_eq!(a.features.shape(), &[2, 3, 4]);
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn zero_inputs_fuse_to_zero() {
        let cfg = small_cfg();
        let p = CitParams::init(&cfg, &mut rng_for(3, &[])).unwrap();
        let z = BevGrid::zeros(Modality::Camera, 2, 3, 4);
        let out = dynamic_fuse(&z, &BevGrid::zeros(Modality::Lidar, 2, 3, 4), &p).unwrap();
        assert_eq!(out.features.shape(), &[2, 3, 4]);
        assert!(out.is_zero());
    }

    #[test]
    fn mismatched_grids_rejected() {
        let p = CitParams::init(&small_cfg(), &mut rng_for(3, &[])).unwrap();
        let a = BevGrid::zeros(Modality::Camera, 2, 3, 4);
        let b = BevGrid::zeros(Modality::Lidar, 3, 2, 4);
        assert!(cit_forward(&a, &b, &p).is_err());
        assert!(dynamic_fuse(&a, &b, &p).is_err());
    }

    #[test]
    fn fusion_stack_gradients() {
        let cfg = small_cfg();
        for seed in 0..3 {
            let mut rng = rng_for(seed, &["fusion-grad"]);
            let p = CitParams::init(&cfg, &mut rng).unwrap();
            let mut inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            inputs.push(Tensor::uniform(&[6, 4], 1.0, &mut rng));
            inputs.push(Tensor::uniform(&[6, 4], 1.0, &mut rng));
            let probe = Tensor::uniform(&[6, 4], 1.0, &mut rng);
            let err = finite_diff_check_many(&inputs, 1e-6, |g, v| {
                let pv = CitVars::from_slice(2, &v[..13]);
                let (a, b) = cit_graph(g, v[13], v[14], &pv).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                let f = dynamic_fuse_graph(g, a, b, &pv).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                let w = g.leaf(probe.clone());
                let f = g.mul(f, w)?;
                Ok(g.sum(f))
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn degenerate_policies_exact() {
        let mut rng = rng_for(4, &[]);
        let always = |p: DropoutPolicy, m: ModalityMask, rng: &mut rand_chacha::ChaCha8Rng| {
            (0..2000).all(|_| sample_modality_mask(&p, rng) == m)
        };
        assert!(always(DropoutPolicy { p_md: 0.0, p_l: 0.3 }, ModalityMask::Both, &mut rng));
        assert!(always(DropoutPolicy { p_md: 1.0, p_l: 1.0 }, ModalityMask::LidarOnly, &mut rng));
        assert!(always(DropoutPolicy { p_md: 1.0, p_l: 0.0 }, ModalityMask::CameraOnly, &mut rng));
        assert!(DropoutPolicy { p_md: 1.5, p_l: 0.0 }.validate().is_err());
    }

    #[test]
    fn mask_zero_fills_dropped() {
        let f = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng_for(5, &[]));
        let cam = BevGrid::new(Modality::Camera, f.clone()).unwrap();
        let lid = BevGrid::new(Modality::Lidar, f).unwrap();
        assert_eq!(apply_modality_mask(&cam, &lid, ModalityMask::Both), (cam.clone(), lid.clone()));
        let (c, l) = apply_modality_mask(&cam, &lid, ModalityMask::LidarOnly);
        assert!(c.is_zero());
        assert_eq!(l, lid);
        let (c, l) = apply_modality_mask(&cam, &lid, ModalityMask::CameraOnly);
        assert_eq!(c, cam);
        assert!(l.is_zero());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_rows_are_distributions(seed in any::<u64>()) {
            let mut rng = rng_for(seed, &[]);
            let p = CitParams::init(&small_cfg(), &mut rng).unwrap();
            let x = TokenMatrix { tokens: Tensor::uniform(&[12, 4], 3.0, &mut rng) };
            for a in attention_weights(&x, &p).unwrap() {
                for row in a.data().chunks(12) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }

        #[test]
        fn attention_is_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = rng_for(seed, &[]);
            let p = CitParams::init(&small_cfg(), &mut rng).unwrap();
            let x = Tensor::uniform(&[12, 4], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..12).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            let permute = |t: &Tensor| {
                let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * 4..i * 4 + 4].to_vec()).collect();
                Tensor::new(&[12, 4], d).unwrap()
            };
            let y = multi_head_attention(&TokenMatrix { tokens: x.clone() }, &p).unwrap().tokens;
            let yp = multi_head_attention(&TokenMatrix { tokens: permute(&x) }, &p).unwrap().tokens;
            // Reordered reductions round differently, so compare to 1e-12.
            prop_assert!(yp.max_abs_diff(&permute(&y)) <= 1e-12);
        }
    }
}
