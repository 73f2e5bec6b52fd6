use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist2, resample_polyline, Point2};
use crate::scene::{MapClass, VectorMap};
use crate::tensor::{Graph, Tensor, Var};

use super::{DecoderOut, MapPrediction, BACKGROUND, NUM_LOGITS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the per-point L1 term (metres) against cross-entropy.
    pub point_weight: f64,
    /// Cross-entropy weight of unmatched queries.
    pub background_weight: f64,
    /// Matching cost added per unit of missing class probability.
    pub class_cost: f64,
    /// Weight of the same point term on first-stage decoder points.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            point_weight: 0.5,
            background_weight: 0.5,
            class_cost: 2.0,
            aux_weight: 0.5,
        }
    }
}

/// Ground-truth element resampled to the decoder's point count.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class: MapClass,
    pub points: Vec<Point2>,
}

impl GtInstance {
    pub fn from_map(map: &VectorMap, n_points: usize) -> Vec<GtInstance> {
        map.elements
            .iter()
            .map(|e| GtInstance {
                class: e.class,
                points: canonical_polyline(&e.points, n_points),
            })
            .collect()
    }
}

/// Arc-length resampling to `n` points. Open lines start at the end with
/// the larger x (then larger y); closed rings keep their stored start.
pub fn canonical_polyline(line: &[Point2], n: usize) -> Vec<Point2> {
    let mut pts = resample_polyline(line, n);
    let (a, b) = (line[0], line[line.len() - 1]);
    if a != b && (b[0], b[1]) > (a[0], a[1]) {
        pts.reverse();
    }
    pts
}

fn set_chamfer(a: &[Point2], b: &[Point2]) -> f64 {
    let one = |x: &[Point2], y: &[Point2]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

fn l1(a: &[Point2], b: impl Iterator<Item = Point2>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs()).sum()
}

/// Greedy one-to-one assignment: repeatedly takes the cheapest remaining
/// (prediction, gt) pair. Returns the gt index matched to each prediction.
pub fn greedy_match(pred: &MapPrediction, gt: &[GtInstance], cfg: &LossConfig) -> Vec<Option<usize>> {
    let mut pairs = Vec::with_capacity(pred.instances.len() * gt.len());
    for (qi, inst) in pred.instances.iter().enumerate() {
        let probs = inst.probabilities();
        for (gi, g) in gt.iter().enumerate() {
            let cost = set_chamfer(&inst.points, &g.points) + cfg.class_cost * (1.0 - probs[g.class.index()]);
            pairs.push((cost, qi, gi));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![None; pred.instances.len()];
    let mut claimed = vec![false; gt.len()];
    for (_, qi, gi) in pairs {
        if assigned[qi].is_none() && !claimed[gi] {
            assigned[qi] = Some(gi);
            claimed[gi] = true;
        }
    }
    assigned
}

/// Loss terms on the graph; `total = (points + aux + classification) / Q`
/// where `aux` is the weighted point term on first-stage points.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub points: Var,
    pub classification: Var,
    pub matches: Vec<Option<usize>>,
}

/// Builds the set loss for decoder outputs already on `g`. Matching and the
/// choice of target direction use current values and carry no gradient.
pub fn loss_graph(g: &mut Graph, out: &DecoderOut, gt: &[GtInstance], n_points: usize, cfg: &LossConfig) -> Result<LossVars> {
    let pred = MapPrediction::from_values(g.value(out.points), g.value(out.logits), n_points);
    let q = pred.instances.len();
    if gt.len() > q {
        return Err(Error::Config(format!("{} ground-truth elements exceed {q} queries", gt.len())));
    }
    let matches = greedy_match(&pred, gt, cfg);
    let mut target = vec![0.0; q * n_points * 2];
    let mut weight = vec![0.0; q * n_points * 2];
    let mut onehot = vec![0.0; q * NUM_LOGITS];
    for (qi, m) in matches.iter().enumerate() {
        match m {
            Some(gi) => {
                let gp = &gt[*gi].points;
                let p = &pred.instances[qi].points;
                let forward = l1(p, gp.iter().copied());
                let backward = l1(p, gp.iter().rev().copied());
                let chosen: Vec<Point2> = if backward < forward {
                    gp.iter().rev().copied().collect()
                } else {
                    gp.clone()
                };
                for (k, pt) in chosen.iter().enumerate() {
                    let base = (qi * n_points + k) * 2;
                    target[base..base + 2].copy_from_slice(pt);
                    weight[base..base + 2].fill(cfg.point_weight / n_points as f64);
                }
                onehot[qi * NUM_LOGITS + gt[*gi].class.index()] = 1.0;
            }
            None => onehot[qi * NUM_LOGITS + BACKGROUND] = cfg.background_weight,
        }
    }
    let shape = [q * n_points, 2];
    let target = g.leaf(Tensor::new(&shape, target)?);
    let weight = g.leaf(Tensor::new(&shape, weight)?);
    let onehot = g.leaf(Tensor::new(&[q, NUM_LOGITS], onehot)?);
    let diff = g.sub(out.points, target)?;
    let diff = g.abs(diff);
    let diff = g.mul(diff, weight)?;
    let points = g.sum(diff);
    let aux = match out.coarse {
        Some(coarse) if cfg.aux_weight > 0.0 => {
            let d = g.sub(coarse, target)?;
            let d = g.abs(d);
            let d = g.mul(d, weight)?;
            let d = g.sum(d);
            Some(g.scale(d, cfg.aux_weight))
        }
        _ => None,
    };
    let logp = g.log_softmax_rows(out.logits)?;
    let ce = g.mul(logp, onehot)?;
    let ce = g.sum(ce);
    let classification = g.scale(ce, -1.0);
    let mut total = g.add(points, classification)?;
    if let Some(aux) = aux {
        total = g.add(total, aux)?;
    }
    let total = g.scale(total, 1.0 / q as f64);
    Ok(LossVars {
        total,
        points,
        classification,
        matches,
    })
}

/// Scalar loss of a finished prediction against a map.
pub fn compute_loss(pred: &MapPrediction, gt: &VectorMap, cfg: &LossConfig) -> Result<Tensor> {
    let n_points = pred.instances.first().map_or(2, |i| i.points.len());
    let mut g = Graph::new();
    let pts: Vec<f64> = pred.instances.iter().flat_map(|i| i.points.iter().flatten().copied()).collect();
    let logits: Vec<f64> = pred.instances.iter().flat_map(|i| i.logits).collect();
    let q = pred.instances.len();
    let out = DecoderOut {
        points: g.leaf(Tensor::new(&[q * n_points, 2], pts)?),
        logits: g.leaf(Tensor::new(&[q, NUM_LOGITS], logits)?),
        coarse: None,
    };
    let lv = loss_graph(&mut g, &out, &GtInstance::from_map(gt, n_points), n_points, cfg)?;
    Ok(g.take(lv.total))
}
