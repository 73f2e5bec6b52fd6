//! Chamfer-thresholded average precision and the resilience scores built on
//! top of it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionKind;
use crate::error::{Error, Result};
use crate::geom::{dist2, resample_polyline, Point2};
use crate::model::{MapPrediction, BACKGROUND};
use crate::scene::{MapClass, VectorMap};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
pub const CHAMFER_SAMPLES: usize = 100;

/// Symmetric Chamfer distance between two polylines after resampling each to
/// `n_samples` arc-length-uniform points.
pub fn chamfer_distance(a: &[Point2], b: &[Point2], n_samples: usize) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!(
            "chamfer distance needs polylines with >= 2 points, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if n_samples < 2 {
        return Err(Error::Invalid(format!("chamfer distance needs >= 2 samples, got {n_samples}")));
    }
    let sa = resample_polyline(a, n_samples);
    let sb = resample_polyline(b, n_samples);
    Ok(sampled_chamfer(&sa, &sb))
}

fn sampled_chamfer(a: &[Point2], b: &[Point2]) -> f64 {
    let one = |x: &[Point2], y: &[Point2]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    (one(a, b) + one(b, a)) / 2.0
}

/// One scored polyline of a given class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sample: usize,
    pub score: f64,
    pub points: Vec<Point2>,
}

/// Detections of `class`: every instance whose most likely label is that
/// class, scored by its probability. Background-labelled instances are not
/// emitted.
pub fn detections(preds: &[MapPrediction], class: MapClass) -> Vec<Detection> {
    let mut out = Vec::new();
    for (sample, pred) in preds.iter().enumerate() {
        for inst in &pred.instances {
            let probs = inst.probabilities();
            let label = (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best });
            if label != BACKGROUND && label == class.index() {
                out.push(Detection {
                    sample,
                    score: probs[label],
                    points: inst.points.clone(),
                });
            }
        }
    }
    out
}

/// Area under the 101-point interpolated precision/recall curve.
///
/// Detections are ranked by score (ties keep input order); each claims the
/// closest unclaimed ground truth in its sample within `threshold_m`, else
/// counts as a false positive. A class with no ground truth scores 1 when
/// there are also no detections and 0 otherwise.
pub fn average_precision_of(dets: &[Detection], gts: &[Vec<Vec<Point2>>], threshold_m: f64) -> Result<f64> {
    let costs = chamfer_table(dets, gts)?;
    ap_from_costs(dets, gts, &costs, threshold_m)
}

fn chamfer_table(dets: &[Detection], gts: &[Vec<Vec<Point2>>]) -> Result<Vec<Vec<f64>>> {
    let resampled: Vec<Vec<Vec<Point2>>> = gts
        .iter()
        .map(|s| s.iter().map(|g| resample_polyline(g, CHAMFER_SAMPLES)).collect())
        .collect();
    dets.iter()
        .map(|d| {
            let gs = resampled.get(d.sample).ok_or_else(|| {
                Error::Invalid(format!("detection refers to sample {} of {}", d.sample, gts.len()))
            })?;
            if d.points.len() < 2 {
                return Err(Error::Invalid("predicted polyline has fewer than 2 points".into()));
            }
            let dp = resample_polyline(&d.points, CHAMFER_SAMPLES);
            Ok(gs.iter().map(|g| sampled_chamfer(&dp, g)).collect())
        })
        .collect()
}

fn ap_from_costs(dets: &[Detection], gts: &[Vec<Vec<Point2>>], costs: &[Vec<f64>], threshold_m: f64) -> Result<f64> {
    if !(threshold_m > 0.0) {
        return Err(Error::Invalid(format!("AP threshold must be positive, got {threshold_m}")));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(if dets.is_empty() { 1.0 } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|s| vec![false; s.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let best = costs[i]
            .iter()
            .enumerate()
            .filter(|&(j, &c)| !claimed[d.sample][j] && c <= threshold_m)
            .min_by(|a, b| a.1.total_cmp(b.1));
        if let Some((j, _)) = best {
            claimed[d.sample][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    Ok(interpolated_ap(&curve))
}

/// Mean over recall levels `0, 0.01, …, 1` of the best precision reached at
/// or beyond that recall.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_from[i] = best_from[i + 1].max(curve[i].1);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        if let Some(pos) = curve.iter().position(|&(rec, _)| rec >= level) {
            total += best_from[pos];
        }
    }
    total / 101.0
}

/// Dataset-level AP for one class at one threshold.
pub fn average_precision(preds: &[MapPrediction], gts: &[VectorMap], class: MapClass, threshold_m: f64) -> Result<f64> {
    check_lengths(preds, gts)?;
    average_precision_of(&detections(preds, class), &class_gts(gts, class), threshold_m)
}

fn class_gts(gts: &[VectorMap], class: MapClass) -> Vec<Vec<Vec<Point2>>> {
    gts.iter()
        .map(|m| m.elements.iter().filter(|e| e.class == class).map(|e| e.points.clone()).collect())
        .collect()
}

fn check_lengths(preds: &[MapPrediction], gts: &[VectorMap]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!("{} predictions for {} ground-truth maps", preds.len(), gts.len())));
    }
    Ok(())
}

/// Per-class AP (each averaged over thresholds) in [`MapClass::ALL`] order,
/// and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub ap: [f64; 3],
    pub map: f64,
}

impl MapScore {
    pub fn from_class_ap(ap: [f64; 3]) -> Self {
        Self {
            ap,
            map: (ap[0] + ap[1] + ap[2]) / 3.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.is_finite() && self.ap.iter().all(|v| v.is_finite())
    }
}

pub fn map_score(preds: &[MapPrediction], gts: &[VectorMap], thresholds: &[f64]) -> Result<MapScore> {
    check_lengths(preds, gts)?;
    if thresholds.is_empty() {
        return Err(Error::Invalid("map score needs at least one threshold".into()));
    }
    let mut ap = [0.0; 3];
    for class in MapClass::ALL {
        let dets = detections(preds, class);
        let cg = class_gts(gts, class);
        let costs = chamfer_table(&dets, &cg)?;
        let mut sum = 0.0;
        for &t in thresholds {
            sum += ap_from_costs(&dets, &cg, &costs, t)?;
        }
        ap[class.index()] = sum / thresholds.len() as f64;
    }
    Ok(MapScore::from_class_ap(ap))
}

/// mAP per corruption and severity, plus the clean reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// `acc[i][l]` for corruption `i` at `severities[l]`.
    pub acc: Vec<Vec<f64>>,
    pub acc_clean: f64,
}

impl AccuracyGrid {
    pub fn validate(&self) -> Result<()> {
        if self.acc.len() != self.corruptions.len() {
            return Err(Error::Invalid(format!(
                "{} accuracy rows for {} corruptions",
                self.acc.len(),
                self.corruptions.len()
            )));
        }
        if self.severities.is_empty() {
            return Err(Error::Invalid("accuracy grid has no severities".into()));
        }
        for (k, row) in self.corruptions.iter().zip(&self.acc) {
            if row.len() != self.severities.len() {
                return Err(Error::Invalid(format!("{k}: {} values for {} severities", row.len(), self.severities.len())));
            }
        }
        let all = self.acc.iter().flatten().chain([&self.acc_clean]);
        if let Some(v) = all.into_iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceScores {
    pub rs: Vec<f64>,
    pub m_rs: f64,
}

/// `RS_i = Σ_l acc[i][l] / (L · acc_clean)`, `mRS` their mean. Ratios, not
/// percentages.
pub fn resilience_scores(grid: &AccuracyGrid) -> Result<ResilienceScores> {
    grid.validate()?;
    if grid.acc_clean == 0.0 {
        return Err(Error::UndefinedMetric("resilience score with zero clean accuracy".into()));
    }
    let levels = grid.severities.len() as f64;
    let rs: Vec<f64> = grid
        .acc
        .iter()
        .map(|row| row.iter().sum::<f64>() / (levels * grid.acc_clean))
        .collect();
    let m_rs = mean(&rs);
    Ok(ResilienceScores { rs, m_rs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeScores {
    pub rrs: Vec<f64>,
    pub m_rrs: f64,
}

/// `RRS_i = Σ_l acc[i][l] / Σ_l base[i][l] − 1`, `mRRS` their mean.
pub fn relative_resilience(grid: &AccuracyGrid, baseline: &AccuracyGrid) -> Result<RelativeScores> {
    grid.validate()?;
    baseline.validate()?;
    if grid.corruptions != baseline.corruptions || grid.severities != baseline.severities {
        return Err(Error::Invalid("candidate and baseline cover different corruption cells".into()));
    }
    let mut rrs = Vec::with_capacity(grid.acc.len());
    for ((k, row), base) in grid.corruptions.iter().zip(&grid.acc).zip(&baseline.acc) {
        let b: f64 = base.iter().sum();
        if b == 0.0 {
            return Err(Error::UndefinedMetric(format!("baseline accuracy sums to zero for {k}")));
        }
        rrs.push(row.iter().sum::<f64>() / b - 1.0);
    }
    let m_rrs = mean(&rrs);
    Ok(RelativeScores { rrs, m_rrs })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores of one evaluated cell. The clean cell has corruption `None` and
/// severity 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub corruption: Option<CorruptionKind>,
    pub severity: u8,
    pub score: MapScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub provenance: Provenance,
    pub cells: Vec<CellScore>,
    pub grid: AccuracyGrid,
    pub rs: Vec<f64>,
    pub m_rs: f64,
    pub rrs: Option<Vec<f64>>,
    pub m_rrs: Option<f64>,
}

impl RobustnessReport {
    pub fn new(provenance: Provenance, cells: Vec<CellScore>, baseline: Option<&AccuracyGrid>) -> Result<Self> {
        let grid = grid_from_cells(&cells)?;
        let ResilienceScores { rs, m_rs } = resilience_scores(&grid)?;
        let (rrs, m_rrs) = match baseline {
            Some(b) => {
                let r = relative_resilience(&grid, b)?;
                (Some(r.rrs), Some(r.m_rrs))
            }
            None => (None, None),
        };
        Ok(Self {
            provenance,
            cells,
            grid,
            rs,
            m_rs,
            rrs,
            m_rrs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Columns `model, corruption, severity, AP_ped, AP_div, AP_bou, mAP`,
    /// percentages with two decimals. Summary rows carry the metric name in
    /// the severity column and the value in the mAP column.
    pub fn to_csv(&self) -> String {
        let model = csv_field(&self.provenance.model);
        let mut s = String::from("model,corruption,severity,AP_ped,AP_div,AP_bou,mAP\n");
        for c in &self.cells {
            let name = c.corruption.map_or("clean", |k| k.name());
            let a = c.score.ap;
            let _ = writeln!(
                s,
                "{model},{name},{},{:.2},{:.2},{:.2},{:.2}",
                c.severity,
                100.0 * a[0],
                100.0 * a[1],
                100.0 * a[2],
                100.0 * c.score.map
            );
        }
        for (k, v) in self.grid.corruptions.iter().zip(&self.rs) {
            let _ = writeln!(s, "{model},{k},RS,,,,{:.2}", 100.0 * v);
        }
        let _ = writeln!(s, "{model},all,mRS,,,,{:.2}", 100.0 * self.m_rs);
        if let (Some(rrs), Some(m)) = (&self.rrs, self.m_rrs) {
            for (k, v) in self.grid.corruptions.iter().zip(rrs) {
                let _ = writeln!(s, "{model},{k},RRS,,,,{:.2}", 100.0 * v);
            }
            let _ = writeln!(s, "{model},all,mRRS,,,,{:.2}", 100.0 * m);
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Builds the grid from evaluated cells. Corruptions keep first-seen order;
/// every corruption must cover the same severities and a clean cell must be
/// present.
pub fn grid_from_cells(cells: &[CellScore]) -> Result<AccuracyGrid> {
    let clean = cells
        .iter()
        .find(|c| c.corruption.is_none())
        .ok_or_else(|| Error::Invalid("results have no clean cell".into()))?;
    let mut corruptions: Vec<CorruptionKind> = Vec::new();
    for k in cells.iter().filter_map(|c| c.corruption) {
        if !corruptions.contains(&k) {
            corruptions.push(k);
        }
    }
    let mut severities: Vec<u8> = cells
        .iter()
        .filter(|c| c.corruption == corruptions.first().copied() && c.corruption.is_some())
        .map(|c| c.severity)
        .collect();
    severities.sort_unstable();
    let mut acc = Vec::with_capacity(corruptions.len());
    for &k in &corruptions {
        let mut row = Vec::with_capacity(severities.len());
        for &l in &severities {
            let cell = cells
                .iter()
                .find(|c| c.corruption == Some(k) && c.severity == l)
                .ok_or_else(|| Error::Invalid(format!("missing cell {k}:{l}")))?;
            row.push(cell.score.map);
        }
        if cells.iter().filter(|c| c.corruption == Some(k)).count() != severities.len() {
            return Err(Error::Invalid(format!("{k} covers different severities")));
        }
        acc.push(row);
    }
    Ok(AccuracyGrid {
        corruptions,
        severities,
        acc,
        acc_clean: clean.score.map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredInstance;
    use crate::scene::MapElement;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use proptest::collection::vec as pvec;

    fn line(y: f64) -> Vec<Point2> {
        vec![[-10.0, y], [0.0, y], [10.0, y]]
    }

    fn inst(points: Vec<Point2>, class: usize, logit: f64) -> PredInstance {
        let mut logits = [0.0; 4];
        logits[class] = logit;
        PredInstance { points, logits }
    }

    #[test]
    fn chamfer_basics() {
        let a = line(0.0);
        assert_eq!(chamfer_distance(&a, &a, 100).unwrap(), 0.0);
        let d = chamfer_distance(&a, &line(0.7), 100).unwrap();
        assert!((d - 0.7).abs() < 1e-6, "{d}");
        assert!(chamfer_distance(&a[..1], &a, 100).is_err());
        assert!(chamfer_distance(&a, &a, 1).is_err());
    }

    #[test]
    fn identical_predictions_score_one() {
        let map = VectorMap {
            elements: vec![
                MapElement {
                    class: MapClass::LaneDivider,
                    points: line(1.0),
                },
                MapElement {
                    class: MapClass::RoadBoundary,
                    points: line(-5.0),
                },
                MapElement {
                    class: MapClass::PedestrianCrossing,
                    points: vec![[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]],
                },
            ],
        };
        let pred = MapPrediction {
            instances: map
                .elements
                .iter()
                .map(|e| inst(e.points.clone(), e.class.index(), 5.0))
                .collect(),
        };
        for t in [0.01, 0.5, 1.0, 1.5] {
            for c in MapClass::ALL {
                assert_eq!(average_precision(&[pred.clone()], &[map.clone()], c, t).unwrap(), 1.0);
            }
        }
        let s = map_score(&[pred], &[map], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn no_predictions_no_precision() {
        let map = VectorMap {
            elements: vec![MapElement {
                class: MapClass::LaneDivider,
                points: line(0.0),
            }],
        };
        let empty = MapPrediction { instances: vec![] };
        assert_eq!(average_precision(&[empty.clone()], &[map.clone()], MapClass::LaneDivider, 1.0).unwrap(), 0.0);
        // Crossings absent from both sides count as 1, boundaries likewise.
        let s = map_score(&[empty], &[map], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(s.ap, [1.0, 0.0, 1.0]);
        assert!((s.map - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn false_positive_on_empty_class_scores_zero() {
        let map = VectorMap { elements: vec![] };
        let pred = MapPrediction {
            instances: vec![inst(line(0.0), 0, 3.0)],
        };
        assert_eq!(average_precision(&[pred], &[map], MapClass::PedestrianCrossing, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn three_predictions_two_ground_truths() {
        // Ranked TP, FP, TP against 2 ground truths gives the PR points
        // (0.5, 1), (0.5, 1/2), (1, 2/3). Interpolated precision is 1 for
        // the 51 recall levels 0..=0.50 and 2/3 for the 50 levels above.
        let map = VectorMap {
            elements: vec![
                MapElement {
                    class: MapClass::LaneDivider,
                    points: line(0.0),
                },
                MapElement {
                    class: MapClass::LaneDivider,
                    points: line(6.0),
                },
            ],
        };
        let pred = MapPrediction {
            instances: vec![
                inst(line(0.2), 1, 4.0),
                inst(line(-8.0), 1, 3.0),
                inst(line(6.3), 1, 2.0),
            ],
        };
        let ap = average_precision(&[pred], &[map], MapClass::LaneDivider, 0.5).unwrap();
        let expect = (0..=100).map(|r| if r <= 50 { 1.0 } else { 2.0 / 3.0 }).sum::<f64>() / 101.0;
        assert_eq!(ap, expect);
        assert!((ap - 253.0 / 303.0).abs() < 1e-15);
    }

    #[test]
    fn background_argmax_is_not_a_detection() {
        let pred = MapPrediction {
            instances: vec![inst(line(0.0), BACKGROUND, 2.0), inst(line(1.0), 2, 2.0)],
        };
        assert!(detections(&[pred.clone()], MapClass::LaneDivider).is_empty());
        let d = detections(&[pred], MapClass::RoadBoundary);
        assert_eq!(d.len(), 1);
        let e2 = 2f64.exp();
        assert!((d[0].score - e2 / (e2 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn mean_of_class_aps() {
        // A published row reads 55.9 / 62.3 / 69.3 with mAP 62.5.
        let s = MapScore::from_class_ap([0.559, 0.623, 0.693]);
        assert!((100.0 * s.map - 62.5).abs() < 1e-9);
        assert_eq!(format!("{:.1}", 100.0 * s.map), "62.5");
    }

    fn grid(acc: Vec<Vec<f64>>, clean: f64) -> AccuracyGrid {
        AccuracyGrid {
            corruptions: CorruptionKind::SUITE[..acc.len()].to_vec(),
            severities: vec![1, 2, 3],
            acc,
            acc_clean: clean,
        }
    }

    #[test]
    fn resilience_hand_values() {
        let g = grid(vec![vec![0.3, 0.2, 0.1], vec![0.5, 0.5, 0.5]], 0.5);
        let r = resilience_scores(&g).unwrap();
        assert!((r.rs[0] - 0.4).abs() < 1e-12);
        assert!((r.rs[1] - 1.0).abs() < 1e-12);
        assert!((r.m_rs - 0.7).abs() < 1e-12);
        assert!(matches!(resilience_scores(&grid(vec![vec![0.0; 3]], 0.0)), Err(Error::UndefinedMetric(_))));
        assert!(resilience_scores(&grid(vec![vec![1.2, 0.0, 0.0]], 0.5)).is_err());
    }

    #[test]
    fn relative_hand_values() {
        let g = grid(vec![vec![0.3, 0.3, 0.3], vec![0.2, 0.2, 0.2], vec![0.1, 0.1, 0.1]], 0.5);
        let b = grid(vec![vec![0.2, 0.2, 0.2]; 3], 0.5);
        let r = relative_resilience(&g, &b).unwrap();
        for (a, e) in r.rrs.iter().zip([0.5, 0.0, -0.5]) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert!(r.m_rrs.abs() < 1e-12);
        let zero = grid(vec![vec![0.2; 3], vec![0.0; 3], vec![0.2; 3]], 0.5);
        match relative_resilience(&g, &zero) {
            Err(Error::UndefinedMetric(m)) => assert!(m.contains("temporal_misalignment"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(relative_resilience(&g, &grid(vec![vec![0.2; 3]; 2], 0.5)).is_err());
    }

    fn cells() -> Vec<CellScore> {
        let mut v = vec![CellScore {
            corruption: None,
            severity: 0,
            score: MapScore::from_class_ap([0.6, 0.6, 0.6]),
        }];
        for k in [CorruptionKind::Fog, CorruptionKind::CameraCrash] {
            for l in 1..=3u8 {
                v.push(CellScore {
                    corruption: Some(k),
                    severity: l,
                    score: MapScore::from_class_ap([0.1 * l as f64; 3]),
                });
            }
        }
        v
    }

    #[test]
    fn report_layout() {
        let prov = Provenance {
            model: "m".into(),
            seeds: vec![1],
            config_hash: "h".into(),
        };
        let r = RobustnessReport::new(prov.clone(), cells(), None).unwrap();
        assert_eq!(r.grid.corruptions, vec![CorruptionKind::Fog, CorruptionKind::CameraCrash]);
        assert!((r.rs[0] - 0.6 / 1.8).abs() < 1e-12);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,corruption,severity,AP_ped,AP_div,AP_bou,mAP");
        assert_eq!(lines[1], "m,clean,0,60.00,60.00,60.00,60.00");
        assert_eq!(lines[2], "m,fog,1,10.00,10.00,10.00,10.00");
        assert_eq!(lines[8], "m,fog,RS,,,,33.33");
        assert_eq!(lines[10], "m,all,mRS,,,,33.33");
        assert_eq!(lines.len(), 11);
        let with_base = RobustnessReport::new(prov, cells(), Some(&r.grid)).unwrap();
        assert_eq!(with_base.m_rrs, Some(0.0));
        assert!(with_base.to_csv().ends_with("m,all,mRRS,,,,0.00\n"));
        let back: RobustnessReport = serde_json::from_str(&with_base.to_json().unwrap()).unwrap();
        assert_eq!(back, with_base);
    }

    #[test]
    fn grid_requires_clean_and_complete_cells() {
        let mut c = cells();
        c.remove(0);
        assert!(grid_from_cells(&c).is_err());
        let mut c = cells();
        c.pop();
        assert!(grid_from_cells(&c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn chamfer_symmetric_and_nonnegative(
            a in pvec((-20.0f64..20.0, -20.0f64..20.0), 2..6),
            b in pvec((-20.0f64..20.0, -20.0f64..20.0), 2..6),
        ) {
            let a: Vec<Point2> = a.into_iter().map(|(x, y)| [x, y]).collect();
            let b: Vec<Point2> = b.into_iter().map(|(x, y)| [x, y]).collect();
            let ab = chamfer_distance(&a, &b, 30).unwrap();
            prop_assert_eq!(ab, chamfer_distance(&b, &a, 30).unwrap());
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn ap_monotone_in_threshold(offsets in pvec(0.0f64..3.0, 1..8), scores in pvec(-3.0f64..3.0, 8)) {
            let map = VectorMap {
                elements: (0..4).map(|i| MapElement { class: MapClass::LaneDivider, points: line(4.0 * i as f64) }).collect(),
            };
            let pred = MapPrediction {
                instances: offsets
                    .iter()
                    .enumerate()
                    .map(|(i, o)| inst(line(4.0 * (i % 4) as f64 + o), 1, 4.0 + scores[i]))
                    .collect(),
            };
            let mut last = 0.0;
            for t in [0.1, 0.5, 1.0, 1.5, 2.0, 4.0] {
                let ap = average_precision(&[pred.clone()], &[map.clone()], MapClass::LaneDivider, t).unwrap();
                prop_assert!(ap >= last && ap <= 1.0);
                last = ap;
            }
        }

        #[test]
        fn rs_scale_invariant(acc in pvec(0.0f64..0.5, 39), clean in 0.05f64..0.5, k in 0.1f64..2.0) {
            let rows: Vec<Vec<f64>> = acc.chunks(3).map(<[f64]>::to_vec).collect();
            let g = grid(rows.clone(), clean);
            let scaled = grid(rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect(), clean * k);
            let (a, b) = (resilience_scores(&g).unwrap(), resilience_scores(&scaled).unwrap());
            for (x, y) in a.rs.iter().zip(&b.rs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.m_rs - b.m_rs).abs() < 1e-12);
            prop_assert!((a.m_rs - a.rs.iter().sum::<f64>() / 13.0).abs() < 1e-12);
            prop_assert_eq!(relative_resilience(&g, &g).unwrap().rrs, vec![0.0; 13]);
        }
    }
}
