//! Reproducible runs: dataset generation, training, corrupted evaluation and
//! robustness reports. Every file written here carries the run's config hash
//! and global seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corruption::{apply_corruption, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::fusion::{DropoutPolicy, ModalityMask};
use crate::metrics::{map_score, CellScore, MapScore, Provenance, RobustnessReport, DEFAULT_THRESHOLDS};
use crate::model::{infer, save_checkpoint, train, AugmentConfig, Checkpoint, ModelConfig, TrainConfig};
use crate::scene::{generate_scene, load_scene, save_scene, scene_hash, Scene, SceneConfig};
use crate::seeding::{derive_seed, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORKERS_ENV: &str = "MAPFUSE_WORKERS";

/// Default locations used when a command is not given one explicitly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub results: Option<PathBuf>,
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dropout: DropoutPolicy,
    pub augment: AugmentConfig,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub eval_seed: u64,
    /// Not part of [`RunConfig::hash`].
    #[serde(default)]
    pub outputs: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "mapfuse".into(),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dropout: DropoutPolicy::default(),
            augment: AugmentConfig::default(),
            corruptions: CorruptionKind::SUITE.to_vec(),
            severities: vec![1, 2, 3],
            eval_seed: 0,
            outputs: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    /// Recipe without modality dropout or augmentation.
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            dropout: DropoutPolicy::NONE,
            augment: AugmentConfig::off(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.dropout.validate()?;
        self.augment.validate()?;
        if self.corruptions.is_empty() {
            return Err(Error::Config("no corruptions selected".into()));
        }
        for &l in &self.severities {
            CorruptionSpec::new(self.corruptions[0], l)?;
        }
        if self.severities.is_empty() {
            return Err(Error::Config("no severities selected".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// SHA-256 of the compact JSON with output paths cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.outputs = OutputPaths::default();
        sha256_hex(&serde_json::to_vec(&c).expect("run config serializes"))
    }
}

/// Worker count from `MAPFUSE_WORKERS`, else the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Maps `f` over `items` on `workers` threads. Results come back in input
/// order; the first failing item (in input order) wins.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item visited"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub scenes: Vec<ManifestEntry>,
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &["scene", &index.to_string()])
}

/// Writes `count` scene bundles under `out_dir` plus a manifest of their hashes.
pub fn cmd_generate(seed: u64, count: usize, out_dir: &Path, cfg: &RunConfig) -> Result<Manifest> {
    cfg.scene.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let idx: Vec<usize> = (0..count).collect();
    let scenes = parallel_map(&idx, worker_count()?, |&i| {
        let s = scene_seed(seed, i);
        let scene = generate_scene(s, &cfg.scene)?;
        let dir = format!("scene_{i:05}");
        save_scene(&scene, &out_dir.join(&dir))?;
        Ok(ManifestEntry {
            dir,
            seed: s,
            sha256: scene_hash(&scene),
        })
    })?;
    let manifest = Manifest {
        seed,
        config_hash: cfg.hash(),
        scenes,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Loads every scene listed in the manifest, checking each bundle hash.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read(&path)?).map_err(|e| Error::format(&path, e))?;
    let scenes = parallel_map(&manifest.scenes, worker_count()?, |e| {
        let sdir = dir.join(&e.dir);
        let scene = load_scene(&sdir)?;
        if scene_hash(&scene) != e.sha256 {
            return Err(Error::format(&sdir, "bundle hash does not match the manifest"));
        }
        Ok(scene)
    })?;
    Ok((manifest, scenes))
}

fn manifest_digest(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read(&dir.join(MANIFEST_FILE))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader<'a> {
    config_hash: &'a str,
    seed: u64,
    steps: usize,
    scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
    pub mask_counts: [usize; 3],
}

/// Path of the JSON-lines training log written next to a checkpoint.
pub fn train_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.jsonl")
}

/// Trains on every scene in `data_dir` and writes the checkpoint and a
/// JSON-lines log: a header line, then one line per step.
pub fn cmd_train(data_dir: &Path, cfg: &RunConfig, out_ckpt: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let (_, scenes) = load_dataset(data_dir)?;
    let (params, log) = train(&scenes, &cfg.model, &cfg.train, &cfg.dropout, &cfg.augment)?;
    let hash = cfg.hash();
    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        seed: cfg.train.seed,
        config_hash: hash.clone(),
        params,
    };
    if let Some(parent) = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(out_ckpt, &ckpt)?;
    let header = LogHeader {
        config_hash: &hash,
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        scenes: scenes.len(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for r in &log.steps {
        text.push_str(&serde_json::to_string(r).expect("step serializes"));
        text.push('\n');
    }
    let log_path = train_log_path(out_ckpt);
    write_atomic(&log_path, text.as_bytes())?;
    Ok(TrainSummary {
        checkpoint: out_ckpt.to_path_buf(),
        log: log_path,
        final_loss: log.steps.last().map_or(f64::NAN, |r| r.loss),
        mask_counts: log.mask_counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seed: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub model: String,
    pub config_hash: String,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub checkpoint_sha256: String,
    pub data_sha256: String,
    pub scenes: usize,
    pub thresholds: Vec<f64>,
    /// Clean cell first, then every (corruption, severity) cell; also
    /// holds the accuracy grid and resilience scores.
    pub report: RobustnessReport,
    pub environment: Environment,
    /// Hash of this result with `result_hash` and `generated_at` blanked.
    pub result_hash: String,
    /// Unix seconds; the only field allowed to differ between reruns.
    pub generated_at: u64,
}

impl BenchmarkResult {
    pub fn rows(&self) -> &[CellScore] {
        &self.report.cells
    }

    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.result_hash.clear();
        c.generated_at = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("result serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e))
    }
}

/// Seed for one evaluation cell; depends only on the global seed and the cell.
pub fn cell_seed(seed: u64, kind: CorruptionKind, severity: u8) -> u64 {
    derive_seed(seed, &["cell", kind.name(), &severity.to_string()])
}

fn score_cell(ckpt: &Checkpoint, scenes: &[Scene], cell: Option<CorruptionSpec>, seed: u64) -> Result<MapScore> {
    let mut preds = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let pred = match cell {
            None => infer(&ckpt.params, &ckpt.config, &scene.cameras, &scene.lidar, Some(ModalityMask::Both))?,
            Some(spec) => {
                let s = derive_seed(cell_seed(seed, spec.kind, spec.severity), &["scene", &scene.seed.to_string()]);
                let c = apply_corruption(scene, &spec, s)?;
                infer(&ckpt.params, &ckpt.config, &c.scene.cameras, &c.scene.lidar, Some(ModalityMask::Both))?
            }
        };
        preds.push(pred);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.map.clone()).collect();
    let score = map_score(&preds, &gts, &DEFAULT_THRESHOLDS)?;
    if !score.is_finite() {
        let name = cell.map_or_else(|| "clean".to_string(), |c| c.to_string());
        return Err(Error::Invalid(format!("non-finite score in cell {name}")));
    }
    Ok(score)
}

/// Scores the checkpoint on the clean data and on every requested cell.
/// Writes `out_json` when given.
pub fn cmd_eval(req: &EvalRequest, out_json: Option<&Path>) -> Result<BenchmarkResult> {
    if req.corruptions.is_empty() || req.severities.is_empty() {
        return Err(Error::Config("evaluation needs at least one corruption and one severity".into()));
    }
    let mut cells: Vec<Option<CorruptionSpec>> = vec![None];
    for &k in &req.corruptions {
        for &l in &req.severities {
            cells.push(Some(CorruptionSpec::new(k, l)?));
        }
    }
    let ckpt_bytes = read(&req.checkpoint)?;
    let ckpt = Checkpoint::from_bytes(&ckpt_bytes, &req.checkpoint)?;
    let (_, scenes) = load_dataset(&req.data)?;
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{} holds no scenes", req.data.display())));
    }
    let scores = parallel_map(&cells, worker_count()?, |&cell| score_cell(&ckpt, &scenes, cell, req.seed))?;
    let rows: Vec<CellScore> = cells
        .iter()
        .zip(scores)
        .map(|(c, score)| CellScore {
            corruption: c.map(|s| s.kind),
            severity: c.map_or(0, |s| s.severity),
            score,
        })
        .collect();
    let provenance = Provenance {
        model: req.name.clone(),
        seeds: vec![ckpt.seed, req.seed],
        config_hash: ckpt.config_hash.clone(),
    };
    let report = RobustnessReport::new(provenance, rows, None)?;
    let mut result = BenchmarkResult {
        model: req.name.clone(),
        config_hash: ckpt.config_hash.clone(),
        train_seed: ckpt.seed,
        eval_seed: req.seed,
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
        data_sha256: manifest_digest(&req.data)?,
        scenes: scenes.len(),
        thresholds: DEFAULT_THRESHOLDS.to_vec(),
        report,
        environment: Environment::current(),
        result_hash: String::new(),
        generated_at: 0,
    };
    result.result_hash = result.content_hash();
    result.generated_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    if let Some(path) = out_json {
        write_atomic(path, result.to_json().as_bytes())?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Md,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Md),
            _ => Err(Error::Config(format!("unknown report format {s:?}; use csv or md"))),
        }
    }
}

/// Report of `result`, with relative scores against `baseline` when given.
pub fn compare(result: &BenchmarkResult, baseline: Option<&BenchmarkResult>) -> Result<RobustnessReport> {
    if let Some(b) = baseline {
        if b.thresholds != result.thresholds {
            return Err(Error::Invalid("candidate and baseline use different thresholds".into()));
        }
        if b.data_sha256 != result.data_sha256 {
            return Err(Error::Invalid("candidate and baseline were evaluated on different data".into()));
        }
    }
    RobustnessReport::new(
        result.report.provenance.clone(),
        result.report.cells.clone(),
        baseline.map(|b| &b.report.grid),
    )
}

fn table(format: ReportFormat, header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
                let cells: Vec<String> = r.iter().map(|c| csv_cell(c)).collect();
                let _ = writeln!(s, "{}", cells.join(","));
            }
        }
        ReportFormat::Md => {
            let _ = writeln!(s, "| {} |", header.join(" | "));
            let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
            for r in rows {
                let _ = writeln!(s, "| {} |", r.join(" | "));
            }
        }
    }
    s
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// RS table (one column per corruption, then mRS) and, with a baseline,
/// the RRS table in the same layout. Values in percent.
pub fn render_report(result: &BenchmarkResult, baseline: Option<&BenchmarkResult>, format: ReportFormat) -> Result<String> {
    let report = compare(result, baseline)?;
    let labels: Vec<String> = report.grid.corruptions.iter().map(|k| k.label().to_string()).collect();
    let header = |last: &str| {
        let mut h = vec!["Model".to_string()];
        h.extend(labels.iter().cloned());
        h.push(last.to_string());
        h
    };
    let row = |vals: &[f64], m: f64| {
        let mut r = vec![report.provenance.model.clone()];
        r.extend(vals.iter().map(|&v| pct(v)));
        r.push(pct(m));
        r
    };
    let mut s = String::new();
    if format == ReportFormat::Md {
        let _ = writeln!(s, "Resilience score (RS, %), clean mAP {}\n", pct(report.grid.acc_clean));
    }
    s.push_str(&table(format, &header("mRS"), &[row(&report.rs, report.m_rs)]));
    if let (Some(rrs), Some(m)) = (&report.rrs, report.m_rrs) {
        s.push('\n');
        if format == ReportFormat::Md {
            let model = baseline.map_or("", |b| b.model.as_str());
            let _ = writeln!(s, "Relative resilience score (RRS, %) against {model}\n");
        }
        s.push_str(&table(format, &header("mRRS"), &[row(rrs, m)]));
    }
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of RRS per corruption, or RS without a baseline.
pub fn render_svg(result: &BenchmarkResult, baseline: Option<&BenchmarkResult>) -> Result<String> {
    let report = compare(result, baseline)?;
    let (title, vals): (&str, Vec<f64>) = match &report.rrs {
        Some(r) => ("RRS (%)", r.iter().map(|v| 100.0 * v).collect()),
        None => ("RS (%)", report.rs.iter().map(|v| 100.0 * v).collect()),
    };
    let (w, h, left, top, bottom) = (60.0 * vals.len() as f64 + 80.0, 420.0, 60.0, 40.0, 120.0);
    let lo = vals.iter().copied().fold(0.0f64, f64::min);
    let hi = vals.iter().copied().fold(0.0f64, f64::max).max(lo + 1.0);
    let plot_h = h - top - bottom;
    let y = |v: f64| top + (hi - v) / (hi - lo) * plot_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{} {title}</text>"#, xml_escape(&report.provenance.model));
    let y0 = y(0.0);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{y0:.1}" x2="{:.1}" y2="{y0:.1}" stroke="black"/>"#, w - 20.0);
    for (i, (k, v)) in report.grid.corruptions.iter().zip(&vals).enumerate() {
        let x = left + 60.0 * i as f64 + 10.0;
        let (top_y, bar_h) = if *v >= 0.0 { (y(*v), y0 - y(*v)) } else { (y0, y(*v) - y0) };
        let fill = if *v >= 0.0 { "#4878a8" } else { "#c0504d" };
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{top_y:.1}" width="40" height="{bar_h:.1}" fill="{fill}"/>"#);
        let ty = if *v >= 0.0 { top_y - 4.0 } else { top_y + bar_h + 12.0 };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ty:.1}" text-anchor="middle">{v:.1}</text>"#, x + 20.0);
        let ly = h - bottom + 16.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" transform="rotate(45 {:.1} {ly:.1})">{}</text>"#,
            x + 10.0,
            x + 10.0,
            xml_escape(k.label())
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders the report for `input`, optionally against `baseline`, and
/// writes the SVG chart when `svg` is given.
pub fn cmd_report(input: &Path, baseline: Option<&Path>, format: ReportFormat, svg: Option<&Path>) -> Result<String> {
    let result = BenchmarkResult::load(input)?;
    let base = baseline.map(BenchmarkResult::load).transpose()?;
    let text = render_report(&result, base.as_ref(), format)?;
    if let Some(p) = svg {
        write_atomic(p, render_svg(&result, base.as_ref())?.as_bytes())?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MapScore;

    #[test]
    fn config_roundtrips_and_hash_ignores_paths() {
        let mut c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let h = c.hash();
        c.outputs.results = Some("x.json".into());
        assert_eq!(c.hash(), h);
        c.train.seed = 9;
        assert_ne!(c.hash(), h);
        assert_ne!(RunConfig::baseline().hash(), h);
    }

    #[test]
    fn parallel_map_keeps_order_and_first_error() {
        let v: Vec<u32> = (0..37).collect();
        let out = parallel_map(&v, 4, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err = parallel_map(&v, 3, |&x| if x % 10 == 7 { Err(Error::Invalid(x.to_string())) } else { Ok(x) });
        assert_eq!(err.unwrap_err().to_string(), "7");
        assert!(parallel_map(&[] as &[u32], 4, |&x| Ok(x)).unwrap().is_empty());
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for k in CorruptionKind::SUITE {
            for l in 1..=3 {
                assert!(seen.insert(cell_seed(5, k, l)));
            }
        }
        assert_ne!(cell_seed(5, CorruptionKind::Fog, 1), cell_seed(6, CorruptionKind::Fog, 1));
    }

    fn fake(model: &str, clean: f64, acc: f64) -> BenchmarkResult {
        let mut cells = vec![CellScore {
            corruption: None,
            severity: 0,
            score: MapScore::from_class_ap([clean; 3]),
        }];
        for k in [CorruptionKind::Fog, CorruptionKind::CameraCrash] {
            for l in 1..=3 {
                cells.push(CellScore {
                    corruption: Some(k),
                    severity: l,
                    score: MapScore::from_class_ap([acc; 3]),
                });
            }
        }
        let prov = Provenance {
            model: model.into(),
            seeds: vec![0, 0],
            config_hash: "h".into(),
        };
        let mut r = BenchmarkResult {
            model: model.into(),
            config_hash: "h".into(),
            train_seed: 0,
            eval_seed: 0,
            checkpoint_sha256: String::new(),
            data_sha256: "d".into(),
            scenes: 1,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            report: RobustnessReport::new(prov, cells, None).unwrap(),
            environment: Environment::current(),
            result_hash: String::new(),
            generated_at: 0,
        };
        r.result_hash = r.content_hash();
        r
    }

    #[test]
    fn report_tables() {
        let a = fake("ours", 0.5, 0.25);
        let b = fake("base", 0.5, 0.2);
        let csv = render_report(&a, Some(&b), ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Model,Fog,Camera Crash,mRS");
        assert_eq!(lines[1], "ours,50.00,50.00,50.00");
        assert_eq!(lines[3], "Model,Fog,Camera Crash,mRRS");
        assert_eq!(lines[4], "ours,25.00,25.00,25.00");
        let md = render_report(&a, None, ReportFormat::Md).unwrap();
        assert!(md.contains("| Model | Fog | Camera Crash | mRS |"));
        assert!(!md.contains("mRRS"));
        let svg = render_svg(&a, Some(&b)).unwrap();
        assert_eq!(svg.matches("<rect").count(), 2);
    }

    #[test]
    fn report_rejects_mismatched_cells() {
        let a = fake("ours", 0.5, 0.25);
        let mut b = fake("base", 0.5, 0.2);
        b.report.cells.retain(|c| c.corruption != Some(CorruptionKind::Fog));
        b.report = RobustnessReport::new(b.report.provenance.clone(), b.report.cells.clone(), None).unwrap();
        assert!(render_report(&a, Some(&b), ReportFormat::Csv).is_err());
        let mut c = fake("base", 0.5, 0.2);
        c.data_sha256 = "other".into();
        assert!(render_report(&a, Some(&c), ReportFormat::Md).is_err());
    }

    #[test]
    fn content_hash_ignores_timestamp() {
        let mut a = fake("ours", 0.5, 0.25);
        let h = a.content_hash();
        a.generated_at = 12345;
        assert_eq!(a.content_hash(), h);
        assert_eq!(a.result_hash, h);
        a.scenes = 2;
        assert_ne!(a.content_hash(), h);
    }
}
