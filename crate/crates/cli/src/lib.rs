//! Command implementations behind the `fedsim` binary.

pub mod plot;

use chrono::Utc;
use fedsim_core::data::{label_histogram, Split, NUM_CLASSES};
use fedsim_core::orchestrator::{
    evaluate, partition, prepare_dataset, rounds_to_target, Checkpoint, Experiment, ExperimentConfig, Method,
    RoundRecord, RunSummary,
};
use fedsim_core::tensor::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const RECORD_SCHEMA: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const PARTITION_FILE: &str = "partition.csv";
pub const REPLAY_FILE: &str = "replay.bin";
pub const MASKS_FILE: &str = "masks.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<fedsim_core::Error> for CliError {
    fn from(e: fedsim_core::Error) -> Self {
        match e {
            fedsim_core::Error::Validation(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Command-line switches layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub no_masks: bool,
    pub no_rl: bool,
    pub no_adaptive_mp: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        cfg.ablation.disable_masks |= self.no_masks;
        cfg.ablation.disable_rl |= self.no_rl;
        cfg.ablation.disable_adaptive_mp |= self.no_adaptive_mp;
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// SHA-256 over the config's canonical JSON form (keys sorted).
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    let digest = Sha256::digest(serde_json::to_string(&value)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Short label identifying the method and ablation switches of a run.
pub fn run_label(cfg: &ExperimentConfig) -> String {
    let mut s = cfg.method.to_string();
    if cfg.method == Method::Fedrio {
        let a = cfg.ablation;
        for (on, tag) in [(a.disable_masks, "na"), (a.disable_rl, "nr"), (a.disable_adaptive_mp, "nc")] {
            if on {
                s.push('-');
                s.push_str(tag);
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub label: String,
    pub seed: u64,
    pub status: RunStatus,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub artifacts: BTreeMap<String, String>,
    pub code_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Appends one JSON object per line after a schema header.
pub struct RecordWriter {
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", serde_json::json!({ "schema": RECORD_SCHEMA }))?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, r: &RoundRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a records file. A damaged final line (an interrupted write) is
/// dropped; damage anywhere else is an error.
pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    let mut records = Vec::new();
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let header: serde_json::Value = serde_json::from_str(line)?;
            if header.get("schema").and_then(|v| v.as_u64()) != Some(RECORD_SCHEMA as u64) {
                return Err(CliError::Runtime(format!("unsupported records header {line}")));
            }
            continue;
        }
        match serde_json::from_str::<RoundRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) if i + 1 == n => log::warn!("dropping truncated final record: {e}"),
            Err(e) => return Err(CliError::Runtime(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(records)
}

pub fn write_partition_csv(path: &Path, counts: &[[usize; NUM_CLASSES]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["client".to_string()];
    header.extend((0..NUM_CLASSES).map(|c| format!("class_{c}")));
    header.push("total".into());
    w.write_record(&header)?;
    for (k, row) in counts.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        rec.push(row.iter().sum::<usize>().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_partition_csv(path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: Vec<usize> = rec
            .iter()
            .skip(1)
            .take(NUM_CLASSES)
            .map(|s| s.parse().map_err(|e| CliError::Runtime(format!("partition csv: {e}"))))
            .collect::<Result<_>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn partition_table(counts: &[[usize; NUM_CLASSES]]) -> String {
    let mut s = String::from("| client | class_0 | class_1 | total |\n|---|---|---|---|\n");
    for (k, row) in counts.iter().enumerate() {
        s.push_str(&format!("| {k} | {} | {} | {} |\n", row[0], row[1], row[0] + row[1]));
    }
    s
}

/// Label counts per client. Writes `partition.csv` when `out` is given.
pub fn cmd_partition(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<[usize; NUM_CLASSES]>> {
    let ds = prepare_dataset(cfg)?;
    let counts = label_histogram(&partition(cfg, &ds)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_partition_csv(&dir.join(PARTITION_FILE), &counts)?;
    }
    Ok(counts)
}

/// Runs a full experiment into `out`. Records are flushed each round so an
/// aborted run keeps everything written so far.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        label: run_label(cfg),
        seed: cfg.seed,
        status: RunStatus::Running,
        started_at: Utc::now().to_rfc3339(),
        finished_at: None,
        artifacts: BTreeMap::new(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        error: None,
    };
    let text = toml::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join(CONFIG_FILE), text)?;
    for (k, f) in [("config", CONFIG_FILE), ("records", RECORDS_FILE), ("timings", TIMINGS_FILE)] {
        manifest.artifacts.insert(k.into(), f.into());
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let result = train_inner(cfg, out, &mut manifest);
    manifest.finished_at = Some(Utc::now().to_rfc3339());
    match &result {
        Ok(_) => manifest.status = RunStatus::Completed,
        Err(e) => {
            manifest.status = RunStatus::Aborted;
            manifest.error = Some(e.to_string());
        }
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    result
}

fn train_inner(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<RunSummary> {
    let mut exp = Experiment::new(cfg.clone())?;
    write_partition_csv(&out.join(PARTITION_FILE), &label_histogram(&exp.shards))?;
    manifest.artifacts.insert("partition".into(), PARTITION_FILE.into());
    let mut records = RecordWriter::create(&out.join(RECORDS_FILE))?;
    while !exp.is_done() {
        let step = exp.step();
        write_json(&out.join(TIMINGS_FILE), &exp.timings)?;
        let r = step?;
        log::info!("round {} acc {:.4} f1 {:.4}", r.t, r.acc, r.f1);
        records.append(&r)?;
    }
    let summary = exp.summary()?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(CHECKPOINT_FILE), &exp.checkpoint())?;
    manifest.artifacts.insert("summary".into(), SUMMARY_FILE.into());
    manifest.artifacts.insert("checkpoint".into(), CHECKPOINT_FILE.into());
    if let Some(agent) = &exp.agent {
        let mut w = BufWriter::new(File::create(out.join(REPLAY_FILE))?);
        agent.buffer.write_to(&mut w)?;
        w.flush()?;
        manifest.artifacts.insert("replay".into(), REPLAY_FILE.into());
    }
    if cfg.method == Method::Fedrio && !cfg.ablation.disable_masks {
        let f = File::create(out.join(MASKS_FILE))?;
        fedsim_core::aggregate::write_mask_csv(&exp.server.masks.normalized()?, f)?;
        manifest.artifacts.insert("masks".into(), MASKS_FILE.into());
    }
    Ok(summary)
}

pub fn load_run_config(run: &Path) -> Result<ExperimentConfig> {
    load_config(&run.join(CONFIG_FILE), &Overrides::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc: f64,
    pub f1: f64,
    pub nodes: usize,
}

/// Scores the saved global model on a split of the run's dataset.
pub fn cmd_evaluate(run: &Path, split: Split) -> Result<Evaluation> {
    let cfg = load_run_config(run)?;
    let ckpt: Checkpoint = read_json(&run.join(CHECKPOINT_FILE))?;
    let ds = prepare_dataset(&cfg)?;
    let nodes = ds.nodes_in(split);
    if nodes.is_empty() {
        return Err(CliError::Runtime(format!("split {split:?} is empty")));
    }
    let (acc, f1) = evaluate(&ckpt.server.backbone, &ckpt.server.d, &ds.graph_view(), &nodes);
    Ok(Evaluation {
        acc,
        f1,
        nodes: nodes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Curve,
    Heatmap,
    Features,
}

const GRID: usize = 60;

/// Writes the requested figure for `runs` into `out`; returns the files made.
pub fn cmd_plot(runs: &[PathBuf], kind: PlotKind, out: &Path) -> Result<Vec<PathBuf>> {
    let first = runs.first().ok_or_else(|| CliError::Config("plot needs at least one run".into()))?;
    fs::create_dir_all(out)?;
    match kind {
        PlotKind::Curve => {
            let mut series = Vec::new();
            for (i, run) in runs.iter().enumerate() {
                let cfg = load_run_config(run)?;
                let recs = read_records(&run.join(RECORDS_FILE))?;
                let label = format!("{}#{}:seed{}", run_label(&cfg), i, cfg.seed);
                series.push((label, recs.iter().map(|r| (r.t, r.acc)).collect()));
            }
            let (svg, csv) = (out.join("curve.svg"), out.join("curve.csv"));
            plot::curve(&series, &svg, &csv)?;
            Ok(vec![svg, csv])
        }
        PlotKind::Heatmap => {
            let counts = read_partition_csv(&first.join(PARTITION_FILE))?;
            let (svg, csv) = (out.join("heatmap.svg"), out.join("heatmap.csv"));
            plot::heatmap(&counts, &svg, &csv)?;
            Ok(vec![svg, csv])
        }
        PlotKind::Features => {
            let cfg = load_run_config(first)?;
            if cfg.model.rep_dim != 2 {
                return Err(CliError::Config(format!(
                    "features plot needs a run with rep_dim = 2, this run has {}",
                    cfg.model.rep_dim
                )));
            }
            let ckpt: Checkpoint = read_json(&first.join(CHECKPOINT_FILE))?;
            let ds = prepare_dataset(&cfg)?;
            let shards = partition(&cfg, &ds)?;
            let mut points = Vec::new();
            for (client, shard) in ckpt.clients.iter().zip(&shards) {
                let g = shard.local_graph(&ds);
                let reps = client.backbone.infer_greedy(&g);
                for (i, row) in reps.rows().into_iter().enumerate() {
                    points.push(plot::FeaturePoint {
                        client: client.id,
                        x: row[0],
                        y: row[1],
                        label: g.labels[i],
                    });
                }
            }
            let (x0, x1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
            let (y0, y1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
            let (dx, dy) = (((x1 - x0) / GRID as f64).max(1e-9), ((y1 - y0) / GRID as f64).max(1e-9));
            let centres = Mat::from_shape_fn((GRID * GRID, 2), |(i, j)| {
                if j == 0 {
                    x0 + (i % GRID) as f64 * dx + dx / 2.0
                } else {
                    y0 + (i / GRID) as f64 * dy + dy / 2.0
                }
            });
            let logits = ckpt.server.d.logits(&centres);
            let grid: Vec<plot::GridCell> = (0..GRID * GRID)
                .map(|i| plot::GridCell {
                    x: centres[[i, 0]],
                    y: centres[[i, 1]],
                    pred: usize::from(logits[[i, 1]] > logits[[i, 0]]),
                })
                .collect();
            let svg = out.join("features.svg");
            let csv = out.join("features.csv");
            let grid_csv = out.join("features_grid.csv");
            plot::features(&points, &grid, (dx, dy), &svg, &csv, &grid_csv)?;
            Ok(vec![svg, csv, grid_csv])
        }
    }
}

/// Rounds needed by each run group to reach each target.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub reached: Vec<usize>,
    pub runs: usize,
}

impl TableCell {
    pub fn mean_std(&self) -> Option<(f64, f64)> {
        if self.reached.is_empty() {
            return None;
        }
        let n = self.reached.len() as f64;
        let mean = self.reached.iter().sum::<usize>() as f64 / n;
        let var = self.reached.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn render(&self) -> String {
        match self.mean_std() {
            None => "unreached".into(),
            Some((m, s)) if self.reached.len() == self.runs => format!("{m:.1}±{s:.1}"),
            Some((m, s)) => format!("{m:.1}±{s:.1} ({}/{} reached)", self.reached.len(), self.runs),
        }
    }
}

pub fn rounds_table(groups: &[(String, Vec<Vec<f64>>)], targets: &[f64]) -> Vec<(String, Vec<TableCell>)> {
    groups
        .iter()
        .map(|(label, runs)| {
            let cells = targets
                .iter()
                .map(|&t| TableCell {
                    reached: runs.iter().filter_map(|accs| rounds_to_target(accs, t)).collect(),
                    runs: runs.len(),
                })
                .collect();
            (label.clone(), cells)
        })
        .collect()
}

/// Markdown rounds-to-target table; also written as CSV when `csv_out` is set.
pub fn cmd_table(runs: &[PathBuf], targets: &[f64], csv_out: Option<&Path>) -> Result<String> {
    if runs.is_empty() {
        return Err(CliError::Config("table needs at least one run".into()));
    }
    if targets.is_empty() {
        return Err(CliError::Config("table needs at least one target".into()));
    }
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for run in runs {
        let label = run_label(&load_run_config(run)?);
        let accs: Vec<f64> = read_records(&run.join(RECORDS_FILE))?.iter().map(|r| r.acc).collect();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(accs),
            None => groups.push((label, vec![accs])),
        }
    }
    let table = rounds_table(&groups, targets);
    let mut md = String::from("| method |");
    for t in targets {
        md.push_str(&format!(" {t} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(targets.len()));
    md.push('\n');
    for (label, cells) in &table {
        md.push_str(&format!("| {label} |"));
        for c in cells {
            md.push_str(&format!(" {} |", c.render()));
        }
        md.push('\n');
    }
    if let Some(path) = csv_out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "target", "runs", "reached", "mean", "std", "cell"])?;
        for (label, cells) in &table {
            for (t, c) in targets.iter().zip(cells) {
                let (m, s) = c.mean_std().map_or((String::new(), String::new()), |(m, s)| (m.to_string(), s.to_string()));
                w.write_record([
                    label.clone(),
                    t.to_string(),
                    c.runs.to_string(),
                    c.reached.len().to_string(),
                    m,
                    s,
                    c.render(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(md)
}
