//! Config-driven training runs and variant comparisons.
//!
//! A run directory is named after the digest of its canonical config and
//! holds `config.json`, `metrics.jsonl` (one epoch record per line),
//! `weights.spkr` and `report.json`. Datasets are cached under
//! `<root>/cache`, keyed by the task and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Grid2D;
use crate::error::{config_err, Error, Result};
use crate::model::{save_weights, train, Head, Model, ModelConfig, PeVariant, Readout, SigmaSetting, TrainConfig, TrainHistory};
use crate::neuron::LifParams;
use crate::tasks::{load_or_generate, MetricReport, TaskSpec};

/// Model settings; sequence length, input width and head come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_pe")]
    pub pe: PeVariant,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ffn")]
    pub d_ffn: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub gray_bits: Option<u32>,
    #[serde(default)]
    pub grid: Option<Grid2D>,
    #[serde(default)]
    pub gray_bits_h: Option<u32>,
    #[serde(default)]
    pub gray_bits_w: Option<u32>,
    #[serde(default)]
    pub sigma: SigmaSetting,
    #[serde(default)]
    pub readout: Option<Readout>,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default)]
    pub surrogate_alpha: Option<f64>,
}

fn default_pe() -> PeVariant {
    PeVariant::None
}
fn default_blocks() -> usize {
    2
}
fn default_d_model() -> usize {
    32
}
fn default_d_ffn() -> usize {
    64
}
fn default_steps() -> usize {
    4
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ModelSection {
    pub fn resolve(&self, task: &TaskSpec) -> ModelConfig {
        let head = match *task {
            TaskSpec::OffsetCopy { vocab, .. } => Head::Classification { classes: vocab },
            TaskSpec::Sinusoid { channels, horizon, .. } => Head::Regression { channels, horizon },
        };
        let mut cfg = ModelConfig::small(task.len(), task.features(), self.pe, head);
        cfg.blocks = self.blocks;
        cfg.d_model = self.d_model;
        cfg.d_ffn = self.d_ffn;
        cfg.steps = self.steps;
        cfg.gray_bits = self.gray_bits;
        cfg.grid = self.grid;
        cfg.gray_bits_h = self.gray_bits_h;
        cfg.gray_bits_w = self.gray_bits_w;
        cfg.sigma = self.sigma;
        cfg.readout = self.readout;
        cfg.lif = self.lif;
        if let Some(a) = self.surrogate_alpha {
            cfg.surrogate_alpha = a;
        }
        cfg
    }
}

/// Contents of an experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the single run made by `train`; also the first comparison seed.
    pub seed: u64,
    /// Seeds used by comparisons; defaults to `[seed]`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Directory for run outputs, relative to the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
}

/// The fully resolved settings of one run; its digest names the run directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSpec {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("plain data").as_bytes()))
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}-s{}-{}", self.task.name(), self.model.pe, self.seed, &self.digest()[..12])
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.model.resolve(&self.task).validate()?;
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(config_err("seeds must not be empty"));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    pub fn run_spec(&self, pe: PeVariant, seed: u64) -> RunSpec {
        let mut model = self.model.clone();
        model.pe = pe;
        RunSpec { seed, task: self.task.clone(), model: model.resolve(&self.task), train: self.train.clone() }
    }

    /// Directory that receives this config's runs.
    pub fn output_root(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(d) => root.join(d),
            None => root.join("runs"),
        }
    }
}

/// Result of a completed run.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub pe: PeVariant,
    pub seed: u64,
    pub digest: String,
    pub dir: PathBuf,
    pub history: TrainHistory,
    /// Validation metrics of the weights that were kept.
    pub final_metrics: MetricReport,
}

fn task_digest(task: &TaskSpec, seed: u64) -> String {
    let json = serde_json::to_string(&(task, seed)).expect("plain data");
    hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
}

/// Trains one run, writing its artifacts under `runs_dir`.
///
/// `metrics.jsonl` is written as epochs complete, so a diverged run keeps
/// the records made before the failure.
pub fn run(spec: &RunSpec, runs_dir: &Path, cache_dir: &Path) -> Result<RunReport> {
    spec.model.validate()?;
    let digest = spec.digest();
    let dir = runs_dir.join(spec.dir_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), spec.canonical_json())?;
    let (train_set, val_set) = load_or_generate(&spec.task, spec.seed, cache_dir, &task_digest(&spec.task, spec.seed))?;
    let mut model = Model::new(spec.model.clone(), spec.seed)?;
    let mut lines = String::new();
    let metrics_path = dir.join("metrics.jsonl");
    let result = train(&mut model, &train_set, &val_set, &spec.train, spec.seed, |rec| {
        lines.push_str(&serde_json::to_string(rec).expect("plain data"));
        lines.push('\n');
        log::info!(
            "[{} seed {}] epoch {:>3} loss {:.4} val {}",
            spec.model.pe,
            spec.seed,
            rec.epoch,
            rec.train_loss.unwrap_or(f64::NAN),
            rec.val.to_json()
        );
    });
    fs::write(&metrics_path, &lines)?;
    let history = result?;
    save_weights(&model, &dir.join("weights.spkr"))?;
    let report = RunReport {
        pe: spec.model.pe,
        seed: spec.seed,
        digest,
        dir: dir.clone(),
        final_metrics: history.best().clone(),
        history,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).expect("plain data"))?;
    Ok(report)
}

/// One cell of a comparison.
#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub variant: PeVariant,
    pub seed: u64,
    pub metrics: Option<MetricReport>,
    /// Set when training diverged.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

/// Per-variant mean over the seeds that converged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantMean {
    pub variant: PeVariant,
    pub runs: usize,
    pub diverged: usize,
    pub r2: Option<f64>,
    pub rse: Option<f64>,
    pub accuracy: Option<f64>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl Comparison {
    pub fn variants(&self) -> Vec<PeVariant> {
        let mut out: Vec<PeVariant> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn means(&self) -> Vec<VariantMean> {
        self.variants()
            .into_iter()
            .map(|v| {
                let rows: Vec<&CompareRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let ok: Vec<&MetricReport> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
                VariantMean {
                    variant: v,
                    runs: rows.len(),
                    diverged: rows.iter().filter(|r| r.diverged.is_some()).count(),
                    r2: mean(ok.iter().map(|m| m.r2)),
                    rse: mean(ok.iter().map(|m| m.rse)),
                    accuracy: mean(ok.iter().map(|m| m.accuracy)),
                }
            })
            .collect()
    }

    /// `variant,seed,r2,rse,accuracy`; diverged runs leave the metrics empty
    /// and mean rows use `mean` as the seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,r2,rse,accuracy\n");
        for r in &self.rows {
            let m = r.metrics.clone().unwrap_or_default();
            let (r2, rse, acc) = if r.metrics.is_some() { (m.r2, m.rse, m.accuracy) } else { (None, None, None) };
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.seed, cell(r2), cell(rse), cell(acc));
        }
        for m in self.means() {
            let _ = writeln!(s, "{},mean,{},{},{}", m.variant, cell(m.r2), cell(m.rse), cell(m.accuracy));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let m = r.metrics.as_ref();
                let status = if r.diverged.is_some() { "diverged" } else { "ok" };
                vec![
                    r.variant.to_string(),
                    r.seed.to_string(),
                    cell(m.and_then(|m| m.r2)),
                    cell(m.and_then(|m| m.rse)),
                    cell(m.and_then(|m| m.accuracy)),
                    status.to_string(),
                ]
            })
            .collect();
        for m in self.means() {
            let status = format!("{}/{} diverged", m.diverged, m.runs);
            rows.push(vec![m.variant.to_string(), "mean".into(), cell(m.r2), cell(m.rse), cell(m.accuracy), status]);
        }
        text_table(&["variant", "seed", "r2", "rse", "accuracy", "status"], &rows)
    }
}

/// Left-aligned text table with a dashed rule under the header.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

/// Trains every variant on every seed of `cfg`. Divergence is recorded in
/// the row; any other error aborts.
pub fn compare(cfg: &ExperimentConfig, variants: &[PeVariant], root: &Path) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(config_err("a comparison needs at least two variants"));
    }
    let runs_dir = cfg.output_root(root);
    let cache = root.join("cache");
    let mut rows = Vec::new();
    for &v in variants {
        for seed in cfg.seed_list() {
            let spec = cfg.run_spec(v, seed);
            match run(&spec, &runs_dir, &cache) {
                Ok(rep) => rows.push(CompareRow { variant: v, seed, metrics: Some(rep.final_metrics), diverged: None }),
                Err(Error::Divergence { epoch, reason }) => {
                    log::warn!("{v} seed {seed} diverged at epoch {epoch}: {reason}");
                    rows.push(CompareRow { variant: v, seed, metrics: None, diverged: Some(format!("epoch {epoch}: {reason}")) });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
seed = 3
seeds = [3, 4]

[task]
kind = "offset-copy"
len = 8
vocab = 4
offset = 1
train_samples = 16
val_samples = 8

[model]
pe = "gray"
d_model = 8
d_ffn = 8
blocks = 1
steps = 2

[train]
epochs = 1
batch_size = 8
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(TOML).unwrap();
        let spec = cfg.run_spec(PeVariant::Log, 4);
        assert_eq!(spec.model.seq_len, 8);
        assert_eq!(spec.model.head, Head::Classification { classes: 4 });
        assert_eq!(spec.model.pe, PeVariant::Log);
        assert_ne!(spec.digest(), cfg.run_spec(PeVariant::Log, 3).digest());
        assert_eq!(cfg.seed_list(), vec![3, 4]);
    }

    #[test]
    fn rejects_missing_seed_and_unknown_keys() {
        let no_seed = TOML.replace("seed = 3\n", "");
        assert!(matches!(ExperimentConfig::from_toml(&no_seed), Err(Error::Config(_))));
        let extra = TOML.replace("blocks = 1", "blocks = 1\nheads = 2");
        assert!(matches!(ExperimentConfig::from_toml(&extra), Err(Error::Config(_))));
    }

    #[test]
    fn compare_writes_runs_and_csv() {
        let cfg = ExperimentConfig::from_toml(TOML).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cmp = compare(&cfg, &[PeVariant::None, PeVariant::Gray], dir.path()).unwrap();
        assert_eq!(cmp.rows.len(), 4);
        let csv = cmp.to_csv();
        assert!(csv.starts_with("variant,seed,r2,rse,accuracy\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
        assert!(csv.contains("gray,mean,,,"));
        let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
        assert_eq!(runs.len(), 4);
        assert!(cmp.to_table().lines().nth(1).unwrap().starts_with("-------"));
    }

    #[test]
    fn table_alignment() {
        let t = text_table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz  1\n");
    }
}
