//! Config-driven pipeline runs: dataset preparation, training, auditing,
//! aggregation over seeds and the Opt/No-Opt timing comparison.
//!
//! Every artifact lives under the output directory:
//!
//! ```text
//! bundles/      bundle-<data fp>.capb
//! checkpoints/  target-s<seed>-<fp>.ckpt, prompter-<arm>-s<seed>-<fp>.ckpt
//!               plus <file>.train.json and <file>.timing.json logs
//! reports/      audit-<arm>-s<seed>-<fp>.json (+ .csv, .timing.json),
//!               index-<arm>-<fp>.json, aggregate-<arm>-<fp>.json
//! bench/        bench-<fp>.json
//! ```
//!
//! Fingerprints are content hashes of the config sections an artifact
//! depends on, so unrelated edits never invalidate earlier stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::audit::{self, AuditError, AuditReport, DeltaRule, RunSeeds, DEFAULT_K_LIST};
use crate::container::{write_atomic, ContainerError};
use crate::datagen::{
    self, generate_synthetic, load_bundle, read_csv_table, save_bundle, window_and_split,
    DataError, DatasetBundle, SequenceSample, SyntheticConfig, WindowConfig,
};
use crate::models::{
    load_checkpoint_expecting, save_checkpoint, ModelConfig, ModelError, Preset, Seq2SeqModel,
};
use crate::training::{
    train_prompter, train_target, PruningOptions, TrainError, TrainOptions, TrainReport,
};

pub const OUTPUT_DIR_ENV: &str = "CAP_OUTPUT_DIR";
pub const AGGREGATE_SCHEMA: &str = "cap.aggregate";
pub const BENCH_SCHEMA: &str = "cap.bench";
pub const TRAIN_LOG_SCHEMA: &str = "cap.train-log";
pub const INDEX_SCHEMA: &str = "cap.audit-index";
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("training diverged: {0}")]
    Divergence(TrainError),
    #[error(transparent)]
    Data(DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{0}")]
    Other(String),
}

impl ExpError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Validation(_) => 2,
            ExpError::Data(DataError::InvalidConfig(_)) => 2,
            ExpError::Prerequisite(_) => 3,
            ExpError::Divergence(_) => 4,
            _ => 1,
        }
    }
}

impl From<TrainError> for ExpError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => ExpError::Divergence(e),
            TrainError::Options(m) => ExpError::Validation(m),
            other => ExpError::Train(other),
        }
    }
}

impl From<DataError> for ExpError {
    fn from(e: DataError) -> Self {
        ExpError::Data(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_per_subset: usize,
        n_copyrighted: usize,
        features: usize,
        seq_len: usize,
        #[serde(default)]
        overlap: bool,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        seq_len: usize,
        #[serde(default = "default_clusters")]
        n_clusters: usize,
        copyright_fraction: f64,
        /// Columns to keep; all columns when absent.
        #[serde(default)]
        columns: Option<Vec<String>>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_clusters() -> usize {
    3
}

impl DatasetSpec {
    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::Synthetic { seed, .. } | DatasetSpec::Csv { seed, .. } => *seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Desk,
    Full,
}

impl PresetName {
    pub fn preset(self) -> Preset {
        match self {
            PresetName::Desk => Preset::DESK,
            PresetName::Full => Preset::FULL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub preset: PresetName,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub es_patience: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        let t = TrainOptions::TARGET_DEFAULT;
        Self {
            preset: PresetName::Desk,
            lr: t.lr,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            es_patience: t.es_patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrompterSection {
    pub preset: PresetName,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Patience length for pruning in the optimized arm.
    pub alpha: usize,
    pub omega: f64,
}

impl Default for PrompterSection {
    fn default() -> Self {
        let t = TrainOptions::PROMPTER_DEFAULT;
        Self {
            preset: PresetName::Desk,
            lr: t.lr,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            alpha: 2,
            omega: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default)]
    pub delta: DeltaRule,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
}

fn default_k() -> Vec<usize> {
    DEFAULT_K_LIST.to_vec()
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            delta: DeltaRule::default(),
            k: default_k(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment: a dataset, both models, audit settings and the seeds
/// to repeat it over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub prompter: PrompterSection,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Parse a `key.path=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), ExpError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ExpError::Validation(format!("override {s:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ExpError::Validation(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ExpError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ExpError::Validation(format!("override path crosses non-table key {p:?}")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply `overrides` in order, then validate. Relative
    /// dataset paths resolve against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<Self, ExpError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ExpError::Validation(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExpError::Validation(e.to_string()))?;
        if let (Some(base), DatasetSpec::Csv { path, .. }) = (base_dir, &mut cfg.dataset) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExpError::Prerequisite(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        let bad = |m: String| Err(ExpError::Validation(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n_per_subset,
                n_copyrighted,
                features,
                seq_len,
                overlap,
                seed,
            } => {
                SyntheticConfig {
                    n_per_subset: *n_per_subset,
                    n_copyrighted: *n_copyrighted,
                    features: *features,
                    seq_len: *seq_len,
                    overlap: *overlap,
                    seed: *seed,
                }
                .validate()
                .map_err(|e| ExpError::Validation(e.to_string()))?;
            }
            DatasetSpec::Csv {
                path,
                seq_len,
                n_clusters,
                copyright_fraction,
                ..
            } => {
                if !path.is_file() {
                    return bad(format!("csv file {} does not exist", path.display()));
                }
                if *seq_len < 2 || seq_len % 2 != 0 {
                    return bad("seq_len must be even and at least 2".into());
                }
                if *n_clusters == 0 {
                    return bad("n_clusters must be positive".into());
                }
                if !(*copyright_fraction > 0.0 && *copyright_fraction < 1.0) {
                    return bad("copyright_fraction must lie in (0, 1)".into());
                }
            }
        }
        let t = &self.target;
        let p = &self.prompter;
        for (name, lr, epochs, batch) in [
            ("target", t.lr, t.max_epochs, t.batch_size),
            ("prompter", p.lr, p.max_epochs, p.batch_size),
        ] {
            if !(lr > 0.0 && lr.is_finite()) || epochs == 0 || batch == 0 {
                return bad(format!("{name}: lr, max_epochs and batch_size must be positive"));
            }
        }
        if t.es_patience == 0 {
            return bad("target.es_patience must be positive".into());
        }
        if p.alpha == 0 || !(p.omega >= 0.0) {
            return bad("prompter.alpha must be >= 1 and omega >= 0".into());
        }
        if self.audit.k.is_empty() || self.audit.k.contains(&0) {
            return bad("audit.k must hold positive values".into());
        }
        match self.audit.delta {
            DeltaRule::Percentile(q) if !(0.0..=1.0).contains(&q) => {
                return bad("audit.delta percentile must lie in [0, 1]".into())
            }
            DeltaRule::Fixed(d) if !(d >= 0.0) => return bad("audit.delta must be >= 0".into()),
            _ => {}
        }
        Ok(())
    }

    fn hash_of(parts: &[&dyn erased::Json]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.json());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    pub fn data_fingerprint(&self) -> String {
        Self::hash_of(&[&self.dataset])
    }

    pub fn target_fingerprint(&self) -> String {
        Self::hash_of(&[&self.dataset, &self.target])
    }

    pub fn prompter_fingerprint(&self) -> String {
        Self::hash_of(&[&self.dataset, &self.target, &self.prompter])
    }

    /// Hash of everything except seeds and output location.
    pub fn fingerprint(&self) -> String {
        Self::hash_of(&[&self.dataset, &self.target, &self.prompter, &self.audit])
    }

    pub fn pruning(&self) -> PruningOptions {
        PruningOptions::gpd(self.prompter.alpha, self.prompter.omega)
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("config serializes")
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn short(fp: &str) -> &str {
    &fp[..12]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Optimized,
}

impl Arm {
    pub fn from_flag(optimized: bool) -> Self {
        if optimized {
            Arm::Optimized
        } else {
            Arm::Baseline
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "base",
            Arm::Optimized => "opt",
        }
    }

    pub fn is_optimized(self) -> bool {
        self == Arm::Optimized
    }
}

/// Artifact paths for one config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    cfg: RunConfig,
}

impl Layout {
    /// Output root: `output_dir` from the config unless the environment
    /// variable is set.
    pub fn new(cfg: &RunConfig) -> Self {
        let root = std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| cfg.output_dir.clone());
        Self::at(cfg, root)
    }

    pub fn at(cfg: &RunConfig, root: PathBuf) -> Self {
        Self {
            root,
            cfg: cfg.clone(),
        }
    }

    pub fn bundle(&self) -> PathBuf {
        self.root
            .join("bundles")
            .join(format!("bundle-{}.capb", short(&self.cfg.data_fingerprint())))
    }

    pub fn target(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!(
            "target-s{seed}-{}.ckpt",
            short(&self.cfg.target_fingerprint())
        ))
    }

    pub fn prompter(&self, seed: u64, arm: Arm) -> PathBuf {
        self.root.join("checkpoints").join(format!(
            "prompter-{}-s{seed}-{}.ckpt",
            arm.name(),
            short(&self.cfg.prompter_fingerprint())
        ))
    }

    pub fn report(&self, seed: u64, arm: Arm) -> PathBuf {
        self.root.join("reports").join(format!(
            "audit-{}-s{seed}-{}.json",
            arm.name(),
            short(&self.cfg.fingerprint())
        ))
    }

    pub fn index(&self, arm: Arm) -> PathBuf {
        self.root
            .join("reports")
            .join(format!("index-{}-{}.json", arm.name(), short(&self.cfg.fingerprint())))
    }

    pub fn aggregate(&self, arm: Arm) -> PathBuf {
        self.root
            .join("reports")
            .join(format!("aggregate-{}-{}.json", arm.name(), short(&self.cfg.fingerprint())))
    }

    pub fn bench(&self) -> PathBuf {
        self.root
            .join("bench")
            .join(format!("bench-{}.json", short(&self.cfg.fingerprint())))
    }
}

/// Path of the structured training log written next to a checkpoint.
pub fn train_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".train.json");
    PathBuf::from(s)
}

fn timing_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

/// Training log without wall-clock data, so reruns reproduce it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema: String,
    pub schema_version: u32,
    pub fingerprint: String,
    pub seed: u64,
    pub model: String,
    pub report: TrainReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExpError> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| ExpError::Other(e.to_string()))?;
    body.push(b'\n');
    write_atomic(path, &body)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ExpError> {
    let bytes = std::fs::read(path).map_err(|e| {
        ExpError::Prerequisite(format!("{}: {e}", path.display()))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ExpError::Validation(format!("{}: {e}", path.display())))
}

fn write_train_log(
    ckpt: &Path,
    fingerprint: &str,
    seed: u64,
    model: &str,
    report: &TrainReport,
) -> Result<(), ExpError> {
    let mut stripped = report.clone();
    let seconds = std::mem::take(&mut stripped.epoch_seconds);
    write_json(
        &train_log_path(ckpt),
        &TrainLog {
            schema: TRAIN_LOG_SCHEMA.into(),
            schema_version: ARTIFACT_SCHEMA_VERSION,
            fingerprint: fingerprint.into(),
            seed,
            model: model.into(),
            report: stripped,
        },
    )?;
    write_json(&timing_path(ckpt), &serde_json::json!({ "epoch_seconds": seconds }))
}

/// Read a training log with its per-epoch timings restored.
pub fn read_train_log(ckpt: &Path) -> Result<TrainLog, ExpError> {
    let mut log: TrainLog = read_json(&train_log_path(ckpt))?;
    if log.schema != TRAIN_LOG_SCHEMA || log.schema_version != ARTIFACT_SCHEMA_VERSION {
        return Err(ExpError::Validation(format!("{} has an unsupported schema", ckpt.display())));
    }
    if let Ok(t) = read_json::<serde_json::Value>(&timing_path(ckpt)) {
        if let Some(v) = t.get("epoch_seconds").and_then(|v| v.as_array()) {
            log.report.epoch_seconds = v.iter().filter_map(|x| x.as_f64()).collect();
        }
    }
    Ok(log)
}

fn build_bundle(cfg: &RunConfig) -> Result<DatasetBundle, ExpError> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            n_per_subset,
            n_copyrighted,
            features,
            seq_len,
            overlap,
            seed,
        } => Ok(generate_synthetic(&SyntheticConfig {
            n_per_subset: *n_per_subset,
            n_copyrighted: *n_copyrighted,
            features: *features,
            seq_len: *seq_len,
            overlap: *overlap,
            seed: *seed,
        })?),
        DatasetSpec::Csv {
            path,
            seq_len,
            n_clusters,
            copyright_fraction,
            columns,
            seed,
        } => {
            let table = read_csv_table(path)?;
            let (names, data) = match columns {
                None => (table.feature_names, table.data),
                Some(cols) => {
                    let idx = cols
                        .iter()
                        .map(|c| {
                            table.feature_names.iter().position(|n| n == c).ok_or_else(|| {
                                ExpError::Validation(format!("column {c:?} not in {}", path.display()))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    (cols.clone(), table.data.select(ndarray::Axis(1), &idx))
                }
            };
            Ok(window_and_split(
                &data,
                &names,
                &WindowConfig {
                    seq_len: *seq_len,
                    n_clusters: *n_clusters,
                    copyright_fraction: *copyright_fraction,
                    seed: *seed,
                },
            )?)
        }
    }
}

/// Generate the synthetic bundle and write it. Returns its path.
pub fn synth_data(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf, ExpError> {
    if !matches!(cfg.dataset, DatasetSpec::Synthetic { .. }) {
        return Err(ExpError::Validation("synth-data needs a synthetic dataset section".into()));
    }
    write_bundle(cfg, layout)
}

/// Read, window and split the CSV dataset and write the bundle.
pub fn ingest(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf, ExpError> {
    if !matches!(cfg.dataset, DatasetSpec::Csv { .. }) {
        return Err(ExpError::Validation("ingest needs a csv dataset section".into()));
    }
    write_bundle(cfg, layout)
}

fn write_bundle(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf, ExpError> {
    let bundle = build_bundle(cfg)?;
    let path = layout.bundle();
    save_bundle(&bundle, &path)?;
    log::info!(
        "wrote {} ({} sequences: {}/{}/{}/{})",
        path.display(),
        bundle.total_sequences(),
        bundle.d_tr.len(),
        bundle.d_v.len(),
        bundle.d_nc.len(),
        bundle.d_c.len()
    );
    Ok(path)
}

/// Load the bundle for `cfg`, normalized with its scaler.
pub fn load_prepared(layout: &Layout) -> Result<DatasetBundle, ExpError> {
    let path = layout.bundle();
    if !path.is_file() {
        return Err(ExpError::Prerequisite(format!(
            "bundle {} not found; run synth-data or ingest first",
            path.display()
        )));
    }
    Ok(load_bundle(&path)?.normalized())
}

/// Model shapes for a bundle: `(target, prompter)`.
pub fn model_configs(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<(ModelConfig, ModelConfig), ExpError> {
    let sample = bundle
        .d_tr
        .first()
        .ok_or_else(|| ExpError::Validation("bundle has an empty training split".into()))?;
    let (kl, f) = sample.key.dim();
    let vl = sample.value.nrows();
    let target = cfg.target.preset.preset().config(kl, f, vl, f);
    let prompter = cfg.prompter.preset.preset().config(vl, f, kl, f);
    target.validate()?;
    prompter.validate()?;
    Ok((target, prompter))
}

fn pairs(split: &[SequenceSample]) -> Vec<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    split.iter().map(|s| (s.key.clone(), s.value.clone())).collect()
}

fn target_options(cfg: &RunConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        max_epochs: cfg.target.max_epochs,
        batch_size: cfg.target.batch_size,
        lr: cfg.target.lr,
        seed,
        es_patience: cfg.target.es_patience,
    }
}

fn prompter_options(cfg: &RunConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        max_epochs: cfg.prompter.max_epochs,
        batch_size: cfg.prompter.batch_size,
        lr: cfg.prompter.lr,
        seed,
        es_patience: 1,
    }
}

fn train_target_seed(
    cfg: &RunConfig,
    layout: &Layout,
    bundle: &DatasetBundle,
    seed: u64,
) -> Result<(Seq2SeqModel<f32>, TrainReport), ExpError> {
    let (tcfg, _) = model_configs(cfg, bundle)?;
    let (mut phi, report) =
        train_target::<f32>(&tcfg, &pairs(&bundle.d_tr), &pairs(&bundle.d_v), &target_options(cfg, seed))?;
    phi.meta.seed = seed;
    let path = layout.target(seed);
    save_checkpoint(&phi, &path)?;
    write_train_log(&path, &cfg.target_fingerprint(), seed, "target", &report)?;
    log::info!(
        "seed {seed}: target best epoch {} val {:.5} -> {}",
        report.best_epoch,
        report.best_loss,
        path.display()
    );
    Ok((phi, report))
}

/// Train one target model per seed.
pub fn cmd_train_target(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>, ExpError> {
    let bundle = load_prepared(layout)?;
    cfg.seeds
        .iter()
        .map(|&s| train_target_seed(cfg, layout, &bundle, s).map(|_| layout.target(s)))
        .collect()
}

fn load_target(cfg: &RunConfig, layout: &Layout, bundle: &DatasetBundle, seed: u64) -> Result<Seq2SeqModel<f32>, ExpError> {
    let path = layout.target(seed);
    if !path.is_file() {
        return Err(ExpError::Prerequisite(format!(
            "target checkpoint {} not found; run train-target first",
            path.display()
        )));
    }
    let (tcfg, _) = model_configs(cfg, bundle)?;
    Ok(load_checkpoint_expecting::<f32>(&path, &tcfg)?)
}

fn d2_values(bundle: &DatasetBundle) -> Vec<ndarray::Array2<f64>> {
    bundle.d2().iter().map(|s| s.value.clone()).collect()
}

fn train_prompter_seed(
    cfg: &RunConfig,
    layout: &Layout,
    bundle: &DatasetBundle,
    phi: &Seq2SeqModel<f32>,
    seed: u64,
    arm: Arm,
) -> Result<(Seq2SeqModel<f32>, TrainReport), ExpError> {
    let (_, pcfg) = model_configs(cfg, bundle)?;
    let pruning = if arm.is_optimized() {
        Some(cfg.pruning())
    } else {
        None
    };
    let (mut theta, report) =
        train_prompter(&pcfg, phi, &d2_values(bundle), &prompter_options(cfg, seed), pruning.as_ref())?;
    theta.meta.seed = seed;
    let path = layout.prompter(seed, arm);
    save_checkpoint(&theta, &path)?;
    write_train_log(&path, &cfg.prompter_fingerprint(), seed, &format!("prompter-{}", arm.name()), &report)?;
    log::info!(
        "seed {seed}: prompter ({}) best epoch {} loss {:.5}, {} pruning events",
        arm.name(),
        report.best_epoch,
        report.best_loss,
        report.pruning_events.len()
    );
    Ok((theta, report))
}

/// Train one prompt generator per seed against the stored target.
pub fn cmd_train_prompter(cfg: &RunConfig, layout: &Layout, optimized: bool) -> Result<Vec<PathBuf>, ExpError> {
    let bundle = load_prepared(layout)?;
    let arm = Arm::from_flag(optimized);
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let phi = load_target(cfg, layout, &bundle, seed)?;
        train_prompter_seed(cfg, layout, &bundle, &phi, seed, arm)?;
        out.push(layout.prompter(seed, arm));
    }
    Ok(out)
}

fn audit_pair(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    theta: &Seq2SeqModel<f32>,
    phi: &Seq2SeqModel<f32>,
    seed: u64,
    arm: Arm,
) -> Result<AuditReport, ExpError> {
    let seeds = RunSeeds {
        data: cfg.dataset.seed(),
        target: seed,
        prompter: seed,
    };
    Ok(audit::run_audit(
        theta,
        phi,
        &bundle.d2(),
        cfg.audit.delta,
        &cfg.audit.k,
        &cfg.fingerprint(),
        seeds,
        arm.is_optimized(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditIndex {
    pub schema: String,
    pub schema_version: u32,
    pub fingerprint: String,
    pub optimized: bool,
    pub reports: Vec<(u64, String)>,
}

/// Audit every seed's trained pair; writes per-seed reports and an index.
pub fn cmd_audit(cfg: &RunConfig, layout: &Layout, optimized: bool) -> Result<Vec<PathBuf>, ExpError> {
    let bundle = load_prepared(layout)?;
    let (_, pcfg) = model_configs(cfg, &bundle)?;
    let arm = Arm::from_flag(optimized);
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let phi = load_target(cfg, layout, &bundle, seed)?;
        let tpath = layout.prompter(seed, arm);
        if !tpath.is_file() {
            return Err(ExpError::Prerequisite(format!(
                "prompter checkpoint {} not found; run train-prompter{} first",
                tpath.display(),
                if optimized { " --optimized" } else { "" }
            )));
        }
        let theta = load_checkpoint_expecting::<f32>(&tpath, &pcfg)?;
        let report = audit_pair(cfg, &bundle, &theta, &phi, seed, arm)?;
        let path = layout.report(seed, arm);
        audit::emit_report(&report, &path)?;
        audit::write_csv(&report, &path.with_extension("csv"))?;
        log::info!(
            "seed {seed}: AUC-Gain {:.4}, {} violations at delta {:.5}",
            report.auc_gain,
            report.violations.len(),
            report.delta_threshold
        );
        paths.push(path);
    }
    write_json(
        &layout.index(arm),
        &AuditIndex {
            schema: INDEX_SCHEMA.into(),
            schema_version: ARTIFACT_SCHEMA_VERSION,
            fingerprint: cfg.fingerprint(),
            optimized,
            reports: cfg
                .seeds
                .iter()
                .zip(&paths)
                .map(|(&s, p)| (s, p.file_name().unwrap().to_string_lossy().into_owned()))
                .collect(),
        },
    )?;
    Ok(paths)
}

/// Mean and Student-t 95% half-width of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub half_width: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    /// Needs at least two values.
    pub fn from_values(values: &[f64]) -> Result<Self, ExpError> {
        let n = values.len();
        if n < 2 {
            return Err(ExpError::Validation(format!("need at least 2 runs, got {n}")));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| ExpError::Other(e.to_string()))?
            .inverse_cdf(0.975);
        Ok(Self {
            mean,
            half_width: t * var.sqrt() / (n as f64).sqrt(),
            values: values.to_vec(),
        })
    }

    /// `mean ± half-width` with `decimals` places.
    pub fn display(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub schema: String,
    pub schema_version: u32,
    pub fingerprint: String,
    pub optimized: bool,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    /// Keyed `precision@K` and `auc_gain`.
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl AggregateStats {
    /// Table row in the style `metric  mean ± hw`. Precision values use no
    /// decimals, AUC-Gain two.
    pub fn table(&self) -> String {
        let mut keys: Vec<&String> = self.metrics.keys().collect();
        keys.sort_by_key(|k| {
            k.strip_prefix("precision@")
                .and_then(|n| n.parse::<usize>().ok())
                .unwrap_or(usize::MAX)
        });
        let mut out = String::new();
        for k in keys {
            let m = &self.metrics[k];
            let decimals = if k == "auc_gain" { 2 } else { 0 };
            out.push_str(&format!("{k:<14} {}\n", m.display(decimals)));
        }
        out
    }
}

/// Combine reports from repeated runs of one config.
pub fn aggregate_reports(reports: &[AuditReport]) -> Result<AggregateStats, ExpError> {
    let first = reports
        .first()
        .ok_or_else(|| ExpError::Validation("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(ExpError::Validation(format!(
            "mixed config fingerprints: {} vs {}",
            first.fingerprint, r.fingerprint
        )));
    }
    if reports.iter().any(|r| r.optimized != first.optimized) {
        return Err(ExpError::Validation("mixed optimized and baseline reports".into()));
    }
    let mut metrics = BTreeMap::new();
    for &k in first.precision_at.keys() {
        let vals = reports
            .iter()
            .map(|r| {
                r.precision_at
                    .get(&k)
                    .copied()
                    .ok_or_else(|| ExpError::Validation(format!("a report lacks Precision@{k}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        metrics.insert(format!("precision@{k}"), MetricSummary::from_values(&vals)?);
    }
    let auc: Vec<f64> = reports.iter().map(|r| r.auc_gain).collect();
    metrics.insert("auc_gain".into(), MetricSummary::from_values(&auc)?);
    Ok(AggregateStats {
        schema: AGGREGATE_SCHEMA.into(),
        schema_version: ARTIFACT_SCHEMA_VERSION,
        fingerprint: first.fingerprint.clone(),
        optimized: first.optimized,
        n_runs: reports.len(),
        seeds: reports.iter().map(|r| r.seeds.target).collect(),
        metrics,
    })
}

/// Read report files, aggregate and write the result to `out`.
pub fn cmd_aggregate(paths: &[PathBuf], out: &Path) -> Result<AggregateStats, ExpError> {
    let reports = paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(ExpError::Prerequisite(format!("report {} not found", p.display())));
            }
            audit::read_report(p).map_err(ExpError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stats = aggregate_reports(&reports)?;
    write_json(out, &stats)?;
    Ok(stats)
}

/// Outcome of one prompter-training arm in the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub total_seconds: f64,
    pub report: TrainReport,
    pub auc_gain: f64,
    pub precision_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub seed: u64,
    pub no_opt: ArmResult,
    pub opt: ArmResult,
    /// `opt.total_seconds / no_opt.total_seconds`
    pub time_ratio: f64,
    /// `opt - no_opt` per metric.
    pub auc_gain_delta: f64,
    pub precision_delta: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub schema_version: u32,
    pub fingerprint: String,
    pub runs: Vec<BenchRun>,
    /// Summed optimized time over summed baseline time.
    pub overall_time_ratio: f64,
}

fn bench_arm(
    cfg: &RunConfig,
    layout: &Layout,
    bundle: &DatasetBundle,
    phi: &Seq2SeqModel<f32>,
    seed: u64,
    arm: Arm,
) -> Result<ArmResult, ExpError> {
    let started = std::time::Instant::now();
    let (theta, report) = train_prompter_seed(cfg, layout, bundle, phi, seed, arm)?;
    let total_seconds = started.elapsed().as_secs_f64();
    let audit = audit_pair(cfg, bundle, &theta, phi, seed, arm)?;
    Ok(ArmResult {
        total_seconds,
        report,
        auc_gain: audit.auc_gain,
        precision_at: audit.precision_at,
    })
}

/// Paired No-Opt/Opt prompter training per seed against the same target.
/// Trains and stores the target first when its checkpoint is missing.
pub fn cmd_bench(cfg: &RunConfig, layout: &Layout) -> Result<BenchReport, ExpError> {
    let bundle = load_prepared(layout)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let phi = match load_target(cfg, layout, &bundle, seed) {
            Ok(phi) => phi,
            Err(ExpError::Prerequisite(_)) => train_target_seed(cfg, layout, &bundle, seed)?.0,
            Err(e) => return Err(e),
        };
        let no_opt = bench_arm(cfg, layout, &bundle, &phi, seed, Arm::Baseline)?;
        let opt = bench_arm(cfg, layout, &bundle, &phi, seed, Arm::Optimized)?;
        let precision_delta = opt
            .precision_at
            .iter()
            .filter_map(|(k, v)| no_opt.precision_at.get(k).map(|b| (*k, v - b)))
            .collect();
        log::info!(
            "seed {seed}: opt {:.2}s vs no-opt {:.2}s, AUC-Gain {:.4} vs {:.4}",
            opt.total_seconds,
            no_opt.total_seconds,
            opt.auc_gain,
            no_opt.auc_gain
        );
        runs.push(BenchRun {
            seed,
            time_ratio: opt.total_seconds / no_opt.total_seconds,
            auc_gain_delta: opt.auc_gain - no_opt.auc_gain,
            precision_delta,
            no_opt,
            opt,
        });
    }
    let sum = |f: fn(&BenchRun) -> f64| runs.iter().map(f).sum::<f64>();
    let report = BenchReport {
        schema: BENCH_SCHEMA.into(),
        schema_version: ARTIFACT_SCHEMA_VERSION,
        fingerprint: cfg.fingerprint(),
        overall_time_ratio: sum(|r| r.opt.total_seconds) / sum(|r| r.no_opt.total_seconds),
        runs,
    };
    write_json(&layout.bench(), &report)?;
    Ok(report)
}

/// Bundle split sizes as `(d_tr, d_v, d_nc, d_c)`.
pub fn split_counts(bundle: &DatasetBundle) -> (usize, usize, usize, usize) {
    (bundle.d_tr.len(), bundle.d_v.len(), bundle.d_nc.len(), bundle.d_c.len())
}

pub use datagen::BUNDLE_SCHEMA_VERSION;
