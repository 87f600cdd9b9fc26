//! Experiment configuration and the end-to-end runs behind each subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::criteria::{CriterionConfig, CriterionKind};
use crate::data::{load_mnist_dir, split, synth_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::gate::{GateInit, DEFAULT_LOG_HI, DEFAULT_LOG_LO};
use crate::nn::Network;
use crate::prune::{accuracy, continuous_prune, post_training_prune, spearman_matrix, Curve, RunRecord, TrainOptions, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `layers` hidden Dense → Gate → ReLU blocks of width `hidden`.
    Mlp { layers: usize, hidden: usize },
    Lenet5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_test: 500, n_classes: 4, dim: 16, separation: 6.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Falls back to the model default (MLP 8.5e-4, Lenet5 1.4e-3).
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    128
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: None, batch_size: default_batch() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub log_lo: f64,
    pub log_hi: f64,
    pub mu_init: f64,
    pub sigma_init: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { log_lo: DEFAULT_LOG_LO, log_hi: DEFAULT_LOG_HI, mu_init: 0.0, sigma_init: 1.0 }
    }
}

fn default_criterion() -> CriterionConfig {
    CriterionConfig::new(CriterionKind::BmrsN)
}
fn default_one() -> f64 {
    1.0
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_chunk() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default = "default_criterion")]
    pub criterion: CriterionConfig,
    #[serde(default)]
    pub seed: u64,
    /// Extra seeds for sweeps; empty means just `seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// p1 values for sweeps.
    #[serde(default)]
    pub p1_list: Vec<u32>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_one")]
    pub kl_scale: f64,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Standardise pixels with training-split statistics instead of plain [0,1] scaling.
    #[serde(default)]
    pub standardize: bool,
    /// Post-training chunk size as a fraction of prunable structures.
    #[serde(default = "default_chunk")]
    pub chunk_fraction: f64,
    /// Use only the first n training examples (after the split).
    #[serde(default)]
    pub train_limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::mnist_mlp()
    }
}

impl ExperimentConfig {
    pub fn mnist_mlp() -> Self {
        Self {
            model: ModelConfig::Mlp { layers: 7, hidden: 100 },
            dataset: DatasetKind::Mnist,
            synth: SynthConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: TrainSchedule::default(),
            criterion: default_criterion(),
            seed: 0,
            seeds: Vec::new(),
            p1_list: Vec::new(),
            output_dir: None,
            kl_scale: 1.0,
            gate: GateConfig::default(),
            train_fraction: 0.8,
            standardize: false,
            chunk_fraction: 0.05,
            train_limit: None,
        }
    }

    pub fn mnist_lenet5() -> Self {
        Self { model: ModelConfig::Lenet5, ..Self::mnist_mlp() }
    }

    /// Parses a config file, or the `config` member of a run manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let inner = match value.get("config") {
            Some(c) if value.get("config_hash").is_some() => c.clone(),
            _ => value,
        };
        let cfg: Self = serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr.unwrap_or(match self.model {
            ModelConfig::Mlp { .. } => 8.5e-4,
            ModelConfig::Lenet5 => 1.4e-3,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn gate_init(&self) -> GateInit {
        GateInit { mu: self.gate.mu_init, sigma: self.gate.sigma_init, log_lo: self.gate.log_lo, log_hi: self.gate.log_hi }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions { lr: self.lr(), batch_size: self.optimizer.batch_size, kl_scale: self.kl_scale, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let ModelConfig::Mlp { layers, hidden } = self.model {
            if layers == 0 || hidden == 0 {
                return bad(format!("mlp needs layers >= 1 and hidden >= 1, got {layers} and {hidden}"));
            }
        }
        if self.model == ModelConfig::Lenet5 && self.dataset == DatasetKind::Synth {
            return bad("lenet5 needs image data; use mnist or fashion_mnist".into());
        }
        if !(self.lr() > 0.0) || self.optimizer.batch_size == 0 {
            return bad("optimizer needs lr > 0 and batch_size >= 1".into());
        }
        self.schedule.validate()?;
        self.criterion.validate()?;
        if !(self.kl_scale >= 0.0 && self.kl_scale.is_finite()) {
            return bad(format!("kl_scale must be a finite non-negative number, got {}", self.kl_scale));
        }
        let g = &self.gate;
        if !(g.log_lo < g.log_hi) || !(g.sigma_init > 0.0) {
            return bad("gate needs log_lo < log_hi and sigma_init > 0".into());
        }
        if self.criterion.criterion == CriterionKind::BmrsU {
            let prior = crate::criteria::ReducedLogUniformPrior::from_bits(self.criterion.p1, self.criterion.p2)?;
            if prior.log_lo < g.log_lo || prior.log_hi > g.log_hi {
                return bad(format!(
                    "reduced support [2^-{}, 2^-{}] does not fit inside the gate support [e^{}, e^{}]",
                    self.criterion.p2, self.criterion.p1, g.log_lo, g.log_hi
                ));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        if !(self.chunk_fraction > 0.0 && self.chunk_fraction <= 1.0) {
            return bad(format!("chunk_fraction must lie in (0, 1], got {}", self.chunk_fraction));
        }
        if self.train_limit == Some(0) {
            return bad("train_limit must be positive".into());
        }
        if self.dataset == DatasetKind::Synth {
            let s = &self.synth;
            if s.n_train == 0 || s.n_test == 0 || s.n_classes < 2 || s.dim < s.n_classes {
                return bad("synth needs n_train, n_test >= 1, n_classes >= 2 and dim >= n_classes".into());
            }
        }
        Ok(())
    }

    /// JSON text the hash is taken over.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Git blob hash (SHA-1 of "blob <len>\0<canonical json>").
    pub fn config_hash(&self) -> String {
        git_blob_hash(self.canonical_json().as_bytes())
    }

    pub fn build_network(&self) -> Result<Network> {
        self.build_network_for(&self.example_shape(), self.n_classes())
    }

    fn example_shape(&self) -> Vec<usize> {
        match self.dataset {
            DatasetKind::Synth => vec![1, 1, self.synth.dim],
            _ => vec![1, 28, 28],
        }
    }

    fn n_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synth => self.synth.n_classes,
            _ => 10,
        }
    }

    fn build_network_for(&self, input: &[usize], classes: usize) -> Result<Network> {
        let gate = Some(self.gate_init());
        match self.model {
            ModelConfig::Mlp { layers, hidden } => Network::mlp(input, layers, hidden, classes, gate, self.seed),
            ModelConfig::Lenet5 => Network::lenet5(input, classes, gate, self.seed),
        }
    }

    /// Train / validation / test splits for this config.
    pub fn load_data(&self, data_dir: Option<&Path>) -> Result<DataSplits> {
        let (full, mut test) = match self.dataset {
            DatasetKind::Synth => {
                let s = &self.synth;
                let all = synth_blobs(s.n_train + s.n_test, s.n_classes, s.dim, s.separation, self.seed)?;
                let idx: Vec<usize> = (0..all.len()).collect();
                (all.subset(&idx[..s.n_train], Split::Full), all.subset(&idx[s.n_train..], Split::Test))
            }
            kind => {
                let dir = resolve_dataset_dir(data_dir, kind)?;
                load_mnist_dir(&dir)?
            }
        };
        let (mut train, mut val) = split(&full, self.train_fraction, self.seed)?;
        if let Some(n) = self.train_limit {
            let idx: Vec<usize> = (0..n.min(train.len())).collect();
            train = train.subset(&idx, Split::Train);
        }
        if self.standardize {
            let (m, s) = train.pixel_stats();
            train.standardize(m, s);
            if !val.is_empty() {
                val.standardize(m, s);
            }
            test.standardize(m, s);
        }
        Ok(DataSplits { train, val, test })
    }
}

pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Finds the directory holding the IDX files: `<root>/<name>` or `<root>`
/// itself. `root` defaults to $BMRS_DATA_DIR, then `./data`.
pub fn resolve_dataset_dir(root: Option<&Path>, kind: DatasetKind) -> Result<PathBuf> {
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => std::env::var_os("BMRS_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
    };
    let name = match kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::FashionMnist => "fashion_mnist",
        DatasetKind::Synth => return Ok(root),
    };
    let marker = "train-images-idx3-ubyte";
    for cand in [root.join(name), root.clone()] {
        if cand.join(marker).is_file() {
            return Ok(cand);
        }
    }
    Err(Error::Config(format!("no {name} IDX files under {} (looked for {marker})", root.display())))
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub records: Vec<RunRecord>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &RunRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Builds the configured network and runs continuous pruning on it.
pub fn run_train(cfg: &ExperimentConfig, data: &DataSplits) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.build_network()?;
    let (net, records) = continuous_prune(net, &data.train, &data.test, &cfg.criterion, &cfg.schedule, cfg.train_options())?;
    Ok(TrainOutcome { net, records })
}

/// Criteria compared in the rank-correlation matrix.
pub fn comparison_criteria(cfg: &ExperimentConfig) -> Vec<CriterionConfig> {
    let base = cfg.criterion;
    let with = |k| CriterionConfig { criterion: k, threshold: None, ..base };
    vec![with(CriterionKind::BmrsN), with(CriterionKind::BmrsU), with(CriterionKind::Snr), with(CriterionKind::MeanTheta), with(CriterionKind::L2)]
}

pub fn criterion_label(c: &CriterionConfig) -> String {
    match c.criterion {
        CriterionKind::BmrsU => format!("bmrs_u_{}", c.p1),
        k => k.name().to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct PostOutcome {
    pub origin_accuracy: f64,
    pub curve: Curve,
    pub labels: Vec<String>,
    pub spearman: Vec<Vec<Option<f64>>>,
}

/// Post-training curve for the configured criterion on a trained network,
/// plus the Spearman matrix across all criteria.
pub fn run_prune_post(cfg: &ExperimentConfig, net: &Network, data: &DataSplits) -> Result<PostOutcome> {
    cfg.validate()?;
    let want = cfg.build_network()?;
    if want.input_shape() != net.input_shape() || want.n_structures() < net.alive_structures().len() {
        return Err(Error::Config(format!(
            "checkpoint input {:?} does not fit the configured model (input {:?})",
            net.input_shape(),
            want.input_shape()
        )));
    }
    let kinds: Vec<&str> = net.layers.iter().map(|l| l.name()).collect();
    let want_kinds: Vec<&str> = want.layers.iter().map(|l| l.name()).collect();
    if kinds != want_kinds {
        return Err(Error::Config(format!("checkpoint layers {kinds:?} do not match the configured model {want_kinds:?}")));
    }
    if cfg.criterion.criterion == CriterionKind::None {
        return Err(Error::Config("post-training pruning needs a criterion other than none".into()));
    }
    let origin_accuracy = accuracy(net, &data.test)?;
    let curve = post_training_prune(net, &data.train, &data.test, &cfg.criterion, cfg.chunk_fraction, cfg.train_options())?;
    let crits = comparison_criteria(cfg);
    let spearman = spearman_matrix(net, &crits)?;
    Ok(PostOutcome { origin_accuracy, curve, labels: crits.iter().map(criterion_label).collect(), spearman })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p1: u32,
    pub seed: u64,
    pub compression: f64,
    pub accuracy: f64,
}

/// One BMRS_U continuous run per (p1, seed).
pub fn run_sweep(cfg: &ExperimentConfig, p1s: &[u32], data_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if p1s.is_empty() {
        return Err(Error::Config("p1 sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds() {
        let seeded = ExperimentConfig { seed, ..cfg.clone() };
        let data = seeded.load_data(data_dir)?;
        for &p1 in p1s {
            let mut c = seeded.clone();
            c.criterion = CriterionConfig { criterion: CriterionKind::BmrsU, p1, ..cfg.criterion };
            c.validate()?;
            let out = run_train(&c, &data)?;
            let last = out.final_record();
            rows.push(SweepRow { p1, seed, compression: last.compression, accuracy: last.test_accuracy });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_reference_setup() {
        let c = ExperimentConfig::mnist_mlp();
        assert_eq!(c.model, ModelConfig::Mlp { layers: 7, hidden: 100 });
        assert_eq!(c.lr(), 8.5e-4);
        assert_eq!(c.optimizer.batch_size, 128);
        assert_eq!((c.gate.log_lo, c.gate.log_hi), (-20.0, 0.0));
        assert_eq!(ExperimentConfig::mnist_lenet5().lr(), 1.4e-3);
        assert_eq!((c.schedule.epochs_train, c.schedule.fine_tune_epochs, c.schedule.prune_interval), (50, 10, 1));
    }

    #[test]
    fn minimal_json_fills_defaults_and_hash_is_stable() {
        let c = ExperimentConfig::from_json(r#"{"model": {"type": "lenet5"}, "dataset": "mnist"}"#).unwrap();
        assert_eq!(c, ExperimentConfig::mnist_lenet5());
        assert_eq!(c.config_hash(), ExperimentConfig::mnist_lenet5().config_hash());
        assert_eq!(c.config_hash().len(), 40);
        let back = ExperimentConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn git_hash_matches_known_blob() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            r#"{"model": {"type": "mlp", "layers": 0, "hidden": 3}, "dataset": "synth"}"#,
            r#"{"model": {"type": "lenet5"}, "dataset": "synth"}"#,
            r#"{"model": {"type": "lenet5"}, "dataset": "mnist", "criterion": {"criterion": "bmrs_u", "p1": 5, "p2": 5}}"#,
            r#"{"model": {"type": "lenet5"}, "dataset": "mnist", "criterion": {"criterion": "bmrs_u", "p1": 0, "p2": 40}}"#,
            r#"{"model": {"type": "lenet5"}, "dataset": "mnist", "bogus": 1}"#,
            r#"{"model": {"type": "lenet5"}, "dataset": "mnist", "schedule": {"epochs_train": 0}}"#,
            "not json",
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn manifest_wrapper_is_accepted() {
        let c = ExperimentConfig::mnist_mlp();
        let manifest = serde_json::json!({"config": c, "config_hash": c.config_hash()});
        assert_eq!(ExperimentConfig::from_json(&manifest.to_string()).unwrap(), c);
    }
}
