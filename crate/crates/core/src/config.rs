//! Run configuration: one TOML document holding the training
//! hyperparameters, model topology, dataset source and per-command options.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::CROSS_ENTROPY_LIPSCHITZ;
use crate::data::{sha256_hex, DatasetFormat};
use crate::error::{NsnError, Result};
use crate::nn::Activation;
use crate::surgery::PlanEntry;
use crate::training::{ModeKind, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; the command line `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub surgery: SurgeryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output widths come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// NSN max rank R for every layer.
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    /// Plain dense layers instead of NSN layers (`max_rank` is ignored).
    #[serde(default)]
    pub dense: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}
fn default_max_rank() -> usize {
    32
}
fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    /// NSN max rank, or `None` for a dense model.
    pub fn nsn_rank(&self) -> Option<usize> {
        (!self.dense).then_some(self.max_rank)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            max_rank: default_max_rank(),
            dense: false,
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of each class held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the stratified split.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub file: Option<FileConfig>,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            test_fraction: default_test_fraction(),
            split_seed: 0,
            synth: None,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    64
}
fn default_per_class() -> usize {
    500
}
fn default_separation() -> f64 {
    3.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            separation: default_separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub format: DatasetFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_modes() -> Vec<ModeKind> {
    ModeKind::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: default_modes(),
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_baseline_ranks")]
    pub ranks: Vec<usize>,
}

fn default_baseline_ranks() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            ranks: default_baseline_ranks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Layer index used by the containment and energy analyses.
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "default_containment_ranks")]
    pub containment_ranks: Vec<usize>,
    #[serde(default = "default_lemma_samples")]
    pub lemma_samples: usize,
    #[serde(default = "default_bound_pairs")]
    pub bound_pairs: usize,
    /// Bound on the last layer of a deeper model, earlier layers as features.
    #[serde(default)]
    pub probe: bool,
    #[serde(default = "default_lipschitz")]
    pub lipschitz: f64,
    /// Frontier ranks; empty means every rank from 1 to the model's max rank.
    #[serde(default)]
    pub frontier_ranks: Vec<usize>,
    /// Dense reference checkpoint for convergence similarity.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_containment_ranks() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}
fn default_lemma_samples() -> usize {
    10_000
}
fn default_bound_pairs() -> usize {
    500
}
fn default_lipschitz() -> f64 {
    CROSS_ENTROPY_LIPSCHITZ
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            layer: 0,
            containment_ranks: default_containment_ranks(),
            lemma_samples: default_lemma_samples(),
            bound_pairs: default_bound_pairs(),
            probe: false,
            lipschitz: default_lipschitz(),
            frontier_ranks: Vec::new(),
            reference: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryConfig {
    /// Layers to replace. Empty plus `all_dense = true` replaces every dense layer.
    #[serde(default)]
    pub layers: Vec<PlanEntry>,
    #[serde(default)]
    pub all_dense: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| NsnError::Config {
            field: e.span().map(|s| field_at(text, s.start)).unwrap_or_else(|| "config".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config, resolving a relative dataset path
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NsnError::config("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(file), Some(dir)) = (cfg.data.file.as_mut(), path.parent()) {
            if file.path.is_relative() {
                file.path = dir.join(&file.path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(NsnError::config("model.hidden", "widths must be positive"));
        }
        if self.model.max_rank == 0 {
            return Err(NsnError::config("model.max_rank", "must be at least 1"));
        }
        if let Some(r) = self.model.nsn_rank() {
            if self.train.anchor_rank > r {
                return Err(NsnError::config(
                    "train.anchor_rank",
                    format!("anchor {} exceeds model.max_rank {r}", self.train.anchor_rank),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(NsnError::config("data.test_fraction", "must lie in [0, 1)"));
        }
        if self.data.synth.is_some() && self.data.file.is_some() {
            return Err(NsnError::config("data", "set either data.synth or data.file, not both"));
        }
        if let Some(s) = &self.data.synth {
            if s.num_classes < 2 || s.dim == 0 || s.per_class == 0 {
                return Err(NsnError::config("data.synth", "need at least 2 classes and positive dim and per_class"));
            }
            if !(s.separation.is_finite() && s.separation >= 0.0) {
                return Err(NsnError::config("data.synth.separation", "must be finite and non-negative"));
            }
        }
        if self.ablate.modes.is_empty() {
            return Err(NsnError::config("ablate.modes", "list at least one mode"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(NsnError::config("ablate.seeds", "list at least one seed"));
        }
        if self.baseline.ranks.is_empty() || self.baseline.ranks.contains(&0) {
            return Err(NsnError::config("baseline.ranks", "list at least one positive rank"));
        }
        if self.analysis.containment_ranks.contains(&0) || self.analysis.frontier_ranks.contains(&0) {
            return Err(NsnError::config("analysis", "ranks must be positive"));
        }
        if !(self.analysis.lipschitz.is_finite() && self.analysis.lipschitz >= 0.0) {
            return Err(NsnError::config("analysis.lipschitz", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, recorded in checkpoint metadata.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn synth_or_default(&self) -> SynthConfig {
        self.data.synth.clone().unwrap_or_default()
    }
}

/// Dotted key path of the TOML table or key enclosing byte `offset`.
fn field_at(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    let key = text[offset.min(text.len())..]
        .split(|c: char| c == '=' || c.is_whitespace())
        .next()
        .filter(|k| !k.is_empty() && !k.starts_with('['))
        .map(str::to_string);
    match (table, key) {
        (Some(t), Some(k)) => format!("{t}.{k}"),
        (Some(t), None) => t,
        (None, Some(k)) => k,
        (None, None) => "config".into(),
    }
}
