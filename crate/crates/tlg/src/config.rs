//! Structured run configuration: TOML file + dotted-path overrides.
//!
//! Every tunable in the pipeline lives here so a run is reproducible from its
//! manifest alone. `--set section.key=value` overrides are applied onto the
//! parsed TOML document before deserialization; last writer wins.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::LayerSelection;
use crate::error::{Result, TlgError};

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub model: ModelToggles,
    pub layers: LayersConfig,
    pub ha: HaConfig,
    pub ht: HtConfig,
    pub hc: HcConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic" or "disk".
    pub source: String,
    /// Dataset root when `source = "disk"`.
    pub root: String,
    pub n_categories: usize,
    pub exemplars_per_category: usize,
    pub image_size: usize,
    pub seed: u64,
    pub n_folds: usize,
    pub max_distractors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            root: String::new(),
            n_categories: 4,
            exemplars_per_category: 20,
            image_size: 64,
            seed: 0,
            n_folds: 4,
            max_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// "toy"; real extractors attach through the library API.
    pub kind: String,
    pub seed: u64,
    pub width_multiplier: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { kind: "toy".into(), seed: 7, width_multiplier: 2 }
    }
}

/// Module toggles; the ablation surface of the module table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelToggles {
    pub ha: bool,
    pub ht: bool,
    pub hc: bool,
}

impl Default for ModelToggles {
    fn default() -> Self {
        ModelToggles { ha: true, ht: true, hc: true }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    /// One tap per level per branch, from `support` / `query`.
    Triple,
    /// Every tap of every level, both branches (the dense baseline row).
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LayersConfig {
    pub mode: LayerMode,
    pub support: [usize; 3],
    pub query: [usize; 3],
}

impl Default for LayersConfig {
    fn default() -> Self {
        let sel = LayerSelection::heterogeneous_default();
        LayersConfig { mode: LayerMode::Triple, support: sel.support_layers, query: sel.query_layers }
    }
}

impl LayersConfig {
    pub fn selection(&self) -> LayerSelection {
        LayerSelection { support_layers: self.support, query_layers: self.query }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HaConfig {
    /// Common channel width after level equalization.
    pub c_ha: usize,
    /// Std-dev of the Gaussian initial value added to the support branch.
    pub init_sigma: f64,
    /// Channel width of the correlation squeeze stack.
    pub squeeze_channels: usize,
    /// "cross" correlates each branch against the other; "self" against itself.
    pub corr_mode: String,
}

impl Default for HaConfig {
    fn default() -> Self {
        HaConfig { c_ha: 64, init_sigma: 0.02, squeeze_channels: 16, corr_mode: "cross".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HtConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Fixed unroll length for the differentiable training path.
    pub unrolled_iters: usize,
    /// Transport edges with cost below this count as signal when re-weighting.
    pub cost_threshold: f64,
    pub residual_tap_support: usize,
    pub residual_tap_query: usize,
    /// Attention projection width; 0 means "match the feature channel count".
    pub d_k: usize,
}

impl Default for HtConfig {
    fn default() -> Self {
        HtConfig {
            lambda: 10.0,
            tol: 1e-6,
            max_iters: 200,
            unrolled_iters: 20,
            cost_threshold: 0.5,
            residual_tap_support: 9,
            residual_tap_query: 4,
            d_k: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HcConfig {
    pub d_text: usize,
    pub bottleneck_ratio: usize,
    pub rho_init: f64,
    /// "stub" ships with the crate; "external" requires an attached encoder.
    pub encoder: String,
    /// Prompt bank: a CSV path, `builtin:<synthetic|pascal|coco>`, or empty
    /// for the built-in synthetic bank.
    pub prompt_bank: String,
}

impl Default for HcConfig {
    fn default() -> Self {
        HcConfig {
            d_text: 64,
            bottleneck_ratio: 4,
            rho_init: 0.2,
            encoder: "stub".into(),
            prompt_bank: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden_channels: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub binarize_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.4, beta: 0.6, binarize_targets: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub episodes_per_epoch: usize,
    pub shot: usize,
    /// Held-out episodes scored after each epoch to retain the best checkpoint.
    pub val_episodes: usize,
    pub fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 16,
            learning_rate: 4e-4,
            weight_decay: 1e-4,
            seed: 0,
            episodes_per_epoch: 600,
            shot: 1,
            val_episodes: 50,
            fold: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub shot: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 1000, seed: 1234, shot: 1 }
    }
}

impl Config {
    /// The canonical grid scales with the input: 50x50 for 400x400 images,
    /// `image_size / 8` in general.
    pub fn canonical_grid(&self) -> usize {
        self.data.image_size / 8
    }

    pub fn from_path(path: &std::path::Path, overrides: &[String]) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TlgError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Config> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| TlgError::Config(format!("config parse failed: {e}")))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Config = doc
            .try_into()
            .map_err(|e| TlgError::Config(format!("config validation failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = |msg: String| Err(TlgError::Config(msg));
        if self.data.image_size < 32 {
            return e(format!("data.image_size {} below minimum 32", self.data.image_size));
        }
        if self.data.image_size % 8 != 0 {
            return e(format!(
                "data.image_size {} must be divisible by 8 so the canonical grid is integral",
                self.data.image_size
            ));
        }
        if self.data.source != "synthetic" && self.data.source != "disk" {
            return e(format!("data.source must be synthetic or disk, got {}", self.data.source));
        }
        if self.data.n_folds == 0 || self.data.n_categories == 0 {
            return e("data.n_folds and data.n_categories must be positive".into());
        }
        if self.backbone.kind != "toy" {
            return e(format!(
                "backbone.kind {} unknown; only \"toy\" ships with the crate (real extractors attach via the library API)",
                self.backbone.kind
            ));
        }
        if self.backbone.width_multiplier < 1 {
            return e("backbone.width_multiplier must be >= 1".into());
        }
        self.layers.selection().validate()?;
        if self.ha.c_ha == 0 || self.ha.squeeze_channels == 0 {
            return e("ha.c_ha and ha.squeeze_channels must be positive".into());
        }
        if self.ha.corr_mode != "cross" && self.ha.corr_mode != "self" {
            return e(format!("ha.corr_mode must be cross or self, got {}", self.ha.corr_mode));
        }
        if self.ha.init_sigma < 0.0 {
            return e("ha.init_sigma must be non-negative".into());
        }
        if self.ht.lambda <= 0.0 {
            return e(format!("ht.lambda must be positive, got {}", self.ht.lambda));
        }
        if self.ht.tol <= 0.0 || self.ht.max_iters == 0 || self.ht.unrolled_iters == 0 {
            return e("ht.tol, ht.max_iters and ht.unrolled_iters must be positive".into());
        }
        crate::backbone::Level::of_tap(self.ht.residual_tap_support)?;
        crate::backbone::Level::of_tap(self.ht.residual_tap_query)?;
        if self.hc.d_text == 0 || self.hc.bottleneck_ratio == 0 {
            return e("hc.d_text and hc.bottleneck_ratio must be positive".into());
        }
        if self.hc.encoder != "stub" && self.hc.encoder != "external" {
            return e(format!("hc.encoder must be stub or external, got {}", self.hc.encoder));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return e("loss.alpha and loss.beta must be non-negative".into());
        }
        if self.train.epochs == 0
            || self.train.batch_size == 0
            || self.train.episodes_per_epoch == 0
        {
            return e("train.epochs, train.batch_size, train.episodes_per_epoch must be positive".into());
        }
        if self.train.learning_rate <= 0.0 {
            return e("train.learning_rate must be positive".into());
        }
        for (name, shot) in [("train.shot", self.train.shot), ("eval.shot", self.eval.shot)] {
            if shot != 1 && shot != 5 {
                return e(format!("{name} must be 1 or 5, got {shot}"));
            }
        }
        if self.train.fold >= self.data.n_folds {
            return e(format!(
                "train.fold {} out of range 0..{}",
                self.train.fold, self.data.n_folds
            ));
        }
        if self.eval.episodes == 0 {
            return e("eval.episodes must be positive".into());
        }
        Ok(())
    }

    /// Canonical serialized form; the basis for the config hash.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply one `section.key=value` override onto a parsed TOML document.
fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<()> {
    let (path, raw_value) = ov
        .split_once('=')
        .ok_or_else(|| TlgError::Config(format!("override '{ov}' is not of the form path=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(TlgError::Config(format!("override path '{path}' is malformed")));
    }
    // parse the value as a TOML fragment so arrays, strings and numbers all work
    let fragment = format!("v = {}", raw_value.trim());
    let value = match fragment.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        // bare words become strings
        Err(_) => toml::Value::String(raw_value.trim().to_string()),
    };
    let mut cursor = doc;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| TlgError::Config(format!("override path '{path}' crosses a non-table")))?;
    }
    cursor.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}
