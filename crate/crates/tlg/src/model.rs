//! Full-model assembly: owns the parameter store, wires the enabled modules
//! into one differentiable graph per episode, and handles checkpoint IO.
//!
//! Module toggles change the wiring:
//! - aggregation off: both branches read the support layer triple
//!   (homogeneous features), no correlation channels, no Gaussian offset;
//! - transport off: aggregated features skip attention/denoising/residuals;
//! - prompts off: no adapters, and no adapter parameters are registered.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{FeatureExtractor, Level, ToyBackbone};
use crate::config::{Config, LayerMode};
use crate::data::Episode;
use crate::error::{Result, TlgError};
use crate::ha::{sum_levels, Branch, HaModule};
use crate::hc::{max_match, HcEncoders, HcModule, PromptBank};
use crate::head::{bce_loss, episode_loss, HeadModule, MaskPrediction};
use crate::ht::{
    foreground_cost, ot_denoise, sinkhorn, sinkhorn_unrolled, HtModule, TransportPlan,
};
use crate::params::{Binder, ParamStore};

/// Sinkhorn handling inside the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Fixed-length unrolled scaling iterations, differentiable.
    Train,
    /// Converged solver outside the graph, coupling inserted as a constant.
    Eval,
}

/// Values captured during a forward pass for inspection and rendering.
#[derive(Default)]
pub struct ForwardExtras {
    pub support_attention: Vec<Array2<f64>>,
    pub query_attention: Option<Array2<f64>>,
    pub support_plans: Vec<TransportPlan>,
    pub query_plan: Option<TransportPlan>,
    pub query_cost: Option<Array2<f64>>,
    pub matched_category: Option<usize>,
}

/// One episode's graph plus handles into it.
pub struct ForwardPass<'m> {
    pub graph: Graph,
    pub binder: Binder<'m>,
    pub loss: NodeId,
    pub support_logits: Vec<NodeId>,
    pub query_logits: NodeId,
    pub extras: ForwardExtras,
}

impl ForwardPass<'_> {
    pub fn loss_value(&self) -> f64 {
        self.graph.scalar(self.loss)
    }

    pub fn query_prediction(&self) -> MaskPrediction {
        let logits = self
            .graph
            .value(self.query_logits)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned();
        MaskPrediction::from_logits(logits)
    }
}

pub struct TlgModel {
    pub config: Config,
    store: ParamStore,
    backbone: ToyBackbone,
    ha: HaModule,
    ht: Option<HtModule>,
    hc: Option<HcModule>,
    head: HeadModule,
    bank: Option<PromptBank>,
    grid: usize,
    support_taps: [Vec<usize>; 3],
    query_taps: [Vec<usize>; 3],
    requested: BTreeSet<usize>,
    feature_cache: Mutex<std::collections::BTreeMap<(String, u64), std::sync::Arc<crate::backbone::FeatureTapSet>>>,
}

fn taps_for(mode: LayerMode, triple: [usize; 3]) -> [Vec<usize>; 3] {
    match mode {
        LayerMode::Triple => [vec![triple[0]], vec![triple[1]], vec![triple[2]]],
        LayerMode::All => [
            Level::Low.taps().collect(),
            Level::Middle.taps().collect(),
            Level::High.taps().collect(),
        ],
    }
}

impl TlgModel {
    /// Build a model for a dataset with the given category names. The prompt
    /// bank is aligned to those names when the prompt module is enabled.
    pub fn new(config: &Config, category_names: &[String]) -> Result<Self> {
        config.validate()?;
        let backbone = ToyBackbone::new(config.backbone.seed, config.backbone.width_multiplier)?;
        let grid = config.canonical_grid();
        let level_channels =
            [Level::Low, Level::Middle, Level::High].map(|l| backbone.channels_of_level(l));

        let mut store = ParamStore::new();
        // one stream per module so toggling a module never shifts another's
        // initialization
        let fork = |tag: u64| ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x7C5A_11E5_D00D_FEED ^ tag);
        let mut rng = fork(0x11);
        let ha = HaModule::new(&mut store, &mut rng, &config.ha, level_channels, grid, config.model.ha)?;
        let channels = ha.assembled_channels();

        let selection = config.layers.selection();
        selection.validate()?;
        // without aggregation both branches read the support triple
        let query_triple = if config.model.ha { selection.query_layers } else { selection.support_layers };
        let support_taps = taps_for(config.layers.mode, selection.support_layers);
        let query_taps = taps_for(config.layers.mode, query_triple);

        let ht = if config.model.ht {
            let tap_channels = [
                backbone.channels_of_level(Level::of_tap(config.ht.residual_tap_support)?),
                backbone.channels_of_level(Level::of_tap(config.ht.residual_tap_query)?),
            ];
            let mut rng = fork(0x22);
            Some(HtModule::new(&mut store, &mut rng, &config.ht, channels, tap_channels, grid))
        } else {
            None
        };

        let (hc, bank) = if config.model.hc {
            let bank = if config.hc.prompt_bank.is_empty() {
                PromptBank::builtin("synthetic")?
            } else if let Some(name) = config.hc.prompt_bank.strip_prefix("builtin:") {
                PromptBank::builtin(name)?
            } else {
                PromptBank::from_path(Path::new(&config.hc.prompt_bank))?
            };
            let bank = bank.aligned_to(category_names)?;
            if config.hc.encoder != "stub" {
                return Err(TlgError::Config(
                    "hc.encoder = external requires attaching an encoder through the library API".into(),
                ));
            }
            let encoders = HcEncoders::stub(config.hc.d_text);
            let mut rng = fork(0x33);
            let hc = HcModule::new(&mut store, &mut rng, &config.hc, channels, &bank, &encoders)?;
            (Some(hc), Some(bank))
        } else {
            (None, None)
        };

        let mut rng = fork(0x44);
        let head = HeadModule::new(&mut store, &mut rng, &config.head, channels);

        let mut requested: BTreeSet<usize> = support_taps
            .iter()
            .chain(query_taps.iter())
            .flatten()
            .cloned()
            .collect();
        if config.model.ht {
            requested.insert(config.ht.residual_tap_support);
            requested.insert(config.ht.residual_tap_query);
        }

        Ok(TlgModel {
            config: config.clone(),
            store,
            backbone,
            ha,
            ht,
            hc,
            head,
            bank,
            grid,
            support_taps,
            query_taps,
            requested,
            feature_cache: Mutex::new(std::collections::BTreeMap::new()),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn prompt_bank(&self) -> Option<&PromptBank> {
        self.bank.as_ref()
    }

    /// Raw backbone taps for an arbitrary image, bypassing the cache.
    pub fn extract_taps(
        &self,
        image: &Array3<f64>,
        requested: &BTreeSet<usize>,
    ) -> Result<crate::backbone::FeatureTapSet> {
        self.backbone.extract(image, requested)
    }

    /// Learnable parameter elements; excludes the frozen backbone and the
    /// text encoder (which has no parameters at all).
    pub fn count_learnable_parameters(&self) -> usize {
        self.store.element_count()
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.backbone.frozen_parameter_count()
    }

    fn tap_features(
        &self,
        id: &str,
        image: &Array3<f64>,
    ) -> Result<std::sync::Arc<crate::backbone::FeatureTapSet>> {
        let checksum = image.sum().to_bits();
        let key = (id.to_string(), checksum);
        if let Some(hit) = self.feature_cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let feats = std::sync::Arc::new(self.backbone.extract(image, &self.requested)?);
        self.feature_cache.lock().unwrap().insert(key, feats.clone());
        Ok(feats)
    }

    /// Aligned features per level for one branch: taps are projected, aligned
    /// to the grid, and summed within each level.
    fn aligned_levels(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        taps: &crate::backbone::FeatureTapSet,
        branch: Branch,
    ) -> Result<[NodeId; 3]> {
        let plan = match branch {
            Branch::Support => &self.support_taps,
            Branch::Query => &self.query_taps,
        };
        let mut out = Vec::with_capacity(3);
        for level in Level::ALL {
            let mut parts = Vec::new();
            for &tap in &plan[level.index()] {
                let feat = g.leaf(taps.get(tap)?.clone().into_dyn());
                parts.push(self.ha.project_and_align(g, binder, feat, branch, level));
            }
            out.push(sum_levels(g, &parts));
        }
        Ok(<[NodeId; 3]>::try_from(out).ok().unwrap())
    }

    fn summed_feature(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        aligned: &[NodeId; 3],
        branch: Branch,
    ) -> NodeId {
        let eq: Vec<NodeId> = Level::ALL
            .iter()
            .map(|&l| self.ha.equalize(g, binder, aligned[l.index()], branch, l))
            .collect();
        sum_levels(g, &eq)
    }

    /// Attention + transport denoising + pooled residual for one branch.
    #[allow(clippy::too_many_arguments)]
    fn transport(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        ht: &HtModule,
        aggregated: NodeId,
        taps: &crate::backbone::FeatureTapSet,
        branch: Branch,
        mode: ForwardMode,
        extras: &mut ForwardExtras,
    ) -> Result<NodeId> {
        let channels = g.shape(aggregated)[0];
        let n = self.grid * self.grid;
        let flat = g.reshape(aggregated, &[channels, n]);
        let (attended, attn) = ht.attention(g, binder, flat, branch);
        let cost_node = foreground_cost(g, aggregated);
        let cost_values =
            g.value(cost_node).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let plan_node = match mode {
            ForwardMode::Train => sinkhorn_unrolled(g, cost_node, ht.lambda, ht.unrolled_iters),
            ForwardMode::Eval => {
                let plan = sinkhorn(&cost_values, ht.lambda, ht.max_iters, ht.tol)?;
                let node = g.leaf(plan.coupling.clone().into_dyn());
                match branch {
                    Branch::Support => extras.support_plans.push(plan),
                    Branch::Query => extras.query_plan = Some(plan),
                }
                node
            }
        };
        let denoised = ot_denoise(g, attended, plan_node, &cost_values, ht.cost_threshold);
        let chw = g.reshape(denoised, &[channels, self.grid, self.grid]);
        let tap_idx = ht.residual_taps[branch.index()];
        let tap_node = g.leaf(taps.get(tap_idx)?.clone().into_dyn());
        let out = ht.residual(g, binder, chw, tap_node, branch);
        let attn_values = g.value(attn).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        match branch {
            Branch::Support => extras.support_attention.push(attn_values),
            Branch::Query => {
                extras.query_attention = Some(attn_values);
                extras.query_cost = Some(cost_values);
            }
        }
        Ok(out)
    }

    /// Run one episode through every enabled module and assemble the weighted
    /// objective against the episode's pseudo-masks.
    pub fn forward(&self, episode: &Episode, mode: ForwardMode) -> Result<ForwardPass<'_>> {
        episode.validate()?;
        let image_size = episode.image_size();
        if image_size != self.config.data.image_size {
            return Err(TlgError::Shape(format!(
                "episode image size {image_size} does not match the configured {}",
                self.config.data.image_size
            )));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let mut extras = ForwardExtras::default();

        let query_taps = self.tap_features(&episode.query_id, &episode.query_image)?;
        let support_taps: Vec<_> = episode
            .support_ids
            .iter()
            .zip(&episode.support_images)
            .map(|(id, img)| self.tap_features(id, img))
            .collect::<Result<_>>()?;

        // aligned level features
        let aligned_q = self.aligned_levels(&mut g, &mut binder, &query_taps, Branch::Query)?;
        let mut aligned_s = Vec::with_capacity(episode.shot_count);
        for taps in &support_taps {
            aligned_s.push(self.aligned_levels(&mut g, &mut binder, taps, Branch::Support)?);
        }
        // shot-averaged support levels target the query correlation
        let aligned_s_mean: [NodeId; 3] = if episode.shot_count == 1 {
            aligned_s[0]
        } else {
            let mut mean = Vec::with_capacity(3);
            for l in 0..3 {
                let parts: Vec<NodeId> = aligned_s.iter().map(|a| a[l]).collect();
                let s = sum_levels(&mut g, &parts);
                mean.push(g.scale(s, 1.0 / episode.shot_count as f64));
            }
            <[NodeId; 3]>::try_from(mean).ok().unwrap()
        };

        // branch assembly
        let cross = self.config.ha.corr_mode == "cross";
        let mut features_s = Vec::with_capacity(episode.shot_count);
        for aligned in &aligned_s {
            let f2 = self.summed_feature(&mut g, &mut binder, aligned, Branch::Support);
            let feat = if self.ha.has_correlation() {
                let other = if cross { &aligned_q } else { aligned };
                let corr = self.ha.correlate(&mut g, &mut binder, aligned, other, Branch::Support);
                self.ha.assemble_support(&mut g, &mut binder, f2, corr)
            } else {
                f2
            };
            features_s.push(feat);
        }
        let f2_q = self.summed_feature(&mut g, &mut binder, &aligned_q, Branch::Query);
        let mut feature_q = if self.ha.has_correlation() {
            let other = if cross { &aligned_s_mean } else { &aligned_q };
            let corr = self.ha.correlate(&mut g, &mut binder, &aligned_q, other, Branch::Query);
            self.ha.assemble_query(&mut g, f2_q, corr)
        } else {
            f2_q
        };

        // transport denoising
        if let Some(ht) = &self.ht {
            for (feat, taps) in features_s.iter_mut().zip(&support_taps) {
                *feat = self.transport(&mut g, &mut binder, ht, *feat, taps, Branch::Support, mode, &mut extras)?;
            }
            feature_q = self.transport(&mut g, &mut binder, ht, feature_q, &query_taps, Branch::Query, mode, &mut extras)?;
        }

        // multimodal adapters
        if let Some(hc) = &self.hc {
            let channels = g.shape(feature_q)[0];
            let n = self.grid * self.grid;
            // support conditions on its weak image-level label
            let gain = hc.gain_embeddings.row(episode.category_id).to_owned();
            for feat in features_s.iter_mut() {
                let flat = g.reshape(*feat, &[channels, n]);
                let adapted = hc.adapt_support(&mut g, &mut binder, flat, gain.clone());
                *feat = g.reshape(adapted, &[channels, self.grid, self.grid]);
            }
            // query conditions on the maximum-matching category
            let flat = g.reshape(feature_q, &[channels, n]);
            let summary = {
                let values = g.value(flat).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                hc.visual_summary(&values.view())
            };
            let matched = max_match(&summary.view(), &hc.fg_embeddings);
            extras.matched_category = Some(matched.category);
            let fg = hc.fg_embeddings.row(matched.category).to_owned();
            let bg = hc.bg_embeddings.row(matched.category).to_owned();
            let adapted = hc.adapt_query(&mut g, &mut binder, flat, fg, bg);
            feature_q = g.reshape(adapted, &[channels, self.grid, self.grid]);
        }

        // decode and score
        let mut support_logits = Vec::with_capacity(episode.shot_count);
        let mut support_losses = Vec::with_capacity(episode.shot_count);
        for (feat, mask) in features_s.iter().zip(&episode.support_pseudo_masks) {
            let logits = self.head.predict(&mut g, &mut binder, *feat, image_size);
            support_losses.push(bce_loss(&mut g, logits, mask, self.config.loss.binarize_targets)?);
            support_logits.push(logits);
        }
        let query_logits = self.head.predict(&mut g, &mut binder, feature_q, image_size);
        let query_loss = bce_loss(
            &mut g,
            query_logits,
            &episode.query_pseudo_mask,
            self.config.loss.binarize_targets,
        )?;
        let loss = episode_loss(
            &mut g,
            &support_losses,
            query_loss,
            self.config.loss.alpha,
            self.config.loss.beta,
        );

        Ok(ForwardPass { graph: g, binder, loss, support_logits, query_logits, extras })
    }

    /// Scalar episode loss; the probe used by finite-difference checks.
    pub fn loss_value(&self, episode: &Episode, mode: ForwardMode) -> Result<f64> {
        Ok(self.forward(episode, mode)?.loss_value())
    }

    // ---- checkpointing ----

    const MAGIC: &'static [u8; 8] = b"TLGCKPT1";

    /// Single-file checkpoint: magic, config hash, parameter bytes.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(Self::MAGIC);
        let hash = self.config.hash();
        bytes.extend_from_slice(&(hash.len() as u64).to_le_bytes());
        bytes.extend_from_slice(hash.as_bytes());
        bytes.extend_from_slice(&self.store.to_bytes());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Load parameters saved by [`TlgModel::save_checkpoint`]. Refuses a
    /// checkpoint whose config hash disagrees with this model's config.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| TlgError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() < 16 || &bytes[..8] != Self::MAGIC {
            return Err(TlgError::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let hash_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hash_len {
            return Err(TlgError::Checkpoint("checkpoint truncated".into()));
        }
        let hash = std::str::from_utf8(&bytes[16..16 + hash_len])
            .map_err(|_| TlgError::Checkpoint("corrupt config hash".into()))?;
        let expected = self.config.hash();
        if hash != expected {
            return Err(TlgError::Checkpoint(format!(
                "checkpoint was written under config hash {hash} but the current config hashes to {expected}; \
                 re-run with the original config"
            )));
        }
        self.store.load_bytes(&bytes[16 + hash_len..])
    }
}
