//! Prompt bank, text-encoder interface, maximum-matching prompt selection,
//! and the per-branch multimodal adapters.
//!
//! The support adapter conditions on one fine-grained foreground embedding;
//! the query adapter conditions on the matched foreground plus its two
//! bank-linked co-occurring backgrounds. Both blend the fused feature back
//! into the visual path with a learnable ratio.
//!
//! The built-in encoder is a deterministic token-hashing stub so tests run
//! hermetically; a real vision-language text tower attaches through
//! [`TextEncoder`]. Coarse foreground, coarse background, and fine-grained
//! encoders are separate handles (the stub serves all three).

use std::path::Path;
use std::sync::Arc;

use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::HcConfig;
use crate::error::{Result, TlgError};
use crate::ha::Branch;
use crate::params::{gaussian, Binder, ParamId, ParamStore};

// ---- prompt bank ----

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub category_id: usize,
    pub category_name: String,
    pub fine_grained_prompt: String,
    pub backgrounds: [String; 2],
}

/// Per-category prompt records: one fine-grained foreground prompt and
/// exactly two co-occurring background prompts.
#[derive(Debug, Clone)]
pub struct PromptBank {
    records: Vec<PromptRecord>,
}

pub const BUILTIN_SYNTHETIC: &str = include_str!("../data/prompt_banks/synthetic.csv");
pub const BUILTIN_PASCAL: &str = include_str!("../data/prompt_banks/pascal.csv");
pub const BUILTIN_COCO: &str = include_str!("../data/prompt_banks/coco.csv");

impl PromptBank {
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TlgError::DataValidation(format!("bad prompt row: {e}")))?;
            if rec.len() != 5 {
                return Err(TlgError::DataValidation(format!(
                    "prompt rows need 5 fields (id, name, fine_grained, bg1, bg2), got {}",
                    rec.len()
                )));
            }
            let category_id: usize = rec[0]
                .parse()
                .map_err(|_| TlgError::DataValidation(format!("bad category id {}", &rec[0])))?;
            let category_name = rec[1].to_string();
            let fine = if rec[2].is_empty() {
                format!("a photo of a {category_name}")
            } else {
                rec[2].to_string()
            };
            let backgrounds = [rec[3].to_string(), rec[4].to_string()];
            if backgrounds.iter().any(String::is_empty) || backgrounds[0] == backgrounds[1] {
                return Err(TlgError::DataValidation(format!(
                    "category {category_name} needs two distinct non-empty background prompts"
                )));
            }
            records.push(PromptRecord { category_id, category_name, fine_grained_prompt: fine, backgrounds });
        }
        records.sort_by_key(|r| r.category_id);
        for (i, r) in records.iter().enumerate() {
            if r.category_id != i {
                return Err(TlgError::DataValidation(format!(
                    "prompt bank category ids must be dense from 0; found {} at position {i}",
                    r.category_id
                )));
            }
        }
        Ok(PromptBank { records })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TlgError::DataValidation(format!("cannot read prompt bank {}: {e}", path.display()))
        })?;
        Self::from_csv_str(&text)
    }

    /// The banks shipped with the crate: "synthetic", "pascal", "coco".
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "synthetic" => Self::from_csv_str(BUILTIN_SYNTHETIC),
            "pascal" => Self::from_csv_str(BUILTIN_PASCAL),
            "coco" => Self::from_csv_str(BUILTIN_COCO),
            other => Err(TlgError::Config(format!("no builtin prompt bank named {other}"))),
        }
    }

    /// Every dataset category must have a record with the same name.
    pub fn validate_against(&self, category_names: &[String]) -> Result<()> {
        for name in category_names {
            if !self.records.iter().any(|r| &r.category_name == name) {
                return Err(TlgError::DataValidation(format!(
                    "prompt bank does not cover category '{name}'"
                )));
            }
        }
        Ok(())
    }

    /// Reorder/restrict the bank to the dataset's category order.
    pub fn aligned_to(&self, category_names: &[String]) -> Result<PromptBank> {
        self.validate_against(category_names)?;
        let records = category_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let r = self.records.iter().find(|r| &r.category_name == name).unwrap();
                PromptRecord { category_id: i, ..r.clone() }
            })
            .collect();
        Ok(PromptBank { records })
    }

    pub fn record(&self, category_id: usize) -> Result<&PromptRecord> {
        self.records.get(category_id).ok_or_else(|| {
            TlgError::DataValidation(format!("no prompt record for category {category_id}"))
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }
}

// ---- text encoding ----

/// Deterministic prompt-to-vector interface. Rows are L2-normalized.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompts: &[&str]) -> Result<Array2<f64>>;
}

/// Feature-hashing stub: each word unigram and bigram is FNV-hashed, the
/// hash seeds a fixed Gaussian vector in `dim` dimensions, and the prompt
/// embedding is the L2-normalized sum of its token vectors. Equal prompts
/// give equal rows and shared tokens give clearly positive cosine
/// similarity. A stand-in with stable structure, not a semantic model.
pub struct HashingTextEncoder {
    dim: usize,
}

impl HashingTextEncoder {
    pub fn new(dim: usize) -> Self {
        HashingTextEncoder { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEncoder for HashingTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompts: &[&str]) -> Result<Array2<f64>> {
        if prompts.is_empty() {
            return Err(TlgError::DataValidation("empty prompt list".into()));
        }
        let mut out = Array2::<f64>::zeros((prompts.len(), self.dim));
        for (row, prompt) in prompts.iter().enumerate() {
            let tokens: Vec<String> = prompt
                .to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect();
            if tokens.is_empty() {
                return Err(TlgError::DataValidation(format!("prompt '{prompt}' has no tokens")));
            }
            let mut grams: Vec<String> = tokens.clone();
            grams.extend(tokens.windows(2).map(|w| format!("{}_{}", w[0], w[1])));
            for gram in &grams {
                use rand::SeedableRng;
                let mut token_rng = ChaCha8Rng::seed_from_u64(fnv1a(gram.as_bytes()));
                for d in 0..self.dim {
                    out[[row, d]] += gaussian(&mut token_rng);
                }
            }
            let norm = out.row(row).dot(&out.row(row)).sqrt();
            if norm > 0.0 {
                out.row_mut(row).mapv_inplace(|v| v / norm);
            }
        }
        Ok(out)
    }
}

/// The three encoder roles of the prompt pipeline; one stub can serve all.
pub struct HcEncoders {
    pub foreground: Arc<dyn TextEncoder>,
    pub background: Arc<dyn TextEncoder>,
    pub fine_grained: Arc<dyn TextEncoder>,
}

impl HcEncoders {
    pub fn stub(dim: usize) -> Self {
        let enc: Arc<dyn TextEncoder> = Arc::new(HashingTextEncoder::new(dim));
        HcEncoders { foreground: enc.clone(), background: enc.clone(), fine_grained: enc }
    }
}

// ---- maximum matching ----

pub struct MatchedPrompts {
    pub category: usize,
    pub similarity: f64,
}

/// Pick the foreground row with the highest cosine similarity to the pooled
/// visual summary; ties resolve to the lowest category id. Invariant under
/// positive rescaling of the summary.
pub fn max_match(summary: &ArrayView1<'_, f64>, fg_embeddings: &Array2<f64>) -> MatchedPrompts {
    let norm = summary.dot(summary).sqrt();
    let mut best = MatchedPrompts { category: 0, similarity: f64::NEG_INFINITY };
    for (i, row) in fg_embeddings.rows().into_iter().enumerate() {
        let sim = if norm > 0.0 { row.dot(summary) / norm } else { 0.0 };
        if sim > best.similarity {
            best = MatchedPrompts { category: i, similarity: sim };
        }
    }
    best
}

// ---- adapters ----

struct AdapterParams {
    down_w: ParamId, // (hidden, c_visual + conditioning)
    down_b: ParamId, // (hidden, 1)
    up_w: ParamId,   // (c_visual, hidden)
    up_b: ParamId,   // (c_visual, 1)
    rho: ParamId,    // (1, 1) blend ratio
}

/// Multimodal adapter pair plus precomputed prompt embeddings.
pub struct HcModule {
    adapters: [AdapterParams; 2],
    /// Row per category: coarse foreground embedding.
    pub fg_embeddings: Array2<f64>,
    /// Row per category: the two background embeddings, averaged and
    /// renormalized into one coarse background vector.
    pub bg_embeddings: Array2<f64>,
    /// Row per category: fine-grained prompt embedding.
    pub gain_embeddings: Array2<f64>,
    /// Frozen projection from visual channels to the text dimension, used to
    /// pool a query feature into a matchable summary. Not learnable.
    summary_proj: Array2<f64>,
    pub d_text: usize,
    channels: usize,
}

impl HcModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &HcConfig,
        channels: usize,
        bank: &PromptBank,
        encoders: &HcEncoders,
    ) -> Result<Self> {
        let d = cfg.d_text;
        for (role, enc) in [
            ("foreground", &encoders.foreground),
            ("background", &encoders.background),
            ("fine_grained", &encoders.fine_grained),
        ] {
            if enc.dim() != d {
                return Err(TlgError::Config(format!(
                    "{role} encoder dimension {} does not match hc.d_text {d}",
                    enc.dim()
                )));
            }
        }
        let names: Vec<&str> = bank.records().iter().map(|r| r.category_name.as_str()).collect();
        let fg_embeddings = encoders.foreground.encode(&names)?;
        let fines: Vec<&str> =
            bank.records().iter().map(|r| r.fine_grained_prompt.as_str()).collect();
        let gain_embeddings = encoders.fine_grained.encode(&fines)?;
        let mut bg_embeddings = Array2::<f64>::zeros((bank.len(), d));
        for (i, r) in bank.records().iter().enumerate() {
            let pair = encoders
                .background
                .encode(&[r.backgrounds[0].as_str(), r.backgrounds[1].as_str()])?;
            let mut combined = (&pair.row(0) + &pair.row(1)) * 0.5;
            let norm = combined.dot(&combined).sqrt();
            if norm > 0.0 {
                combined.mapv_inplace(|v| v / norm);
            }
            bg_embeddings.row_mut(i).assign(&combined);
        }

        let hidden = (channels / cfg.bottleneck_ratio).max(1);
        let mk = |branch: Branch, cond: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let tag = format!("hc.{}", branch.name());
            AdapterParams {
                down_w: store.add_kaiming2(format!("{tag}.down.weight"), hidden, channels + cond, rng),
                down_b: store.add(format!("{tag}.down.bias"), Array2::<f64>::zeros((hidden, 1)).into_dyn()),
                up_w: store.add_kaiming2(format!("{tag}.up.weight"), channels, hidden, rng),
                up_b: store.add(format!("{tag}.up.bias"), Array2::<f64>::zeros((channels, 1)).into_dyn()),
                rho: store.add(
                    format!("{tag}.rho"),
                    Array2::from_elem((1, 1), cfg.rho_init).into_dyn(),
                ),
            }
        };
        let adapters = [
            mk(Branch::Support, d, store, rng),     // fine-grained conditioning
            mk(Branch::Query, 2 * d, store, rng),   // foreground + background conditioning
        ];
        let summary_proj = Array2::from_shape_fn((d, channels), |_| gaussian(rng) / (channels as f64).sqrt());
        Ok(HcModule {
            adapters,
            fg_embeddings,
            bg_embeddings,
            gain_embeddings,
            summary_proj,
            d_text: d,
            channels,
        })
    }

    /// Conditioning width consumed by a branch's adapter.
    pub fn conditioning_width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Support => self.d_text,
            Branch::Query => 2 * self.d_text,
        }
    }

    /// Pool a (C, HW) visual feature and project it into text space for
    /// maximum matching. Pure function of frozen state.
    pub fn visual_summary(&self, feature: &ArrayView2<'_, f64>) -> Array1<f64> {
        let pooled = feature.mean_axis(Axis(1)).expect("non-empty feature");
        let mut s = self.summary_proj.dot(&pooled);
        let norm = s.dot(&s).sqrt();
        if norm > 0.0 {
            s.mapv_inplace(|v| v / norm);
        }
        s
    }

    fn adapt(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        visual: NodeId,
        conditioning: Array1<f64>,
        branch: Branch,
    ) -> NodeId {
        let hw = g.shape(visual)[1];
        assert_eq!(g.shape(visual)[0], self.channels, "adapter channel mismatch");
        let p = &self.adapters[branch.index()];
        let cond_col = conditioning.insert_axis(Axis(1)); // (t, 1)
        let cond_leaf = g.leaf(cond_col.into_dyn());
        let tiled = g.broadcast_to(cond_leaf, &[self.conditioning_width(branch), hw]);
        let z = g.concat(0, &[visual, tiled]);
        let dw = binder.node(g, p.down_w);
        let db = binder.node(g, p.down_b);
        let down = g.matmul(dw, z);
        let down = g.add(down, db);
        let act = g.relu(down);
        let uw = binder.node(g, p.up_w);
        let ub = binder.node(g, p.up_b);
        let up = g.matmul(uw, act);
        let fused = g.add(up, ub);
        let rho = binder.node(g, p.rho); // (1,1) broadcasts over (C, HW)
        let one = g.leaf(Array2::<f64>::ones((1, 1)).into_dyn());
        let keep = g.sub(one, rho);
        let a = g.mul(fused, rho);
        let b = g.mul(visual, keep);
        g.add(a, b)
    }

    /// Fuse the support branch with its fine-grained category embedding.
    pub fn adapt_support(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        visual: NodeId,
        gain_embedding: Array1<f64>,
    ) -> NodeId {
        assert_eq!(gain_embedding.len(), self.d_text);
        self.adapt(g, binder, visual, gain_embedding, Branch::Support)
    }

    /// Fuse the query branch with concatenated foreground and background
    /// embeddings of the matched category.
    pub fn adapt_query(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        visual: NodeId,
        fg_embedding: Array1<f64>,
        bg_embedding: Array1<f64>,
    ) -> NodeId {
        assert_eq!(fg_embedding.len(), self.d_text);
        assert_eq!(bg_embedding.len(), self.d_text);
        let cond = ndarray::concatenate(Axis(0), &[fg_embedding.view(), bg_embedding.view()])
            .expect("conditioning concat");
        self.adapt(g, binder, visual, cond, Branch::Query)
    }

    /// Force both blend ratios; `0.0` makes the adapters exact identities,
    /// which is the transport-only ablation.
    pub fn set_rho(&self, store: &mut ParamStore, rho: f64) {
        for p in &self.adapters {
            store.set(p.rho, Array2::from_elem((1, 1), rho).into_dyn());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn builtin_banks_parse_and_pin_reported_prompts() {
        let pascal = PromptBank::builtin("pascal").unwrap();
        assert_eq!(pascal.len(), 20);
        let bird = pascal.records().iter().find(|r| r.category_name == "bird").unwrap();
        assert_eq!(bird.backgrounds, ["tree".to_string(), "sky".to_string()]);
        let plane = pascal.records().iter().find(|r| r.category_name == "aeroplane").unwrap();
        assert_eq!(plane.fine_grained_prompt, "aeroplane with wings");

        let coco = PromptBank::builtin("coco").unwrap();
        assert_eq!(coco.len(), 80);
        let synth = PromptBank::builtin("synthetic").unwrap();
        assert_eq!(synth.len(), 6);
        for bank in [&pascal, &coco, &synth] {
            for r in bank.records() {
                assert!(!r.backgrounds[0].is_empty() && r.backgrounds[0] != r.backgrounds[1]);
            }
        }
        assert!(PromptBank::builtin("imagenet").is_err());
    }

    #[test]
    fn bank_round_trips_through_file_and_validates_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.csv");
        std::fs::write(
            &path,
            "category_id,category_name,fine_grained_prompt,bg1,bg2\n0,disk,,haze,grain\n",
        )
        .unwrap();
        let bank = PromptBank::from_path(&path).unwrap();
        let rec = bank.record(0).unwrap();
        assert_eq!(rec.category_name, "disk");
        // empty fine-grained prompt falls back to the photo template
        assert_eq!(rec.fine_grained_prompt, "a photo of a disk");
        bank.validate_against(&["disk".to_string()]).unwrap();
        match bank.validate_against(&["disk".to_string(), "ring".to_string()]) {
            Err(TlgError::DataValidation(msg)) => assert!(msg.contains("ring")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_backgrounds_are_rejected() {
        let res = PromptBank::from_csv_str(
            "category_id,category_name,fine_grained_prompt,bg1,bg2\n0,disk,d,haze,haze\n",
        );
        assert!(matches!(res, Err(TlgError::DataValidation(_))));
    }

    #[test]
    fn stub_encoder_is_deterministic_normalized_and_token_aware() {
        let enc = HashingTextEncoder::new(64);
        let a = enc.encode(&["bird", "bird"]).unwrap();
        assert_eq!(a.row(0), a.row(1));
        for row in a.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let m = enc.encode(&["bird", "bird with feathers", "bus"]).unwrap();
        let related = m.row(0).dot(&m.row(1));
        let unrelated = m.row(0).dot(&m.row(2));
        // a stub property, not a semantic claim: shared tokens beat disjoint ones
        assert!(
            related > unrelated,
            "cosine(bird, bird with feathers) = {related} must exceed cosine(bird, bus) = {unrelated}"
        );
        assert!(enc.encode(&[]).is_err());
        assert!(enc.encode(&["  "]).is_err());
    }

    #[test]
    fn max_match_selects_self_breaks_ties_low_and_ignores_scale() {
        let enc = HashingTextEncoder::new(32);
        let fg = enc.encode(&["disk", "bar", "ring"]).unwrap();
        // summary equal to a foreground row selects that category
        let m = max_match(&fg.row(1), &fg);
        assert_eq!(m.category, 1);
        // orthogonal (zero) summary ties everywhere -> id 0
        let zero = Array1::<f64>::zeros(32);
        assert_eq!(max_match(&zero.view(), &fg).category, 0);
        // positive rescaling changes nothing
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = Array1::from_shape_fn(32, |_| rng.gen_range(-1.0..1.0));
            let picked = max_match(&s.view(), &fg).category;
            let scaled = s.mapv(|v| v * 37.5);
            assert_eq!(picked, max_match(&scaled.view(), &fg).category);
            // argmax loop oracle
            let mut best = (0, f64::NEG_INFINITY);
            let norm = s.dot(&s).sqrt();
            for (i, row) in fg.rows().into_iter().enumerate() {
                let sim = row.dot(&s) / norm;
                if sim > best.1 {
                    best = (i, sim);
                }
            }
            assert_eq!(picked, best.0);
        }
    }

    fn hc_fixture(channels: usize, rho: f64) -> (ParamStore, HcModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = HcConfig { rho_init: rho, ..HcConfig::default() };
        let bank = PromptBank::builtin("synthetic").unwrap();
        let hc = HcModule::new(&mut store, &mut rng, &cfg, channels, &bank, &HcEncoders::stub(cfg.d_text))
            .unwrap();
        (store, hc)
    }

    #[test]
    fn rho_zero_is_identity_and_shapes_are_preserved() {
        let (store, hc) = hc_fixture(12, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let visual = Array2::from_shape_fn((12, 16), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v = g.leaf(visual.clone().into_dyn());
        let out = hc.adapt_support(&mut g, &mut binder, v, hc.gain_embeddings.row(0).to_owned());
        assert_eq!(g.shape(out), &[12, 16]);
        for (a, b) in g.value(out).iter().zip(visual.iter()) {
            assert!((a - b).abs() < 1e-12, "rho = 0 must be the identity");
        }
        let out_q = hc.adapt_query(
            &mut g,
            &mut binder,
            v,
            hc.fg_embeddings.row(0).to_owned(),
            hc.bg_embeddings.row(0).to_owned(),
        );
        for (a, b) in g.value(out_q).iter().zip(visual.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_text_with_rho_one_equals_visual_only_bottleneck() {
        let (store, hc) = hc_fixture(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let visual = Array2::from_shape_fn((8, 9), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v = g.leaf(visual.clone().into_dyn());
        let zero_text = Array1::<f64>::zeros(hc.d_text);
        let out = hc.adapt_support(&mut g, &mut binder, v, zero_text);

        // oracle: drop the text columns of the down projection entirely
        let dw = store.value(hc.adapters[0].down_w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let db = store.value(hc.adapters[0].down_b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let uw = store.value(hc.adapters[0].up_w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let ub = store.value(hc.adapters[0].up_b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let visual_cols = dw.slice(ndarray::s![.., ..8]).to_owned();
        let mut hid = visual_cols.dot(&visual) + &db;
        hid.mapv_inplace(|x| x.max(0.0));
        let fused = uw.dot(&hid) + &ub;
        for (a, b) in g.value(out).iter().zip(fused.iter()) {
            assert!((a - b).abs() < 1e-10, "zero text must reduce to the visual-only path");
        }
    }

    #[test]
    fn branch_adapters_differ_and_conditioning_widths_are_heterogeneous() {
        let (store, hc) = hc_fixture(8, 0.3);
        assert_eq!(hc.conditioning_width(Branch::Support), hc.d_text);
        assert_eq!(hc.conditioning_width(Branch::Query), 2 * hc.d_text);
        // shape oracle on the registered projections
        assert_eq!(store.value(hc.adapters[0].down_w).shape(), &[2, 8 + 64]);
        assert_eq!(store.value(hc.adapters[1].down_w).shape(), &[2, 8 + 128]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let visual = Array2::from_shape_fn((8, 9), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v = g.leaf(visual.into_dyn());
        let e = hc.fg_embeddings.row(0).to_owned();
        let s_out = hc.adapt_support(&mut g, &mut binder, v, e.clone());
        let q_out = hc.adapt_query(&mut g, &mut binder, v, e.clone(), e);
        let diff: f64 = g
            .value(s_out)
            .iter()
            .zip(g.value(q_out).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "support and query adapters must be structurally distinct");
        for v in g.value(s_out).iter().chain(g.value(q_out).iter()) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn visual_summary_is_normalized_and_deterministic() {
        let (_, hc) = hc_fixture(8, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Array2::from_shape_fn((8, 25), |_| rng.gen_range(-1.0..1.0));
        let a = hc.visual_summary(&f.view());
        let b = hc.visual_summary(&f.view());
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-9);
    }
}
