//! Heterogeneous aggregation: per-level projection and alignment, level
//! summation, cross-branch correlation with a separable 4-D squeeze stack,
//! and branch-specific assembly.
//!
//! The support assembly adds a learnable Gaussian-initialized offset before
//! concatenating correlation features; the query assembly does not. That
//! asymmetry is structural: identical inputs still produce different branch
//! features.

use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::backbone::Level;
use crate::config::HaConfig;
use crate::error::{Result, TlgError};
use crate::params::{gaussian, Binder, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Support,
    Query,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Support, Branch::Query];

    pub fn index(self) -> usize {
        match self {
            Branch::Support => 0,
            Branch::Query => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Support => "support",
            Branch::Query => "query",
        }
    }
}

pub(crate) struct Linear {
    weight: ParamId, // (cout, cin)
    bias: ParamId,   // (cout, 1)
}

fn add_linear(store: &mut ParamStore, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng) -> Linear {
    let weight = store.add_kaiming2(format!("{name}.weight"), cout, cin, rng);
    let bias = store.add(format!("{name}.bias"), Array2::<f64>::zeros((cout, 1)).into_dyn());
    Linear { weight, bias }
}

/// 1x1 convolution on a (C, H, W) node: matmul over flattened positions.
pub(crate) fn conv1x1(g: &mut Graph, binder: &mut Binder<'_>, x: NodeId, lin: &Linear) -> NodeId {
    let (c, h, w) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let flat = g.reshape(x, &[c, h * w]);
    let wn = binder.node(g, lin.weight);
    let bn = binder.node(g, lin.bias);
    let prod = g.matmul(wn, flat);
    let biased = g.add(prod, bn);
    let cout = g.shape(biased)[0];
    g.reshape(biased, &[cout, h, w])
}

struct CorrStack {
    stage1: (ParamId, ParamId), // conv over the opposite branch's grid
    stage2: (ParamId, ParamId), // conv over the own branch's grid
}

/// Heterogeneous aggregation parameters for both branches.
pub struct HaModule {
    proj: [[Linear; 3]; 2],     // [branch][level] channel reduction by 1/2^alpha
    equalize: [[Linear; 3]; 2], // [branch][level] to the common width c_ha
    corr: Option<[CorrStack; 2]>,
    init: Option<ParamId>,
    pub c_ha: usize,
    pub squeeze_channels: usize,
    pub grid: usize,
    level_channels: [usize; 3],
}

impl HaModule {
    /// `with_correlation` registers the squeeze stack and the Gaussian offset;
    /// the plain projection path is always present so the aggregation-off
    /// baseline can reuse it.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &HaConfig,
        level_channels: [usize; 3],
        grid: usize,
        with_correlation: bool,
    ) -> Result<Self> {
        for level in Level::ALL {
            let c = level_channels[level.index()];
            let div = 1usize << level.alpha();
            if c % div != 0 {
                return Err(TlgError::Config(format!(
                    "{level:?} level has {c} channels, not divisible by 2^{} = {div}",
                    level.alpha()
                )));
            }
        }
        let mk_branch = |branch: Branch, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let mut proj = Vec::with_capacity(3);
            let mut equalize = Vec::with_capacity(3);
            for level in Level::ALL {
                let c = level_channels[level.index()];
                let reduced = c >> level.alpha();
                let tag = format!("ha.{}.{:?}", branch.name(), level).to_lowercase();
                proj.push(add_linear(store, &format!("{tag}.proj"), reduced, c, rng));
                equalize.push(add_linear(store, &format!("{tag}.equalize"), cfg.c_ha, reduced, rng));
            }
            (
                <[Linear; 3]>::try_from(proj).ok().unwrap(),
                <[Linear; 3]>::try_from(equalize).ok().unwrap(),
            )
        };
        let (proj_s, eq_s) = mk_branch(Branch::Support, store, rng);
        let (proj_q, eq_q) = mk_branch(Branch::Query, store, rng);

        let corr = if with_correlation {
            let cs = cfg.squeeze_channels;
            let mk = |branch: Branch, store: &mut ParamStore, rng: &mut ChaCha8Rng| CorrStack {
                stage1: store.add_conv(&format!("ha.{}.squeeze1", branch.name()), cs, 3, 3, rng),
                stage2: store.add_conv(&format!("ha.{}.squeeze2", branch.name()), cs, cs, 3, rng),
            };
            Some([mk(Branch::Support, store, rng), mk(Branch::Query, store, rng)])
        } else {
            None
        };
        let init = if with_correlation {
            let arr = Array3::from_shape_fn((cfg.c_ha, grid, grid), |_| gaussian(rng) * cfg.init_sigma);
            Some(store.add("ha.init", arr.into_dyn()))
        } else {
            None
        };
        Ok(HaModule {
            proj: [proj_s, proj_q],
            equalize: [eq_s, eq_q],
            corr,
            init,
            c_ha: cfg.c_ha,
            squeeze_channels: cfg.squeeze_channels,
            grid,
            level_channels,
        })
    }

    pub fn has_correlation(&self) -> bool {
        self.corr.is_some()
    }

    /// Channels of one branch's assembled feature.
    pub fn assembled_channels(&self) -> usize {
        self.c_ha + if self.corr.is_some() { self.squeeze_channels } else { 0 }
    }

    pub fn reduced_channels(&self, level: Level) -> usize {
        self.level_channels[level.index()] >> level.alpha()
    }

    /// Project a raw tap feature down by the level's 1/2^alpha factor and land
    /// it on the canonical grid (bilinear when the tap's grid differs).
    pub fn project_and_align(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        tap_feature: NodeId,
        branch: Branch,
        level: Level,
    ) -> NodeId {
        let projected = conv1x1(g, binder, tap_feature, &self.proj[branch.index()][level.index()]);
        let s = g.shape(projected);
        if (s[1], s[2]) == (self.grid, self.grid) {
            projected
        } else {
            g.bilinear_resize(projected, self.grid, self.grid)
        }
    }

    /// Map an aligned level feature to the common width so levels are addable.
    pub fn equalize(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        aligned: NodeId,
        branch: Branch,
        level: Level,
    ) -> NodeId {
        conv1x1(g, binder, aligned, &self.equalize[branch.index()][level.index()])
    }

    /// Correlation squeeze: per-level cosine volumes stacked as channels, a
    /// conv stage over the opposite branch's grid, a conv stage over the own
    /// grid, then a global mean over the opposite positions.
    pub fn correlate(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        own_aligned: &[NodeId; 3],
        other_aligned: &[NodeId; 3],
        branch: Branch,
    ) -> NodeId {
        let stack = self.corr.as_ref().expect("correlation stack not built");
        let n = self.grid * self.grid;
        let vols: Vec<NodeId> = (0..3)
            .map(|l| {
                let raw = raw_correlation(g, own_aligned[l], other_aligned[l]);
                g.reshape(raw, &[n, 1, self.grid, self.grid])
            })
            .collect();
        let x = g.concat(1, &vols); // (n_own, 3, G, G)
        let st = &stack[branch.index()];
        let w1 = binder.node(g, st.stage1.0);
        let b1 = binder.node(g, st.stage1.1);
        let c1 = g.conv2d_same(x, w1, b1);
        let a1 = g.relu(c1); // (n_own, cs, G, G)

        // pivot: batch over the opposite positions, convolve over the own grid
        let cs = self.squeeze_channels;
        let flat = g.reshape(a1, &[n, cs, n]);
        let piv = g.permute(flat, &[2, 1, 0]);
        let piv = g.reshape(piv, &[n, cs, self.grid, self.grid]);
        let w2 = binder.node(g, st.stage2.0);
        let b2 = binder.node(g, st.stage2.1);
        let c2 = g.conv2d_same(piv, w2, b2);
        let a2 = g.relu(c2); // (n_other, cs, G, G) on the own grid

        let summed = g.sum_axis(a2, 0, false);
        g.scale(summed, 1.0 / n as f64)
    }

    /// Support assembly: offset the summed feature by the learnable Gaussian
    /// value, then concatenate correlation channels.
    pub fn assemble_support(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        f2_s: NodeId,
        corr_s: NodeId,
    ) -> NodeId {
        let init = binder.node(g, self.init.expect("support assembly needs the init parameter"));
        let offset = g.add(f2_s, init);
        g.concat(0, &[offset, corr_s])
    }

    /// Query assembly: plain concatenation, no offset.
    pub fn assemble_query(&self, g: &mut Graph, f2_q: NodeId, corr_q: NodeId) -> NodeId {
        g.concat(0, &[f2_q, corr_q])
    }
}

/// Elementwise sum of aligned, equal-shape level features.
pub fn sum_levels(g: &mut Graph, parts: &[NodeId]) -> NodeId {
    assert!(!parts.is_empty());
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

/// Pairwise cosine similarity between spatial positions of two equally-sized
/// feature maps, negatives clamped to zero. Output is (HW_own, HW_other).
/// Zero-norm positions contribute zero similarity rather than NaN.
pub fn raw_correlation(g: &mut Graph, own: NodeId, other: NodeId) -> NodeId {
    let normalize = |g: &mut Graph, x: NodeId| {
        let (c, h, w) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let flat = g.reshape(x, &[c, h * w]);
        let sq = g.mul(flat, flat);
        let sumsq = g.sum_axis(sq, 0, true); // (1, HW)
        let safe = g.clamp_min(sumsq, 1e-24);
        let norm = g.sqrt(safe);
        g.div(flat, norm)
    };
    let own_n = normalize(g, own);
    let other_n = normalize(g, other);
    let own_t = g.transpose2(own_n);
    let sim = g.matmul(own_t, other_n);
    g.relu(sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{numeric_gradient, relative_error};
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_chw(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(ndarray::IxDyn(&[c, h, w]), |_| rng.gen_range(-1.0..1.0))
    }

    fn build_module(sigma: f64, grid: usize, seed: u64) -> (ParamStore, HaModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = HaConfig { c_ha: 8, init_sigma: sigma, squeeze_channels: 4, corr_mode: "cross".into() };
        let ha = HaModule::new(&mut store, &mut rng, &cfg, [16, 32, 64], grid, true).unwrap();
        (store, ha)
    }

    #[test]
    fn channel_arithmetic_is_exact_per_level() {
        let (store, ha) = build_module(0.02, 4, 0);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let inputs = [(Level::Low, 16usize, 8usize), (Level::Middle, 32, 4), (Level::High, 64, 2)];
        for (level, c, s) in inputs {
            let mut rng = ChaCha8Rng::seed_from_u64(level.index() as u64);
            let x = g.leaf(rand_chw(&mut rng, c, s, s));
            let aligned = ha.project_and_align(&mut g, &mut binder, x, Branch::Query, level);
            let out_c = g.shape(aligned)[0];
            assert_eq!(out_c << level.alpha(), c, "{level:?}: {out_c} * 2^alpha != {c}");
            assert_eq!(&g.shape(aligned)[1..], &[4, 4], "{level:?} must land on the canonical grid");
            let eq = ha.equalize(&mut g, &mut binder, aligned, Branch::Query, level);
            assert_eq!(g.shape(eq), &[8, 4, 4]);
        }
    }

    #[test]
    fn rejects_non_divisible_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HaConfig::default();
        // low level needs divisibility by 16
        let err = HaModule::new(&mut store, &mut rng, &cfg, [24, 32, 64], 4, true);
        assert!(matches!(err, Err(TlgError::Config(_))));
    }

    #[test]
    fn sum_levels_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, c) =
            (rand_chw(&mut rng, 4, 3, 3), rand_chw(&mut rng, 4, 3, 3), rand_chw(&mut rng, 4, 3, 3));
        let mut g = Graph::new();
        let (na, nb, nc) = (g.leaf(a.clone()), g.leaf(b.clone()), g.leaf(c.clone()));
        let s = sum_levels(&mut g, &[na, nb, nc]);
        for (((&x, &y), &z), &o) in a.iter().zip(b.iter()).zip(c.iter()).zip(g.value(s).iter()) {
            assert!((x + y + z - o).abs() < 1e-15);
        }
        // additive identity
        let zero = g.leaf(ArrayD::zeros(ndarray::IxDyn(&[4, 3, 3])));
        let s2 = sum_levels(&mut g, &[na, zero, zero]);
        assert_eq!(g.value(s2), &a);
        let s3 = sum_levels(&mut g, &[zero, zero, zero]);
        assert!(g.value(s3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_correlation_matches_quadruple_loop_oracle() {
        let grid = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_chw(&mut rng, 5, grid, grid);
        let b = rand_chw(&mut rng, 5, grid, grid);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let r = raw_correlation(&mut g, na, nb);
        let rv = g.value(r);
        let n = grid * grid;
        assert_eq!(rv.shape(), &[n, n]);
        for i in 0..n {
            for j in 0..n {
                let (iy, ix) = (i / grid, i % grid);
                let (jy, jx) = (j / grid, j % grid);
                let mut dot = 0.0;
                let mut na2 = 0.0;
                let mut nb2 = 0.0;
                for ch in 0..5 {
                    let va = a[[ch, iy, ix]];
                    let vb = b[[ch, jy, jx]];
                    dot += va * vb;
                    na2 += va * va;
                    nb2 += vb * vb;
                }
                let expect = (dot / (na2.sqrt() * nb2.sqrt())).max(0.0);
                let got = rv[[i, j]];
                assert!((expect - got).abs() < 1e-6, "({i},{j}): {expect} vs {got}");
                assert!((0.0..=1.0 + 1e-12).contains(&got));
            }
        }
    }

    #[test]
    fn self_correlation_diagonal_is_one_and_orthogonal_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_chw(&mut rng, 4, 3, 3);
        let mut g = Graph::new();
        let na = g.leaf(a);
        let r = raw_correlation(&mut g, na, na);
        let rv = g.value(r);
        for i in 0..9 {
            assert!((rv[[i, i]] - 1.0).abs() < 1e-12, "diagonal {i}");
        }

        // every x position lives on channel 0, every y position on channel 1,
        // so each of the 4 position pairs is orthogonal
        let mut x = Array3::<f64>::zeros((2, 1, 2));
        x[[0, 0, 0]] = 1.0;
        x[[0, 0, 1]] = 2.0;
        let mut y = Array3::<f64>::zeros((2, 1, 2));
        y[[1, 0, 0]] = 3.0;
        y[[1, 0, 1]] = 0.5;
        let (nx, ny) = (g.leaf(x.into_dyn()), g.leaf(y.into_dyn()));
        let r2 = raw_correlation(&mut g, nx, ny);
        assert!(g.value(r2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_norm_positions_give_zero_similarity() {
        let mut g = Graph::new();
        let zero = g.leaf(ArrayD::zeros(ndarray::IxDyn(&[3, 2, 2])));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let other = g.leaf(rand_chw(&mut rng, 3, 2, 2));
        let r = raw_correlation(&mut g, zero, other);
        assert!(g.value(r).iter().all(|&v| v == 0.0 && v.is_finite()));
    }

    #[test]
    fn assembly_shapes_and_sigma_zero_reduces_to_concat() {
        let grid = 4;
        let (store, ha) = build_module(0.0, grid, 5);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f2 = g.leaf(rand_chw(&mut rng, 8, grid, grid));
        let corr = g.leaf(rand_chw(&mut rng, 4, grid, grid));
        let a_s = ha.assemble_support(&mut g, &mut binder, f2, corr);
        assert_eq!(g.shape(a_s), &[12, grid, grid]);
        assert_eq!(ha.assembled_channels(), 12);
        // sigma = 0: the offset is exactly zero, so support equals plain concat
        let a_q = ha.assemble_query(&mut g, f2, corr);
        assert_eq!(g.value(a_s), g.value(a_q));
    }

    #[test]
    fn branch_asymmetry_with_nonzero_init() {
        let grid = 4;
        let (store, ha) = build_module(0.05, grid, 7);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f2 = g.leaf(rand_chw(&mut rng, 8, grid, grid));
        let corr = g.leaf(rand_chw(&mut rng, 4, grid, grid));
        let a_s = ha.assemble_support(&mut g, &mut binder, f2, corr);
        let a_q = ha.assemble_query(&mut g, f2, corr);
        let diff: f64 = g
            .value(a_s)
            .iter()
            .zip(g.value(a_q).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "identical inputs must still differ across branches");

        // same seed, fresh module: identical init parameter
        let (store2, ha2) = build_module(0.05, grid, 7);
        assert_eq!(store.value(ha.init.unwrap()), store2.value(ha2.init.unwrap()));
    }

    #[test]
    fn squeeze_stack_gradient_matches_finite_differences() {
        let grid = 6;
        let (store, ha) = build_module(0.02, grid, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let own: Vec<ArrayD<f64>> =
            (0..3).map(|_| rand_chw(&mut rng, 4, grid, grid)).collect();
        let other: Vec<ArrayD<f64>> =
            (0..3).map(|_| rand_chw(&mut rng, 4, grid, grid)).collect();

        let run = |own0: &ArrayD<f64>| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let o0 = g.leaf(own0.clone());
            let o1 = g.leaf(own[1].clone());
            let o2 = g.leaf(own[2].clone());
            let t0 = g.leaf(other[0].clone());
            let t1 = g.leaf(other[1].clone());
            let t2 = g.leaf(other[2].clone());
            let corr = ha.correlate(&mut g, &mut binder, &[o0, o1, o2], &[t0, t1, t2], Branch::Query);
            let readout = g.leaf(ArrayD::from_shape_fn(
                ndarray::IxDyn(g.shape(corr)),
                |ix| ((ix[0] * 7 + ix[1] * 3 + ix[2]) as f64 * 0.29).sin(),
            ));
            let prod = g.mul(corr, readout);
            let loss = g.sum_all(prod);
            (g, loss, o0)
        };

        let (g, loss, o0) = run(&own[0]);
        let analytic = g.backward(loss).get(o0, own[0].shape());
        let numeric = numeric_gradient(&own[0], |x| { let (g, l, _) = run(x); g.scalar(l) }, 1e-5);
        let mut checked = 0;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            if a.abs().max(n.abs()) > 1e-7 {
                assert!(
                    relative_error(*a, *n) < 1e-3,
                    "squeeze gradient mismatch: {a} vs {n}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "too few informative entries ({checked}) in the gradient check");
    }
}
