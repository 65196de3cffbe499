//! Acceptance suite: one test per acceptance criterion, each printing one
//! pass/fail line (the test name carries the criterion number). Tolerances
//! and budgets are pinned in the asserts.
//!
//! Run with `cargo test --test acceptance -- --nocapture` for the summary
//! lines; plain `cargo test` reports the same pass/fail per test name.

use std::time::Instant;

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tlg::ablation::{run_ablation, standard_grid, AblationPoint, GridChoice};
use tlg::backbone::{FeatureExtractor, Level, ToyBackbone};
use tlg::config::Config;
use tlg::data::{normalize_cam, EpisodeSampler, FoldSplit};
use tlg::eval::{compute_iou, evaluate_fold};
use tlg::ha::Branch;
use tlg::ht::{cross_attention, sinkhorn, AttentionParams};
use tlg::model::TlgModel;
use tlg::params::{Binder, ParamStore};
use tlg::trainer::{
    dataset_from_config, finite_difference_at, folds_from_config, parameter_gradients,
    sample_parameter_indices, train,
};

fn pass(criterion: usize, name: &str) {
    println!("criterion {criterion:02} PASS - {name}");
}

/// Desk-scale training configuration shared by criteria 8 and 9.
fn desk_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.data.image_size = 64;
    cfg.data.n_categories = 4;
    cfg.data.exemplars_per_category = 20;
    cfg.data.n_folds = 4;
    cfg.backbone.width_multiplier = 2;
    cfg.ha.c_ha = 32;
    cfg.ha.squeeze_channels = 16;
    cfg.hc.d_text = 32;
    cfg.head.hidden_channels = 24;
    cfg.train.epochs = 20;
    cfg.train.episodes_per_epoch = 24;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.train.val_episodes = 8;
    cfg.train.seed = seed;
    cfg.eval.episodes = 40;
    cfg
}

/// 5x5-grid micro configuration for gradient verification.
fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.data.image_size = 40;
    cfg.data.n_categories = 3;
    cfg.data.exemplars_per_category = 4;
    cfg.data.n_folds = 3;
    cfg.backbone.width_multiplier = 1;
    cfg.ha.c_ha = 8;
    cfg.ha.squeeze_channels = 4;
    cfg.hc.d_text = 16;
    cfg.head.hidden_channels = 6;
    cfg.ht.unrolled_iters = 20;
    cfg
}

/// Tiny configuration for determinism and harness-emission checks.
fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.data.image_size = 32;
    cfg.data.n_categories = 3;
    cfg.data.exemplars_per_category = 6;
    cfg.data.n_folds = 3;
    cfg.backbone.width_multiplier = 1;
    cfg.ha.c_ha = 8;
    cfg.ha.squeeze_channels = 4;
    cfg.hc.d_text = 16;
    cfg.head.hidden_channels = 6;
    cfg.ht.unrolled_iters = 5;
    cfg.train.epochs = 2;
    cfg.train.episodes_per_epoch = 4;
    cfg.train.batch_size = 2;
    cfg.train.val_episodes = 4;
    cfg.eval.episodes = 10;
    cfg
}

/// Independently written dense Sinkhorn oracle: builds the full coupling by
/// explicit elementwise loops each sweep, no shared code with the solver.
fn dense_sinkhorn_oracle(cost: &Array2<f64>, lambda: f64, iters: usize) -> Array2<f64> {
    let n = cost.nrows();
    let m = cost.ncols();
    let r = 1.0 / n as f64;
    let c = 1.0 / m as f64;
    let mut u = vec![1.0f64; n];
    let mut v = vec![1.0f64; m];
    let k: Vec<Vec<f64>> =
        (0..n).map(|i| (0..m).map(|j| (-lambda * cost[[i, j]]).exp()).collect()).collect();
    for _ in 0..iters {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| k[i][j] * v[j]).sum();
            u[i] = r / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[i][j] * u[i]).sum();
            v[j] = c / s;
        }
    }
    Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[i][j] * v[j])
}

#[test]
fn criterion_01_sinkhorn_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..50 {
        let cost = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..1.0));
        let plan = sinkhorn(&cost, 10.0, 200, 1e-6).unwrap();
        assert!(
            plan.converged && plan.iterations_used <= 200,
            "trial {trial}: no convergence within 200 iterations"
        );
        assert!(
            plan.marginal_violation() < 1e-6,
            "trial {trial}: marginal violation {} >= 1e-6",
            plan.marginal_violation()
        );
        let oracle = dense_sinkhorn_oracle(&cost, 10.0, 400);
        for (a, b) in plan.coupling.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: coupling differs from the oracle");
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "50 instances took {elapsed:.2}s, budget is 5s");
    pass(1, "sinkhorn marginals < 1e-6 and oracle agreement on 50 instances");
}

/// The criterion as stated: the primal entropic objective evaluated at the
/// raw scaling iterates must never increase by more than 1e-9 per step.
///
/// Note: alternating scaling is exact block-coordinate ascent on the dual of
/// this objective, and its iterates are marginal-infeasible until
/// convergence, so the primal value at the iterates is not a descent
/// quantity; it typically climbs toward the optimum from below and
/// oscillates in both directions at magnitudes far above 1e-9. The dual
/// counterpart is monotone and is verified green in
/// `ht::tests::dual_objective_is_monotone_nondecreasing`.
#[test]
fn criterion_02_entropic_objective_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut violating_instances = 0usize;
    for _ in 0..20 {
        let cost = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..1.0));
        let plan = sinkhorn(&cost, 10.0, 200, 1e-12).unwrap();
        let mut instance_worst: f64 = 0.0;
        for w in plan.objective_series.windows(2) {
            instance_worst = instance_worst.max(w[1] - w[0]);
        }
        if instance_worst > 1e-9 {
            violating_instances += 1;
        }
        worst = worst.max(instance_worst);
    }
    assert!(
        worst <= 1e-9,
        "primal entropic objective increased by up to {worst:.3e} per step on \
         {violating_instances}/20 instances (tolerance 1e-9); the scaling iterates are \
         marginal-infeasible and only the dual objective is monotone for this algorithm \
         (see ht::tests::dual_objective_is_monotone_nondecreasing)"
    );
    pass(2, "entropic objective nonincreasing across iterations");
}

#[test]
fn criterion_03_attention_normalization_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..10 {
        let c = 6;
        let hw = 64; // 8x8 instances
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "attn", c, c, &mut rng);
        let feature = Array2::from_shape_fn((c, hw), |_| rng.gen_range(-1.0..1.0));
        let mut g = tlg::autodiff::Graph::new();
        let mut binder = Binder::new(&store);
        let fnode = g.leaf(feature.clone().into_dyn());
        let (out, attn) = cross_attention(&mut g, &mut binder, fnode, &params);

        for row in g.value(attn).view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6, "trial {trial}: softmax row sum off");
        }

        // dense matrix-product recomputation
        let get = |id| {
            store.iter().find(|(pid, _)| *pid == id).unwrap().1.value.view()
                .into_dimensionality::<Ix2>().unwrap().to_owned()
        };
        let (wq, wk, wv) = {
            let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
            (get(ids[0]), get(ids[1]), get(ids[2]))
        };
        let x = feature.t().to_owned();
        let q = x.dot(&wq);
        let k = x.dot(&wk);
        let v = x.dot(&wv);
        let mut logits = q.dot(&k.t()) / (c as f64).sqrt();
        for mut row in logits.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let expect = logits.dot(&v).t().to_owned();
        for (a, b) in g.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: attention oracle mismatch");
        }
    }
    pass(3, "attention rows sum to 1 and match the dense oracle on 8x8 instances");
}

#[test]
fn criterion_04_end_to_end_gradient_check() {
    let start = Instant::now();
    let cfg = micro_config();
    assert_eq!(cfg.canonical_grid(), 5, "criterion pins a 5x5 grid");
    assert_eq!(cfg.ht.unrolled_iters, 20, "criterion pins 20 unrolled iterations");
    let dataset = dataset_from_config(&cfg).unwrap();
    let split = FoldSplit::round_robin(cfg.data.n_categories, cfg.data.n_folds, 0).unwrap();
    let sampler = EpisodeSampler::new(dataset.clone(), &split.train_categories, 1, 0).unwrap();
    let episode = sampler.sample(11, 0);

    let mut model = TlgModel::new(&cfg, &dataset.category_names).unwrap();
    let total = model.store().flat_len();
    let indices = sample_parameter_indices(total, 0.01, 99);
    let analytic = parameter_gradients(&model, &episode).unwrap();
    let mut informative = 0usize;
    for &flat in &indices {
        let (pid, offset) = model.store().get_flat(flat);
        let a = analytic[pid.0].as_ref().map(|g| g.as_slice().unwrap()[offset]).unwrap_or(0.0);
        let fd = finite_difference_at(&mut model, &episode, pid, offset, 1e-5).unwrap();
        let denom = a.abs().max(fd.abs());
        if denom > 1e-8 {
            let rel = (a - fd).abs() / denom;
            assert!(
                rel < 1e-3,
                "parameter {}[{offset}]: analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.3e})",
                model.store().name(pid)
            );
            informative += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient check took {elapsed:.1}s, budget is 60s");
    assert!(informative * 2 >= indices.len(), "most sampled coordinates must be informative");
    pass(4, "sampled parameter gradients match central differences at rel 1e-3");
}

#[test]
fn criterion_05_cam_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..50 {
        let raw = Array2::from_shape_fn((9, 7), |_| rng.gen_range(-3.0..5.0));
        let out = normalize_cam(&raw).unwrap();
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if raw.iter().any(|&v| v > 0.0) {
            let max = out.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(max, 1.0, "max must be exactly 1 with any positive entry");
        }
        // positive-scale invariance
        let c = rng.gen_range(0.01..100.0);
        let scaled = normalize_cam(&raw.mapv(|v| c * v)).unwrap();
        for (a, b) in out.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-9, "scale invariance violated: {a} vs {b}");
        }
    }
    let negative = Array2::from_elem((4, 4), -2.5);
    assert!(normalize_cam(&negative).unwrap().iter().all(|&v| v == 0.0));
    assert!(normalize_cam(&Array2::zeros((3, 3))).unwrap().iter().all(|&v| v == 0.0));
    pass(5, "pseudo-mask normalization bounds, exact max, scale invariance");
}

#[test]
fn criterion_06_channel_shape_arithmetic() {
    for wm in [1usize, 2, 4] {
        let backbone = ToyBackbone::new(3, wm).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let channels = [Level::Low, Level::Middle, Level::High]
            .map(|l| backbone.channels_of_level(l));
        let cfg = tlg::config::HaConfig { c_ha: 8, ..Default::default() };
        let grid = 8; // canonical grid for 64-px inputs
        let ha = tlg::ha::HaModule::new(&mut store, &mut rng, &cfg, channels, grid, true).unwrap();
        let mut g = tlg::autodiff::Graph::new();
        let mut binder = Binder::new(&store);
        let image = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
        let taps = backbone.extract(&image, &[0, 4, 10].into_iter().collect()).unwrap();
        for (level, tap) in [(Level::Low, 0usize), (Level::Middle, 4), (Level::High, 10)] {
            let feat = g.leaf(taps.get(tap).unwrap().clone().into_dyn());
            let aligned = ha.project_and_align(&mut g, &mut binder, feat, Branch::Query, level);
            let out_c = g.shape(aligned)[0];
            let in_c = channels[level.index()];
            assert_eq!(
                out_c << level.alpha(),
                in_c,
                "wm {wm} {level:?}: projected {out_c} x 2^{} != {in_c}",
                level.alpha()
            );
            assert_eq!(&g.shape(aligned)[1..], &[grid, grid], "must land on the canonical grid");
        }
    }
    // at full scale, 400-px inputs use a 50x50 canonical grid
    let mut cfg = Config::default();
    cfg.data.image_size = 400;
    assert_eq!(cfg.canonical_grid(), 50);
    pass(6, "projected channels x 2^alpha equal input channels; aligned on the grid");
}

#[test]
fn criterion_07_iou_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..1000 {
        let a = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.35)));
        let b = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.35)));
        let got = compute_iou(&a, &b).unwrap();
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (&x, &y) in a.iter().zip(b.iter()) {
            inter += usize::from(x == 1 && y == 1);
            uni += usize::from(x == 1 || y == 1);
        }
        let expect = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        assert_eq!(got, expect, "IoU must equal the pixel-counting oracle exactly");
    }
    let empty = Array2::<u8>::zeros((8, 8));
    assert_eq!(compute_iou(&empty, &empty).unwrap(), 1.0);
    pass(7, "IoU equals the counting oracle on 1000 pairs; both-empty is 1");
}

#[test]
fn criterion_08_desk_scale_learning_signal() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    for seed in [0u64, 1, 2] {
        let cfg = desk_config(seed);
        assert_eq!((cfg.loss.alpha, cfg.loss.beta), (1.4, 0.6), "default loss weights");
        let dataset = dataset_from_config(&cfg).unwrap();
        let split = &folds_from_config(&cfg, &dataset).unwrap()[0];
        let mut model = TlgModel::new(&cfg, &dataset.category_names).unwrap();

        let (untrained, _) = evaluate_fold(
            &model, dataset.clone(), split, cfg.eval.shot, cfg.eval.episodes, cfg.eval.seed,
        )
        .unwrap();
        assert!(
            untrained.miou <= 0.40,
            "seed {seed}: untrained held-out mIoU {:.4} exceeds 0.40",
            untrained.miou
        );

        let out = train(&mut model, dataset.clone(), split, &dir.path().join(format!("s{seed}")))
            .unwrap();
        model.load_checkpoint(&out.checkpoint_path).unwrap();
        let (trained, _) = evaluate_fold(
            &model, dataset.clone(), split, cfg.eval.shot, cfg.eval.episodes, cfg.eval.seed,
        )
        .unwrap();
        assert!(
            trained.miou >= 0.60,
            "seed {seed}: trained held-out mIoU {:.4} below 0.60 (untrained {:.4})",
            trained.miou,
            untrained.miou
        );
        println!(
            "  seed {seed}: untrained {:.4} -> trained {:.4}",
            untrained.miou, trained.miou
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 900.0, "criterion took {elapsed:.0}s, budget is 15 minutes");
    pass(8, "20-epoch training reaches held-out mIoU >= 0.60 vs <= 0.40 untrained, 3 seeds");
}

#[test]
fn criterion_09_ablation_ordering() {
    let cfg = desk_config(0);
    let points = vec![
        AblationPoint {
            name: "backbone".into(),
            overrides: vec!["model.ha=false".into(), "model.ht=false".into(), "model.hc=false".into()],
        },
        AblationPoint {
            name: "ha".into(),
            overrides: vec!["model.ha=true".into(), "model.ht=false".into(), "model.hc=false".into()],
        },
        AblationPoint {
            name: "ha+ht".into(),
            overrides: vec!["model.ha=true".into(), "model.ht=true".into(), "model.hc=false".into()],
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let outcomes = run_ablation(&cfg, &points, &[0], &[0, 1, 2], dir.path()).unwrap();
    let miou = |name: &str| {
        outcomes.iter().find(|o| o.name == name).map(|o| o.mean_miou).unwrap()
    };
    let (base, ha, haht) = (miou("backbone"), miou("ha"), miou("ha+ht"));
    println!("  backbone {base:.4} | +HA {ha:.4} | +HA+HT {haht:.4} (3-seed means)");
    const SLACK: f64 = 0.02;
    assert!(
        base <= ha + SLACK,
        "aggregation must not lose more than {SLACK} over the baseline: {base:.4} vs {ha:.4}"
    );
    assert!(
        ha <= haht + SLACK,
        "transport must not lose more than {SLACK} over aggregation: {ha:.4} vs {haht:.4}"
    );
    pass(9, "module ordering backbone <= +HA <= +HA+HT within 0.02 slack (3 seeds)");
}

#[test]
fn criterion_10_layer_selection_surface() {
    // swapping the triples changes the forward features on a fixed probe
    let mut cfg = tiny_config();
    cfg.eval.episodes = 4;
    let diff = tlg::ablation::layer_swap_difference(&cfg).unwrap();
    assert!(diff > 0.0, "swapped layer selections must produce different features");
    println!("  layer-swap forward difference norm: {diff:.4}");

    // the harness emits exactly the four-row table
    let mut table_cfg = tiny_config();
    table_cfg.train.epochs = 1;
    table_cfg.train.episodes_per_epoch = 2;
    table_cfg.train.val_episodes = 1;
    table_cfg.eval.episodes = 4;
    let dir = tempfile::tempdir().unwrap();
    let rows = standard_grid(GridChoice::Layers);
    assert_eq!(rows.len(), 4);
    let outcomes = run_ablation(&table_cfg, &rows, &[0], &[0], dir.path()).unwrap();
    assert_eq!(outcomes.len(), 4, "the layer table must have exactly four rows");
    assert!(outcomes.iter().all(|o| o.skipped.is_none()), "no layer row may be skipped");
    let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    assert!(names[0].contains("all/all"));
    assert!(names[1].contains("0,4,10/3,9,12"));
    assert!(names[2].contains("3,9,12/0,4,10"));
    assert!(names[3].contains("3,9,12/2,7,11"));
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5, "header plus four rows");
    pass(10, "layer swap changes features; harness emits the four-row table");
}

#[test]
fn criterion_11_determinism_and_persistence() {
    let cfg = tiny_config();
    let dataset = dataset_from_config(&cfg).unwrap();
    let split = &folds_from_config(&cfg, &dataset).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();

    let run = |sub: &str| {
        let mut model = TlgModel::new(&cfg, &dataset.category_names).unwrap();
        let out = train(&mut model, dataset.clone(), split, &dir.path().join(sub)).unwrap();
        model.load_checkpoint(&out.checkpoint_path).unwrap();
        let (fr, _) = evaluate_fold(
            &model, dataset.clone(), split, cfg.eval.shot, cfg.eval.episodes, cfg.eval.seed,
        )
        .unwrap();
        (fr.miou, out.checkpoint_path, model)
    };
    let (miou_a, ckpt_a, model_a) = run("a");
    let (miou_b, _, _) = run("b");
    assert_eq!(
        miou_a.to_bits(),
        miou_b.to_bits(),
        "fixed-seed train->checkpoint->eval must reproduce mIoU bit-identically"
    );

    // checkpoint round trip restores every parameter bit-exactly
    let mut fresh = TlgModel::new(&cfg, &dataset.category_names).unwrap();
    fresh.load_checkpoint(&ckpt_a).unwrap();
    for ((_, pa), (_, pb)) in model_a.store().iter().zip(fresh.store().iter()) {
        assert_eq!(pa.name, pb.name);
        for (x, y) in pa.value.iter().zip(pb.value.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "parameter {} not bit-exact", pa.name);
        }
    }
    let (fr, _) = evaluate_fold(
        &fresh, dataset.clone(), split, cfg.eval.shot, cfg.eval.episodes, cfg.eval.seed,
    )
    .unwrap();
    assert_eq!(fr.miou.to_bits(), miou_a.to_bits(), "reloaded checkpoint must evaluate identically");
    pass(11, "bit-identical train/eval under a fixed seed; parameter-exact checkpoints");
}

#[test]
fn criterion_12_parameter_accounting() {
    let cfg = tiny_config();
    let dataset = dataset_from_config(&cfg).unwrap();
    let count = |ha: bool, ht: bool, hc: bool| {
        let mut c = cfg.clone();
        c.model = tlg::config::ModelToggles { ha, ht, hc };
        let model = TlgModel::new(&c, &dataset.category_names).unwrap();
        assert!(model.frozen_parameter_count() > 0);
        for (_, p) in model.store().iter() {
            assert!(
                !p.name.starts_with("backbone") && !p.name.contains("encoder"),
                "frozen components must not register parameters: {}",
                p.name
            );
        }
        model.count_learnable_parameters()
    };
    let full = count(true, true, true);
    let no_ht = count(true, false, true);
    let no_hc = count(true, true, false);
    let neither = count(true, false, false);
    assert!(no_hc < full, "dropping the prompt module must strictly decrease the count");
    assert!(no_ht < full);
    // additivity: each module's size is independent of the other toggles
    assert_eq!(full - no_hc, no_ht - neither, "prompt-module size must be toggle-independent");
    assert_eq!(full - no_ht, no_hc - neither, "transport-module size must be toggle-independent");

    // full-scale configuration, documented as a point of comparison
    let mut full_scale = Config::default();
    full_scale.data.image_size = 400;
    full_scale.data.n_categories = 20;
    full_scale.backbone.width_multiplier = 4;
    full_scale.hc.prompt_bank = "builtin:pascal".into();
    let names = tlg::hc::PromptBank::builtin("pascal")
        .unwrap()
        .records()
        .iter()
        .map(|r| r.category_name.clone())
        .collect::<Vec<_>>();
    let model = TlgModel::new(&full_scale, &names).unwrap();
    println!(
        "  full-scale config: {} learnable parameters ({:.2}M); the full-scale reference \
         implementation of this architecture reports 4.47M",
        model.count_learnable_parameters(),
        model.count_learnable_parameters() as f64 / 1e6
    );
    assert!(model.count_learnable_parameters() > 0);
    pass(12, "learnable count excludes frozen parts and is additive under toggles");
}
