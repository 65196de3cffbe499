//! End-to-end gradient verification: the analytic episode-loss gradient for
//! a sampled subset of parameters against central finite differences, on a
//! 5x5-grid micro configuration with the transport loop unrolled 20 times.
//!
//! Usage: `cargo run --release --example gradient_check -- [fraction]`

use std::time::Instant;

use tlg::config::Config;
use tlg::data::{EpisodeSampler, FoldSplit};
use tlg::model::TlgModel;
use tlg::trainer::{
    dataset_from_config, finite_difference_at, parameter_gradients, sample_parameter_indices,
};

fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.data.image_size = 40; // canonical grid 5x5
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

fn main() {
    let fraction: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    let cfg = micro_config();
    let dataset = dataset_from_config(&cfg).expect("dataset");
    let split = FoldSplit::round_robin(cfg.data.n_categories, cfg.data.n_folds, 0).expect("fold");
    let sampler =
        EpisodeSampler::new(dataset.clone(), &split.train_categories, 1, 0).expect("sampler");
    let episode = sampler.sample(11, 0);

    let mut model = TlgModel::new(&cfg, &dataset.category_names).expect("model");
    let total = model.store().flat_len();
    let indices = sample_parameter_indices(total, fraction, 99);
    println!(
        "grid {}x{} | {} parameters, checking {} ({}%)",
        model.grid(),
        model.grid(),
        total,
        indices.len(),
        fraction * 100.0
    );

    let start = Instant::now();
    let analytic = parameter_gradients(&model, &episode).expect("gradients");
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0usize;
    for &flat in &indices {
        let (pid, offset) = model.store().get_flat(flat);
        let name = model.store().name(pid).to_string();
        let a = analytic[pid.0]
            .as_ref()
            .map(|g| g.as_slice().unwrap()[offset])
            .unwrap_or(0.0);
        let fd = finite_difference_at(&mut model, &episode, pid, offset, 1e-5).expect("fd");
        let denom = a.abs().max(fd.abs());
        let rel = if denom > 1e-8 { (a - fd).abs() / denom } else { 0.0 };
        if rel > worst.0 {
            worst = (rel, format!("{name}[{offset}] analytic {a:.3e} fd {fd:.3e}"));
        }
        checked += 1;
    }
    println!(
        "checked {checked} coordinates in {:.1}s | worst relative error {:.3e}",
        start.elapsed().as_secs_f64(),
        worst.0
    );
    if !worst.1.is_empty() {
        println!("worst coordinate: {}", worst.1);
    }
    assert!(worst.0 < 1e-3, "gradient mismatch beyond tolerance");
    println!("ok: analytic gradients match central finite differences");
}
