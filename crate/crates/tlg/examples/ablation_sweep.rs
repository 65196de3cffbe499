//! Sweep module combinations (and optionally layer selections) on the
//! synthetic dataset and print the resulting table.
//!
//! Usage: `cargo run --release --example ablation_sweep -- [grid] [epochs] [seeds...]`
//! where grid is one of modules, layers, loss, all.

use tlg::ablation::{run_ablation, standard_grid, GridChoice};
use tlg::config::Config;

fn desk_config(epochs: usize) -> Config {
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
    cfg.train.epochs = epochs;
    cfg.train.episodes_per_epoch = 24;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.train.val_episodes = 8;
    cfg.eval.episodes = 40;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let grid: GridChoice = args.get(1).map(String::as_str).unwrap_or("modules").parse().expect("grid");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let seeds: Vec<u64> = if args.len() > 3 {
        args[3..].iter().map(|s| s.parse().expect("seed")).collect()
    } else {
        vec![0]
    };
    let cfg = desk_config(epochs);
    let out = std::env::temp_dir().join(format!("tlg-ablation-{}", std::process::id()));
    let points = standard_grid(grid);
    let outcomes = run_ablation(&cfg, &points, &[0], &seeds, &out).expect("ablation");
    println!("{:<24} {:>10} {:>10}", "point", "params", "mean mIoU");
    for o in &outcomes {
        match &o.skipped {
            Some(reason) => println!("{:<24} skipped: {reason}", o.name),
            None => println!("{:<24} {:>10} {:>10.4}", o.name, o.learnable_parameters, o.mean_miou),
        }
    }
    println!("table: {}", out.join("ablation.csv").display());
}
