//! Train the full model on a synthetic shape dataset and evaluate on the
//! fold's held-out category.
//!
//! Usage: `cargo run --release --example train_synthetic -- [epochs] [seed]`

use std::sync::Arc;
use std::time::Instant;

use tlg::config::Config;
use tlg::eval::evaluate_fold;
use tlg::model::TlgModel;
use tlg::trainer::{dataset_from_config, folds_from_config, train};

/// Desk-scale configuration: 64x64 images, four shape categories, 1-shot.
fn desk_config(epochs: usize, seed: u64) -> Config {
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
    cfg.train.seed = seed;
    cfg.eval.episodes = 40;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = desk_config(epochs, seed);

    let dataset = dataset_from_config(&cfg).expect("dataset");
    let splits = folds_from_config(&cfg, &dataset).expect("folds");
    let split = &splits[cfg.train.fold];
    println!(
        "dataset: {} exemplars over {:?}; fold {} holds out {:?}",
        dataset.len(),
        dataset.category_names,
        split.fold_id,
        split.test_categories
    );

    let mut model = TlgModel::new(&cfg, &dataset.category_names).expect("model");
    println!(
        "learnable parameters: {} (frozen backbone: {})",
        model.count_learnable_parameters(),
        model.frozen_parameter_count()
    );

    // untrained baseline on the held-out category
    let (untrained, _) = evaluate_fold(
        &model,
        dataset.clone(),
        split,
        cfg.eval.shot,
        cfg.eval.episodes,
        cfg.eval.seed,
    )
    .expect("untrained eval");
    println!("untrained held-out mIoU: {:.4}", untrained.miou);

    let dir = tempfile_dir();
    let start = Instant::now();
    let outcome = train(&mut model, Arc::clone(&dataset), split, &dir).expect("train");
    let train_secs = start.elapsed().as_secs_f64();
    for e in &outcome.epochs {
        println!("epoch {:>3}: train loss {:.4} | val mIoU {:.4}", e.epoch, e.train_loss, e.val_miou);
    }

    let (trained, per_cat) = evaluate_fold(
        &model,
        dataset.clone(),
        split,
        cfg.eval.shot,
        cfg.eval.episodes,
        cfg.eval.seed,
    )
    .expect("trained eval");
    println!(
        "trained held-out mIoU: {:.4} (untrained {:.4}) | {train_secs:.1}s for {} epochs",
        trained.miou, untrained.miou, epochs
    );
    for (name, iou) in per_cat.means(&dataset.category_names) {
        println!("  category {name}: IoU {iou:.4}");
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tlg-train-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
