//! Render one episode's internals to PNG files: backbone taps, the query
//! attention matrix, the transport plan (with its row-mass strip), and the
//! predicted-vs-pseudo mask pair.
//!
//! Usage: `cargo run --release --example inspect_episode -- [out_dir]`

use std::sync::Arc;

use tlg::config::Config;
use tlg::data::EpisodeSampler;
use tlg::model::TlgModel;
use tlg::trainer::{dataset_from_config, folds_from_config};
use tlg::viz::inspect_episode;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tlg-inspect-demo"));

    let mut cfg = Config::default();
    cfg.data.image_size = 64;
    cfg.data.n_categories = 4;
    cfg.data.exemplars_per_category = 8;
    cfg.backbone.width_multiplier = 2;
    cfg.ha.c_ha = 32;
    cfg.ha.squeeze_channels = 16;
    cfg.hc.d_text = 32;
    cfg.head.hidden_channels = 24;

    let dataset = dataset_from_config(&cfg).expect("dataset");
    let splits = folds_from_config(&cfg, &dataset).expect("folds");
    let split = &splits[0];
    let sampler =
        EpisodeSampler::new(Arc::clone(&dataset), &split.test_categories, 1, 0).expect("sampler");
    let episode = sampler.sample(5, 0);

    let model = TlgModel::new(&cfg, &dataset.category_names).expect("model");
    let taps = [3usize, 9, 12, 0, 4, 10];
    let written = inspect_episode(&model, &episode, &taps, &out).expect("inspect");
    println!("episode f0-s5-i0 (category {})", dataset.category_names[episode.category_id]);
    for p in written {
        println!("  {}", p.display());
    }
}
