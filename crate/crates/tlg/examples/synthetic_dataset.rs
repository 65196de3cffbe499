//! Generate a synthetic shape dataset, persist it in the on-disk layout,
//! reload it, and sample a few episodes from each fold.
//!
//! Usage: `cargo run --example synthetic_dataset -- [out_dir]`

use std::sync::Arc;

use tlg::data::{
    load_dataset, load_precomputed_masks, make_synthetic_dataset, save_dataset, EpisodeSampler,
    FoldSplit, SyntheticSpec,
};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tlg-synthetic-demo"));

    let spec = SyntheticSpec::new(4, 10, 64, 7);
    let dataset = make_synthetic_dataset(&spec).expect("generate");
    println!(
        "generated {} exemplars across categories {:?}",
        dataset.len(),
        dataset.category_names
    );
    for e in dataset.exemplars.iter().take(3) {
        let fg = e.gt_mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / (64.0 * 64.0);
        let pmax = e.pseudo_mask.iter().cloned().fold(f64::MIN, f64::max);
        println!("  {}: category {}, foreground {:.1}%, pseudo-mask max {pmax}", e.id, e.category_id, fg * 100.0);
    }

    save_dataset(&dataset, &out).expect("save");
    println!("saved to {} (images/, masks/, categories.csv)", out.display());

    let masks = load_precomputed_masks(&out).expect("masks");
    println!("reloaded {} pseudo-masks, all validated to [0,1]", masks.len());
    let reloaded = Arc::new(load_dataset(&out).expect("reload"));

    for fold in 0..4 {
        let split = FoldSplit::round_robin(reloaded.n_categories(), 4, fold).expect("fold");
        let sampler =
            EpisodeSampler::new(reloaded.clone(), &split.test_categories, 1, fold).expect("sampler");
        let ep = sampler.sample(123, 0);
        println!(
            "fold {fold}: episode f{fold}-s123-i0 -> category {} ({}), query {}",
            ep.category_id, reloaded.category_names[ep.category_id], ep.query_id
        );
    }
}
