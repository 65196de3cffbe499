//! Ablation harness: module toggles, layer-selection rows, and loss-weight
//! sweeps, each trained briefly and evaluated fold-wise into one CSV table.

use std::path::Path;
use std::sync::Arc;

use crate::config::Config;
use crate::error::{Result, TlgError};
use crate::eval::evaluate_fold;
use crate::model::TlgModel;
use crate::trainer::{dataset_from_config, folds_from_config, train};

/// One grid point, expressed as config overrides so the derivation is the
/// same mechanism the CLI uses.
#[derive(Debug, Clone)]
pub struct AblationPoint {
    pub name: String,
    pub overrides: Vec<String>,
}

impl AblationPoint {
    fn new(name: &str, overrides: &[&str]) -> Self {
        AblationPoint {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridChoice {
    Modules,
    Layers,
    LossWeights,
    All,
}

impl std::str::FromStr for GridChoice {
    type Err = TlgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(GridChoice::Modules),
            "layers" => Ok(GridChoice::Layers),
            "loss" => Ok(GridChoice::LossWeights),
            "all" => Ok(GridChoice::All),
            other => Err(TlgError::Config(format!(
                "unknown ablation grid {other}; expected modules, layers, loss, or all"
            ))),
        }
    }
}

/// The standard row sets. Module rows walk backbone-only up to the full
/// model; layer rows are the dense baseline plus the three heterogeneous
/// triples; loss rows sweep the support/query weighting.
pub fn standard_grid(choice: GridChoice) -> Vec<AblationPoint> {
    let modules = vec![
        AblationPoint::new("backbone", &["model.ha=false", "model.ht=false", "model.hc=false"]),
        AblationPoint::new("ha", &["model.ha=true", "model.ht=false", "model.hc=false"]),
        AblationPoint::new("ha+ht", &["model.ha=true", "model.ht=true", "model.hc=false"]),
        AblationPoint::new("ha+hc", &["model.ha=true", "model.ht=false", "model.hc=true"]),
        AblationPoint::new("ha+ht+hc", &["model.ha=true", "model.ht=true", "model.hc=true"]),
    ];
    let layers = vec![
        AblationPoint::new("layers all/all", &["layers.mode=all"]),
        AblationPoint::new(
            "layers 0,4,10/3,9,12",
            &["layers.mode=triple", "layers.support=[0,4,10]", "layers.query=[3,9,12]"],
        ),
        AblationPoint::new(
            "layers 3,9,12/0,4,10",
            &["layers.mode=triple", "layers.support=[3,9,12]", "layers.query=[0,4,10]"],
        ),
        AblationPoint::new(
            "layers 3,9,12/2,7,11",
            &["layers.mode=triple", "layers.support=[3,9,12]", "layers.query=[2,7,11]"],
        ),
    ];
    let loss = [
        (1.0, 1.0),
        (0.6, 1.0),
        (1.4, 1.0),
        (1.0, 0.6),
        (1.0, 1.4),
        (1.4, 0.6),
        (0.6, 1.4),
    ]
    .iter()
    .map(|(a, b)| {
        AblationPoint::new(
            &format!("loss a={a} b={b}"),
            &[&format!("loss.alpha={a}"), &format!("loss.beta={b}")],
        )
    })
    .collect::<Vec<_>>();
    match choice {
        GridChoice::Modules => modules,
        GridChoice::Layers => layers,
        GridChoice::LossWeights => loss,
        GridChoice::All => {
            let mut all = modules;
            all.extend(layers);
            all.extend(loss);
            all
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub name: String,
    pub per_fold: Vec<(usize, f64)>,
    pub mean_miou: f64,
    pub learnable_parameters: usize,
    /// Reason this point was skipped, when its config did not validate.
    pub skipped: Option<String>,
}

/// Train and evaluate every grid point over the requested folds and seeds.
/// Invalid points are skipped with a logged reason; the run continues.
pub fn run_ablation(
    base: &Config,
    points: &[AblationPoint],
    folds: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<AblationOutcome>> {
    if folds.is_empty() || seeds.is_empty() {
        return Err(TlgError::Config("ablation needs at least one fold and one seed".into()));
    }
    let base_toml = base.to_toml();
    let mut outcomes = Vec::with_capacity(points.len());
    for point in points {
        let cfg = match Config::from_toml(&base_toml, &point.overrides) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("skipping ablation point '{}': {e}", point.name);
                outcomes.push(AblationOutcome {
                    name: point.name.clone(),
                    per_fold: vec![],
                    mean_miou: f64::NAN,
                    learnable_parameters: 0,
                    skipped: Some(e.to_string()),
                });
                continue;
            }
        };
        let dataset = dataset_from_config(&cfg)?;
        let splits = folds_from_config(&cfg, &dataset)?;
        let mut per_fold = Vec::with_capacity(folds.len());
        let mut params = 0usize;
        for &fold in folds {
            let split = splits.get(fold).ok_or_else(|| {
                TlgError::Config(format!("fold {fold} out of range 0..{}", splits.len()))
            })?;
            let mut fold_sum = 0.0;
            for &seed in seeds {
                let mut cfg_seeded = cfg.clone();
                cfg_seeded.train.seed = seed;
                cfg_seeded.train.fold = fold;
                let mut model = TlgModel::new(&cfg_seeded, &dataset.category_names)?;
                params = model.count_learnable_parameters();
                let slug = point.name.replace([' ', '/', ','], "_");
                let sub = out_dir.join(format!("{slug}/fold{fold}/seed{seed}"));
                train(&mut model, dataset.clone(), split, &sub)?;
                let (fr, _) = evaluate_fold(
                    &model,
                    dataset.clone(),
                    split,
                    cfg_seeded.eval.shot,
                    cfg_seeded.eval.episodes,
                    cfg_seeded.eval.seed,
                )?;
                fold_sum += fr.miou;
            }
            per_fold.push((fold, fold_sum / seeds.len() as f64));
        }
        let mean_miou = per_fold.iter().map(|(_, m)| m).sum::<f64>() / per_fold.len() as f64;
        outcomes.push(AblationOutcome {
            name: point.name.clone(),
            per_fold,
            mean_miou,
            learnable_parameters: params,
            skipped: None,
        });
    }
    write_table(&outcomes, folds, &out_dir.join("ablation.csv"))?;
    Ok(outcomes)
}

fn write_table(outcomes: &[AblationOutcome], folds: &[usize], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut wtr =
        csv::Writer::from_path(path).map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    let mut header = vec!["name".to_string(), "learnable_parameters".to_string()];
    header.extend(folds.iter().map(|f| format!("fold{f}")));
    header.push("mean_miou".to_string());
    header.push("skipped".to_string());
    wtr.write_record(&header).map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    for o in outcomes {
        let mut row = vec![o.name.clone(), o.learnable_parameters.to_string()];
        for &f in folds {
            let v = o
                .per_fold
                .iter()
                .find(|(fold, _)| *fold == f)
                .map(|(_, m)| format!("{m:.6}"))
                .unwrap_or_default();
            row.push(v);
        }
        row.push(if o.mean_miou.is_nan() { String::new() } else { format!("{:.6}", o.mean_miou) });
        row.push(o.skipped.clone().unwrap_or_default());
        wtr.write_record(&row).map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Forward-feature difference between two layer selections on a fixed probe
/// episode; the quantity behind the layer-selection ablation surface.
pub fn layer_swap_difference(config: &Config) -> Result<f64> {
    let dataset = dataset_from_config(config)?;
    let splits = folds_from_config(config, &dataset)?;
    let split = &splits[config.train.fold];
    let sampler = Arc::new(crate::data::EpisodeSampler::new(
        dataset.clone(),
        &split.train_categories,
        config.train.shot,
        split.fold_id,
    )?);
    let episode = sampler.sample(config.train.seed, 0);

    let model = TlgModel::new(config, &dataset.category_names)?;
    let mut swapped_cfg = config.clone();
    swapped_cfg.layers.support = config.layers.query;
    swapped_cfg.layers.query = config.layers.support;
    let swapped = TlgModel::new(&swapped_cfg, &dataset.category_names)?;

    let a = model.forward(&episode, crate::model::ForwardMode::Eval)?;
    let b = swapped.forward(&episode, crate::model::ForwardMode::Eval)?;
    let diff = a
        .graph
        .value(a.query_logits)
        .iter()
        .zip(b.graph.value(b.query_logits).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff)
}
