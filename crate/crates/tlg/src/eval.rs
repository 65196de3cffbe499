//! Fold-wise meta-testing: IoU, per-fold evaluation, and report files.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EpisodeSampler, FoldSplit};
use crate::error::{Result, TlgError};
use crate::model::{ForwardMode, TlgModel};

/// Intersection over union of two binary masks; defined as 1 when both are
/// empty.
pub fn compute_iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(TlgError::Shape(format!(
            "IoU mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        intersection += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub miou: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold_results: Vec<FoldResult>,
    pub mean_miou: f64,
    pub per_category: Vec<(String, f64)>,
    pub episode_count: usize,
    pub shot: usize,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    /// Learnable parameter count of the evaluated model, for the report header.
    pub learnable_parameters: usize,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn from_folds(
        fold_results: Vec<FoldResult>,
        per_category: Vec<(String, f64)>,
        shot: usize,
        seed: u64,
        config_hash: String,
        wall_clock_seconds: f64,
        learnable_parameters: usize,
    ) -> Self {
        let episode_count = fold_results.iter().map(|f| f.episodes).sum();
        let mean_miou =
            fold_results.iter().map(|f| f.miou).sum::<f64>() / fold_results.len().max(1) as f64;
        EvalReport {
            fold_results,
            mean_miou,
            per_category,
            episode_count,
            shot,
            seed,
            config_hash,
            wall_clock_seconds,
            learnable_parameters,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| TlgError::Runtime(format!("report serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Per-fold rows plus a final mean row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)
            .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
        wtr.write_record(["fold", "miou", "episodes"])
            .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
        for f in &self.fold_results {
            wtr.write_record([f.fold_id.to_string(), format!("{:.17}", f.miou), f.episodes.to_string()])
                .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
        }
        wtr.write_record(["mean".to_string(), format!("{:.17}", self.mean_miou), self.episode_count.to_string()])
            .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
        wtr.flush()?;
        Ok(())
    }
}

/// Per-category IoU accumulator for one evaluation run.
#[derive(Debug, Default, Clone)]
pub struct CategoryScores {
    sums: std::collections::BTreeMap<usize, (f64, usize)>,
}

impl CategoryScores {
    pub fn add(&mut self, category: usize, iou: f64) {
        let e = self.sums.entry(category).or_insert((0.0, 0));
        e.0 += iou;
        e.1 += 1;
    }

    pub fn means(&self, names: &[String]) -> Vec<(String, f64)> {
        self.sums
            .iter()
            .map(|(&c, &(s, n))| (names[c].clone(), s / n as f64))
            .collect()
    }
}

/// Evaluate any query-mask predictor on one fold: average query IoU over
/// `n_episodes` sampled from the fold's test categories. Deterministic for a
/// fixed seed.
pub fn evaluate_with<P>(
    mut predict: P,
    dataset: Arc<Dataset>,
    split: &FoldSplit,
    shot: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<(FoldResult, CategoryScores)>
where
    P: FnMut(&crate::data::Episode) -> Result<Array2<u8>>,
{
    if split.test_categories.is_empty() {
        return Err(TlgError::Config(format!("fold {} has no test categories", split.fold_id)));
    }
    if n_episodes == 0 {
        return Err(TlgError::Config("evaluation needs at least one episode".into()));
    }
    let sampler = EpisodeSampler::new(dataset, &split.test_categories, shot, split.fold_id)?;
    let mut total = 0.0;
    let mut scores = CategoryScores::default();
    for i in 0..n_episodes {
        let episode = sampler.sample(seed, i as u64);
        let pred = predict(&episode)?;
        let iou = compute_iou(&pred, &episode.query_gt_mask)?;
        total += iou;
        scores.add(episode.category_id, iou);
    }
    Ok((
        FoldResult { fold_id: split.fold_id, miou: total / n_episodes as f64, episodes: n_episodes },
        scores,
    ))
}

/// Evaluate the model's hard query masks on one fold.
pub fn evaluate_fold(
    model: &TlgModel,
    dataset: Arc<Dataset>,
    split: &FoldSplit,
    shot: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<(FoldResult, CategoryScores)> {
    evaluate_with(
        |episode| {
            let pass = model.forward(episode, ForwardMode::Eval)?;
            Ok(pass.query_prediction().hard_mask)
        },
        dataset,
        split,
        shot,
        n_episodes,
        seed,
    )
}

/// Evaluate one fold and wrap it into a full report.
pub fn evaluate(
    model: &TlgModel,
    dataset: Arc<Dataset>,
    split: &FoldSplit,
    shot: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (fold, scores) = evaluate_fold(model, dataset.clone(), split, shot, n_episodes, seed)?;
    Ok(EvalReport::from_folds(
        vec![fold],
        scores.means(&dataset.category_names),
        shot,
        seed,
        model.config.hash(),
        start.elapsed().as_secs_f64(),
        model.count_learnable_parameters(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_identities() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| u8::from((y + x) % 2 == 0));
        assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
        let empty = Array2::<u8>::zeros((4, 4));
        assert_eq!(compute_iou(&empty, &empty).unwrap(), 1.0, "both empty is 1 by convention");
        let b = a.mapv(|v| 1 - v); // disjoint complement
        assert_eq!(compute_iou(&a, &b).unwrap(), 0.0);
        assert!(compute_iou(&a, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn iou_matches_pixel_counting_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.4)));
            let b = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.4)));
            let got = compute_iou(&a, &b).unwrap();
            let mut inter = 0usize;
            let mut uni = 0usize;
            for y in 0..16 {
                for x in 0..16 {
                    let (pa, pb) = (a[[y, x]] == 1, b[[y, x]] == 1);
                    if pa && pb {
                        inter += 1;
                    }
                    if pa || pb {
                        uni += 1;
                    }
                }
            }
            let expect = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
            assert_eq!(got, expect, "must equal the loop oracle exactly");
            assert_eq!(got, compute_iou(&b, &a).unwrap(), "IoU is symmetric");
        }
    }

    #[test]
    fn oracle_and_constant_predictors_bound_the_metric() {
        use crate::data::{make_synthetic_dataset, SyntheticSpec};
        use std::sync::Arc;
        let ds = Arc::new(make_synthetic_dataset(&SyntheticSpec::new(3, 4, 32, 5)).unwrap());
        let split = crate::data::FoldSplit::round_robin(3, 3, 0).unwrap();
        // a predictor that emits the ground truth scores a perfect 1.0
        let (oracle, _) = evaluate_with(
            |ep| Ok(ep.query_gt_mask.clone()),
            ds.clone(),
            &split,
            1,
            20,
            7,
        )
        .unwrap();
        assert_eq!(oracle.miou, 1.0);
        // constant background scores 0 whenever foreground exists
        let (constant, _) = evaluate_with(
            |ep| Ok(Array2::zeros(ep.query_gt_mask.dim())),
            ds.clone(),
            &split,
            1,
            20,
            7,
        )
        .unwrap();
        assert_eq!(constant.miou, 0.0);
        // identical seeds replay identically
        let (again, _) = evaluate_with(
            |ep| Ok(ep.query_gt_mask.clone()),
            ds,
            &split,
            1,
            20,
            7,
        )
        .unwrap();
        assert_eq!(oracle.miou.to_bits(), again.miou.to_bits());
    }

    #[test]
    fn report_mean_is_arithmetic_mean_of_folds() {
        let folds = vec![
            FoldResult { fold_id: 0, miou: 0.5, episodes: 10 },
            FoldResult { fold_id: 1, miou: 0.7, episodes: 10 },
            FoldResult { fold_id: 2, miou: 0.9, episodes: 10 },
        ];
        let report = EvalReport::from_folds(folds, vec![], 1, 0, "h".into(), 0.0, 42);
        assert!((report.mean_miou - 0.7).abs() < 1e-9);
        assert_eq!(report.episode_count, 30);

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("report.csv");
        report.write_csv(&csv_path).unwrap();
        // recompute the mean from the per-fold CSV rows
        let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        let mut mean_row = None;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            if &rec[0] == "mean" {
                mean_row = Some(rec[1].parse::<f64>().unwrap());
            } else {
                sum += rec[1].parse::<f64>().unwrap();
                n += 1;
            }
        }
        assert!((mean_row.unwrap() - sum / n as f64).abs() < 1e-9);
    }
}
