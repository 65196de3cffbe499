//! Static rendering for the inspect command: tap feature maps, attention,
//! transport plans, and predicted-vs-pseudo masks as PNG files.

use std::path::{Path, PathBuf};

use ndarray::prelude::*;

use crate::data::Episode;
use crate::error::{Result, TlgError};
use crate::model::{ForwardMode, TlgModel};

/// Four-stop color ramp from black through purple and orange to near-white.
fn ramp(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.05]),
        (0.33, [0.35, 0.05, 0.45]),
        (0.66, [0.9, 0.45, 0.1]),
        (1.0, [1.0, 0.97, 0.85]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut lo = STOPS[0];
    let mut hi = STOPS[STOPS.len() - 1];
    for w in STOPS.windows(2) {
        if t >= w[0].0 && t <= w[1].0 {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let f = if hi.0 > lo.0 { (t - lo.0) / (hi.0 - lo.0) } else { 0.0 };
    let mut px = [0u8; 3];
    for ch in 0..3 {
        px[ch] = ((lo.1[ch] + (hi.1[ch] - lo.1[ch]) * f) * 255.0).round() as u8;
    }
    px
}

fn normalized(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        map.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros(map.raw_dim())
    }
}

/// Write a heat map, optionally up-scaled by an integer factor so tiny grids
/// remain visible.
pub fn save_heatmap(path: &Path, map: &Array2<f64>, upscale: usize) -> Result<()> {
    let norm = normalized(map);
    let (h, w) = norm.dim();
    let s = upscale.max(1);
    let mut img = image::RgbImage::new((w * s) as u32, (h * s) as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb(ramp(norm[[y, x]]));
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel((x * s + dx) as u32, (y * s + dy) as u32, px);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Render a transport plan with a row-mass strip on the right edge. The row
/// sums are re-verified against the plan's marginals before rendering.
pub fn save_transport_plan(
    path: &Path,
    plan: &crate::ht::TransportPlan,
    tolerance: f64,
) -> Result<()> {
    let row_sums = plan.coupling.sum_axis(Axis(1));
    let worst = row_sums
        .iter()
        .zip(plan.row_marginal.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > tolerance {
        return Err(TlgError::DataValidation(format!(
            "transport plan row sums deviate from the marginals by {worst:.3e} (tolerance {tolerance:.0e})"
        )));
    }
    let n = plan.coupling.nrows();
    let norm = normalized(&plan.coupling);
    let strip = 4usize;
    let mut img = image::RgbImage::new((n + 1 + strip) as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            img.put_pixel(x as u32, y as u32, image::Rgb(ramp(norm[[y, x]])));
        }
        // separator plus the row-mass annotation, scaled so an exact uniform
        // marginal sits mid-ramp
        img.put_pixel(n as u32, y as u32, image::Rgb([255, 255, 255]));
        let t = 0.5 * row_sums[y] / plan.row_marginal[y];
        for dx in 0..strip {
            img.put_pixel((n + 1 + dx) as u32, y as u32, image::Rgb(ramp(t)));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Side-by-side predicted mask and pseudo-mask target.
pub fn save_mask_pair(path: &Path, pred: &Array2<u8>, pseudo: &Array2<f64>) -> Result<()> {
    let (h, w) = pred.dim();
    if pseudo.dim() != (h, w) {
        return Err(TlgError::Shape("mask pair sizes differ".into()));
    }
    let mut img = image::RgbImage::new((2 * w + 2) as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = pred[[y, x]] as f64;
            img.put_pixel(x as u32, y as u32, image::Rgb(ramp(p)));
            img.put_pixel((w + 2 + x) as u32, y as u32, image::Rgb(ramp(pseudo[[y, x]])));
        }
        img.put_pixel(w as u32, y as u32, image::Rgb([255, 255, 255]));
        img.put_pixel((w + 1) as u32, y as u32, image::Rgb([255, 255, 255]));
    }
    img.save(path)?;
    Ok(())
}

/// Run one evaluation forward pass and write every requested rendering.
/// Returns the written paths.
pub fn inspect_episode(
    model: &TlgModel,
    episode: &Episode,
    taps: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let pass = model.forward(episode, ForwardMode::Eval)?;

    // per-tap channel means for the query and the first support shot
    let requested: std::collections::BTreeSet<usize> = taps.iter().cloned().collect();
    for (label, image) in
        [("query", &episode.query_image), ("support0", &episode.support_images[0])]
    {
        let features = model.extract_taps(image, &requested)?;
        for (tap, map) in features.taps() {
            let mean = map.mean_axis(Axis(0)).expect("non-empty channels");
            let path = out_dir.join(format!("tap_{label}_{tap:02}.png"));
            save_heatmap(&path, &mean, 4)?;
            written.push(path);
        }
    }

    if let Some(attn) = &pass.extras.query_attention {
        let path = out_dir.join("attention_query.png");
        save_heatmap(&path, attn, 2)?;
        written.push(path);
    }
    if let Some(plan) = &pass.extras.query_plan {
        let path = out_dir.join("transport_plan_query.png");
        save_transport_plan(&path, plan, 1e-3)?;
        written.push(path);
    }
    let pred = pass.query_prediction();
    let path = out_dir.join("masks_query.png");
    save_mask_pair(&path, &pred.hard_mask, &episode.query_pseudo_mask)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ht::sinkhorn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heatmap_and_mask_renderings_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let p = dir.path().join("h.png");
        save_heatmap(&p, &map, 3).unwrap();
        assert!(p.exists());
        let pred = Array2::from_shape_fn((8, 8), |_| u8::from(rng.gen_bool(0.5)));
        let pseudo = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let m = dir.path().join("m.png");
        save_mask_pair(&m, &pred, &pseudo).unwrap();
        assert!(m.exists());
    }

    #[test]
    fn transport_rendering_reverifies_marginals() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cost = Array2::from_shape_fn((9, 9), |_| rng.gen_range(0.0..1.0));
        let plan = sinkhorn(&cost, 10.0, 300, 1e-9).unwrap();
        let p = dir.path().join("plan.png");
        save_transport_plan(&p, &plan, 1e-6).unwrap();
        assert!(p.exists());

        // a corrupted plan fails the render-time verification
        let mut bad = plan.clone();
        bad.coupling[[0, 0]] += 0.1;
        assert!(save_transport_plan(&dir.path().join("bad.png"), &bad, 1e-6).is_err());
    }
}
