//! Segmentation head (two conv-and-upsample stages) and the
//! heterogeneity-weighted binary cross-entropy objective.

use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::HeadConfig;
use crate::error::{Result, TlgError};
use crate::params::{Binder, ParamId, ParamStore};

/// Probability clamp for log stability.
pub const BCE_EPS: f64 = 1e-7;

/// Decoder output in its three forms.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// (2, H, W) background/foreground logits.
    pub logits: Array3<f64>,
    /// Per-pixel softmax over the two channels.
    pub probabilities: Array3<f64>,
    /// Argmax with ties resolved to background.
    pub hard_mask: Array2<u8>,
}

impl MaskPrediction {
    pub fn from_logits(logits: Array3<f64>) -> Self {
        let (c, h, w) = logits.dim();
        assert_eq!(c, 2, "mask logits must have exactly two channels");
        let mut probabilities = Array3::<f64>::zeros((2, h, w));
        let mut hard_mask = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let (bg, fg) = (logits[[0, y, x]], logits[[1, y, x]]);
                let m = bg.max(fg);
                let (eb, ef) = ((bg - m).exp(), (fg - m).exp());
                let z = eb + ef;
                probabilities[[0, y, x]] = eb / z;
                probabilities[[1, y, x]] = ef / z;
                hard_mask[[y, x]] = u8::from(fg > bg);
            }
        }
        MaskPrediction { logits, probabilities, hard_mask }
    }

    pub fn foreground(&self) -> ArrayView2<'_, f64> {
        self.probabilities.index_axis(Axis(0), 1)
    }
}

/// Lightweight decoder: conv3x3 + upsample to half resolution, conv3x3 +
/// upsample to the image resolution, producing two-channel logits.
pub struct HeadModule {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    pub hidden: usize,
    in_channels: usize,
}

impl HeadModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &HeadConfig, in_channels: usize) -> Self {
        HeadModule {
            conv1: store.add_conv("head.conv1", cfg.hidden_channels, in_channels, 3, rng),
            conv2: store.add_conv("head.conv2", 2, cfg.hidden_channels, 3, rng),
            hidden: cfg.hidden_channels,
            in_channels,
        }
    }

    /// (C, G, G) feature to (2, image_size, image_size) logits.
    pub fn predict(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        feature: NodeId,
        image_size: usize,
    ) -> NodeId {
        let shape = g.shape(feature).to_vec();
        assert_eq!(shape[0], self.in_channels, "head channel mismatch");
        let (grid_h, grid_w) = (shape[1], shape[2]);
        let x = g.reshape(feature, &[1, self.in_channels, grid_h, grid_w]);
        let w1 = binder.node(g, self.conv1.0);
        let b1 = binder.node(g, self.conv1.1);
        let c1 = g.conv2d_same(x, w1, b1);
        let a1 = g.relu(c1);
        let a1 = g.reshape(a1, &[self.hidden, grid_h, grid_w]);
        let mid = image_size / 2;
        let up1 = g.bilinear_resize(a1, mid, mid);
        let up1 = g.reshape(up1, &[1, self.hidden, mid, mid]);
        let w2 = binder.node(g, self.conv2.0);
        let b2 = binder.node(g, self.conv2.1);
        let c2 = g.conv2d_same(up1, w2, b2);
        let c2 = g.reshape(c2, &[2, mid, mid]);
        g.bilinear_resize(c2, image_size, image_size)
    }
}

/// Softmax the logits and take the clamped foreground probability row.
fn foreground_probability(g: &mut Graph, logits: NodeId) -> NodeId {
    let shape = g.shape(logits).to_vec();
    assert_eq!(shape[0], 2, "expected two-channel logits");
    let flat = g.reshape(logits, &[2, shape[1] * shape[2]]);
    let probs = g.softmax(flat, 0);
    let fg = g.select_axis0(probs, &[1]); // (1, HW)
    g.clamp(fg, BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean pixelwise binary cross-entropy of two-channel logits against a soft
/// [0,1] target. `binarize` thresholds the target at 0.5 first.
pub fn bce_loss(
    g: &mut Graph,
    logits: NodeId,
    target: &Array2<f64>,
    binarize: bool,
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || (shape[1], shape[2]) != target.dim() {
        return Err(TlgError::Shape(format!(
            "logits {:?} do not match target {:?}",
            shape,
            target.dim()
        )));
    }
    if target.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(TlgError::DataValidation("BCE target must lie in [0,1]".into()));
    }
    let t = if binarize { target.mapv(|v| f64::from(v >= 0.5)) } else { target.clone() };
    let n = target.len();
    let t_flat = g.leaf(t.into_shape_with_order((1, n)).unwrap().into_dyn());
    let p = foreground_probability(g, logits);
    let ln_p = g.ln(p);
    let one = g.leaf(ArrayD::ones(ndarray::IxDyn(&[1, n])));
    let q = g.sub(one, p);
    let ln_q = g.ln(q);
    let tc = g.sub(one, t_flat);
    let pos = g.mul(t_flat, ln_p);
    let negt = g.mul(tc, ln_q);
    let s = g.add(pos, negt);
    let total = g.mean_all(s);
    Ok(g.scale(total, -1.0))
}

/// Weighted episode objective: `alpha * mean(support BCE over shots) +
/// beta * query BCE`.
pub fn episode_loss(
    g: &mut Graph,
    support_losses: &[NodeId],
    query_loss: NodeId,
    alpha: f64,
    beta: f64,
) -> NodeId {
    assert!(!support_losses.is_empty(), "episode needs at least one support shot");
    let mut acc = support_losses[0];
    for &l in &support_losses[1..] {
        acc = g.add(acc, l);
    }
    let support_mean = g.scale(acc, alpha / support_losses.len() as f64);
    let query_term = g.scale(query_loss, beta);
    g.add(support_mean, query_term)
}
