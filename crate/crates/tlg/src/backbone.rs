//! Frozen hierarchical feature extractor exposing thirteen taps (0-12).
//!
//! Taps are partitioned into low/middle/high levels with a fixed stride
//! schedule: taps 0-3 at stride 4, taps 4-9 at stride 8, taps 10-12 at
//! stride 16. The shipped [`ToyBackbone`] is a seeded, never-trained conv
//! pyramid; real pretrained extractors attach through [`FeatureExtractor`].
//!
//! Expected channel counts when adapting real backbones: a ResNet50-style
//! adapter would expose its 13 bottleneck-ish stages with channels around
//! (256, 512, 1024) for low/middle/high; a VGG16 adapter maps the 13 conv
//! layers directly with channels (64-128, 256-512, 512). The tap-to-layer
//! mapping is the adapter implementer's choice and must be documented there.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TlgError};

pub const NUM_TAPS: usize = 13;

/// Level partition over tap indices: low = {0..3}, middle = {4..9},
/// high = {10..12}. Total and disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Middle,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Middle, Level::High];

    pub fn of_tap(tap: usize) -> Result<Level> {
        match tap {
            0..=3 => Ok(Level::Low),
            4..=9 => Ok(Level::Middle),
            10..=12 => Ok(Level::High),
            _ => Err(TlgError::Config(format!("tap index {tap} outside 0..=12"))),
        }
    }

    pub fn taps(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Level::Low => 0..=3,
            Level::Middle => 4..=9,
            Level::High => 10..=12,
        }
    }

    /// Channel-reduction exponent used by the aggregation projection.
    pub fn alpha(self) -> u32 {
        match self {
            Level::Low => 4,
            Level::Middle => 2,
            Level::High => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::Low => 0,
            Level::Middle => 1,
            Level::High => 2,
        }
    }
}

/// Static description of one tap's output for a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapSpec {
    pub tap_index: usize,
    pub level: Level,
    pub channels: usize,
    pub spatial: (usize, usize),
}

/// One tap triple per branch, exactly one index per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSelection {
    pub support_layers: [usize; 3],
    pub query_layers: [usize; 3],
}

impl LayerSelection {
    /// The default heterogeneous configuration: support from {3, 9, 12},
    /// query from {0, 4, 10}.
    pub fn heterogeneous_default() -> Self {
        LayerSelection { support_layers: [3, 9, 12], query_layers: [0, 4, 10] }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, triple) in [("support", &self.support_layers), ("query", &self.query_layers)] {
            for (slot, &tap) in triple.iter().enumerate() {
                let level = Level::of_tap(tap)?;
                if level.index() != slot {
                    return Err(TlgError::Config(format!(
                        "{name}_layers[{slot}] = {tap} is a {level:?} tap; expected one index per level in (low, middle, high) order"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        LayerSelection { support_layers: self.query_layers, query_layers: self.support_layers }
    }

    /// All taps any branch needs, plus the transport-residual taps.
    pub fn requested_taps(&self, extra: &[usize]) -> BTreeSet<usize> {
        self.support_layers
            .iter()
            .chain(self.query_layers.iter())
            .chain(extra.iter())
            .cloned()
            .collect()
    }
}

/// Ordered tap outputs for one image.
#[derive(Debug, Clone)]
pub struct FeatureTapSet {
    maps: BTreeMap<usize, Array3<f64>>,
}

impl FeatureTapSet {
    pub fn get(&self, tap: usize) -> Result<&Array3<f64>> {
        self.maps
            .get(&tap)
            .ok_or_else(|| TlgError::Config(format!("tap {tap} was not requested from the backbone")))
    }

    pub fn taps(&self) -> impl Iterator<Item = (usize, &Array3<f64>)> {
        self.maps.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Attachment point for feature extractors. Implementations must be pure
/// functions of (weights, image): deterministic and safe for concurrent use.
pub trait FeatureExtractor: Send + Sync {
    /// Extract the requested taps for a (3, H, W) image in [0,1].
    fn extract(&self, image: &Array3<f64>, requested: &BTreeSet<usize>) -> Result<FeatureTapSet>;

    /// Declared output description of `tap` for a square input of `input_size`.
    fn tap_spec(&self, tap: usize, input_size: usize) -> Result<TapSpec>;

    /// Input sides must be divisible by this so the canonical grid and the
    /// low/middle taps stay integral; deeper taps floor-divide.
    fn required_divisor(&self) -> usize {
        8
    }
}

pub fn stride_of_tap(tap: usize) -> Result<usize> {
    Ok(match Level::of_tap(tap)? {
        Level::Low => 4,
        Level::Middle => 8,
        Level::High => 16,
    })
}

struct ConvLayer {
    weight: Array4<f64>, // (cout, cin, k, k)
    bias: Array1<f64>,
    stride: usize,
}

/// Seeded, never-trained conv pyramid with a ResNet50-style channel/stride
/// schedule: channels grow and spatial shrinks across levels.
pub struct ToyBackbone {
    layers: Vec<ConvLayer>,
    channels: [usize; 3],
    pub seed: u64,
    pub width_multiplier: usize,
}

impl ToyBackbone {
    pub fn new(seed: u64, width_multiplier: usize) -> Result<Self> {
        if width_multiplier < 1 {
            return Err(TlgError::Config("width_multiplier must be >= 1".into()));
        }
        let c_low = 16 * width_multiplier;
        let c_mid = 32 * width_multiplier;
        let c_high = 64 * width_multiplier;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(NUM_TAPS);
        let make = |cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let weight = Array4::from_shape_fn((cout, cin, k, k), |_| {
                // Box-Muller from two uniforms keeps the generator dependency-free
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            });
            ConvLayer { weight, bias: Array1::zeros(cout), stride }
        };
        layers.push(make(3, c_low, 5, 4, &mut rng)); // tap 0, stride 4
        for _ in 1..=3 {
            layers.push(make(c_low, c_low, 3, 1, &mut rng)); // taps 1-3
        }
        layers.push(make(c_low, c_mid, 3, 2, &mut rng)); // tap 4, stride 8
        for _ in 5..=9 {
            layers.push(make(c_mid, c_mid, 3, 1, &mut rng)); // taps 5-9
        }
        layers.push(make(c_mid, c_high, 3, 2, &mut rng)); // tap 10, stride 16
        for _ in 11..=12 {
            layers.push(make(c_high, c_high, 3, 1, &mut rng)); // taps 11-12
        }
        Ok(ToyBackbone { layers, channels: [c_low, c_mid, c_high], seed, width_multiplier })
    }

    pub fn channels_of_level(&self, level: Level) -> usize {
        self.channels[level.index()]
    }

    /// Frozen weights never enter the parameter store; their element count is
    /// still interesting for the total-vs-learnable accounting.
    pub fn frozen_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

impl FeatureExtractor for ToyBackbone {
    fn extract(&self, image: &Array3<f64>, requested: &BTreeSet<usize>) -> Result<FeatureTapSet> {
        let size = image.shape()[1];
        if image.shape()[0] != 3 || image.shape()[2] != size {
            return Err(TlgError::Shape(format!(
                "backbone expects square (3, H, H) images, got {:?}",
                image.shape()
            )));
        }
        if size % self.required_divisor() != 0 {
            return Err(TlgError::Config(format!(
                "image size {size} not divisible by {}",
                self.required_divisor()
            )));
        }
        let Some(&max_tap) = requested.iter().max() else {
            return Ok(FeatureTapSet { maps: BTreeMap::new() });
        };
        if max_tap >= NUM_TAPS {
            return Err(TlgError::Config(format!("tap index {max_tap} outside 0..=12")));
        }
        let mut maps = BTreeMap::new();
        let mut current = image.clone();
        for (tap, layer) in self.layers.iter().enumerate().take(max_tap + 1) {
            current = conv2d_plain(&current, &layer.weight, &layer.bias, layer.stride);
            current.mapv_inplace(|v| v.max(0.0));
            if requested.contains(&tap) {
                maps.insert(tap, current.clone());
            }
        }
        Ok(FeatureTapSet { maps })
    }

    fn tap_spec(&self, tap: usize, input_size: usize) -> Result<TapSpec> {
        let level = Level::of_tap(tap)?;
        let s = input_size / stride_of_tap(tap)?;
        Ok(TapSpec {
            tap_index: tap,
            level,
            channels: self.channels_of_level(level),
            spatial: (s, s),
        })
    }
}

/// Plain strided convolution with same-ish padding (k/2 each side) via
/// im2col + matmul. Used only by the frozen backbone; the differentiable
/// path lives in [`crate::autodiff`].
pub(crate) fn conv2d_plain(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = h / stride;
    let ow = wd / stride;
    let mut col = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let yy = (oy * stride + ky) as i64 - ph as i64;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as i64 - pw as i64;
                        if xx < 0 || xx >= wd as i64 {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, yy as usize, xx as usize]];
                    }
                }
            }
        }
    }
    let wmat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut out = wmat.dot(&col);
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
        row += bias;
    }
    out.into_shape_with_order((cout, oh, ow)).unwrap()
}
