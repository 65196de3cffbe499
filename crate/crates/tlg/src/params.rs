//! Named learnable-parameter store shared by all modules.
//!
//! Modules register parameters at construction and hold [`ParamId`] handles;
//! each forward pass binds parameters into a fresh graph on first use. The
//! store is the single source of truth for optimization, counting, and
//! checkpointing. Frozen components (backbone, text encoder) never enter it.

use ndarray::prelude::*;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Result, TlgError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-style fan-in scaled Gaussian weight matrix.
    pub fn add_kaiming2(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let std = (2.0 / cols as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| gaussian(rng) * std);
        self.add(name, w.into_dyn())
    }

    /// Kaiming-scaled conv kernel (cout, cin, k, k) plus a zero bias.
    pub fn add_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ParamId, ParamId) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Array4::from_shape_fn((cout, cin, k, k), |_| gaussian(rng) * std);
        let wid = self.add(format!("{name}.weight"), w.into_dyn());
        let bid = self.add(format!("{name}.bias"), Array1::<f64>::zeros(cout).into_dyn());
        (wid, bid)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total learnable element count.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Flat view of every element, for perturbation-style checks.
    pub fn flat_len(&self) -> usize {
        self.element_count()
    }

    pub fn get_flat(&self, mut index: usize) -> (ParamId, usize) {
        for (i, p) in self.params.iter().enumerate() {
            if index < p.value.len() {
                return (ParamId(i), index);
            }
            index -= p.value.len();
        }
        panic!("flat index out of range");
    }

    pub fn perturb(&mut self, id: ParamId, offset: usize, delta: f64) {
        self.params[id.0].value.as_slice_mut().unwrap()[offset] += delta;
    }

    /// Serialize every parameter to a byte buffer (name, shape, little-endian
    /// f64 data). Bit-exact by construction.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.value.ndim() as u64).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Restore values saved by [`ParamStore::to_bytes`] into a store with the
    /// same registration order.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut cur = Cursor { bytes, pos: 0 };
        let n = cur.u64()? as usize;
        if n != self.params.len() {
            return Err(TlgError::Checkpoint(format!(
                "checkpoint has {n} parameters, model has {}",
                self.params.len()
            )));
        }
        for i in 0..n {
            let name_len = cur.u64()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| TlgError::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            if name != self.params[i].name {
                return Err(TlgError::Checkpoint(format!(
                    "parameter {i} name mismatch: checkpoint {name}, model {}",
                    self.params[i].name
                )));
            }
            let ndim = cur.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            if shape != self.params[i].value.shape() {
                return Err(TlgError::Checkpoint(format!(
                    "parameter {name} shape mismatch: checkpoint {:?}, model {:?}",
                    shape,
                    self.params[i].value.shape()
                )));
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(cur.f64()?);
            }
            self.params[i].value = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TlgError::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Binds store parameters into one graph, each at most once per forward pass.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<Option<NodeId>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder { store, bound: vec![None; store.len()] }
    }

    pub fn node(&mut self, g: &mut Graph, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = g.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(n);
        n
    }

    /// Collect per-parameter gradients after a backward pass.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<ArrayD<f64>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                slot.and_then(|node| grads.try_get(node).cloned()).or_else(|| {
                    // parameter bound but unused, or not bound at all
                    self.bound[i].map(|_| ArrayD::zeros(IxDyn(self.store.params[i].value.shape())))
                })
            })
            .collect()
    }
}
