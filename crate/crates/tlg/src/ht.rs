//! Heterogeneous transport: contextual self-attention over aggregated
//! features, Sinkhorn optimal-transport denoising against a foreground
//! similarity cost, and branch-specific pooled residuals.
//!
//! Two Sinkhorn paths exist on purpose. Training unrolls a fixed number of
//! scaling iterations inside the autodiff graph; evaluation runs the solver
//! to convergence outside the graph and inserts the coupling as a constant.

use ndarray::prelude::*;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::HtConfig;
use crate::error::{Result, TlgError};
use crate::ha::{raw_correlation, Branch};
use crate::params::{Binder, ParamId, ParamStore};

// ---- Sinkhorn solver (evaluation path) ----

/// Entropy-regularized coupling with prescribed marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub lambda: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_violation: f64,
    /// Primal entropic objective recorded after every full iteration.
    pub objective_series: Vec<f64>,
    /// Dual block-ascent objective (shifted to converge to the primal
    /// optimum) after every full iteration. Nondecreasing by construction:
    /// each scaling update exactly maximizes one dual block.
    pub dual_series: Vec<f64>,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.coupling, &self.row_marginal, &self.col_marginal)
    }
}

pub fn marginal_violation(tau: &Array2<f64>, r: &Array1<f64>, c: &Array1<f64>) -> f64 {
    let rows = tau.sum_axis(Axis(1));
    let cols = tau.sum_axis(Axis(0));
    let rv = rows.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cv = cols.iter().zip(c.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    rv.max(cv)
}

/// Primal entropic objective `<tau, cost> - H(tau)/lambda`.
pub fn entropic_objective(tau: &Array2<f64>, cost: &Array2<f64>, lambda: f64) -> f64 {
    let transport: f64 = tau.iter().zip(cost.iter()).map(|(t, c)| t * c).sum();
    let entropy: f64 = tau.iter().filter(|&&t| t > 0.0).map(|&t| -t * t.ln()).sum();
    transport - entropy / lambda
}

/// Dual objective of the scaling iteration, shifted by 1/lambda so its limit
/// equals the primal optimum.
fn dual_objective(
    u: &Array1<f64>,
    v: &Array1<f64>,
    kernel: &Array2<f64>,
    r: &Array1<f64>,
    c: &Array1<f64>,
    lambda: f64,
) -> f64 {
    let log_terms: f64 = r.iter().zip(u.iter()).map(|(ri, ui)| ri * ui.ln()).sum::<f64>()
        + c.iter().zip(v.iter()).map(|(ci, vi)| ci * vi.ln()).sum::<f64>();
    let mass = u.dot(&kernel.dot(v));
    (log_terms - mass) / lambda + 1.0 / lambda
}

fn validate_sinkhorn_inputs(
    cost: &Array2<f64>,
    lambda: f64,
    r: &Array1<f64>,
    c: &Array1<f64>,
) -> Result<()> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(TlgError::DataValidation("cost matrix contains non-finite values".into()));
    }
    if lambda <= 0.0 {
        return Err(TlgError::Config(format!("sinkhorn lambda must be positive, got {lambda}")));
    }
    if r.len() != cost.nrows() || c.len() != cost.ncols() {
        return Err(TlgError::Shape(format!(
            "marginals ({}, {}) do not match cost {:?}",
            r.len(),
            c.len(),
            cost.dim()
        )));
    }
    for (name, m) in [("row", r), ("col", c)] {
        if m.iter().any(|&v| v <= 0.0) {
            return Err(TlgError::DataValidation(format!("{name} marginal has non-positive mass")));
        }
        if (m.sum() - 1.0).abs() > 1e-9 {
            return Err(TlgError::DataValidation(format!(
                "{name} marginal sums to {}, expected 1",
                m.sum()
            )));
        }
    }
    Ok(())
}

/// Sinkhorn with uniform marginals.
pub fn sinkhorn(cost: &Array2<f64>, lambda: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    let r = Array1::from_elem(cost.nrows(), 1.0 / cost.nrows() as f64);
    let c = Array1::from_elem(cost.ncols(), 1.0 / cost.ncols() as f64);
    sinkhorn_with_marginals(cost, lambda, &r, &c, max_iters, tol)
}

/// Standard-domain alternating scaling; switches to log-domain updates as
/// soon as a scaling vector degenerates (underflow producing a zero or
/// non-finite entry). Non-convergence is a warning recorded on the plan, not
/// a hard error.
pub fn sinkhorn_with_marginals(
    cost: &Array2<f64>,
    lambda: f64,
    r: &Array1<f64>,
    c: &Array1<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    validate_sinkhorn_inputs(cost, lambda, r, c)?;
    let kernel = cost.mapv(|v| (-lambda * v).exp());
    let kt = kernel.t().to_owned();
    let mut u = Array1::<f64>::ones(r.len());
    let mut v = Array1::<f64>::ones(c.len());
    let mut objective_series = Vec::new();
    let mut dual_series = Vec::new();
    let mut iterations_used = 0;
    let mut violation = f64::INFINITY;
    for it in 0..max_iters {
        let kv = kernel.dot(&v);
        if kv.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return sinkhorn_log(cost, lambda, r, c, max_iters, tol);
        }
        u = r / &kv;
        let ktu = kt.dot(&u);
        if ktu.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return sinkhorn_log(cost, lambda, r, c, max_iters, tol);
        }
        v = c / &ktu;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return sinkhorn_log(cost, lambda, r, c, max_iters, tol);
        }
        iterations_used = it + 1;
        let tau = scaled_coupling(&kernel, &u, &v);
        objective_series.push(entropic_objective(&tau, cost, lambda));
        dual_series.push(dual_objective(&u, &v, &kernel, r, c, lambda));
        violation = marginal_violation(&tau, r, c);
        if violation < tol {
            break;
        }
    }
    let coupling = scaled_coupling(&kernel, &u, &v);
    let converged = violation < tol;
    if !converged {
        eprintln!(
            "warning: sinkhorn did not converge in {max_iters} iterations (marginal violation {violation:.3e})"
        );
    }
    Ok(TransportPlan {
        coupling,
        row_marginal: r.clone(),
        col_marginal: c.clone(),
        lambda,
        iterations_used,
        converged,
        final_violation: violation,
        objective_series,
        dual_series,
    })
}

fn scaled_coupling(kernel: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    let mut tau = kernel.clone();
    for (mut row, &ui) in tau.rows_mut().into_iter().zip(u.iter()) {
        row *= ui;
    }
    for (mut col, &vj) in tau.columns_mut().into_iter().zip(v.iter()) {
        col *= vj;
    }
    tau
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on dual potentials; immune to kernel underflow.
pub fn sinkhorn_log(
    cost: &Array2<f64>,
    lambda: f64,
    r: &Array1<f64>,
    c: &Array1<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    validate_sinkhorn_inputs(cost, lambda, r, c)?;
    let (n, m) = cost.dim();
    let logk = cost.mapv(|v| -lambda * v);
    let log_r = r.mapv(f64::ln);
    let log_c = c.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut objective_series = Vec::new();
    let mut dual_series = Vec::new();
    let mut iterations_used = 0;
    let mut violation = f64::INFINITY;
    let coupling_of = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((n, m), |(i, j)| (logk[[i, j]] + f[i] + g[j]).exp())
    };
    for it in 0..max_iters {
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| logk[[i, j]] + g[j]));
            f[i] = log_r[i] - lse;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| logk[[i, j]] + f[i]));
            g[j] = log_c[j] - lse;
        }
        iterations_used = it + 1;
        let tau = coupling_of(&f, &g);
        objective_series.push(entropic_objective(&tau, cost, lambda));
        let mass: f64 = tau.sum();
        let log_terms: f64 = r.iter().zip(f.iter()).map(|(ri, fi)| ri * fi).sum::<f64>()
            + c.iter().zip(g.iter()).map(|(ci, gi)| ci * gi).sum::<f64>();
        dual_series.push((log_terms - mass) / lambda + 1.0 / lambda);
        violation = marginal_violation(&tau, r, c);
        if violation < tol {
            break;
        }
    }
    let coupling = coupling_of(&f, &g);
    let converged = violation < tol;
    if !converged {
        eprintln!(
            "warning: log-domain sinkhorn did not converge in {max_iters} iterations (marginal violation {violation:.3e})"
        );
    }
    Ok(TransportPlan {
        coupling,
        row_marginal: r.clone(),
        col_marginal: c.clone(),
        lambda,
        iterations_used,
        converged,
        final_violation: violation,
        objective_series,
        dual_series,
    })
}

/// Fixed-iteration Sinkhorn built from graph ops so gradients flow through
/// the scaling loop. Uniform marginals; returns the (n, n) coupling node.
pub fn sinkhorn_unrolled(g: &mut Graph, cost: NodeId, lambda: f64, iters: usize) -> NodeId {
    let n = g.shape(cost)[0];
    assert_eq!(g.shape(cost), &[n, n], "unrolled sinkhorn expects a square cost");
    let neg = g.scale(cost, -lambda);
    let kernel = g.exp(neg);
    let kernel_t = g.transpose2(kernel);
    let r = g.leaf(Array2::from_elem((n, 1), 1.0 / n as f64).into_dyn());
    let c = g.leaf(Array2::from_elem((n, 1), 1.0 / n as f64).into_dyn());
    let mut v = g.leaf(Array2::ones((n, 1)).into_dyn());
    let mut u;
    let mut last_u = None;
    for _ in 0..iters {
        let kv = g.matmul(kernel, v);
        u = g.div(r, kv);
        let ktu = g.matmul(kernel_t, u);
        v = g.div(c, ktu);
        last_u = Some(u);
    }
    let u = last_u.expect("at least one unrolled iteration");
    let scaled_rows = g.mul(kernel, u); // (n,1) broadcast over rows
    let vt = g.transpose2(v);
    g.mul(scaled_rows, vt) // (1,n) broadcast over columns
}

// ---- foreground cost ----

/// Pairwise transport cost `1 - clamp(cosine, 0)` between spatial positions
/// of a (C, H, W) feature node. Zero-norm positions cost 1 against everything.
pub fn foreground_cost(g: &mut Graph, feature: NodeId) -> NodeId {
    let sim = raw_correlation(g, feature, feature);
    let one = g.leaf(ArrayD::ones(ndarray::IxDyn(g.shape(sim))));
    let cost = g.sub(one, sim);
    // cosine can exceed 1 by a few ulps; keep the contract cost in [0, 1]
    g.clamp(cost, 0.0, 1.0)
}

/// Plain (non-graph) variant for the evaluation path and for oracles.
pub fn foreground_cost_plain(feature: &Array3<f64>) -> Result<Array2<f64>> {
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(TlgError::DataValidation("feature contains non-finite values".into()));
    }
    let (c, h, w) = feature.dim();
    let n = h * w;
    let flat = feature.to_shape((c, n)).unwrap();
    let mut cost = Array2::<f64>::zeros((n, n));
    let norms: Vec<f64> = (0..n)
        .map(|i| flat.column(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let sim = if norms[i] > 0.0 && norms[j] > 0.0 {
                (flat.column(i).dot(&flat.column(j)) / (norms[i] * norms[j])).max(0.0)
            } else {
                0.0
            };
            cost[[i, j]] = (1.0 - sim).clamp(0.0, 1.0);
        }
    }
    Ok(cost)
}

// ---- attention ----

pub struct AttentionParams {
    pub(crate) wq: ParamId, // (C, d_k)
    pub(crate) wk: ParamId, // (C, d_k)
    pub(crate) wv: ParamId, // (C, C)
    pub(crate) d_k: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        d_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AttentionParams {
            wq: store.add_kaiming2(format!("{name}.wq"), channels, d_k, rng),
            wk: store.add_kaiming2(format!("{name}.wk"), channels, d_k, rng),
            wv: store.add_kaiming2(format!("{name}.wv"), channels, channels, rng),
            d_k,
        }
    }
}

/// Single-head scaled dot-product self-attention over spatial positions.
/// Input and output are (C, HW); also returns the (HW, HW) attention matrix
/// whose rows sum to 1.
pub fn cross_attention(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    a_flat: NodeId,
    params: &AttentionParams,
) -> (NodeId, NodeId) {
    let x = g.transpose2(a_flat); // (HW, C) tokens
    let wq = binder.node(g, params.wq);
    let wk = binder.node(g, params.wk);
    let wv = binder.node(g, params.wv);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let kt = g.transpose2(k);
    let logits = g.matmul(q, kt);
    let scaled = g.scale(logits, 1.0 / (params.d_k as f64).sqrt());
    let attn = g.softmax(scaled, 1);
    let out = g.matmul(attn, v); // (HW, C)
    (g.transpose2(out), attn)
}

// ---- transport denoising ----

/// Re-weight an attended feature by each position's normalized outgoing mass
/// across low-cost edges: positions whose mass routes only through high-cost
/// edges are suppressed toward zero. The low-cost mask is a constant derived
/// from the current cost values; gradients flow through the plan and feature.
pub fn ot_denoise(
    g: &mut Graph,
    attended: NodeId,
    plan: NodeId,
    cost_values: &Array2<f64>,
    cost_threshold: f64,
) -> NodeId {
    let n = cost_values.nrows();
    assert_eq!(g.shape(plan), &[n, n]);
    assert_eq!(g.shape(attended)[1], n, "attended positions must match the plan");
    let mask = cost_values.mapv(|v| if v < cost_threshold { 1.0 } else { 0.0 });
    let mask = g.leaf(mask.into_dyn());
    let kept = g.mul(plan, mask);
    let row_mass = g.sum_axis(kept, 1, true); // (n, 1)
    // normalize by the uniform row marginal 1/n
    let weights = g.scale(row_mass, n as f64);
    let wt = g.transpose2(weights); // (1, n)
    g.mul(attended, wt)
}

// ---- heterogeneous residuals ----

/// Every 3rd channel starting at 0; always at least one channel.
pub fn select_third(channels: usize) -> Vec<usize> {
    (0..channels).step_by(3).collect()
}

struct ResidualProj {
    weight: ParamId, // (C_out, C_sel); no bias so a zero tap contributes nothing
}

/// Transport-module parameters for both branches.
pub struct HtModule {
    attn: [AttentionParams; 2],
    residual: [ResidualProj; 2],
    pub lambda: f64,
    pub unrolled_iters: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub cost_threshold: f64,
    pub residual_taps: [usize; 2],
    pub channels: usize,
    pub grid: usize,
}

impl HtModule {
    /// `tap_channels` are the raw channel counts of the support/query residual
    /// taps, before the 1/3 selection.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &HtConfig,
        channels: usize,
        tap_channels: [usize; 2],
        grid: usize,
    ) -> Self {
        let d_k = if cfg.d_k == 0 { channels } else { cfg.d_k };
        let attn = [
            AttentionParams::new(store, "ht.support.attn", channels, d_k, rng),
            AttentionParams::new(store, "ht.query.attn", channels, d_k, rng),
        ];
        let residual = [Branch::Support, Branch::Query].map(|b| ResidualProj {
            weight: store.add_kaiming2(
                format!("ht.{}.residual.weight", b.name()),
                channels,
                select_third(tap_channels[b.index()]).len(),
                rng,
            ),
        });
        HtModule {
            attn,
            residual,
            lambda: cfg.lambda,
            unrolled_iters: cfg.unrolled_iters,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            cost_threshold: cfg.cost_threshold,
            residual_taps: [cfg.residual_tap_support, cfg.residual_tap_query],
            channels,
            grid,
        }
    }

    pub fn attention(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        a_flat: NodeId,
        branch: Branch,
    ) -> (NodeId, NodeId) {
        cross_attention(g, binder, a_flat, &self.attn[branch.index()])
    }

    /// Pooled heterogeneous residual: select a third of the tap's channels,
    /// pool (average for support, max for query), project to the transport
    /// width, resize to the grid, and add onto the denoised feature.
    pub fn residual(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        ot_chw: NodeId,
        tap_feature: NodeId,
        branch: Branch,
    ) -> NodeId {
        let c_tap = g.shape(tap_feature)[0];
        let sel = g.select_axis0(tap_feature, &select_third(c_tap));
        let pooled = match branch {
            Branch::Support => g.avg_pool3x3(sel),
            Branch::Query => g.max_pool3x3(sel),
        };
        let (c_sel, h, w) = {
            let s = g.shape(pooled);
            (s[0], s[1], s[2])
        };
        let flat = g.reshape(pooled, &[c_sel, h * w]);
        let wn = binder.node(g, self.residual[branch.index()].weight);
        let projected = g.matmul(wn, flat);
        let chw = g.reshape(projected, &[self.channels, h, w]);
        let sized = if (h, w) == (self.grid, self.grid) {
            chw
        } else {
            g.bilinear_resize(chw, self.grid, self.grid)
        };
        g.add(ot_chw, sized)
    }
}
