//! Sparse coding: a reference iterative shrinkage-thresholding solver and the
//! unrolled adapter built from the same update structure.
//!
//! The solver minimizes ||x - D a||_F^2 + lambda * ||a||_1 by iterating
//! a <- shrink(a + 2 step D^T (x - D a), step * lambda) from a = 0. One
//! adapter stage computes a <- a_prev + P (x - D a_prev), soft-thresholds with
//! learned per-row thresholds, averages the thresholded and unthresholded
//! codes (a learnable relaxation of the prox step), optionally collapses the
//! step axis with temporal downsampling attention, and synthesizes mapped
//! features D' a. With P tied to 2 step D^T, thresholds tied to step * lambda
//! and the skip average disabled, a chain of K adapters reproduces K solver
//! iterations exactly; that equivalence is the correctness oracle for the
//! trainable path.

use ndarray::{Array1, Array2, ArrayD};

use crate::graph::{Graph, PoolKind, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::{CoreError, Result};

/// Elementwise sign(x) * max(|x| - theta, 0).
pub fn soft_threshold(x: &ArrayD<f64>, theta: f64) -> Result<ArrayD<f64>> {
    if theta < 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "negative threshold {theta}"
        )));
    }
    Ok(x.mapv(|v| v.signum() * (v.abs() - theta).max(0.0)))
}

/// ||x - D a||_F^2 + lambda * ||a||_1 over all columns.
pub fn lasso_objective(
    x: &Array2<f64>,
    d: &Array2<f64>,
    a: &Array2<f64>,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(CoreError::InvalidArgument(format!("negative lambda {lambda}")));
    }
    if d.nrows() != x.nrows() || d.ncols() != a.nrows() || a.ncols() != x.ncols() {
        return Err(CoreError::InvalidArgument(format!(
            "shape mismatch: x {:?}, d {:?}, a {:?}",
            x.shape(),
            d.shape(),
            a.shape()
        )));
    }
    let r = x - &d.dot(a);
    Ok(r.iter().map(|v| v * v).sum::<f64>() + lambda * a.iter().map(|v| v.abs()).sum::<f64>())
}

/// Largest eigenvalue of D^T D (squared spectral norm of D), by deterministic
/// power iteration.
pub fn gram_spectral_max(d: &Array2<f64>) -> f64 {
    let l = d.ncols();
    if l == 0 {
        return 0.0;
    }
    let mut v = Array1::<f64>::from_elem(l, 1.0 / (l as f64).sqrt());
    for i in 0..300 {
        let mut w = d.t().dot(&d.dot(&v));
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            // deterministic restart off the current direction
            w = Array1::from_shape_fn(l, |j| if j == i % l { 1.0 } else { 0.0 });
        } else {
            w.mapv_inplace(|x| x / n);
        }
        v = w;
    }
    let dv = d.dot(&v);
    dv.iter().map(|x| x * x).sum::<f64>()
}

/// A safe solver step: 0.9 / (2 * sigma_max(D^T D)).
pub fn default_step(d: &Array2<f64>) -> f64 {
    0.9 / (2.0 * gram_spectral_max(d).max(f64::MIN_POSITIVE))
}

/// Max-norm violation of the LASSO stationarity conditions at `a`.
pub fn kkt_residual(x: &Array2<f64>, d: &Array2<f64>, a: &Array2<f64>, lambda: f64) -> f64 {
    let g = d.t().dot(&(d.dot(a) - x)).mapv(|v| 2.0 * v);
    let mut worst: f64 = 0.0;
    for (idx, &ai) in a.indexed_iter() {
        let gi = g[idx];
        let viol = if ai != 0.0 {
            (gi + lambda * ai.signum()).abs()
        } else {
            (gi.abs() - lambda).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

#[derive(Clone, Debug)]
pub struct IstaTrace {
    /// Objective value at the initial a = 0 and after every iteration.
    pub objectives: Vec<f64>,
    pub kkt_residual: f64,
    pub code: Array2<f64>,
}

/// Reference solver. Requires step <= 1 / (2 sigma_max(D^T D)); the objective
/// trace is checked for descent and an increase beyond rounding tolerance
/// reports a step-size error.
pub fn ista_reference_solve(
    x: &Array2<f64>,
    d: &Array2<f64>,
    lambda: f64,
    step: f64,
    iters: usize,
) -> Result<IstaTrace> {
    if lambda < 0.0 {
        return Err(CoreError::InvalidArgument(format!("negative lambda {lambda}")));
    }
    if !(step > 0.0) {
        return Err(CoreError::InvalidArgument("step must be positive".into()));
    }
    if d.nrows() != x.nrows() {
        return Err(CoreError::InvalidArgument(format!(
            "shape mismatch: x {:?}, d {:?}",
            x.shape(),
            d.shape()
        )));
    }
    let sigma = gram_spectral_max(d);
    if step > (1.0 + 1e-9) / (2.0 * sigma) {
        return Err(CoreError::InvalidArgument(format!(
            "step {step} exceeds 1/(2 sigma_max(D^T D)) = {}",
            1.0 / (2.0 * sigma)
        )));
    }
    let (l, n) = (d.ncols(), x.ncols());
    let mut a = Array2::<f64>::zeros((l, n));
    let mut objectives = Vec::with_capacity(iters + 1);
    objectives.push(lasso_objective(x, d, &a, lambda)?);
    let theta = step * lambda;
    for _ in 0..iters {
        let grad_term = d.t().dot(&(x - &d.dot(&a)));
        let u = &a + &grad_term.mapv(|v| 2.0 * step * v);
        a = u.mapv(|v| v.signum() * (v.abs() - theta).max(0.0));
        let obj = lasso_objective(x, d, &a, lambda)?;
        let prev = *objectives.last().unwrap();
        if obj > prev + 1e-9 * (1.0 + prev.abs()) {
            return Err(CoreError::Numerical(format!(
                "objective increased {prev} -> {obj}: step size too large"
            )));
        }
        objectives.push(obj);
    }
    let kkt = kkt_residual(x, d, &a, lambda);
    Ok(IstaTrace { objectives, kkt_residual: kkt, code: a })
}

/// Initial code a0 = P0 x0, applied per step for multi-step inputs.
pub fn init_code(g: &mut Graph, p0: Var, x0: Var) -> Var {
    g.linear(p0, x0)
}

/// Temporal downsampling attention parameters: one shared linear map applied
/// to adaptive-average and adaptive-max pooled descriptors of each step.
#[derive(Clone, Debug)]
pub struct TdaParams {
    pub w: ParamId,
    pub b: ParamId,
    pub pool_len: usize,
}

pub fn new_tda(
    store: &mut ParamStore,
    name: &str,
    pool_len: usize,
    rng: &mut impl rand::Rng,
) -> TdaParams {
    let w = store.add(
        format!("{name}.w"),
        ParamGroup::Tda,
        crate::params::trunc_normal(&[pool_len], 0.02, rng),
    );
    let b = store.add(
        format!("{name}.b"),
        ParamGroup::Tda,
        Array1::<f64>::zeros(1).into_dyn(),
    );
    TdaParams { w, b, pool_len }
}

/// Collapse a (T, L, N) code to (L, N): alpha_t = sigmoid(shared_linear(avg
/// pooled) + shared_linear(max pooled)), output = sum_t alpha_t a_t. Emits
/// exactly T attention logits; each alpha_t lies in (0, 1).
pub fn tda_forward(g: &mut Graph, store: &ParamStore, tda: &TdaParams, a: Var) -> Result<Var> {
    let shape = g.value(a).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "tda expects (T, L, N), got {shape:?}"
        )));
    }
    let t = shape[0];
    let avg = g.pool_desc(a, tda.pool_len, PoolKind::Avg);
    let mx = g.pool_desc(a, tda.pool_len, PoolKind::Max);
    let w = g.param(store, tda.w);
    let b = g.param(store, tda.b);
    let w_col = g.reshape(w, &[tda.pool_len, 1]);
    let la = g.matmul2(avg, w_col);
    let lm = g.matmul2(mx, w_col);
    let logits = g.add(la, lm);
    let logits = g.add(logits, b);
    let alpha = g.sigmoid(logits);
    let alpha3 = g.reshape(alpha, &[t, 1, 1]);
    let weighted = g.mul(a, alpha3);
    let mean = g.mean_axis0(weighted);
    Ok(g.scale(mean, t as f64))
}

/// Attention logits for inspection (same computation as `tda_forward`).
pub fn tda_alphas(g: &mut Graph, store: &ParamStore, tda: &TdaParams, a: Var) -> Result<Var> {
    let shape = g.value(a).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "tda expects (T, L, N), got {shape:?}"
        )));
    }
    let t = shape[0];
    let avg = g.pool_desc(a, tda.pool_len, PoolKind::Avg);
    let mx = g.pool_desc(a, tda.pool_len, PoolKind::Max);
    let w = g.param(store, tda.w);
    let b = g.param(store, tda.b);
    let w_col = g.reshape(w, &[tda.pool_len, 1]);
    let la = g.matmul2(avg, w_col);
    let lm = g.matmul2(mx, w_col);
    let logits = g.add(la, lm);
    let logits = g.add(logits, b);
    let alpha = g.sigmoid(logits);
    Ok(g.reshape(alpha, &[t]))
}

/// One unrolled adapter: update matrix P (L, M_src), analysis dictionary D
/// (M_src, L), synthesis dictionary D' (M_dst, L), unconstrained thresholds
/// mapped through |.| at use, optional TDA for step collapse.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub p: ParamId,
    pub d: ParamId,
    pub d_syn: ParamId,
    pub theta_raw: ParamId,
    pub tda: Option<TdaParams>,
}

pub struct AdapterInit<'a> {
    pub name: &'a str,
    pub m_src: usize,
    pub m_dst: usize,
    pub code_dim: usize,
    /// Pooling length for TDA; None disables step collapse.
    pub tda_pool_len: Option<usize>,
}

pub fn new_adapter(
    store: &mut ParamStore,
    init: &AdapterInit<'_>,
    rng: &mut impl rand::Rng,
) -> AdapterParams {
    let l = init.code_dim;
    let p = store.add(
        format!("{}.p", init.name),
        ParamGroup::Adapter,
        crate::params::trunc_normal(&[l, init.m_src], 0.02, rng),
    );
    let d = store.add(
        format!("{}.d", init.name),
        ParamGroup::Adapter,
        crate::params::trunc_normal(&[init.m_src, l], 0.02, rng),
    );
    // small nonzero synthesis init keeps gradients flowing into P/D/theta
    let d_syn = store.add(
        format!("{}.d_syn", init.name),
        ParamGroup::Adapter,
        crate::params::trunc_normal(&[init.m_dst, l], 0.01, rng),
    );
    let theta_raw = store.add(
        format!("{}.theta", init.name),
        ParamGroup::Adapter,
        Array1::from_elem(l, 0.02).into_dyn(),
    );
    let tda = init
        .tda_pool_len
        .map(|g| new_tda(store, &format!("{}.tda", init.name), g, rng));
    AdapterParams { p, d, d_syn, theta_raw, tda }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterOut {
    /// Synthesized features D' a in the destination width.
    pub mapped: Var,
    /// Code propagated along the chain (post-collapse when TDA ran).
    pub code: Var,
}

/// One adapter stage. `a_prev` may be single-step while `x_src` is
/// multi-step (the code broadcasts over steps); when the result is
/// multi-step and the destination is single-step, TDA must be present.
/// `skip_average` selects the 0.5 (shrunk + unshrunk) relaxation; disabling
/// it yields the pure thresholded update used by the solver equivalence.
pub fn ista_adapter_forward(
    g: &mut Graph,
    store: &ParamStore,
    ap: &AdapterParams,
    x_src: Var,
    a_prev: Var,
    target_single_step: bool,
    skip_average: bool,
) -> Result<AdapterOut> {
    let x_nd = g.value(x_src).ndim();
    let a_nd = g.value(a_prev).ndim();
    let a_prev = if a_nd == 2 && x_nd == 3 {
        let t = g.value(x_src).shape()[0];
        g.broadcast_steps(a_prev, t)
    } else {
        a_prev
    };
    let dv = g.param(store, ap.d);
    let pv = g.param(store, ap.p);
    let recon = g.linear(dv, a_prev);
    let resid = g.sub(x_src, recon);
    let update = g.linear(pv, resid);
    let u = g.add(a_prev, update);
    let theta_raw = g.param(store, ap.theta_raw);
    let theta = g.abs(theta_raw);
    let shrunk = g.shrink(u, theta);
    let a = if skip_average {
        let s = g.add(shrunk, u);
        g.scale(s, 0.5)
    } else {
        shrunk
    };
    let a = if g.value(a).ndim() == 3 {
        match (&ap.tda, target_single_step) {
            (Some(tda), _) => tda_forward(g, store, tda, a)?,
            (None, true) => {
                return Err(CoreError::Config(
                    "multi-step code with single-step target requires TDA".into(),
                ))
            }
            (None, false) => a,
        }
    } else {
        a
    };
    let d_syn = g.param(store, ap.d_syn);
    let mapped = g.linear(d_syn, a);
    Ok(AdapterOut { mapped, code: a })
}

/// Run K adapters tied to the solver (P = 2 step D^T, theta = step lambda,
/// skip disabled, shared x) from a zero code; returns the final code. This is
/// the trainable-path side of the solver-equivalence oracle.
pub fn run_tied_chain(
    d: &Array2<f64>,
    lambda: f64,
    step: f64,
    x: &Array2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    let (m, l) = (d.nrows(), d.ncols());
    let n = x.ncols();
    if x.nrows() != m {
        return Err(CoreError::InvalidArgument("x rows must match D rows".into()));
    }
    let mut store = ParamStore::new();
    let p = store.add(
        "tied.p",
        ParamGroup::Adapter,
        d.t().mapv(|v| 2.0 * step * v).into_dyn(),
    );
    let dd = store.add("tied.d", ParamGroup::Adapter, d.clone().into_dyn());
    let d_syn = store.add("tied.d_syn", ParamGroup::Adapter, d.clone().into_dyn());
    let theta = store.add(
        "tied.theta",
        ParamGroup::Adapter,
        Array1::from_elem(l, step * lambda).into_dyn(),
    );
    let ap = AdapterParams { p, d: dd, d_syn, theta_raw: theta, tda: None };
    let mut g = Graph::new();
    let xv = g.constant(x.clone().into_dyn());
    let mut code = g.constant(Array2::<f64>::zeros((l, n)).into_dyn());
    for _ in 0..k {
        let out = ista_adapter_forward(&mut g, &store, &ap, xv, code, false, false)?;
        code = out.code;
    }
    Ok(g
        .value(code)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Mean absolute-threshold vector (for reports).
pub fn thresholds(store: &ParamStore, ap: &AdapterParams) -> Array1<f64> {
    store
        .value(ap.theta_raw)
        .mapv(f64::abs)
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
}

pub fn code_sparsity(a: &ArrayD<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().filter(|v| **v == 0.0).count() as f64 / a.len() as f64
}
