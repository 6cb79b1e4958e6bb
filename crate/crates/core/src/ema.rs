//! Dynamic EMA weighting.
//!
//! The EMA parameters follow `ema_t = beta_t * ema_{t-1} + (1 - beta_t) * theta_t`.
//! Instead of a constant `beta`, the weight is derived per layer from the
//! current and previous parameters and gradients:
//!
//! ```text
//! beta = | 1 - ||(theta_{t-1} - ema_{t-1}) * (g_t + 1)||_1
//!            / ||(theta_t - ema_{t-1}) * (g_t - g_{t-1})||_1 |
//! ```
//!
//! and falls back to a clamp constant (0.99 by default) whenever the value
//! leaves `(0, 1)`. The closed-form scalar rule `(g + 1) / ((theta - ema) * h)`
//! and the finite-difference curvature estimate it is built on are exposed
//! separately for checking against analytic losses.
//!
//! Lifecycle of an [`EmaState`] over one dataset:
//!
//! 1. [`EmaState::new`] copies the initial parameters.
//! 2. Each [`EmaState::step`] computes a weight per layer from the stored
//!    snapshot (or uses the clamp constant when there is none yet), updates
//!    the EMA parameters, and replaces the snapshot with the current
//!    parameters and gradients.
//! 3. [`EmaState::finish_dataset`] hands back the EMA parameters as both the
//!    checkpoint and the starting point for the next dataset.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamVector;

pub const DEFAULT_CLAMP: f64 = 0.99;

/// Denominators whose L1 norm falls below this are treated as zero.
pub const DENOMINATOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    /// Layer-wise weight from the L1 approximation.
    Layerwise,
    /// Constant weight for every layer and iteration.
    Fixed(f64),
}

/// How the layer-wise ratio is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaReduction {
    /// `|1 - ||num||_1 / ||den||_1|`.
    #[default]
    NormRatio,
    /// Mean over elements of `|1 - num_i / den_i|`, skipping zero denominators.
    ElementwiseMean,
}

/// Closed-form EMA weight for a single scalar parameter:
/// `(grad + 1) / ((theta - ema_prev) * hess)`.
///
/// No clamping is applied.
pub fn compute_beta_exact(grad: f64, hess: f64, theta: f64, ema_prev: f64) -> Result<f64> {
    let denom = (theta - ema_prev) * hess;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "(theta - ema_prev) * hess = {denom}"
        )));
    }
    Ok((grad + 1.0) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub values: ParamVector,
    /// Entries whose parameter did not move; their value is left at zero.
    pub degenerate: Vec<bool>,
}

/// Diagonal curvature from a gradient difference quotient:
/// `(grad_t - grad_prev) / (theta_t - theta_prev)`, elementwise.
pub fn approx_hessian_fd(
    grad_t: &ParamVector,
    grad_prev: &ParamVector,
    theta_t: &ParamVector,
    theta_prev: &ParamVector,
) -> Result<HessianEstimate> {
    grad_t.check_compatible(grad_prev)?;
    grad_t.check_compatible(theta_t)?;
    grad_t.check_compatible(theta_prev)?;

    let mut values = grad_t.zeros_like();
    let mut degenerate = vec![false; grad_t.len()];
    let quotients = grad_t
        .values()
        .iter()
        .zip(grad_prev.values())
        .zip(theta_t.values().iter().zip(theta_prev.values()));
    for (i, ((g, gp), (t, tp))) in quotients.enumerate() {
        let step = t - tp;
        if step.abs() < DENOMINATOR_EPS {
            degenerate[i] = true;
        } else {
            values.values_mut()[i] = (g - gp) / step;
        }
    }
    if degenerate.iter().all(|&d| d) {
        return Err(Error::Degenerate(
            "parameters did not move; no curvature estimate possible".into(),
        ));
    }
    Ok(HessianEstimate { values, degenerate })
}

/// The five same-layer slices the layer-wise weight is computed from.
#[derive(Debug, Clone, Copy)]
pub struct LayerInputs<'a> {
    pub theta: &'a [f64],
    pub theta_prev: &'a [f64],
    pub ema_prev: &'a [f64],
    pub grad: &'a [f64],
    pub grad_prev: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaValue {
    pub raw: f64,
    pub applied: f64,
    pub clamped: bool,
}

impl BetaValue {
    fn resolve(raw: f64, clamp_value: f64) -> Self {
        let raw = if raw.is_nan() { 1.0 } else { raw.min(f64::MAX) };
        if raw > 0.0 && raw < 1.0 {
            Self {
                raw,
                applied: raw,
                clamped: false,
            }
        } else {
            Self {
                raw,
                applied: clamp_value,
                clamped: true,
            }
        }
    }

    /// Used when there is no usable ratio: reported as a raw value of 1.
    fn fallback(clamp_value: f64) -> Self {
        Self {
            raw: 1.0,
            applied: clamp_value,
            clamped: true,
        }
    }
}

/// Layer-wise EMA weight.
///
/// `clamp_value` must lie in `(0, 1)`; the applied weight always does.
pub fn compute_beta_layer(
    inputs: &LayerInputs<'_>,
    clamp_value: f64,
    reduction: BetaReduction,
) -> BetaValue {
    let LayerInputs {
        theta,
        theta_prev,
        ema_prev,
        grad,
        grad_prev,
    } = *inputs;
    debug_assert!(
        [
            theta_prev.len(),
            ema_prev.len(),
            grad.len(),
            grad_prev.len()
        ]
        .iter()
        .all(|&n| n == theta.len()),
        "layer slices differ in length"
    );

    let terms = (0..theta.len()).map(|i| {
        let num = (theta_prev[i] - ema_prev[i]) * (grad[i] + 1.0);
        let den = (theta[i] - ema_prev[i]) * (grad[i] - grad_prev[i]);
        (num, den)
    });

    match reduction {
        BetaReduction::NormRatio => {
            let (num, den) = terms.fold((0.0, 0.0), |(n, d), (a, b)| (n + a.abs(), d + b.abs()));
            if !den.is_finite() || den < DENOMINATOR_EPS || !num.is_finite() {
                return BetaValue::fallback(clamp_value);
            }
            BetaValue::resolve((1.0 - num / den).abs(), clamp_value)
        }
        BetaReduction::ElementwiseMean => {
            let (sum, count) = terms
                .filter(|(_, den)| den.abs() >= DENOMINATOR_EPS)
                .fold((0.0, 0usize), |(s, c), (num, den)| {
                    (s + (1.0 - num / den).abs(), c + 1)
                });
            if count == 0 || !sum.is_finite() {
                return BetaValue::fallback(clamp_value);
            }
            BetaValue::resolve(sum / count as f64, clamp_value)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaRecord {
    /// Iteration within the current dataset, starting at 1.
    pub iteration: usize,
    pub layer: String,
    pub beta_raw: f64,
    pub beta_applied: f64,
    pub clamped: bool,
    /// `||g_{t-1} + 1||_1`, absent on the first iteration of a dataset.
    pub prev_grad_shift_l1: Option<f64>,
    /// `||g_t - g_{t-1}||_1`, absent on the first iteration of a dataset.
    pub grad_delta_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    params: ParamVector,
    grads: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    ema: ParamVector,
    snapshot: Option<Snapshot>,
    iteration: usize,
    clamp_value: f64,
    mode: BetaMode,
    reduction: BetaReduction,
}

impl EmaState {
    /// Starts EMA tracking from a copy of `initial`.
    pub fn new(initial: &ParamVector) -> Self {
        Self {
            ema: initial.clone(),
            snapshot: None,
            iteration: 0,
            clamp_value: DEFAULT_CLAMP,
            mode: BetaMode::Layerwise,
            reduction: BetaReduction::default(),
        }
    }

    pub fn with_mode(mut self, mode: BetaMode) -> Result<Self> {
        if let BetaMode::Fixed(beta) = mode {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!(
                    "fixed EMA weight {beta} outside [0, 1]"
                )));
            }
        }
        self.mode = mode;
        Ok(self)
    }

    pub fn with_clamp(mut self, clamp_value: f64) -> Result<Self> {
        if !(clamp_value > 0.0 && clamp_value < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clamp value {clamp_value} outside (0, 1)"
            )));
        }
        self.clamp_value = clamp_value;
        Ok(self)
    }

    pub fn with_reduction(mut self, reduction: BetaReduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn ema_params(&self) -> &ParamVector {
        &self.ema
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn clamp_value(&self) -> f64 {
        self.clamp_value
    }

    pub fn mode(&self) -> BetaMode {
        self.mode
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }

    /// One EMA iteration. `params` are the live parameters after the
    /// optimizer update and `grads` the gradients used for it.
    pub fn step(&mut self, params: &ParamVector, grads: &ParamVector) -> Result<Vec<BetaRecord>> {
        self.ema.check_compatible(params)?;
        self.ema.check_compatible(grads)?;

        let iteration = self.iteration + 1;
        let mut records = Vec::with_capacity(self.ema.num_layers());
        for layer in 0..self.ema.num_layers() {
            let (value, norms) = match (self.mode, &self.snapshot) {
                (BetaMode::Fixed(beta), _) => (
                    BetaValue {
                        raw: beta,
                        applied: beta,
                        clamped: false,
                    },
                    None,
                ),
                (BetaMode::Layerwise, None) => (BetaValue::fallback(self.clamp_value), None),
                (BetaMode::Layerwise, Some(snap)) => {
                    let grad = grads.layer(layer).values;
                    let grad_prev = snap.grads.layer(layer).values;
                    let inputs = LayerInputs {
                        theta: params.layer(layer).values,
                        theta_prev: snap.params.layer(layer).values,
                        ema_prev: self.ema.layer(layer).values,
                        grad,
                        grad_prev,
                    };
                    let shift = grad_prev.iter().map(|g| (g + 1.0).abs()).sum::<f64>();
                    let delta = grad
                        .iter()
                        .zip(grad_prev)
                        .map(|(g, gp)| (g - gp).abs())
                        .sum::<f64>();
                    (
                        compute_beta_layer(&inputs, self.clamp_value, self.reduction),
                        Some((shift, delta)),
                    )
                }
            };
            records.push(BetaRecord {
                iteration,
                layer: self.ema.segments()[layer].name.clone(),
                beta_raw: value.raw,
                beta_applied: value.applied,
                clamped: value.clamped,
                prev_grad_shift_l1: norms.map(|n| n.0),
                grad_delta_l1: norms.map(|n| n.1),
            });
        }

        // All weights are computed from ema_{t-1} before any layer moves.
        for (layer, record) in records.iter().enumerate() {
            self.ema
                .blend_layer_in_place(layer, params, record.beta_applied)?;
        }
        self.snapshot = Some(Snapshot {
            params: params.clone(),
            grads: grads.clone(),
        });
        self.iteration = iteration;
        Ok(records)
    }

    /// Ends a dataset: returns `(checkpoint, next_init)`, both copies of the
    /// EMA parameters, and resets the snapshot and iteration counter.
    pub fn finish_dataset(&mut self) -> (ParamVector, ParamVector) {
        self.snapshot = None;
        self.iteration = 0;
        (self.ema.clone(), self.ema.clone())
    }
}

/// Closed-form EMA after `thetas.len()` updates:
/// `prod(beta) * theta0 + sum_i (1 - beta_i) * prod_{j > i}(beta_j) * theta_i`.
pub fn unroll_ema(
    theta0: &ParamVector,
    thetas: &[ParamVector],
    betas: &[f64],
) -> Result<ParamVector> {
    if thetas.len() != betas.len() {
        return Err(Error::LengthMismatch {
            expected: thetas.len(),
            actual: betas.len(),
        });
    }
    for theta in thetas {
        theta0.check_compatible(theta)?;
    }

    // tail[i] = prod_{j >= i} beta_j, with tail[t] = 1
    let mut tail = vec![1.0; betas.len() + 1];
    for i in (0..betas.len()).rev() {
        tail[i] = tail[i + 1] * betas[i];
    }

    let mut out = theta0.scale(tail[0]);
    for (i, theta) in thetas.iter().enumerate() {
        let weight = (1.0 - betas[i]) * tail[i + 1];
        out.axpy_in_place(weight, theta)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub task: usize,
    /// Iteration counted across the whole run, starting at 1.
    pub global_iteration: usize,
    pub record: BetaRecord,
}

/// Per-iteration, per-layer record of EMA weights over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BetaTrace {
    pub rows: Vec<TraceRow>,
}

impl BetaTrace {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn extend(&mut self, task: usize, global_iteration: usize, records: Vec<BetaRecord>) {
        self.rows.extend(records.into_iter().map(|record| TraceRow {
            task,
            global_iteration,
            record,
        }));
    }

    pub fn clamp_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.record.clamped).count() as f64 / self.rows.len() as f64
    }

    /// `iteration,layer,beta_raw,beta_applied,clamped`, one row per
    /// (iteration, layer) with run-global iteration numbers.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "layer", "beta_raw", "beta_applied", "clamped"])?;
        for row in &self.rows {
            let r = &row.record;
            out.write_record([
                row.global_iteration.to_string(),
                r.layer.clone(),
                r.beta_raw.to_string(),
                r.beta_applied.to_string(),
                r.clamped.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Gradient norms behind each weight, for auditing the dropped
    /// `(g_{t-1} + 1) / (g_t - g_{t-1})` term. Empty cells on first iterations.
    pub fn write_norms_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "iteration",
            "task",
            "layer",
            "prev_grad_plus_one_l1",
            "grad_delta_l1",
        ])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let r = &row.record;
            out.write_record([
                row.global_iteration.to_string(),
                (row.task + 1).to_string(),
                r.layer.clone(),
                cell(r.prev_grad_shift_l1),
                cell(r.grad_delta_l1),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_norms_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_norms_csv(std::fs::File::create(path)?)
    }
}
