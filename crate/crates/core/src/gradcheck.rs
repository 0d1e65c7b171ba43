//! Central finite-difference oracle for every backward pass in the crate.
//!
//! A unit under test is any [`Layer`]. It is scalarized as the sum of its
//! forward outputs, so the analytic gradient is the backward pass fed with an
//! all-ones upstream. Analytic and numeric derivatives are compared on the
//! input and on every parameter tensor, subsampling large tensors.
//!
//! The central difference of the scalar is evaluated as the compensated sum
//! of elementwise output differences. Outputs the probed coordinate does not
//! reach cancel exactly, so the rounding of the full sum never enters the
//! estimate.
//!
//! Two coordinate classes are skipped and counted: kinks (a slope jump
//! inside the kink window) and unresolved coordinates, where the estimates
//! at steps `h` and `h/2` disagree by more than the tolerance. The latter
//! are near-cancelling gradients too small for any double-precision finite
//! difference to certify; a report fails if they exceed a quarter of the
//! sample.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerParams, Mode};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, i: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || i >= x.len() {
        return Err(Error::Config(format!("finite_diff: bad step {eps} or index {i}")));
    }
    let mut probe = x.clone();
    let v = x.data()[i];
    probe.data_mut()[i] = v + eps;
    let plus = f(&probe)?;
    probe.data_mut()[i] = v - eps;
    let minus = f(&probe)?;
    let d = (plus - minus) / (2.0 * eps);
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::NonFinite("finite difference".into()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub tol: f64,
    /// Relative step: coordinate `i` moves by `eps * max(1, |x_i|)`.
    pub eps: f64,
    /// Coordinates checked per tensor at most.
    pub max_coords: usize,
    /// Half-width of the neighbourhood probed for derivative jumps.
    pub kink_window: f64,
    /// Slope jump (relative to `max(1, |grad|)`) treated as a kink.
    pub kink_jump: f64,
    /// Assumed rounding error of each forward output, in ulps.
    pub rounding_ulps: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            eps: 1e-6,
            max_coords: 200,
            kink_window: 1e-4,
            kink_jump: 1e-3,
            rounding_ulps: 2.0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst coordinate inside `worst_tensor`.
    pub worst_index: usize,
    pub worst_tensor: String,
    pub n_checked: usize,
    /// Coordinates skipped because a derivative jump lies within the kink window.
    pub n_skipped: usize,
    /// Coordinates skipped because the finite difference itself does not
    /// resolve them to the tolerance.
    pub n_unresolved: usize,
    pub tol: f64,
    pub passed: bool,
    pub reason: Option<String>,
}

impl GradReport {
    fn empty(tol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            worst_tensor: String::new(),
            n_checked: 0,
            n_skipped: 0,
            n_unresolved: 0,
            tol,
            passed: false,
            reason: None,
        }
    }

    fn failed(tol: f64, reason: String) -> Self {
        Self {
            reason: Some(reason),
            ..Self::empty(tol)
        }
    }

    fn finish(mut self) -> Self {
        if self.reason.is_none() && self.n_checked == 0 {
            self.reason = Some("no coordinates were checked".into());
        }
        let sampled = self.n_checked + self.n_skipped + self.n_unresolved;
        if self.reason.is_none() && self.n_unresolved * 4 > sampled {
            self.reason = Some(format!(
                "{} of {sampled} coordinates unresolved by finite differences",
                self.n_unresolved
            ));
        }
        self.passed = self.reason.is_none() && self.max_rel_err <= self.tol;
        self
    }

    /// Combines reports from independent runs.
    pub fn merge(self, other: GradReport) -> GradReport {
        let (worst_index, worst_tensor) = if other.max_rel_err > self.max_rel_err {
            (other.worst_index, other.worst_tensor.clone())
        } else {
            (self.worst_index, self.worst_tensor.clone())
        };
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            worst_index,
            worst_tensor,
            n_checked: self.n_checked + other.n_checked,
            n_skipped: self.n_skipped + other.n_skipped,
            n_unresolved: self.n_unresolved + other.n_unresolved,
            tol: self.tol.max(other.tol),
            passed: self.passed && other.passed,
            reason: self.reason.or(other.reason),
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} max_abs_err={:.3e} checked={} skipped={} unresolved={} worst={}[{}]",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.max_abs_err,
            self.n_checked,
            self.n_skipped,
            self.n_unresolved,
            if self.worst_tensor.is_empty() { "-" } else { &self.worst_tensor },
            self.worst_index,
        )?;
        if let Some(r) = &self.reason {
            write!(f, " ({r})")?;
        }
        Ok(())
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Copy)]
enum Target {
    Input,
    Weights(usize),
    Bias(usize),
}

fn sample_coords(len: usize, max: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut picked = BTreeSet::new();
    while picked.len() < max {
        picked.insert(rng.next_below(len));
    }
    picked.into_iter().collect()
}

struct Probe<'a> {
    unit: &'a mut dyn Layer,
    x: Tensor,
}

impl Probe<'_> {
    fn slot(&mut self, target: Target, i: usize) -> &mut f64 {
        match target {
            Target::Input => &mut self.x.data_mut()[i],
            Target::Weights(p) => &mut self.unit.params_mut().swap_remove(p).weights.data_mut()[i],
            Target::Bias(p) => {
                let params = self.unit.params_mut().swap_remove(p);
                &mut params.bias.as_mut().expect("bias target").data_mut()[i]
            }
        }
    }

    fn eval_at(&mut self, target: Target, i: usize, value: f64) -> Result<Tensor> {
        *self.slot(target, i) = value;
        let y = self.unit.forward(&self.x, Mode::Train)?;
        y.ensure_finite("gradcheck forward")?;
        Ok(y)
    }
}

/// Compares analytic and numeric gradients of `unit` at input `x`.
///
/// `seed` drives the coordinate subsample. Errors from the unit are folded
/// into a failed report.
pub fn check_gradients(unit: &mut dyn Layer, x: &Tensor, cfg: &GradcheckConfig, seed: u64) -> GradReport {
    match run_check(unit, x, cfg, seed) {
        Ok(report) => report.finish(),
        Err(e) => GradReport::failed(cfg.tol, e.to_string()),
    }
}

fn run_check(unit: &mut dyn Layer, x: &Tensor, cfg: &GradcheckConfig, seed: u64) -> Result<GradReport> {
    let mut report = GradReport::empty(cfg.tol);
    if cfg.max_coords == 0 {
        report.reason = Some("zero-size coordinate subsample requested".into());
        return Ok(report);
    }

    unit.params_mut().into_iter().for_each(LayerParams::zero_grads);
    let base = unit.forward(x, Mode::Train)?;
    base.ensure_finite("gradcheck forward")?;
    let dx = unit.backward(&Tensor::ones(base.shape()))?;
    let max_output = base.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut targets: Vec<(Target, String, Vec<f64>)> = vec![(Target::Input, "input".into(), dx.into_data())];
    for (p, params) in unit.params().into_iter().enumerate() {
        let label = if params.name.is_empty() { format!("param{p}") } else { params.name.clone() };
        targets.push((Target::Weights(p), format!("{label}.weight"), params.grad_weights.data().to_vec()));
        if let Some(gb) = &params.grad_bias {
            targets.push((Target::Bias(p), format!("{label}.bias"), gb.data().to_vec()));
        }
    }

    let mut rng = SplitMix64::stream(seed, 0x6772_6164);
    let mut probe = Probe {
        unit,
        x: x.clone(),
    };
    for (target, label, analytic) in targets {
        for i in sample_coords(analytic.len(), cfg.max_coords, &mut rng) {
            let v = *probe.slot(target, i);
            let h = cfg.eps * v.abs().max(1.0);
            let delta = cfg.kink_window * v.abs().max(1.0);
            let plus = probe.eval_at(target, i, v + h)?;
            let minus = probe.eval_at(target, i, v - h)?;
            let half_plus = probe.eval_at(target, i, v + h / 2.0)?;
            let half_minus = probe.eval_at(target, i, v - h / 2.0)?;
            let wide_plus = probe.eval_at(target, i, v + delta)?;
            let wide_minus = probe.eval_at(target, i, v - delta)?;
            *probe.slot(target, i) = v;

            let central = |p: &Tensor, m: &Tensor, step: f64| {
                compensated_sum(p.data().iter().zip(m.data()).map(|(p, m)| p - m)) / (2.0 * step)
            };
            let a = analytic[i];
            // rounding bound: a few ulps of every output the probe moved
            let moved: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .filter(|(p, m)| p != m)
                .map(|(p, m)| p.abs().max(m.abs()))
                .sum();
            // when nothing moved the true change may simply be below one ulp
            let scale = if moved > 0.0 || a == 0.0 { moved } else { max_output };
            let rounding = cfg.rounding_ulps * f64::EPSILON * scale / h;
            let numeric = central(&plus, &minus, h);
            let numeric_half = central(&half_plus, &half_minus, h / 2.0);
            if !numeric.is_finite() || !numeric_half.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            let second = wide_plus
                .data()
                .iter()
                .zip(wide_minus.data())
                .zip(base.data())
                .map(|((p, m), b)| (p - b) - (b - m));
            let slope_jump = compensated_sum(second).abs() / delta;
            if slope_jump > cfg.kink_jump * a.abs().max(numeric.abs()).max(1.0) {
                report.n_skipped += 1;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            if rounding + (numeric - numeric_half).abs() > cfg.tol * denom {
                report.n_unresolved += 1;
                continue;
            }
            let abs = (a - numeric).abs();
            let rel = abs / denom;
            report.n_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst_tensor.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst_index = i;
                report.worst_tensor = label.clone();
            }
        }
    }
    // leave the unit's caches consistent with the unperturbed input
    probe.unit.forward(x, Mode::Train)?;
    Ok(report)
}

/// Runs [`check_gradients`] on fresh units for seeds `0..seeds`.
pub fn check_gradients_seeded<L: Layer>(
    mut make: impl FnMut(u64) -> Result<(L, Tensor)>,
    cfg: &GradcheckConfig,
    seeds: u64,
    base_seed: u64,
) -> GradReport {
    let mut total: Option<GradReport> = None;
    for s in 0..seeds {
        let seed = base_seed.wrapping_add(s);
        let report = match make(seed) {
            Ok((mut unit, x)) => check_gradients(&mut unit, &x, cfg, seed),
            Err(e) => GradReport::failed(cfg.tol, e.to_string()),
        };
        total = Some(match total {
            None => report,
            Some(t) => t.merge(report),
        });
    }
    total.unwrap_or_else(|| GradReport::failed(cfg.tol, "no seeds requested".into()))
}

/// Wraps a layer and scales every gradient its backward pass produces.
///
/// Used to confirm the oracle rejects a wrong backward.
pub struct FaultInjected<L> {
    pub inner: L,
    pub factor: f64,
}

impl<L: Layer> Layer for FaultInjected<L> {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.inner.forward(x, mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let before: Vec<(Tensor, Option<Tensor>)> = self
            .inner
            .params()
            .iter()
            .map(|p| (p.grad_weights.clone(), p.grad_bias.clone()))
            .collect();
        let dx = self.inner.backward(upstream)?;
        let factor = self.factor;
        let rescale = |after: &mut Tensor, before: &Tensor| {
            for (a, b) in after.data_mut().iter_mut().zip(before.data()) {
                *a = b + factor * (*a - b);
            }
        };
        for (p, (gw, gb)) in self.inner.params_mut().into_iter().zip(&before) {
            rescale(&mut p.grad_weights, gw);
            if let (Some(a), Some(b)) = (p.grad_bias.as_mut(), gb) {
                rescale(a, b);
            }
        }
        Ok(dx.scale(factor))
    }

    fn params(&self) -> Vec<&LayerParams> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.inner.params_mut()
    }
}

/// Random tensor with standard-normal entries scaled by `std`.
pub fn random_tensor(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.next_normal() * std).collect())
}

/// Fills every parameter of `unit` with `N(0, std^2)` entries.
pub fn randomize_params(unit: &mut dyn Layer, std: f64, rng: &mut SplitMix64) {
    for p in unit.params_mut() {
        p.weights.data_mut().iter_mut().for_each(|v| *v = rng.next_normal() * std);
        if let Some(b) = p.bias.as_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = rng.next_normal() * std);
        }
    }
}
