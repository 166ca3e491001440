//! Closed-form Dirichlet mathematics.
//!
//! Densities, divergences, moments and the entropy decomposition
//! `total = expected data + knowledge` for a Dirichlet over categoricals and
//! for a finite ensemble of categoricals, plus maximum-likelihood fitting and
//! sampling. Entropies are in nats.

pub(crate) mod special;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use special::{digamma, log_gamma, trigamma};
pub(crate) use special::{digamma_unchecked, ln_gamma_unchecked};

/// Entries below this are raised to it (and the vector renormalised) before any log.
pub const PROB_FLOOR: f64 = 1e-10;

/// Per-component bounds applied to fitted concentrations.
pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e5;

pub const DEFAULT_MLE_TOL: f64 = 1e-8;
pub const DEFAULT_MLE_MAX_ITER: usize = 200;

const SUM_TOL: f64 = 1e-9;

/// A probability vector over `K ≥ 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical(Vec<f64>);

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::contract(format!(
                "categorical needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract(
                "categorical entries must be finite and non-negative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::contract(format!(
                "categorical sums to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Normalises a non-negative weight vector.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::contract("weights must have a positive finite sum"));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Wraps a vector already known to satisfy the invariants.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Copy with every entry at least [`PROB_FLOOR`], renormalised.
    pub fn floored(&self) -> Categorical {
        Categorical(floor_probs(&self.0))
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn floor_probs(p: &[f64]) -> Vec<f64> {
    if p.iter().all(|&x| x >= PROB_FLOOR) {
        return p.to_vec();
    }
    let raised: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let sum: f64 = raised.iter().sum();
    raised.into_iter().map(|x| x / sum).collect()
}

/// Concentration parameters of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::contract("dirichlet needs at least 2 components"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::contract(
                "dirichlet concentrations must be finite and positive",
            ));
        }
        Ok(Self::from_raw(alpha))
    }

    pub(crate) fn from_raw(alpha: Vec<f64>) -> Self {
        let alpha0 = alpha.iter().sum();
        Self { alpha, alpha0 }
    }

    pub fn symmetric(k: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }
}

/// Total, expected-data and knowledge uncertainty in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    pub total: f64,
    pub data: f64,
    pub knowledge: f64,
}

impl UncertaintyTriple {
    /// Builds a triple with `knowledge = total - data`.
    pub fn from_total_and_data(total: f64, data: f64) -> Self {
        Self {
            total,
            data,
            knowledge: total - data,
        }
    }
}

/// The member categoricals of an ensemble at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPosteriorSet {
    members: Vec<Categorical>,
}

impl TokenPosteriorSet {
    pub fn new(members: Vec<Categorical>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::contract("token posterior set is empty"))?;
        let k = first.dim();
        if members.iter().any(|m| m.dim() != k) {
            return Err(Error::contract(
                "ensemble members disagree on vocabulary size",
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Categorical] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    /// Arithmetic mean of the member categoricals.
    pub fn mean(&self) -> Categorical {
        let k = self.dim();
        let m = self.members.len() as f64;
        let mut acc = vec![0.0; k];
        for member in &self.members {
            for (a, p) in acc.iter_mut().zip(member.probs()) {
                *a += p;
            }
        }
        Categorical(acc.into_iter().map(|a| a / m).collect())
    }
}

fn same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Log-density of `p` under `Dir(d)`, after flooring `p`.
pub fn dirichlet_log_pdf(d: &DirichletParams, p: &Categorical) -> Result<f64> {
    same_dim(d.dim(), p.dim())?;
    let p = floor_probs(p.probs());
    Ok(log_pdf_floored(d.alpha(), &p))
}

/// `ln Dir(p; α)` for an already floored `p`.
pub(crate) fn log_pdf_floored(alpha: &[f64], p: &[f64]) -> f64 {
    let alpha0: f64 = alpha.iter().sum();
    let mut acc = ln_gamma_unchecked(alpha0);
    for (&a, &pc) in alpha.iter().zip(p) {
        acc += (a - 1.0) * pc.ln() - ln_gamma_unchecked(a);
    }
    acc
}

/// `KL(Dir(p) || Dir(q))`.
pub fn dirichlet_kl(p: &DirichletParams, q: &DirichletParams) -> Result<f64> {
    same_dim(p.dim(), q.dim())?;
    Ok(kl_raw(p.alpha(), q.alpha()))
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let p0: f64 = p.iter().sum();
    let q0: f64 = q.iter().sum();
    let psi_p0 = digamma_unchecked(p0);
    let mut acc = ln_gamma_unchecked(p0) - ln_gamma_unchecked(q0);
    for (&pc, &qc) in p.iter().zip(q) {
        acc += ln_gamma_unchecked(qc) - ln_gamma_unchecked(pc);
        acc += (pc - qc) * (digamma_unchecked(pc) - psi_p0);
    }
    acc
}

/// Predictive mean `α_c / α_0`.
pub fn dirichlet_mean(d: &DirichletParams) -> Categorical {
    Categorical(d.alpha.iter().map(|a| a / d.alpha0).collect())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn categorical_entropy(p: &Categorical) -> f64 {
    entropy_raw(p.probs())
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Expected entropy of a categorical drawn from `Dir(d)`.
pub fn expected_categorical_entropy(d: &DirichletParams) -> f64 {
    let a0 = d.alpha0;
    let psi0 = digamma_unchecked(a0 + 1.0);
    -d.alpha
        .iter()
        .map(|&a| (a / a0) * (digamma_unchecked(a + 1.0) - psi0))
        .sum::<f64>()
}

/// Entropy decomposition of a Dirichlet: total, expected data and mutual information.
pub fn mutual_information(d: &DirichletParams) -> UncertaintyTriple {
    let total = categorical_entropy(&dirichlet_mean(d));
    let data = expected_categorical_entropy(d);
    UncertaintyTriple::from_total_and_data(total, data)
}

/// Entropy decomposition of a finite ensemble at one position.
pub fn ensemble_uncertainties(s: &TokenPosteriorSet) -> UncertaintyTriple {
    let total = categorical_entropy(&s.mean());
    let data = s.members().iter().map(categorical_entropy).sum::<f64>() / s.len() as f64;
    UncertaintyTriple::from_total_and_data(total, data)
}

/// Result of [`dirichlet_mle_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub params: DirichletParams,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood Dirichlet for a set of categoricals.
///
/// Fixed-point iteration `ψ(α_c) ← ψ(α_0) + mean ln π_c` started from a
/// moment-matched guess; ψ is inverted by Newton's method. Concentrations are
/// kept inside `[ALPHA_MIN, ALPHA_MAX]` (the upper bound rescales the whole
/// vector so the mean is preserved). Hitting `max_iter` is reported through
/// [`MleFit::converged`], never as an error.
pub fn dirichlet_mle_fit(samples: &[Categorical], tol: f64, max_iter: usize) -> Result<MleFit> {
    if samples.len() < 2 {
        return Err(Error::contract("dirichlet fit needs at least 2 samples"));
    }
    let k = samples[0].dim();
    if samples.iter().any(|s| s.dim() != k) {
        return Err(Error::contract(
            "dirichlet fit samples disagree on dimension",
        ));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; k];
    let mut mean_sq = vec![0.0; k];
    let mut mean_log = vec![0.0; k];
    for s in samples {
        let p = floor_probs(s.probs());
        for c in 0..k {
            mean[c] += p[c];
            mean_sq[c] += p[c] * p[c];
            mean_log[c] += p[c].ln();
        }
    }
    for c in 0..k {
        mean[c] /= n;
        mean_sq[c] /= n;
        mean_log[c] /= n;
    }
    let alpha = moment_match(&mean, &mean_sq);
    Ok(fit_from_suff_stats(alpha, &mean_log, tol, max_iter, false))
}

fn moment_match(mean: &[f64], mean_sq: &[f64]) -> Vec<f64> {
    let mut precisions: Vec<f64> = mean
        .iter()
        .zip(mean_sq)
        .filter_map(|(&m, &s)| {
            let var = s - m * m;
            let est = (m - s) / var;
            (var > 1e-300 && est.is_finite() && est > 0.0).then_some(est)
        })
        .collect();
    if precisions.is_empty() {
        // Zero-variance limit: start on the ceiling with the sample mean.
        let top = mean.iter().cloned().fold(0.0, f64::max);
        let mut alpha: Vec<f64> = mean.iter().map(|m| m / top * ALPHA_MAX).collect();
        clamp_alpha(&mut alpha);
        return alpha;
    }
    precisions.sort_by(f64::total_cmp);
    let precision = precisions[precisions.len() / 2];
    let mut alpha: Vec<f64> = mean.iter().map(|m| m * precision).collect();
    clamp_alpha(&mut alpha);
    alpha
}

/// Returns true when the ceiling was active.
fn clamp_alpha(alpha: &mut [f64]) -> bool {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let capped = max >= ALPHA_MAX;
    if max > ALPHA_MAX {
        // Divide first so the largest component lands exactly on the ceiling.
        alpha.iter_mut().for_each(|a| *a = *a / max * ALPHA_MAX);
    }
    alpha.iter_mut().for_each(|a| {
        if !(*a >= ALPHA_MIN) {
            *a = ALPHA_MIN;
        }
    });
    capped
}

/// Average log-likelihood up to a constant, `ln Γ(α0) − Σ ln Γ(α_c) + Σ (α_c − 1) mean_log_c`,
/// and the rounding noise of that sum (its terms cancel heavily at large `α0`).
fn mle_objective(alpha: &[f64], mean_log: &[f64]) -> (f64, f64) {
    let a0: f64 = alpha.iter().sum();
    let head = ln_gamma_unchecked(a0);
    let mut value = head;
    let mut magnitude = head.abs();
    for (&a, &m) in alpha.iter().zip(mean_log) {
        let lg = ln_gamma_unchecked(a);
        let lin = (a - 1.0) * m;
        value += lin - lg;
        magnitude += lg.abs() + lin.abs();
    }
    (value, 1e-13 * magnitude.max(1.0))
}

/// Newton direction on the full vector; the Hessian is diagonal plus rank one
/// so the solve is linear in K.
fn newton_direction(alpha: &[f64], mean_log: &[f64]) -> Vec<f64> {
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma_unchecked(a0);
    let z = special::trigamma_unchecked(a0);
    let mut grad = Vec::with_capacity(alpha.len());
    let mut q = Vec::with_capacity(alpha.len());
    for (&a, &m) in alpha.iter().zip(mean_log) {
        grad.push(psi0 - digamma_unchecked(a) + m);
        q.push(-special::trigamma_unchecked(a));
    }
    let num: f64 = grad.iter().zip(&q).map(|(g, q)| g / q).sum();
    let den: f64 = 1.0 / z + q.iter().map(|q| 1.0 / q).sum::<f64>();
    let b = num / den;
    grad.iter().zip(&q).map(|(g, q)| -(g - b) / q).collect()
}

/// Newton step, halved until it stays positive and does not lower the
/// likelihood beyond rounding noise.
fn damped_newton(alpha: &[f64], mean_log: &[f64]) -> Option<Vec<f64>> {
    let (current, noise) = mle_objective(alpha, mean_log);
    let dir = newton_direction(alpha, mean_log);
    let mut scale = 1.0;
    for _ in 0..8 {
        let next: Vec<f64> = alpha.iter().zip(&dir).map(|(a, d)| a + scale * d).collect();
        if next.iter().all(|&a| a > 0.0 && a.is_finite()) {
            let (value, _) = mle_objective(&next, mean_log);
            if value >= current - noise {
                return Some(next);
            }
        }
        scale *= 0.5;
    }
    None
}

/// Fixed-point iteration from an initial `alpha` given the mean log-probabilities.
///
/// Each iteration proposes a (damped) Newton step and keeps it when it stays
/// positive and does not lower the likelihood; otherwise it takes the
/// fixed-point step.
/// Both share the same stationary point, the Newton step just converges
/// quadratically where the fixed point crawls (large `α0`).
pub(crate) fn fit_from_suff_stats(
    mut alpha: Vec<f64>,
    mean_log: &[f64],
    tol: f64,
    max_iter: usize,
    stop_when_pinned: bool,
) -> MleFit {
    for iter in 1..=max_iter {
        let mut next = match damped_newton(&alpha, mean_log) {
            Some(n) => n,
            None => {
                let psi0 = digamma_unchecked(alpha.iter().sum());
                alpha
                    .iter()
                    .zip(mean_log)
                    .map(|(&a, &m)| inverse_digamma_from(psi0 + m, a))
                    .collect()
            }
        };
        let capped = clamp_alpha(&mut next);
        let residual = alpha
            .iter()
            .zip(&next)
            .map(|(a, b)| ((b - a) / a).abs())
            .fold(0.0, f64::max);
        alpha = next;
        // A fit pinned to the ceiling is a bound, not a stationary point.
        if residual < tol && (!capped || stop_when_pinned) {
            return MleFit {
                params: DirichletParams::from_raw(alpha),
                iterations: iter,
                converged: !capped,
            };
        }
    }
    MleFit {
        params: DirichletParams::from_raw(alpha),
        iterations: max_iter,
        converged: false,
    }
}

/// Newton inversion of ψ warm-started at `guess` (falls back to the cold start
/// if the warm iterate leaves the domain).
fn inverse_digamma_from(y: f64, guess: f64) -> f64 {
    let mut x = guess;
    for _ in 0..4 {
        let step = (digamma_unchecked(x) - y) / special::trigamma_unchecked(x);
        let nx = x - step;
        if !(nx > 0.0) {
            return special::inverse_digamma(y);
        }
        x = nx;
        if step.abs() < 1e-14 * x {
            break;
        }
    }
    x
}

/// Draws one categorical from `Dir(d)`.
pub fn dirichlet_sample<R: Rng + ?Sized>(d: &DirichletParams, rng: &mut R) -> Categorical {
    // Log-space gamma draws: Gamma(a) = Gamma(a + 1) · U^{1/a} keeps a < 1 from underflowing.
    let logs: Vec<f64> = d
        .alpha
        .iter()
        .map(|&a| {
            if a < 1.0 {
                let g = Gamma::new(a + 1.0, 1.0)
                    .expect("valid gamma shape")
                    .sample(rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / a
            } else {
                Gamma::new(a, 1.0)
                    .expect("valid gamma shape")
                    .sample(rng)
                    .ln()
            }
        })
        .collect();
    Categorical(softmax_raw(&logs))
}

/// Numerically stable softmax.
pub(crate) fn softmax_raw(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `p_c^(1/T)` renormalised.
pub fn temper_categorical(p: &Categorical, temperature: f64) -> Result<Categorical> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(p.clone());
    }
    Ok(Categorical(temper_raw(p.probs(), temperature)))
}

pub(crate) fn temper_raw(p: &[f64], temperature: f64) -> Vec<f64> {
    // Work in log space relative to the largest entry so tiny probabilities survive.
    let inv_t = 1.0 / temperature;
    let max = p.iter().cloned().fold(0.0, f64::max);
    let w: Vec<f64> = p
        .iter()
        .map(|&x| {
            if x > 0.0 {
                ((x / max).ln() * inv_t).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}
