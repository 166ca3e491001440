//! Ensemble member training, token-level distillation and Dirichlet
//! distribution distillation.
//!
//! Every objective is applied per decoder position under teacher forcing and
//! averaged over the real (non-padding) positions of a batch, the end marker
//! included. Gradients are formed with respect to the head logits and pushed
//! through the network by the tape.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dirmath::special::{digamma_unchecked, ln_gamma_unchecked};
use crate::dirmath::{
    dirichlet_mle_fit, fit_from_suff_stats, floor_probs, kl_raw, log_pdf_floored, softmax_raw,
    temper_raw, Categorical, DirichletParams, MleFit, TokenPosteriorSet, DEFAULT_MLE_MAX_ITER,
    DEFAULT_MLE_TOL,
};
use crate::error::{Error, Result};
use crate::nnet::{
    checkpoint, concentrations, init_model, optimizer_step, AdamConfig, AdamState, Graph, HeadMode,
    ModelConfig, SeqModel, StepOutcome, BOS, EOS, PAD,
};
use crate::synthdata::SentencePair;

/// Relative tolerance of the per-token Dirichlet fits made during training.
pub const TRAIN_FIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Fraction of the epochs over which the temperature is annealed.
    pub anneal_fraction: f64,
    pub seed: u64,
    /// Temper the token-level distillation targets as well (the Dirichlet
    /// objectives always use tempered targets).
    pub temper_kd_targets: bool,
    /// Architecture of freshly initialised models.
    pub model: ModelConfig,
    /// Written after every completed epoch when set, so a divergent run leaves
    /// its last good state on disk.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            temperature_start: 10.0,
            temperature_end: 3.0,
            anneal_fraction: 0.5,
            seed: 1,
            temper_kd_targets: true,
            model: ModelConfig::default(),
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if !(self.temperature_start >= self.temperature_end && self.temperature_end >= 1.0)
            || !self.temperature_start.is_finite()
        {
            return Err(Error::contract(
                "temperatures must satisfy start >= end >= 1",
            ));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return Err(Error::contract("anneal_fraction must lie in (0, 1]"));
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Linear from `temperature_start` at epoch 0 to `temperature_end` at
/// `anneal_fraction · epochs`, constant afterwards.
pub fn anneal_temperature(epoch: usize, config: &TrainConfig) -> f64 {
    let end = config.anneal_fraction * config.epochs as f64;
    let t = epoch as f64;
    if t >= end {
        return config.temperature_end;
    }
    config.temperature_start + (config.temperature_end - config.temperature_start) * (t / end)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub temperature: f64,
    pub mean_loss: f64,
    pub seconds: f64,
    /// Positions whose Dirichlet fit hit the iteration limit or the ceiling.
    pub unconverged_fits: usize,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} temperature={:.4} mean_loss={:.6} seconds={:.3}",
            self.epoch, self.temperature, self.mean_loss, self.seconds
        )?;
        if self.unconverged_fits > 0 {
            write!(f, " unconverged_fits={}", self.unconverged_fits)?;
        }
        Ok(())
    }
}

/// A trained model and its per-epoch log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: SeqModel,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistObjective {
    Nll,
    Kl,
}

impl std::str::FromStr for DistObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(Self::Nll),
            "kl" => Ok(Self::Kl),
            _ => Err(Error::contract(format!(
                "unknown objective {s:?} (expected nll or kl)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::contract(format!(
            "length mismatch: {a} targets vs {b} outputs"
        )));
    }
    Ok(())
}

/// Mean over positions of `KL(mean target ‖ student)`.
pub fn kd_loss(targets: &[TokenPosteriorSet], student: &[Categorical]) -> Result<f64> {
    check_lengths(targets.len(), student.len())?;
    let mut total = 0.0;
    for (t, s) in targets.iter().zip(student) {
        if t.dim() != s.dim() {
            return Err(Error::contract("target and student dimensions differ"));
        }
        total += categorical_kl(t.mean().probs(), s.probs());
    }
    Ok(total / targets.len() as f64)
}

fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Mean over positions and members of `−ln Dir(π_m; α)`, targets floored.
pub fn endd_nll_loss(targets: &[TokenPosteriorSet], student: &[DirichletParams]) -> Result<f64> {
    check_lengths(targets.len(), student.len())?;
    let mut total = 0.0;
    for (t, a) in targets.iter().zip(student) {
        if t.dim() != a.dim() {
            return Err(Error::contract("target and student dimensions differ"));
        }
        let per: f64 = t
            .members()
            .iter()
            .map(|m| log_pdf_floored(a.alpha(), m.probs()))
            .sum();
        total -= per / t.len() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Mean over positions of `KL(Dir(α̃) ‖ Dir(α))`.
pub fn endd_kl_loss(fitted: &[DirichletParams], student: &[DirichletParams]) -> Result<f64> {
    check_lengths(fitted.len(), student.len())?;
    let mut total = 0.0;
    for (f, s) in fitted.iter().zip(student) {
        if f.dim() != s.dim() {
            return Err(Error::contract("fitted and student dimensions differ"));
        }
        total += kl_raw(f.alpha(), s.alpha());
    }
    Ok(total / fitted.len() as f64)
}

/// Per-position maximum-likelihood Dirichlets. Positions whose fit did not
/// converge (including the zero-variance ceiling) come back with
/// `converged == false` and clamped concentrations.
pub fn fit_token_dirichlets(targets: &[TokenPosteriorSet]) -> Result<Vec<MleFit>> {
    targets
        .iter()
        .map(|t| {
            if t.len() < 2 {
                return Err(Error::contract(
                    "fitting needs at least 2 members per position",
                ));
            }
            dirichlet_mle_fit(t.members(), DEFAULT_MLE_TOL, DEFAULT_MLE_MAX_ITER)
        })
        .collect()
}

/// Tempered teacher-forced member outputs, one set per reference position
/// (the end marker included).
pub fn collect_targets(
    ensemble: &[SeqModel],
    src: &[usize],
    reference: &[usize],
    temperature: f64,
) -> Result<Vec<TokenPosteriorSet>> {
    check_teachers(ensemble)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let outputs: Vec<Vec<Categorical>> = ensemble
        .iter()
        .map(|m| {
            m.forward_teacher_forced(src, reference).map(|outs| {
                outs.into_iter()
                    .map(|o| o.as_categorical().expect("softmax head").clone())
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    (0..=reference.len())
        .map(|l| {
            let members = outputs
                .iter()
                .map(|o| crate::dirmath::temper_categorical(&o[l], temperature))
                .collect::<Result<Vec<_>>>()?;
            TokenPosteriorSet::new(members)
        })
        .collect()
}

fn check_teachers(ensemble: &[SeqModel]) -> Result<()> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::contract("empty ensemble"))?;
    for m in ensemble {
        if m.head_mode() != HeadMode::Softmax {
            return Err(Error::contract("ensemble members must have softmax heads"));
        }
        if m.config().vocab_size != first.config().vocab_size {
            return Err(Error::contract(
                "ensemble members disagree on vocabulary size",
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-position losses on raw logits: value and gradient w.r.t. the logits.

/// `−ln softmax(z)_y`.
pub(crate) fn cross_entropy_logits(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut q = softmax_raw(z);
    let loss = -q[y].max(f64::MIN_POSITIVE).ln();
    q[y] -= 1.0;
    (loss, q)
}

/// `KL(t ‖ softmax(z))`.
pub(crate) fn kd_logits(z: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (&zc, &tc) in z.iter().zip(target) {
        let log_q = zc - lse;
        if tc > 0.0 {
            loss += tc * (tc.ln() - log_q);
        }
        grad.push(log_q.exp() - tc);
    }
    (loss, grad)
}

/// Maps `dL/dα` to `dL/dz` through `α = exp(clamp(z))`.
fn chain_concentration(z: &[f64], alpha: &[f64], mut d_alpha: Vec<f64>) -> Vec<f64> {
    use crate::nnet::model::CONCENTRATION_LOGIT_CLAMP as C;
    for ((g, &zc), &a) in d_alpha.iter_mut().zip(z).zip(alpha) {
        *g = if zc.abs() < C { *g * a } else { 0.0 };
    }
    d_alpha
}

/// `−(1/M) Σ_m ln Dir(π_m; α)` from the mean floored log-probabilities.
pub(crate) fn nll_logits(z: &[f64], mean_log: &[f64]) -> (f64, Vec<f64>) {
    let alpha = concentrations(z);
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma_unchecked(a0);
    let mut loss = -ln_gamma_unchecked(a0);
    let mut d_alpha = Vec::with_capacity(alpha.len());
    for (&a, &ml) in alpha.iter().zip(mean_log) {
        loss += ln_gamma_unchecked(a) - (a - 1.0) * ml;
        d_alpha.push(digamma_unchecked(a) - psi0 - ml);
    }
    (loss, chain_concentration(z, &alpha, d_alpha))
}

/// `KL(Dir(α̃) ‖ Dir(exp z))`.
pub(crate) fn kl_logits(z: &[f64], fitted: &[f64]) -> (f64, Vec<f64>) {
    let alpha = concentrations(z);
    let loss = kl_raw(fitted, &alpha);
    let psi0 = digamma_unchecked(alpha.iter().sum());
    let psi_f0 = digamma_unchecked(fitted.iter().sum());
    let d_alpha = alpha
        .iter()
        .zip(fitted)
        .map(|(&a, &f)| digamma_unchecked(a) - psi0 - (digamma_unchecked(f) - psi_f0))
        .collect();
    (loss, chain_concentration(z, &alpha, d_alpha))
}

// ---------------------------------------------------------------------------
// Training

/// Teacher-forced member probabilities, indexed `[sentence][position][member]`.
type TeacherCache = Vec<Vec<Vec<Vec<f64>>>>;

fn teacher_outputs(
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    batch: usize,
) -> Result<TeacherCache> {
    let mut cache: TeacherCache = corpus
        .iter()
        .map(|p| vec![Vec::with_capacity(ensemble.len()); p.reference.len() + 1])
        .collect();
    for member in ensemble {
        for (chunk_idx, chunk) in corpus.chunks(batch).enumerate() {
            let pairs: Vec<(&[usize], &[usize])> = chunk
                .iter()
                .map(|p| (p.source.as_slice(), p.reference.as_slice()))
                .collect();
            let logits = member.teacher_forced_logits(&pairs)?;
            for (i, rows) in logits.into_iter().enumerate() {
                let sent = &mut cache[chunk_idx * batch + i];
                for (l, z) in rows.into_iter().enumerate() {
                    sent[l].push(softmax_raw(&z));
                }
            }
        }
    }
    Ok(cache)
}

/// What a training run optimises, position by position.
trait Objective {
    /// Called before each epoch; returns the number of unconverged fits.
    fn begin_epoch(&mut self, _temperature: f64) -> Result<usize> {
        Ok(0)
    }
    fn position(
        &self,
        sentence: usize,
        position: usize,
        target_token: usize,
        logits: &[f64],
    ) -> (f64, Vec<f64>);
}

struct CrossEntropy;

impl Objective for CrossEntropy {
    fn position(&self, _: usize, _: usize, y: usize, z: &[f64]) -> (f64, Vec<f64>) {
        cross_entropy_logits(z, y)
    }
}

struct TokenKd {
    teacher: TeacherCache,
    temper: bool,
    temperature: f64,
}

impl Objective for TokenKd {
    fn begin_epoch(&mut self, temperature: f64) -> Result<usize> {
        self.temperature = if self.temper { temperature } else { 1.0 };
        Ok(0)
    }

    fn position(&self, s: usize, l: usize, _: usize, z: &[f64]) -> (f64, Vec<f64>) {
        let members = &self.teacher[s][l];
        let mut mean = vec![0.0; z.len()];
        for p in members {
            let t = if self.temperature == 1.0 {
                p.clone()
            } else {
                temper_raw(p, self.temperature)
            };
            mean.iter_mut().zip(&t).for_each(|(m, v)| *m += v);
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        kd_logits(z, &mean)
    }
}

/// Mean floored log-probabilities of the tempered members.
fn mean_log_probs(members: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let k = members[0].len();
    let mut mean_log = vec![0.0; k];
    for p in members {
        let floored = floor_probs(&temper_raw(p, temperature));
        mean_log
            .iter_mut()
            .zip(&floored)
            .for_each(|(m, v)| *m += v.ln());
    }
    let n = members.len() as f64;
    mean_log.iter_mut().for_each(|m| *m /= n);
    mean_log
}

struct DirichletNll {
    teacher: TeacherCache,
    mean_logs: Vec<Vec<Vec<f64>>>,
    temperature: f64,
}

impl Objective for DirichletNll {
    fn begin_epoch(&mut self, temperature: f64) -> Result<usize> {
        if temperature != self.temperature || self.mean_logs.is_empty() {
            self.temperature = temperature;
            self.mean_logs = self
                .teacher
                .iter()
                .map(|sent| {
                    sent.iter()
                        .map(|m| mean_log_probs(m, temperature))
                        .collect()
                })
                .collect();
        }
        Ok(0)
    }

    fn position(&self, s: usize, l: usize, _: usize, z: &[f64]) -> (f64, Vec<f64>) {
        nll_logits(z, &self.mean_logs[s][l])
    }
}

struct DirichletKl {
    teacher: TeacherCache,
    fits: Vec<Vec<Vec<f64>>>,
    temperature: f64,
    unconverged: usize,
}

impl Objective for DirichletKl {
    fn begin_epoch(&mut self, temperature: f64) -> Result<usize> {
        if temperature == self.temperature && !self.fits.is_empty() {
            return Ok(self.unconverged);
        }
        let warm = std::mem::take(&mut self.fits);
        let mut unconverged = 0;
        let mut fits = Vec::with_capacity(self.teacher.len());
        for (s, sent) in self.teacher.iter().enumerate() {
            let mut row = Vec::with_capacity(sent.len());
            for (l, members) in sent.iter().enumerate() {
                let fit = match warm.get(s).and_then(|r| r.get(l)) {
                    // The previous epoch's fit is close when the temperature moves a little.
                    Some(prev) => fit_from_suff_stats(
                        prev.clone(),
                        &mean_log_probs(members, temperature),
                        TRAIN_FIT_TOL,
                        DEFAULT_MLE_MAX_ITER,
                        true,
                    ),
                    None => {
                        let cats: Vec<Categorical> = members
                            .iter()
                            .map(|p| Categorical::from_raw(temper_raw(p, temperature)))
                            .collect();
                        let init = dirichlet_mle_fit(&cats, TRAIN_FIT_TOL, 0)?
                            .params
                            .alpha()
                            .to_vec();
                        fit_from_suff_stats(
                            init,
                            &mean_log_probs(members, temperature),
                            TRAIN_FIT_TOL,
                            DEFAULT_MLE_MAX_ITER,
                            true,
                        )
                    }
                };
                if !fit.converged {
                    unconverged += 1;
                }
                row.push(fit.params.alpha().to_vec());
            }
            fits.push(row);
        }
        self.fits = fits;
        self.temperature = temperature;
        self.unconverged = unconverged;
        Ok(unconverged)
    }

    fn position(&self, s: usize, l: usize, _: usize, z: &[f64]) -> (f64, Vec<f64>) {
        kl_logits(z, &self.fits[s][l])
    }
}

/// Loss summed over the real positions of `batch` and the parameter
/// gradients of the mean. Returns `(sum, count, grads)`.
fn batch_gradients(
    model: &SeqModel,
    corpus: &[SentencePair],
    batch: &[usize],
    objective: &dyn Objective,
) -> Result<(f64, usize, Vec<Vec<f64>>)> {
    let srcs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].source.as_slice()).collect();
    let mut g = Graph::new(model, &srcs)?;
    let v = model.config().vocab_size;
    let steps = batch
        .iter()
        .map(|&i| corpus[i].reference.len() + 1)
        .max()
        .unwrap_or(0);
    let count: usize = batch.iter().map(|&i| corpus[i].reference.len() + 1).sum();
    let norm = 1.0 / count as f64;
    let mut prev = vec![BOS; batch.len()];
    let mut total = 0.0;
    let mut inputs = Vec::with_capacity(steps);
    let mut grads = Vec::with_capacity(steps);
    for l in 0..steps {
        let node = g.step(&prev);
        let logits = g.logits(node);
        let mut grad = vec![0.0; batch.len() * v];
        for (b, &s) in batch.iter().enumerate() {
            let reference = &corpus[s].reference;
            if l <= reference.len() {
                let y = reference.get(l).copied().unwrap_or(EOS);
                let (loss, dz) = objective.position(s, l, y, &logits[b * v..(b + 1) * v]);
                total += loss;
                for (dst, d) in grad[b * v..(b + 1) * v].iter_mut().zip(dz) {
                    *dst = d * norm;
                }
            }
            prev[b] = reference.get(l).copied().unwrap_or(PAD);
        }
        inputs.push(node);
        grads.push(grad);
    }
    let root = g.tape_mut().loss(total * norm, inputs, grads);
    let params = g.parameter_gradients(root)?;
    Ok((total, count, params))
}

/// Student-side objectives whose gradients can be inspected directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentObjective {
    /// Token-level distillation against the tempered ensemble mean.
    Kd,
    /// Dirichlet negative log-likelihood of the tempered members.
    Nll,
    /// KL from the per-token maximum-likelihood Dirichlet fit.
    Kl,
}

fn dirichlet_kl_objective(
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    temperature: f64,
) -> Result<DirichletKl> {
    let mut obj = DirichletKl {
        teacher: teacher_outputs(ensemble, corpus, corpus.len().max(1))?,
        fits: Vec::new(),
        temperature: f64::NAN,
        unconverged: 0,
    };
    obj.begin_epoch(temperature)?;
    Ok(obj)
}

/// The fitted Dirichlet targets the KL objective trains against at
/// `temperature`, one per reference position (end marker included).
pub fn kl_fitted_targets(
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    temperature: f64,
) -> Result<Vec<Vec<DirichletParams>>> {
    check_teachers(ensemble)?;
    let obj = dirichlet_kl_objective(ensemble, corpus, temperature)?;
    obj.fits
        .into_iter()
        .map(|row| row.into_iter().map(DirichletParams::new).collect())
        .collect()
}

/// Loss averaged over all real positions of `corpus` and its gradient with
/// respect to every student parameter, as used by one optimiser step.
pub fn objective_gradients(
    student: &SeqModel,
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    objective: StudentObjective,
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_teachers(ensemble)?;
    check_corpus(corpus, student)?;
    if !(temperature >= 1.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be at least 1, got {temperature}"
        )));
    }
    let expected = match objective {
        StudentObjective::Kd => HeadMode::Softmax,
        StudentObjective::Nll | StudentObjective::Kl => HeadMode::Concentration,
    };
    if student.head_mode() != expected {
        return Err(Error::contract("student head does not match the objective"));
    }
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let teacher = || teacher_outputs(ensemble, corpus, corpus.len());
    let (total, count, grads) = match objective {
        StudentObjective::Kd => {
            let mut obj = TokenKd {
                teacher: teacher()?,
                temper: true,
                temperature: 1.0,
            };
            obj.begin_epoch(temperature)?;
            batch_gradients(student, corpus, &idx, &obj)?
        }
        StudentObjective::Nll => {
            let mut obj = DirichletNll {
                teacher: teacher()?,
                mean_logs: Vec::new(),
                temperature: f64::NAN,
            };
            obj.begin_epoch(temperature)?;
            batch_gradients(student, corpus, &idx, &obj)?
        }
        StudentObjective::Kl => {
            let obj = dirichlet_kl_objective(ensemble, corpus, temperature)?;
            batch_gradients(student, corpus, &idx, &obj)?
        }
    };
    Ok((total / count as f64, grads))
}

fn check_corpus(corpus: &[SentencePair], model: &SeqModel) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    let max_len = model.config().max_len;
    let vocab = model.config().vocab_size;
    for (i, p) in corpus.iter().enumerate() {
        let ok = |s: &[usize]| s.len() < max_len && s.iter().all(|&t| t < vocab);
        if !ok(&p.source) || !ok(&p.reference) {
            return Err(Error::contract(format!(
                "sentence {i} is too long or has tokens outside the vocabulary"
            )));
        }
    }
    Ok(())
}

fn run_training(
    mut model: SeqModel,
    corpus: &[SentencePair],
    config: &TrainConfig,
    objective: &mut dyn Objective,
    label: &str,
) -> Result<Trained> {
    check_corpus(corpus, &model)?;
    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0000);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let temperature = anneal_temperature(epoch, config);
        let unconverged_fits = objective.begin_epoch(temperature)?;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(config.batch_size) {
            let (loss, n, grads) = batch_gradients(&model, corpus, batch, objective)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "{label}: non-finite loss in epoch {epoch} (temperature {temperature:.3}); {}",
                    match &config.checkpoint_path {
                        Some(p) => format!("last good state in {}", p.display()),
                        None => "no checkpoint path configured".to_string(),
                    }
                )));
            }
            sum += loss;
            count += n;
            if let StepOutcome::Skipped =
                optimizer_step(model.params_mut(), &grads, &mut state, &adam)?
            {
                log::warn!("{label}: epoch {epoch}: skipped an update with a non-finite gradient");
            }
        }
        let entry = EpochLog {
            epoch,
            temperature,
            mean_loss: sum / count as f64,
            seconds: start.elapsed().as_secs_f64(),
            unconverged_fits,
        };
        log::info!("{label}: {entry}");
        history.push(entry);
        if let Some(path) = &config.checkpoint_path {
            checkpoint::save(&model, path)?;
        }
    }
    Ok(Trained { model, history })
}

/// Trains one softmax-headed member by cross-entropy against the references.
/// `seed` fixes both the initialisation and the batch order.
pub fn train_member(corpus: &[SentencePair], config: &TrainConfig, seed: u64) -> Result<Trained> {
    config.validate()?;
    let model = init_model(&config.model.with_head(HeadMode::Softmax).with_seed(seed))?;
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    run_training(
        model,
        corpus,
        &cfg,
        &mut CrossEntropy,
        &format!("member seed={seed}"),
    )
}

fn check_student_compat(ensemble: &[SeqModel], config: &TrainConfig) -> Result<()> {
    check_teachers(ensemble)?;
    if ensemble[0].config().vocab_size != config.model.vocab_size {
        return Err(Error::contract(
            "student and ensemble vocabulary sizes differ",
        ));
    }
    Ok(())
}

/// Token-level distillation of the ensemble's mean prediction into a softmax student.
pub fn train_distilled(
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    check_student_compat(ensemble, config)?;
    let model = init_model(&config.model.with_head(HeadMode::Softmax))?;
    check_corpus(corpus, &model)?;
    let mut objective = TokenKd {
        teacher: teacher_outputs(ensemble, corpus, config.batch_size)?,
        temper: config.temper_kd_targets,
        temperature: 1.0,
    };
    run_training(model, corpus, config, &mut objective, "distilled")
}

/// Distribution distillation into a concentration-head student trained from scratch.
pub fn train_distribution_distilled(
    ensemble: &[SeqModel],
    corpus: &[SentencePair],
    config: &TrainConfig,
    objective: DistObjective,
) -> Result<Trained> {
    config.validate()?;
    check_student_compat(ensemble, config)?;
    if ensemble.len() < 2 {
        return Err(Error::contract(
            "distribution distillation needs at least 2 members",
        ));
    }
    let model = init_model(&config.model.with_head(HeadMode::Concentration))?;
    check_corpus(corpus, &model)?;
    let teacher = teacher_outputs(ensemble, corpus, config.batch_size)?;
    match objective {
        DistObjective::Nll => {
            let mut obj = DirichletNll {
                teacher,
                mean_logs: Vec::new(),
                temperature: f64::NAN,
            };
            run_training(model, corpus, config, &mut obj, "dist-nll")
        }
        DistObjective::Kl => {
            let mut obj = DirichletKl {
                teacher,
                fits: Vec::new(),
                temperature: f64::NAN,
                unconverged: 0,
            };
            run_training(model, corpus, config, &mut obj, "dist-kl")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirmath::{dirichlet_sample, ALPHA_MAX};
    use crate::nnet::HeadOutput;
    use rand::Rng;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    fn dir(v: &[f64]) -> DirichletParams {
        DirichletParams::new(v.to_vec()).unwrap()
    }

    #[test]
    fn temperature_schedule() {
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(anneal_temperature(0, &cfg), 10.0);
        assert_eq!(anneal_temperature(5, &cfg), 6.5);
        assert_eq!(anneal_temperature(10, &cfg), 3.0);
        assert_eq!(anneal_temperature(19, &cfg), 3.0);
        let mut prev = f64::INFINITY;
        for e in 0..20 {
            let t = anneal_temperature(e, &cfg);
            assert!(t <= prev && (3.0..=10.0).contains(&t));
            prev = t;
        }
        let bad = TrainConfig {
            temperature_start: 2.0,
            temperature_end: 3.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kd_loss_examples() {
        let t = vec![TokenPosteriorSet::new(vec![cat(&[0.5, 0.5])]).unwrap()];
        let v = kd_loss(&t, &[cat(&[0.25, 0.75])]).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
        let set = TokenPosteriorSet::new(vec![cat(&[0.2, 0.8]), cat(&[0.6, 0.4])]).unwrap();
        assert!(kd_loss(&[set.clone()], &[set.mean()]).unwrap().abs() < 1e-9);
        assert!(kd_loss(&[set], &[]).is_err());
    }

    #[test]
    fn nll_uniform_student_ignores_targets() {
        let k = 4;
        let targets = vec![
            TokenPosteriorSet::new(vec![cat(&[0.1, 0.2, 0.3, 0.4]), cat(&[0.7, 0.1, 0.1, 0.1])])
                .unwrap(),
            TokenPosteriorSet::new(vec![cat(&[0.25; 4]), cat(&[0.97, 0.01, 0.01, 0.01])]).unwrap(),
        ];
        let ones = vec![DirichletParams::symmetric(k, 1.0).unwrap(); 2];
        let v = endd_nll_loss(&targets, &ones).unwrap();
        // ln Γ(4) = ln 6
        assert!((v + 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_approaches_differential_entropy() {
        let a = [2.0, 3.0, 5.0];
        let d = dir(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let members: Vec<Categorical> = (0..20_000)
            .map(|_| dirichlet_sample(&d, &mut rng))
            .collect();
        let v = endd_nll_loss(&[TokenPosteriorSet::new(members).unwrap()], &[d]).unwrap();
        // Closed-form entropy: ln B(α) + (α0 − K) ψ(α0) − Σ (α_c − 1) ψ(α_c).
        let a0: f64 = a.iter().sum();
        let ln_b: f64 =
            a.iter().map(|&x| ln_gamma_unchecked(x)).sum::<f64>() - ln_gamma_unchecked(a0);
        let h = ln_b + (a0 - 3.0) * digamma_unchecked(a0)
            - a.iter()
                .map(|&x| (x - 1.0) * digamma_unchecked(x))
                .sum::<f64>();
        assert!((v - h).abs() < 0.02, "{v} vs {h}");
    }

    #[test]
    fn nll_decreases_toward_fit() {
        let truth = dir(&[3.0, 1.5, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members: Vec<Categorical> = (0..200)
            .map(|_| dirichlet_sample(&truth, &mut rng))
            .collect();
        let set = TokenPosteriorSet::new(members).unwrap();
        let fit = fit_token_dirichlets(std::slice::from_ref(&set))
            .unwrap()
            .remove(0)
            .params;
        let start = [0.4, 9.0, 0.7];
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let w = i as f64 / 10.0;
            let a: Vec<f64> = start
                .iter()
                .zip(fit.alpha())
                .map(|(s, f)| s + w * (f - s))
                .collect();
            let v = endd_nll_loss(std::slice::from_ref(&set), &[dir(&a)]).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn kl_loss_examples() {
        let v = endd_kl_loss(&[dir(&[2.0, 2.0])], &[dir(&[1.0, 1.0])]).unwrap();
        assert!((v - 0.1252).abs() < 5e-4);
        let f = vec![dir(&[0.5, 3.0, 1.0]), dir(&[10.0, 2.0, 2.0])];
        assert!(endd_kl_loss(&f, &f).unwrap().abs() < 1e-9);
        assert!(endd_kl_loss(&f, &f[..1]).is_err());
    }

    #[test]
    fn fit_examples() {
        let truth = dir(&[3.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let members: Vec<Categorical> = (0..10_000)
            .map(|_| dirichlet_sample(&truth, &mut rng))
            .collect();
        let fit = &fit_token_dirichlets(&[TokenPosteriorSet::new(members).unwrap()]).unwrap()[0];
        assert!(fit.converged);
        assert!((fit.params.alpha()[0] / 3.0 - 1.0).abs() < 0.05);
        assert!((fit.params.alpha()[1] / 7.0 - 1.0).abs() < 0.05);

        let same = TokenPosteriorSet::new(vec![cat(&[0.3, 0.7]); 4]).unwrap();
        let fit = &fit_token_dirichlets(&[same]).unwrap()[0];
        assert!(!fit.converged);
        assert_eq!(
            fit.params.alpha().iter().cloned().fold(0.0, f64::max),
            ALPHA_MAX
        );
        let mean = crate::dirmath::dirichlet_mean(&fit.params);
        assert!((mean.probs()[0] - 0.3).abs() < 1e-4);

        let single = TokenPosteriorSet::new(vec![cat(&[0.3, 0.7])]).unwrap();
        assert!(fit_token_dirichlets(&[single]).is_err());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 8;
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = softmax_raw(
            &(0..k)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<_>>(),
        );
        let ml: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..-0.5)).collect();
        let fitted: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..5.0)).collect();
        let fns: Vec<Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>> = vec![
            Box::new(|z| cross_entropy_logits(z, 3)),
            Box::new(|z| kd_logits(z, &t)),
            Box::new(|z| nll_logits(z, &ml)),
            Box::new(|z| kl_logits(z, &fitted)),
        ];
        for f in &fns {
            let (_, g) = f(&z);
            for c in 0..k {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[c] += 1e-6;
                zm[c] -= 1e-6;
                let fd = (f(&zp).0 - f(&zm).0) / 2e-6;
                assert!(
                    (fd - g[c]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{c}: {fd} vs {}",
                    g[c]
                );
            }
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-2,
            model: ModelConfig {
                vocab_size: 8,
                embed_dim: 3,
                hidden_dim: 4,
                head_mode: HeadMode::Softmax,
                max_len: 12,
                seed: 3,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus() -> Vec<SentencePair> {
        vec![
            SentencePair {
                source: vec![4, 5, 6],
                reference: vec![4, 5, 7],
            },
            SentencePair {
                source: vec![6, 6],
                reference: vec![6],
            },
            SentencePair {
                source: vec![7, 4, 5, 6, 4],
                reference: vec![7, 4, 5, 6],
            },
        ]
    }

    fn tensor_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        // Tensors whose gradient is numerically zero are compared absolutely.
        diff / scale.max(1e-7)
    }

    /// Compares tape gradients of an objective against central differences of
    /// the public loss evaluated through the teacher-forced forward pass.
    fn check_model_gradient(
        model: &SeqModel,
        corpus: &[SentencePair],
        objective: &dyn Objective,
        public_loss: &dyn Fn(&SeqModel) -> f64,
    ) {
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let (_, _, grads) = batch_gradients(model, corpus, &idx, objective).unwrap();
        let eps = 1e-5;
        for (p, g) in grads.iter().enumerate() {
            let mut fd = vec![0.0; g.len()];
            for i in 0..g.len() {
                let mut plus = model.clone();
                plus.params_mut()[p].values[i] += eps;
                let mut minus = model.clone();
                minus.params_mut()[p].values[i] -= eps;
                fd[i] = (public_loss(&plus) - public_loss(&minus)) / (2.0 * eps);
            }
            let err = tensor_rel_err(g, &fd);
            assert!(
                err < 1e-4,
                "{}: relative error {err}",
                model.params()[p].name
            );
        }
    }

    /// A student with weights large enough that attention has visible gradients.
    fn student(cfg: &TrainConfig, head: HeadMode) -> SeqModel {
        let mut m = init_model(&cfg.model.with_head(head).with_seed(42)).unwrap();
        for t in m.params_mut() {
            t.values.iter_mut().for_each(|v| *v *= 3.0);
        }
        m
    }

    fn random_teachers(cfg: &TrainConfig, m: usize) -> Vec<SeqModel> {
        (0..m)
            .map(|i| init_model(&cfg.model.with_seed(100 + i as u64)).unwrap())
            .collect()
    }

    fn all_targets(
        ensemble: &[SeqModel],
        corpus: &[SentencePair],
        t: f64,
    ) -> Vec<Vec<TokenPosteriorSet>> {
        corpus
            .iter()
            .map(|p| collect_targets(ensemble, &p.source, &p.reference, t).unwrap())
            .collect()
    }

    fn positions(corpus: &[SentencePair]) -> f64 {
        corpus.iter().map(|p| p.reference.len() + 1).sum::<usize>() as f64
    }

    #[test]
    fn kd_model_gradient() {
        let cfg = small_config();
        let corpus = tiny_corpus();
        let teachers = random_teachers(&cfg, 3);
        let student = student(&cfg, HeadMode::Softmax);
        let mut obj = TokenKd {
            teacher: teacher_outputs(&teachers, &corpus, 2).unwrap(),
            temper: true,
            temperature: 1.0,
        };
        obj.begin_epoch(2.0).unwrap();
        let targets = all_targets(&teachers, &corpus, 2.0);
        let n = positions(&corpus);
        let public = |m: &SeqModel| {
            corpus
                .iter()
                .zip(&targets)
                .map(|(p, t)| {
                    let outs: Vec<Categorical> = m
                        .forward_teacher_forced(&p.source, &p.reference)
                        .unwrap()
                        .iter()
                        .map(HeadOutput::predictive)
                        .collect();
                    kd_loss(t, &outs).unwrap() * t.len() as f64
                })
                .sum::<f64>()
                / n
        };
        check_model_gradient(&student, &corpus, &obj, &public);
    }

    fn dirichlet_outputs(m: &SeqModel, p: &SentencePair) -> Vec<DirichletParams> {
        m.forward_teacher_forced(&p.source, &p.reference)
            .unwrap()
            .into_iter()
            .map(|o| o.as_dirichlet().unwrap().clone())
            .collect()
    }

    #[test]
    fn nll_model_gradient() {
        let cfg = small_config();
        let corpus = tiny_corpus();
        let teachers = random_teachers(&cfg, 3);
        let student = student(&cfg, HeadMode::Concentration);
        let mut obj = DirichletNll {
            teacher: teacher_outputs(&teachers, &corpus, 2).unwrap(),
            mean_logs: Vec::new(),
            temperature: f64::NAN,
        };
        obj.begin_epoch(1.5).unwrap();
        let targets = all_targets(&teachers, &corpus, 1.5);
        let n = positions(&corpus);
        let public = |m: &SeqModel| {
            corpus
                .iter()
                .zip(&targets)
                .map(|(p, t)| endd_nll_loss(t, &dirichlet_outputs(m, p)).unwrap() * t.len() as f64)
                .sum::<f64>()
                / n
        };
        check_model_gradient(&student, &corpus, &obj, &public);
    }

    #[test]
    fn kl_model_gradient() {
        let cfg = small_config();
        let corpus = tiny_corpus();
        let teachers = random_teachers(&cfg, 4);
        let student = student(&cfg, HeadMode::Concentration);
        let mut obj = DirichletKl {
            teacher: teacher_outputs(&teachers, &corpus, 2).unwrap(),
            fits: Vec::new(),
            temperature: f64::NAN,
            unconverged: 0,
        };
        obj.begin_epoch(1.0).unwrap();
        let n = positions(&corpus);
        let fits = obj.fits.clone();
        let public = |m: &SeqModel| {
            corpus
                .iter()
                .zip(&fits)
                .map(|(p, f)| {
                    let fitted: Vec<DirichletParams> = f.iter().map(|a| dir(a)).collect();
                    endd_kl_loss(&fitted, &dirichlet_outputs(m, p)).unwrap() * f.len() as f64
                })
                .sum::<f64>()
                / n
        };
        check_model_gradient(&student, &corpus, &obj, &public);
    }

    #[test]
    fn collect_targets_properties() {
        let cfg = small_config();
        let corpus = tiny_corpus();
        let teachers = random_teachers(&cfg, 3);
        let p = &corpus[0];
        let raw = collect_targets(&teachers[..1], &p.source, &p.reference, 1.0).unwrap();
        let direct = teachers[0]
            .forward_teacher_forced(&p.source, &p.reference)
            .unwrap();
        assert_eq!(raw.len(), p.reference.len() + 1);
        for (set, out) in raw.iter().zip(&direct) {
            assert_eq!(&set.members()[0], out.as_categorical().unwrap());
        }
        let hot = collect_targets(&teachers, &p.source, &p.reference, 10.0).unwrap();
        let cold = collect_targets(&teachers, &p.source, &p.reference, 1.0).unwrap();
        for (h, c) in hot.iter().zip(&cold) {
            for (hm, cm) in h.members().iter().zip(c.members()) {
                let hmax = hm.probs().iter().cloned().fold(0.0, f64::max);
                let cmax = cm.probs().iter().cloned().fold(0.0, f64::max);
                assert!(hmax <= cmax + 1e-15);
            }
        }
        let other = init_model(&ModelConfig {
            vocab_size: 9,
            ..cfg.model.clone()
        })
        .unwrap();
        assert!(
            collect_targets(&[teachers[0].clone(), other], &p.source, &p.reference, 1.0).is_err()
        );
    }

    #[test]
    fn member_training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            epochs: 6,
            ..small_config()
        };
        let corpus = tiny_corpus();
        let a = train_member(&corpus, &cfg, 7).unwrap();
        let b = train_member(&corpus, &cfg, 7).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 6);
        assert!(a.history.last().unwrap().mean_loss < a.history[0].mean_loss);
        let c = train_member(&corpus, &cfg, 8).unwrap();
        assert_ne!(a.model, c.model);
        assert!(train_member(&[], &cfg, 7).is_err());
    }

    #[test]
    fn students_train_and_are_deterministic() {
        let cfg = small_config();
        let corpus = tiny_corpus();
        let teachers: Vec<SeqModel> = (0..3)
            .map(|s| train_member(&corpus, &cfg, s).unwrap().model)
            .collect();
        let d1 = train_distilled(&teachers, &corpus, &cfg).unwrap();
        let d2 = train_distilled(&teachers, &corpus, &cfg).unwrap();
        assert_eq!(d1.model, d2.model);
        assert_eq!(d1.model.head_mode(), HeadMode::Softmax);
        for obj in [DistObjective::Nll, DistObjective::Kl] {
            let s1 = train_distribution_distilled(&teachers, &corpus, &cfg, obj).unwrap();
            let s2 = train_distribution_distilled(&teachers, &corpus, &cfg, obj).unwrap();
            assert_eq!(s1.model, s2.model);
            assert_eq!(s1.model.head_mode(), HeadMode::Concentration);
            assert!(s1.history.iter().all(|h| h.mean_loss.is_finite()));
        }
        assert!(
            train_distribution_distilled(&teachers[..1], &corpus, &cfg, DistObjective::Kl).is_err()
        );
        assert!("kl".parse::<DistObjective>().is_ok());
        assert!("xx".parse::<DistObjective>().is_err());
    }

    #[test]
    fn checkpoint_written_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = TrainConfig {
            checkpoint_path: Some(path.clone()),
            ..small_config()
        };
        let t = train_member(&tiny_corpus(), &cfg, 1).unwrap();
        assert_eq!(checkpoint::load(&path).unwrap(), t.model);
    }
}
