//! Tiny differentiable decoder-only policy.
//!
//! Exposes exact per-token log-probabilities, temperature sampling, position
//! masking, reverse-mode gradients of weighted log-prob objectives and a
//! finite-difference checker. All math runs in 64-bit floats unless the
//! architecture selects [`Precision::F32`].

mod arch;
mod batch;
mod gradcheck;
mod model;

use rand::Rng;
use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};

pub use arch::{ArchConfig, Layout, Precision, TensorKind, TensorSpec};
pub use batch::{BatchRow, LogProbs, TokenBatch};
pub use gradcheck::{finite_diff_check, finite_diff_check_grad, max_relative_error, GradCheckOptions};
pub use model::{log_softmax, Model, Real, Trace};

use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::seed;

/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.1;
/// Standard deviation of bias and gain perturbations at initialization.
pub const INIT_BIAS_STD: f64 = 0.01;

/// Immutable parameter state of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub params: Vec<f64>,
    pub arch: ArchConfig,
    pub step: u64,
    layout: Layout,
}

impl PolicySnapshot {
    pub fn from_params(arch: ArchConfig, params: Vec<f64>, step: u64) -> crate::Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return crate::error::input(format!(
                "parameter count {} does not match manifest ({})",
                params.len(),
                layout.total
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return crate::error::input("parameters must be finite");
        }
        Ok(Self { params, arch, step, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// New snapshot with replaced parameters (same architecture).
    pub fn with_params(&self, params: Vec<f64>, step: u64) -> Self {
        debug_assert_eq!(params.len(), self.params.len());
        Self { params, arch: self.arch.clone(), step, layout: self.layout.clone() }
    }

    fn cast<T: Real>(&self) -> Vec<T> {
        self.params.iter().map(|&p| T::from_f64(p).expect("finite")).collect()
    }
}

/// Seeded initialization: weights ~ N(0, INIT_STD^2), biases ~ N(0,
/// INIT_BIAS_STD^2), layer-norm gains ~ 1 + N(0, INIT_BIAS_STD^2).
pub fn init_params(arch: &ArchConfig, seed: u64) -> crate::Result<PolicySnapshot> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut rng = seed::rng(seed::mix(&[0x1417, seed]));
    let mut params = Vec::with_capacity(layout.total);
    for spec in &layout.manifest {
        for _ in 0..spec.numel() {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.push(match spec.kind {
                TensorKind::Weight => INIT_STD * z,
                TensorKind::Bias => INIT_BIAS_STD * z,
                TensorKind::Gain => 1.0 + INIT_BIAS_STD * z,
            });
        }
    }
    PolicySnapshot::from_params(arch.clone(), params, 0)
}

/// A policy whose next-token distribution depends only on the absolute
/// position of the predicting token. `script[i]` lists `(token, p)` pairs
/// for the token predicted at position `first + i` with probabilities summing
/// to 1; listed tokens get probability `p` at temperature 1 (up to `e^-40`
/// leakage to the rest).
/// Positions outside the script predict uniformly.
pub fn scripted_policy(
    arch: &ArchConfig,
    first: usize,
    script: &[Vec<(u32, f64)>],
) -> crate::Result<PolicySnapshot> {
    arch.validate()?;
    let (d, v, ctx) = (arch.width, arch.vocab_size, arch.context_length);
    if ctx > d {
        return crate::error::config("scripted policies need context_length <= width");
    }
    if first + script.len() > ctx {
        return crate::error::input("script runs past the context length");
    }
    const LIFT: f64 = 40.0;
    let layout = Layout::new(arch);
    let mut params = vec![0.0; layout.total];
    for t in 0..ctx {
        params[layout.pos_emb + t * d + t] = 1.0;
    }
    params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
    // LayerNorm maps e_t to alpha*e_t + beta*1.
    let n = d as f64;
    let s = ((1.0 / n) * (1.0 - 1.0 / n) + model::LN_EPS).sqrt();
    let (alpha, beta) = (1.0 / s, -(1.0 / n) / s);
    for (i, dist) in script.iter().enumerate() {
        let mut total = 0.0;
        for &(tok, p) in dist {
            if tok as usize >= v || !(p > 0.0 && p <= 1.0) {
                return crate::error::input(format!("bad script entry ({tok}, {p}) at offset {i}"));
            }
            total += p;
            params[layout.w_out + (first + i) * v + tok as usize] = (p.ln() + LIFT) / alpha;
        }
        if (total - 1.0).abs() > 1e-9 {
            return crate::error::input(format!("script probabilities at offset {i} sum to {total}"));
        }
    }
    for tok in 0..v {
        let col: f64 = (0..d).map(|j| params[layout.w_out + j * v + tok]).sum();
        params[layout.b_out + tok] = -beta * col;
    }
    PolicySnapshot::from_params(arch.clone(), params, 0)
}

fn check_tokens(snap: &PolicySnapshot, batch: &TokenBatch) -> crate::Result<()> {
    let v = snap.arch.vocab_size as u32;
    if let Some(bad) = batch.tokens.iter().find(|&&t| t >= v) {
        return crate::error::input(format!("token id {bad} >= vocab size {v}"));
    }
    for i in 0..batch.rows() {
        if batch.lengths[i] > snap.arch.context_length {
            return crate::error::input(format!("row {i} exceeds the context length"));
        }
    }
    if let Some(pad) = snap.arch.pad_token {
        batch.validate(pad)?;
    }
    Ok(())
}

/// Forward pass over one row, returning the trace and per-position log-probs.
fn row_forward<T: Real>(
    model: &Model<'_, T>,
    tokens: &[u32],
    mask: &[u8],
    temperature: f64,
) -> (Trace<T>, Vec<f64>) {
    let keep: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let tr = model.forward(tokens, &keep);
    let temp = model::cst::<T>(temperature);
    let mut lp = vec![0.0; tokens.len()];
    let mut cached: Option<(usize, Vec<T>)> = None;
    for t in 1..tokens.len() {
        let Some(s) = tr.predictor(t) else { continue };
        if cached.as_ref().map(|c| c.0) != Some(s) {
            cached = Some((
                s,
                log_softmax(tr.logits(s, model.arch.vocab_size), temp, model.arch.pad_token),
            ));
        }
        let row = &cached.as_ref().expect("set above").1;
        let v = row[tokens[t] as usize].to_f64().expect("finite");
        // PAD has zero probability under the policy; its entry is defined as 0.
        lp[t] = if v.is_finite() { v } else { 0.0 };
    }
    (tr, lp)
}

fn logprob_impl<T: Real>(snap: &PolicySnapshot, batch: &TokenBatch, temperature: f64) -> LogProbs {
    let p = snap.cast::<T>();
    let model = Model::new(&p, &snap.arch, &snap.layout);
    let rows: Vec<Vec<f64>> = (0..batch.rows())
        .into_par_iter()
        .map(|i| row_forward(&model, batch.row_tokens(i), batch.row_mask(i), temperature).1)
        .collect();
    let mut values = vec![0.0; batch.rows() * batch.width];
    for (i, r) in rows.into_iter().enumerate() {
        values[i * batch.width..i * batch.width + r.len()].copy_from_slice(&r);
    }
    LogProbs { width: batch.width, values }
}

/// Per-token log-probabilities at temperature 1.
pub fn logprob(snap: &PolicySnapshot, batch: &TokenBatch) -> crate::Result<LogProbs> {
    logprob_at(snap, batch, 1.0)
}

/// Per-token log-probabilities of the tempered distribution softmax(z / T).
///
/// Entry `(i, t)` is the log-probability of token `t` given the visible
/// positions before it; position 0 and trailing PAD entries are 0.
pub fn logprob_at(snap: &PolicySnapshot, batch: &TokenBatch, temperature: f64) -> crate::Result<LogProbs> {
    check_tokens(snap, batch)?;
    if !(temperature > 0.0) {
        return crate::error::input("log-prob temperature must be positive");
    }
    Ok(match snap.arch.precision {
        Precision::F64 => logprob_impl::<f64>(snap, batch, temperature),
        Precision::F32 => logprob_impl::<f32>(snap, batch, temperature),
    })
}

fn backward_impl<T: Real, F>(
    snap: &PolicySnapshot,
    batch: &TokenBatch,
    temperature: f64,
    scalars_for: F,
) -> crate::Result<(LogProbs, Vec<f64>)>
where
    F: Fn(usize, &[f64]) -> crate::Result<Vec<f64>> + Sync,
{
    let p = snap.cast::<T>();
    let model = Model::new(&p, &snap.arch, &snap.layout);
    let v = snap.arch.vocab_size;
    let temp = model::cst::<T>(temperature);
    let per_row: Vec<(Vec<f64>, Option<Vec<T>>)> = (0..batch.rows())
        .into_par_iter()
        .map(|i| {
            let toks = batch.row_tokens(i);
            let (tr, lp) = row_forward(&model, toks, batch.row_mask(i), temperature);
            let s = scalars_for(i, &lp)?;
            check_row_scalars(batch, i, &s)?;
            if s.iter().all(|&x| x == 0.0) {
                return Ok((lp, None));
            }
            let mut dlogits = vec![T::zero(); toks.len() * v];
            for t in 1..toks.len() {
                if s[t] == 0.0 {
                    continue;
                }
                let pred = tr.predictor(t).expect("position 0 is visible");
                let probs = log_softmax(tr.logits(pred, v), temp, snap.arch.pad_token);
                let w = model::cst::<T>(s[t]) / temp;
                let row = &mut dlogits[pred * v..(pred + 1) * v];
                for (o, lp) in probs.iter().enumerate() {
                    row[o] = row[o] - w * lp.exp();
                }
                row[toks[t] as usize] += w;
            }
            let mut g = vec![T::zero(); p.len()];
            model.backward(&tr, &dlogits, &mut g);
            Ok((lp, Some(g)))
        })
        .collect::<crate::Result<_>>()?;
    let mut grad = vec![0.0; p.len()];
    let mut values = vec![0.0; batch.rows() * batch.width];
    for (i, (lp, g)) in per_row.into_iter().enumerate() {
        values[i * batch.width..i * batch.width + lp.len()].copy_from_slice(&lp);
        if let Some(g) = g {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b.to_f64().expect("finite");
            }
        }
    }
    Ok((LogProbs { width: batch.width, values }, grad))
}

fn check_row_scalars(batch: &TokenBatch, i: usize, s: &[f64]) -> crate::Result<()> {
    if s.len() != batch.lengths[i] {
        return crate::error::input(format!("row {i}: scalar count does not match the row length"));
    }
    for (t, &x) in s.iter().enumerate() {
        let at = i * batch.width + t;
        if !x.is_finite() {
            return crate::error::input("per-token scalars must be finite");
        }
        if x != 0.0 && (batch.loss_weight[at] == 0.0 || batch.mask[at] == 0) {
            return crate::error::input(format!(
                "scalar at row {i} position {t} is nonzero where the loss weight or mask is zero"
            ));
        }
    }
    Ok(())
}

/// Gradient of `sum_{i,t} scalars[i,t] * logprob[i,t]` at temperature 1.
pub fn backward(snap: &PolicySnapshot, batch: &TokenBatch, scalars: &[f64]) -> crate::Result<Vec<f64>> {
    backward_at(snap, batch, scalars, 1.0).map(|(_, g)| g)
}

/// Tempered variant of [`backward`]; also returns the log-probs it computed.
pub fn backward_at(
    snap: &PolicySnapshot,
    batch: &TokenBatch,
    scalars: &[f64],
    temperature: f64,
) -> crate::Result<(LogProbs, Vec<f64>)> {
    if scalars.len() != batch.rows() * batch.width {
        return crate::error::input("per-token scalars do not match the batch shape");
    }
    backward_with(snap, batch, temperature, |i, lp| {
        Ok(scalars[i * batch.width..i * batch.width + lp.len()].to_vec())
    })
}

/// Like [`backward_at`], but the scalars of row `i` are produced from that
/// row's freshly computed log-probs, so objectives that depend on the current
/// log-probs need a single forward pass.
pub fn backward_with<F>(
    snap: &PolicySnapshot,
    batch: &TokenBatch,
    temperature: f64,
    scalars_for: F,
) -> crate::Result<(LogProbs, Vec<f64>)>
where
    F: Fn(usize, &[f64]) -> crate::Result<Vec<f64>> + Sync,
{
    check_tokens(snap, batch)?;
    if !(temperature > 0.0) {
        return crate::error::input("temperature must be positive");
    }
    match snap.arch.precision {
        Precision::F64 => backward_impl::<f64, _>(snap, batch, temperature, scalars_for),
        Precision::F32 => backward_impl::<f32, _>(snap, batch, temperature, scalars_for),
    }
}

/// Response tokens drawn by [`sample`] with their log-probabilities under the
/// sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    /// Whether generation stopped on EOS (rather than the length limit).
    pub finished: bool,
}

fn sample_impl<T: Real>(
    model: &Model<'_, T>,
    prefix: &[u32],
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Sample {
    let arch = model.arch;
    let v = arch.vocab_size;
    let mut rng = seed::rng(seed);
    let mut tr = model.start();
    for &t in prefix {
        model.push(&mut tr, t, true);
    }
    let mut out = Sample { tokens: Vec::new(), logprobs: Vec::new(), finished: false };
    let budget = max_new.min(arch.context_length - prefix.len());
    for step in 0..budget {
        let logits = tr.logits(tr.len() - 1, v);
        let (tok, lp) = if temperature == 0.0 {
            let lp = log_softmax(logits, T::one(), arch.pad_token);
            let mut best = 0usize;
            for o in 0..v {
                if Some(o as u32) != arch.pad_token
                    && (Some(best as u32) == arch.pad_token || logits[o] > logits[best])
                {
                    best = o;
                }
            }
            (best as u32, lp[best].to_f64().expect("finite"))
        } else {
            let lp = log_softmax(logits, model::cst::<T>(temperature), arch.pad_token);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_valid = 0;
            for (o, l) in lp.iter().enumerate() {
                let p = l.to_f64().expect("finite or -inf").exp();
                if p > 0.0 {
                    last_valid = o;
                }
                acc += p;
                if u < acc && p > 0.0 {
                    chosen = Some(o);
                    break;
                }
            }
            let o = chosen.unwrap_or(last_valid);
            (o as u32, lp[o].to_f64().expect("finite"))
        };
        out.tokens.push(tok);
        out.logprobs.push(lp);
        if Some(tok) == arch.eos_token {
            out.finished = true;
            break;
        }
        if step + 1 < budget {
            model.push(&mut tr, tok, true);
        }
    }
    out
}

/// Autoregressive sampling from softmax(logits / temperature).
///
/// Temperature 0 is greedy decoding with lowest-id tie-break. Generation stops
/// at EOS or after `max_new` tokens (or when the context is full).
pub fn sample(
    snap: &PolicySnapshot,
    prefix: &[u32],
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> crate::Result<Sample> {
    let mut s = Sampler::new(snap);
    s.sample(prefix, temperature, max_new, seed)
}

/// Reusable sampler holding parameters cast to the compute precision.
pub struct Sampler<'a> {
    snap: &'a PolicySnapshot,
    p32: Vec<f32>,
}

impl<'a> Sampler<'a> {
    pub fn new(snap: &'a PolicySnapshot) -> Self {
        let p32 = match snap.arch.precision {
            Precision::F64 => Vec::new(),
            Precision::F32 => snap.cast::<f32>(),
        };
        Self { snap, p32 }
    }

    pub fn sample(&mut self, prefix: &[u32], temperature: f64, max_new: usize, seed: u64) -> crate::Result<Sample> {
        let arch = &self.snap.arch;
        if prefix.is_empty() || prefix.len() >= arch.context_length {
            return crate::error::input(format!(
                "prefix of length {} does not fit context {}",
                prefix.len(),
                arch.context_length
            ));
        }
        if prefix.iter().any(|&t| t as usize >= arch.vocab_size) {
            return crate::error::input("prefix token outside vocabulary");
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return crate::error::input("temperature must be finite and non-negative");
        }
        Ok(match arch.precision {
            Precision::F64 => {
                let m = Model::new(&self.snap.params, arch, &self.snap.layout);
                sample_impl(&m, prefix, temperature, max_new, seed)
            }
            Precision::F32 => {
                let m = Model::new(&self.p32, arch, &self.snap.layout);
                sample_impl(&m, prefix, temperature, max_new, seed)
            }
        })
    }
}

/// A supervised sequence: `input ⊕ target`, trained on the target part.
#[derive(Debug, Clone, PartialEq)]
pub struct FitExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

/// Mean per-token negative log-likelihood of the targets.
pub fn mean_nll(snap: &PolicySnapshot, corpus: &[FitExample]) -> crate::Result<f64> {
    let (batch, n) = fit_batch(snap, corpus.iter())?;
    let lp = logprob(snap, &batch)?;
    let total: f64 = lp.values.iter().zip(&batch.loss_weight).map(|(l, w)| l * w).sum();
    Ok(-total / n)
}

fn fit_batch<'a>(
    snap: &PolicySnapshot,
    examples: impl Iterator<Item = &'a FitExample>,
) -> crate::Result<(TokenBatch, f64)> {
    let mut rows = Vec::new();
    let mut n = 0.0;
    for e in examples {
        if e.input.is_empty() || e.target.is_empty() {
            return crate::error::input("fit example needs non-empty input and target");
        }
        let mut tokens = e.input.clone();
        tokens.extend_from_slice(&e.target);
        let mut w = vec![0.0; e.input.len()];
        w.extend(std::iter::repeat(1.0).take(e.target.len()));
        n += e.target.len() as f64;
        rows.push(BatchRow { mask: vec![1; tokens.len()], tokens, loss_weight: w });
    }
    let pad = snap.arch.pad_token.unwrap_or(u32::MAX);
    Ok((TokenBatch::from_rows(&rows, pad)?, n))
}

/// Full-batch maximum-likelihood fit with AdamW at learning rate `lr`.
pub fn warmstart_fit(
    snap: &PolicySnapshot,
    corpus: &[FitExample],
    epochs: usize,
    lr: f64,
) -> crate::Result<PolicySnapshot> {
    let opts = FitOptions {
        batch_size: corpus.len().max(1),
        seed: 0,
        optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
    };
    warmstart_fit_with(snap, corpus, epochs, &opts).map(|(s, _)| s)
}

/// Mini-batch maximum-likelihood fit. Returns the snapshot and the mean
/// training NLL of each epoch (measured on the mini-batches as visited).
pub fn warmstart_fit_with(
    snap: &PolicySnapshot,
    corpus: &[FitExample],
    epochs: usize,
    opts: &FitOptions,
) -> crate::Result<(PolicySnapshot, Vec<f64>)> {
    if corpus.is_empty() {
        return crate::error::input("warm-start corpus is empty");
    }
    opts.optimizer.validate()?;
    let mut params = snap.params.clone();
    let mut state = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let bs = opts.batch_size.max(1);
    for epoch in 0..epochs {
        if bs < corpus.len() {
            let mut rng = seed::rng(seed::mix(&[opts.seed, epoch as u64]));
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
        }
        let mut nll_sum = 0.0;
        let mut tok_sum = 0.0;
        for chunk in order.chunks(bs) {
            let cur = snap.with_params(params.clone(), snap.step);
            let (batch, n) = fit_batch(&cur, chunk.iter().map(|&i| &corpus[i]))?;
            let scalars: Vec<f64> = batch.loss_weight.iter().map(|w| -w / n).collect();
            let (lp, grad) = backward_at(&cur, &batch, &scalars, 1.0)?;
            let ll: f64 = lp.values.iter().zip(&batch.loss_weight).map(|(l, w)| l * w).sum();
            nll_sum -= ll;
            tok_sum += n;
            adamw_step(&mut params, &grad, &mut state, &opts.optimizer)?;
        }
        history.push(nll_sum / tok_sum);
    }
    Ok((snap.with_params(params, snap.step), history))
}

#[cfg(test)]
pub(crate) mod tests;
