//! Group-normalized advantages, clipped surrogate objectives (GRPO and GPSO),
//! the k3 KL penalty and the AdamW parameter update.
//!
//! Losses return the gradient of the objective to maximize. The surrogate of
//! one group is the mean over trajectories of the mean over that
//! trajectory's response tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::pattern::PatternId;
use crate::policy::{backward_with, logprob_at, BatchRow, LogProbs, PolicySnapshot, TokenBatch};
use crate::rollout::PatternGroup;
use crate::selection::{SelectionResult, SuffixMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioLevel {
    #[default]
    Token,
    Sequence,
}

/// Source of the θ_old log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OldLogprobs {
    /// Recomputed under the update-time mask with the sampling snapshot.
    #[default]
    Recompute,
    /// The log-probs recorded while sampling, suffix visible.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub kl_beta: f64,
    pub eps_norm: f64,
    pub ratio: RatioLevel,
    pub old_logprobs: OldLogprobs,
    pub optimizer: AdamWConfig,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            kl_beta: 0.0,
            eps_norm: 1e-6,
            ratio: RatioLevel::Token,
            old_logprobs: OldLogprobs::Recompute,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return crate::error::config(format!("clip radius {} must be positive", self.epsilon));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return crate::error::config(format!("KL coefficient {} must be non-negative", self.kl_beta));
        }
        if !(self.eps_norm >= 0.0 && self.eps_norm.is_finite()) {
            return crate::error::config("eps_norm must be non-negative");
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps_norm: f64,
}

/// `A_k = (r_k - mean) / (std + eps_norm)` with the population deviation.
pub fn advantages(rewards: &[f64], eps_norm: f64) -> crate::Result<AdvantageSet> {
    if rewards.is_empty() {
        return crate::error::input("advantages need at least one reward");
    }
    if !(eps_norm >= 0.0) {
        return crate::error::input("eps_norm must be non-negative");
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g).sqrt();
    let values = if rewards.iter().all(|&r| r == rewards[0]) {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + eps_norm)).collect()
    };
    Ok(AdvantageSet { values, mean, std, eps_norm })
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` and the weight through which the gradient
/// of ρ passes: `A` when the unclipped branch is selected, else 0.
pub fn clipped_surrogate(rho: f64, a: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = rho * a;
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
    if unclipped <= clipped {
        (unclipped, a)
    } else {
        (clipped, 0.0)
    }
}

/// Update-time view of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupUpdate {
    pub pattern: PatternId,
    pub batch: TokenBatch,
    pub old_logprobs: LogProbs,
    pub ref_logprobs: Option<LogProbs>,
    pub rewards: Vec<f64>,
    /// Sampling temperature; training log-probs use the same tempered
    /// distribution.
    pub temperature: f64,
}

impl GroupUpdate {
    pub fn response_positions(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.batch.row_weights(i).iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(t, _)| t)
    }
}

/// Rows `prompt ⊕ suffix ⊕ response` with the given attention mask; loss
/// weight 1 on response positions only.
pub fn group_batch(group: &PatternGroup, mask: &SuffixMask, pad: u32) -> crate::Result<TokenBatch> {
    let prefix = group.prefix();
    if mask.rows() != group.trajectories.len() {
        return crate::error::input("mask rows do not match the group size");
    }
    let rows = group
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let n = prefix.len() + t.response.len();
            if mask.lengths[i] != n {
                return crate::error::input(format!("mask row {i} does not match the trajectory layout"));
            }
            let mut tokens = prefix.clone();
            tokens.extend_from_slice(&t.response);
            let mut loss_weight = vec![0.0; prefix.len()];
            loss_weight.extend(std::iter::repeat(1.0).take(t.response.len()));
            Ok(BatchRow { tokens, mask: mask.row(i)[..n].to_vec(), loss_weight })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    TokenBatch::from_rows(&rows, pad)
}

/// Builds the update batch and fixes θ_old (and the reference policy, if
/// any) log-probs for one group.
pub fn prepare_update(
    old: &PolicySnapshot,
    group: &PatternGroup,
    mask: &SuffixMask,
    mode: OldLogprobs,
    temperature: f64,
    reference: Option<&PolicySnapshot>,
) -> crate::Result<GroupUpdate> {
    let pad = old.arch.pad_token.unwrap_or(u32::MAX);
    let batch = group_batch(group, mask, pad)?;
    let rewards = group.rewards()?;
    let old_logprobs = match mode {
        OldLogprobs::Recompute => logprob_at(old, &batch, temperature)?,
        OldLogprobs::Rollout => {
            let p = group.prefix().len();
            let mut values = vec![0.0; batch.rows() * batch.width];
            for (i, t) in group.trajectories.iter().enumerate() {
                if t.logprobs.len() != t.response.len() {
                    return crate::error::input("trajectory log-probs do not match its tokens");
                }
                values[i * batch.width + p..i * batch.width + p + t.logprobs.len()].copy_from_slice(&t.logprobs);
            }
            LogProbs { width: batch.width, values }
        }
    };
    let ref_logprobs = reference.map(|r| logprob_at(r, &batch, temperature)).transpose()?;
    Ok(GroupUpdate { pattern: group.pattern.id, batch, old_logprobs, ref_logprobs, rewards, temperature })
}

/// `ρ[i,t] = exp(logπ_new - logπ_old)` at response positions, 1 elsewhere.
pub fn token_ratios(
    snap: &PolicySnapshot,
    old_logprobs: &LogProbs,
    batch: &TokenBatch,
    temperature: f64,
) -> crate::Result<Vec<f64>> {
    if old_logprobs.width != batch.width || old_logprobs.values.len() != batch.tokens.len() {
        return crate::error::input("old log-probs do not match the batch shape");
    }
    let new = logprob_at(snap, batch, temperature)?;
    Ok(ratios_from(&new.values, &old_logprobs.values, &batch.loss_weight))
}

fn ratios_from(new: &[f64], old: &[f64], weights: &[f64]) -> Vec<f64> {
    new.iter()
        .zip(old)
        .zip(weights)
        .map(|((n, o), &w)| if w > 0.0 { (n - o).exp() } else { 1.0 })
        .collect()
}

/// Outcome of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Surrogate minus `β·KL`.
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub tokens_contributing: usize,
    pub clipped_tokens: usize,
    pub skipped: bool,
    pub pattern: PatternId,
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn k3(ref_lp: f64, lp: f64) -> f64 {
    let d = ref_lp - lp;
    d.exp() - d - 1.0
}

/// Per-row surrogate, KL value and backward scalars.
struct RowTerms {
    surrogate: f64,
    kl: f64,
    scalars: Vec<f64>,
    contributing: usize,
    clipped: usize,
}

fn row_terms(u: &GroupUpdate, cfg: &ClipConfig, a: f64, i: usize, lp: &[f64]) -> RowTerms {
    let w = u.batch.width;
    let g = u.rewards.len() as f64;
    let old = &u.old_logprobs.values[i * w..i * w + lp.len()];
    let pos: Vec<usize> = u.response_positions(i).collect();
    let mut out = RowTerms { surrogate: 0.0, kl: 0.0, scalars: vec![0.0; lp.len()], contributing: 0, clipped: 0 };
    if pos.is_empty() {
        return out;
    }
    let n = pos.len() as f64;
    match cfg.ratio {
        RatioLevel::Token => {
            for &t in &pos {
                let rho = (lp[t] - old[t]).exp();
                let (obj, pass) = clipped_surrogate(rho, a, cfg.epsilon);
                out.surrogate += obj / n;
                out.scalars[t] = pass * rho / (n * g);
                if pass != 0.0 {
                    out.contributing += 1;
                } else if a != 0.0 {
                    out.clipped += 1;
                }
            }
        }
        RatioLevel::Sequence => {
            let log_rho: f64 = pos.iter().map(|&t| lp[t] - old[t]).sum();
            let rho = log_rho.exp();
            let (obj, pass) = clipped_surrogate(rho, a, cfg.epsilon);
            out.surrogate = obj;
            for &t in &pos {
                out.scalars[t] = pass * rho / g;
            }
            if pass != 0.0 {
                out.contributing = pos.len();
            } else if a != 0.0 {
                out.clipped = pos.len();
            }
        }
    }
    if let (Some(r), true) = (&u.ref_logprobs, cfg.kl_beta > 0.0) {
        let rl = &r.values[i * w..i * w + lp.len()];
        for &t in &pos {
            out.kl += k3(rl[t], lp[t]) / n;
            let d = rl[t] - lp[t];
            out.scalars[t] -= cfg.kl_beta * (1.0 - d.exp()) / (n * g);
        }
    }
    out
}

fn group_objective(
    snap: &PolicySnapshot,
    u: &GroupUpdate,
    cfg: &ClipConfig,
    skip: bool,
) -> crate::Result<(UpdateReport, Vec<f64>)> {
    if u.old_logprobs.width != u.batch.width || u.old_logprobs.values.len() != u.batch.tokens.len() {
        return crate::error::input("old log-probs do not match the batch shape");
    }
    if u.rewards.len() != u.batch.rows() {
        return crate::error::input("one reward per trajectory is required");
    }
    if cfg.kl_beta > 0.0 && u.ref_logprobs.is_none() {
        return crate::error::config("KL penalty enabled but no reference log-probs prepared");
    }
    let adv = advantages(&u.rewards, cfg.eps_norm)?;
    let skipped = skip || adv.values.iter().all(|&a| a == 0.0);
    let report = |surrogate: f64, kl: f64, grad: &[f64], contributing, clipped| UpdateReport {
        objective: surrogate - cfg.kl_beta * kl,
        surrogate,
        kl,
        grad_norm: l2_norm(grad),
        tokens_contributing: contributing,
        clipped_tokens: clipped,
        skipped,
        pattern: u.pattern,
    };
    if skipped {
        let grad = vec![0.0; snap.num_params()];
        return Ok((report(0.0, 0.0, &grad, 0, 0), grad));
    }
    let (lp, grad) = backward_with(snap, &u.batch, u.temperature, |i, lp| {
        Ok(row_terms(u, cfg, adv.values[i], i, lp).scalars)
    })?;
    let g = u.rewards.len() as f64;
    let (mut surrogate, mut kl, mut contributing, mut clipped) = (0.0, 0.0, 0, 0);
    for i in 0..u.batch.rows() {
        let n = u.batch.lengths[i];
        let r = row_terms(u, cfg, adv.values[i], i, &lp.row(i)[..n]);
        surrogate += r.surrogate / g;
        kl += r.kl / g;
        contributing += r.contributing;
        clipped += r.clipped;
    }
    Ok((report(surrogate, kl, &grad, contributing, clipped), grad))
}

/// Clipped group objective over one group (any conditioning the batch holds).
pub fn grpo_loss(
    snap: &PolicySnapshot,
    update: &GroupUpdate,
    cfg: &ClipConfig,
) -> crate::Result<(UpdateReport, Vec<f64>)> {
    group_objective(snap, update, cfg, false)
}

/// The same objective restricted to the selected group, honoring its skip
/// flag. `update` must have been prepared from that group with its suffix
/// mask.
pub fn gpso_loss(
    snap: &PolicySnapshot,
    selection: &SelectionResult,
    update: &GroupUpdate,
    cfg: &ClipConfig,
) -> crate::Result<(UpdateReport, Vec<f64>)> {
    if update.pattern != selection.chosen {
        return crate::error::input(format!(
            "update prepared for pattern {} but {} was selected",
            update.pattern, selection.chosen
        ));
    }
    group_objective(snap, update, cfg, selection.skipped)
}

/// Mean k3 estimate of KL(π‖π_ref) over response tokens and its gradient.
pub fn kl_penalty(
    snap: &PolicySnapshot,
    reference: &PolicySnapshot,
    update: &GroupUpdate,
) -> crate::Result<(f64, Vec<f64>)> {
    let rl = logprob_at(reference, &update.batch, update.temperature)?;
    let g = update.rewards.len().max(1) as f64;
    let w = update.batch.width;
    let (lp, grad) = backward_with(snap, &update.batch, update.temperature, |i, lp| {
        let pos: Vec<usize> = update.response_positions(i).collect();
        let n = pos.len() as f64;
        let mut s = vec![0.0; lp.len()];
        for t in pos {
            s[t] = (1.0 - (rl.values[i * w + t] - lp[t]).exp()) / (n * g);
        }
        Ok(s)
    })?;
    let mut total = 0.0;
    for i in 0..update.batch.rows() {
        let pos: Vec<usize> = update.response_positions(i).collect();
        let n = pos.len() as f64;
        total += pos.iter().map(|&t| k3(rl.values[i * w + t], lp.values[i * w + t])).sum::<f64>() / n / g;
    }
    Ok((total, grad))
}

/// AdamW ascent step along `ascent_grad`.
pub fn optimizer_step(
    snap: &PolicySnapshot,
    ascent_grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> crate::Result<PolicySnapshot> {
    let mut params = snap.params.clone();
    let descent: Vec<f64> = ascent_grad.iter().map(|g| -g).collect();
    adamw_step(&mut params, &descent, state, cfg)?;
    Ok(snap.with_params(params, snap.step + 1))
}

/// Per-step metrics log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub objective: f64,
    pub grad_norm: f64,
    pub kl: f64,
    pub skipped_count: usize,
    pub chosen_pattern_histogram: BTreeMap<PatternId, usize>,
    pub train_reward: f64,
}
