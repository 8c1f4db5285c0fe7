use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_pass1, EvalSettings};
use super::{Algorithm, TrainConfig};
use crate::env::{generate, Problem, VocabSpec, HELD_OUT_SEED_BASE};
use crate::objective::{gpso_loss, grpo_loss, l2_norm, optimizer_step, prepare_update, GroupUpdate, StepMetrics, UpdateReport};
use crate::optim::AdamState;
use crate::pattern::{Pattern, PatternId};
use crate::policy::PolicySnapshot;
use crate::rollout::{rollout_batch, PatternGroup, PatternGroupSet};
use crate::selection::{
    build_suffix_mask, build_visible_mask, select_for_set, PrefixLayout, SelectionRecord, SelectionResult,
};
use crate::seed::mix;

const PROBLEM_STREAM: u64 = 0x7072_6f62;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c;

/// Selection log line tagged with its training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSelection {
    pub step: u64,
    #[serde(flatten)]
    pub record: SelectionRecord,
}

/// Held-out pass@1 probe taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub pass1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub snapshot: PolicySnapshot,
    pub opt_state: AdamState,
    pub metrics: Vec<StepMetrics>,
    pub selections: Vec<StepSelection>,
    pub evals: Vec<EvalPoint>,
    /// Steps aborted by a module error, with the reason.
    pub diagnostics: Vec<String>,
}

/// Training problems of one step; seeds stay below the held-out range.
pub fn step_problems(cfg: &TrainConfig, seed: u64, step: u64, vocab: &VocabSpec) -> crate::Result<Vec<Problem>> {
    (0..cfg.batch_size)
        .map(|i| {
            let f = &cfg.families[i % cfg.families.len()];
            let s = mix(&[seed, PROBLEM_STREAM, step, i as u64]) % HELD_OUT_SEED_BASE;
            generate(f.family, f.difficulty, s, vocab)
        })
        .collect()
}

/// Update-time work for one problem.
struct ProblemWork {
    updates: Vec<GroupUpdate>,
    selection: SelectionResult,
    /// Divides the summed group gradients (number of groups averaged over).
    groups: usize,
}

fn has_variance(g: &PatternGroup) -> bool {
    g.trajectories.iter().any(|t| t.reward != g.trajectories[0].reward)
}

fn prepare(
    cfg: &TrainConfig,
    snap: &PolicySnapshot,
    reference: Option<&PolicySnapshot>,
    set: &mut PatternGroupSet,
) -> crate::Result<ProblemWork> {
    let selection = select_for_set(set)?;
    let make = |g: &PatternGroup| {
        let layout = PrefixLayout::of_group(g);
        let lens: Vec<usize> = g.trajectories.iter().map(|t| t.length).collect();
        let width = layout.prefix_len + lens.iter().copied().max().unwrap_or(0);
        let mask = if cfg.mask_suffix {
            build_suffix_mask(&layout, &lens, width)?
        } else {
            build_visible_mask(&layout, &lens, width)?
        };
        let r = if cfg.clip.kl_beta > 0.0 { reference } else { None };
        prepare_update(snap, g, &mask, cfg.clip.old_logprobs, cfg.temperature, r)
    };
    let (updates, groups) = match cfg.algorithm {
        Algorithm::Gpso => {
            let u = if selection.skipped { vec![] } else { vec![make(selection.winning_group(set))?] };
            (u, 1)
        }
        Algorithm::Grpo => {
            let g = &set.groups[0];
            (if has_variance(g) { vec![make(g)?] } else { vec![] }, 1)
        }
        Algorithm::AllPatterns => {
            let u = set.groups.iter().filter(|g| has_variance(g)).map(make).collect::<crate::Result<Vec<_>>>()?;
            (u, set.groups.len())
        }
    };
    Ok(ProblemWork { updates, selection, groups })
}

fn problem_loss(
    cfg: &TrainConfig,
    snap: &PolicySnapshot,
    w: &ProblemWork,
) -> crate::Result<(Vec<UpdateReport>, Vec<f64>)> {
    let mut grad = vec![0.0; snap.num_params()];
    let mut reports = Vec::with_capacity(w.updates.len());
    for u in &w.updates {
        let (r, g) = match cfg.algorithm {
            Algorithm::Gpso => gpso_loss(snap, &w.selection, u, &cfg.clip)?,
            _ => grpo_loss(snap, u, &cfg.clip)?,
        };
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / w.groups as f64;
        }
        reports.push(r);
    }
    Ok((reports, grad))
}

/// Runs rollout → score → select → update for `cfg.steps` steps from
/// `start`. The KL reference (when enabled) is `start`.
pub fn train(
    cfg: &TrainConfig,
    start: &PolicySnapshot,
    opt_state: Option<AdamState>,
    seed: u64,
    vocab: &VocabSpec,
    probe: Option<(&[Problem], &EvalSettings)>,
) -> crate::Result<TrainOutput> {
    cfg.validate()?;
    let patterns: Vec<Pattern> = cfg.patterns.iter().map(|&p| Pattern::standard(p, vocab)).collect();
    let mut snap = start.clone();
    let mut state = opt_state.unwrap_or_else(|| AdamState::new(start.num_params()));
    let mut out = TrainOutput {
        snapshot: start.clone(),
        opt_state: state.clone(),
        metrics: Vec::with_capacity(cfg.steps),
        selections: Vec::new(),
        evals: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut nonfinite = 0usize;
    for step in 0..cfg.steps as u64 {
        let problems = step_problems(cfg, seed, step, vocab)?;
        let rollout_seed = mix(&[seed, ROLLOUT_STREAM, step]);
        let mut sets = rollout_batch(&snap, &problems, &patterns, cfg.m, cfg.temperature, cfg.max_new, rollout_seed, vocab)?;
        let work: Vec<ProblemWork> = sets
            .par_iter_mut()
            .map(|set| prepare(cfg, &snap, Some(start), set))
            .collect::<crate::Result<_>>()?;

        let mut histogram: BTreeMap<PatternId, usize> = BTreeMap::new();
        let mut rewards = (0.0, 0usize);
        for (set, w) in sets.iter().zip(&work) {
            *histogram.entry(w.selection.chosen).or_default() += 1;
            for t in set.groups.iter().flat_map(|g| &g.trajectories) {
                rewards.0 += f64::from(t.reward.unwrap_or(0));
                rewards.1 += 1;
            }
            out.selections.push(StepSelection { step, record: SelectionRecord::new(set, &w.selection) });
        }
        let skipped_count = work.iter().filter(|w| w.updates.is_empty()).count();

        let (mut objective, mut kl, mut norms, mut first) = (0.0, 0.0, Vec::new(), true);
        let mut failed = None;
        'epochs: for _ in 0..cfg.ppo_epochs {
            for chunk in work.chunks(cfg.mini_batch_size) {
                let per: Vec<(Vec<UpdateReport>, Vec<f64>)> = chunk
                    .par_iter()
                    .map(|w| problem_loss(cfg, &snap, w))
                    .collect::<crate::Result<_>>()?;
                let mut grad = vec![0.0; snap.num_params()];
                for (reports, g) in &per {
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b / chunk.len() as f64;
                    }
                    if first {
                        for r in reports {
                            objective += r.objective / cfg.batch_size as f64;
                            kl += r.kl / cfg.batch_size as f64;
                        }
                    }
                }
                norms.push(l2_norm(&grad));
                match optimizer_step(&snap, &grad, &mut state, &cfg.clip.optimizer) {
                    Ok(next) => snap = next,
                    Err(e @ crate::Error::Numerical(_)) => {
                        failed = Some(e);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            first = false;
        }
        if let Some(e) = failed {
            nonfinite += 1;
            out.diagnostics.push(format!("step {step}: {e}"));
            if nonfinite >= cfg.max_nonfinite_steps {
                return Err(crate::Error::Numerical(format!(
                    "training halted after {nonfinite} consecutive non-finite updates (last at step {step})"
                )));
            }
        } else {
            nonfinite = 0;
        }
        out.metrics.push(StepMetrics {
            step,
            objective,
            grad_norm: if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 },
            kl,
            skipped_count,
            chosen_pattern_histogram: histogram,
            train_reward: if rewards.1 == 0 { 0.0 } else { rewards.0 / rewards.1 as f64 },
        });
        if let Some((problems, settings)) = probe {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every as u64 == 0 {
                let pass1 = evaluate_pass1(&snap, problems, settings, vocab)?;
                out.evals.push(EvalPoint { step: step + 1, pass1 });
            }
        }
    }
    out.snapshot = snap;
    out.opt_state = state;
    Ok(out)
}
