//! Self-checks: whole-pipeline finite differences, suffix-mask invariance and
//! the single-pattern reduction of the GPSO update to GRPO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{generate, TaskFamily, VocabSpec};
use crate::objective::{gpso_loss, grpo_loss, prepare_update, ClipConfig, GroupUpdate, OldLogprobs, RatioLevel};
use crate::pattern::{Pattern, PatternId};
use crate::policy::{init_params, max_relative_error, ArchConfig, GradCheckOptions, PolicySnapshot, Precision};
use crate::rollout::{rollout_all_patterns, rollout_group, PatternGroup, PatternGroupSet};
use crate::seed;
use crate::selection::{build_suffix_mask, select_for_set, PrefixLayout, SelectionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    /// Random tiny models in the gradient suite.
    pub models: usize,
    /// Random batches in the reduction suite.
    pub reduction_batches: usize,
    pub precision: Precision,
    pub seed: u64,
    /// Corrupts the analytic gradient before comparison.
    pub sabotage: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { models: 5, reduction_batches: 100, precision: Precision::F64, seed: 0, sabotage: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub max_params: usize,
    /// Suffix contents changed neither log-probs, objective nor gradient.
    pub masking_invariant: bool,
    /// Gradient entries that suffix tokens alone could reach, all zero.
    pub suffix_gradient_zero: bool,
    pub reduction_exact: bool,
    pub reduction_batches: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.masking_invariant && self.suffix_gradient_zero && self.reduction_exact
    }
}

/// Relative-error bound for the finite-difference suite.
pub fn check_tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-4,
        Precision::F32 => 1e-2,
    }
}

/// Architecture of the check models: the task vocabulary, one block, width 8,
/// under 2,000 parameters.
pub fn check_arch(precision: Precision, seed: u64) -> ArchConfig {
    let v = VocabSpec::default();
    ArchConfig {
        vocab_size: v.size,
        context_length: 16,
        depth: 1,
        width: 8,
        head_count: 2,
        mlp_width: 16,
        seed,
        pad_token: Some(v.pad),
        eos_token: Some(v.eos),
        precision,
    }
}

fn random_model(arch: &ArchConfig, seed: u64) -> crate::Result<PolicySnapshot> {
    let base = init_params(arch, seed)?;
    let mut rng = seed::rng(seed::mix(&[seed, 0xC4EC]));
    let p = base.params.iter().map(|x| x + rng.gen_range(-0.4..0.4)).collect();
    Ok(base.with_params(p, 0))
}

/// Sampled groups for every pattern with random rewards that leave every
/// group with reward variance.
fn random_set(snap: &PolicySnapshot, seed: u64, m: usize, patterns: &[Pattern]) -> crate::Result<PatternGroupSet> {
    let v = VocabSpec::default();
    let family = TaskFamily::ALL[(seed % 2) as usize];
    let problem = generate(family, 1, seed, &v)?;
    let mut set = rollout_all_patterns(snap, &problem, patterns, m, 1.0, 4, seed)?;
    let mut rng = seed::rng(seed::mix(&[seed, 0x5E7]));
    for g in &mut set.groups {
        let n = g.trajectories.len();
        let hit = rng.gen_range(0..n);
        for (k, t) in g.trajectories.iter_mut().enumerate() {
            t.reward = Some(if n == 1 { rng.gen_range(0..2) } else { u8::from(k == hit || rng.gen_bool(0.4)) });
        }
        if n > 1 && g.trajectories.iter().all(|t| t.reward == Some(1)) {
            g.trajectories[(hit + 1) % n].reward = Some(0);
        }
    }
    Ok(set)
}

fn masked_update(
    snap: &PolicySnapshot,
    g: &PatternGroup,
    mode: OldLogprobs,
    reference: Option<&PolicySnapshot>,
) -> crate::Result<GroupUpdate> {
    let layout = PrefixLayout::of_group(g);
    let lens: Vec<usize> = g.trajectories.iter().map(|t| t.length).collect();
    let width = layout.prefix_len + lens.iter().copied().max().unwrap_or(0);
    let mask = build_suffix_mask(&layout, &lens, width)?;
    prepare_update(snap, g, &mask, mode, 0.8, reference)
}

fn perturbed(snap: &PolicySnapshot, seed: u64, scale: f64) -> PolicySnapshot {
    let mut rng = seed::rng(seed::mix(&[seed, 0x9E47]));
    let p = snap.params.iter().map(|x| x + rng.gen_range(-scale..scale)).collect();
    snap.with_params(p, snap.step + 1)
}

struct Case {
    sel: SelectionResult,
    update: GroupUpdate,
    cfg: ClipConfig,
    at: PolicySnapshot,
}

fn gradient_case(i: usize, opts: &CheckOptions, base: Option<&PolicySnapshot>) -> crate::Result<Case> {
    let s = seed::mix(&[opts.seed, i as u64]);
    let old = match base {
        Some(b) => b.clone(),
        None => random_model(&check_arch(opts.precision, s), s)?,
    };
    let v = VocabSpec::default();
    let patterns: Vec<Pattern> = PatternId::ALL.iter().map(|&p| Pattern::standard(p, &v)).collect();
    let mut set = random_set(&old, s, 4, &patterns)?;
    let sel = select_for_set(&mut set)?;
    let g = sel.winning_group(&set);
    let reference = perturbed(&old, s ^ 1, 0.05);
    let mode = if i % 2 == 0 { OldLogprobs::Recompute } else { OldLogprobs::Rollout };
    let update = masked_update(&old, g, mode, Some(&reference))?;
    let cfg = ClipConfig {
        epsilon: 0.2,
        kl_beta: 0.1,
        ratio: if i % 3 == 2 { RatioLevel::Sequence } else { RatioLevel::Token },
        old_logprobs: mode,
        ..ClipConfig::default()
    };
    Ok(Case { sel, update, cfg, at: perturbed(&old, s ^ 2, 0.02) })
}

/// Most coordinates probed per model; larger models are strided.
const MAX_PROBED: usize = 4000;

/// Finite differences of the GPSO objective (clipped surrogate and KL term)
/// against its analytic gradient.
pub fn gradient_suite(opts: &CheckOptions, base: Option<&PolicySnapshot>) -> crate::Result<(f64, usize)> {
    let fd = GradCheckOptions::for_precision(Precision::F64);
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for i in 0..opts.models.max(1) {
        let c = gradient_case(i, opts, base)?;
        let (_, mut grad) = gpso_loss(&c.at, &c.sel, &c.update, &c.cfg)?;
        if opts.sabotage {
            let j = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap_or(0);
            grad[j] = grad[j] * 1.5 + 1e-3;
        }
        // The reference objective always runs in 64-bit arithmetic.
        let exact_arch = ArchConfig { precision: Precision::F64, ..c.at.arch.clone() };
        let f = |theta: &[f64]| {
            PolicySnapshot::from_params(exact_arch.clone(), theta.to_vec(), c.at.step)
                .and_then(|s| gpso_loss(&s, &c.sel, &c.update, &c.cfg))
                .map(|r| r.0.objective)
                .unwrap_or(f64::NAN)
        };
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = match opts.precision {
            Precision::F64 => fd.floor,
            Precision::F32 => fd.floor.max(1e-3 * scale),
        };
        let stride = c.at.num_params().div_ceil(MAX_PROBED);
        let coords: Vec<usize> = (0..c.at.num_params()).step_by(stride).collect();
        let o = GradCheckOptions { floor, ..fd };
        worst = worst.max(max_relative_error(f, &c.at.params, &grad, &coords, o));
        max_params = max_params.max(c.at.num_params());
    }
    Ok((worst, max_params))
}

/// Rewrites every suffix token and confirms log-probs, objective and
/// gradient do not move. Also confirms that parameters only reachable
/// through suffix tokens receive zero gradient.
pub fn masking_suite(opts: &CheckOptions) -> crate::Result<(bool, bool)> {
    let v = VocabSpec::default();
    let mut invariant = true;
    let mut suffix_zero = true;
    for i in 0..opts.models.max(1) {
        let s = seed::mix(&[opts.seed, i as u64, 0x3A5C]);
        let snap = random_model(&check_arch(opts.precision, s), s)?;
        let patterns = [Pattern::standard(PatternId::Reflect, &v), Pattern::standard(PatternId::Explore, &v)];
        let set = random_set(&snap, s, 3, &patterns)?;
        for g in &set.groups {
            let u = masked_update(&snap, g, OldLogprobs::Recompute, None)?;
            let sel = single_selection(g.pattern.id);
            let cfg = ClipConfig::default();
            let at = perturbed(&snap, s, 0.02);
            let (r0, g0) = gpso_loss(&at, &sel, &u, &cfg)?;
            let mut swapped = u.clone();
            let layout = PrefixLayout::of_group(g);
            let mut rng = seed::rng(s);
            for row in 0..swapped.batch.rows() {
                for t in layout.suffix.clone() {
                    let idx = row * swapped.batch.width + t;
                    swapped.batch.tokens[idx] = rng.gen_range(0..v.pad);
                }
            }
            let (r1, g1) = gpso_loss(&at, &sel, &swapped, &cfg)?;
            let lp0 = crate::policy::logprob_at(&at, &u.batch, u.temperature)?;
            let lp1 = crate::policy::logprob_at(&at, &swapped.batch, u.temperature)?;
            let kept_equal = (0..lp0.values.len())
                .filter(|&i| u.batch.mask[i] == 1)
                .all(|i| lp0.values[i].to_bits() == lp1.values[i].to_bits());
            invariant &= kept_equal
                && r0.objective.to_bits() == r1.objective.to_bits()
                && g0.iter().zip(&g1).all(|(a, b)| a.to_bits() == b.to_bits());
            // Embedding rows of tokens that occur only inside the suffix.
            let d = at.arch.width;
            let emb = at.layout().tok_emb;
            let mut seen = vec![false; at.arch.vocab_size];
            for row in 0..u.batch.rows() {
                for (t, &tok) in u.batch.row_tokens(row).iter().enumerate() {
                    if !layout.suffix.contains(&t) {
                        seen[tok as usize] = true;
                    }
                }
            }
            for tok in g.pattern.suffix_tokens.iter().filter(|&&t| !seen[t as usize]) {
                let base = emb + *tok as usize * d;
                suffix_zero &= g0[base..base + d].iter().all(|&x| x == 0.0);
            }
        }
    }
    Ok((invariant, suffix_zero))
}

fn single_selection(p: PatternId) -> SelectionResult {
    SelectionResult { chosen: p, index: 0, tie_break: false, skipped: false, accuracies: vec![0.5] }
}

/// GPSO with only the adaptive pattern (n = 1, empty suffix) against GRPO on
/// the same group: objective and gradient must agree bit for bit.
pub fn reduction_suite(opts: &CheckOptions) -> crate::Result<bool> {
    let v = VocabSpec::default();
    let adaptive = Pattern::standard(PatternId::Adaptive, &v);
    let mut exact = true;
    for i in 0..opts.reduction_batches {
        let s = seed::mix(&[opts.seed, i as u64, 0x6E6]);
        let snap = random_model(&check_arch(Precision::F64, s), s)?;
        let problem = generate(TaskFamily::ALL[i % 2], 1, s, &v)?;
        let mut g = rollout_group(&snap, &problem, &adaptive, 4, 1.0, 4, s)?;
        let mut rng = seed::rng(s);
        for t in &mut g.trajectories {
            t.reward = Some(rng.gen_range(0..2));
        }
        let mut set = PatternGroupSet { problem_id: problem.id.clone(), groups: vec![g], accuracies: None };
        let sel = select_for_set(&mut set)?;
        let mode = if i % 2 == 0 { OldLogprobs::Recompute } else { OldLogprobs::Rollout };
        let u = masked_update(&snap, &set.groups[0], mode, None)?;
        let cfg = ClipConfig { old_logprobs: mode, ..ClipConfig::default() };
        let at = perturbed(&snap, s, 0.05);
        let (a, ga) = gpso_loss(&at, &sel, &u, &cfg)?;
        let (b, gb) = grpo_loss(&at, &u, &cfg)?;
        exact &= a.objective.to_bits() == b.objective.to_bits()
            && ga.len() == gb.len()
            && ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(exact)
}

/// Runs every suite on random tiny models.
pub fn run_checks(opts: &CheckOptions) -> crate::Result<CheckReport> {
    run_checks_with(opts, None)
}

/// Like [`run_checks`], but the gradient suite differentiates around `base`
/// when given.
pub fn run_checks_with(opts: &CheckOptions, base: Option<&PolicySnapshot>) -> crate::Result<CheckReport> {
    let (max_rel_error, max_params) = gradient_suite(opts, base)?;
    let (masking_invariant, suffix_gradient_zero) = masking_suite(opts)?;
    let reduction_exact = reduction_suite(opts)?;
    Ok(CheckReport {
        max_rel_error,
        tolerance: check_tolerance(opts.precision),
        max_params,
        masking_invariant,
        suffix_gradient_zero,
        reduction_exact,
        reduction_batches: opts.reduction_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_checks_pass() {
        let r = run_checks(&CheckOptions { models: 2, reduction_batches: 10, ..CheckOptions::default() }).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_params <= 2000);
    }

    #[test]
    fn sabotage_is_caught() {
        let r = run_checks(&CheckOptions { models: 1, reduction_batches: 1, sabotage: true, ..CheckOptions::default() })
            .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn fp32_passes_relaxed_tolerance() {
        let opts = CheckOptions { models: 1, reduction_batches: 1, precision: Precision::F32, ..CheckOptions::default() };
        let r = run_checks(&opts).unwrap();
        assert_eq!(r.tolerance, 1e-2);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn checks_around_a_given_model() {
        let base = random_model(&check_arch(Precision::F64, 9), 9).unwrap();
        let opts = CheckOptions { models: 1, reduction_batches: 1, ..CheckOptions::default() };
        let r = run_checks_with(&opts, Some(&base)).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.max_params, base.num_params());
    }
}
