use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FamilySpec;
use crate::env::{generate, Problem, VocabSpec, HELD_OUT_SEED_BASE};
use crate::pattern::{Pattern, PatternId};
use crate::policy::PolicySnapshot;
use crate::rollout::{rollout_group, score_group, PatternGroup};
use crate::seed::mix;

/// Bucket for free responses that never emit a pattern tag.
pub const UNTAGGED: &str = "untagged";

const EVAL_STREAM: u64 = 0x6576_616c;
const HELD_OUT_STREAM: u64 = 0x686f_6c64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub seed: u64,
}

/// Sample seeds for a problem do not depend on the pattern, so every
/// pattern is scored on coupled random streams.
pub fn eval_seed(seed: u64, problem: &Problem) -> u64 {
    mix(&[seed, EVAL_STREAM, problem.key()])
}

/// Held-out problems, `per_family` per family, from seeds at or above
/// [`HELD_OUT_SEED_BASE`].
pub fn held_out_problems(
    families: &[FamilySpec],
    per_family: usize,
    seed: u64,
    vocab: &VocabSpec,
) -> crate::Result<Vec<Problem>> {
    let mut out = Vec::with_capacity(families.len() * per_family);
    for (fi, f) in families.iter().enumerate() {
        for i in 0..per_family {
            let s = HELD_OUT_SEED_BASE + mix(&[seed, HELD_OUT_STREAM, fi as u64, i as u64]) % HELD_OUT_SEED_BASE;
            out.push(generate(f.family, f.difficulty, s, vocab)?);
        }
    }
    Ok(out)
}

fn groups(
    snap: &PolicySnapshot,
    problems: &[Problem],
    pattern: &Pattern,
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<Vec<PatternGroup>> {
    if problems.is_empty() {
        return crate::error::input("evaluation needs at least one problem");
    }
    if s.k == 0 {
        return crate::error::input("k must be at least 1");
    }
    problems
        .par_iter()
        .map(|p| {
            let mut g = rollout_group(snap, p, pattern, s.k, s.temperature, s.max_new, eval_seed(s.seed, p))?;
            score_group(&mut g, &p.golden_answer, vocab)?;
            Ok(g)
        })
        .collect()
}

/// Rewards per problem (rows) and sample (columns) under one pattern.
pub fn reward_matrix(
    snap: &PolicySnapshot,
    problems: &[Problem],
    pattern: &Pattern,
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<Vec<Vec<u8>>> {
    Ok(groups(snap, problems, pattern, s, vocab)?
        .iter()
        .map(|g| g.trajectories.iter().map(|t| t.reward.unwrap_or(0)).collect())
        .collect())
}

fn row_mean(r: &[u8]) -> f64 {
    r.iter().map(|&x| f64::from(x)).sum::<f64>() / r.len() as f64
}

/// Mean over problems (rows) of the per-problem mean reward.
pub fn pass1_from(m: &[Vec<u8>]) -> f64 {
    m.iter().map(|r| row_mean(r)).sum::<f64>() / m.len() as f64
}

pub fn evaluate_fixed_pattern(
    snap: &PolicySnapshot,
    problems: &[Problem],
    pattern: &Pattern,
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<f64> {
    Ok(pass1_from(&reward_matrix(snap, problems, pattern, s, vocab)?))
}

/// Mean over problems of the mean reward of `k` suffix-free samples.
pub fn evaluate_pass1(
    snap: &PolicySnapshot,
    problems: &[Problem],
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<f64> {
    evaluate_fixed_pattern(snap, problems, &Pattern::standard(PatternId::Adaptive, vocab), s, vocab)
}

/// Per-problem maximum pattern accuracy, averaged over problems.
pub fn oracle_from(matrices: &[Vec<Vec<u8>>]) -> crate::Result<f64> {
    let Some(first) = matrices.first() else {
        return crate::error::input("oracle needs at least one pattern");
    };
    if first.is_empty() || matrices.iter().any(|m| m.len() != first.len()) {
        return crate::error::input("pattern matrices must cover the same non-empty problem set");
    }
    let total: f64 = (0..first.len())
        .map(|i| matrices.iter().map(|m| row_mean(&m[i])).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / first.len() as f64)
}

pub fn best_pattern_oracle(
    snap: &PolicySnapshot,
    problems: &[Problem],
    patterns: &[Pattern],
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<f64> {
    let ms = patterns
        .iter()
        .map(|p| reward_matrix(snap, problems, p, s, vocab))
        .collect::<crate::Result<Vec<_>>>()?;
    oracle_from(&ms)
}

fn usage_of(groups: &[PatternGroup], vocab: &VocabSpec) -> BTreeMap<String, f64> {
    let mut h: BTreeMap<String, f64> = PatternId::TAGGED.iter().map(|p| (p.name().to_string(), 0.0)).collect();
    h.insert(UNTAGGED.to_string(), 0.0);
    let mut n = 0.0;
    for t in groups.iter().flat_map(|g| &g.trajectories) {
        let key = t
            .response
            .iter()
            .find_map(|&tok| vocab.pattern_of_tag(tok))
            .map_or(UNTAGGED, |p| p.name());
        *h.get_mut(key).expect("all buckets present") += 1.0;
        n += 1.0;
    }
    for v in h.values_mut() {
        *v /= n;
    }
    h
}

/// Share of free responses whose first pattern tag names each pattern.
pub fn pattern_usage(
    snap: &PolicySnapshot,
    problems: &[Problem],
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<BTreeMap<String, f64>> {
    let g = groups(snap, problems, &Pattern::standard(PatternId::Adaptive, vocab), s, vocab)?;
    Ok(usage_of(&g, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternScore {
    pub pattern: PatternId,
    pub pass1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problems: usize,
    pub k: usize,
    /// Suffix-free pass@1.
    pub pass1: f64,
    pub per_family: BTreeMap<String, f64>,
    pub fixed: Vec<PatternScore>,
    /// Best-pattern oracle over the fixed rows and the adaptive row.
    pub oracle: f64,
    pub usage: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn fixed_score(&self, p: PatternId) -> Option<f64> {
        self.fixed.iter().find(|s| s.pattern == p).map(|s| s.pass1)
    }

    pub fn best_fixed(&self) -> f64 {
        self.fixed.iter().map(|s| s.pass1).fold(self.pass1, f64::max)
    }
}

/// Adaptive pass@1, fixed-pattern rows, oracle and usage from one set of
/// coupled samples.
pub fn evaluate(
    snap: &PolicySnapshot,
    problems: &[Problem],
    patterns: &[PatternId],
    s: &EvalSettings,
    vocab: &VocabSpec,
) -> crate::Result<EvalReport> {
    let free = groups(snap, problems, &Pattern::standard(PatternId::Adaptive, vocab), s, vocab)?;
    let to_matrix = |gs: &[PatternGroup]| -> Vec<Vec<u8>> {
        gs.iter().map(|g| g.trajectories.iter().map(|t| t.reward.unwrap_or(0)).collect()).collect()
    };
    let free_m = to_matrix(&free);
    let mut matrices = vec![free_m.clone()];
    let mut fixed = Vec::new();
    for &p in patterns.iter().filter(|&&p| p != PatternId::Adaptive) {
        let m = reward_matrix(snap, problems, &Pattern::standard(p, vocab), s, vocab)?;
        fixed.push(PatternScore { pattern: p, pass1: pass1_from(&m) });
        matrices.push(m);
    }
    let mut per_family: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (p, r) in problems.iter().zip(&free_m) {
        let e = per_family.entry(p.family.name().to_string()).or_default();
        e.0 += row_mean(r);
        e.1 += 1;
    }
    Ok(EvalReport {
        problems: problems.len(),
        k: s.k,
        pass1: pass1_from(&free_m),
        per_family: per_family.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        fixed,
        oracle: oracle_from(&matrices)?,
        usage: usage_of(&free, vocab),
    })
}
