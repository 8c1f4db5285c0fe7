use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, evaluate_fixed_pattern, held_out_problems, EvalReport, EvalSettings};
use super::report::config_digest;
use super::train::{train, TrainOutput};
use super::{Algorithm, RunConfig, TrainConfig};
use crate::env::{build_warmstart_corpus, Problem, VocabSpec};
use crate::pattern::{Pattern, PatternId};
use crate::policy::{init_params, warmstart_fit_with, FitExample, FitOptions, PolicySnapshot};
use crate::optim::AdamWConfig;

/// Rows of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gpso,
    GpsoWithKl,
    WithoutMultiPatternRollout,
    WithoutOptimalPatternSelection,
    WithoutMaskPatternTokens,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gpso,
        Variant::GpsoWithKl,
        Variant::WithoutMultiPatternRollout,
        Variant::WithoutOptimalPatternSelection,
        Variant::WithoutMaskPatternTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gpso => "gpso",
            Variant::GpsoWithKl => "gpso_w_kl",
            Variant::WithoutMultiPatternRollout => "wo_multi_pattern_rollout",
            Variant::WithoutOptimalPatternSelection => "wo_optimal_pattern_selection",
            Variant::WithoutMaskPatternTokens => "wo_mask_pattern_tokens",
        }
    }
}

/// Training config of a variant. Single-pattern runs keep the per-problem
/// rollout budget `n·m` in one group.
pub fn variant_config(base: &RunConfig, v: Variant) -> TrainConfig {
    let mut t = base.train.clone();
    t.algorithm = Algorithm::Gpso;
    match v {
        Variant::Gpso => {}
        Variant::GpsoWithKl => t.clip.kl_beta = base.ablation.kl_beta,
        Variant::WithoutMultiPatternRollout => return single_pattern_config(base, PatternId::Adaptive),
        Variant::WithoutOptimalPatternSelection => t.algorithm = Algorithm::AllPatterns,
        Variant::WithoutMaskPatternTokens => t.mask_suffix = false,
    }
    t
}

fn single_pattern_config(base: &RunConfig, p: PatternId) -> TrainConfig {
    let mut t = base.train.clone();
    t.algorithm = Algorithm::Grpo;
    t.m = base.train.m * base.train.patterns.len();
    t.patterns = vec![p];
    t.mask_suffix = false;
    t
}

/// Initializes the policy and fits the warm-start corpus. Returns the
/// snapshot and the per-epoch training NLL.
pub fn warm_start(cfg: &RunConfig, vocab: &VocabSpec) -> crate::Result<(PolicySnapshot, Vec<f64>)> {
    cfg.validate(vocab)?;
    let snap = init_params(&cfg.arch, cfg.arch.seed)?;
    let corpus: Vec<FitExample> = build_warmstart_corpus(&cfg.warmstart.corpus, cfg.warmstart.seed, vocab)?
        .into_iter()
        .map(|e| FitExample { input: e.input_tokens, target: e.target_tokens })
        .collect();
    let opts = FitOptions {
        batch_size: cfg.warmstart.batch_size,
        seed: cfg.warmstart.seed,
        optimizer: AdamWConfig { lr: cfg.warmstart.lr, ..AdamWConfig::default() },
    };
    warmstart_fit_with(&snap, &corpus, cfg.warmstart.epochs, &opts)
}

pub fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        k: cfg.eval.k,
        temperature: cfg.eval.temperature,
        max_new: cfg.eval.max_new,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub warm: PolicySnapshot,
    pub pre: EvalReport,
    pub output: TrainOutput,
    pub post: EvalReport,
}

/// Warm start, evaluate, train with `cfg.train`, evaluate again.
pub fn run_experiment(cfg: &RunConfig, vocab: &VocabSpec) -> crate::Result<ExperimentResult> {
    let (warm, _) = warm_start(cfg, vocab)?;
    let held_out = held_out_problems(&cfg.eval.families, cfg.eval.problems_per_family, cfg.seed, vocab)?;
    run_experiment_from(cfg, &cfg.train, &warm, &held_out, cfg.seed, vocab)
}

pub fn run_experiment_from(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    warm: &PolicySnapshot,
    held_out: &[Problem],
    seed: u64,
    vocab: &VocabSpec,
) -> crate::Result<ExperimentResult> {
    let s = eval_settings(cfg);
    let pre = evaluate(warm, held_out, &cfg.eval.patterns, &s, vocab)?;
    let output = train(train_cfg, warm, None, seed, vocab, Some((held_out, &s)))?;
    let post = evaluate(&output.snapshot, held_out, &cfg.eval.patterns, &s, vocab)?;
    Ok(ExperimentResult { warm: warm.clone(), pre, output, post })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub algorithm: Variant,
    pub seed: u64,
    pub eval_pass1: f64,
    pub oracle: f64,
    pub best_fixed: f64,
    pub final_train_reward: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,seed,eval_pass1,oracle,best_fixed,final_train_reward,config_digest\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.algorithm.name(),
                r.seed,
                r.eval_pass1,
                r.oracle,
                r.best_fixed,
                r.final_train_reward,
                r.config_digest
            );
        }
        s
    }

    /// Mean held-out pass@1 of a variant over seeds.
    pub fn mean(&self, v: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.algorithm == v).map(|r| r.eval_pass1).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn tail_reward(out: &TrainOutput) -> f64 {
    let n = out.metrics.len().min(20);
    if n == 0 {
        return 0.0;
    }
    out.metrics[out.metrics.len() - n..].iter().map(|m| m.train_reward).sum::<f64>() / n as f64
}

/// Every variant under every ablation seed, starting from a fresh warm
/// start.
pub fn run_ablation_matrix(cfg: &RunConfig, vocab: &VocabSpec) -> crate::Result<AblationTable> {
    let (warm, _) = warm_start(cfg, vocab)?;
    let held_out = held_out_problems(&cfg.eval.families, cfg.eval.problems_per_family, cfg.seed, vocab)?;
    run_ablation_matrix_from(cfg, &warm, &held_out, vocab)
}

pub fn run_ablation_matrix_from(
    cfg: &RunConfig,
    warm: &PolicySnapshot,
    held_out: &[Problem],
    vocab: &VocabSpec,
) -> crate::Result<AblationTable> {
    let s = eval_settings(cfg);
    let digest = config_digest(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for v in Variant::ALL {
            let t = variant_config(cfg, v);
            let out = train(&t, warm, None, seed, vocab, None)?;
            let report = evaluate(&out.snapshot, held_out, &cfg.eval.patterns, &s, vocab)?;
            rows.push(AblationRow {
                algorithm: v,
                seed,
                eval_pass1: report.pass1,
                oracle: report.oracle,
                best_fixed: report.best_fixed(),
                final_train_reward: tail_reward(&out),
                config_digest: digest.clone(),
            });
        }
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub pattern: PatternId,
    pub seed: u64,
    /// Held-out pass@1 under the pattern the baseline was trained with.
    pub pass1: f64,
}

/// GRPO trained and evaluated under each fixed pattern.
pub fn fixed_pattern_baselines(
    cfg: &RunConfig,
    warm: &PolicySnapshot,
    held_out: &[Problem],
    patterns: &[PatternId],
    vocab: &VocabSpec,
) -> crate::Result<Vec<BaselineRow>> {
    let s = eval_settings(cfg);
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for &p in patterns {
            let t = single_pattern_config(cfg, p);
            let out = train(&t, warm, None, seed, vocab, None)?;
            let pass1 = evaluate_fixed_pattern(&out.snapshot, held_out, &Pattern::standard(p, vocab), &s, vocab)?;
            rows.push(BaselineRow { pattern: p, seed, pass1 });
        }
    }
    Ok(rows)
}
