//! Training driver, evaluation, analytics, ablations and checkpoints.

mod ablation;
mod check;
mod checkpoint;
mod eval;
mod report;
mod train;

pub use ablation::{
    fixed_pattern_baselines, run_ablation_matrix, run_ablation_matrix_from, run_experiment, run_experiment_from,
    eval_settings, variant_config, warm_start, AblationRow, AblationTable, BaselineRow, ExperimentResult, Variant,
};
pub use check::{
    check_arch, check_tolerance, gradient_suite, masking_suite, reduction_suite, run_checks, run_checks_with, CheckOptions,
    CheckReport,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{
    best_pattern_oracle, eval_seed, evaluate, evaluate_fixed_pattern, evaluate_pass1, held_out_problems,
    oracle_from, pass1_from, pattern_usage, reward_matrix, EvalReport, EvalSettings, PatternScore, UNTAGGED,
};
pub use report::{config_digest, eval_rows_csv, read_jsonl, to_jsonl, write_jsonl};
pub use train::{step_problems, train, EvalPoint, StepSelection, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::env::{TaskFamily, VocabSpec, WarmstartConfig};
use crate::objective::ClipConfig;
use crate::pattern::PatternId;
use crate::policy::ArchConfig;

/// Update rule used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Multi-pattern rollout, select the best group, masked update on it.
    Gpso,
    /// Single pattern, update on its group.
    Grpo,
    /// Multi-pattern rollout, update on every group (no selection).
    AllPatterns,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: TaskFamily,
    pub difficulty: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// Problems per step.
    pub batch_size: usize,
    /// Problems per optimizer step.
    pub mini_batch_size: usize,
    /// Passes over each rollout batch.
    pub ppo_epochs: usize,
    pub patterns: Vec<PatternId>,
    /// Trajectories per pattern.
    pub m: usize,
    pub temperature: f64,
    /// Response budget L_resp.
    pub max_new: usize,
    /// Hide suffix tokens from the update-time forward pass.
    pub mask_suffix: bool,
    pub families: Vec<FamilySpec>,
    pub clip: ClipConfig,
    /// Held-out probe every this many steps (0 = never).
    pub eval_every: usize,
    /// Consecutive non-finite updates tolerated before training halts.
    pub max_nonfinite_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gpso,
            steps: 300,
            batch_size: 16,
            mini_batch_size: 16,
            ppo_epochs: 1,
            patterns: PatternId::ALL.to_vec(),
            m: 4,
            temperature: 0.6,
            max_new: 10,
            mask_suffix: true,
            families: default_families(),
            clip: ClipConfig::default(),
            eval_every: 0,
            max_nonfinite_steps: 3,
        }
    }
}

fn default_families() -> Vec<FamilySpec> {
    vec![
        FamilySpec { family: TaskFamily::ModChain, difficulty: 1 },
        FamilySpec { family: TaskFamily::FindIndex, difficulty: 1 },
    ]
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| crate::error::config::<()>(m);
        if self.batch_size == 0 || self.mini_batch_size == 0 || self.batch_size % self.mini_batch_size != 0 {
            return bad(format!(
                "batch_size {} must be a positive multiple of mini_batch_size {}",
                self.batch_size, self.mini_batch_size
            ));
        }
        if self.ppo_epochs == 0 || self.m == 0 || self.max_new == 0 {
            return bad("ppo_epochs, m and max_new must be positive".into());
        }
        if self.patterns.is_empty() {
            return bad("at least one pattern is required".into());
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if self.patterns[..i].contains(p) {
                return bad(format!("duplicate pattern '{p}'"));
            }
        }
        if self.algorithm == Algorithm::Grpo && self.patterns.len() != 1 {
            return bad("grpo trains on exactly one pattern".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("training temperature {} must be positive", self.temperature));
        }
        if self.families.is_empty() {
            return bad("at least one training family is required".into());
        }
        for f in &self.families {
            if f.difficulty < 1 || f.difficulty > f.family.max_difficulty() {
                return bad(format!("difficulty {} outside 1..={} for {}", f.difficulty, f.family.max_difficulty(), f.family));
            }
        }
        self.clip.validate()
    }
}

/// Warm-start supervised fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartSpec {
    pub corpus: WarmstartConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for WarmstartSpec {
    fn default() -> Self {
        Self { corpus: WarmstartConfig::default(), epochs: 40, lr: 3e-3, batch_size: 64, seed: 0 }
    }
}

/// Held-out evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub families: Vec<FamilySpec>,
    pub problems_per_family: usize,
    pub k: usize,
    pub temperature: f64,
    pub max_new: usize,
    /// Fixed-pattern rows; the adaptive row and the oracle are always added.
    pub patterns: Vec<PatternId>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            families: default_families(),
            problems_per_family: 100,
            k: 4,
            temperature: 0.6,
            max_new: 10,
            patterns: PatternId::TAGGED.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// β of the "with KL" variant.
    pub kl_beta: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], kl_beta: 0.1 }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub warmstart: WarmstartSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

pub fn default_arch(vocab: &VocabSpec) -> ArchConfig {
    ArchConfig {
        vocab_size: vocab.size,
        context_length: 24,
        depth: 2,
        width: 32,
        head_count: 2,
        mlp_width: 64,
        seed: 0,
        pad_token: Some(vocab.pad),
        eos_token: Some(vocab.eos),
        precision: Default::default(),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: default_arch(&VocabSpec::default()),
            warmstart: WarmstartSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, vocab: &VocabSpec) -> crate::Result<()> {
        self.arch.validate()?;
        if self.arch.vocab_size != vocab.size {
            return crate::error::config(format!(
                "arch.vocab_size {} does not match the task vocabulary ({})",
                self.arch.vocab_size, vocab.size
            ));
        }
        if self.arch.pad_token != Some(vocab.pad) || self.arch.eos_token != Some(vocab.eos) {
            return crate::error::config("arch pad/eos tokens must match the task vocabulary");
        }
        self.warmstart.corpus.validate()?;
        if !(self.warmstart.lr > 0.0) || self.warmstart.batch_size == 0 {
            return crate::error::config("warmstart lr and batch_size must be positive");
        }
        self.train.validate()?;
        if self.eval.k == 0 || self.eval.problems_per_family == 0 || self.eval.families.is_empty() {
            return crate::error::config("eval k, problems_per_family and families must be non-empty");
        }
        if !(self.eval.temperature >= 0.0) || self.eval.max_new == 0 {
            return crate::error::config("eval temperature must be non-negative and max_new positive");
        }
        if !(self.ablation.kl_beta > 0.0) {
            return crate::error::config("ablation kl_beta must be positive");
        }
        let max_new = self.train.max_new.max(self.eval.max_new);
        for f in self.train.families.iter().chain(&self.eval.families) {
            for s in 0..4 {
                let p = crate::env::generate(f.family, f.difficulty, s, vocab)?;
                let need = p.prompt_tokens.len() + 3 + max_new;
                if need > self.arch.context_length {
                    return crate::error::config(format!(
                        "context_length {} shorter than prompt + suffix + response budget {need} for {}",
                        self.arch.context_length, f.family
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
