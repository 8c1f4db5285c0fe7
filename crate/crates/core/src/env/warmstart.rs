//! Supervised warm-start corpus with per-family pattern affinities.
//!
//! Each example pairs a prompt (optionally followed by a pattern suffix) with
//! a pattern-shaped reasoning trace. The trace concludes with the golden
//! answer with probability `affinity[family][pattern]` and with an
//! off-by-one distractor otherwise, so a policy fitted to the corpus
//! inherits heterogeneous per-pattern competence. Examples without a suffix draw the trace pattern
//! from `free_usage`, which sets the policy's unprompted pattern habits.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::{distractor, generate, trace, Problem, TaskFamily};
use super::VocabSpec;
use crate::pattern::{Pattern, PatternId};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyAffinity {
    pub family: TaskFamily,
    pub difficulty: u32,
    /// Probability that a trace under each tagged pattern is correct.
    pub affinity: BTreeMap<PatternId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmstartConfig {
    pub families: Vec<FamilyAffinity>,
    /// Pattern distribution of traces attached to suffix-free prompts.
    pub free_usage: BTreeMap<PatternId, f64>,
    pub examples_per_family: usize,
    /// Fraction of examples that carry an explicit pattern suffix.
    pub suffix_fraction: f64,
    /// Probability that a suffixed example follows its suffix; otherwise the
    /// trace pattern is drawn from `free_usage`.
    #[serde(default = "full_adherence")]
    pub adherence: f64,
}

fn full_adherence() -> f64 {
    1.0
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        let table = |d: f64, r: f64, e: f64| {
            BTreeMap::from([(PatternId::Direct, d), (PatternId::Reflect, r), (PatternId::Explore, e)])
        };
        Self {
            families: vec![
                FamilyAffinity {
                    family: TaskFamily::ModChain,
                    difficulty: 1,
                    affinity: table(0.9, 0.5, 0.15),
                },
                FamilyAffinity {
                    family: TaskFamily::FindIndex,
                    difficulty: 1,
                    affinity: table(0.15, 0.5, 0.9),
                },
            ],
            free_usage: BTreeMap::from([
                (PatternId::Direct, 0.15),
                (PatternId::Reflect, 0.7),
                (PatternId::Explore, 0.15),
            ]),
            examples_per_family: 1500,
            suffix_fraction: 0.5,
            adherence: 1.0,
        }
    }
}

impl WarmstartConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.families.len() < 2 {
            return crate::error::config("warm-start corpus needs at least two families");
        }
        for fa in &self.families {
            for p in PatternId::TAGGED {
                match fa.affinity.get(&p) {
                    None => {
                        return crate::error::config(format!(
                            "affinity for ({}, {p}) missing",
                            fa.family
                        ))
                    }
                    Some(a) if !(0.0..=1.0).contains(a) => {
                        return crate::error::config(format!(
                            "affinity ({}, {p}) = {a} outside [0, 1]",
                            fa.family
                        ))
                    }
                    _ => {}
                }
            }
            if fa.affinity.contains_key(&PatternId::Adaptive) {
                return crate::error::config("adaptive pattern has no trace shape; drop its affinity");
            }
        }
        let mut total = 0.0;
        for (p, &u) in &self.free_usage {
            if *p == PatternId::Adaptive || !(0.0..=1.0).contains(&u) {
                return crate::error::config(format!("invalid free usage entry {p} = {u}"));
            }
            total += u;
        }
        if (total - 1.0).abs() > 1e-9 {
            return crate::error::config(format!("free usage sums to {total}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.suffix_fraction) {
            return crate::error::config("suffix_fraction outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.adherence) {
            return crate::error::config("adherence outside [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmstartExample {
    pub problem_id: String,
    pub family: TaskFamily,
    /// Suffix attached to the input (adaptive = none).
    pub prompted: PatternId,
    /// Pattern whose trace shape the target follows.
    pub trace_pattern: PatternId,
    pub input_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub is_correct: bool,
}

/// Seeds for training problems lie below this bound; held-out problems above.
pub const HELD_OUT_SEED_BASE: u64 = 1 << 40;

fn draw_pattern<R: Rng>(rng: &mut R, weights: &BTreeMap<PatternId, f64>) -> PatternId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = PatternId::Reflect;
    for (&p, &w) in weights {
        acc += w;
        last = p;
        if u < acc {
            return p;
        }
    }
    last
}

pub fn build_warmstart_corpus(
    config: &WarmstartConfig,
    seed: u64,
    vocab: &VocabSpec,
) -> crate::Result<Vec<WarmstartExample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.families.len() * config.examples_per_family);
    for (fi, fa) in config.families.iter().enumerate() {
        for i in 0..config.examples_per_family {
            let key = seed::mix(&[0x3A12, seed, fi as u64, i as u64]);
            let problem = generate(fa.family, fa.difficulty, key % HELD_OUT_SEED_BASE, vocab)?;
            let mut rng = seed::rng(seed::mix(&[key, 1]));
            let prompted = if rng.gen::<f64>() < config.suffix_fraction {
                PatternId::TAGGED[rng.gen_range(0..3)]
            } else {
                PatternId::Adaptive
            };
            let follows = rng.gen::<f64>() < config.adherence;
            let habit = draw_pattern(&mut rng, &config.free_usage);
            let trace_pattern = if prompted == PatternId::Adaptive || !follows {
                habit
            } else {
                prompted
            };
            let is_correct = rng.gen::<f64>() < fa.affinity[&trace_pattern];
            out.push(example(&problem, prompted, trace_pattern, is_correct, vocab));
        }
    }
    Ok(out)
}

fn example(
    problem: &Problem,
    prompted: PatternId,
    trace_pattern: PatternId,
    is_correct: bool,
    vocab: &VocabSpec,
) -> WarmstartExample {
    let wrong = distractor(problem, 0, vocab);
    let answer = if is_correct { problem.golden_answer.clone() } else { wrong.clone() };
    let alternative = if is_correct { wrong } else { problem.golden_answer.clone() };
    let mut input_tokens = problem.prompt_tokens.clone();
    input_tokens.extend_from_slice(&Pattern::standard(prompted, vocab).suffix_tokens);
    WarmstartExample {
        problem_id: problem.id.clone(),
        family: problem.family,
        prompted,
        trace_pattern,
        input_tokens,
        target_tokens: trace(problem, trace_pattern, &answer, &alternative, vocab)
            .expect("trace pattern is always tagged"),
        is_correct,
    }
}
