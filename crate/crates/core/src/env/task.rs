//! Synthetic verifiable task families.
//!
//! * `mod_chain`: `((a op b) op c ...) mod p`, evaluated left to right with
//!   `op` in `{+, -, *}` and `p` in `{5, 7}`. Difficulty `d` gives `d + 1`
//!   operands drawn from `0..p`.
//! * `find_index`: `d + 2` distinct candidate digits and a target digit; the
//!   answer is the 1-based position of the candidate equal to the target.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VocabSpec;
use crate::pattern::PatternId;
use crate::seed;

const MODULI: [u64; 2] = [5, 7];

/// Maximum prompt length (without suffix) accepted by the generators.
pub const MAX_PROMPT_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ModChain,
    FindIndex,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 2] = [TaskFamily::ModChain, TaskFamily::FindIndex];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModChain => "mod_chain",
            TaskFamily::FindIndex => "find_index",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "mod_chain" => Ok(TaskFamily::ModChain),
            "find_index" => Ok(TaskFamily::FindIndex),
            other => crate::error::config(format!("unknown task family '{other}'")),
        }
    }

    pub fn max_difficulty(self) -> u32 {
        match self {
            TaskFamily::ModChain => 6,
            TaskFamily::FindIndex => 7,
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One verifiable task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: String,
    pub family: TaskFamily,
    pub prompt_tokens: Vec<u32>,
    pub golden_answer: Vec<u32>,
    pub difficulty: u32,
}

/// Line-record form of a [`Problem`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemRecord {
    pub id: String,
    pub family: String,
    pub prompt_tokens: Vec<u32>,
    pub golden_answer: Vec<u32>,
}

impl Problem {
    pub fn to_record(&self) -> ProblemRecord {
        ProblemRecord {
            id: self.id.clone(),
            family: self.family.name().to_string(),
            prompt_tokens: self.prompt_tokens.clone(),
            golden_answer: self.golden_answer.clone(),
        }
    }

    pub fn from_record(rec: ProblemRecord) -> crate::Result<Self> {
        let family = TaskFamily::parse(&rec.family)?;
        let difficulty = parse_id(&rec.id).map(|(_, d, _)| d).unwrap_or(1);
        if rec.prompt_tokens.is_empty() || rec.golden_answer.is_empty() {
            return crate::error::input(format!("problem '{}' has empty prompt or answer", rec.id));
        }
        Ok(Self {
            id: rec.id,
            family,
            prompt_tokens: rec.prompt_tokens,
            golden_answer: rec.golden_answer,
            difficulty,
        })
    }

    /// Stable numeric key for seed derivation.
    pub fn key(&self) -> u64 {
        seed::str_hash(&self.id)
    }
}

pub fn problem_id(family: TaskFamily, difficulty: u32, seed: u64) -> String {
    format!("{}/d{}/s{}", family.name(), difficulty, seed)
}

fn parse_id(id: &str) -> Option<(String, u32, u64)> {
    let mut it = id.split('/');
    let fam = it.next()?.to_string();
    let d = it.next()?.strip_prefix('d')?.parse().ok()?;
    let s = it.next()?.strip_prefix('s')?.parse().ok()?;
    Some((fam, d, s))
}

/// Generates a problem by family name. Pure function of its arguments.
pub fn generate_problem(family: &str, difficulty: u32, seed: u64) -> crate::Result<Problem> {
    let fam = TaskFamily::parse(family)?;
    generate(fam, difficulty, seed, &VocabSpec::default())
}

pub fn generate(
    family: TaskFamily,
    difficulty: u32,
    seed: u64,
    vocab: &VocabSpec,
) -> crate::Result<Problem> {
    if difficulty < 1 || difficulty > family.max_difficulty() {
        return crate::error::config(format!(
            "difficulty {difficulty} outside 1..={} for {family}",
            family.max_difficulty()
        ));
    }
    let mut rng = seed::rng(seed::mix(&[0x7A5C, family as u64, u64::from(difficulty), seed]));
    let (prompt_tokens, answer) = match family {
        TaskFamily::ModChain => {
            let p = MODULI[rng.gen_range(0..MODULI.len())];
            let mut prompt = vec![vocab.family_chain];
            let mut acc: i64 = rng.gen_range(0..p as i64);
            prompt.push(vocab.digit(acc as u32));
            for _ in 0..difficulty {
                let operand: i64 = rng.gen_range(0..p as i64);
                let op = [vocab.plus, vocab.minus, vocab.times][rng.gen_range(0..3)];
                acc = if op == vocab.plus {
                    acc + operand
                } else if op == vocab.minus {
                    acc - operand
                } else {
                    acc * operand
                };
                acc = acc.rem_euclid(p as i64);
                prompt.push(op);
                prompt.push(vocab.digit(operand as u32));
            }
            prompt.extend_from_slice(&[vocab.modulo, vocab.digit(p as u32), vocab.equals]);
            (prompt, acc as u64)
        }
        TaskFamily::FindIndex => {
            let k = difficulty as usize + 2;
            let mut digits: Vec<u32> = (0..10).collect();
            digits.shuffle(&mut rng);
            digits.truncate(k);
            let pos = rng.gen_range(0..k);
            let mut prompt = vec![vocab.family_find];
            prompt.extend(digits.iter().map(|&d| vocab.digit(d)));
            prompt.extend_from_slice(&[vocab.sep, vocab.digit(digits[pos]), vocab.equals]);
            (prompt, pos as u64 + 1)
        }
    };
    debug_assert!(prompt_tokens.len() <= MAX_PROMPT_TOKENS);
    Ok(Problem {
        id: problem_id(family, difficulty, seed),
        family,
        prompt_tokens,
        golden_answer: vocab.number(answer),
        difficulty,
    })
}

/// A plausible wrong answer of the same shape as the golden one: the golden
/// value shifted by `1 + salt % (range - 1)` within the answer range, so salt
/// 0 is the off-by-one slip.
pub fn distractor(problem: &Problem, salt: u64, vocab: &VocabSpec) -> Vec<u32> {
    let golden = answer_value(&problem.golden_answer);
    let range = match problem.family {
        TaskFamily::ModChain => {
            let p = problem.prompt_tokens[problem.prompt_tokens.len() - 2] as u64;
            p
        }
        TaskFamily::FindIndex => problem.difficulty as u64 + 3,
    };
    let offset = 1 + salt % (range - 1);
    let mut wrong = (golden + offset) % range;
    if problem.family == TaskFamily::FindIndex && wrong == 0 {
        // indices are 1-based
        wrong = if golden == range - 1 { 1 } else { range - 1 };
    }
    vocab.number(wrong)
}

fn answer_value(tokens: &[u32]) -> u64 {
    tokens.iter().fold(0u64, |acc, &t| acc * 10 + u64::from(t))
}

/// Reasoning trace emitted under `pattern` for `problem`, with `answer` as
/// its conclusion.
///
/// * direct:  `TAG_D DELIM ans EOS`
/// * reflect: `TAG_R (STEP s)* CHECK DELIM ans EOS`, worked step by step. On
///   `mod_chain` the steps are the running values of the chain before its
///   last operation; on `find_index` they re-read the candidates up to
///   position `ans`.
/// * explore: `TAG_E STEP alt ALT STEP ans DELIM ans EOS`
///
/// The adaptive pattern has no trace shape of its own.
pub fn trace(
    problem: &Problem,
    pattern: PatternId,
    answer: &[u32],
    alternative: &[u32],
    vocab: &VocabSpec,
) -> Option<Vec<u32>> {
    let tag = vocab.tag(pattern)?;
    let mut t = vec![tag];
    match pattern {
        PatternId::Direct => {}
        PatternId::Reflect => {
            for s in reflect_steps(problem, answer, vocab) {
                t.push(vocab.step);
                t.extend_from_slice(&s);
            }
            t.push(vocab.check);
        }
        PatternId::Explore => {
            t.push(vocab.step);
            t.extend_from_slice(alternative);
            t.push(vocab.alt);
            t.push(vocab.step);
            t.extend_from_slice(answer);
        }
        PatternId::Adaptive => unreachable!(),
    }
    t.push(vocab.answer_delim);
    t.extend_from_slice(answer);
    t.push(vocab.eos);
    Some(t)
}

fn reflect_steps(problem: &Problem, answer: &[u32], vocab: &VocabSpec) -> Vec<Vec<u32>> {
    let pt = &problem.prompt_tokens;
    match problem.family {
        TaskFamily::ModChain => {
            let p = i64::from(pt[pt.len() - 2]);
            let mut acc = i64::from(pt[1]);
            let mut steps = Vec::new();
            let ops = &pt[2..pt.len() - 3];
            for pair in ops[..ops.len() - 2].chunks(2) {
                let b = i64::from(pair[1]);
                acc = if pair[0] == vocab.plus {
                    acc + b
                } else if pair[0] == vocab.minus {
                    acc - b
                } else {
                    acc * b
                }
                .rem_euclid(p);
                steps.push(vocab.number(acc as u64));
            }
            steps
        }
        TaskFamily::FindIndex => {
            let candidates = &pt[1..pt.len() - 3];
            let upto = (answer_value(answer) as usize).clamp(1, candidates.len());
            candidates[..upto].iter().map(|&c| vec![c]).collect()
        }
    }
}

/// Correct trace for `problem` under a tagged pattern.
pub fn canonical_trace(problem: &Problem, pattern: PatternId, vocab: &VocabSpec) -> Option<Vec<u32>> {
    let alt = distractor(problem, 1, vocab);
    trace(problem, pattern, &problem.golden_answer, &alt, vocab)
}
