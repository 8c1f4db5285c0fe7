//! Synthetic verifiable tasks, the rule-based verifier and the warm-start corpus.

mod task;
mod verify;
mod vocab;
mod warmstart;

pub use task::{
    canonical_trace, distractor, generate, generate_problem, problem_id, trace, Problem,
    ProblemRecord, TaskFamily, MAX_PROMPT_TOKENS,
};
pub use verify::{canonicalize, extract_answer, verify};
pub use vocab::VocabSpec;
pub use warmstart::{
    build_warmstart_corpus, FamilyAffinity, WarmstartConfig, WarmstartExample, HELD_OUT_SEED_BASE,
};
