//! Reasoning-pattern identities and their suffix token sequences.

use serde::{Deserialize, Serialize};

use crate::env::VocabSpec;

/// The four reasoning patterns, in enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternId {
    Direct,
    Reflect,
    Explore,
    Adaptive,
}

impl PatternId {
    pub const ALL: [PatternId; 4] = [
        PatternId::Direct,
        PatternId::Reflect,
        PatternId::Explore,
        PatternId::Adaptive,
    ];

    /// The three patterns that carry an explicit suffix.
    pub const TAGGED: [PatternId; 3] = [PatternId::Direct, PatternId::Reflect, PatternId::Explore];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PatternId::Direct => "direct",
            PatternId::Reflect => "reflect",
            PatternId::Explore => "explore",
            PatternId::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "direct" => Ok(PatternId::Direct),
            "reflect" => Ok(PatternId::Reflect),
            "explore" => Ok(PatternId::Explore),
            "adaptive" => Ok(PatternId::Adaptive),
            other => crate::error::config(format!("unknown pattern '{other}'")),
        }
    }
}

impl std::fmt::Display for PatternId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A pattern together with the suffix appended to the prompt to elicit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub id: PatternId,
    pub suffix_tokens: Vec<u32>,
    pub label: String,
}

impl Pattern {
    /// Token-level suffix for `id`: the pattern tag, an instruction marker and
    /// (for the two multi-step patterns) a style marker. Adaptive is empty.
    pub fn standard(id: PatternId, vocab: &VocabSpec) -> Self {
        let (suffix_tokens, label) = match id {
            PatternId::Direct => (vec![vocab.pattern_tags[0], vocab.instr], "Direct Solution"),
            PatternId::Reflect => (
                vec![vocab.pattern_tags[1], vocab.instr, vocab.check],
                "Reflection and Verification",
            ),
            PatternId::Explore => (
                vec![vocab.pattern_tags[2], vocab.instr, vocab.alt],
                "Exploration of Multiple Solutions",
            ),
            PatternId::Adaptive => (Vec::new(), "Adaptive"),
        };
        Self { id, suffix_tokens, label: label.to_string() }
    }

    pub fn validate(&self, vocab: &VocabSpec) -> crate::Result<()> {
        match (vocab.tag(self.id), self.suffix_tokens.first()) {
            (None, None) => Ok(()),
            (Some(tag), Some(&first)) if tag == first => Ok(()),
            _ => crate::error::config(format!(
                "suffix of pattern '{}' must {}",
                self.id,
                if self.id == PatternId::Adaptive { "be empty" } else { "start with its tag" }
            )),
        }
    }
}

/// All four standard patterns in enumeration order.
pub fn standard_patterns(vocab: &VocabSpec) -> Vec<Pattern> {
    PatternId::ALL.iter().map(|&id| Pattern::standard(id, vocab)).collect()
}

/// Resolves a list of pattern names to standard patterns.
pub fn patterns_by_name(names: &[String], vocab: &VocabSpec) -> crate::Result<Vec<Pattern>> {
    names
        .iter()
        .map(|n| PatternId::parse(n).map(|id| Pattern::standard(id, vocab)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_suffixes_are_valid() {
        let v = VocabSpec::default();
        for p in standard_patterns(&v) {
            p.validate(&v).unwrap();
        }
        assert!(Pattern::standard(PatternId::Adaptive, &v).suffix_tokens.is_empty());
    }

    #[test]
    fn mislabeled_suffix_rejected() {
        let v = VocabSpec::default();
        let mut p = Pattern::standard(PatternId::Direct, &v);
        p.suffix_tokens[0] = v.pattern_tags[1];
        assert!(p.validate(&v).is_err());
    }
}
