use serde::{Deserialize, Serialize};

use crate::pattern::PatternId;

/// Token-id assignment for the synthetic task language.
///
/// Digits occupy ids `0..10` so a digit token's id is its value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub plus: u32,
    pub minus: u32,
    pub times: u32,
    pub modulo: u32,
    pub equals: u32,
    pub sep: u32,
    pub family_chain: u32,
    pub family_find: u32,
    pub step: u32,
    pub check: u32,
    pub alt: u32,
    pub instr: u32,
    pub answer_delim: u32,
    pub eos: u32,
    pub pad: u32,
    /// Tags for direct, reflect and explore, in that order. Adaptive has none.
    pub pattern_tags: [u32; 3],
    pub size: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            plus: 10,
            minus: 11,
            times: 12,
            modulo: 13,
            equals: 14,
            sep: 15,
            family_chain: 16,
            family_find: 17,
            step: 18,
            check: 19,
            alt: 20,
            instr: 21,
            answer_delim: 22,
            eos: 23,
            pad: 24,
            pattern_tags: [25, 26, 27],
            size: 28,
        }
    }
}

impl VocabSpec {
    pub fn digit(&self, d: u32) -> u32 {
        debug_assert!(d < 10);
        d
    }

    pub fn is_digit(&self, tok: u32) -> bool {
        tok < 10
    }

    pub fn tag(&self, pattern: PatternId) -> Option<u32> {
        match pattern {
            PatternId::Direct => Some(self.pattern_tags[0]),
            PatternId::Reflect => Some(self.pattern_tags[1]),
            PatternId::Explore => Some(self.pattern_tags[2]),
            PatternId::Adaptive => None,
        }
    }

    pub fn pattern_of_tag(&self, tok: u32) -> Option<PatternId> {
        self.pattern_tags
            .iter()
            .position(|&t| t == tok)
            .map(|i| [PatternId::Direct, PatternId::Reflect, PatternId::Explore][i])
    }

    /// Encodes a non-negative integer as digit tokens, most significant first.
    pub fn number(&self, mut n: u64) -> Vec<u32> {
        let mut out = Vec::new();
        loop {
            out.push((n % 10) as u32);
            n /= 10;
            if n == 0 {
                break;
            }
        }
        out.reverse();
        out
    }

    fn reserved(&self) -> Vec<u32> {
        let mut r = vec![
            self.plus,
            self.minus,
            self.times,
            self.modulo,
            self.equals,
            self.sep,
            self.family_chain,
            self.family_find,
            self.step,
            self.check,
            self.alt,
            self.instr,
            self.answer_delim,
            self.eos,
            self.pad,
        ];
        r.extend_from_slice(&self.pattern_tags);
        r
    }

    /// All non-digit ids must be distinct, at least 10 and below `size`.
    pub fn validate(&self) -> crate::Result<()> {
        let r = self.reserved();
        let mut sorted = r.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != r.len() {
            return crate::error::config("vocabulary reserves the same id twice");
        }
        if r.iter().any(|&t| t < 10 || t as usize >= self.size) {
            return crate::error::config("reserved ids must lie in 10..size");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_is_valid() {
        VocabSpec::default().validate().unwrap();
    }

    #[test]
    fn duplicate_markers_rejected() {
        let v = VocabSpec { eos: 22, ..VocabSpec::default() };
        assert!(v.validate().is_err());
    }

    #[test]
    fn number_encoding() {
        let v = VocabSpec::default();
        assert_eq!(v.number(0), vec![0]);
        assert_eq!(v.number(42), vec![4, 2]);
        assert_eq!(v.number(907), vec![9, 0, 7]);
    }
}
