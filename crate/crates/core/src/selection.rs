//! Per-pattern accuracy, optimal-pattern selection and the suffix attention
//! mask used at update time.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::pattern::PatternId;
use crate::rollout::{PatternGroup, PatternGroupSet};

/// Accuracy summary of one pattern group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub pattern: PatternId,
    pub accuracy: f64,
    pub correct: usize,
    pub m: usize,
    /// Shortest response among reward-1 trajectories.
    pub min_correct_len: Option<usize>,
}

pub fn pattern_accuracy(group: &PatternGroup) -> crate::Result<PatternStats> {
    let m = group.trajectories.len();
    if m == 0 {
        return crate::error::input("empty group");
    }
    let mut correct = 0;
    let mut min_len: Option<usize> = None;
    for t in &group.trajectories {
        match t.reward {
            None => {
                return Err(crate::Error::State(format!(
                    "group for pattern {} is unscored",
                    group.pattern.id
                )))
            }
            Some(1) => {
                correct += 1;
                min_len = Some(min_len.map_or(t.length, |l| l.min(t.length)));
            }
            Some(_) => {}
        }
    }
    Ok(PatternStats {
        pattern: group.pattern.id,
        accuracy: correct as f64 / m as f64,
        correct,
        m,
        min_correct_len: min_len,
    })
}

/// Outcome of [`select_optimal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: PatternId,
    /// Position of the chosen pattern in the stats list (and group set).
    pub index: usize,
    /// More than one pattern reached the top accuracy.
    pub tie_break: bool,
    /// The chosen group has zero reward variance, so it yields no gradient.
    pub skipped: bool,
    pub accuracies: Vec<f64>,
}

impl SelectionResult {
    pub fn winning_group<'a>(&self, set: &'a PatternGroupSet) -> &'a PatternGroup {
        &set.groups[self.index]
    }
}

/// `p* = argmax Acc`, ties by shortest correct trace, then by pattern
/// enumeration order. When every pattern scores 0 the adaptive pattern (if
/// present) is reported.
pub fn select_optimal(stats: &[PatternStats]) -> crate::Result<SelectionResult> {
    if stats.is_empty() {
        return crate::error::input("no pattern statistics to select from");
    }
    for (i, s) in stats.iter().enumerate() {
        if stats[..i].iter().any(|q| q.pattern == s.pattern) {
            return crate::error::input(format!("duplicate statistics for pattern {}", s.pattern));
        }
    }
    let accuracies: Vec<f64> = stats.iter().map(|s| s.accuracy).collect();
    let best = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..stats.len()).filter(|&i| stats[i].accuracy == best).collect();
    let index = if best == 0.0 {
        stats
            .iter()
            .position(|s| s.pattern == PatternId::Adaptive)
            .unwrap_or_else(|| *tied.iter().min_by_key(|&&i| stats[i].pattern.index()).expect("non-empty"))
    } else {
        *tied
            .iter()
            .min_by_key(|&&i| (stats[i].min_correct_len.unwrap_or(usize::MAX), stats[i].pattern.index()))
            .expect("non-empty")
    };
    let chosen = &stats[index];
    Ok(SelectionResult {
        chosen: chosen.pattern,
        index,
        tie_break: tied.len() > 1,
        skipped: chosen.correct == 0 || chosen.correct == chosen.m,
        accuracies,
    })
}

/// Stats and selection for every problem's group set; fills `accuracies`.
pub fn select_for_set(set: &mut PatternGroupSet) -> crate::Result<SelectionResult> {
    let stats = set.groups.iter().map(pattern_accuracy).collect::<crate::Result<Vec<_>>>()?;
    let sel = select_optimal(&stats)?;
    set.accuracies = Some(sel.accuracies.clone());
    Ok(sel)
}

/// Per-problem selection log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub problem_id: String,
    pub patterns: Vec<PatternId>,
    pub accuracies: Vec<f64>,
    pub p_star: PatternId,
    pub tie_break: bool,
    pub skipped: bool,
}

impl SelectionRecord {
    pub fn new(set: &PatternGroupSet, sel: &SelectionResult) -> Self {
        Self {
            problem_id: set.problem_id.clone(),
            patterns: set.groups.iter().map(|g| g.pattern.id).collect(),
            accuracies: sel.accuracies.clone(),
            p_star: sel.chosen,
            tie_break: sel.tie_break,
            skipped: sel.skipped,
        }
    }
}

/// Position layout shared by every row of a group: `prefix_len` tokens of
/// prompt ⊕ suffix, the suffix occupying `suffix`, then the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixLayout {
    pub prefix_len: usize,
    pub suffix: Range<usize>,
}

impl PrefixLayout {
    pub fn new(prompt_len: usize, suffix_len: usize) -> Self {
        Self { prefix_len: prompt_len + suffix_len, suffix: prompt_len..prompt_len + suffix_len }
    }

    pub fn of_group(group: &PatternGroup) -> Self {
        Self::new(group.prompt_tokens.len(), group.pattern.suffix_tokens.len())
    }
}

/// Attention mask for a group's update batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixMask {
    pub width: usize,
    /// Row-major `rows × width`, 1 = visible.
    pub mask: Vec<u8>,
    /// Idx(p): suffix positions, identical for every row.
    pub suffix: Range<usize>,
    pub lengths: Vec<usize>,
}

impl SuffixMask {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.mask[i * self.width..(i + 1) * self.width]
    }
}

fn mask_rows(
    layout: &PrefixLayout,
    response_lens: &[usize],
    width: usize,
    hide_suffix: bool,
) -> crate::Result<SuffixMask> {
    let s = &layout.suffix;
    if s.start > s.end || s.end > layout.prefix_len {
        return crate::error::input(format!(
            "suffix span {}..{} lies outside the prompt region of {} tokens",
            s.start, s.end, layout.prefix_len
        ));
    }
    if hide_suffix && s.start == 0 && !s.is_empty() {
        return crate::error::input("suffix cannot start at position 0; the prompt must precede it");
    }
    let mut mask = vec![0u8; response_lens.len() * width];
    let mut lengths = Vec::with_capacity(response_lens.len());
    for (i, &r) in response_lens.iter().enumerate() {
        let n = layout.prefix_len + r;
        if n > width {
            return crate::error::input(format!("row {i}: {n} positions exceed width {width}"));
        }
        for t in 0..n {
            mask[i * width + t] = u8::from(!(hide_suffix && s.contains(&t)));
        }
        lengths.push(n);
    }
    Ok(SuffixMask { width, mask, suffix: s.clone(), lengths })
}

/// Zeros at the suffix positions and at PAD, ones over prompt and response.
pub fn build_suffix_mask(
    layout: &PrefixLayout,
    response_lens: &[usize],
    width: usize,
) -> crate::Result<SuffixMask> {
    mask_rows(layout, response_lens, width, true)
}

/// Same layout with the suffix left visible; only PAD is masked.
pub fn build_visible_mask(
    layout: &PrefixLayout,
    response_lens: &[usize],
    width: usize,
) -> crate::Result<SuffixMask> {
    mask_rows(layout, response_lens, width, false)
}
