use super::VocabSpec;

/// Span strictly between the last answer delimiter and the first EOS after it.
///
/// Returns `None` when no delimiter is present, when no EOS follows it, or
/// when the span is empty.
pub fn extract_answer(tokens: &[u32], vocab: &VocabSpec) -> Option<Vec<u32>> {
    let delim = tokens.iter().rposition(|&t| t == vocab.answer_delim)?;
    let rest = &tokens[delim + 1..];
    let end = rest.iter().position(|&t| t == vocab.eos)?;
    let span = &rest[..end];
    if span.is_empty() {
        None
    } else {
        Some(span.to_vec())
    }
}

/// Strips leading zero digits, keeping a single `0` for an all-zero answer.
/// Non-numeric answers are returned unchanged.
pub fn canonicalize(answer: &[u32]) -> &[u32] {
    if answer.is_empty() || answer.iter().any(|&t| t >= 10) {
        return answer;
    }
    let first = answer.iter().position(|&t| t != 0).unwrap_or(answer.len() - 1);
    &answer[first..]
}

/// Binary verifier reward.
pub fn verify(answer: Option<&[u32]>, golden: &[u32]) -> u8 {
    match answer {
        Some(a) if !a.is_empty() && canonicalize(a) == canonicalize(golden) => 1,
        _ => 0,
    }
}
