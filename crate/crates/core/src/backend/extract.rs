/// Map free-text model output onto a label.
///
/// Rules are tried in order: exact match after trimming, case-insensitive
/// exact match, then a unique label occurring as a whole word (case-insensitive).
/// Returns `None` for empty output, no match, or more than one whole-word match.
pub fn extract_label(raw_output: &str, label_set: &[String]) -> Option<String> {
    let trimmed = raw_output.trim();
    if trimmed.is_empty() {
        return None;
    }
    if let Some(l) = label_set.iter().find(|l| l.as_str() == trimmed) {
        return Some(l.clone());
    }
    let lower = trimmed.to_lowercase();
    let ci: Vec<&String> = label_set
        .iter()
        .filter(|l| l.to_lowercase() == lower)
        .collect();
    if ci.len() == 1 {
        return Some(ci[0].clone());
    }
    let hits: Vec<&String> = label_set
        .iter()
        .filter(|l| contains_word(&lower, &l.to_lowercase()))
        .collect();
    match hits.as_slice() {
        [only] => Some((*only).clone()),
        _ => None,
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(needle) {
        let at = start + pos;
        let end = at + needle.len();
        let before_ok = haystack[..at].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return true;
        }
        start = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
    }
    false
}
