//! Raw note text → [`SoapNote`].
//!
//! Section grammar: a tag line starts (after optional indentation) with a
//! case-insensitive section name — `Subjective|Objective|Assessment|Plan` or
//! the single letters `S|O|A|P` — followed by optional spaces and a colon.
//! A section's content runs from after its colon to the next tag line (or end
//! of input) and is trimmed. Missing sections come back empty; if a tag
//! appears twice, the first occurrence wins.

use super::{CohortError, SoapNote};
use regex::Regex;
use std::sync::OnceLock;

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?mi)^[ \t]*(subjective|objective|assessment|plan|s|o|a|p)[ \t]*:").unwrap()
    })
}

pub fn parse_soap(raw: &str) -> Result<SoapNote, CohortError> {
    let mut spans: Vec<(char, usize, usize)> = Vec::new(); // (section key, content start, tag start)
    for caps in tag_re().captures_iter(raw) {
        let whole = caps.get(0).unwrap();
        let tag = caps.get(1).unwrap().as_str();
        let key = tag.chars().next().unwrap().to_ascii_lowercase();
        spans.push((key, whole.end(), whole.start()));
    }
    if spans.is_empty() {
        let preview: String = raw.chars().take(60).collect();
        return Err(CohortError::UnparseableNote(preview));
    }

    let mut note = SoapNote::default();
    for (i, &(key, content_start, _)) in spans.iter().enumerate() {
        let content_end = spans.get(i + 1).map_or(raw.len(), |&(_, _, next_tag)| next_tag);
        let content = raw[content_start..content_end].trim().to_string();
        let slot = match key {
            's' => &mut note.subjective,
            'o' => &mut note.objective,
            'a' => &mut note.assessment,
            'p' => &mut note.plan,
            _ => unreachable!(),
        };
        if slot.is_empty() {
            *slot = content;
        }
    }
    Ok(note)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_letter_tags() {
        let note = parse_soap("S: tremor worse\nO: none\nA: IPD\nP: Levodopa").unwrap();
        assert_eq!(note.subjective, "tremor worse");
        assert_eq!(note.objective, "none");
        assert_eq!(note.assessment, "IPD");
        assert_eq!(note.plan, "Levodopa");
    }

    #[test]
    fn parses_full_names_case_insensitively_with_multiline_content() {
        let raw = "SUBJECTIVE : dizzy on standing\nfeels faint in the morning\nAssessment: orthostatic hypotension\nplan:\nMidodrine";
        let note = parse_soap(raw).unwrap();
        assert_eq!(
            note.subjective,
            "dizzy on standing\nfeels faint in the morning"
        );
        assert_eq!(note.objective, "");
        assert_eq!(note.assessment, "orthostatic hypotension");
        assert_eq!(note.plan, "Midodrine");
    }

    #[test]
    fn missing_sections_are_empty() {
        let note = parse_soap("A: stable parkinsonism").unwrap();
        assert_eq!(note.assessment, "stable parkinsonism");
        assert!(note.subjective.is_empty() && note.plan.is_empty());
    }

    #[test]
    fn untagged_text_is_rejected() {
        assert!(matches!(
            parse_soap("patient doing fine, keep meds"),
            Err(CohortError::UnparseableNote(_))
        ));
    }

    #[test]
    fn first_duplicate_tag_wins() {
        let note = parse_soap("P: Levodopa\nP: Quetiapine").unwrap();
        assert_eq!(note.plan, "Levodopa");
    }

    #[test]
    fn colon_in_body_is_not_a_tag() {
        let note = parse_soap("S: reports time: 10am tremor\nP: none").unwrap();
        assert_eq!(note.subjective, "reports time: 10am tremor");
    }
}
