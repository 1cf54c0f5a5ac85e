//! Parsers for the analyst's structured answer formats.
//!
//! Every parser here is total: bad input becomes a structured error (or is
//! skipped with a diagnostic), never a panic.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::RawChange;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty line")]
    Empty,
    #[error("missing 'Start:' keyword")]
    MissingStart,
    #[error("missing arrow between start and end descriptions")]
    MissingArrow,
    #[error("missing '(happened after image No.X)' index")]
    MissingIndex,
    #[error("the {0} description is empty")]
    EmptyDescription(&'static str),
    #[error("bad image index {0:?}")]
    BadIndex(String),
    #[error("no 'Answer: [Y/N]' line found")]
    MissingAnswer,
    #[error("no '(pX + cY)' abstraction lines found")]
    MissingAbstractions,
}

fn change_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:\d+\s*[.)]\s*)?start\s*:\s*(.*?)\s*(?:→|->)\s*end\s*:\s*(.*?)\s*\(\s*happened\s+after\s+image\s+no\.?\s*\[?\s*(\d+)\s*\]?\s*\)\s*\.?\s*$",
        )
        .expect("static regex")
    })
}

/// Parse one finding line of the form
/// `Start: <before> → End: <after> (happened after image No.X)`.
///
/// Keywords are case-insensitive; whitespace, a leading `3.`-style list
/// number, an ASCII `->` arrow, brackets around the index, and a trailing
/// period are all tolerated. The index is *not* range-checked here — callers
/// ground it against their sequence.
pub fn parse_change_line(line: &str) -> Result<RawChange, ParseError> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Err(ParseError::Empty);
    }
    let caps = match change_line_re().captures(trimmed) {
        Some(caps) => caps,
        None => return Err(diagnose_change_line(trimmed)),
    };
    let before_desc = caps[1].trim().to_string();
    let after_desc = caps[2].trim().to_string();
    if before_desc.is_empty() {
        return Err(ParseError::EmptyDescription("start"));
    }
    if after_desc.is_empty() {
        return Err(ParseError::EmptyDescription("end"));
    }
    let after_index: usize =
        caps[3].parse().map_err(|_| ParseError::BadIndex(caps[3].to_string()))?;
    if after_index == 0 {
        return Err(ParseError::BadIndex(caps[3].to_string()));
    }
    Ok(RawChange { before_desc, after_desc, after_index })
}

/// Name the first missing piece of an almost-change line.
fn diagnose_change_line(line: &str) -> ParseError {
    let lower = line.to_lowercase();
    if !lower.contains("start") {
        return ParseError::MissingStart;
    }
    if !line.contains('→') && !line.contains("->") {
        return ParseError::MissingArrow;
    }
    if !lower.contains("happened after image") {
        return ParseError::MissingIndex;
    }
    // All the landmarks are present but the overall shape is off (e.g. an
    // empty description swallowed a keyword).
    ParseError::EmptyDescription("start or end")
}

/// Render a change back into the wire format parsed by
/// [`parse_change_line`].
pub fn format_change_line(change: &RawChange) -> String {
    format!(
        "Start: {} → End: {} (happened after image No.{})",
        change.before_desc, change.after_desc, change.after_index
    )
}

/// One line of a detect answer that looked like a finding but failed to
/// parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindingError {
    /// 1-based line number within the answer text.
    pub line_no: usize,
    pub line: String,
    pub error: ParseError,
}

/// A successfully parsed finding plus where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    /// 1-based line number within the answer text.
    pub line_no: usize,
    pub change: RawChange,
}

/// Split a detect answer into findings and per-line errors.
///
/// Lines that do not even attempt the finding format (prose, blank lines)
/// are ignored; a line "attempts" it if it mentions `start` with a colon or
/// contains an arrow.
pub fn parse_findings(answer: &str) -> (Vec<Finding>, Vec<FindingError>) {
    let mut findings = Vec::new();
    let mut errors = Vec::new();
    for (idx, raw_line) in answer.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let lower = line.to_lowercase();
        let attempts =
            (lower.contains("start") && lower.contains(':')) || line.contains('→') || line.contains("->");
        if !attempts {
            continue;
        }
        match parse_change_line(line) {
            Ok(change) => findings.push(Finding { line_no: idx + 1, change }),
            Err(error) => errors.push(FindingError {
                line_no: idx + 1,
                line: line.to_string(),
                error,
            }),
        }
    }
    (findings, errors)
}

/// Extract the verdict from an `Answer: [Y/N].` line. The first `Answer:`
/// line wins; `Y`/`Yes` and `N`/`No` are accepted case-insensitively.
pub fn parse_yn(answer: &str) -> Result<bool, ParseError> {
    for line in answer.lines() {
        let line = line.trim();
        let lower = line.to_lowercase();
        if let Some(rest) = lower.strip_prefix("answer") {
            let rest = rest.trim_start_matches([':', ' ', '\t', '[']);
            let verdict: String =
                rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
            match verdict.as_str() {
                "y" | "yes" => return Ok(true),
                "n" | "no" => return Ok(false),
                _ => continue,
            }
        }
    }
    Err(ParseError::MissingAnswer)
}

fn abstraction_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•]\s*)?\(\s*p(\d+)\s*\+\s*c(\d+)\s*\)\s*(.+?)\s*$")
            .expect("static regex")
    })
}

/// Parse the `(pX + cY) text` enumeration of an abstraction answer.
///
/// Returns the texts ordered by (place level, change level); every distinct
/// (p, c) pair appears once, later duplicates are dropped. Producing no
/// pairs at all is an error.
pub fn parse_abstractions(answer: &str) -> Result<Vec<String>, ParseError> {
    let mut entries: Vec<(usize, usize, String)> = Vec::new();
    for line in answer.lines() {
        if let Some(caps) = abstraction_line_re().captures(line) {
            let p: usize = caps[1].parse().map_err(|_| ParseError::BadIndex(caps[1].into()))?;
            let c: usize = caps[2].parse().map_err(|_| ParseError::BadIndex(caps[2].into()))?;
            if !entries.iter().any(|(ep, ec, _)| *ep == p && *ec == c) {
                entries.push((p, c, caps[3].trim().to_string()));
            }
        }
    }
    if entries.is_empty() {
        return Err(ParseError::MissingAbstractions);
    }
    entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    Ok(entries.into_iter().map(|(_, _, text)| text).collect())
}

fn list_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+\s*[.)]\s*(.*)$").expect("static regex"))
}

/// Parse a free-text "unusual things" answer into one finding per line,
/// stripping bullets and list numbers. Lines amounting to "none" yield
/// nothing.
pub fn parse_unusual(answer: &str) -> Vec<String> {
    let mut findings = Vec::new();
    for line in answer.lines() {
        let mut text = line.trim();
        text = text.trim_start_matches(['-', '*', '•']).trim_start();
        if let Some(caps) = list_number_re().captures(text) {
            findings.push(caps[1].trim().to_string());
            continue;
        }
        if !text.is_empty() {
            findings.push(text.to_string());
        }
    }
    findings.retain(|t| {
        let lower = t.to_lowercase();
        !t.is_empty() && lower != "none" && lower != "none."
    });
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_canonical_finding_line() {
        let line = "Start: The support beams of the overpass were in pale green color. → End: The support beams were painted into a bright blue color. (Happened after image No. 2)";
        let change = parse_change_line(line).unwrap();
        assert_eq!(change.after_index, 2);
        assert_eq!(
            change.before_desc,
            "The support beams of the overpass were in pale green color."
        );
        assert_eq!(
            change.after_desc,
            "The support beams were painted into a bright blue color."
        );
    }

    #[test]
    fn tolerates_numbering_ascii_arrow_and_brackets() {
        let variants = [
            "3. Start: A red door. -> End: A blue door. (happened after image No.[4])",
            "  START:  A red door.  →  END: A blue door.   ( Happened  After Image No. 4 ) .",
            "start: A red door. → end: A blue door. (happened after image no 4)",
        ];
        for line in variants {
            let change = parse_change_line(line).unwrap_or_else(|e| panic!("{line:?}: {e}"));
            assert_eq!(change.after_index, 4, "line: {line:?}");
            assert_eq!(change.before_desc, "A red door.");
            assert_eq!(change.after_desc, "A blue door.");
        }
    }

    #[test]
    fn names_the_defect() {
        assert_eq!(parse_change_line(""), Err(ParseError::Empty));
        assert_eq!(parse_change_line("   "), Err(ParseError::Empty));
        assert_eq!(
            parse_change_line("Start: A → End: B"),
            Err(ParseError::MissingIndex)
        );
        assert_eq!(
            parse_change_line("Start: A End: B (happened after image No.2)"),
            Err(ParseError::MissingArrow)
        );
        assert_eq!(
            parse_change_line("The door changed color. (happened after image No.2)"),
            Err(ParseError::MissingStart)
        );
        assert_eq!(
            parse_change_line("Start:  → End: B (happened after image No.2)"),
            Err(ParseError::EmptyDescription("start"))
        );
        assert_eq!(
            parse_change_line("Start: A → End:  (happened after image No.2)"),
            Err(ParseError::EmptyDescription("end"))
        );
        assert!(matches!(
            parse_change_line("Start: A → End: B (happened after image No.0)"),
            Err(ParseError::BadIndex(_))
        ));
    }

    #[test]
    fn format_then_parse_is_identity() {
        let change = RawChange {
            before_desc: "The lot was empty.".into(),
            after_desc: "A food truck occupies the lot.".into(),
            after_index: 7,
        };
        assert_eq!(parse_change_line(&format_change_line(&change)).unwrap(), change);
    }

    #[test]
    fn findings_split_keeps_prose_out_and_reports_bad_lines() {
        let answer = "Here is what I found in the images:\n\
                      1. Start: No mural on the wall. → End: A large mural covers the wall. (happened after image No.3)\n\
                      \n\
                      2. Start: A bus stop sign. → End: missing the index\n\
                      Those are all the changes.\n";
        let (findings, errors) = parse_findings(answer);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].change.after_index, 3);
        assert_eq!(findings[0].line_no, 2);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line_no, 4);
        assert_eq!(errors[0].error, ParseError::MissingIndex);
    }

    #[test]
    fn yn_answers_parse_case_insensitively() {
        assert_eq!(parse_yn("Answer: Y.\nReason: because."), Ok(true));
        assert_eq!(parse_yn("Answer: N.\nReason: no match."), Ok(false));
        assert_eq!(parse_yn("answer: yes"), Ok(true));
        assert_eq!(parse_yn("ANSWER: [N]."), Ok(false));
        assert_eq!(parse_yn("Reason: unclear."), Err(ParseError::MissingAnswer));
        assert_eq!(parse_yn("Answer: maybe"), Err(ParseError::MissingAnswer));
    }

    #[test]
    fn abstraction_grid_parses_in_pc_order() {
        let answer = "Derivation:\n\
                      There are 2 levels of details on where the change happened:\n\
                      p1. The corner cafe.\n\
                      p2. A cafe.\n\
                      Meanwhile there are 2 levels of details on the change itself:\n\
                      c1. New awning installed.\n\
                      c2. The front changed.\n\
                      Answer:\n\
                      - (p2 + c2) The front of a cafe changed.\n\
                      - (p1 + c1) The corner cafe installed a new awning.\n\
                      - (p1 + c2) The front of the corner cafe changed.\n\
                      - (p2 + c1) A cafe installed a new awning.\n";
        let texts = parse_abstractions(answer).unwrap();
        assert_eq!(
            texts,
            vec![
                "The corner cafe installed a new awning.",
                "The front of the corner cafe changed.",
                "A cafe installed a new awning.",
                "The front of a cafe changed.",
            ]
        );
        assert_eq!(parse_abstractions("no grid here"), Err(ParseError::MissingAbstractions));
    }

    #[test]
    fn unusual_lines_are_stripped_of_list_markers() {
        let answer = "1. A sculpture of a giant clothespin.\n- A street performer frozen in place.\nNone.\n\n";
        assert_eq!(
            parse_unusual(answer),
            vec![
                "A sculpture of a giant clothespin.",
                "A street performer frozen in place.",
            ]
        );
        assert!(parse_unusual("None.").is_empty());
    }
}
