//! Deterministic rule-based sentence segmentation.

use std::collections::HashSet;

const SHIPPED_ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

const TERMINATORS: &[char] = &['.', '!', '?'];
const CLOSERS: &[char] = &['"', '\'', '\u{201D}', '\u{2019}', ')', ']', '\u{BB}'];
const OPENERS: &[char] = &['"', '\'', '\u{201C}', '\u{2018}', '(', '[', '\u{AB}'];

pub trait SentenceSegmenter {
    fn segment(&self, text: &str) -> Vec<String>;
}

/// Splits after `.`, `!` or `?` (plus any closing quotes or brackets) when
/// followed by whitespace and an uppercase letter, or by end of text.
/// Blank lines are hard breaks. A period does not end a sentence after a
/// listed abbreviation or a single-letter initial.
#[derive(Debug, Clone)]
pub struct RuleSegmenter {
    abbreviations: HashSet<String>,
    version: String,
}

impl RuleSegmenter {
    /// Segmenter using the abbreviation list shipped in `data/abbreviations.txt`.
    pub fn shipped() -> Self {
        let mut version = String::from("unversioned");
        let mut abbreviations = HashSet::new();
        for line in SHIPPED_ABBREVIATIONS.lines().map(str::trim) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
            } else if !line.is_empty() {
                abbreviations.insert(line.to_lowercase());
            }
        }
        Self { abbreviations, version }
    }

    pub fn with_abbreviations<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let abbreviations =
            entries.into_iter().map(|s| s.as_ref().trim().trim_end_matches('.').to_lowercase()).collect();
        Self { abbreviations, version: "custom".into() }
    }

    pub fn abbreviation_list_version(&self) -> &str {
        &self.version
    }

    pub fn is_abbreviation(&self, word: &str) -> bool {
        let w = word.trim_start_matches(OPENERS).to_lowercase();
        if w.is_empty() {
            return false;
        }
        if self.abbreviations.contains(&w) {
            return true;
        }
        // Initials: "J", "J.M", "U.S"
        w.split('.').all(|part| {
            let mut cs = part.chars();
            matches!((cs.next(), cs.next()), (Some(c), None) if c.is_alphabetic())
        })
    }

    fn segment_paragraph(&self, para: &str, out: &mut Vec<String>) {
        let chars: Vec<(usize, char)> = para.char_indices().collect();
        let n = chars.len();
        let mut start = 0usize; // byte offset
        let mut i = 0usize;
        while i < n {
            let (_, c) = chars[i];
            if !TERMINATORS.contains(&c) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < n && (TERMINATORS.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
                j += 1;
            }
            let end_byte = if j < n { chars[j].0 } else { para.len() };
            let boundary = if j == n {
                true
            } else if chars[j].1.is_whitespace() {
                let mut k = j;
                while k < n && chars[k].1.is_whitespace() {
                    k += 1;
                }
                while k < n && OPENERS.contains(&chars[k].1) {
                    k += 1;
                }
                k < n && chars[k].1.is_uppercase()
            } else {
                false
            };
            let single_period = c == '.' && !chars[i + 1..j].iter().any(|(_, t)| TERMINATORS.contains(t));
            let blocked = boundary && single_period && {
                let word_start = para[..chars[i].0].rfind(char::is_whitespace).map_or(0, |p| p + 1);
                word_start.max(start) < chars[i].0 && self.is_abbreviation(&para[word_start.max(start)..chars[i].0])
            };
            if boundary && !blocked {
                push_trimmed(&para[start..end_byte], out);
                start = end_byte;
            }
            i = j;
        }
        push_trimmed(&para[start..], out);
    }
}

impl Default for RuleSegmenter {
    fn default() -> Self {
        Self::shipped()
    }
}

fn push_trimmed(s: &str, out: &mut Vec<String>) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

impl SentenceSegmenter for RuleSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut para = String::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                self.segment_paragraph(&para, &mut out);
                para.clear();
            } else {
                if !para.is_empty() {
                    para.push('\n');
                }
                para.push_str(line);
            }
        }
        self.segment_paragraph(&para, &mut out);
        out
    }
}

pub fn segment_sentences(text: &str) -> Vec<String> {
    RuleSegmenter::shipped().segment(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(s: &str) -> Vec<String> {
        segment_sentences(s)
    }

    #[test]
    fn two_sentences() {
        assert_eq!(seg("It rains. He paints."), vec!["It rains.", "He paints."]);
    }

    #[test]
    fn abbreviation_blocks_split() {
        assert_eq!(seg("Painted ca. 1523 in Venice."), vec!["Painted ca. 1523 in Venice."]);
        assert_eq!(
            seg("See Fig. 3 and St. Mark. Then Dr. Tulp spoke."),
            vec!["See Fig. 3 and St. Mark.", "Then Dr. Tulp spoke."]
        );
        assert_eq!(seg("It is ca. Venice, not Rome."), vec!["It is ca. Venice, not Rome."]);
    }

    #[test]
    fn initials_do_not_split() {
        assert_eq!(
            seg("A study by J. M. W. Turner survives. It is small."),
            vec!["A study by J. M. W. Turner survives.", "It is small."]
        );
        assert_eq!(seg("Held in the U.S. Collection today."), vec!["Held in the U.S. Collection today."]);
    }

    #[test]
    fn decimal_guard() {
        assert_eq!(seg("Room 3.4 holds it. Go."), vec!["Room 3.4 holds it.", "Go."]);
    }

    #[test]
    fn lowercase_continuation_is_not_a_boundary() {
        assert_eq!(seg("It was 1523. and then more."), vec!["It was 1523. and then more."]);
    }

    #[test]
    fn quotes_and_other_terminators() {
        assert_eq!(
            seg("He asked \"Why?\" She left! \"Fine.\" Done"),
            vec!["He asked \"Why?\"", "She left!", "\"Fine.\"", "Done"]
        );
    }

    #[test]
    fn blank_lines_are_hard_breaks() {
        assert_eq!(
            seg("A heading without period\n\nThe body starts."),
            vec!["A heading without period", "The body starts."]
        );
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(seg("").is_empty());
        assert!(seg("   \n\n  ").is_empty());
    }

    #[test]
    fn shipped_list_is_versioned() {
        let s = RuleSegmenter::shipped();
        assert_eq!(s.abbreviation_list_version(), "1");
        assert!(s.is_abbreviation("ca"));
        assert!(s.is_abbreviation("(Fig"));
        assert!(!s.is_abbreviation("Venice"));
    }

    fn norm(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn join_is_lossless_modulo_whitespace(
            words in proptest::collection::vec("[A-Za-z]{1,6}[.!?]?|[0-9]\\.[0-9]|Dr\\.|\"|\n\n", 0..40)
        ) {
            let text = words.join(" ");
            let out = seg(&text);
            prop_assert!(out.iter().all(|s| !s.is_empty() && s.trim() == s));
            prop_assert_eq!(norm(&out.join(" ")), norm(&text));
        }
    }
}
