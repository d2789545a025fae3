//! Candidate context extraction: size gate, Markdown stripping, sentence
//! segmentation, the short-sentence filter and three-sentence windows.

mod segment;
mod strip;

pub use segment::{segment_sentences, RuleSegmenter, SentenceSegmenter};
pub use strip::strip_non_textual;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// 10 MiB. Documents must be strictly smaller.
pub const DEFAULT_MAX_BYTES: u64 = 10 * 1024 * 1024;

/// Centers with fewer whitespace tokens are dropped.
pub const MIN_TOKENS: usize = 4;

/// Converted article text for one work.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentText {
    pub work_id: String,
    pub markdown: String,
    pub byte_size: u64,
    /// Invalid UTF-8 sequences replaced with U+FFFD while decoding.
    pub replacements: usize,
}

impl DocumentText {
    pub fn from_bytes(work_id: impl Into<String>, bytes: &[u8]) -> Self {
        let mut markdown = String::with_capacity(bytes.len());
        let mut replacements = 0;
        for chunk in bytes.utf8_chunks() {
            markdown.push_str(chunk.valid());
            if !chunk.invalid().is_empty() {
                markdown.push(char::REPLACEMENT_CHARACTER);
                replacements += 1;
            }
        }
        Self { work_id: work_id.into(), markdown, byte_size: bytes.len() as u64, replacements }
    }

    pub fn read(work_id: impl Into<String>, path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_bytes(work_id, &std::fs::read(path)?))
    }
}

/// One center sentence with its neighbors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextUnit {
    pub work_id: String,
    /// Position of the center sentence in the segmented document.
    pub index: usize,
    pub sentence: String,
    pub window_text: String,
    pub token_count: usize,
    /// Names of the roster artists whose harvest produced this work.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artists: Vec<String>,
}

impl ContextUnit {
    /// Row id used in vector files: `<work_id>#<index>`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.work_id, self.index)
    }
}

pub fn accept_document(doc: &DocumentText, max_bytes: u64) -> bool {
    doc.byte_size < max_bytes
}

pub fn token_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

/// Emits a unit for every sentence with at least [`MIN_TOKENS`] tokens. Short
/// sentences still appear as neighbors inside windows.
pub fn build_contexts(work_id: &str, sentences: &[String]) -> Vec<ContextUnit> {
    sentences
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let tokens = token_count(s);
            if tokens < MIN_TOKENS {
                return None;
            }
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(sentences.len() - 1);
            Some(ContextUnit {
                work_id: work_id.to_string(),
                index: i,
                sentence: s.clone(),
                window_text: sentences[lo..=hi].join(" "),
                token_count: tokens,
                artists: Vec::new(),
            })
        })
        .collect()
}

/// Drops units whose `window_text` repeats an earlier one in the same work.
pub fn dedup_windows(units: Vec<ContextUnit>) -> Vec<ContextUnit> {
    let mut seen = HashSet::new();
    units.into_iter().filter(|u| seen.insert((u.work_id.clone(), u.window_text.clone()))).collect()
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub max_bytes: u64,
    pub dedup: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { max_bytes: DEFAULT_MAX_BYTES, dedup: false }
    }
}

/// Why a document produced no contexts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    TooLarge { byte_size: u64, max_bytes: u64 },
}

/// The whole extraction for one document.
pub fn extract_document(
    doc: &DocumentText,
    segmenter: &dyn SentenceSegmenter,
    opts: &ExtractOptions,
) -> Result<Vec<ContextUnit>, Rejection> {
    if !accept_document(doc, opts.max_bytes) {
        return Err(Rejection::TooLarge { byte_size: doc.byte_size, max_bytes: opts.max_bytes });
    }
    let prose = strip_non_textual(&doc.markdown);
    let sentences = segmenter.segment(&prose);
    let units = build_contexts(&doc.work_id, &sentences);
    Ok(if opts.dedup { dedup_windows(units) } else { units })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(size: u64) -> DocumentText {
        DocumentText { work_id: "W".into(), markdown: String::new(), byte_size: size, replacements: 0 }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn size_gate_is_strict() {
        assert!(!accept_document(&doc(10_485_760), DEFAULT_MAX_BYTES));
        assert!(accept_document(&doc(10_485_759), DEFAULT_MAX_BYTES));
        assert!(accept_document(&doc(0), DEFAULT_MAX_BYTES));
    }

    #[test]
    fn short_center_kept_as_neighbor() {
        let units = build_contexts("W", &s(&["A B C D.", "E F.", "G H I J."]));
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].index, 0);
        assert_eq!(units[0].window_text, "A B C D. E F.");
        assert_eq!(units[1].index, 2);
        assert_eq!(units[1].window_text, "E F. G H I J.");
        assert_eq!(units[1].token_count, 4);
    }

    #[test]
    fn empty_and_single() {
        assert!(build_contexts("W", &[]).is_empty());
        let u = build_contexts("W", &s(&["One two three four."]));
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].window_text, u[0].sentence);
    }

    #[test]
    fn middle_window_has_three_sentences() {
        let u = build_contexts("W", &s(&["a b c d", "e f g h", "i j k l"]));
        assert_eq!(u[1].window_text, "a b c d e f g h i j k l");
        assert_eq!(u[1].id(), "W#1");
    }

    #[test]
    fn dedup_is_opt_in() {
        let sents = s(&["same same same same", "same same same same", "same same same same"]);
        let units = build_contexts("W", &sents);
        assert_eq!(units.len(), 3);
        // windows: 0+1, 0+1+2, 1+2 -> first and last coincide
        assert_eq!(dedup_windows(units).len(), 2);
    }

    #[test]
    fn invalid_utf8_is_replaced_and_counted() {
        let d = DocumentText::from_bytes("W", b"ok \xff\xfe fine \xc3");
        assert_eq!(d.byte_size, 12);
        assert!(d.markdown.starts_with("ok "));
        assert_eq!(d.replacements, d.markdown.matches('\u{FFFD}').count());
        assert!(d.replacements >= 2);
    }

    #[test]
    fn extraction_is_deterministic() {
        let md = "# T\n\nThe first sentence is long. Tiny. Another long sentence here.\n";
        let d = DocumentText::from_bytes("W", md.as_bytes());
        let seg = RuleSegmenter::shipped();
        let a = extract_document(&d, &seg, &ExtractOptions::default()).unwrap();
        let b = extract_document(&d, &seg, &ExtractOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|u| u.index).collect::<Vec<_>>(), vec![0, 2]);
        let big = extract_document(&d, &seg, &ExtractOptions { max_bytes: 10, dedup: false });
        assert!(matches!(big, Err(Rejection::TooLarge { .. })));
    }
}
