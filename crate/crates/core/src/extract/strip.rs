//! Markdown to plain prose.

use std::sync::LazyLock;

use regex::Regex;

static FENCE_OPEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^ {0,3}(`{3,}|~{3,})").unwrap());
static ATX_HEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^ {0,3}#{1,6}(\s|$)").unwrap());
static SETEXT_EQ: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^ {0,3}=+\s*$").unwrap());
static RULE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^ {0,3}([-*_])(\s*([-*_])){2,}\s*$").unwrap());
static TABLE_DELIM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\|?\s*:?-+:?\s*(\|\s*:?-+:?\s*)+\|?\s*$").unwrap());
static BLOCK_MARKERS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(>\s*)*((?:[-+*]|\d{1,3}[.)])\s+)?").unwrap());
static HTML_COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<!--.*?-->").unwrap());
static HTML_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?[A-Za-z][^<>]*>").unwrap());
static IMAGE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"!\[[^\]]*\](\([^)]*\)|\[[^\]]*\])").unwrap());
static LINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\]^][^\]]*)\](\([^)]*\)|\[[^\]]*\])").unwrap());
static FOOTNOTE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\^[^\]]*\]:?").unwrap());
static CITATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\d+(\s*[,;\u{2013}-]\s*\d+)*\]").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(https?://|www\.)\S+").unwrap());

/// Removes code blocks, images, tables, URLs, headings, emphasis markers,
/// footnote and citation brackets and horizontal rules. Paragraphs come back
/// separated by one blank line with internal whitespace collapsed.
pub fn strip_non_textual(markdown: &str) -> String {
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut fence: Option<(char, usize)> = None;
    let mut prev_blank = true;
    let mut in_indented_code = false;

    let flush = |current: &mut Vec<String>, paragraphs: &mut Vec<String>| {
        let joined = collapse_ws(&current.join(" "));
        if !joined.is_empty() {
            paragraphs.push(joined);
        }
        current.clear();
    };

    for raw in markdown.lines() {
        if let Some((ch, len)) = fence {
            let t = raw.trim();
            if t.chars().take_while(|&c| c == ch).count() >= len && t.chars().all(|c| c == ch) {
                fence = None;
            }
            continue;
        }
        if let Some(m) = FENCE_OPEN.captures(raw) {
            let marker = m.get(1).unwrap().as_str();
            fence = Some((marker.chars().next().unwrap(), marker.len()));
            flush(&mut current, &mut paragraphs);
            prev_blank = true;
            continue;
        }
        if raw.trim().is_empty() {
            flush(&mut current, &mut paragraphs);
            prev_blank = true;
            in_indented_code = false;
            continue;
        }
        if indent_width(raw) >= 4 && current.is_empty() && (prev_blank || in_indented_code) {
            in_indented_code = true;
            continue;
        }
        in_indented_code = false;
        prev_blank = false;

        if ATX_HEADING.is_match(raw) {
            flush(&mut current, &mut paragraphs);
            continue;
        }
        if SETEXT_EQ.is_match(raw) {
            // The preceding paragraph line was a heading.
            current.pop();
            flush(&mut current, &mut paragraphs);
            continue;
        }
        if RULE.is_match(raw) || TABLE_DELIM.is_match(raw) {
            flush(&mut current, &mut paragraphs);
            continue;
        }
        let cleaned = clean_inline(raw);
        if !cleaned.is_empty() {
            current.push(cleaned);
        }
    }
    flush(&mut current, &mut paragraphs);
    paragraphs.join("\n\n")
}

fn indent_width(line: &str) -> usize {
    let mut w = 0;
    for c in line.chars() {
        match c {
            ' ' => w += 1,
            '\t' => w += 4 - w % 4,
            _ => break,
        }
    }
    w
}

fn clean_inline(line: &str) -> String {
    let line = BLOCK_MARKERS.replace(line, "");
    let line = HTML_COMMENT.replace_all(&line, " ");
    let line = HTML_TAG.replace_all(&line, " ");
    let line = IMAGE.replace_all(&line, " ");
    let line = drop_table_cells(&line);
    let line = FOOTNOTE.replace_all(&line, "");
    let line = LINK.replace_all(&line, "$1");
    let line = CITATION.replace_all(&line, "");
    let line = URL.replace_all(&line, " ");
    let line = drop_emphasis(&line);
    collapse_ws(&line)
}

/// Everything from the first to the last `|` on a line is table syntax.
fn drop_table_cells(line: &str) -> String {
    match (line.find('|'), line.rfind('|')) {
        (Some(a), Some(b)) => format!("{} {}", &line[..a], &line[b + 1..]),
        _ => line.to_string(),
    }
}

/// Drops `*`, `~~` and backticks everywhere, and `_` runs that touch a
/// word boundary (so `snake_case` survives).
fn drop_emphasis(line: &str) -> String {
    let chars: Vec<char> = line.chars().collect();
    let mut out = String::with_capacity(line.len());
    let word = |c: Option<&char>| c.is_some_and(|c| c.is_alphanumeric());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '*' | '`' => {}
            '~' if chars.get(i + 1) == Some(&'~') => {
                i += 1;
            }
            '_' => {
                let mut j = i;
                while j < chars.len() && chars[j] == '_' {
                    j += 1;
                }
                let inner = i > 0 && word(chars.get(i - 1)) && word(chars.get(j));
                if inner {
                    out.extend(&chars[i..j]);
                }
                i = j;
                continue;
            }
            _ => out.push(c),
        }
        i += 1;
    }
    out
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
