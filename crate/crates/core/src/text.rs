//! Text normalization shared by scoring, deduplication and the scripted
//! perception backend.

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'')
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical form used for exact-match answer comparison.
///
/// Lowercases, trims, strips terminal punctuation, collapses internal
/// whitespace and removes leading articles. Leading articles are removed
/// until none remains so that the function is idempotent ("the the dog"
/// and "the dog" both become "dog").
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let trimmed = lowered.trim().trim_end_matches(|c: char| is_terminal_punct(c) || c.is_whitespace());
    let mut out = collapse_whitespace(trimmed);
    loop {
        let stripped = ARTICLES.iter().find_map(|a| {
            out.strip_prefix(a)
                .and_then(|rest| rest.strip_prefix(' '))
                .filter(|rest| !rest.is_empty())
        });
        match stripped {
            Some(rest) => out = rest.to_string(),
            None => break,
        }
    }
    out
}

/// Key used to look up question/statement facts: lowercase, collapsed
/// whitespace, no trailing punctuation.
pub fn normalize_key(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let trimmed = lowered.trim().trim_end_matches(|c: char| is_terminal_punct(c) || c.is_whitespace());
    collapse_whitespace(trimmed)
}

const ES_PLURALS: [&str; 8] = ["buses", "gases", "lenses", "bonuses", "viruses", "campuses", "canvases", "atlases"];

/// Naive English singularization of one word.
pub fn singularize(word: &str) -> String {
    let w = word;
    let n = w.len();
    if n > 3 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if n > 5 && w.ends_with("zzes") {
        return w[..n - 3].to_string();
    }
    if n > 4 && ["sses", "shes", "ches", "xes"].iter().any(|s| w.ends_with(s)) {
        return w[..n - 2].to_string();
    }
    // buses -> bus, but horses -> horse
    if ES_PLURALS.contains(&w) {
        return w[..n - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..n - 1].to_string();
    }
    w.to_string()
}

/// Detector label normalization: lowercase, collapsed whitespace, last word
/// singularized.
pub fn normalize_label(raw: &str) -> String {
    let key = collapse_whitespace(&raw.to_lowercase());
    let mut words: Vec<String> = key.split(' ').map(str::to_string).collect();
    if let Some(last) = words.last_mut() {
        *last = singularize(last);
    }
    words.join(" ")
}

pub fn labels_match(a: &str, b: &str) -> bool {
    normalize_label(a) == normalize_label(b)
}

/// Whitespace-delimited word count after trimming quotes and punctuation.
pub fn answer_word_count(answer: &str) -> usize {
    answer
        .trim()
        .trim_matches(|c: char| is_terminal_punct(c) || c.is_whitespace())
        .split_whitespace()
        .count()
}
