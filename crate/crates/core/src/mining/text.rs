//! Text preprocessing: optional lowercasing and BM25 tokenization.

use unicode_normalization::UnicodeNormalization;

/// Unicode simple lowercase mapping of one character.
///
/// `char::to_lowercase` applies the full mapping, which differs from the
/// simple one only for U+0130 (capital I with dot above).
fn simple_lowercase(c: char) -> char {
    if c == '\u{130}' {
        return 'i';
    }
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// NFC-normalizes `text`, lowercasing it first when `lowercase` is set.
pub fn normalize_text(text: &str, lowercase: bool) -> String {
    let nfc: String = text.nfc().collect();
    if !lowercase {
        return nfc;
    }
    nfc.chars().map(simple_lowercase).nfc().collect()
}

/// BM25 tokenization: lowercase, then split on anything that is not
/// alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text, true)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
