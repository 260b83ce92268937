//! Pipeline-wide text normalization and tokenization.
//!
//! Every stage that counts or compares tokens (length filter, dedup key,
//! span corruption, BLEU, ROUGE-L) goes through these functions so the
//! token definition can be swapped in one place.

use std::borrow::Cow;

use unicode_normalization::{is_nfc_quick, IsNormalized, UnicodeNormalization};

/// NFC-normalizes `text`, borrowing when it is already normalized.
pub fn nfc(text: &str) -> Cow<'_, str> {
    match is_nfc_quick(text.chars()) {
        IsNormalized::Yes => Cow::Borrowed(text),
        _ => Cow::Owned(text.nfc().collect()),
    }
}

/// NFC followed by splitting on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    nfc(text).split_whitespace().map(str::to_owned).collect()
}

pub fn token_count(text: &str) -> usize {
    nfc(text).split_whitespace().count()
}

/// NFC-normalized text with runs of whitespace collapsed to one space and
/// the ends trimmed.
pub fn collapse_whitespace(text: &str) -> String {
    let normalized = nfc(text);
    let mut out = String::with_capacity(normalized.len());
    for (i, tok) in normalized.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
