//! T5-style span corruption over whitespace tokens.
//!
//! A fixed budget of `round(rate * len)` tokens is split into spans that are
//! never adjacent. Each span is replaced by one sentinel in the input; the
//! target lists every sentinel followed by the tokens it hides and ends with
//! one extra sentinel.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SENTINEL_PATTERN: &str = "<extra_id_{i}>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpanError {
    #[error("corruption rate {0} outside [0, 1]")]
    Rate(String),
    #[error("mean span length {0} must be at least 1")]
    MeanSpan(String),
    #[error("sentinel pattern {0:?} must contain exactly one `{{i}}` placeholder")]
    Pattern(String),
    #[error("cannot corrupt an empty token sequence")]
    Empty,
    #[error("token {position} ({token:?}) collides with the sentinel pattern")]
    Collision { position: usize, token: String },
    #[error("sentinel mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    pub sentinel_pattern: String,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            corruption_rate: 0.15,
            mean_span_length: 3.0,
            sentinel_pattern: DEFAULT_SENTINEL_PATTERN.to_owned(),
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<Sentinels, SpanError> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(SpanError::Rate(self.corruption_rate.to_string()));
        }
        if !(self.mean_span_length >= 1.0) || !self.mean_span_length.is_finite() {
            return Err(SpanError::MeanSpan(self.mean_span_length.to_string()));
        }
        Sentinels::parse(&self.sentinel_pattern)
    }
}

/// Sentinel token pattern split around its `{i}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentinels {
    prefix: String,
    suffix: String,
}

impl Sentinels {
    pub fn parse(pattern: &str) -> Result<Self, SpanError> {
        let mut parts = pattern.split("{i}");
        match (parts.next(), parts.next(), parts.next()) {
            (Some(prefix), Some(suffix), None) if !(prefix.is_empty() && suffix.is_empty()) => {
                Ok(Sentinels {
                    prefix: prefix.to_owned(),
                    suffix: suffix.to_owned(),
                })
            }
            _ => Err(SpanError::Pattern(pattern.to_owned())),
        }
    }

    pub fn token(&self, i: usize) -> String {
        format!("{}{i}{}", self.prefix, self.suffix)
    }

    /// Index carried by `token` if it is a sentinel.
    pub fn index_of(&self, token: &str) -> Option<usize> {
        let digits = token
            .strip_prefix(self.prefix.as_str())?
            .strip_suffix(self.suffix.as_str())?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    }
}

impl Default for Sentinels {
    fn default() -> Self {
        Sentinels::parse(DEFAULT_SENTINEL_PATTERN).expect("default pattern is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCorruptionExample {
    pub input_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub original_length: usize,
}

/// Number of tokens masked for a sequence of `len` tokens.
pub fn masked_budget(len: usize, rate: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((rate * len as f64).round() as usize).min(len - 1)
}

/// Number of spans the masked budget is split into.
pub fn span_count(len: usize, masked: usize, mean_span_length: f64) -> usize {
    if masked == 0 {
        return 0;
    }
    let wanted = ((masked as f64 / mean_span_length).round() as usize).max(1);
    // every span needs ≥1 token and interior gaps need ≥1 unmasked token
    wanted.min(masked).min(len - masked + 1)
}

/// Uniform random composition of `total` into `parts` positive integers.
fn composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts: Vec<usize> = index::sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// `(start, len)` of each masked span, in order.
fn place_spans(rng: &mut ChaCha8Rng, len: usize, masked: usize, n: usize) -> Vec<(usize, usize)> {
    let lengths = composition(rng, masked, n);
    // n+1 gaps: the outer two may be empty, the n-1 inner ones hold ≥1 token.
    // Shift to a positive composition of (free + n + 1) and subtract one per bin.
    let free = len - masked - (n - 1);
    let mut gaps: Vec<usize> = composition(rng, free + n + 1, n + 1)
        .into_iter()
        .map(|g| g - 1)
        .collect();
    for g in gaps.iter_mut().take(n).skip(1) {
        *g += 1;
    }
    let mut spans = Vec::with_capacity(n);
    let mut pos = gaps[0];
    for (k, span_len) in lengths.into_iter().enumerate() {
        spans.push((pos, span_len));
        pos += span_len + gaps[k + 1];
    }
    debug_assert_eq!(pos, len);
    spans
}

/// Masks random non-adjacent spans of `tokens`.
pub fn corrupt<S: AsRef<str>>(
    tokens: &[S],
    cfg: &CorruptionConfig,
) -> Result<SpanCorruptionExample, SpanError> {
    let sentinels = cfg.validate()?;
    corrupt_with(tokens, cfg, &sentinels)
}

/// Like [`corrupt`] with an already validated sentinel pattern.
pub fn corrupt_with<S: AsRef<str>>(
    tokens: &[S],
    cfg: &CorruptionConfig,
    sentinels: &Sentinels,
) -> Result<SpanCorruptionExample, SpanError> {
    if tokens.is_empty() {
        return Err(SpanError::Empty);
    }
    if let Some((position, t)) = tokens
        .iter()
        .enumerate()
        .find(|(_, t)| sentinels.index_of(t.as_ref()).is_some())
    {
        return Err(SpanError::Collision {
            position,
            token: t.as_ref().to_owned(),
        });
    }
    let len = tokens.len();
    let masked = masked_budget(len, cfg.corruption_rate);
    let n = span_count(len, masked, cfg.mean_span_length);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spans = if n == 0 {
        Vec::new()
    } else {
        place_spans(&mut rng, len, masked, n)
    };

    let mut input_tokens = Vec::with_capacity(len - masked + n);
    let mut target_tokens = Vec::with_capacity(masked + n + 1);
    let mut cursor = 0;
    for (k, &(start, span_len)) in spans.iter().enumerate() {
        input_tokens.extend(tokens[cursor..start].iter().map(|t| t.as_ref().to_owned()));
        let sentinel = sentinels.token(k);
        input_tokens.push(sentinel.clone());
        target_tokens.push(sentinel);
        target_tokens.extend(
            tokens[start..start + span_len]
                .iter()
                .map(|t| t.as_ref().to_owned()),
        );
        cursor = start + span_len;
    }
    input_tokens.extend(tokens[cursor..].iter().map(|t| t.as_ref().to_owned()));
    target_tokens.push(sentinels.token(spans.len()));

    Ok(SpanCorruptionExample {
        input_tokens,
        target_tokens,
        original_length: len,
    })
}

fn mismatch(msg: impl Into<String>) -> SpanError {
    SpanError::Mismatch(msg.into())
}

/// Splices target spans back into the input at their sentinels.
pub fn reconstruct<S: AsRef<str>>(
    input_tokens: &[S],
    target_tokens: &[S],
    sentinels: &Sentinels,
) -> Result<Vec<String>, SpanError> {
    // spans[k] = (sentinel index, tokens)
    let mut spans: Vec<(usize, Vec<String>)> = Vec::new();
    let (terminal, body) = target_tokens
        .split_last()
        .ok_or_else(|| mismatch("target is empty"))?;
    let terminal_index = sentinels
        .index_of(terminal.as_ref())
        .ok_or_else(|| mismatch("target does not end with a sentinel"))?;
    for tok in body {
        let tok = tok.as_ref();
        match sentinels.index_of(tok) {
            Some(idx) => spans.push((idx, Vec::new())),
            None => match spans.last_mut() {
                Some((_, toks)) => toks.push(tok.to_owned()),
                None => return Err(mismatch("target must start with a sentinel")),
            },
        }
    }
    if let Some((idx, _)) = spans.iter().find(|(_, toks)| toks.is_empty()) {
        return Err(mismatch(format!("target sentinel {idx} hides no tokens")));
    }
    if spans.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(mismatch("target sentinels are not strictly increasing"));
    }
    if spans.iter().any(|(idx, _)| *idx == terminal_index) {
        return Err(mismatch("terminal sentinel repeats a span sentinel"));
    }

    let mut out = Vec::new();
    let mut next = spans.into_iter();
    for tok in input_tokens {
        let tok = tok.as_ref();
        match sentinels.index_of(tok) {
            Some(idx) => match next.next() {
                Some((expected, toks)) if expected == idx => out.extend(toks),
                Some((expected, _)) => {
                    return Err(mismatch(format!(
                        "input sentinel {idx} where target has {expected}"
                    )))
                }
                None => return Err(mismatch(format!("input sentinel {idx} missing from target"))),
            },
            None => out.push(tok.to_owned()),
        }
    }
    if let Some((idx, _)) = next.next() {
        return Err(mismatch(format!("target sentinel {idx} missing from input")));
    }
    Ok(out)
}

/// Checks every structural invariant of an example against its source.
/// Used by tests and by the CLI's self-check; independent of how the
/// example was produced.
pub fn check_example(
    original: &[String],
    ex: &SpanCorruptionExample,
    sentinels: &Sentinels,
) -> Result<(), String> {
    if ex.original_length != original.len() {
        return Err("original_length differs".into());
    }
    let input_idx: Vec<usize> = ex
        .input_tokens
        .iter()
        .filter_map(|t| sentinels.index_of(t))
        .collect();
    if input_idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err("input sentinels not strictly increasing".into());
    }
    let target_idx: Vec<usize> = ex
        .target_tokens
        .iter()
        .filter_map(|t| sentinels.index_of(t))
        .collect();
    if target_idx.len() != input_idx.len() + 1 || target_idx[..input_idx.len()] != input_idx[..] {
        return Err("target sentinels do not mirror input".into());
    }
    for (i, t) in ex.target_tokens.iter().enumerate() {
        if sentinels.index_of(t).is_some() && i + 1 < ex.target_tokens.len() {
            if sentinels.index_of(&ex.target_tokens[i + 1]).is_some() {
                return Err("empty span in target".into());
            }
        }
    }
    for w in ex.input_tokens.windows(2) {
        if sentinels.index_of(&w[0]).is_some() && sentinels.index_of(&w[1]).is_some() {
            return Err("adjacent sentinels in input".into());
        }
    }
    match reconstruct(&ex.input_tokens, &ex.target_tokens, sentinels) {
        Ok(r) if r == original => Ok(()),
        Ok(_) => Err("reconstruction differs".into()),
        Err(e) => Err(e.to_string()),
    }
}
