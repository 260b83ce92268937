//! Length filter, exact dedup and seeded reservoir subsetting over abstracts.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::Abstract;
use crate::text;

/// Abstracts longer than this are dropped before translation.
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_tokens: usize,
    pub dedup: bool,
    pub subset_size: Option<usize>,
    pub subset_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_tokens: DEFAULT_MAX_TOKENS,
            dedup: true,
            subset_size: None,
            subset_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.max_tokens == 0 {
            return Err(FilterError::ZeroMaxTokens);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: u64,
    pub dropped_too_long: u64,
    pub duplicates: u64,
    pub subset_requested: Option<u64>,
    pub subset_shortfall: u64,
    pub output: u64,
    pub subset_seed: u64,
}

/// Keeps abstracts with `token_count <= max_tokens`, preserving order.
pub fn filter_by_length<I>(abstracts: I, max_tokens: usize) -> (Vec<Abstract>, u64)
where
    I: IntoIterator<Item = Abstract>,
{
    let mut dropped = 0;
    let kept = abstracts
        .into_iter()
        .filter(|a| {
            let keep = a.token_count <= max_tokens;
            if !keep {
                dropped += 1;
            }
            keep
        })
        .collect();
    (kept, dropped)
}

/// 128-bit prefix of SHA-256 over the NFC, whitespace-collapsed body.
pub fn dedup_key(body: &str) -> [u8; 16] {
    let digest = Sha256::digest(text::collapse_whitespace(body).as_bytes());
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    key
}

/// Streaming first-occurrence-wins dedup keyed on the normalized body.
#[derive(Debug, Default)]
pub struct Deduper {
    seen: HashSet<[u8; 16]>,
    duplicates: u64,
}

impl Deduper {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true when `body` has not been seen before.
    pub fn admit(&mut self, body: &str) -> bool {
        let fresh = self.seen.insert(dedup_key(body));
        if !fresh {
            self.duplicates += 1;
        }
        fresh
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }
}

pub fn dedup<I>(abstracts: I) -> (Vec<Abstract>, u64)
where
    I: IntoIterator<Item = Abstract>,
{
    let mut deduper = Deduper::new();
    let unique = abstracts
        .into_iter()
        .filter(|a| deduper.admit(&a.body))
        .collect();
    (unique, deduper.duplicates())
}

/// Seeded reservoir sample (Algorithm R) that yields survivors in input order.
#[derive(Debug)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: u64,
    slots: Vec<(u64, T)>,
    rng: ChaCha8Rng,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            slots: Vec::with_capacity(capacity.min(1 << 20)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn offer(&mut self, item: T) {
        let index = self.seen;
        self.seen += 1;
        if self.slots.len() < self.capacity {
            self.slots.push((index, item));
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = self.rng.gen_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.slots[j as usize] = (index, item);
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn into_sorted(mut self) -> Vec<T> {
        self.slots.sort_unstable_by_key(|(i, _)| *i);
        self.slots.into_iter().map(|(_, item)| item).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsetOutcome {
    pub requested: u64,
    pub selected: u64,
    pub shortfall: u64,
}

/// Uniform sample of `size` abstracts without replacement, in input order.
/// Asking for more than the input holds returns everything and reports the
/// shortfall.
pub fn take_subset<I>(abstracts: I, size: usize, seed: u64) -> (Vec<Abstract>, SubsetOutcome)
where
    I: IntoIterator<Item = Abstract>,
{
    let mut reservoir = Reservoir::new(size, seed);
    for a in abstracts {
        reservoir.offer(a);
    }
    let out = reservoir.into_sorted();
    let selected = out.len() as u64;
    (
        out,
        SubsetOutcome {
            requested: size as u64,
            selected,
            shortfall: (size as u64).saturating_sub(selected),
        },
    )
}

/// Length filter, optional dedup, optional subset, in that order.
pub fn run<I>(abstracts: I, cfg: &FilterConfig) -> Result<(Vec<Abstract>, FilterStats), FilterError>
where
    I: IntoIterator<Item = Abstract>,
{
    cfg.validate()?;
    let mut stats = FilterStats {
        subset_seed: cfg.subset_seed,
        ..FilterStats::default()
    };
    let mut deduper = Deduper::new();
    let mut reservoir = cfg.subset_size.map(|n| Reservoir::new(n, cfg.subset_seed));
    let mut passthrough = Vec::new();
    for a in abstracts {
        stats.input += 1;
        if a.token_count > cfg.max_tokens {
            stats.dropped_too_long += 1;
            continue;
        }
        if cfg.dedup && !deduper.admit(&a.body) {
            continue;
        }
        match reservoir.as_mut() {
            Some(r) => r.offer(a),
            None => passthrough.push(a),
        }
    }
    stats.duplicates = deduper.duplicates();
    let out = match reservoir {
        Some(r) => {
            let requested = cfg.subset_size.unwrap_or(0) as u64;
            let out = r.into_sorted();
            stats.subset_requested = Some(requested);
            stats.subset_shortfall = requested.saturating_sub(out.len() as u64);
            out
        }
        None => passthrough,
    };
    stats.output = out.len() as u64;
    Ok((out, stats))
}
