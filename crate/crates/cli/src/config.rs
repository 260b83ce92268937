//! TOML run configuration. Every key is optional; command-line flags
//! override whatever is set here.
//!
//! ```toml
//! seed = 42
//! jobs = 4
//!
//! [filter]
//! max_tokens = 512
//! dedup = true
//! subset_size = 20000
//!
//! [translate]
//! checkpoint_interval = 64
//! [translate.backend]
//! kind = "mock_lexicon"        # or "http_service" with endpoint = "..."
//! lexicon = "data/en_vi.tsv"
//! batch_size = 16
//! retry = { budget = 3, base_delay_ms = 200, max_delay_ms = 10000 }
//!
//! [corrupt]
//! corruption_rate = 0.15
//! mean_span_length = 3.0
//! sentinel_pattern = "<extra_id_{i}>"
//! shard_size = 10000
//!
//! [selftrain]
//! shard_size = 100000
//!
//! [nli]
//! abbrev_lexicon = "data/abbrev.tsv"
//!
//! [refine]
//! bind = "127.0.0.1:8080"
//! store = "refine-store.jsonl"
//! lease_minutes = 15
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vipubmed_core::translate::TranslatorBackend;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub filter: FilterSection,
    pub translate: TranslateSection,
    pub corrupt: CorruptSection,
    pub selftrain: SelftrainSection,
    pub nli: NliSection,
    pub refine: RefineSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub max_tokens: Option<usize>,
    pub dedup: Option<bool>,
    pub subset_size: Option<usize>,
    pub subset_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSection {
    pub backend: Option<TranslatorBackend>,
    pub checkpoint_interval: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptSection {
    pub corruption_rate: Option<f64>,
    pub mean_span_length: Option<f64>,
    pub sentinel_pattern: Option<String>,
    pub seed: Option<u64>,
    pub shard_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftrainSection {
    pub shuffle_seed: Option<u64>,
    pub shard_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliSection {
    pub abbrev_lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub bind: Option<SocketAddr>,
    pub store: Option<PathBuf>,
    pub lease_minutes: Option<i64>,
}

impl PipelineConfig {
    pub fn parse(src: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(src)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&src).map_err(|e| format!("{}: {e}", path.display()))
    }
}
