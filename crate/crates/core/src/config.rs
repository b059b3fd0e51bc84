//! Run configuration: every tunable the pipeline exposes, with its
//! default pinned in one place. Reports embed the resolved configuration
//! so results remain attributable to exact parameter values.

use serde::{Deserialize, Serialize};

use crate::filter::{
    DEFAULT_CHARS_PER_TOKEN, DEFAULT_K_SIGMA, DEFAULT_MAX_TOKENS,
    DEFAULT_SELF_REFERENCE_PATTERNS, DEFLATE_LEVEL,
};
use crate::lid::{DEFAULT_PROFILE_SIZE, NGRAM_MAX, NGRAM_MIN};
use crate::store::{DEFAULT_CHUNK_BYTES, DEFAULT_LAYER_PATTERN, DEFAULT_PRE_PREFIXES};

/// Default chunk budget in tokens for translation chunking.
pub const DEFAULT_CHUNK_BUDGET: u64 = 2_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("bad config: {reason}")]
    Invalid { reason: String },

    #[error("bad config json: {0}")]
    Parse(#[from] serde_json::Error),
}

/// All pipeline parameters. Unknown fields in a config file are rejected
/// so typos fail loudly instead of silently running defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Regex with one capture group extracting the layer index from a
    /// tensor name.
    pub layer_pattern: String,
    /// Tensor-name prefixes grouped before the first layer when they do
    /// not match `layer_pattern`.
    pub pre_prefixes: Vec<String>,
    /// I/O chunk size for streaming tensor reads, in bytes.
    pub chunk_size_bytes: usize,
    /// Anomaly threshold in standard deviations.
    pub k_sigma: f64,
    /// Context cap in tokens.
    pub max_tokens: u64,
    /// Characters per token for the heuristic estimator.
    pub chars_per_token: f64,
    /// Language profile size (top n-grams kept, and absence penalty).
    pub profile_size: usize,
    /// Case-insensitive screens for text about the translation task.
    pub self_reference_patterns: Vec<String>,
    /// Token budget per translation chunk.
    pub chunk_budget: u64,
    /// Character n-gram range used by language profiles. Recorded for
    /// provenance; the classifier pins this range, so other values are
    /// rejected.
    pub ngram_range: (usize, usize),
    /// DEFLATE level behind compression ratios. Recorded for provenance;
    /// ratios are only comparable at one level, so other values are
    /// rejected.
    pub deflate_level: u32,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            layer_pattern: DEFAULT_LAYER_PATTERN.to_string(),
            pre_prefixes: DEFAULT_PRE_PREFIXES.iter().map(|p| p.to_string()).collect(),
            chunk_size_bytes: DEFAULT_CHUNK_BYTES,
            k_sigma: DEFAULT_K_SIGMA,
            max_tokens: DEFAULT_MAX_TOKENS,
            chars_per_token: DEFAULT_CHARS_PER_TOKEN,
            profile_size: DEFAULT_PROFILE_SIZE,
            self_reference_patterns: DEFAULT_SELF_REFERENCE_PATTERNS
                .iter()
                .map(|p| p.to_string())
                .collect(),
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            ngram_range: (NGRAM_MIN, NGRAM_MAX),
            deflate_level: DEFLATE_LEVEL,
        }
    }
}

impl RunConfig {
    /// Parse a config file, filling absent fields with defaults and then
    /// validating the result.
    pub fn from_json(json: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    /// Check every parameter's range and that the patterns compile.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |reason: String| Err(ConfigError::Invalid { reason });
        match regex::Regex::new(&self.layer_pattern) {
            Err(e) => return bad(format!("layer_pattern does not compile: {e}")),
            Ok(re) if re.captures_len() != 2 => {
                return bad(format!(
                    "layer_pattern must have exactly one capture group, found {}",
                    re.captures_len() - 1
                ));
            }
            Ok(_) => {}
        }
        if self.chunk_size_bytes < 8 {
            return bad(format!(
                "chunk_size_bytes must be at least 8, got {}",
                self.chunk_size_bytes
            ));
        }
        if !(self.k_sigma > 0.0) || !self.k_sigma.is_finite() {
            return bad(format!("k_sigma must be positive and finite, got {}", self.k_sigma));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".to_string());
        }
        if !(self.chars_per_token > 0.0) || !self.chars_per_token.is_finite() {
            return bad(format!(
                "chars_per_token must be positive and finite, got {}",
                self.chars_per_token
            ));
        }
        if self.profile_size == 0 {
            return bad("profile_size must be at least 1".to_string());
        }
        if self.self_reference_patterns.is_empty() {
            return bad("self_reference_patterns must not be empty".to_string());
        }
        let patterns: Vec<&str> =
            self.self_reference_patterns.iter().map(String::as_str).collect();
        if let Err(e) = crate::filter::compile_reference_patterns(&patterns) {
            return bad(e.to_string());
        }
        if self.chunk_budget == 0 {
            return bad("chunk_budget must be at least 1".to_string());
        }
        if self.ngram_range != (NGRAM_MIN, NGRAM_MAX) {
            return bad(format!(
                "ngram_range is pinned at ({NGRAM_MIN}, {NGRAM_MAX}); profiles trained \
                 under other ranges would not be comparable"
            ));
        }
        if self.deflate_level != DEFLATE_LEVEL {
            return bad(format!(
                "deflate_level is pinned at {DEFLATE_LEVEL}; compression ratios are only \
                 reproducible at one level"
            ));
        }
        Ok(())
    }
}
