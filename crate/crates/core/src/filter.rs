//! Corpus hygiene filters for translated reasoning corpora.
//!
//! A corpus is a list of `(source, translated)` sample pairs. Each
//! translated sample is screened by four degeneration filters plus a
//! task-reference screen:
//!
//!   empty                the translated text is blank
//!   compression_anomaly  zlib ratio drifts from the corpus mean
//!   length_anomaly       token-count ratio drifts from the corpus mean
//!   over_context         translated text exceeds the context budget
//!   self_reference       the text talks about the translation task itself
//!
//! The anomaly filters are relative: pass one computes per-pair ratios
//!
//!   ρ_c = compression_ratio(translated) / compression_ratio(source)
//!   ρ_ℓ = tokens(translated) / tokens(source)
//!
//! and corpus moments over them; pass two flags any pair whose ratio
//! deviates from the mean by more than `k_sigma` standard deviations.
//! Token counts come from a pluggable estimator so exact tokenizer counts
//! can replace the character heuristic without touching the filters.
//!
//! The chunker splits long text for translation, preferring paragraph
//! boundaries, then sentence boundaries, and hard-splitting only when a
//! single sentence exceeds the budget on its own. Concatenating the
//! chunks always reproduces the input byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// zlib compression level pinned for reproducible ratios.
pub const DEFLATE_LEVEL: u32 = 6;

/// Default characters-per-token for the heuristic estimator.
pub const DEFAULT_CHARS_PER_TOKEN: f64 = 4.0;

/// Default deviation threshold for the anomaly filters.
pub const DEFAULT_K_SIGMA: f64 = 3.0;

/// Default context budget in tokens.
pub const DEFAULT_MAX_TOKENS: u64 = 32_768;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("text is empty")]
    EmptyText,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("duplicate sample id `{id}`")]
    DuplicateId { id: String },

    #[error("k_sigma must be positive, got {got}")]
    BadKSigma { got: f64 },

    #[error("chunk budget must be at least 1 token")]
    BadBudget,

    #[error("pattern list is empty")]
    EmptyPatterns,

    #[error("bad pattern `{pattern}`: {reason}")]
    BadPattern { pattern: String, reason: String },

    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

// ─────────────────────────────────────────────────────────────────────────
// Samples
// ─────────────────────────────────────────────────────────────────────────

/// One reasoning sample: a question, the model's reasoning, and the final
/// answer, tagged with a language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub reasoning: String,
    pub answer: String,
    #[serde(default)]
    pub language: String,
}

impl Sample {
    /// The text the filters operate on: all three fields joined by
    /// newlines, in field order.
    pub fn full_text(&self) -> String {
        format!("{}\n{}\n{}", self.question, self.reasoning, self.answer)
    }

    /// Blank modulo whitespace.
    pub fn is_blank(&self) -> bool {
        self.question.trim().is_empty()
            && self.reasoning.trim().is_empty()
            && self.answer.trim().is_empty()
    }
}

/// One line of a pairs file: the original sample and its translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: Sample,
    pub translated: Sample,
}

/// Read `(source, translated)` pairs from JSONL, one [`PairRecord`] per
/// line. Blank lines are skipped; parse errors carry the line number.
pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<(Sample, Sample)>, FilterError> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line)
            .map_err(|e| FilterError::BadRecord { line: idx + 1, reason: e.to_string() })?;
        pairs.push((record.source, record.translated));
    }
    Ok(pairs)
}

// ─────────────────────────────────────────────────────────────────────────
// Token estimation
// ─────────────────────────────────────────────────────────────────────────

/// Estimates the token count of arbitrary text. Estimates must be
/// monotone in the prefix length: extending a text never lowers its
/// estimate. The chunker relies on this to binary-search split points.
pub trait TokenEstimator: Sync {
    fn estimate(&self, text: &str) -> u64;
}

/// Heuristic estimator: `ceil(chars / chars_per_token)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharEstimator {
    pub chars_per_token: f64,
}

impl CharEstimator {
    pub fn new(chars_per_token: f64) -> CharEstimator {
        assert!(
            chars_per_token.is_finite() && chars_per_token > 0.0,
            "chars_per_token must be positive"
        );
        CharEstimator { chars_per_token }
    }
}

impl Default for CharEstimator {
    fn default() -> CharEstimator {
        CharEstimator::new(DEFAULT_CHARS_PER_TOKEN)
    }
}

impl TokenEstimator for CharEstimator {
    fn estimate(&self, text: &str) -> u64 {
        (text.chars().count() as f64 / self.chars_per_token).ceil() as u64
    }
}

/// Supplies token counts for a `(source, translated)` pair. Implemented
/// for every [`TokenEstimator`] (estimate both full texts); the sidecar
/// variant returns exact pre-computed counts instead.
pub trait PairTokenCounts: Sync {
    /// `(source_tokens, translated_tokens)`.
    fn pair(&self, source: &Sample, translated: &Sample) -> (u64, u64);
}

impl<T: TokenEstimator + ?Sized> PairTokenCounts for T {
    fn pair(&self, source: &Sample, translated: &Sample) -> (u64, u64) {
        (self.estimate(&source.full_text()), self.estimate(&translated.full_text()))
    }
}

/// Exact token counts loaded from a sidecar file, keyed by the translated
/// sample's id. Pairs without a sidecar entry fall back to the character
/// heuristic; [`SidecarCounts::missing_ids`] lets callers surface that
/// before filtering.
#[derive(Debug, Clone)]
pub struct SidecarCounts {
    counts: BTreeMap<String, (u64, u64)>,
    fallback: CharEstimator,
}

#[derive(Debug, Deserialize)]
struct SidecarRecord {
    id: String,
    source_tokens: u64,
    translated_tokens: u64,
}

impl SidecarCounts {
    /// Parse JSONL records `{"id", "source_tokens", "translated_tokens"}`.
    pub fn from_jsonl<R: BufRead>(
        reader: R,
        fallback: CharEstimator,
    ) -> Result<SidecarCounts, FilterError> {
        let mut counts = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SidecarRecord = serde_json::from_str(&line)
                .map_err(|e| FilterError::BadRecord { line: idx + 1, reason: e.to_string() })?;
            if counts
                .insert(record.id.clone(), (record.source_tokens, record.translated_tokens))
                .is_some()
            {
                return Err(FilterError::DuplicateId { id: record.id });
            }
        }
        Ok(SidecarCounts { counts, fallback })
    }

    /// Ids among `pairs` that have no sidecar entry (and will use the
    /// fallback heuristic).
    pub fn missing_ids(&self, pairs: &[(Sample, Sample)]) -> Vec<String> {
        pairs
            .iter()
            .filter(|(_, t)| !self.counts.contains_key(&t.id))
            .map(|(_, t)| t.id.clone())
            .collect()
    }
}

impl PairTokenCounts for SidecarCounts {
    fn pair(&self, source: &Sample, translated: &Sample) -> (u64, u64) {
        match self.counts.get(&translated.id) {
            Some(&(s, t)) => (s, t),
            None => self.fallback.pair(source, translated),
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Compression ratio
// ─────────────────────────────────────────────────────────────────────────

/// zlib-compressed size of `bytes` at the pinned level.
pub fn compressed_len(bytes: &[u8]) -> usize {
    use flate2::write::ZlibEncoder;
    use flate2::Compression;
    use std::io::Write;

    let mut encoder = ZlibEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    encoder.write_all(bytes).expect("writing to a Vec cannot fail");
    encoder.finish().expect("finishing a Vec-backed encoder cannot fail").len()
}

/// Compressed size over raw size. Near 0 for degenerate repetition, near
/// 1 for incompressible input. Errors on empty input.
pub fn compression_ratio_bytes(bytes: &[u8]) -> Result<f64, FilterError> {
    if bytes.is_empty() {
        return Err(FilterError::EmptyText);
    }
    Ok(compressed_len(bytes) as f64 / bytes.len() as f64)
}

/// [`compression_ratio_bytes`] over the text's UTF-8 encoding.
pub fn compression_ratio(text: &str) -> Result<f64, FilterError> {
    compression_ratio_bytes(text.as_bytes())
}

// ─────────────────────────────────────────────────────────────────────────
// Self-reference screen
// ─────────────────────────────────────────────────────────────────────────

/// Default patterns for text that talks about the translation task
/// itself ("Translate the following into German:", "answer in French",
/// …). Matched case-insensitively; override via configuration when the
/// corpus needs a different screen.
pub const DEFAULT_SELF_REFERENCE_PATTERNS: &[&str] = &[
    r"translat(?:e|ed|ing|ion)[^.\n]{0,60}?\b(?:into|from|in)\s+(?:english|french|german|spanish|chinese|swahili|mandarin|arabic|russian|japanese|korean|hindi|portuguese|italian|the\s+(?:source|target|original)\s+language)\b",
    r"\b(?:answer|respond|reply|write|think|reason)\s+(?:only\s+)?in\s+(?:english|french|german|spanish|chinese|swahili|mandarin|arabic|russian|japanese|korean|hindi|portuguese|italian|the\s+(?:source|target|original)\s+language)\b",
    r"\b(?:the\s+)?original\s+(?:question|problem|text)\s+(?:was|is)\s+in\b",
    r"\bthis\s+(?:question|problem|text)\s+(?:was|has\s+been)\s+translated\b",
    r"\byour\s+(?:entire\s+)?(?:answer|response|reasoning)\s+(?:must|should)\s+be\s+in\b",
];

/// Compile a screen from pattern strings, case-insensitively. The list
/// must be non-empty and every pattern must be a valid regex.
pub fn compile_reference_patterns(patterns: &[&str]) -> Result<Vec<Regex>, FilterError> {
    if patterns.is_empty() {
        return Err(FilterError::EmptyPatterns);
    }
    patterns
        .iter()
        .map(|p| {
            regex::RegexBuilder::new(p).case_insensitive(true).build().map_err(|e| {
                FilterError::BadPattern { pattern: (*p).to_string(), reason: e.to_string() }
            })
        })
        .collect()
}

/// True when any pattern matches anywhere in the sample's question,
/// reasoning, or answer.
pub fn is_self_referential(sample: &Sample, patterns: &[Regex]) -> bool {
    let text = sample.full_text();
    patterns.iter().any(|p| p.is_match(&text))
}

// ─────────────────────────────────────────────────────────────────────────
// Verdicts
// ─────────────────────────────────────────────────────────────────────────

/// Why a sample was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Empty,
    CompressionAnomaly,
    LengthAnomaly,
    OverContext,
    SelfReference,
}

/// Per-pair diagnostics. Ratios and z-scores are absent when they are
/// undefined for the pair (blank text on either side, zero source token
/// count, or anomaly filters disabled for the corpus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Token count of the translated full text.
    pub token_estimate: u64,
    /// ρ_c: translated compression ratio over source compression ratio.
    pub compression_ratio: Option<f64>,
    /// ρ_ℓ: translated token count over source token count.
    pub length_ratio: Option<f64>,
    pub z_compression: Option<f64>,
    pub z_length: Option<f64>,
}

/// The filter decision for one pair, identified by the translated
/// sample's id. `kept` is true exactly when `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub id: String,
    pub kept: bool,
    pub reasons: Vec<Reason>,
    pub stats: SampleStats,
}

/// Verdicts in corpus order plus any non-fatal warnings raised while
/// filtering (degenerate corpus sizes, undefined ratios).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub verdicts: Vec<FilterVerdict>,
    pub warnings: Vec<String>,
}

impl FilterOutcome {
    pub fn kept(&self) -> usize {
        self.verdicts.iter().filter(|v| v.kept).count()
    }

    pub fn dropped(&self) -> usize {
        self.verdicts.len() - self.kept()
    }
}

fn population_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct PairMeasure {
    token_estimate: u64,
    compression_ratio: Option<f64>,
    length_ratio: Option<f64>,
    blank: bool,
    warning: Option<String>,
}

fn measure_pair(source: &Sample, translated: &Sample, counts: &dyn PairTokenCounts) -> PairMeasure {
    let (source_tokens, translated_tokens) = counts.pair(source, translated);
    let blank = translated.is_blank();
    let mut warning = None;

    let (compression_ratio, length_ratio) = if blank {
        (None, None)
    } else if source.is_blank() {
        warning = Some(format!(
            "sample `{}`: source is blank; ratio filters skipped for it",
            translated.id
        ));
        (None, None)
    } else if source_tokens == 0 {
        warning = Some(format!(
            "sample `{}`: source token count is 0; length ratio skipped for it",
            translated.id
        ));
        let rc = compression_ratio(&translated.full_text()).ok().and_then(|t| {
            compression_ratio(&source.full_text()).ok().map(|s| t / s)
        });
        (rc, None)
    } else {
        let rc = compression_ratio(&translated.full_text()).ok().and_then(|t| {
            compression_ratio(&source.full_text()).ok().map(|s| t / s)
        });
        (rc, Some(translated_tokens as f64 / source_tokens as f64))
    };

    PairMeasure {
        token_estimate: translated_tokens,
        compression_ratio,
        length_ratio,
        blank,
        warning,
    }
}

/// Run the degeneration filters over a corpus of `(source, translated)`
/// pairs: blank detection, the two relative anomaly filters at `k_sigma`
/// deviations, and the `max_tokens` context cap.
///
/// Anomaly moments are computed over the pairs whose ratios are defined
/// (pass one) and applied per pair (pass two). A single-pair corpus has
/// no meaningful moments, so its anomaly filters are disabled with a
/// warning. Verdicts come back in corpus order.
pub fn anomaly_filters(
    pairs: &[(Sample, Sample)],
    k_sigma: f64,
    max_tokens: u64,
    counts: &dyn PairTokenCounts,
) -> Result<FilterOutcome, FilterError> {
    if pairs.is_empty() {
        return Err(FilterError::EmptyCorpus);
    }
    if !(k_sigma > 0.0) || !k_sigma.is_finite() {
        return Err(FilterError::BadKSigma { got: k_sigma });
    }
    let mut seen = BTreeSet::new();
    for (_, translated) in pairs {
        if !seen.insert(translated.id.clone()) {
            return Err(FilterError::DuplicateId { id: translated.id.clone() });
        }
    }

    // Pass one: per-pair measurements (independent, so parallelism cannot
    // change the result), then corpus moments in corpus order.
    use rayon::prelude::*;
    let measures: Vec<PairMeasure> =
        pairs.par_iter().map(|(s, t)| measure_pair(s, t, counts)).collect();

    let mut warnings: Vec<String> =
        measures.iter().filter_map(|m| m.warning.clone()).collect();

    let anomalies_enabled = pairs.len() > 1;
    if !anomalies_enabled {
        warnings.push(
            "corpus has a single pair; anomaly filters disabled (no moments to compare against)"
                .to_string(),
        );
    }

    let rc_values: Vec<f64> = measures.iter().filter_map(|m| m.compression_ratio).collect();
    let rl_values: Vec<f64> = measures.iter().filter_map(|m| m.length_ratio).collect();
    let rc_moments = (!rc_values.is_empty()).then(|| population_moments(&rc_values));
    let rl_moments = (!rl_values.is_empty()).then(|| population_moments(&rl_values));

    // Pass two: verdicts against the frozen moments.
    let mut verdicts = Vec::with_capacity(pairs.len());
    for ((_, translated), m) in pairs.iter().zip(&measures) {
        let mut reasons = Vec::new();
        if m.blank {
            reasons.push(Reason::Empty);
        }

        let z_of = |value: Option<f64>, moments: Option<(f64, f64)>| -> Option<f64> {
            if !anomalies_enabled {
                return None;
            }
            let (mean, std) = moments?;
            let v = value?;
            Some(if std > 0.0 { (v - mean) / std } else { 0.0 })
        };
        let z_compression = z_of(m.compression_ratio, rc_moments);
        let z_length = z_of(m.length_ratio, rl_moments);

        if anomalies_enabled {
            if let (Some(v), Some((mean, std))) = (m.compression_ratio, rc_moments) {
                if (v - mean).abs() > k_sigma * std {
                    reasons.push(Reason::CompressionAnomaly);
                }
            }
            if let (Some(v), Some((mean, std))) = (m.length_ratio, rl_moments) {
                if (v - mean).abs() > k_sigma * std {
                    reasons.push(Reason::LengthAnomaly);
                }
            }
        }
        if m.token_estimate > max_tokens {
            reasons.push(Reason::OverContext);
        }

        reasons.sort();
        verdicts.push(FilterVerdict {
            id: translated.id.clone(),
            kept: reasons.is_empty(),
            reasons,
            stats: SampleStats {
                token_estimate: m.token_estimate,
                compression_ratio: m.compression_ratio,
                length_ratio: m.length_ratio,
                z_compression,
                z_length,
            },
        });
    }

    Ok(FilterOutcome { verdicts, warnings })
}

/// The full screening pipeline: [`anomaly_filters`] plus the
/// self-reference screen, which checks both sides of each pair so that
/// task references survive neither in the original nor in the
/// translation.
pub fn filter_pairs(
    pairs: &[(Sample, Sample)],
    patterns: &[Regex],
    k_sigma: f64,
    max_tokens: u64,
    counts: &dyn PairTokenCounts,
) -> Result<FilterOutcome, FilterError> {
    if patterns.is_empty() {
        return Err(FilterError::EmptyPatterns);
    }
    let mut outcome = anomaly_filters(pairs, k_sigma, max_tokens, counts)?;
    for ((source, translated), verdict) in pairs.iter().zip(&mut outcome.verdicts) {
        if is_self_referential(source, patterns) || is_self_referential(translated, patterns) {
            verdict.reasons.push(Reason::SelfReference);
            verdict.reasons.sort();
            verdict.kept = false;
        }
    }
    Ok(outcome)
}

// ─────────────────────────────────────────────────────────────────────────
// Chunker
// ─────────────────────────────────────────────────────────────────────────

const SENTENCE_ENDERS: [char; 7] = ['.', '!', '?', '…', '。', '！', '？'];

/// A maximal splittable unit: text up to and including a sentence ender
/// and its trailing whitespace run (or the tail of the input). A unit
/// whose whitespace run holds two or more newlines ends a paragraph.
#[derive(Debug, Clone, Copy)]
struct Atom {
    start: usize,
    end: usize,
    ends_paragraph: bool,
}

fn split_atoms(text: &str) -> Vec<Atom> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut atoms = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if chars[i].1.is_whitespace() {
            let mut j = i;
            let mut newlines = 0usize;
            while j < chars.len() && chars[j].1.is_whitespace() {
                if chars[j].1 == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            let ends_paragraph = newlines >= 2;
            let after_ender = i > 0 && SENTENCE_ENDERS.contains(&chars[i - 1].1);
            if ends_paragraph || after_ender {
                let end = if j < chars.len() { chars[j].0 } else { text.len() };
                if end > start {
                    atoms.push(Atom { start, end, ends_paragraph });
                }
                start = end;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if start < text.len() {
        atoms.push(Atom { start, end: text.len(), ends_paragraph: true });
    }
    atoms
}

/// Byte offset of the longest prefix of `text[start..end]` (whole
/// characters, at least one) whose estimate fits `budget`.
fn longest_fitting_prefix(
    text: &str,
    start: usize,
    end: usize,
    budget: u64,
    estimator: &dyn TokenEstimator,
) -> usize {
    let boundaries: Vec<usize> = text[start..end]
        .char_indices()
        .map(|(i, c)| start + i + c.len_utf8())
        .collect();
    debug_assert!(!boundaries.is_empty());
    let fits = |e: usize| estimator.estimate(&text[start..e]) <= budget;
    if !fits(boundaries[0]) {
        // Even one character overflows; take it anyway so splitting
        // always makes progress.
        return boundaries[0];
    }
    let (mut lo, mut hi) = (0usize, boundaries.len() - 1);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(boundaries[mid]) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    boundaries[lo]
}

/// Split `text` into chunks whose estimates fit `budget`, cutting at
/// paragraph boundaries first, sentence boundaries second, and splitting
/// inside a sentence only when that sentence alone exceeds the budget.
/// Concatenating the chunks reproduces `text` exactly; empty input yields
/// no chunks.
pub fn chunk_text(
    text: &str,
    budget: u64,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<String>, FilterError> {
    if budget == 0 {
        return Err(FilterError::BadBudget);
    }
    let atoms = split_atoms(text);
    let mut paragraphs: Vec<&[Atom]> = Vec::new();
    let mut rest = atoms.as_slice();
    while !rest.is_empty() {
        let cut = rest.iter().position(|a| a.ends_paragraph).map_or(rest.len(), |p| p + 1);
        let (para, tail) = rest.split_at(cut);
        paragraphs.push(para);
        rest = tail;
    }

    let est = |s: usize, e: usize| estimator.estimate(&text[s..e]);
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut cur: Option<(usize, usize)> = None;

    for para in paragraphs {
        let (p_start, p_end) = (para[0].start, para[para.len() - 1].end);
        if let Some((c_start, _)) = cur {
            if est(c_start, p_end) <= budget {
                cur = Some((c_start, p_end));
                continue;
            }
            ranges.push(cur.take().unwrap());
        }
        if est(p_start, p_end) <= budget {
            cur = Some((p_start, p_end));
            continue;
        }
        // The paragraph alone overflows: pack its sentences.
        for atom in para {
            if let Some((c_start, _)) = cur {
                if est(c_start, atom.end) <= budget {
                    cur = Some((c_start, atom.end));
                    continue;
                }
                ranges.push(cur.take().unwrap());
            }
            if est(atom.start, atom.end) <= budget {
                cur = Some((atom.start, atom.end));
                continue;
            }
            // The sentence alone overflows: hard-split it.
            let mut s = atom.start;
            while s < atom.end {
                let e = longest_fitting_prefix(text, s, atom.end, budget, estimator);
                ranges.push((s, e));
                s = e;
            }
        }
    }
    if let Some(c) = cur {
        ranges.push(c);
    }

    Ok(ranges.into_iter().map(|(s, e)| text[s..e].to_string()).collect())
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, question: &str, reasoning: &str, answer: &str) -> Sample {
        Sample {
            id: id.to_string(),
            question: question.to_string(),
            reasoning: reasoning.to_string(),
            answer: answer.to_string(),
            language: "en".to_string(),
        }
    }

    fn identity_pair(id: &str, text: &str) -> (Sample, Sample) {
        let s = sample(id, text, text, text);
        (s.clone(), s)
    }

    // ── compression ─────────────────────────────────────────────────────

    #[test]
    fn repetition_compresses_to_almost_nothing() {
        let text = "a".repeat(10_000);
        let ratio = compression_ratio(&text).unwrap();
        assert!(ratio < 0.01, "ratio {ratio} not < 0.01");
    }

    #[test]
    fn high_entropy_bytes_do_not_compress() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bytes: Vec<u8> = (0..10_000).map(|_| rng.random()).collect();
        let ratio = compression_ratio_bytes(&bytes).unwrap();
        assert!((0.95..=1.1).contains(&ratio), "ratio {ratio} outside [0.95, 1.1]");
    }

    #[test]
    fn ratio_is_deterministic_and_rejects_empty() {
        let text = "The quick brown fox jumps over the lazy dog. ".repeat(20);
        assert_eq!(compression_ratio(&text).unwrap(), compression_ratio(&text).unwrap());
        assert_eq!(
            compression_ratio(&text).unwrap(),
            compression_ratio_bytes(text.as_bytes()).unwrap()
        );
        assert!(matches!(compression_ratio(""), Err(FilterError::EmptyText)));
    }

    // ── estimators ──────────────────────────────────────────────────────

    #[test]
    fn char_estimator_rounds_up() {
        let est = CharEstimator::default();
        assert_eq!(est.estimate(""), 0);
        assert_eq!(est.estimate("abcd"), 1);
        assert_eq!(est.estimate("abcde"), 2);
        // Characters, not bytes.
        assert_eq!(est.estimate("中文中文"), 1);
    }

    #[test]
    fn sidecar_counts_override_the_heuristic() {
        let jsonl = concat!(
            r#"{"id": "s1", "source_tokens": 100, "translated_tokens": 500}"#,
            "\n"
        );
        let sidecar =
            SidecarCounts::from_jsonl(jsonl.as_bytes(), CharEstimator::default()).unwrap();
        let (src, tr) = identity_pair("s1", "some text here");
        assert_eq!(sidecar.pair(&src, &tr), (100, 500));

        // Unknown ids fall back to the heuristic and are reported.
        let (src2, tr2) = identity_pair("s2", "abcd");
        let heuristic = CharEstimator::default().pair(&src2, &tr2);
        assert_eq!(sidecar.pair(&src2, &tr2), heuristic);
        assert_eq!(sidecar.missing_ids(&[(src2, tr2)]), vec!["s2".to_string()]);

        let dup = concat!(
            r#"{"id": "s1", "source_tokens": 1, "translated_tokens": 1}"#,
            "\n",
            r#"{"id": "s1", "source_tokens": 2, "translated_tokens": 2}"#,
            "\n"
        );
        assert!(matches!(
            SidecarCounts::from_jsonl(dup.as_bytes(), CharEstimator::default()),
            Err(FilterError::DuplicateId { .. })
        ));
    }

    // ── self-reference screen ───────────────────────────────────────────

    #[test]
    fn translation_instructions_are_flagged_and_math_is_not() {
        let patterns = compile_reference_patterns(DEFAULT_SELF_REFERENCE_PATTERNS).unwrap();
        let flagged = sample(
            "a",
            "Translate the following into German: what is the sum of 2 and 3?",
            "",
            "",
        );
        assert!(is_self_referential(&flagged, &patterns));

        let kept = sample("b", "Compute 2+2.", "2+2 is 4.", "4");
        assert!(!is_self_referential(&kept, &patterns));

        // Any field triggers, case-insensitively.
        let in_answer = sample("c", "What is 2+2?", "", "PLEASE ANSWER IN FRENCH");
        assert!(is_self_referential(&in_answer, &patterns));

        assert!(matches!(compile_reference_patterns(&[]), Err(FilterError::EmptyPatterns)));
        assert!(matches!(
            compile_reference_patterns(&["(unclosed"]),
            Err(FilterError::BadPattern { .. })
        ));
    }

    #[test]
    fn planted_references_are_flagged_exactly() {
        let patterns = compile_reference_patterns(DEFAULT_SELF_REFERENCE_PATTERNS).unwrap();
        let planted = [
            "Translate the following into German: find x such that 2x = 10.",
            "Solve the equation, then answer in French.",
            "The original question was in Chinese; solve for y.",
            "This problem was translated from Spanish. Compute the area.",
            "Your answer must be in Swahili: how many primes are below 20?",
        ];
        let clean = [
            "Compute the greatest common divisor of 48 and 36.",
            "A train travels 120 km in 2 hours. What is its speed?",
            "Factor x^2 - 5x + 6.",
            "How many edges does a cube have?",
            "What is 15% of 240?",
            "Simplify (2/3) + (1/6).",
            "If f(x) = 3x + 1, what is f(4)?",
            "List the prime factors of 84.",
            "A circle has radius 5. What is its circumference?",
            "What is the next term: 2, 6, 18, 54, ...?",
            "Convert 2.5 hours into minutes.",
            "Solve for x: 4x - 7 = 13.",
            "What is the median of 3, 9, 4, 7, 5?",
            "How many ways can 4 books be arranged on a shelf?",
            "Evaluate the integral of 2x from 0 to 3.",
        ];
        let mut flagged_ids = Vec::new();
        for (i, q) in planted.iter().chain(clean.iter()).enumerate() {
            let s = sample(&format!("s{i}"), q, "working...", "42");
            if is_self_referential(&s, &patterns) {
                flagged_ids.push(i);
            }
        }
        assert_eq!(flagged_ids, vec![0, 1, 2, 3, 4]);
    }

    // ── anomaly filters ─────────────────────────────────────────────────

    fn varied_text(i: usize) -> String {
        format!(
            "Question {i}: a farmer has {} sheep and sells {}. The flock loses \
             a third of the remainder to wolves over winter; how many sheep \
             remain when spring arrives in year {}?",
            i * 7 + 3,
            i % 5 + 1,
            2000 + i
        )
    }

    #[test]
    fn identical_pairs_are_never_flagged() {
        let pairs: Vec<_> =
            (0..20).map(|i| identity_pair(&format!("s{i}"), &varied_text(i))).collect();
        let out =
            anomaly_filters(&pairs, DEFAULT_K_SIGMA, DEFAULT_MAX_TOKENS, &CharEstimator::default())
                .unwrap();
        assert_eq!(out.verdicts.len(), 20);
        for v in &out.verdicts {
            assert!(v.kept, "{} dropped: {:?}", v.id, v.reasons);
            assert_eq!(v.stats.compression_ratio, Some(1.0));
            assert_eq!(v.stats.length_ratio, Some(1.0));
            assert_eq!(v.stats.z_compression, Some(0.0));
            assert_eq!(v.stats.z_length, Some(0.0));
        }
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn repetition_blowup_trips_both_anomaly_filters() {
        // 99 clean pairs plus one whose translation repeats the source
        // five times over.
        let mut pairs: Vec<_> =
            (0..99).map(|i| identity_pair(&format!("s{i}"), &varied_text(i))).collect();
        let src = sample("bad", &varied_text(99), "", "");
        let mut tr = src.clone();
        tr.question = src.question.repeat(5);
        pairs.push((src, tr));

        let est = CharEstimator::default();
        let out = anomaly_filters(&pairs, DEFAULT_K_SIGMA, DEFAULT_MAX_TOKENS, &est).unwrap();

        // Independent check: recompute the moments directly and compare
        // flag sets.
        let ratios: Vec<(f64, f64)> = pairs
            .iter()
            .map(|(s, t)| {
                let rc = compression_ratio(&t.full_text()).unwrap()
                    / compression_ratio(&s.full_text()).unwrap();
                let rl = est.estimate(&t.full_text()) as f64 / est.estimate(&s.full_text()) as f64;
                (rc, rl)
            })
            .collect();
        let moments = |vals: &[f64]| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std =
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            (mean, std)
        };
        let (rc_mean, rc_std) = moments(&ratios.iter().map(|r| r.0).collect::<Vec<_>>());
        let (rl_mean, rl_std) = moments(&ratios.iter().map(|r| r.1).collect::<Vec<_>>());

        for (v, (rc, rl)) in out.verdicts.iter().zip(&ratios) {
            let expect_rc = (rc - rc_mean).abs() > DEFAULT_K_SIGMA * rc_std;
            let expect_rl = (rl - rl_mean).abs() > DEFAULT_K_SIGMA * rl_std;
            assert_eq!(v.reasons.contains(&Reason::CompressionAnomaly), expect_rc, "{}", v.id);
            assert_eq!(v.reasons.contains(&Reason::LengthAnomaly), expect_rl, "{}", v.id);
        }
        let bad = out.verdicts.last().unwrap();
        assert_eq!(bad.id, "bad");
        assert!(!bad.kept);
        assert_eq!(bad.reasons, vec![Reason::CompressionAnomaly, Reason::LengthAnomaly]);
        assert_eq!(out.verdicts.iter().filter(|v| !v.kept).count(), 1);
    }

    #[test]
    fn context_cap_is_strictly_greater_than() {
        // 4 chars per token: 131072 chars = exactly 32768 tokens.
        let at_cap = "x".repeat(4 * 32_768);
        let over_cap = "x".repeat(4 * 32_768 + 1);
        let pairs = vec![
            identity_pair("fits", &at_cap),
            identity_pair("over", &over_cap),
            identity_pair("tiny", "Short and sweet."),
        ];
        // full_text adds two newlines, so counts shift by one token; use
        // raw question-only samples to keep the arithmetic exact.
        let pairs: Vec<_> = pairs
            .into_iter()
            .map(|(mut s, mut t)| {
                s.reasoning.clear();
                s.answer.clear();
                t.reasoning.clear();
                t.answer.clear();
                (s, t)
            })
            .collect();

        struct QuestionOnly;
        impl TokenEstimator for QuestionOnly {
            fn estimate(&self, text: &str) -> u64 {
                // Count only the question line to keep the cap exact.
                let q = text.split('\n').next().unwrap_or("");
                (q.chars().count() as f64 / 4.0).ceil() as u64
            }
        }

        let out = anomaly_filters(&pairs, DEFAULT_K_SIGMA, 32_768, &QuestionOnly).unwrap();
        let by_id: BTreeMap<&str, &FilterVerdict> =
            out.verdicts.iter().map(|v| (v.id.as_str(), v)).collect();
        assert!(by_id["fits"].kept);
        assert_eq!(by_id["fits"].stats.token_estimate, 32_768);
        assert!(!by_id["over"].kept);
        assert_eq!(by_id["over"].reasons, vec![Reason::OverContext]);
        assert_eq!(by_id["over"].stats.token_estimate, 32_769);
        assert!(by_id["tiny"].kept);
    }

    #[test]
    fn blank_translations_are_dropped_and_excluded_from_moments() {
        let mut pairs: Vec<_> =
            (0..10).map(|i| identity_pair(&format!("s{i}"), &varied_text(i))).collect();
        let src = sample("blank", &varied_text(10), "context", "answer");
        let blank = sample("blank", "", "  ", "\t");
        pairs.push((src, blank));

        let out =
            anomaly_filters(&pairs, DEFAULT_K_SIGMA, DEFAULT_MAX_TOKENS, &CharEstimator::default())
                .unwrap();
        let v = out.verdicts.last().unwrap();
        assert!(!v.kept);
        assert_eq!(v.reasons, vec![Reason::Empty]);
        assert_eq!(v.stats.compression_ratio, None);
        assert_eq!(v.stats.length_ratio, None);
        assert_eq!(v.stats.z_compression, None);
        // The identity pairs still sit exactly on the mean.
        for v in &out.verdicts[..10] {
            assert!(v.kept);
            assert_eq!(v.stats.z_compression, Some(0.0));
        }
    }

    #[test]
    fn single_pair_corpus_disables_anomalies_with_a_warning() {
        let src = sample("solo", &varied_text(1), "", "");
        let mut tr = src.clone();
        tr.question = src.question.repeat(10);
        let out = anomaly_filters(
            &[(src, tr)],
            DEFAULT_K_SIGMA,
            DEFAULT_MAX_TOKENS,
            &CharEstimator::default(),
        )
        .unwrap();
        assert_eq!(out.verdicts.len(), 1);
        assert!(out.verdicts[0].kept);
        assert_eq!(out.verdicts[0].stats.z_compression, None);
        assert!(out.warnings.iter().any(|w| w.contains("single")));
    }

    #[test]
    fn corpus_preconditions_are_enforced() {
        let est = CharEstimator::default();
        assert!(matches!(
            anomaly_filters(&[], 3.0, 100, &est),
            Err(FilterError::EmptyCorpus)
        ));
        let dup = vec![identity_pair("x", "one. two."), identity_pair("x", "three. four.")];
        assert!(matches!(
            anomaly_filters(&dup, 3.0, 100, &est),
            Err(FilterError::DuplicateId { .. })
        ));
        let one = vec![identity_pair("x", "one. two.")];
        assert!(matches!(
            anomaly_filters(&one, 0.0, 100, &est),
            Err(FilterError::BadKSigma { .. })
        ));
        assert!(matches!(
            anomaly_filters(&one, -1.0, 100, &est),
            Err(FilterError::BadKSigma { .. })
        ));
    }

    #[test]
    fn pipeline_merges_self_reference_with_anomalies() {
        let patterns = compile_reference_patterns(DEFAULT_SELF_REFERENCE_PATTERNS).unwrap();
        let mut pairs: Vec<_> =
            (0..5).map(|i| identity_pair(&format!("s{i}"), &varied_text(i))).collect();
        pairs.push(identity_pair("meta", "Translate the following into German: 2x = 8."));

        let out = filter_pairs(
            &pairs,
            &patterns,
            DEFAULT_K_SIGMA,
            DEFAULT_MAX_TOKENS,
            &CharEstimator::default(),
        )
        .unwrap();
        let v = out.verdicts.last().unwrap();
        assert_eq!(v.id, "meta");
        assert!(!v.kept);
        assert_eq!(v.reasons, vec![Reason::SelfReference]);
        assert_eq!(out.kept(), 5);
        assert_eq!(out.dropped(), 1);
    }

    #[test]
    fn verdicts_serialize_with_stable_reason_names() {
        let reasons = vec![
            Reason::Empty,
            Reason::CompressionAnomaly,
            Reason::LengthAnomaly,
            Reason::OverContext,
            Reason::SelfReference,
        ];
        let json = serde_json::to_string(&reasons).unwrap();
        assert_eq!(
            json,
            r#"["empty","compression_anomaly","length_anomaly","over_context","self_reference"]"#
        );
    }

    #[test]
    fn pairs_jsonl_round_trips_and_reports_bad_lines() {
        let (src, tr) = identity_pair("p1", "What is 2+2?");
        let record = PairRecord { source: src.clone(), translated: tr.clone() };
        let line = serde_json::to_string(&record).unwrap();
        let input = format!("{line}\n\n{line2}\n", line2 = line);
        let pairs = read_pairs_jsonl(input.as_bytes()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], (src, tr));

        let bad = "not json\n";
        match read_pairs_jsonl(bad.as_bytes()) {
            Err(FilterError::BadRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected BadRecord, got {other:?}"),
        }
    }

    // ── chunker ─────────────────────────────────────────────────────────

    /// One token per character, so test budgets are exact char counts.
    fn chars() -> CharEstimator {
        CharEstimator::new(1.0)
    }

    #[test]
    fn chunks_prefer_paragraph_boundaries() {
        let text = "aaaa aaaa.\n\nbbbb bbbb.";
        let chunks = chunk_text(text, 20, &chars()).unwrap();
        assert_eq!(chunks, vec!["aaaa aaaa.\n\n", "bbbb bbbb."]);
    }

    #[test]
    fn chunks_fall_back_to_sentence_boundaries() {
        let text = "Aa bb. Cc dd. Ee ff.";
        let chunks = chunk_text(text, 15, &chars()).unwrap();
        assert_eq!(chunks, vec!["Aa bb. Cc dd. ", "Ee ff."]);
    }

    #[test]
    fn oversized_sentences_are_hard_split() {
        let chunks = chunk_text("abcdefghij", 4, &chars()).unwrap();
        assert_eq!(chunks, vec!["abcd", "efgh", "ij"]);

        // Decimal points do not make sentence boundaries.
        let text = "Pi is 3.14159 about.";
        assert_eq!(chunk_text(text, 100, &chars()).unwrap(), vec![text]);
        let split = chunk_text(text, 10, &chars()).unwrap();
        assert_eq!(split, vec!["Pi is 3.14", "159 about."]);
    }

    #[test]
    fn cjk_enders_make_boundaries_and_splits_respect_chars() {
        let text = "你好。世界。";
        assert_eq!(chunk_text(text, 3, &chars()).unwrap(), vec!["你好。", "世界。"]);
        let pieces = chunk_text(text, 2, &chars()).unwrap();
        assert_eq!(pieces.concat(), text);
        for p in &pieces {
            assert!(p.chars().count() <= 2);
        }
    }

    #[test]
    fn chunking_reconstructs_everything_exactly() {
        let texts = [
            "",
            "\n\n\n",
            "no enders at all just words",
            "One. Two! Three? Four… 五。",
            "Para one line a.\nline b.\n\nPara two.\n\n\nPara three with a very \
             long sentence that keeps going and going and going until it must \
             be split somewhere in the middle of a word.",
            "Trailing space. ",
            "Ends mid",
            "A.  Double-spaced.   Trailing run.    ",
        ];
        for text in texts {
            for budget in [1u64, 3, 7, 20, 1000] {
                let chunks = chunk_text(text, budget, &chars()).unwrap();
                assert_eq!(chunks.concat(), text, "budget {budget}, text {text:?}");
                for c in &chunks {
                    assert!(
                        c.chars().count() as u64 <= budget,
                        "chunk {c:?} over budget {budget} for {text:?}"
                    );
                    assert!(!c.is_empty());
                }
            }
        }
        assert!(chunk_text("anything", 0, &chars()).is_err());
        assert_eq!(chunk_text("", 5, &chars()).unwrap(), Vec::<String>::new());
    }

    #[test]
    fn hard_splits_happen_only_without_usable_boundaries() {
        // Budget fits each sentence, so no chunk may end mid-word.
        let text = "First sentence here. Second sentence here. Third one here.";
        let chunks = chunk_text(text, 25, &chars()).unwrap();
        assert_eq!(chunks.concat(), text);
        for c in &chunks {
            assert!(
                c.ends_with(". ") || c.ends_with('.'),
                "chunk {c:?} does not end at a sentence boundary"
            );
        }
    }
}
