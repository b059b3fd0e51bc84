//! Character n-gram language identification and trace fidelity.
//!
//! A language is represented by a rank profile: the K most frequent
//! character n-grams (n = 1..4) of its training corpus, ranked by
//! frequency. A document is classified by building its own rank profile
//! and summing rank displacements against each language profile (the
//! out-of-place distance), with a fixed penalty for n-grams the profile
//! does not contain. The label with the smallest distance wins; ties go to
//! the lexicographically smallest label, so the order in which profiles
//! are supplied never matters.
//!
//! Fidelity of a set of generated traces is the fraction classified as the
//! target language, with traces that normalize to nothing counted under
//! the reserved `und` label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Smallest n-gram length used by profiles.
pub const NGRAM_MIN: usize = 1;
/// Largest n-gram length used by profiles.
pub const NGRAM_MAX: usize = 4;
/// Default profile size (and absence penalty).
pub const DEFAULT_PROFILE_SIZE: usize = 300;

/// Label reserved for traces that cannot be classified.
pub const UNDETERMINED: &str = "und";

#[derive(Debug, thiserror::Error)]
pub enum LidError {
    #[error("no signal: text is empty after normalization")]
    NoSignal,

    #[error("need at least {need} labels, got {got}")]
    NotEnoughLabels { need: usize, got: usize },

    #[error("corpus for label `{label}` is empty after normalization")]
    EmptyCorpus { label: String },

    #[error("duplicate label `{label}`")]
    DuplicateLabel { label: String },

    #[error("label `{label}` is reserved")]
    ReservedLabel { label: String },

    #[error("profile size must be at least 1")]
    BadProfileSize,

    #[error("no profiles supplied")]
    NoProfiles,

    #[error("target `{target}` has no profile")]
    UnknownTarget { target: String },

    #[error("no traces to score")]
    EmptyTraces,

    #[error("malformed profile store: {reason}")]
    BadProfileStore { reason: String },

    #[error("trace file io: {0}")]
    Io(#[from] std::io::Error),

    #[error("trace line {line}: {reason}")]
    BadTrace { line: usize, reason: String },
}

// ─────────────────────────────────────────────────────────────────────────
// Normalization and n-grams
// ─────────────────────────────────────────────────────────────────────────

/// Normalize text for profiling: Unicode NFC, keep letters and spaces
/// only, case-fold cased scripts (a no-op for CJK), collapse whitespace
/// runs to single spaces, trim the ends.
pub fn normalize(text: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for ch in text.nfc() {
        if ch.is_whitespace() {
            pending_space = true;
        } else if ch.is_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        }
    }
    out
}

fn ngram_counts_into(normalized: &str, counts: &mut BTreeMap<String, u64>) {
    let chars: Vec<char> = normalized.chars().collect();
    for n in NGRAM_MIN..=NGRAM_MAX {
        if chars.len() < n {
            break;
        }
        for window in chars.windows(n) {
            *counts.entry(window.iter().collect()).or_insert(0) += 1;
        }
    }
}

/// Rank n-grams by count (descending), ties broken lexicographically, and
/// keep the top `k`.
fn rank_top_k(counts: BTreeMap<String, u64>, k: usize) -> Vec<(String, usize)> {
    let mut items: Vec<(String, u64)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.truncate(k);
    items.into_iter().enumerate().map(|(rank, (g, _))| (g, rank)).collect()
}

// ─────────────────────────────────────────────────────────────────────────
// Profiles
// ─────────────────────────────────────────────────────────────────────────

/// A language's rank profile: its top n-grams in rank order. The profile
/// length doubles as the out-of-place penalty for absent n-grams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageProfile {
    pub label: String,
    /// `(ngram, rank)` with ranks exactly `0..len`.
    entries: Vec<(String, usize)>,
    index: BTreeMap<String, usize>,
}

impl LanguageProfile {
    fn from_entries(label: String, entries: Vec<(String, usize)>) -> LanguageProfile {
        let index = entries.iter().map(|(g, r)| (g.clone(), *r)).collect();
        LanguageProfile { label, entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank_of(&self, ngram: &str) -> Option<usize> {
        self.index.get(ngram).copied()
    }

    /// Entries in rank order.
    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }
}

/// Train one profile per label from `corpora` (label → documents).
/// N-grams never span document boundaries; counts are summed per label.
pub fn train_profiles(
    corpora: &BTreeMap<String, Vec<String>>,
    k: usize,
) -> Result<Vec<LanguageProfile>, LidError> {
    if k == 0 {
        return Err(LidError::BadProfileSize);
    }
    if corpora.len() < 2 {
        return Err(LidError::NotEnoughLabels { need: 2, got: corpora.len() });
    }
    let mut profiles = Vec::with_capacity(corpora.len());
    for (label, docs) in corpora {
        if label == UNDETERMINED {
            return Err(LidError::ReservedLabel { label: label.clone() });
        }
        let mut counts = BTreeMap::new();
        for doc in docs {
            ngram_counts_into(&normalize(doc), &mut counts);
        }
        if counts.is_empty() {
            return Err(LidError::EmptyCorpus { label: label.clone() });
        }
        profiles.push(LanguageProfile::from_entries(label.clone(), rank_top_k(counts, k)));
    }
    Ok(profiles)
}

// ─────────────────────────────────────────────────────────────────────────
// Classification
// ─────────────────────────────────────────────────────────────────────────

/// Outcome of classifying one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    /// Out-of-place distance to every profile.
    pub distances: BTreeMap<String, u64>,
}

/// Classify a document against a set of profiles by out-of-place distance.
pub fn classify(text: &str, profiles: &[LanguageProfile]) -> Result<Classification, LidError> {
    if profiles.is_empty() {
        return Err(LidError::NoProfiles);
    }
    let normalized = normalize(text);
    if normalized.is_empty() {
        return Err(LidError::NoSignal);
    }
    let doc_k = profiles.iter().map(LanguageProfile::len).max().unwrap();
    let mut counts = BTreeMap::new();
    ngram_counts_into(&normalized, &mut counts);
    let doc_profile = rank_top_k(counts, doc_k);

    let mut distances = BTreeMap::new();
    for profile in profiles {
        let penalty = profile.len() as u64;
        let mut dist = 0u64;
        for (ngram, doc_rank) in &doc_profile {
            dist += match profile.rank_of(ngram) {
                Some(rank) => (*doc_rank as i64 - rank as i64).unsigned_abs(),
                None => penalty,
            };
        }
        distances.insert(profile.label.clone(), dist);
    }
    // BTreeMap iteration is label-ascending, so keeping the first strict
    // minimum makes ties label-lexicographic regardless of profile order.
    let label = distances
        .iter()
        .min_by_key(|(_, d)| **d)
        .map(|(l, _)| l.clone())
        .expect("at least one profile");
    Ok(Classification { label, distances })
}

// ─────────────────────────────────────────────────────────────────────────
// Fidelity
// ─────────────────────────────────────────────────────────────────────────

/// Share of traces classified as the target language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub target: String,
    pub total: usize,
    /// Classification counts per label, including the reserved `und`.
    pub per_label_counts: BTreeMap<String, usize>,
    /// `per_label_counts[target] / total`.
    pub fidelity: f64,
}

/// Classify every trace independently and report the fraction labelled
/// `target`. Traces that carry no signal are counted under `und`.
/// `prefix_chars`, when given, scores only the first so many characters of
/// each trace instead of the whole text.
pub fn fidelity_with_prefix(
    traces: &[String],
    target: &str,
    profiles: &[LanguageProfile],
    prefix_chars: Option<usize>,
) -> Result<FidelityReport, LidError> {
    if traces.is_empty() {
        return Err(LidError::EmptyTraces);
    }
    if profiles.is_empty() {
        return Err(LidError::NoProfiles);
    }
    if !profiles.iter().any(|p| p.label == target) {
        return Err(LidError::UnknownTarget { target: target.to_string() });
    }

    use rayon::prelude::*;
    let labels: Vec<String> = traces
        .par_iter()
        .map(|trace| {
            let text: String = match prefix_chars {
                Some(n) => trace.chars().take(n).collect(),
                None => trace.clone(),
            };
            match classify(&text, profiles) {
                Ok(c) => c.label,
                Err(LidError::NoSignal) => UNDETERMINED.to_string(),
                // Profile-set errors were ruled out above.
                Err(_) => UNDETERMINED.to_string(),
            }
        })
        .collect();

    let mut per_label_counts: BTreeMap<String, usize> = BTreeMap::new();
    for label in labels {
        *per_label_counts.entry(label).or_insert(0) += 1;
    }
    let hits = per_label_counts.get(target).copied().unwrap_or(0);
    Ok(FidelityReport {
        target: target.to_string(),
        total: traces.len(),
        per_label_counts,
        fidelity: hits as f64 / traces.len() as f64,
    })
}

/// [`fidelity_with_prefix`] over whole traces.
pub fn fidelity(
    traces: &[String],
    target: &str,
    profiles: &[LanguageProfile],
) -> Result<FidelityReport, LidError> {
    fidelity_with_prefix(traces, target, profiles, None)
}

// ─────────────────────────────────────────────────────────────────────────
// Trace and profile stores
// ─────────────────────────────────────────────────────────────────────────

/// Read traces from JSON lines of `{"text": …}`. Blank lines are skipped;
/// anything else malformed is an error naming its 1-based line.
pub fn read_traces_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<String>, LidError> {
    #[derive(Deserialize)]
    struct TraceLine {
        text: String,
    }
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| LidError::BadTrace { line: idx + 1, reason: e.to_string() })?;
        traces.push(parsed.text);
    }
    Ok(traces)
}

/// Serialize profiles as `{label: [[ngram, rank], …]}` with entries in
/// rank order.
pub fn profiles_to_json(profiles: &[LanguageProfile]) -> String {
    let store: BTreeMap<&str, &[(String, usize)]> =
        profiles.iter().map(|p| (p.label.as_str(), p.entries())).collect();
    serde_json::to_string_pretty(&store).expect("profile store serializes")
}

/// Parse and validate a profile store: ranks per label must be exactly
/// `0..len` with no duplicate n-grams.
pub fn profiles_from_json(json: &str) -> Result<Vec<LanguageProfile>, LidError> {
    let store: BTreeMap<String, Vec<(String, usize)>> = serde_json::from_str(json)
        .map_err(|e| LidError::BadProfileStore { reason: e.to_string() })?;
    let mut profiles = Vec::with_capacity(store.len());
    for (label, mut entries) in store {
        if label == UNDETERMINED {
            return Err(LidError::ReservedLabel { label });
        }
        entries.sort_by_key(|(_, rank)| *rank);
        for (want, (ngram, rank)) in entries.iter().enumerate() {
            if *rank != want {
                return Err(LidError::BadProfileStore {
                    reason: format!("label `{label}`: ranks are not 0..{} (saw {rank})", entries.len()),
                });
            }
            if ngram.is_empty() {
                return Err(LidError::BadProfileStore {
                    reason: format!("label `{label}`: empty n-gram at rank {rank}"),
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (ngram, _) in &entries {
            if !seen.insert(ngram.clone()) {
                return Err(LidError::BadProfileStore {
                    reason: format!("label `{label}`: duplicate n-gram `{ngram}`"),
                });
            }
        }
        if entries.is_empty() {
            return Err(LidError::BadProfileStore { reason: format!("label `{label}` is empty") });
        }
        profiles.push(LanguageProfile::from_entries(label, entries));
    }
    if profiles.is_empty() {
        return Err(LidError::BadProfileStore { reason: "store holds no profiles".to_string() });
    }
    Ok(profiles)
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn corpora(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(label, docs)| {
                (label.to_string(), docs.iter().map(|d| d.to_string()).collect())
            })
            .collect()
    }

    #[test]
    fn normalization_keeps_letters_and_single_spaces() {
        assert_eq!(normalize("  Hello,   World! 42 "), "hello world");
        assert_eq!(normalize("Größe\tMAẞ"), "größe maß");
        assert_eq!(normalize("中文 text"), "中文 text");
        assert_eq!(normalize("1234 !?"), "");
        // NFC: decomposed e + combining acute folds into é.
        assert_eq!(normalize("Cafe\u{0301}"), "café");
    }

    #[test]
    fn profile_of_aaaa_ranks_by_count() {
        // counts: "a"=4, "aa"=3, "aaa"=2, "aaaa"=1 → top-3 by count.
        let c = corpora(&[("xx", &["aaaa"]), ("yy", &["zzzz"])]);
        let profiles = train_profiles(&c, 3).unwrap();
        let xx = profiles.iter().find(|p| p.label == "xx").unwrap();
        assert_eq!(
            xx.entries(),
            &[("a".to_string(), 0), ("aa".to_string(), 1), ("aaa".to_string(), 2)]
        );
    }

    #[test]
    fn disjoint_alphabets_share_no_ngrams() {
        let c = corpora(&[("aa", &["ababbaabba"]), ("bb", &["xyxyyxxyyx"])]);
        let profiles = train_profiles(&c, 50).unwrap();
        let a = &profiles[0];
        let b = &profiles[1];
        for (g, _) in a.entries() {
            assert!(b.rank_of(g).is_none(), "shared n-gram {g:?}");
        }
    }

    #[test]
    fn hand_computed_out_of_place_distance() {
        // Profiles from "ab" and "xy" with K=3 rank all n-grams with count
        // 1, so ties are lexicographic: en = [a, ab, b], xx = [x, xy, y].
        let c = corpora(&[("en", &["ab"]), ("xx", &["xy"])]);
        let profiles = train_profiles(&c, 3).unwrap();

        // Doc "ba" profiles as [a:0, b:1, ba:2].
        // vs en: |0-0| + |1-2| + penalty(3) = 4. vs xx: 3·3 = 9.
        let got = classify("ba", &profiles).unwrap();
        assert_eq!(got.label, "en");
        assert_eq!(got.distances["en"], 4);
        assert_eq!(got.distances["xx"], 9);

        // A verbatim training document has distance 0 to its own label.
        let got = classify("ab", &profiles).unwrap();
        assert_eq!(got.label, "en");
        assert_eq!(got.distances["en"], 0);
    }

    #[test]
    fn ties_go_to_the_lexicographically_smaller_label() {
        // Identical corpora → identical profiles → equal distances.
        let c = corpora(&[("zz", &["abc abc"]), ("aa", &["abc abc"])]);
        let profiles = train_profiles(&c, 10).unwrap();
        let got = classify("abc", &profiles).unwrap();
        assert_eq!(got.distances["aa"], got.distances["zz"]);
        assert_eq!(got.label, "aa");

        // Profile order must not matter.
        let mut reversed = profiles.clone();
        reversed.reverse();
        assert_eq!(classify("abc", &reversed).unwrap().label, "aa");
    }

    #[test]
    fn majority_signal_wins_in_mixed_documents() {
        let c = corpora(&[("aa", &["ababa babab abbab"]), ("xx", &["xyxyx yxyxy xyyxy"])]);
        let profiles = train_profiles(&c, 30).unwrap();
        // 90% language-a characters, 10% language-x.
        let doc = "ababab ababab ababab ababab ababab xy";
        let got = classify(doc, &profiles).unwrap();
        assert_eq!(got.label, "aa");
        assert!(got.distances["aa"] < got.distances["xx"]);
    }

    #[test]
    fn empty_text_has_no_signal() {
        let c = corpora(&[("aa", &["abab"]), ("xx", &["xyxy"])]);
        let profiles = train_profiles(&c, 10).unwrap();
        assert!(matches!(classify("", &profiles), Err(LidError::NoSignal)));
        assert!(matches!(classify("42 + 7 = ?", &profiles), Err(LidError::NoSignal)));
    }

    #[test]
    fn training_validates_inputs() {
        assert!(matches!(
            train_profiles(&corpora(&[("aa", &["x"])]), 10),
            Err(LidError::NotEnoughLabels { .. })
        ));
        assert!(matches!(
            train_profiles(&corpora(&[("aa", &["abab"]), ("xx", &["123"])]), 10),
            Err(LidError::EmptyCorpus { .. })
        ));
        assert!(matches!(
            train_profiles(&corpora(&[("aa", &["abab"]), ("und", &["xyxy"])]), 10),
            Err(LidError::ReservedLabel { .. })
        ));
        assert!(matches!(
            train_profiles(&corpora(&[("aa", &["abab"]), ("xx", &["xyxy"])]), 0),
            Err(LidError::BadProfileSize)
        ));
    }

    #[test]
    fn fidelity_counts_und_and_matches_hand_fractions() {
        let c = corpora(&[("aa", &["ababa abbab babba"]), ("xx", &["xyxyx yxxyx xyyxy"])]);
        let profiles = train_profiles(&c, 30).unwrap();
        let traces = vec![
            "ababab abba".to_string(),
            "abab baba".to_string(),
            "xyxy yxyx".to_string(),
            "???".to_string(), // no signal → und
        ];
        let report = fidelity(&traces, "aa", &profiles).unwrap();
        assert_eq!(report.total, 4);
        assert_eq!(report.per_label_counts["aa"], 2);
        assert_eq!(report.per_label_counts["xx"], 1);
        assert_eq!(report.per_label_counts[UNDETERMINED], 1);
        assert_eq!(report.fidelity, 0.5);
        let total: usize = report.per_label_counts.values().sum();
        assert_eq!(total, report.total);

        // Replacing a non-target trace with a target one never lowers it.
        let mut better = traces.clone();
        better[2] = "ababab".to_string();
        let improved = fidelity(&better, "aa", &profiles).unwrap();
        assert!(improved.fidelity >= report.fidelity);

        assert!(matches!(
            fidelity(&traces, "zz", &profiles),
            Err(LidError::UnknownTarget { .. })
        ));
        assert!(matches!(fidelity(&[], "aa", &profiles), Err(LidError::EmptyTraces)));
    }

    #[test]
    fn prefix_scoring_uses_only_the_leading_characters() {
        let c = corpora(&[("aa", &["ababa abbab"]), ("xx", &["xyxyx yxxyx"])]);
        let profiles = train_profiles(&c, 30).unwrap();
        // Starts in language aa, drifts into xx.
        let trace = "ababab abab xyxy xyxy xyxy xyxy xyxy xyxy".to_string();
        let whole = fidelity(&[trace.clone()], "xx", &profiles).unwrap();
        let prefix = fidelity_with_prefix(&[trace], "xx", &profiles, Some(11)).unwrap();
        assert_eq!(whole.fidelity, 1.0);
        assert_eq!(prefix.fidelity, 0.0);
    }

    #[test]
    fn profile_store_round_trips_and_validates() {
        let c = corpora(&[("en", &["the cat sat"]), ("fr", &["le chat dort"])]);
        let profiles = train_profiles(&c, 25).unwrap();
        let json = profiles_to_json(&profiles);
        let loaded = profiles_from_json(&json).unwrap();
        assert_eq!(loaded, profiles);

        // Ranks with a gap are rejected.
        let bad = r#"{"en": [["a", 0], ["b", 2]]}"#;
        assert!(matches!(profiles_from_json(bad), Err(LidError::BadProfileStore { .. })));
        // Duplicate ranks are rejected.
        let bad = r#"{"en": [["a", 0], ["b", 0]]}"#;
        assert!(matches!(profiles_from_json(bad), Err(LidError::BadProfileStore { .. })));
        let bad = r#"{"und": [["a", 0]]}"#;
        assert!(matches!(profiles_from_json(bad), Err(LidError::ReservedLabel { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpora(&[("en", &["the quick brown fox", "jumps over"]), ("de", &["der schnelle fuchs"])]);
        let a = train_profiles(&c, 100).unwrap();
        let b = train_profiles(&c, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(profiles_to_json(&a), profiles_to_json(&b));
    }

    #[test]
    fn trace_files_parse_line_by_line() {
        let input = "{\"text\": \"bonjour\"}\n\n{\"text\": \"\", \"extra\": 1}\n";
        let traces = read_traces_jsonl(input.as_bytes()).unwrap();
        assert_eq!(traces, vec!["bonjour".to_string(), String::new()]);

        let err = read_traces_jsonl("{\"text\": \"ok\"}\nnot json\n".as_bytes()).unwrap_err();
        match err {
            LidError::BadTrace { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }
}
