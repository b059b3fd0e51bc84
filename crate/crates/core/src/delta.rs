//! Streaming weight-delta statistics across a set of fine-tuned
//! checkpoints sharing one base.
//!
//! For specialists `a = 1..N` and a base checkpoint, the per-group delta is
//! `δ_a = θ_a − θ_base`, flattened over every tensor in the group. This
//! module computes, per group:
//!
//! * the N×N cosine matrix between deltas and its strict-upper-triangle
//!   mean (the mean pairwise alignment),
//! * the N×N Gram matrix `G[i][j] = ⟨δ_i, δ_j⟩` and its eigenvalue
//!   spectrum. Because the nonzero eigenvalues of `G` are exactly the
//!   squared singular values of the N×P delta-stack matrix, the top-1
//!   variance share `σ₁²/Σσ_k²` is available from N×N work and O(N²)
//!   memory — the N rows are never materialized side by side,
//! * per-specialist delta L2 norms.
//!
//! Every accumulation runs in `f64` in a fixed order: tensors sorted by
//! name, elements in storage order, summed in fixed 1024-element blocks
//! that are combined by pairwise (tree) summation, with per-tensor totals
//! combined the same way. The order is independent of the I/O chunk size
//! and of thread scheduling, so results are bit-identical across runs,
//! chunk sizes, and thread counts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::store::{CheckpointHandle, LayerGroup, LayerMap, StoreError, DEFAULT_CHUNK_BYTES};

/// Fixed accumulation block length, in elements. Deliberately decoupled
/// from the I/O chunk size so that streaming granularity cannot change
/// results.
const ACCUM_BLOCK: usize = 1024;

/// Eigenvalues may round slightly negative; anything not below
/// `-EIG_CLAMP_REL × trace` is clamped to zero, harder negatives are a
/// numerical-breakdown error.
pub const EIG_CLAMP_REL: f64 = 1e-9;

// ─────────────────────────────────────────────────────────────────────────
// Errors
// ─────────────────────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum DeltaError {
    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("need at least two specialists, got {n}")]
    NotEnoughSpecialists { n: usize },

    #[error("duplicate specialist label `{label}`")]
    DuplicateLabel { label: String },

    #[error("group {group} has no tensors")]
    EmptyGroup { group: LayerGroup },

    #[error("tensor `{name}`: {what} in checkpoint `{checkpoint}`")]
    MismatchedTensor { name: String, what: String, checkpoint: String },

    #[error("group {group} is degenerate: no fine-tuning signal (every delta is zero)")]
    Degenerate { group: LayerGroup },

    #[error("group {group}: eigenvalue {value} below the PSD tolerance (trace {trace})")]
    NumericalBreakdown { group: LayerGroup, value: f64, trace: f64 },
}

// ─────────────────────────────────────────────────────────────────────────
// Deterministic pairwise summation
// ─────────────────────────────────────────────────────────────────────────

/// Pairwise (tree) summation with the classic binary-counter scheme: the
/// k-th pushed value only ever combines with partials holding the same
/// number of summands, so the reduction tree — and therefore the rounding —
/// depends only on the input order.
#[derive(Debug, Clone, Default)]
pub struct PairwiseSum {
    /// (tree level, partial sum), levels strictly increasing toward the
    /// bottom of the stack.
    stack: Vec<(u32, f64)>,
}

impl PairwiseSum {
    pub fn push(&mut self, value: f64) {
        let mut level = 0u32;
        let mut sum = value;
        while self.stack.last().is_some_and(|&(l, _)| l == level) {
            let (_, s) = self.stack.pop().unwrap();
            sum += s;
            level += 1;
        }
        self.stack.push((level, sum));
    }

    /// Combine remaining partials, smallest trees first.
    pub fn total(&self) -> f64 {
        self.stack.iter().rev().fold(0.0, |acc, &(_, s)| acc + s)
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Group accumulation
// ─────────────────────────────────────────────────────────────────────────

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * (2 * n - i + 1) / 2 + (j - i)
}

/// Verify that `name` exists in `other` with the same dtype and shape as in
/// `reference`, and that the dtype decodes numerically.
fn check_tensor(
    reference: &CheckpointHandle,
    other: &CheckpointHandle,
    label: &str,
    name: &str,
) -> Result<(), DeltaError> {
    let want = reference.tensor(name)?;
    let got = other.tensors().get(name).ok_or_else(|| DeltaError::MismatchedTensor {
        name: name.to_string(),
        what: "missing".to_string(),
        checkpoint: label.to_string(),
    })?;
    if got.dtype != want.dtype {
        return Err(DeltaError::MismatchedTensor {
            name: name.to_string(),
            what: format!("dtype {} != {}", got.dtype, want.dtype),
            checkpoint: label.to_string(),
        });
    }
    if got.shape != want.shape {
        return Err(DeltaError::MismatchedTensor {
            name: name.to_string(),
            what: format!("shape {:?} != {:?}", got.shape, want.shape),
            checkpoint: label.to_string(),
        });
    }
    if !want.dtype.is_numeric() {
        return Err(StoreError::UnsupportedDtype {
            name: name.to_string(),
            dtype: want.dtype.as_str().to_string(),
        }
        .into());
    }
    Ok(())
}

/// Accumulate the full symmetric matrix `G[i][j] = Σ_p δ_i[p]·δ_j[p]` over
/// every tensor of `group`, streaming all checkpoints in lockstep.
///
/// Each (i, j) entry is accumulated exactly as if it were computed alone,
/// so the result is bit-identical to N(N+1)/2 independent
/// [`accumulate_pair`] runs.
fn accumulate_group(
    specialists: &[&CheckpointHandle],
    base: &CheckpointHandle,
    group: LayerGroup,
    layer_map: &LayerMap,
    chunk_bytes: usize,
) -> Result<Vec<Vec<f64>>, DeltaError> {
    let n = specialists.len();
    let names = layer_map.members(group);
    if names.is_empty() {
        return Err(DeltaError::EmptyGroup { group });
    }
    for name in names {
        for (s, ckpt) in specialists.iter().enumerate() {
            check_tensor(base, ckpt, &format!("specialist {s}"), name)?;
        }
        // Also validates that the base dtype itself is numeric.
        check_tensor(base, base, "base", name)?;
    }

    let pairs = n * (n + 1) / 2;
    let mut group_sums: Vec<PairwiseSum> = vec![PairwiseSum::default(); pairs];

    let mut base_chunk: Vec<f64> = Vec::new();
    let mut spec_chunks: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut deltas: Vec<f64> = vec![0.0; n];

    for name in names {
        let mut base_reader = base.f64_chunks(name, chunk_bytes)?;
        let mut spec_readers = specialists
            .iter()
            .map(|c| c.f64_chunks(name, chunk_bytes))
            .collect::<Result<Vec<_>, _>>()?;

        let mut tensor_sums: Vec<PairwiseSum> = vec![PairwiseSum::default(); pairs];
        let mut block_sums: Vec<f64> = vec![0.0; pairs];
        let mut filled = 0usize;

        while base_reader.next_chunk(&mut base_chunk)? {
            for (reader, chunk) in spec_readers.iter_mut().zip(spec_chunks.iter_mut()) {
                let more = reader.next_chunk(chunk)?;
                debug_assert!(more && chunk.len() == base_chunk.len());
            }
            for (p, &b) in base_chunk.iter().enumerate() {
                for (s, d) in deltas.iter_mut().enumerate() {
                    *d = spec_chunks[s][p] - b;
                }
                let mut k = 0;
                for i in 0..n {
                    let di = deltas[i];
                    for j in i..n {
                        block_sums[k] += di * deltas[j];
                        k += 1;
                    }
                }
                filled += 1;
                if filled == ACCUM_BLOCK {
                    for (sum, acc) in block_sums.iter_mut().zip(tensor_sums.iter_mut()) {
                        acc.push(*sum);
                        *sum = 0.0;
                    }
                    filled = 0;
                }
            }
        }
        if filled > 0 {
            for (sum, acc) in block_sums.iter_mut().zip(tensor_sums.iter_mut()) {
                acc.push(*sum);
                *sum = 0.0;
            }
        }
        for (acc, group_acc) in tensor_sums.iter().zip(group_sums.iter_mut()) {
            group_acc.push(acc.total());
        }
    }

    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = group_sums[upper_index(n, i, j)].total();
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    Ok(gram)
}

/// Accumulate `(⟨δ_a, δ_b⟩, ‖δ_a‖², ‖δ_b‖²)` over every tensor of `group`.
pub fn accumulate_pair(
    ckpt_a: &CheckpointHandle,
    ckpt_b: &CheckpointHandle,
    base: &CheckpointHandle,
    group: LayerGroup,
    layer_map: &LayerMap,
    chunk_bytes: usize,
) -> Result<(f64, f64, f64), DeltaError> {
    let gram = accumulate_group(&[ckpt_a, ckpt_b], base, group, layer_map, chunk_bytes)?;
    Ok((gram[0][1], gram[0][0], gram[1][1]))
}

// ─────────────────────────────────────────────────────────────────────────
// Spectrum
// ─────────────────────────────────────────────────────────────────────────

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations, returned
/// in descending order. Purely sequential and deterministic; intended for
/// the small N×N Gram matrices this module produces.
pub fn symmetric_eigenvalues_desc(matrix: &[Vec<f64>]) -> Vec<f64> {
    let n = matrix.len();
    if n == 0 {
        return Vec::new();
    }
    let idx = |i: usize, j: usize| i * n + j;
    let mut a: Vec<f64> = matrix.iter().flat_map(|row| row.iter().copied()).collect();

    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale > 0.0 {
        for _sweep in 0..64 {
            let off: f64 = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .map(|(i, j)| a[idx(i, j)] * a[idx(i, j)])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n - 1 {
                for q in (p + 1)..n {
                    let apq = a[idx(p, q)];
                    if apq.abs() < 1e-300 {
                        a[idx(p, q)] = 0.0;
                        a[idx(q, p)] = 0.0;
                        continue;
                    }
                    let app = a[idx(p, p)];
                    let aqq = a[idx(q, q)];
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        1.0 / (tau - (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        let akp = a[idx(k, p)];
                        let akq = a[idx(k, q)];
                        let kp = c * akp - s * akq;
                        let kq = s * akp + c * akq;
                        a[idx(k, p)] = kp;
                        a[idx(p, k)] = kp;
                        a[idx(k, q)] = kq;
                        a[idx(q, k)] = kq;
                    }
                    a[idx(p, p)] = app - t * apq;
                    a[idx(q, q)] = aqq + t * apq;
                    a[idx(p, q)] = 0.0;
                    a[idx(q, p)] = 0.0;
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Eigenvalue spectrum (descending) and top-1 share `λ₁/Σλ_k` of a Gram
/// matrix. Slightly negative eigenvalues within `EIG_CLAMP_REL × trace` are
/// clamped to zero; an all-zero Gram is rejected as carrying no signal.
pub fn spectrum_from_gram(
    gram: &[Vec<f64>],
    group: LayerGroup,
) -> Result<(Vec<f64>, f64), DeltaError> {
    let trace: f64 = (0..gram.len()).map(|i| gram[i][i]).sum();
    if trace == 0.0 {
        return Err(DeltaError::Degenerate { group });
    }
    let mut eig = symmetric_eigenvalues_desc(gram);
    for v in eig.iter_mut() {
        if *v < 0.0 {
            if *v >= -EIG_CLAMP_REL * trace {
                *v = 0.0;
            } else {
                return Err(DeltaError::NumericalBreakdown { group, value: *v, trace });
            }
        }
    }
    let total: f64 = eig.iter().sum();
    Ok((eig.clone(), eig[0] / total))
}

/// Delta Gram matrix of a group together with its spectrum and top-1
/// variance share.
pub fn gram_and_share(
    specialists: &[&CheckpointHandle],
    base: &CheckpointHandle,
    group: LayerGroup,
    layer_map: &LayerMap,
    chunk_bytes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64), DeltaError> {
    if specialists.len() < 2 {
        return Err(DeltaError::NotEnoughSpecialists { n: specialists.len() });
    }
    let gram = accumulate_group(specialists, base, group, layer_map, chunk_bytes)?;
    let (eig, share) = spectrum_from_gram(&gram, group)?;
    Ok((gram, eig, share))
}

// ─────────────────────────────────────────────────────────────────────────
// Cosines
// ─────────────────────────────────────────────────────────────────────────

/// Cosine matrix between the group deltas of N specialists, with a warning
/// per zero-norm delta (whose cosine entries are reported as 0).
pub fn cosine_matrix(
    specialists: &[&CheckpointHandle],
    base: &CheckpointHandle,
    group: LayerGroup,
    layer_map: &LayerMap,
    chunk_bytes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<String>), DeltaError> {
    if specialists.len() < 2 {
        return Err(DeltaError::NotEnoughSpecialists { n: specialists.len() });
    }
    let gram = accumulate_group(specialists, base, group, layer_map, chunk_bytes)?;
    Ok(cosines_from_gram(&gram, None))
}

/// Derive the cosine matrix from a Gram matrix. `labels`, when given, makes
/// zero-norm warnings name the specialist instead of its index.
fn cosines_from_gram(gram: &[Vec<f64>], labels: Option<&[String]>) -> (Vec<Vec<f64>>, Vec<String>) {
    let n = gram.len();
    let norms: Vec<f64> = (0..n).map(|i| gram[i][i].sqrt()).collect();
    let mut warnings = Vec::new();
    for (i, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            let who = labels.map_or_else(|| format!("specialist {i}"), |l| format!("`{}`", l[i]));
            warnings.push(format!("zero-norm delta for {who}; its cosines are reported as 0"));
        }
    }
    let mut cos = vec![vec![0.0; n]; n];
    for i in 0..n {
        // The diagonal is exactly 1 by definition wherever the delta is
        // nonzero; computing gram[i][i]/norm²  would only add rounding fuzz.
        cos[i][i] = if norms[i] > 0.0 { 1.0 } else { 0.0 };
        for j in (i + 1)..n {
            let v = if norms[i] > 0.0 && norms[j] > 0.0 {
                gram[i][j] / (norms[i] * norms[j])
            } else {
                0.0
            };
            cos[i][j] = v;
            cos[j][i] = v;
        }
    }
    (cos, warnings)
}

/// Mean of the strict upper triangle — the average pairwise alignment
/// `(1/C(N,2)) Σ_{i<j} cos(δ_i, δ_j)`.
pub fn mean_pairwise_cosine(cosine: &[Vec<f64>]) -> f64 {
    let n = cosine.len();
    debug_assert!(n >= 2);
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine[i][j];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

// ─────────────────────────────────────────────────────────────────────────
// Full-stack analysis
// ─────────────────────────────────────────────────────────────────────────

/// Per-group delta statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaStats {
    /// Which block of the network this record describes.
    #[serde(rename = "group")]
    pub layer: LayerGroup,
    /// Specialist labels, in row order. Serialized once at the report
    /// level rather than per record.
    #[serde(skip_serializing, default)]
    pub labels: Vec<String>,
    pub cosine_matrix: Vec<Vec<f64>>,
    pub mean_pairwise_cosine: f64,
    pub gram: Vec<Vec<f64>>,
    /// Descending; equal to the squared singular values of the delta stack.
    pub eigenvalues: Vec<f64>,
    pub top1_share: f64,
    /// Per-specialist delta L2 norms, in label order.
    pub delta_norms: Vec<f64>,
    pub warnings: Vec<String>,
}

impl DeltaStats {
    /// Mean of `delta_norms` across specialists.
    pub fn norm_mean(&self) -> f64 {
        self.delta_norms.iter().sum::<f64>() / self.delta_norms.len() as f64
    }

    /// Sample standard deviation of `delta_norms` across specialists.
    pub fn norm_std(&self) -> f64 {
        let n = self.delta_norms.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.norm_mean();
        let ss: f64 = self.delta_norms.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Whole-network analysis: one [`DeltaStats`] per non-empty group, in
/// network order (Pre, each layer, Post).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub labels: Vec<String>,
    pub layers: Vec<DeltaStats>,
}

/// Compute [`DeltaStats`] for every non-empty group of `layer_map`.
///
/// Specialists are sorted by label, so row order is independent of argument
/// order. Groups are processed on the current rayon thread pool; because
/// each group's accumulation is fully deterministic on its own, the report
/// is bit-identical for any thread count.
pub fn analyze_stack(
    specialists: &[(String, &CheckpointHandle)],
    base: &CheckpointHandle,
    layer_map: &LayerMap,
    chunk_bytes: usize,
) -> Result<AnalysisReport, DeltaError> {
    if specialists.len() < 2 {
        return Err(DeltaError::NotEnoughSpecialists { n: specialists.len() });
    }
    let mut ordered: Vec<(String, &CheckpointHandle)> =
        specialists.iter().map(|(l, c)| (l.clone(), *c)).collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    let mut seen = BTreeSet::new();
    for (label, _) in &ordered {
        if !seen.insert(label.clone()) {
            return Err(DeltaError::DuplicateLabel { label: label.clone() });
        }
    }
    let labels: Vec<String> = ordered.iter().map(|(l, _)| l.clone()).collect();
    let handles: Vec<&CheckpointHandle> = ordered.iter().map(|(_, c)| *c).collect();

    let groups: Vec<LayerGroup> = layer_map.groups().collect();
    use rayon::prelude::*;
    let layers: Vec<DeltaStats> = groups
        .par_iter()
        .map(|&group| -> Result<DeltaStats, DeltaError> {
            let gram = accumulate_group(&handles, base, group, layer_map, chunk_bytes)?;
            let (eigenvalues, top1_share) = spectrum_from_gram(&gram, group)?;
            let (cosine, warnings) = cosines_from_gram(&gram, Some(&labels));
            let mean = mean_pairwise_cosine(&cosine);
            let delta_norms: Vec<f64> = (0..gram.len()).map(|i| gram[i][i].sqrt()).collect();
            Ok(DeltaStats {
                layer: group,
                labels: labels.clone(),
                cosine_matrix: cosine,
                mean_pairwise_cosine: mean,
                gram,
                eigenvalues,
                top1_share,
                delta_norms,
                warnings,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(AnalysisReport { labels, layers })
}

/// Render a report as CSV: `layer,c_bar,s,norm_mean,norm_std`, one row per
/// group in network order.
pub fn report_to_csv(report: &AnalysisReport) -> String {
    let mut out = String::from("layer,c_bar,s,norm_mean,norm_std\n");
    for rec in &report.layers {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.layer,
            rec.mean_pairwise_cosine,
            rec.top1_share,
            rec.norm_mean(),
            rec.norm_std()
        ));
    }
    out
}

/// Re-export of the default I/O chunk size, for callers that do not
/// configure one.
pub const DEFAULT_CHUNK: usize = DEFAULT_CHUNK_BYTES;

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────
