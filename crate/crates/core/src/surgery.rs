//! Hybrid checkpoint construction by layer transplantation: replace an
//! inclusive, contiguous window of transformer layers in a *target*
//! checkpoint with the corresponding layers from a *source* checkpoint,
//! and plan ablation sweeps of such windows.
//!
//! Surgery is a raw-byte operation. Tensor payloads are copied verbatim —
//! never decoded or re-encoded — so the hybrid is exactly the piecewise
//! composition of its parents, NaN payloads and unknown dtypes included.
//! Only `Layer(i)` groups are ever replaced; `Pre` and `Post` tensors
//! always come from the target.
//!
//! Each output records its parentage in the `layerswap.target`,
//! `layerswap.source`, and `layerswap.window` metadata keys. A swap
//! *replaces* that namespace rather than appending to it, so the stamp
//! always describes the last operation and repeated surgery cannot grow
//! the header. All other target metadata is preserved.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::store::{
    open_checkpoint, CheckpointHandle, CheckpointWriter, LayerGroup, LayerMap, StoreError,
    TensorSpec, DEFAULT_CHUNK_BYTES,
};

/// Metadata namespace owned by swap outputs.
pub const PROVENANCE_PREFIX: &str = "layerswap.";

// ─────────────────────────────────────────────────────────────────────────
// Types
// ─────────────────────────────────────────────────────────────────────────

/// One planned swap: take `window` (inclusive on both ends) from the
/// source and graft it into the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub target_label: String,
    pub source_label: String,
    /// `(start, end)` layer indices, both included in the transplant.
    pub window: (usize, usize),
    pub output_name: String,
}

impl SwapPlan {
    /// The window in its `start:end` rendering, as used by the CLI and the
    /// `layerswap.window` metadata value.
    pub fn window_str(&self) -> String {
        format!("{}:{}", self.window.0, self.window.1)
    }
}

/// What kind of disagreement a tensor shows between two checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MismatchKind {
    /// Present in one checkpoint, absent from the other.
    Missing { from: Side },
    Shape { target: Vec<u64>, source: Vec<u64> },
    Dtype { target: String, source: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Target,
    Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub tensor: String,
    #[serde(flatten)]
    pub kind: MismatchKind,
}

/// Result of comparing two checkpoint headers tensor by tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, thiserror::Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("checkpoints are incompatible: {} mismatch(es), first on tensor `{}`",
            .report.mismatches.len(),
            .report.mismatches.first().map(|m| m.tensor.as_str()).unwrap_or("?"))]
    Incompatible { report: CompatReport },

    #[error("window {start}:{end} out of range for {num_layers} layers")]
    WindowOutOfRange { start: usize, end: usize, num_layers: usize },

    #[error("invalid sweep: {reason}")]
    BadSweep { reason: String },
}

// ─────────────────────────────────────────────────────────────────────────
// Compatibility
// ─────────────────────────────────────────────────────────────────────────

/// Compare two headers exhaustively: every tensor name must exist on both
/// sides with identical shape and dtype. Pure function of the two headers;
/// findings are reported, never raised.
pub fn validate_compat(target: &CheckpointHandle, source: &CheckpointHandle) -> CompatReport {
    let mut mismatches = Vec::new();
    for (name, t_meta) in target.tensors() {
        match source.tensors().get(name) {
            None => mismatches.push(Mismatch {
                tensor: name.clone(),
                kind: MismatchKind::Missing { from: Side::Source },
            }),
            Some(s_meta) => {
                if s_meta.dtype != t_meta.dtype {
                    mismatches.push(Mismatch {
                        tensor: name.clone(),
                        kind: MismatchKind::Dtype {
                            target: t_meta.dtype.as_str().to_string(),
                            source: s_meta.dtype.as_str().to_string(),
                        },
                    });
                } else if s_meta.shape != t_meta.shape {
                    mismatches.push(Mismatch {
                        tensor: name.clone(),
                        kind: MismatchKind::Shape {
                            target: t_meta.shape.clone(),
                            source: s_meta.shape.clone(),
                        },
                    });
                }
            }
        }
    }
    for name in source.tensor_names() {
        if !target.tensors().contains_key(name) {
            mismatches.push(Mismatch {
                tensor: name.to_string(),
                kind: MismatchKind::Missing { from: Side::Target },
            });
        }
    }
    CompatReport { compatible: mismatches.is_empty(), mismatches }
}

// ─────────────────────────────────────────────────────────────────────────
// Swap
// ─────────────────────────────────────────────────────────────────────────

/// Write the hybrid of `target` and `source` described by `plan` to
/// `out_path` and return a handle to it.
///
/// Every tensor in `Layer(i)` with `start ≤ i ≤ end` is copied verbatim
/// from the source; every other tensor — `Pre` and `Post` included — is
/// copied verbatim from the target. The output is in canonical container
/// form, with the target's metadata plus a fresh provenance stamp.
pub fn swap_layers(
    target: &CheckpointHandle,
    source: &CheckpointHandle,
    plan: &SwapPlan,
    layer_map: &LayerMap,
    out_path: impl AsRef<Path>,
) -> Result<CheckpointHandle, SurgeryError> {
    let report = validate_compat(target, source);
    if !report.compatible {
        return Err(SurgeryError::Incompatible { report });
    }
    let (start, end) = plan.window;
    if start > end || end >= layer_map.num_layers {
        return Err(SurgeryError::WindowOutOfRange { start, end, num_layers: layer_map.num_layers });
    }

    let from_source = |name: &str| -> bool {
        matches!(layer_map.group_of(name), Some(LayerGroup::Layer(i)) if start <= i && i <= end)
    };

    // Tensor descriptions come from whichever parent supplies the bytes, so
    // byte lengths stay honest even for opaque dtypes.
    let specs: Vec<TensorSpec> = target
        .tensors()
        .values()
        .map(|t_meta| {
            let meta = if from_source(&t_meta.name) {
                source.tensors().get(&t_meta.name).expect("validated compatible")
            } else {
                t_meta
            };
            TensorSpec {
                name: meta.name.clone(),
                dtype: meta.dtype.clone(),
                shape: meta.shape.clone(),
                byte_len: meta.byte_len(),
            }
        })
        .collect();

    let mut metadata: BTreeMap<String, String> = target
        .metadata()
        .iter()
        .filter(|(k, _)| !k.starts_with(PROVENANCE_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    metadata.insert("layerswap.target".to_string(), plan.target_label.clone());
    metadata.insert("layerswap.source".to_string(), plan.source_label.clone());
    metadata.insert("layerswap.window".to_string(), plan.window_str());

    let mut writer = CheckpointWriter::create(out_path.as_ref(), &specs, &metadata)?;
    for spec in &specs {
        let origin = if from_source(&spec.name) { source } else { target };
        let mut chunks = origin.byte_chunks(&spec.name, DEFAULT_CHUNK_BYTES)?;
        while let Some(chunk) = chunks.next_chunk()? {
            writer.append(&spec.name, chunk)?;
        }
    }
    writer.finish()?;

    Ok(open_checkpoint(out_path)?)
}

// ─────────────────────────────────────────────────────────────────────────
// Sweep planning
// ─────────────────────────────────────────────────────────────────────────

/// Enumerate swap windows of `width` layers over a `num_layers`-deep stack.
///
/// Exactly one of `starts` (explicit window starts) or `stride` must be
/// given. With a stride, starts run 0, stride, 2·stride, … as long as the
/// window fits, plus a final start clamped so the last window ends at
/// `num_layers − 1` when the strided sequence stops short of it.
pub fn plan_sweep(
    num_layers: usize,
    width: usize,
    starts: Option<&[usize]>,
    stride: Option<usize>,
    target_label: &str,
    source_label: &str,
) -> Result<Vec<SwapPlan>, SurgeryError> {
    if width == 0 || width > num_layers {
        return Err(SurgeryError::BadSweep {
            reason: format!("width {width} out of range for {num_layers} layers"),
        });
    }
    let last_start = num_layers - width;
    let starts: Vec<usize> = match (starts, stride) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(SurgeryError::BadSweep {
                reason: "give exactly one of explicit starts or a stride".to_string(),
            })
        }
        (Some(explicit), None) => {
            if explicit.is_empty() {
                return Err(SurgeryError::BadSweep { reason: "empty starts list".to_string() });
            }
            for &s in explicit {
                if s > last_start {
                    return Err(SurgeryError::BadSweep {
                        reason: format!(
                            "start {s} puts the window past layer {} (last valid start is {last_start})",
                            num_layers - 1
                        ),
                    });
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for &s in explicit {
                if !seen.insert(s) {
                    return Err(SurgeryError::BadSweep { reason: format!("duplicate start {s}") });
                }
            }
            explicit.to_vec()
        }
        (None, Some(stride)) => {
            if stride == 0 {
                return Err(SurgeryError::BadSweep { reason: "stride must be positive".to_string() });
            }
            let mut v: Vec<usize> = (0..=last_start).step_by(stride).collect();
            // Flush the final window to the top of the stack if the strided
            // sequence stopped short of it.
            if *v.last().expect("start 0 always fits") != last_start {
                v.push(last_start);
            }
            v
        }
    };

    Ok(starts
        .into_iter()
        .map(|start| {
            let end = start + width - 1;
            SwapPlan {
                target_label: target_label.to_string(),
                source_label: source_label.to_string(),
                window: (start, end),
                output_name: format!("{target_label}-swap-{source_label}-L{start}-L{end}.safetensors"),
            }
        })
        .collect())
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────
