//! Single-file tensor containers: parsing, canonical writing, streaming
//! reads, and grouping of tensor names into pre / layer / post blocks.
//!
//! Container layout:
//!
//! ```text
//! ┌────────────────┬──────────────────────────┬─────────────────────────┐
//! │ header length  │ header (UTF-8 JSON)      │ payload (raw tensor     │
//! │ u64, little-   │ {"__metadata__": {...},  │ bytes, concatenated)    │
//! │ endian, 8 B    │  "<name>": {"dtype":...,  │                         │
//! │                │   "shape": [...],         │                         │
//! │                │   "data_offsets": [b,e]}} │                         │
//! └────────────────┴──────────────────────────┴─────────────────────────┘
//! ```
//!
//! `data_offsets` are relative to the start of the payload region. The
//! canonical writer produced by this module emits the header with keys in
//! lexicographic order (`__metadata__` first when present, then tensor
//! names), packs payload bytes contiguously in sorted-name order with no
//! padding, and is byte-for-byte deterministic: rewriting a parsed
//! container reproduces it exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Upper bound on the JSON header, to reject absurd length prefixes
/// before attempting an allocation.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Default streaming chunk size in bytes. Any chunk size yields identical
/// numeric results downstream (see `delta`); this only bounds peak memory.
pub const DEFAULT_CHUNK_BYTES: usize = 4 * 1024 * 1024;

// ─────────────────────────────────────────────────────────────────────────
// Errors
// ─────────────────────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: malformed header length {len} (file is {file_len} bytes)")]
    BadHeaderLen { path: PathBuf, len: u64, file_len: u64 },

    #[error("{path}: header is not valid JSON at byte {position}: {reason}")]
    BadHeaderJson { path: PathBuf, position: u64, reason: String },

    #[error("tensor `{name}`: {reason}")]
    BadTensorEntry { name: String, reason: String },

    #[error(
        "tensor `{name}`: size mismatch: expected {expected} bytes, data_offsets [{begin}, {end}] hold {actual}"
    )]
    SizeMismatch { name: String, expected: u64, actual: u64, begin: u64, end: u64 },

    #[error(
        "tensor `{name}`: data_offsets [{begin}, {end}] fall outside the payload (payload is {payload_len} bytes)"
    )]
    OffsetsOutOfBounds { name: String, begin: u64, end: u64, payload_len: u64 },

    #[error(
        "tensors `{first}` and `{second}` overlap in the payload (byte ranges [{a0}, {a1}] and [{b0}, {b1}])"
    )]
    OverlappingTensors { first: String, second: String, a0: u64, a1: u64, b0: u64, b1: u64 },

    #[error("duplicate tensor name `{name}`")]
    DuplicateTensor { name: String },

    #[error("unknown tensor `{name}`")]
    UnknownTensor { name: String },

    #[error("tensor `{name}`: dtype {dtype} is not supported for numeric decode")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("layer pattern `{pattern}` is invalid: {reason}")]
    BadLayerPattern { pattern: String, reason: String },

    #[error("layer pattern `{pattern}` matched no tensors")]
    NoLayersMatched { pattern: String },

    #[error("layer indices not contiguous: missing layer {missing} (saw indices up to {max_seen})")]
    NonContiguousLayers { missing: usize, max_seen: usize },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Dtypes
// ─────────────────────────────────────────────────────────────────────────

/// Element type of a stored tensor.
///
/// The numeric types (`F32`, `F16`, `BF16`, `F64`) decode exactly to `f64`.
/// `I64` and `Other` round-trip as opaque bytes — surgery copies them, but
/// numeric reads reject them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
    F64,
    I64,
    /// Any dtype string this module does not interpret, preserved verbatim.
    Other(String),
}

impl Dtype {
    pub fn parse(s: &str) -> Dtype {
        match s {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "F64" => Dtype::F64,
            "I64" => Dtype::I64,
            other => Dtype::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F64 => "F64",
            Dtype::I64 => "I64",
            Dtype::Other(s) => s,
        }
    }

    /// Bytes per element, when known.
    pub fn element_size(&self) -> Option<u64> {
        match self {
            Dtype::F16 | Dtype::BF16 => Some(2),
            Dtype::F32 => Some(4),
            Dtype::F64 | Dtype::I64 => Some(8),
            Dtype::Other(_) => None,
        }
    }

    /// Whether values of this dtype decode exactly into `f64`.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F16 | Dtype::BF16 | Dtype::F64)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decode a raw IEEE 754 binary16 bit pattern. Every half-precision value
/// (including subnormals, signed zero, and infinities) is exactly
/// representable in `f64`, so this is lossless.
pub fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0f64 } else { 1.0f64 };
    let exp = (bits >> 10) & 0x1f;
    let frac = (bits & 0x03ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        0x1f => {
            if frac == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e as i32 - 15),
    }
}

/// Decode a bfloat16 bit pattern. bfloat16 is a truncated `f32`, so
/// widening the bits back is exact.
pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

// ─────────────────────────────────────────────────────────────────────────
// Handle and metadata
// ─────────────────────────────────────────────────────────────────────────

/// Description of one stored tensor, as parsed from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    /// `[begin, end)` byte range relative to the payload region.
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// An opened container. Immutable after `open_checkpoint` and safe to share
/// across threads; read operations open the backing file independently, so
/// concurrent reads of the same or distinct tensors never contend on shared
/// state.
#[derive(Debug, Clone)]
pub struct CheckpointHandle {
    path: PathBuf,
    /// Absolute file offset where the payload region begins.
    payload_offset: u64,
    payload_len: u64,
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorMeta>,
}

impl CheckpointHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Total payload size in bytes (everything after the header).
    pub fn payload_len(&self) -> u64 {
        self.payload_len
    }

    /// Tensor descriptions, keyed by name (sorted).
    pub fn tensors(&self) -> &BTreeMap<String, TensorMeta> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorMeta, StoreError> {
        self.tensors.get(name).ok_or_else(|| StoreError::UnknownTensor { name: name.to_string() })
    }

    /// All tensor names in lexicographic order.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Opening
// ─────────────────────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: (u64, u64),
}

/// Parse the container at `path` and validate its header.
///
/// Validation covers the header length prefix, JSON well-formedness, dtype
/// and shape consistency of `data_offsets`, payload bounds, and pairwise
/// non-overlap of tensor byte ranges. The payload itself is not read.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle, StoreError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| StoreError::io(path, e))?.len();

    let mut len_buf = [0u8; 8];
    if file_len < 8 {
        return Err(StoreError::BadHeaderLen { path: path.to_path_buf(), len: 0, file_len });
    }
    file.read_exact(&mut len_buf).map_err(|e| StoreError::io(path, e))?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len > MAX_HEADER_LEN || header_len.checked_add(8).map_or(true, |end| end > file_len)
    {
        return Err(StoreError::BadHeaderLen { path: path.to_path_buf(), len: header_len, file_len });
    }

    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes).map_err(|e| StoreError::io(path, e))?;
    let header_str = std::str::from_utf8(&header_bytes).map_err(|e| StoreError::BadHeaderJson {
        path: path.to_path_buf(),
        position: 8 + e.valid_up_to() as u64,
        reason: "invalid UTF-8".to_string(),
    })?;

    let raw: serde_json::Map<String, serde_json::Value> = serde_json::from_str(header_str)
        .map_err(|e| StoreError::BadHeaderJson {
            path: path.to_path_buf(),
            // serde_json reports 1-based columns; headers are single-line.
            position: 8 + e.column().saturating_sub(1) as u64,
            reason: e.to_string(),
        })?;

    let payload_offset = 8 + header_len;
    let payload_len = file_len - payload_offset;

    let mut metadata = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            let map: BTreeMap<String, String> =
                serde_json::from_value(value).map_err(|e| StoreError::BadHeaderJson {
                    path: path.to_path_buf(),
                    position: 8,
                    reason: format!("__metadata__ must map strings to strings: {e}"),
                })?;
            metadata = map;
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value).map_err(|e| {
            StoreError::BadTensorEntry { name: name.clone(), reason: e.to_string() }
        })?;
        let dtype = Dtype::parse(&entry.dtype);
        let (begin, end) = entry.data_offsets;
        if begin > end || end > payload_len {
            return Err(StoreError::OffsetsOutOfBounds { name, begin, end, payload_len });
        }
        if let Some(elem) = dtype.element_size() {
            let count = entry.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or(
                StoreError::BadTensorEntry {
                    name: name.clone(),
                    reason: "shape element count overflows u64".to_string(),
                },
            )?;
            let expected = count.checked_mul(elem).ok_or(StoreError::BadTensorEntry {
                name: name.clone(),
                reason: "shape byte count overflows u64".to_string(),
            })?;
            if end - begin != expected {
                return Err(StoreError::SizeMismatch {
                    name,
                    expected,
                    actual: end - begin,
                    begin,
                    end,
                });
            }
        }
        let meta = TensorMeta { name: name.clone(), dtype, shape: entry.shape, data_offsets: (begin, end) };
        tensors.insert(name, meta);
    }

    // Pairwise non-overlap. Zero-length ranges occupy no bytes and cannot
    // overlap anything.
    let mut ranges: Vec<(&TensorMeta, u64, u64)> = tensors
        .values()
        .filter(|m| m.data_offsets.0 < m.data_offsets.1)
        .map(|m| (m, m.data_offsets.0, m.data_offsets.1))
        .collect();
    ranges.sort_by_key(|&(_, b, e)| (b, e));
    for pair in ranges.windows(2) {
        let (a, a0, a1) = pair[0];
        let (b, b0, b1) = pair[1];
        if b0 < a1 {
            return Err(StoreError::OverlappingTensors {
                first: a.name.clone(),
                second: b.name.clone(),
                a0,
                a1,
                b0,
                b1,
            });
        }
    }

    Ok(CheckpointHandle { path: path.to_path_buf(), payload_offset, payload_len, metadata, tensors })
}

// ─────────────────────────────────────────────────────────────────────────
// Reading
// ─────────────────────────────────────────────────────────────────────────

/// Streaming reader that decodes one tensor into `f64` values in fixed-size
/// chunks, so peak scratch memory is bounded by the chunk size rather than
/// the tensor size.
pub struct F64Chunks {
    file: File,
    path: PathBuf,
    dtype: Dtype,
    remaining_elems: u64,
    elems_per_chunk: usize,
    buf: Vec<u8>,
}

impl F64Chunks {
    /// Decode the next chunk into `out` (cleared first). Returns `false`
    /// once the tensor is exhausted.
    pub fn next_chunk(&mut self, out: &mut Vec<f64>) -> Result<bool, StoreError> {
        out.clear();
        if self.remaining_elems == 0 {
            return Ok(false);
        }
        let n = (self.remaining_elems as usize).min(self.elems_per_chunk);
        let elem_size = self.dtype.element_size().expect("numeric dtype") as usize;
        self.buf.resize(n * elem_size, 0);
        self.file.read_exact(&mut self.buf).map_err(|e| StoreError::io(&self.path, e))?;
        decode_into(&self.dtype, &self.buf, out);
        self.remaining_elems -= n as u64;
        Ok(true)
    }
}

fn decode_into(dtype: &Dtype, bytes: &[u8], out: &mut Vec<f64>) {
    match dtype {
        Dtype::F32 => out.extend(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        ),
        Dtype::F64 => {
            out.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())))
        }
        Dtype::F16 => out.extend(
            bytes.chunks_exact(2).map(|c| f16_to_f64(u16::from_le_bytes(c.try_into().unwrap()))),
        ),
        Dtype::BF16 => out.extend(
            bytes.chunks_exact(2).map(|c| bf16_to_f64(u16::from_le_bytes(c.try_into().unwrap()))),
        ),
        Dtype::I64 | Dtype::Other(_) => unreachable!("callers reject non-numeric dtypes"),
    }
}

/// Streaming reader over a tensor's raw payload bytes.
pub struct ByteChunks {
    file: File,
    path: PathBuf,
    remaining: u64,
    chunk_bytes: usize,
    buf: Vec<u8>,
}

impl ByteChunks {
    /// Read the next raw chunk. Returns `None` once exhausted.
    pub fn next_chunk(&mut self) -> Result<Option<&[u8]>, StoreError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let n = (self.remaining as usize).min(self.chunk_bytes);
        self.buf.resize(n, 0);
        self.file.read_exact(&mut self.buf).map_err(|e| StoreError::io(&self.path, e))?;
        self.remaining -= n as u64;
        Ok(Some(&self.buf))
    }
}

impl CheckpointHandle {
    fn open_at(&self, name: &str) -> Result<(File, &TensorMeta), StoreError> {
        let meta = self.tensor(name)?;
        let mut file = File::open(&self.path).map_err(|e| StoreError::io(&self.path, e))?;
        file.seek(SeekFrom::Start(self.payload_offset + meta.data_offsets.0))
            .map_err(|e| StoreError::io(&self.path, e))?;
        Ok((file, meta))
    }

    /// Stream a numeric tensor as `f64` chunks of at most `chunk_bytes` of
    /// raw input per step.
    pub fn f64_chunks(&self, name: &str, chunk_bytes: usize) -> Result<F64Chunks, StoreError> {
        let (file, meta) = self.open_at(name)?;
        if !meta.dtype.is_numeric() {
            return Err(StoreError::UnsupportedDtype {
                name: name.to_string(),
                dtype: meta.dtype.as_str().to_string(),
            });
        }
        let elem_size = meta.dtype.element_size().unwrap() as usize;
        let elems_per_chunk = (chunk_bytes / elem_size).max(1);
        Ok(F64Chunks {
            file,
            path: self.path.clone(),
            dtype: meta.dtype.clone(),
            remaining_elems: meta.num_elements(),
            elems_per_chunk,
            buf: Vec::new(),
        })
    }

    /// Decode a whole numeric tensor. The raw-byte scratch buffer stays
    /// chunk-sized; only the decoded output grows with the tensor.
    pub fn read_tensor_f64(&self, name: &str) -> Result<Vec<f64>, StoreError> {
        let mut chunks = self.f64_chunks(name, DEFAULT_CHUNK_BYTES)?;
        let meta = self.tensor(name)?;
        let mut out = Vec::with_capacity(meta.num_elements() as usize);
        let mut chunk = Vec::new();
        while chunks.next_chunk(&mut chunk)? {
            out.extend_from_slice(&chunk);
        }
        Ok(out)
    }

    /// Stream a tensor's raw bytes without decoding (any dtype).
    pub fn byte_chunks(&self, name: &str, chunk_bytes: usize) -> Result<ByteChunks, StoreError> {
        let (file, meta) = self.open_at(name)?;
        Ok(ByteChunks {
            file,
            path: self.path.clone(),
            remaining: meta.byte_len(),
            chunk_bytes: chunk_bytes.max(1),
            buf: Vec::new(),
        })
    }

    /// Read a tensor's raw bytes without decoding (any dtype).
    pub fn read_tensor_bytes(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        let meta = self.tensor(name)?;
        let mut out = Vec::with_capacity(meta.byte_len() as usize);
        let mut chunks = self.byte_chunks(name, DEFAULT_CHUNK_BYTES)?;
        while let Some(chunk) = chunks.next_chunk()? {
            out.extend_from_slice(chunk);
        }
        Ok(out)
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Writing
// ─────────────────────────────────────────────────────────────────────────

/// One tensor to be written: name, dtype, shape, and raw little-endian
/// payload bytes.
#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

/// Declaration of a tensor for the streaming writer: everything in
/// [`TensorEntry`] except the bytes themselves.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub byte_len: u64,
}

/// Streaming canonical writer. Declare every tensor up front (so the header
/// can be emitted first), then append payload bytes in sorted-name order.
///
/// Output bytes are a pure function of the declared entries and metadata:
/// entry declaration order does not matter, and rewriting a parsed container
/// reproduces it byte for byte.
pub struct CheckpointWriter {
    out: BufWriter<File>,
    path: PathBuf,
    /// (name, expected byte length) in payload order.
    order: Vec<(String, u64)>,
    current: usize,
    written_in_current: u64,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: &[TensorSpec],
        metadata: &BTreeMap<String, String>,
    ) -> Result<CheckpointWriter, StoreError> {
        let path = path.as_ref();

        let mut sorted: Vec<&TensorSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in sorted.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(StoreError::DuplicateTensor { name: pair[0].name.clone() });
            }
        }
        for spec in &sorted {
            if let Some(elem) = spec.dtype.element_size() {
                let count = spec.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or(
                    StoreError::BadTensorEntry {
                        name: spec.name.clone(),
                        reason: "shape element count overflows u64".to_string(),
                    },
                )?;
                let expected = count * elem;
                if spec.byte_len != expected {
                    return Err(StoreError::SizeMismatch {
                        name: spec.name.clone(),
                        expected,
                        actual: spec.byte_len,
                        begin: 0,
                        end: spec.byte_len,
                    });
                }
            }
        }

        // Offsets are assigned contiguously in sorted-name order, no padding.
        let mut header = String::from("{");
        let mut first = true;
        if !metadata.is_empty() {
            header.push_str("\"__metadata__\":{");
            for (i, (k, v)) in metadata.iter().enumerate() {
                if i > 0 {
                    header.push(',');
                }
                header.push_str(&serde_json::to_string(k).expect("string serializes"));
                header.push(':');
                header.push_str(&serde_json::to_string(v).expect("string serializes"));
            }
            header.push('}');
            first = false;
        }
        let mut offset = 0u64;
        let mut order = Vec::with_capacity(sorted.len());
        for spec in &sorted {
            if !first {
                header.push(',');
            }
            first = false;
            let begin = offset;
            let end = begin + spec.byte_len;
            offset = end;
            header.push_str(&serde_json::to_string(&spec.name).expect("string serializes"));
            header.push_str(":{\"dtype\":");
            header.push_str(&serde_json::to_string(spec.dtype.as_str()).expect("string serializes"));
            header.push_str(",\"shape\":[");
            for (i, d) in spec.shape.iter().enumerate() {
                if i > 0 {
                    header.push(',');
                }
                header.push_str(&d.to_string());
            }
            header.push_str("],\"data_offsets\":[");
            header.push_str(&begin.to_string());
            header.push(',');
            header.push_str(&end.to_string());
            header.push_str("]}");
            order.push((spec.name.clone(), spec.byte_len));
        }
        header.push('}');

        let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(|e| StoreError::io(path, e))?;
        out.write_all(header.as_bytes()).map_err(|e| StoreError::io(path, e))?;

        Ok(CheckpointWriter { out, path: path.to_path_buf(), order, current: 0, written_in_current: 0 })
    }

    /// Append payload bytes for `name`. Tensors must be fed in sorted-name
    /// order; a tensor's bytes may arrive across several calls.
    pub fn append(&mut self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        // Close out any fully-written predecessors (zero-length tensors in
        // particular never receive an `append` call).
        while self.current < self.order.len()
            && self.written_in_current == self.order[self.current].1
            && self.order[self.current].0 != name
        {
            self.current += 1;
            self.written_in_current = 0;
        }
        let Some((expected_name, expected_len)) = self.order.get(self.current) else {
            return Err(StoreError::UnknownTensor { name: name.to_string() });
        };
        if expected_name != name {
            return Err(StoreError::BadTensorEntry {
                name: name.to_string(),
                reason: format!("payload out of order: expected `{expected_name}` next"),
            });
        }
        if self.written_in_current + bytes.len() as u64 > *expected_len {
            return Err(StoreError::SizeMismatch {
                name: name.to_string(),
                expected: *expected_len,
                actual: self.written_in_current + bytes.len() as u64,
                begin: 0,
                end: *expected_len,
            });
        }
        self.out.write_all(bytes).map_err(|e| StoreError::io(&self.path, e))?;
        self.written_in_current += bytes.len() as u64;
        Ok(())
    }

    /// Flush and verify that every declared tensor received its bytes.
    pub fn finish(mut self) -> Result<(), StoreError> {
        while self.current < self.order.len() && self.written_in_current == self.order[self.current].1
        {
            self.current += 1;
            self.written_in_current = 0;
        }
        if self.current < self.order.len() {
            let (name, expected) = &self.order[self.current];
            return Err(StoreError::SizeMismatch {
                name: name.clone(),
                expected: *expected,
                actual: self.written_in_current,
                begin: 0,
                end: *expected,
            });
        }
        self.out.flush().map_err(|e| StoreError::io(&self.path, e))
    }
}

/// Write a container in canonical form: header keys sorted (metadata first),
/// payload packed contiguously in sorted-name order with no padding.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    entries: &[TensorEntry],
    metadata: &BTreeMap<String, String>,
) -> Result<(), StoreError> {
    let specs: Vec<TensorSpec> = entries
        .iter()
        .map(|e| TensorSpec {
            name: e.name.clone(),
            dtype: e.dtype.clone(),
            shape: e.shape.clone(),
            byte_len: e.data.len() as u64,
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, &specs, metadata)?;
    let mut sorted: Vec<&TensorEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for entry in sorted {
        writer.append(&entry.name, &entry.data)?;
    }
    writer.finish()
}

/// Convenience: re-encode an opened container into canonical bytes at
/// `path`. Parsing followed by rewriting is idempotent.
pub fn rewrite_canonical(
    handle: &CheckpointHandle,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let specs: Vec<TensorSpec> = handle
        .tensors()
        .values()
        .map(|m| TensorSpec {
            name: m.name.clone(),
            dtype: m.dtype.clone(),
            shape: m.shape.clone(),
            byte_len: m.byte_len(),
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, &specs, handle.metadata())?;
    for name in handle.tensor_names() {
        let mut chunks = handle.byte_chunks(name, DEFAULT_CHUNK_BYTES)?;
        while let Some(chunk) = chunks.next_chunk()? {
            writer.append(name, chunk)?;
        }
    }
    writer.finish()
}

// ─────────────────────────────────────────────────────────────────────────
// Layer grouping
// ─────────────────────────────────────────────────────────────────────────

/// Default pattern extracting the layer index from a tensor name.
pub const DEFAULT_LAYER_PATTERN: &str = r"model\.layers\.(\d+)\.";

/// Default name prefixes routed to the Pre block (token embeddings).
pub const DEFAULT_PRE_PREFIXES: &[&str] = &["model.embed"];

/// Which block of the network a tensor belongs to.
///
/// `Pre` holds the embedding-side tensors, `Layer(i)` the i-th transformer
/// block, and `Post` everything after the last block (final norm, LM head).
/// Only `Layer(i)` groups are ever addressed by swap windows; `Pre` and
/// `Post` are deliberately unreachable from surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerGroup {
    Pre,
    Layer(usize),
    Post,
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerGroup::Pre => f.write_str("pre"),
            LayerGroup::Layer(i) => write!(f, "L{i}"),
            LayerGroup::Post => f.write_str("post"),
        }
    }
}

impl Serialize for LayerGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "pre" => Ok(LayerGroup::Pre),
            "post" => Ok(LayerGroup::Post),
            other => other
                .strip_prefix('L')
                .and_then(|i| i.parse().ok())
                .map(LayerGroup::Layer)
                .ok_or_else(|| serde::de::Error::custom(format!("bad layer group `{s}`"))),
        }
    }
}

/// Partition of a checkpoint's tensor names into Pre, per-layer, and Post
/// groups. Every tensor belongs to exactly one group.
#[derive(Debug, Clone)]
pub struct LayerMap {
    pub num_layers: usize,
    by_name: BTreeMap<String, LayerGroup>,
    members: BTreeMap<LayerGroup, Vec<String>>,
}

impl LayerMap {
    pub fn group_of(&self, name: &str) -> Option<LayerGroup> {
        self.by_name.get(name).copied()
    }

    /// Names in a group, lexicographically sorted. Empty slice for an
    /// absent group.
    pub fn members(&self, group: LayerGroup) -> &[String] {
        self.members.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Non-empty groups in network order: Pre, Layer 0.., Post.
    pub fn groups(&self) -> impl Iterator<Item = LayerGroup> + '_ {
        self.members.keys().copied()
    }
}

/// Partition tensor names by layer index extracted via `pattern` (a regex
/// with one integer capture group). Unmatched names fall into `Pre` when
/// they start with one of `pre_prefixes`, otherwise `Post`.
///
/// Layer indices must cover `0..num_layers` with no gaps.
pub fn group_layers(
    handle: &CheckpointHandle,
    pattern: &str,
    pre_prefixes: &[String],
) -> Result<LayerMap, StoreError> {
    let re = Regex::new(pattern).map_err(|e| StoreError::BadLayerPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })?;
    if re.captures_len() < 2 {
        return Err(StoreError::BadLayerPattern {
            pattern: pattern.to_string(),
            reason: "pattern needs one capture group for the layer index".to_string(),
        });
    }

    let mut by_name = BTreeMap::new();
    let mut members: BTreeMap<LayerGroup, Vec<String>> = BTreeMap::new();
    let mut max_seen: Option<usize> = None;
    for name in handle.tensor_names() {
        let group = match re.captures(name) {
            Some(caps) => {
                let idx_str = caps.get(1).map(|m| m.as_str()).unwrap_or("");
                let idx: usize = idx_str.parse().map_err(|_| StoreError::BadLayerPattern {
                    pattern: pattern.to_string(),
                    reason: format!("capture `{idx_str}` in `{name}` is not a layer index"),
                })?;
                max_seen = Some(max_seen.map_or(idx, |m| m.max(idx)));
                LayerGroup::Layer(idx)
            }
            None => {
                if pre_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                    LayerGroup::Pre
                } else {
                    LayerGroup::Post
                }
            }
        };
        by_name.insert(name.to_string(), group);
        members.entry(group).or_default().push(name.to_string());
    }

    let Some(max_seen) = max_seen else {
        return Err(StoreError::NoLayersMatched { pattern: pattern.to_string() });
    };
    for i in 0..=max_seen {
        if !members.contains_key(&LayerGroup::Layer(i)) {
            return Err(StoreError::NonContiguousLayers { missing: i, max_seen });
        }
    }

    Ok(LayerMap { num_layers: max_seen + 1, by_name, members })
}

/// `group_layers` with the default pattern and Pre prefixes.
pub fn group_layers_default(handle: &CheckpointHandle) -> Result<LayerMap, StoreError> {
    let prefixes: Vec<String> = DEFAULT_PRE_PREFIXES.iter().map(|s| s.to_string()).collect();
    group_layers(handle, DEFAULT_LAYER_PATTERN, &prefixes)
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────
