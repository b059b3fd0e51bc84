//! Shared fixture builders for the integration suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layerswap_core::store::{
    open_checkpoint, write_checkpoint, CheckpointHandle, Dtype, TensorEntry,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Tensor names of a small model-shaped network: an embedding (pre), two
/// weights per layer, and an output head (post).
pub fn layered_names(num_layers: usize) -> Vec<String> {
    let mut names = vec!["model.embed.weight".to_string()];
    for layer in 0..num_layers {
        names.push(format!("model.layers.{layer}.attn.weight"));
        names.push(format!("model.layers.{layer}.mlp.weight"));
    }
    names.push("lm_head.weight".to_string());
    names
}

/// Write a model-shaped F32 checkpoint whose values come from
/// `value(tensor_name, element_index)`.
pub fn layered_checkpoint(
    path: &Path,
    num_layers: usize,
    elements_per_tensor: usize,
    metadata: &BTreeMap<String, String>,
    value: impl Fn(&str, usize) -> f32,
) -> CheckpointHandle {
    let entries: Vec<TensorEntry> = layered_names(num_layers)
        .into_iter()
        .map(|name| {
            let values: Vec<f32> = (0..elements_per_tensor).map(|i| value(&name, i)).collect();
            TensorEntry {
                name,
                dtype: Dtype::F32,
                shape: vec![elements_per_tensor as u64],
                data: f32_bytes(&values),
            }
        })
        .collect();
    write_checkpoint(path, &entries, metadata).expect("fixture writes");
    open_checkpoint(path).expect("fixture parses")
}

/// A random container fixture: up to `max_tensors` tensors with random
/// F32/F16/BF16 dtypes, shapes, payloads, and optional metadata.
pub fn random_container(rng: &mut ChaCha8Rng, path: &Path, max_tensors: usize) -> PathBuf {
    let n_tensors = rng.random_range(1..=max_tensors);
    let mut entries = Vec::with_capacity(n_tensors);
    for t in 0..n_tensors {
        let dtype = match rng.random_range(0..3) {
            0 => Dtype::F32,
            1 => Dtype::F16,
            _ => Dtype::BF16,
        };
        let elems: u64 = match rng.random_range(0..4) {
            0 => rng.random_range(0..=10),
            1 => rng.random_range(0..=1_000),
            2 => rng.random_range(0..=20_000),
            _ => rng.random_range(0..=100_000),
        };
        // A random shape whose product is `elems` (scalar when 1).
        let shape = if elems == 0 {
            vec![0]
        } else if elems == 1 && rng.random_bool(0.5) {
            vec![] // scalar
        } else if elems % 2 == 0 && elems > 1 && rng.random_bool(0.5) {
            vec![2, elems / 2]
        } else {
            vec![elems]
        };
        let byte_len = elems * dtype.element_size().unwrap();
        let data: Vec<u8> = (0..byte_len).map(|_| rng.random()).collect();
        entries.push(TensorEntry {
            name: format!("tensor.{t:03}.{}", ["w", "b", "g"][rng.random_range(0..3)]),
            dtype,
            shape,
            data,
        });
    }
    let mut metadata = BTreeMap::new();
    if rng.random_bool(0.5) {
        metadata.insert("origin".to_string(), format!("fixture-{}", rng.random_range(0..999)));
        metadata.insert("note".to_string(), "random round-trip fixture".to_string());
    }
    write_checkpoint(path, &entries, &metadata).expect("fixture writes");
    path.to_path_buf()
}

/// The bundled sentence corpus, label → one sentence per line.
pub fn bundled_lid_corpus() -> BTreeMap<String, Vec<String>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/lid");
    let mut corpora = BTreeMap::new();
    for label in ["en", "fr", "de", "es", "zh", "sw"] {
        let text = std::fs::read_to_string(dir.join(format!("{label}.txt")))
            .unwrap_or_else(|e| panic!("missing bundled corpus for {label}: {e}"));
        let sentences: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        assert!(sentences.len() >= 200, "{label} corpus has only {} sentences", sentences.len());
        corpora.insert(label.to_string(), sentences);
    }
    corpora
}

/// Split each language's sentences into (train, held-out): every fourth
/// sentence is held out.
pub fn train_eval_split(
    corpora: &BTreeMap<String, Vec<String>>,
) -> (BTreeMap<String, Vec<String>>, BTreeMap<String, Vec<String>>) {
    let mut train = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for (label, sentences) in corpora {
        let (mut tr, mut ev) = (Vec::new(), Vec::new());
        for (i, s) in sentences.iter().enumerate() {
            if i % 4 == 3 {
                ev.push(s.clone());
            } else {
                tr.push(s.clone());
            }
        }
        train.insert(label.clone(), tr);
        eval.insert(label.clone(), ev);
    }
    (train, eval)
}
