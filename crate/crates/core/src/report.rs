//! Report envelopes: every JSON report carries the tool version, the
//! resolved configuration, and a SHA-256 digest of each input file, so a
//! result can always be traced back to exact inputs and parameters.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Identity and size of one input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// What the file was used as ("target", "source", "pairs", …).
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A report plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub report: T,
}

impl<T: Serialize> ReportEnvelope<T> {
    pub fn new(version: &str, config: RunConfig, report: T) -> ReportEnvelope<T> {
        ReportEnvelope {
            tool: "layerswap".to_string(),
            version: version.to_string(),
            config,
            inputs: Vec::new(),
            report,
        }
    }

    /// Digest `path` and record it under `role`. Inputs keep insertion
    /// order; callers add them in a fixed order for byte-stable reports.
    pub fn with_input(mut self, role: &str, path: &Path) -> std::io::Result<ReportEnvelope<T>> {
        self.inputs.push(digest_file(role, path)?);
        Ok(self)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Stream a file through SHA-256.
pub fn digest_file(role: &str, path: &Path) -> std::io::Result<InputDigest> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_the_reference_vector() {
        // SHA-256("abc") from the FIPS 180-2 test vectors.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        std::fs::write(&path, b"abc").unwrap();
        let digest = digest_file("fixture", &path).unwrap();
        assert_eq!(
            digest.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(digest.bytes, 3);
        assert_eq!(digest.role, "fixture");
    }

    #[test]
    fn envelope_embeds_config_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("input.bin");
        std::fs::write(&path, vec![0u8; 100]).unwrap();

        let envelope = ReportEnvelope::new("1.2.3", RunConfig::default(), serde_json::json!({"ok": true}))
            .with_input("pairs", &path)
            .unwrap();
        let json = envelope.to_json_pretty();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["tool"], "layerswap");
        assert_eq!(value["version"], "1.2.3");
        assert_eq!(value["config"]["k_sigma"], 3.0);
        assert_eq!(value["inputs"][0]["role"], "pairs");
        assert_eq!(value["inputs"][0]["bytes"], 100);
        assert_eq!(value["report"]["ok"], true);

        // Same inputs, same bytes out.
        let again = ReportEnvelope::new("1.2.3", RunConfig::default(), serde_json::json!({"ok": true}))
            .with_input("pairs", &path)
            .unwrap();
        assert_eq!(again.to_json_pretty(), json);
    }
}
