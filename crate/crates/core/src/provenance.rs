//! Metadata embedded in every artifact the tools write.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::read_file;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the command's configuration serialized as JSON.
    pub config_sha256: String,
    /// Input label → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
}

impl ArtifactProvenance {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: config_sha256(config)?,
            inputs: BTreeMap::new(),
            seed,
        })
    }

    /// Records the hash of a file input.
    pub fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn input_hash(&mut self, label: &str, sha256: String) {
        self.inputs.insert(label.to_string(), sha256);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

/// Struct fields serialize in declaration order, so equal configs hash
/// equally.
pub fn config_sha256<C: Serialize>(config: &C) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        a: u32,
        b: Vec<f64>,
    }

    #[test]
    fn hashes_are_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let x = config_sha256(&Cfg { a: 1, b: vec![0.5] }).unwrap();
        assert_eq!(x, config_sha256(&Cfg { a: 1, b: vec![0.5] }).unwrap());
        assert_ne!(x, config_sha256(&Cfg { a: 2, b: vec![0.5] }).unwrap());
    }

    #[test]
    fn file_inputs_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        let mut prov = ArtifactProvenance::new("test", &1u8, 4).unwrap();
        prov.input_file("x", &p).unwrap();
        assert_eq!(prov.inputs["x"], sha256_hex(b"abc"));
        assert!(prov.input_file("y", &dir.path().join("missing")).is_err());
    }
}
