//! Run manifests: config hash, seed and SHA-256 checksums of every artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name → hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash,
            seed,
            artifacts: BTreeMap::new(),
        }
    }

    /// Checksum `dir/name` and record it.
    pub fn add(&mut self, dir: &Path, name: &str) -> Result<()> {
        let sum = sha256_file(&dir.join(name))?;
        self.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command={}\nconfig_hash={}\nseed={}\n",
            self.command, self.config_hash, self.seed
        );
        for (name, sum) in &self.artifacts {
            writeln!(s, "artifact {name} sha256={sum}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::format(MANIFEST_FILE, format!("line {}", n + 1), m);
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("artifact ") {
                let (name, sum) = rest
                    .split_once(" sha256=")
                    .ok_or_else(|| bad(n, "expected `artifact NAME sha256=HEX`"))?;
                m.artifacts.insert(name.to_string(), sum.to_string());
            } else if let Some(v) = line.strip_prefix("command=") {
                m.command = v.to_string();
            } else if let Some(v) = line.strip_prefix("config_hash=") {
                m.config_hash = v.to_string();
            } else if let Some(v) = line.strip_prefix("seed=") {
                m.seed = v.parse().map_err(|_| bad(n, "bad seed"))?;
            } else if !line.trim().is_empty() {
                return Err(bad(n, "unrecognised line"));
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text)
    }

    /// Recompute every recorded checksum; returns the names that differ.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, sum) in &self.artifacts {
            if &sha256_file(&dir.join(name))? != sum {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"abc").unwrap();
        let mut m = Manifest::new("synth", "00ff".into(), 9);
        m.add(dir.path(), "a.txt").unwrap();
        assert_eq!(
            m.artifacts["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        m.write(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a.txt"), b"abd").unwrap();
        assert_eq!(back.verify(dir.path()).unwrap(), vec!["a.txt".to_string()]);
    }
}
