//! Versioned text container for named tensors.
//!
//! ```text
//! PROMPTADAPT-CKPT v1
//! meta <key> <value>
//! tensor <name> <d0>,<d1>,...
//! <hex-float> <hex-float> ...
//! checksum sha256 <hex digest of every preceding byte>
//! ```
//!
//! Classifier weights, prompt pairs and exported datasets all use this format.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hexfloat;
use crate::tensor::Tensor;

pub const HEADER: &str = "PROMPTADAPT-CKPT v1";
const MAGIC: &str = "PROMPTADAPT-CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad header {0:?})")]
    BadHeader(String),
    #[error("unsupported checkpoint version {0:?}")]
    UnsupportedVersion(String),
    #[error("malformed checkpoint at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("checkpoint truncated: no checksum line")]
    Truncated,
    #[error("checksum mismatch: file says {expected}, content hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("missing metadata key {0:?}")]
    MissingMeta(String),
    #[error("invalid metadata {key}: {reason}")]
    InvalidMeta { key: String, reason: String },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Geometry {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Ordered metadata and named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a metadata entry. Keys are single tokens; values are one line.
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(valid_token(key), "metadata key must be a single token: {key:?}");
        assert!(!value.contains('\n'), "metadata value must be one line");
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key).ok_or_else(|| CheckpointError::MissingMeta(key.into()))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.require_meta(key)?
            .parse()
            .map_err(|_| CheckpointError::InvalidMeta {
                key: key.into(),
                reason: "unparseable value".into(),
            })
    }

    pub fn push_tensor(&mut self, name: &str, tensor: Tensor) {
        assert!(valid_token(name), "tensor name must be a single token: {name:?}");
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensor(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(","));
            let mut first = true;
            for &v in t.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                out.push_str(&hexfloat::format(v));
            }
            out.push('\n');
        }
        let digest = hex::encode(Sha256::digest(out.as_bytes()));
        let _ = writeln!(out, "checksum sha256 {digest}");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let malformed = |line: usize, reason: &str| CheckpointError::Malformed {
            line,
            reason: reason.to_string(),
        };
        let header = text.lines().next().unwrap_or("");
        if header != HEADER {
            return Err(match header.split_once(' ') {
                Some((MAGIC, version)) => CheckpointError::UnsupportedVersion(version.into()),
                _ => CheckpointError::BadHeader(header.chars().take(40).collect()),
            });
        }
        let body_end = text
            .rfind("checksum sha256 ")
            .filter(|&i| i > 0 && text.as_bytes()[i - 1] == b'\n')
            .ok_or(CheckpointError::Truncated)?;
        let trailer = &text[body_end..];
        let expected = trailer
            .strip_prefix("checksum sha256 ")
            .and_then(|s| s.strip_suffix('\n'))
            .filter(|s| !s.contains('\n'))
            .ok_or(CheckpointError::Truncated)?;
        let body = &text[..body_end];
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != expected {
            return Err(CheckpointError::ChecksumMismatch {
                expected: expected.into(),
                actual,
            });
        }

        let mut ckpt = Checkpoint::new();
        let mut lines = body.lines().enumerate().skip(1);
        while let Some((i, line)) = lines.next() {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_token(k) {
                    return Err(malformed(lineno, "empty metadata key"));
                }
                ckpt.meta.push((k.into(), v.into()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| malformed(lineno, "tensor record needs a name and a shape"))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| malformed(lineno, "bad shape"))?;
                let (_, values) = lines
                    .next()
                    .ok_or_else(|| malformed(lineno, "tensor record without values"))?;
                let data = values
                    .split(' ')
                    .map(hexfloat::parse)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| malformed(lineno + 1, &e.to_string()))?;
                let t = Tensor::new(shape, data).map_err(|e| malformed(lineno + 1, &e.to_string()))?;
                ckpt.tensors.push((name.into(), t));
            } else {
                return Err(malformed(lineno, "unknown record"));
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Hex SHA-256 of the serialized document.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "test");
        c.set_meta("note", "two words");
        c.push_tensor("w", Tensor::new(vec![2, 2], vec![0.1, -0.0, 1e-310, 3.5]).unwrap());
        c.push_tensor("b", Tensor::scalar(-7.25));
        c
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = sample();
        let text = c.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert!(back.tensor("w").unwrap().bit_eq(c.tensor("w").unwrap()));
        assert_eq!(back.meta("note"), Some("two words"));
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let text = sample().to_text();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::parse(cut), Err(CheckpointError::Truncated)));
        let tampered = text.replace("meta kind test", "meta kind tezt");
        assert!(matches!(
            Checkpoint::parse(&tampered),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn header_and_version_are_checked() {
        let text = sample().to_text();
        let v2 = text.replacen("v1", "v2", 1);
        assert!(matches!(
            Checkpoint::parse(&v2),
            Err(CheckpointError::UnsupportedVersion(v)) if v == "v2"
        ));
        assert!(matches!(Checkpoint::parse("hello\n"), Err(CheckpointError::BadHeader(_))));
        assert!(matches!(Checkpoint::parse(""), Err(CheckpointError::BadHeader(_))));
    }
}
