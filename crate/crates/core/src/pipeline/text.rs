//! Class-name embeddings and the `KJTE` embeddings file.
//!
//! `KJTE` layout (little endian): magic `KJTE`, u32 K, u32 C_text, then K
//! names each as a u16 byte length followed by UTF-8, then a `KJT1` tensor
//! of shape `[K, C_text]`.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::io::Reader;
use crate::tensor::{write_tensor, Scalar, Tensor};

pub const KJTE_MAGIC: &[u8; 4] = b"KJTE";

/// Prompt fed to the text encoder for a class name.
pub fn prompt(class_name: &str) -> String {
    format!("a photo of a {class_name}.")
}

/// Frozen per-class embedding matrix `[K, C_text]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings<T> {
    class_names: Vec<String>,
    matrix: Tensor<T>,
}

impl<T: Scalar> TextEmbeddings<T> {
    pub fn new(class_names: Vec<String>, matrix: Tensor<T>) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        let mut seen = HashSet::new();
        for n in &class_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateName(n.clone()));
            }
        }
        if matrix.rank() != 2 || matrix.shape()[0] != k {
            return Err(Error::shape("text_embeddings", format!("matrix {:?} does not match {k} classes", matrix.shape())));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite { op: "text_embeddings" });
        }
        Ok(Self {
            class_names,
            matrix: matrix.detached(),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Always true: embeddings never enter a parameter store.
    pub fn frozen(&self) -> bool {
        true
    }

    /// Reorders rows (and names) so row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.width();
        let names = perm.iter().map(|&p| self.class_names[p].clone()).collect();
        let data = perm
            .iter()
            .flat_map(|&p| self.matrix.data()[p * c..(p + 1) * c].iter().copied())
            .collect();
        Self::new(names, Tensor::new(&[perm.len(), c], data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = KJTE_MAGIC.to_vec();
        out.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for n in &self.class_names {
            out.extend_from_slice(&(n.len() as u16).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
        }
        write_tensor(&self.matrix, &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != KJTE_MAGIC {
            return Err(r.fail(0, "bad magic, expected KJTE"));
        }
        let k_at = r.pos();
        let k = r.u32("class count")? as usize;
        if k == 0 {
            return Err(r.fail(k_at, "class count is zero"));
        }
        let c = r.u32("embedding width")? as usize;
        let mut names = Vec::with_capacity(k.min(4096));
        for _ in 0..k {
            let at = r.pos();
            let len = r.u16("name length")? as usize;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw).map_err(|_| r.fail(at + 2, "class name is not UTF-8"))?;
            names.push(name.to_string());
        }
        let t_at = r.pos();
        let matrix = r.tensor::<T>()?;
        if matrix.shape() != [k, c] {
            return Err(r.fail(t_at, format!("tensor shape {:?} disagrees with header [{k}, {c}]", matrix.shape())));
        }
        if !r.at_end() {
            return Err(r.fail(r.pos(), "trailing bytes"));
        }
        Self::new(names, matrix)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

pub fn load_text_embeddings<T: Scalar>(path: &Path) -> Result<TextEmbeddings<T>> {
    TextEmbeddings::from_bytes(&std::fs::read(path)?)
}

/// Deterministic stand-in for a frozen text encoder.
///
/// Row `k` is derived from `SHA-256(seed as u64 LE || prompt(name_k))`: the
/// 32-byte digest seeds a ChaCha8 stream, `C_text` standard-normal samples
/// are drawn in f64, and the vector is scaled to unit L2 norm.
pub fn stub_text_encoder<T: Scalar>(class_names: &[String], c_text: usize, seed: u64) -> Result<TextEmbeddings<T>> {
    if c_text == 0 {
        return Err(Error::Config("embedding width must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(class_names.len() * c_text);
    for name in class_names {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(prompt(name).as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        let row: Vec<f64> = (0..c_text).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| T::lit(v / norm)));
    }
    TextEmbeddings::new(class_names.to_vec(), Tensor::new(&[class_names.len(), c_text], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn deterministic_unit_rows() {
        let n = names(&["background", "red square", "red circle"]);
        let a = stub_text_encoder::<f32>(&n, 16, 5).unwrap();
        let b = stub_text_encoder::<f32>(&n, 16, 5).unwrap();
        assert_eq!(a, b);
        for row in a.matrix().data().chunks(16) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let c = stub_text_encoder::<f32>(&n, 16, 6).unwrap();
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(matches!(
            stub_text_encoder::<f32>(&names(&["a", "a"]), 4, 0),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn roundtrip_and_negative_cases() {
        let e = stub_text_encoder::<f32>(&names(&["x", "yy", "zzz"]), 8, 1).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(TextEmbeddings::<f32>::from_bytes(&bytes).unwrap(), e);

        let cut = &bytes[..bytes.len() - 5];
        match TextEmbeddings::<f32>::from_bytes(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 12, "offset {offset}"),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut zero = bytes.clone();
        zero[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(TextEmbeddings::<f32>::from_bytes(&zero), Err(Error::Parse { offset: 4, .. })));

        let mut wrong_c = bytes;
        wrong_c[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(TextEmbeddings::<f32>::from_bytes(&wrong_c).is_err());
    }
}
