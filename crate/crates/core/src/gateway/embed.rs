//! Feature-hashing embedder.
//!
//! Rule: lowercase the text and split on whitespace. For each token take
//! `h = SHA-256(token)`; the token adds `+1` (or `-1` when the low bit of
//! `h[8]` is set) at index `u64::from_le_bytes(h[0..8]) % dim`. The sum is
//! L2-normalized. A text with no tokens, or whose contributions cancel,
//! maps to the unit vector `e_0`.

use sha2::{Digest, Sha256};

use super::{Embedder, GatewayError};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: DEFAULT_DIM }
    }
}

/// Index and sign a token contributes.
pub fn token_slot(token: &str, dim: usize) -> (usize, f64) {
    let h = Sha256::digest(token.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    let idx = (u64::from_le_bytes(b) % dim as u64) as usize;
    let sign = if h[8] & 1 == 1 { -1.0 } else { 1.0 };
    (idx, sign)
}

impl HashEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in text.to_lowercase().split_whitespace() {
            let (i, s) = token_slot(tok, self.dim);
            v[i] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-embed:{}", self.dim)
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
