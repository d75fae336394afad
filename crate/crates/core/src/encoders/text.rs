use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Sentence-level text encoder producing one unit-norm row per caption.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, captions: &[String]) -> Result<Array2<f64>>;
}

/// Words every guidance caption shares (the mandated "an image of" prefix)
/// plus a few function words. They are dropped before hashing; a caption
/// made only of these words keeps them.
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "image", "and", "in", "on", "with", "at", "to",
];

/// Offline stand-in for a sentence encoder: every token hashes to a seeded
/// Gaussian direction; a caption is the normalised sum of its token
/// directions. Case-insensitive, order-invariant.
#[derive(Clone, Debug)]
pub struct FixtureTextEncoder {
    dim: usize,
    seed: u64,
}

impl FixtureTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        // FNV-1a keeps the hash stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in token.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17));
        Array1::from_shape_simple_fn(self.dim, || StandardNormal.sample(&mut rng))
    }

    fn tokens(caption: &str) -> Vec<String> {
        let all: Vec<String> = caption
            .split_whitespace()
            .map(|t| {
                t.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect();
        let content: Vec<String> = all
            .iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .cloned()
            .collect();
        if content.is_empty() {
            all
        } else {
            content
        }
    }
}

impl TextEncoder for FixtureTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, captions: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((captions.len(), self.dim));
        for (i, caption) in captions.iter().enumerate() {
            let tokens = Self::tokens(caption);
            if tokens.is_empty() {
                return Err(Error::Validation(format!("caption {i} is empty")));
            }
            let mut v = Array1::<f64>::zeros(self.dim);
            for t in &tokens {
                v += &self.token_vector(t);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-12 {
                return Err(Error::Numerical(format!("caption {i} hashed to a zero vector")));
            }
            out.row_mut(i).assign(&(v / norm));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_text, EncoderConfig};

    fn cos(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_captions_identical_vectors() {
        let e = encode_text(&strings(&["an image of a cat", "an image of a cat"]), &EncoderConfig::default()).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!((cos(e.row(0), e.row(1)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bag_of_words_order_invariant_and_case_insensitive() {
        let e = encode_text(&strings(&["a b", "b a", "B A"]), &EncoderConfig::default()).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn playing_vs_silent_differ() {
        let e = encode_text(
            &strings(&["an image of a playing violin", "an image of a silent violin"]),
            &EncoderConfig::default(),
        )
        .unwrap();
        assert!(cos(e.row(0), e.row(1)) < 1.0 - 1e-6);
    }

    #[test]
    fn rows_are_unit_norm() {
        let e = encode_text(
            &strings(&["an image of the kitchen, curtains, and piano", "x", "an image of"]),
            &EncoderConfig::default(),
        )
        .unwrap();
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_caption_rejected() {
        let r = encode_text(&strings(&["  "]), &EncoderConfig::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
