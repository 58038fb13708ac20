//! Fixed-dimension embedding vectors and cosine similarity.
//!
//! Components are stored as `f32`; every reduction (norms, dot products) is
//! accumulated in `f64` with a fixed lane order so that a score is a pure
//! function of the two input vectors, independent of call site.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as the zero vector.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Tolerance on the Euclidean norm of a vector flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Vectors this close to unit norm are already normalized.
const ALREADY_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector contains a non-finite component at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("vector must have at least one component")]
    Empty,
    #[error("malformed vector encoding: {0}")]
    Encoding(String),
}

/// A biometric template: the real-valued embedding a matcher extracts from one
/// presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    components: Vec<f32>,
    normalized: bool,
}

impl FeatureVector {
    /// Wraps raw components. Fails on empty or non-finite input.
    pub fn new(components: Vec<f32>) -> Result<Self, EmbeddingError> {
        if components.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(idx) = components.iter().position(|c| !c.is_finite()) {
            return Err(EmbeddingError::NonFinite(idx));
        }
        Ok(Self {
            components,
            normalized: false,
        })
    }

    /// Builds a vector and normalizes it in one step.
    pub fn unit(components: Vec<f32>) -> Result<Self, EmbeddingError> {
        Self::new(components)?.normalize()
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f32] {
        &self.components
    }

    pub fn into_components(self) -> Vec<f32> {
        self.components
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Euclidean norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        squared_norm(&self.components).sqrt()
    }

    /// Returns the unit vector with the same direction.
    pub fn normalize(&self) -> Result<Self, EmbeddingError> {
        let norm = self.norm();
        if !norm.is_finite() {
            // Only reachable through overflow of the squared norm.
            return Err(EmbeddingError::NonFinite(0));
        }
        if norm <= ZERO_NORM_EPS {
            return Err(EmbeddingError::ZeroVector);
        }
        // Re-dividing an f32 unit vector only perturbs rounding; leaving it
        // untouched makes normalization exactly idempotent.
        if self.normalized || (norm - 1.0).abs() <= ALREADY_UNIT_TOL {
            return Ok(Self {
                components: self.components.clone(),
                normalized: true,
            });
        }
        let components = self
            .components
            .iter()
            .map(|&c| (f64::from(c) / norm) as f32)
            .collect();
        Ok(Self {
            components,
            normalized: true,
        })
    }

    /// Restores a vector that was normalized before it was persisted.
    ///
    /// The flag is only honored if the norm is within [`UNIT_NORM_TOL`] of 1.
    pub fn from_persisted(components: Vec<f32>, normalized: bool) -> Result<Self, EmbeddingError> {
        let mut v = Self::new(components)?;
        if normalized {
            if (v.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(EmbeddingError::Encoding(
                    "vector flagged normalized but norm is not 1".into(),
                ));
            }
            v.normalized = true;
        }
        Ok(v)
    }
}

/// A cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    /// Clamps a finite raw score into `[-1, 1]`.
    pub fn clamped(raw: f64) -> Self {
        debug_assert!(raw.is_finite());
        Self(raw.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

const LANES: usize = 8;

/// Dot product of two equal-length `f32` slices, accumulated in `f64`.
///
/// The summation order is fixed (eight interleaved partial sums, folded
/// pairwise, then the tail), so results are bit-reproducible and the function
/// is exactly symmetric in its arguments.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += f64::from(a[base + l]) * f64::from(b[base + l]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += f64::from(a[i]) * f64::from(b[i]);
    }
    fold_lanes(acc) + tail
}

/// `f64` counterpart of [`dot_f32`] with the same summation order.
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    fold_lanes(acc) + tail
}

#[inline]
fn fold_lanes(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

pub fn squared_norm(v: &[f32]) -> f64 {
    dot_f32(v, v)
}

/// Cosine from a precomputed dot product and squared norms.
///
/// `sqrt(na * nb)` rather than `sqrt(na) * sqrt(nb)` keeps self-similarity at
/// exactly 1.0.
#[inline]
pub fn cosine_from_parts(dot: f64, sq_norm_a: f64, sq_norm_b: f64) -> SimilarityScore {
    SimilarityScore::clamped(dot / (sq_norm_a * sq_norm_b).sqrt())
}

/// Cosine similarity over raw slices. Callers guarantee equal length and
/// non-zero norms.
#[inline]
pub fn cosine_slices(a: &[f32], b: &[f32]) -> SimilarityScore {
    cosine_from_parts(dot_f32(a, b), squared_norm(a), squared_norm(b))
}

/// `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine_similarity(
    a: &FeatureVector,
    b: &FeatureVector,
) -> Result<SimilarityScore, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let na = squared_norm(&a.components);
    let nb = squared_norm(&b.components);
    if !na.is_finite() || !nb.is_finite() {
        return Err(EmbeddingError::NonFinite(0));
    }
    if na.sqrt() <= ZERO_NORM_EPS || nb.sqrt() <= ZERO_NORM_EPS {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(cosine_from_parts(
        dot_f32(&a.components, &b.components),
        na,
        nb,
    ))
}

/// One line of the embedding record text format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub identity: String,
    pub instance: String,
    pub image: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn to_json_line(&self) -> String {
        // Serializing plain strings and finite floats cannot fail.
        serde_json::to_string(self).expect("embedding record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Appends `v` as a little-endian `u32` count followed by little-endian `f32`s.
pub fn encode_vector(v: &[f32], out: &mut Vec<u8>) {
    let count = u32::try_from(v.len()).expect("vector length fits in u32");
    out.reserve(4 + 4 * v.len());
    out.extend_from_slice(&count.to_le_bytes());
    for c in v {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

/// Decodes one length-prefixed vector, returning it and the bytes consumed.
pub fn decode_vector(bytes: &[u8]) -> Result<(Vec<f32>, usize), EmbeddingError> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| EmbeddingError::Encoding("truncated length prefix".into()))?;
    let count = u32::from_le_bytes(header) as usize;
    let body_len = count
        .checked_mul(4)
        .ok_or_else(|| EmbeddingError::Encoding("length overflow".into()))?;
    let body = bytes
        .get(4..4 + body_len)
        .ok_or_else(|| EmbeddingError::Encoding("truncated vector body".into()))?;
    let v = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((v, 4 + body_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(c: &[f32]) -> FeatureVector {
        FeatureVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = fv(&[3.0, 4.0]).normalize().unwrap();
        assert_eq!(n.components(), &[0.6, 0.8]);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_unit_basis_is_identity() {
        let e1 = fv(&[1.0, 0.0, 0.0]);
        assert_eq!(e1.normalize().unwrap().components(), e1.components());
    }

    #[test]
    fn normalize_zero_vector_fails() {
        assert_eq!(fv(&[0.0, 0.0]).normalize(), Err(EmbeddingError::ZeroVector));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(
            FeatureVector::new(vec![1.0, f32::NAN]),
            Err(EmbeddingError::NonFinite(1))
        );
        assert_eq!(
            FeatureVector::new(vec![f32::INFINITY]),
            Err(EmbeddingError::NonFinite(0))
        );
        assert_eq!(FeatureVector::new(vec![]), Err(EmbeddingError::Empty));
    }

    #[test]
    fn cosine_basic_cases() {
        let v = fv(&[0.3, -1.2, 5.0, 2.0]);
        assert_eq!(cosine_similarity(&v, &v).unwrap().value(), 1.0);
        let e1 = fv(&[1.0, 0.0]);
        let e2 = fv(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap().value(), 0.0);
        let neg = fv(&[-0.3, 1.2, -5.0, -2.0]);
        assert_eq!(cosine_similarity(&v, &neg).unwrap().value(), -1.0);
    }

    #[test]
    fn cosine_errors() {
        let a = fv(&[1.0, 0.0]);
        let b = fv(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(EmbeddingError::DimMismatch {
                expected: 2,
                actual: 3
            })
        ));
        let z = fv(&[0.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &z), Err(EmbeddingError::ZeroVector));
    }

    #[test]
    fn vector_codec_layout() {
        let mut buf = Vec::new();
        encode_vector(&[1.0, -2.5], &mut buf);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &1.0f32.to_le_bytes());
        let (v, used) = decode_vector(&buf).unwrap();
        assert_eq!(v, vec![1.0, -2.5]);
        assert_eq!(used, 12);
        assert!(decode_vector(&buf[..7]).is_err());
    }

    #[test]
    fn record_json_shape() {
        let r = EmbeddingRecord {
            identity: "id0".into(),
            instance: "m0".into(),
            image: "img0".into(),
            vector: vec![0.5, -0.25],
        };
        let line = r.to_json_line();
        assert_eq!(
            line,
            r#"{"identity":"id0","instance":"m0","image":"img0","vector":[0.5,-0.25]}"#
        );
        assert_eq!(EmbeddingRecord::from_json_line(&line).unwrap(), r);
        assert!(EmbeddingRecord::from_json_line(
            r#"{"identity":"a","instance":"b","image":"c","vector":[],"x":1}"#
        )
        .is_err());
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, len)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in finite_vec(17), b in finite_vec(17)) {
            let (a, b) = (fv(&a), fv(&b));
            if let (Ok(x), Ok(y)) = (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
                prop_assert_eq!(x.value().to_bits(), y.value().to_bits());
            }
        }

        #[test]
        fn cosine_is_scale_invariant(a in finite_vec(12), b in finite_vec(12), c in 0.01f32..50.0) {
            let scaled: Vec<f32> = a.iter().map(|x| x * c).collect();
            let (a, b, s) = (fv(&a), fv(&b), fv(&scaled));
            if let (Ok(x), Ok(y)) = (cosine_similarity(&a, &b), cosine_similarity(&s, &b)) {
                prop_assert!((x.value() - y.value()).abs() <= 1e-6);
            }
        }

        #[test]
        fn normalize_is_idempotent(a in finite_vec(33)) {
            if let Ok(n1) = fv(&a).normalize() {
                let n2 = n1.normalize().unwrap();
                prop_assert!((n1.norm() - 1.0).abs() <= UNIT_NORM_TOL);
                for (x, y) in n1.components().iter().zip(n2.components()) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }
}
