//! Embedders, instruction-aware attention fusion, and cosine similarity.
//!
//! Embeddings are fixed-dimension, L2-normalized vectors. The all-zero vector
//! is a sentinel for "no information" (empty input); every operation that
//! divides by a norm treats it explicitly. Two embedder implementations are
//! provided: a deterministic feature-hashing embedder for tests and offline
//! runs, and a client for a remote embedding service.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension, matching common CLIP-style encoders.
pub const DEFAULT_DIMENSION: usize = 512;

/// Norms below this are treated as numerically zero.
const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine similarity is undefined for the zero-vector sentinel")]
    ZeroVector,
    #[error("hybrid embedding needs a non-empty image reference or landmarks")]
    EmptyHybridInput,
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("fusion weights file {path}: {reason}")]
    WeightsFile { path: String, reason: String },
    #[error("embedding service: {0}")]
    Remote(String),
}

/// A fixed-dimension vector, L2-normalized unless it is the zero sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// The zero sentinel of the given dimension.
    pub fn zero(dimension: usize) -> Self {
        EmbeddingVector(vec![0.0; dimension])
    }

    /// Normalizes `values` to unit L2 norm. Numerically zero input collapses
    /// to the zero sentinel.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM_EPS {
            return Self::zero(values.len());
        }
        EmbeddingVector(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl fmt::Display for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{} dims, norm {:.3}]", self.dimension(), self.norm())
    }
}

/// Exact cosine similarity, clamped to [-1, 1] against rounding.
///
/// The zero sentinel has no direction, so it is rejected rather than
/// silently mapped to 0.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    if a.is_zero() || b.is_zero() {
        return Err(EmbeddingError::ZeroVector);
    }
    let sim = a.dot(b) / (a.norm() * b.norm());
    Ok(sim.clamp(-1.0, 1.0))
}

/// Cosine similarity that maps the zero sentinel (or a dimension mismatch)
/// to the given fallback instead of erroring. Used where a missing embedding
/// should score poorly rather than fail.
pub fn cosine_sim_or(a: &EmbeddingVector, b: &EmbeddingVector, fallback: f64) -> f64 {
    cosine_sim(a, b).unwrap_or(fallback)
}

// ---------------------------------------------------------------------------
// Feature hashing
// ---------------------------------------------------------------------------

/// FNV-1a 64-bit. Published constants, no seed, stable across platforms and
/// processes, which keeps memory files reproducible.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Embeds a token multiset by signed feature hashing.
///
/// Each token contributes +1 or -1 at a coordinate derived from its FNV-1a
/// hash; the accumulated vector is L2-normalized. An empty multiset yields
/// the zero sentinel, as does (rarely) exact sign cancellation.
pub fn hash_embed<'a, I>(tokens: I, dimension: usize) -> EmbeddingVector
where
    I: IntoIterator<Item = &'a str>,
{
    assert!(dimension >= 2, "hash_embed requires dimension >= 2");
    let mut values = vec![0.0; dimension];
    for token in tokens {
        let h = fnv1a64(token.as_bytes());
        let idx = (h % dimension as u64) as usize;
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        values[idx] += sign;
    }
    EmbeddingVector::normalized(values)
}

/// Lowercases and splits on anything that is not alphanumeric or '_'.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

// ---------------------------------------------------------------------------
// Embedder abstraction
// ---------------------------------------------------------------------------

/// Text and image-reference encoders behind one interface.
///
/// Implementations must be deterministic for identical inputs within one
/// process configuration and safe for concurrent calls.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
    fn embed_image_ref(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Deterministic feature-hashing embedder. Text is tokenized; an image
/// reference is hashed as a single opaque token.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 2, "embedding dimension must be >= 2");
        HashEmbedder { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let tokens = tokenize(text);
        Ok(hash_embed(tokens.iter().map(String::as_str), self.dimension))
    }

    fn embed_image_ref(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if image_ref.is_empty() {
            return Ok(EmbeddingVector::zero(self.dimension));
        }
        Ok(hash_embed([image_ref], self.dimension))
    }
}

/// Combined image+text embedding for a viewpoint: the L2-normalized mean of
/// the image-reference embedding and the joined-landmark text embedding.
/// One empty side degenerates to the other alone; both empty is an error.
pub fn hybrid_embed(
    image_ref: &str,
    landmarks: &[String],
    embedder: &dyn Embedder,
) -> Result<EmbeddingVector, EmbeddingError> {
    let have_image = !image_ref.is_empty();
    let have_text = landmarks.iter().any(|l| !l.is_empty());
    if !have_image && !have_text {
        return Err(EmbeddingError::EmptyHybridInput);
    }
    let image = if have_image {
        Some(embedder.embed_image_ref(image_ref)?)
    } else {
        None
    };
    let text = if have_text {
        Some(embedder.embed_text(&landmarks.join(" "))?)
    } else {
        None
    };
    match (image, text) {
        (Some(i), Some(t)) => {
            let mean: Vec<f64> = i
                .values()
                .iter()
                .zip(t.values())
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            Ok(EmbeddingVector::normalized(mean))
        }
        (Some(i), None) => Ok(i),
        (None, Some(t)) => Ok(t),
        (None, None) => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Attention fusion
// ---------------------------------------------------------------------------

/// The projection matrix applied between the instruction embedding and each
/// candidate view when computing attention logits. Defaults to identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    dimension: usize,
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    version: u32,
    dimension: usize,
    matrix: Vec<Vec<f64>>,
}

impl FusionWeights {
    pub fn identity(dimension: usize) -> Self {
        let matrix = (0..dimension)
            .map(|i| {
                let mut row = vec![0.0; dimension];
                row[i] = 1.0;
                row
            })
            .collect();
        FusionWeights { dimension, matrix }
    }

    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self, EmbeddingError> {
        let dimension = matrix.len();
        for row in &matrix {
            if row.len() != dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dimension,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite {
                    context: "fusion weights",
                });
            }
        }
        Ok(FusionWeights { dimension, matrix })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let err = |reason: String| EmbeddingError::WeightsFile {
            path: path.display().to_string(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: WeightsFile = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        if file.version != 1 {
            return Err(err(format!("unsupported version {}", file.version)));
        }
        if file.matrix.len() != file.dimension {
            return Err(err(format!(
                "matrix has {} rows, declared dimension {}",
                file.matrix.len(),
                file.dimension
            )));
        }
        Self::from_matrix(file.matrix).map_err(|e| err(e.to_string()))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Row-by-row W v.
    fn apply(&self, v: &EmbeddingVector) -> Vec<f64> {
        self.matrix
            .iter()
            .map(|row| row.iter().zip(v.values()).map(|(w, x)| w * x).sum())
            .collect()
    }
}

/// Softmax attention weights over candidate views: alpha_k proportional to
/// exp(u . W v_k), computed with max-subtraction. Sums to 1.
pub fn attention_weights(
    instruction: &EmbeddingVector,
    views: &[EmbeddingVector],
    weights: &FusionWeights,
) -> Result<Vec<f64>, EmbeddingError> {
    if views.is_empty() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: instruction.dimension(),
            got: 0,
        });
    }
    let d = instruction.dimension();
    if weights.dimension() != d {
        return Err(EmbeddingError::DimensionMismatch {
            expected: d,
            got: weights.dimension(),
        });
    }
    let mut logits = Vec::with_capacity(views.len());
    for v in views {
        if v.dimension() != d {
            return Err(EmbeddingError::DimensionMismatch {
                expected: d,
                got: v.dimension(),
            });
        }
        let projected = weights.apply(v);
        let z: f64 = instruction
            .values()
            .iter()
            .zip(&projected)
            .map(|(u, p)| u * p)
            .sum();
        logits.push(z);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Instruction-aware fusion of candidate views into one observation
/// embedding: the attention-weighted sum of the views, re-normalized.
///
/// A single view passes through unchanged (its attention weight is exactly
/// 1). A numerically zero weighted sum yields the zero sentinel.
pub fn fuse_observations(
    instruction: &EmbeddingVector,
    views: &[EmbeddingVector],
    weights: &FusionWeights,
) -> Result<EmbeddingVector, EmbeddingError> {
    if views.len() == 1 {
        if views[0].dimension() != instruction.dimension() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: instruction.dimension(),
                got: views[0].dimension(),
            });
        }
        return Ok(views[0].clone());
    }
    let alpha = attention_weights(instruction, views, weights)?;
    let d = instruction.dimension();
    let mut raw = vec![0.0; d];
    for (a, v) in alpha.iter().zip(views) {
        for (acc, x) in raw.iter_mut().zip(v.values()) {
            *acc += a * x;
        }
    }
    Ok(EmbeddingVector::normalized(raw))
}

// ---------------------------------------------------------------------------
// Remote embedding service client
// ---------------------------------------------------------------------------

/// Configuration for [`RemoteEmbedder`].
#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    /// Full URL of the embedding endpoint.
    pub endpoint: String,
    /// Declared output dimension; responses are validated against it.
    pub dimension: usize,
    /// Optional bearer token.
    pub auth_token: Option<String>,
    pub timeout: Duration,
}

impl RemoteEmbedderConfig {
    pub fn new(endpoint: impl Into<String>, dimension: usize) -> Self {
        RemoteEmbedderConfig {
            endpoint: endpoint.into(),
            dimension,
            auth_token: None,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f64>,
}

/// Client for an HTTP embedding service speaking the common
/// `{"input": [...]} -> {"data": [{"embedding": [...]}]}` wire shape.
/// Returned vectors are re-normalized so downstream arithmetic stays uniform.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    cache: std::sync::Mutex<BTreeMap<String, EmbeddingVector>>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        Ok(RemoteEmbedder {
            config,
            client,
            cache: std::sync::Mutex::new(BTreeMap::new()),
        })
    }

    fn embed(&self, input: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if input.is_empty() {
            return Ok(EmbeddingVector::zero(self.config.dimension));
        }
        if let Some(hit) = self.cache.lock().unwrap().get(input) {
            return Ok(hit.clone());
        }
        let mut request = self
            .client
            .post(&self.config.endpoint)
            .json(&EmbedRequest { input: vec![input] });
        if let Some(token) = &self.config.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbeddingError::Remote(format!("HTTP {status}")));
        }
        let body: EmbedResponse = response
            .json()
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        let item = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbeddingError::Remote("empty data array".into()))?;
        if item.embedding.len() != self.config.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.config.dimension,
                got: item.embedding.len(),
            });
        }
        if item.embedding.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                context: "remote embedding",
            });
        }
        let vector = EmbeddingVector::normalized(item.embedding);
        self.cache
            .lock()
            .unwrap()
            .insert(input.to_string(), vector.clone());
        Ok(vector)
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed(text)
    }

    fn embed_image_ref(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed(image_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(x: f64, y: f64) -> EmbeddingVector {
        EmbeddingVector::normalized(vec![x, y])
    }

    #[test]
    fn hash_embed_empty_is_zero_sentinel() {
        let v = hash_embed(std::iter::empty::<&str>(), 8);
        assert!(v.is_zero());
    }

    #[test]
    fn hash_embed_is_deterministic() {
        let a = hash_embed(["sofa"], 64);
        let b = hash_embed(["sofa"], 64);
        assert_eq!(a, b);
    }

    #[test]
    fn hash_embed_is_order_free() {
        let a = hash_embed(["sofa", "lamp"], 64);
        let b = hash_embed(["lamp", "sofa"], 64);
        assert_eq!(a, b);
    }

    #[test]
    fn hash_embed_output_is_unit_norm() {
        let v = hash_embed(["a", "b", "c"], 32);
        assert!((v.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(
            tokenize("Turn LEFT, then wait near the couch."),
            vec!["turn", "left", "then", "wait", "near", "the", "couch"]
        );
        assert_eq!(tokenize("b_couch -> v7"), vec!["b_couch", "v7"]);
        assert!(tokenize("  ,,  ").is_empty());
    }

    #[test]
    fn hybrid_embed_text_only_equals_text_embedding() {
        let e = HashEmbedder::new(64);
        let landmarks = vec!["couch".to_string(), "lamp".to_string()];
        let hybrid = hybrid_embed("", &landmarks, &e).unwrap();
        assert_eq!(hybrid, e.embed_text("couch lamp").unwrap());
    }

    #[test]
    fn hybrid_embed_image_only_equals_image_embedding() {
        let e = HashEmbedder::new(64);
        let hybrid = hybrid_embed("img/p5.jpg", &[], &e).unwrap();
        assert_eq!(hybrid, e.embed_image_ref("img/p5.jpg").unwrap());
    }

    #[test]
    fn hybrid_embed_rejects_both_empty() {
        let e = HashEmbedder::new(64);
        assert!(matches!(
            hybrid_embed("", &[], &e),
            Err(EmbeddingError::EmptyHybridInput)
        ));
    }

    // Orthogonal unit sides mean to [0.5, 0.5], which normalizes to
    // [0.7071, 0.7071].
    #[test]
    fn hybrid_embed_normalizes_the_mean() {
        struct TwoAxis;
        impl Embedder for TwoAxis {
            fn dimension(&self) -> usize {
                2
            }
            fn embed_text(&self, _: &str) -> Result<EmbeddingVector, EmbeddingError> {
                Ok(EmbeddingVector::normalized(vec![0.0, 1.0]))
            }
            fn embed_image_ref(&self, _: &str) -> Result<EmbeddingVector, EmbeddingError> {
                Ok(EmbeddingVector::normalized(vec![1.0, 0.0]))
            }
        }
        let hybrid = hybrid_embed("img", &["x".to_string()], &TwoAxis).unwrap();
        assert!((hybrid.values()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-5);
        assert!((hybrid.values()[1] - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-5);
    }

    #[test]
    fn cosine_identical_is_one_and_opposite_is_minus_one() {
        let a = vec2(0.6, 0.8);
        assert_eq!(cosine_sim(&a, &a).unwrap(), 1.0);
        let neg = EmbeddingVector::normalized(vec![-0.6, -0.8]);
        assert_eq!(cosine_sim(&a, &neg).unwrap(), -1.0);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = vec2(1.0, 0.0);
        let b = vec2(0.0, 1.0);
        assert_eq!(cosine_sim(&a, &b).unwrap(), 0.0);
    }

    // [1,0] against normalized [1,1] is 1/sqrt(2).
    #[test]
    fn cosine_diagonal_case() {
        let a = vec2(1.0, 0.0);
        let b = vec2(1.0, 1.0);
        assert!((cosine_sim(&a, &b).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-5);
    }

    #[test]
    fn cosine_rejects_zero_sentinel() {
        let a = vec2(1.0, 0.0);
        let z = EmbeddingVector::zero(2);
        assert!(matches!(
            cosine_sim(&a, &z),
            Err(EmbeddingError::ZeroVector)
        ));
        assert_eq!(cosine_sim_or(&a, &z, 0.0), 0.0);
    }

    #[test]
    fn fuse_single_view_passes_through_exactly() {
        let u = vec2(1.0, 0.0);
        let v = vec2(0.3, 0.4);
        let w = FusionWeights::identity(2);
        let fused = fuse_observations(&u, std::slice::from_ref(&v), &w).unwrap();
        assert_eq!(fused, v);
    }

    #[test]
    fn fuse_equal_logits_is_uniform_attention() {
        // u orthogonal to every view makes all logits zero.
        let u = EmbeddingVector::normalized(vec![0.0, 0.0, 1.0]);
        let v1 = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0]);
        let v2 = EmbeddingVector::normalized(vec![0.0, 1.0, 0.0]);
        let w = FusionWeights::identity(3);
        let alpha = attention_weights(&u, &[v1.clone(), v2.clone()], &w).unwrap();
        assert_eq!(alpha, vec![0.5, 0.5]);
        let fused = fuse_observations(&u, &[v1.clone(), v2.clone()], &w).unwrap();
        // Exactly the normalized mean, same arithmetic path.
        let mean: Vec<f64> = v1
            .values()
            .iter()
            .zip(v2.values())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert_eq!(fused, EmbeddingVector::normalized(mean));
    }

    // z = [1, 0] gives alpha = [e/(e+1), 1/(e+1)] ~ [0.73106, 0.26894] and a
    // normalized fusion of ~[0.93852, 0.34526].
    #[test]
    fn fuse_two_views_matches_hand_softmax() {
        let u = vec2(1.0, 0.0);
        let v1 = vec2(1.0, 0.0);
        let v2 = vec2(0.0, 1.0);
        let w = FusionWeights::identity(2);
        let alpha = attention_weights(&u, &[v1.clone(), v2.clone()], &w).unwrap();
        assert!((alpha[0] - 0.73106).abs() <= 1e-5);
        assert!((alpha[1] - 0.26894).abs() <= 1e-5);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let fused = fuse_observations(&u, &[v1, v2], &w).unwrap();
        assert!((fused.values()[0] - 0.938_507_899_795_138_8).abs() <= 1e-5);
        assert!((fused.values()[1] - 0.345_257_761_711_619_65).abs() <= 1e-5);
    }

    #[test]
    fn fuse_rejects_dimension_mismatch() {
        let u = vec2(1.0, 0.0);
        let v = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0]);
        let w = FusionWeights::identity(2);
        assert!(fuse_observations(&u, &[v], &w).is_err());
    }

    #[test]
    fn fuse_cancellation_yields_zero_sentinel() {
        let u = EmbeddingVector::normalized(vec![0.0, 0.0, 1.0]);
        let v1 = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0]);
        let v2 = EmbeddingVector::normalized(vec![-1.0, 0.0, 0.0]);
        let w = FusionWeights::identity(3);
        let fused = fuse_observations(&u, &[v1, v2], &w).unwrap();
        assert!(fused.is_zero());
    }

    #[test]
    fn identity_weights_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let w = FusionWeights::identity(3);
        let file = WeightsFile {
            version: 1,
            dimension: 3,
            matrix: w.matrix.clone(),
        };
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert_eq!(FusionWeights::load(&path).unwrap(), w);
    }

    #[test]
    fn weights_file_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        std::fs::write(&path, r#"{"version":9,"dimension":2,"matrix":[[1,0],[0,1]]}"#).unwrap();
        assert!(FusionWeights::load(&path).is_err());
    }
}
