//! Text embeddings, cosine similarity and the nearest-centroid classifier.
//!
//! Providers turn scene/activity text into fixed-dimension unit vectors. Two
//! implementations ship here: [`HashingEmbedder`], a deterministic character
//! 3-gram hasher used offline and in tests, and [`HttpEmbedder`], a thin
//! client for an external embedding service.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text is empty or has no 3-grams")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector has zero norm or non-finite components")]
    Degenerate,
    #[error("no samples")]
    EmptyInput,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
}

/// A unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Box<[f32]>,
}

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::Degenerate);
        }
        let values = values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect();
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (rem_a, rem_b) = (chunks_a.remainder(), chunks_b.remainder());
    for (x, y) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f32, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    Ok(dot(a.as_slice(), b.as_slice()).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cosine` between unit vectors of equal dimension.
#[inline]
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    1.0 - dot(a, b).clamp(-1.0, 1.0)
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        (**self).embed(text)
    }
}

pub const DEFAULT_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Deterministic bag-of-3-grams embedder.
///
/// Text is trimmed and lowercased, split into overlapping character 3-grams,
/// each 3-gram's UTF-8 bytes hashed with FNV-1a (64-bit) into one of `dim`
/// buckets, and the count vector L2-normalized. Replayed event logs depend on
/// this being stable: do not change the scheme without bumping the bank
/// format version.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let lowered = text.trim().to_lowercase();
        let chars: Vec<char> = lowered.chars().collect();
        if chars.len() < 3 {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0.0f32; self.dim];
        let mut buf = String::with_capacity(12);
        for gram in chars.windows(3) {
            buf.clear();
            buf.extend(gram);
            let bucket = (fnv1a64(buf.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        }
        Embedding::new(counts)
    }
}

/// Client for an embedding service: POSTs the UTF-8 text and expects `dim`
/// comma-separated decimals back.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), dim, agent }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let unavailable = |e: ureq::Error| EmbedError::ProviderUnavailable(e.to_string());
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "text/plain; charset=utf-8")
            .send(text)
            .map_err(unavailable)?;
        let body = resp.body_mut().read_to_string().map_err(unavailable)?;
        let values = body
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EmbedError::ProviderUnavailable(format!("malformed vector: {e}")))?;
        if values.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, actual: values.len() });
        }
        Embedding::new(values)
    }
}

/// Wraps a provider and counts calls to [`EmbeddingProvider::embed`].
pub struct CountingEmbedder<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CountingEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CountingEmbedder<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(text)
    }
}

/// Per-class mean embeddings, renormalized.
#[derive(Debug, Clone)]
pub struct CentroidModel {
    classes: BTreeMap<String, Embedding>,
}

impl CentroidModel {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn centroid(&self, label: &str) -> Option<&Embedding> {
        self.classes.get(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }
}

pub fn build_centroids<S: AsRef<str>>(samples: &[(S, Embedding)]) -> Result<CentroidModel, EmbedError> {
    let first = samples.first().ok_or(EmbedError::EmptyInput)?;
    let dim = first.1.dim();
    let mut grouped: BTreeMap<&str, Vec<&Embedding>> = BTreeMap::new();
    for (label, e) in samples {
        if e.dim() != dim {
            return Err(EmbedError::DimensionMismatch { expected: dim, actual: e.dim() });
        }
        grouped.entry(label.as_ref()).or_default().push(e);
    }
    let mut classes = BTreeMap::new();
    for (label, mut members) in grouped {
        // Summation order is fixed by content so the result does not depend on input order.
        members.sort_by(|a, b| a.as_slice().iter().map(|v| v.to_bits()).cmp(b.as_slice().iter().map(|v| v.to_bits())));
        let mut sum = vec![0.0f64; dim];
        for e in &members {
            for (s, &v) in sum.iter_mut().zip(e.as_slice()) {
                *s += f64::from(v);
            }
        }
        let mean = sum.into_iter().map(|s| s as f32).collect();
        classes.insert(label.to_string(), Embedding::new(mean)?);
    }
    Ok(CentroidModel { classes })
}

/// Nearest centroid by cosine; equal scores resolve to the smallest label.
pub fn classify<'m>(query: &Embedding, model: &'m CentroidModel) -> Result<(&'m str, f32), EmbedError> {
    let mut best: Option<(&str, f32)> = None;
    for (label, centroid) in &model.classes {
        let score = cosine(query, centroid)?;
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((label, score)),
        }
    }
    best.ok_or(EmbedError::EmptyInput)
}

/// Unweighted mean of per-class F1 over every class present in `truth`.
pub fn macro_f1<S: AsRef<str>>(truth: &[S], predicted: &[S]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    let classes: BTreeSet<&str> = truth.iter().map(AsRef::as_ref).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (t, p) in truth.iter().zip(predicted) {
                match (t.as_ref() == c, p.as_ref() == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    _ => {}
                }
            }
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        })
        .sum();
    total / classes.len() as f64
}
