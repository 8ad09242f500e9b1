//! Toy joint image/prompt encoder and the contrastive weight matrix.
//!
//! The encoder is a frozen random projection of `concat(image, prompt)`,
//! L2-normalized. It is never trained; it only has to place similar
//! (image, prompt) pairs close together in cosine distance.
//!
//! The weight matrix pairs every winner `i` in a minibatch with every loser `j`:
//!
//! ```text
//! w~[i][j] = exp(-cos_dist(f(y_w[i], x[i]), f(y_l[j], x[j])) / tau)
//! w[i][j]  = w~[i][j] / sum_j' w~[i][j']
//! ```
//!
//! Rows index winners, columns index losers, and each row sums to one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Unit-norm embedding of an (image, prompt) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(Vec<f64>);

impl JointEmbedding {
    /// Rejects vectors whose norm is below `1e-12`. The stored vector is kept as given.
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&vector);
        if !(norm >= 1e-12) {
            return Err(Error::ZeroProjection(norm));
        }
        Ok(Self(vector))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frozen `out_dim x in_dim` projection, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
}

/// What is persisted for a codebook: the seed and shape, never the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSpec {
    pub seed: u64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Codebook {
    pub fn from_rows(in_dim: usize, out_dim: usize, weights: Vec<f64>) -> Result<Self> {
        check_dim(in_dim * out_dim, weights.len())?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidRange(
                "codebook dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weights,
        }
    }

    /// Gaussian entries scaled by `1/sqrt(in_dim)`, fixed by `seed`.
    pub fn random(spec: CodebookSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (spec.in_dim as f64).sqrt();
        let weights = (0..spec.in_dim * spec.out_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_rows(spec.in_dim, spec.out_dim, weights)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }
}

/// Projects `concat(image, prompt)` through the codebook and normalizes.
pub fn embed_pair(image: &[f64], prompt: &[f64], codebook: &Codebook) -> Result<JointEmbedding> {
    check_dim(codebook.in_dim, image.len() + prompt.len())?;
    if let Some(bad) = image.iter().chain(prompt).find(|x| !x.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "non-finite embedding input {bad}"
        )));
    }
    let input: Vec<f64> = image.iter().chain(prompt).copied().collect();
    let projected: Vec<f64> = codebook
        .weights
        .chunks_exact(codebook.in_dim)
        .map(|row| row.iter().zip(&input).map(|(w, x)| w * x).sum())
        .collect();
    let norm = l2_norm(&projected);
    if !(norm >= 1e-12) {
        return Err(Error::ZeroProjection(norm));
    }
    JointEmbedding::new(projected.into_iter().map(|x| x / norm).collect())
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &JointEmbedding, b: &JointEmbedding) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let cos = dot / (l2_norm(&a.0) * l2_norm(&b.0));
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Row-stochastic `M x M` matrix of contrastive pair weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    size: usize,
    tau: f64,
    entries: Vec<f64>,
}

impl WeightMatrix {
    /// Builds the matrix from winner/loser embeddings at temperature `tau`.
    pub fn from_embeddings(
        winners: &[JointEmbedding],
        losers: &[JointEmbedding],
        tau: f64,
    ) -> Result<Self> {
        if winners.is_empty() || losers.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dim(winners.len(), losers.len())?;
        let mut distances = Vec::with_capacity(winners.len() * losers.len());
        for w in winners {
            for l in losers {
                distances.push(cosine_distance(w, l)?);
            }
        }
        Self::from_distances(winners.len(), &distances, tau)
    }

    /// Row-wise softmax of `-distance / tau` over a row-major `size x size` grid.
    pub fn from_distances(size: usize, distances: &[f64], tau: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyBatch);
        }
        if !(tau > 0.0) {
            return Err(Error::NonPositiveTemperature(tau));
        }
        check_dim(size * size, distances.len())?;
        let mut entries = Vec::with_capacity(size * size);
        for row in distances.chunks_exact(size) {
            // Shift by the row minimum so the largest exponent is exactly 0.
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let unnorm: Vec<f64> = row.iter().map(|d| (-(d - min) / tau).exp()).collect();
            // Summing in sorted order makes the row total independent of column order.
            let mut sorted = unnorm.clone();
            sorted.sort_by(f64::total_cmp);
            let total: f64 = sorted.iter().sum();
            entries.extend(unnorm.into_iter().map(|w| w / total));
        }
        Ok(Self { size, tau, entries })
    }

    /// One-hot diagonal: each winner is contrasted only with its own loser.
    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        Self {
            size,
            tau: 0.0,
            entries,
        }
    }

    /// Every entry `1/size`.
    pub fn uniform(size: usize) -> Self {
        Self {
            size,
            tau: f64::INFINITY,
            entries: vec![1.0 / size as f64; size * size],
        }
    }

    /// Wraps raw entries without checking row sums; used for hand-built test grids.
    pub fn from_raw(size: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim(size * size, entries.len())?;
        Ok(Self {
            size,
            tau: f64::NAN,
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Temperature the matrix was built with. `0` for the diagonal matrix,
    /// `inf` for the uniform one, `NaN` for raw grids.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| i == j || self.get(i, j) == 0.0))
    }
}

/// Convenience wrapper matching the free-function form of the other operations.
pub fn weight_matrix(
    winners: &[JointEmbedding],
    losers: &[JointEmbedding],
    tau: f64,
) -> Result<WeightMatrix> {
    WeightMatrix::from_embeddings(winners, losers, tau)
}
