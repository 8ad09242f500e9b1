//! Evaluation: moment-matched Fréchet distance, toy reward, median win
//! rates and ancestral sampling from a checkpoint.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{BaseConfig, Component, StyleTransform};
use crate::error::{check_dim, Error, Result};
use crate::model::DenoiserParams;
use crate::schedule::DiffusionSchedule;
use crate::train::Checkpoint;

const SYM_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of a distribution in sample space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d * d, cov.len())?;
        let cov = DMatrix::from_row_slice(d, d, &cov);
        Self::from_parts(DVector::from_vec(mean), cov)
    }

    fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYM_TOL * cov.amax().max(1.0) {
            return Err(Error::InvalidRange(format!(
                "covariance asymmetric by {asym:e}"
            )));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let min = min_eigenvalue(&cov);
        if min < -PSD_TOL {
            return Err(Error::NonPsd(min));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.cov[(i, j)]
    }

    pub fn cov_matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Symmetric PSD square root with eigenvalues clamped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianStats> {
    let d = samples.first().map_or(0, Vec::len);
    if samples.len() < d + 1 || samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: (d + 1).max(2),
            got: samples.len(),
        });
    }
    for s in samples {
        check_dim(d, s.len())?;
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    GaussianStats::from_parts(mean, cov)
}

/// Exact first two moments of an equally weighted Gaussian mixture.
pub fn mixture_moments(components: &[Component]) -> Result<GaussianStats> {
    let first = components.first().ok_or(Error::EmptyBatch)?;
    let d = first.dim();
    let k = components.len() as f64;
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for c in components {
        check_dim(d, c.dim())?;
        let m = DVector::from_column_slice(&c.mean);
        second += c.cov_matrix() + &m * m.transpose();
        mean += m;
    }
    mean /= k;
    second /= k;
    let cov = second - &mean * mean.transpose();
    GaussianStats::from_parts(mean, (&cov + cov.transpose()) * 0.5)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the square root is taken as the sum of square roots of the
/// eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`, which share their spectrum with
/// `S_a S_b`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let diff = &a.mean - &b.mean;
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Principal square root of `S_a S_b` via the similarity
/// `S_a^(1/2) (S_a^(1/2) S_b S_a^(1/2))^(1/2) S_a^(-1/2)`. Needs `S_a` definite.
pub fn sqrt_of_product(a: &GaussianStats, b: &GaussianStats) -> Result<DMatrix<f64>> {
    check_dim(a.dim(), b.dim())?;
    let eig = SymmetricEigen::new(a.cov.clone());
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::NonPsd(min));
    }
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
    let inv_root =
        v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
    let inner = &root * &b.cov * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    Ok(&root * psd_sqrt(&inner) * inv_root)
}

/// Styled image of a prompt's base mixture.
pub fn styled_components(
    base: &BaseConfig,
    transform: &StyleTransform,
    prompt_id: usize,
) -> Result<Vec<Component>> {
    base.components(prompt_id)?
        .iter()
        .map(|c| transform.apply_component(c))
        .collect()
}

/// Negative squared Mahalanobis distance to the nearest component of a
/// target mixture. Zero exactly at a component mean.
#[derive(Debug, Clone)]
pub struct ToyReward {
    means: Vec<DVector<f64>>,
    precisions: Vec<DMatrix<f64>>,
}

impl ToyReward {
    pub fn new(components: &[Component]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = components[0].dim();
        let mut means = Vec::new();
        let mut precisions = Vec::new();
        for c in components {
            check_dim(d, c.dim())?;
            let inv = c
                .cov_matrix()
                .cholesky()
                .ok_or_else(|| Error::NonPsd(min_eigenvalue(&c.cov_matrix())))?
                .inverse();
            means.push(DVector::from_column_slice(&c.mean));
            precisions.push(inv);
        }
        Ok(Self { means, precisions })
    }

    /// Reward for the styled version of one prompt's mixture.
    pub fn for_prompt(
        base: &BaseConfig,
        transform: &StyleTransform,
        prompt_id: usize,
    ) -> Result<Self> {
        Self::new(&styled_components(base, transform, prompt_id)?)
    }

    pub fn score(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.means[0].len(), y.len())?;
        let y = DVector::from_column_slice(y);
        Ok(self
            .means
            .iter()
            .zip(&self.precisions)
            .map(|(m, p)| {
                let diff = &y - m;
                -diff.dot(&(p * &diff))
            })
            .fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn score_batch(&self, ys: &[Vec<f64>]) -> Result<Vec<f64>> {
        ys.iter().map(|y| self.score(y)).collect()
    }
}

/// Free-function form of [`ToyReward::score`] for a prompt's styled target.
pub fn toy_reward(
    sample: &[f64],
    base: &BaseConfig,
    transform: &StyleTransform,
    prompt_id: usize,
) -> Result<f64> {
    ToyReward::for_prompt(base, transform, prompt_id)?.score(sample)
}

/// One ancestral step from index `k` to `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStep {
    pub mean: Vec<f64>,
    /// Multiplier applied to the injected standard-normal noise.
    pub noise_scale: f64,
    pub next: Vec<f64>,
}

pub fn reverse_step(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    y: &[f64],
    k: usize,
    prompt: &[f64],
    z: &[f64],
) -> Result<ReverseStep> {
    check_dim(y.len(), z.len())?;
    let eps = params.denoise(y, k, prompt, schedule)?;
    let mean = schedule.reverse_mean(y, &eps, k)?;
    let noise_scale = schedule.sigmas()[k];
    let next = mean
        .iter()
        .zip(z)
        .map(|(m, z)| m + noise_scale * z)
        .collect();
    Ok(ReverseStep {
        mean,
        noise_scale,
        next,
    })
}

/// `n` samples drawn by running the reverse chain from index `T - 1` to 0,
/// starting from standard normal noise. The last step adds no noise.
pub fn reverse_sample(
    ckpt: &Checkpoint,
    prompt: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = ckpt.params.arch().data_dim();
    check_dim(ckpt.params.arch().prompt_dim(), prompt.len())?;
    let steps = ckpt.schedule.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for k in (0..steps).rev() {
            let z: Vec<f64> = if k > 0 {
                (0..d).map(|_| rng.sample(StandardNormal)).collect()
            } else {
                vec![0.0; d]
            };
            y = reverse_step(&ckpt.params, &ckpt.schedule, &y, k, prompt, &z)?.next;
        }
        out.push(y);
    }
    Ok(out)
}

/// Seed used for the `index`-th evaluation prompt; shared by both models.
pub fn prompt_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    WinA,
    WinB,
    Tie,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptResult {
    pub index: usize,
    pub prompt_id: usize,
    pub median_a: f64,
    pub median_b: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRate {
    /// Fraction of prompts won by model A, ties counted as one half.
    pub rate: f64,
    pub table: Vec<PromptResult>,
}

impl WinRate {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,prompt_id,median_a,median_b,outcome\n");
        for r in &self.table {
            let o = match r.outcome {
                Outcome::WinA => "a",
                Outcome::WinB => "b",
                Outcome::Tie => "tie",
            };
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.index, r.prompt_id, r.median_a, r.median_b, o
            ));
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// An evaluation prompt: its class id and conditioning features.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrompt {
    pub id: usize,
    pub features: Vec<f64>,
}

/// Median-of-`k` comparison per prompt. Both models use the same sampling
/// seed for a given prompt.
pub fn win_rate<S>(
    a: &Checkpoint,
    b: &Checkpoint,
    prompts: &[EvalPrompt],
    k: usize,
    scorer: S,
    seed: u64,
) -> Result<WinRate>
where
    S: Fn(usize, &[f64]) -> Result<f64>,
{
    if k.is_multiple_of(2) {
        return Err(Error::InvalidK(k));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut table = Vec::with_capacity(prompts.len());
    let mut wins = 0.0;
    for (index, prompt) in prompts.iter().enumerate() {
        let s = prompt_seed(seed, index);
        let score = |ckpt: &Checkpoint| -> Result<f64> {
            let ys = reverse_sample(ckpt, &prompt.features, k, s)?;
            let scores = ys
                .iter()
                .map(|y| scorer(prompt.id, y))
                .collect::<Result<Vec<_>>>()?;
            Ok(median(scores))
        };
        let median_a = score(a)?;
        let median_b = score(b)?;
        let outcome = if median_a > median_b {
            wins += 1.0;
            Outcome::WinA
        } else if median_b > median_a {
            Outcome::WinB
        } else {
            wins += 0.5;
            Outcome::Tie
        };
        table.push(PromptResult {
            index,
            prompt_id: prompt.id,
            median_a,
            median_b,
            outcome,
        });
    }
    Ok(WinRate {
        rate: wins / prompts.len() as f64,
        table,
    })
}

/// Per-prompt Fréchet distance between generated samples and the exact
/// styled target moments, averaged over prompts.
pub fn style_frechet(
    ckpt: &Checkpoint,
    base: &BaseConfig,
    transform: &StyleTransform,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for p in 0..base.num_prompts() {
        let ys = reverse_sample(
            ckpt,
            &base.prompt_features(p)?,
            samples_per_prompt,
            prompt_seed(seed, p),
        )?;
        let target = mixture_moments(&styled_components(base, transform, p)?)?;
        total += frechet_distance(&fit_gaussian(&ys)?, &target)?;
    }
    Ok(total / base.num_prompts() as f64)
}

/// Mean toy reward of generated samples over all prompts.
pub fn mean_reward(
    ckpt: &Checkpoint,
    base: &BaseConfig,
    transform: &StyleTransform,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for p in 0..base.num_prompts() {
        let reward = ToyReward::for_prompt(base, transform, p)?;
        let ys = reverse_sample(
            ckpt,
            &base.prompt_features(p)?,
            samples_per_prompt,
            prompt_seed(seed, p),
        )?;
        total += reward.score_batch(&ys)?.iter().sum::<f64>() / samples_per_prompt.max(1) as f64;
    }
    Ok(total / base.num_prompts() as f64)
}

/// One row of a temperature sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub tau: f64,
    pub final_loss: f64,
    pub frechet_distance: f64,
    pub mean_reward: f64,
}

pub const ABLATION_HEADER: &str = "tau,final_loss,frechet_distance,mean_reward";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.tau, r.final_loss, r.frechet_distance, r.mean_reward
        ));
    }
    out
}
