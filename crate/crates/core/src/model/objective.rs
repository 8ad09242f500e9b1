//! Preference objectives differentiated through the denoiser.
//!
//! Each sample in a minibatch is noised once; winner `i` keeps its noise for
//! every pairing `(i, j)` and loser `j` likewise, so an `M x M` grid costs
//! `2M` network evaluations per model. The frozen reference sees exactly the
//! same noised inputs and targets as the trained network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DenoiserParams, Forward};
use crate::data::PreferencePair;
use crate::embed::WeightMatrix;
use crate::error::{check_dim, Error, Result};
use crate::losses::{self, ErrorGrid, LossConfig, PairErrors, PairErrorsGrad};
use crate::schedule::{sample_timestep, DiffusionSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Rpo,
    Dpo,
    Sft,
    Orpo,
    Orrpo,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Rpo,
        LossKind::Dpo,
        LossKind::Sft,
        LossKind::Orpo,
        LossKind::Orrpo,
    ];

    /// Whether the loss contrasts every winner with every loser.
    pub fn uses_grid(self) -> bool {
        matches!(self, LossKind::Rpo | LossKind::Orrpo)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Rpo => "rpo",
            LossKind::Dpo => "dpo",
            LossKind::Sft => "sft",
            LossKind::Orpo => "orpo",
            LossKind::Orrpo => "orrpo",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownLossKind(s.to_string()))
    }
}

/// How timesteps are drawn for a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    /// One `t` for the whole minibatch.
    #[default]
    Shared,
    /// Pair `i` (its winner and its loser) gets its own `t_i`.
    PerPair,
}

/// Regression target of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    /// Target is the forward noise `eps_{t+1}` (reverse step evaluated at its mean).
    #[default]
    Mean,
    /// Target is `eps_{t+1} - sigma_{t+1} eps_t` with a fresh `eps_t`, i.e. the
    /// reverse step is evaluated at a sampled point rather than its mean.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub timestep_mode: TimestepMode,
    pub posterior: PosteriorMode,
}

/// Random draws consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseDraws {
    /// Timestep `t` per pair; the network sees index `t + 1`.
    pub timesteps: Vec<usize>,
    pub eps_w: Vec<Vec<f64>>,
    pub eps_l: Vec<Vec<f64>>,
    /// Regression targets actually used for the winners and losers.
    pub target_w: Vec<Vec<f64>>,
    pub target_l: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean_winner_mse: f64,
    pub mean_loser_mse: f64,
    /// Fraction of matched pairs with a strictly positive inner preference term.
    pub implicit_accuracy: f64,
    /// Matched-pair errors (the grid diagonal).
    pub pairs: Vec<PairErrors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub stats: BatchStats,
    pub draws: NoiseDraws,
}

struct SampleEval {
    fwd: Forward,
    target: Vec<f64>,
    mse_theta: f64,
    mse_ref: f64,
}

fn sq_error(out: &[f64], target: &[f64]) -> f64 {
    out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum()
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Loss and exact parameter gradient of the selected objective on one minibatch.
///
/// `w` is used by the grid losses (`rpo`, `orrpo`) and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradient<R: Rng + ?Sized>(
    p: &DenoiserParams,
    p_ref: &DenoiserParams,
    minibatch: &[PreferencePair],
    w: &WeightMatrix,
    s: &DiffusionSchedule,
    cfg: &LossConfig,
    kind: LossKind,
    opts: ObjectiveOptions,
    rng: &mut R,
) -> Result<LossEval> {
    if minibatch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if p.arch() != p_ref.arch() {
        return Err(Error::InvalidArch(
            "reference and trained networks have different architectures".into(),
        ));
    }
    if kind.uses_grid() {
        check_dim(minibatch.len(), w.size())?;
    }
    cfg.validate()?;
    let m = minibatch.len();
    let d = p.arch().data_dim();

    let mut draws = NoiseDraws::default();
    let shared_t = match opts.timestep_mode {
        TimestepMode::Shared => Some(sample_timestep(rng, s.steps())),
        TimestepMode::PerPair => None,
    };
    let mut extras_w = Vec::new();
    let mut extras_l = Vec::new();
    for pair in minibatch {
        check_dim(d, pair.y_w.len())?;
        check_dim(d, pair.y_l.len())?;
        let t = match shared_t {
            Some(t) => t,
            None => sample_timestep(rng, s.steps()),
        };
        draws.timesteps.push(t);
        draws.eps_w.push(normal_vec(rng, d));
        draws.eps_l.push(normal_vec(rng, d));
        if opts.posterior == PosteriorMode::Sampled {
            extras_w.push(normal_vec(rng, d));
            extras_l.push(normal_vec(rng, d));
        }
    }

    let eval_sample =
        |y0: &[f64], eps: &[f64], extra: Option<&Vec<f64>>, t: usize, prompt: &[f64]| {
            let noisy = s.marginal_sample(y0, t, eps)?;
            let target: Vec<f64> = match extra {
                Some(e) => {
                    let sigma = s.sigmas()[t + 1];
                    eps.iter().zip(e).map(|(a, b)| a - sigma * b).collect()
                }
                None => eps.to_vec(),
            };
            let input = p.assemble_input(&noisy.value, noisy.timestep, prompt)?;
            let fwd_ref = p_ref.forward(input.clone());
            let fwd = p.forward(input);
            Ok::<_, Error>(SampleEval {
                mse_theta: sq_error(fwd.output(), &target),
                mse_ref: sq_error(fwd_ref.output(), &target),
                fwd,
                target,
            })
        };

    let mut winners = Vec::with_capacity(m);
    let mut losers = Vec::with_capacity(m);
    for (i, pair) in minibatch.iter().enumerate() {
        let t = draws.timesteps[i];
        let f = &pair.prompt_features;
        winners.push(eval_sample(
            &pair.y_w,
            &draws.eps_w[i],
            extras_w.get(i),
            t,
            f,
        )?);
        losers.push(eval_sample(
            &pair.y_l,
            &draws.eps_l[i],
            extras_l.get(i),
            t,
            f,
        )?);
    }
    draws.target_w = winners.iter().map(|e| e.target.clone()).collect();
    draws.target_l = losers.iter().map(|e| e.target.clone()).collect();

    let w_errs: Vec<(f64, f64)> = winners.iter().map(|e| (e.mse_theta, e.mse_ref)).collect();
    let l_errs: Vec<(f64, f64)> = losers.iter().map(|e| (e.mse_theta, e.mse_ref)).collect();
    let diag: Vec<PairErrors> = w_errs
        .iter()
        .zip(&l_errs)
        .map(|(&(tw, rw), &(tl, rl))| PairErrors::new(tw, rw, tl, rl))
        .collect();

    let mf = m as f64;
    let stats = BatchStats {
        mean_winner_mse: w_errs.iter().map(|e| e.0).sum::<f64>() / mf,
        mean_loser_mse: l_errs.iter().map(|e| e.0).sum::<f64>() / mf,
        implicit_accuracy: diag
            .iter()
            .filter(|e| losses::rpo_inner(e, cfg.beta) > 0.0)
            .count() as f64
            / mf,
        pairs: diag.clone(),
    };

    // A blown-up network is reported through a non-finite loss so the
    // training loop can apply its divergence policy.
    let all_finite = w_errs
        .iter()
        .chain(&l_errs)
        .all(|(a, b)| a.is_finite() && b.is_finite());
    if !all_finite {
        return Ok(LossEval {
            loss: f64::NAN,
            grad: vec![f64::NAN; p.len()],
            stats,
            draws,
        });
    }

    // d loss / d mse_theta per winner and per loser
    let mut dw = vec![0.0; m];
    let mut dl = vec![0.0; m];
    let mut scatter_grid = |grads: &[PairErrorsGrad]| {
        for (idx, g) in grads.iter().enumerate() {
            dw[idx / m] += g.d_theta_w;
            dl[idx % m] += g.d_theta_l;
        }
    };
    let loss = match kind {
        LossKind::Rpo => {
            let grid = ErrorGrid::from_shared(&w_errs, &l_errs)?;
            let (loss, grads) = losses::diffusion_rpo_loss_with_grad(&grid, w, cfg)?;
            scatter_grid(&grads);
            loss
        }
        LossKind::Orrpo => {
            let grid = ErrorGrid::from_shared(&w_errs, &l_errs)?;
            let (loss, grads) = losses::orrpo_loss_with_grad(&grid, w, cfg)?;
            scatter_grid(&grads);
            loss
        }
        LossKind::Dpo | LossKind::Orpo => {
            let (loss, grads) = if kind == LossKind::Dpo {
                losses::diffusion_dpo_loss_with_grad(&diag, cfg)?
            } else {
                losses::orpo_loss_with_grad(&diag, cfg)?
            };
            for (i, g) in grads.iter().enumerate() {
                dw[i] = g.d_theta_w;
                dl[i] = g.d_theta_l;
            }
            loss
        }
        LossKind::Sft => {
            let mses: Vec<f64> = w_errs.iter().map(|e| e.0).collect();
            dw.fill(1.0 / m as f64);
            losses::sft_loss(&mses)?
        }
    };

    let mut grad = vec![0.0; p.len()];
    for (evals, coefs) in [(&winners, &dw), (&losers, &dl)] {
        for (e, &c) in evals.iter().zip(coefs.iter()) {
            if c == 0.0 {
                continue;
            }
            let d_out: Vec<f64> = e
                .fwd
                .output()
                .iter()
                .zip(&e.target)
                .map(|(o, t)| 2.0 * c * (o - t))
                .collect();
            p.backward(&e.fwd, &d_out, &mut grad);
        }
    }

    Ok(LossEval {
        loss,
        grad,
        stats,
        draws,
    })
}
