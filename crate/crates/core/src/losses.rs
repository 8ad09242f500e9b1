//! Preference losses over noise-prediction errors.
//!
//! Every loss here consumes squared errors `||eps_model(y_{t+1}, t+1) - eps||^2`
//! for the trainable model and the frozen reference, on a preferred (`w`) and a
//! rejected (`l`) sample. The step-wise log-likelihood ratio of the reverse
//! transition reduces to a difference of these errors, so
//!
//! ```text
//! inner(w, l) = -(beta / 2) * [(mse_theta_w - mse_ref_w) - (mse_theta_l - mse_ref_l)]
//! ```
//!
//! is the argument of the log-sigmoid for both the relative (RPO) and the
//! pairwise (DPO) objectives. The timestep weighting is constant and absorbed
//! into `beta`.
//!
//! Each loss has a `*_with_grad` form returning the analytic partial derivative
//! with respect to every error field, which the model module chains through
//! the network.

use serde::{Deserialize, Serialize};

use crate::embed::WeightMatrix;
use crate::error::{check_dim, Error, Result};

/// Squared noise-prediction errors for one winner/loser pairing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairErrors {
    pub mse_theta_w: f64,
    pub mse_ref_w: f64,
    pub mse_theta_l: f64,
    pub mse_ref_l: f64,
}

/// Partial derivatives of a loss with respect to each [`PairErrors`] field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairErrorsGrad {
    pub d_theta_w: f64,
    pub d_ref_w: f64,
    pub d_theta_l: f64,
    pub d_ref_l: f64,
}

impl PairErrors {
    pub fn new(mse_theta_w: f64, mse_ref_w: f64, mse_theta_l: f64, mse_ref_l: f64) -> Self {
        Self {
            mse_theta_w,
            mse_ref_w,
            mse_theta_l,
            mse_ref_l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [
            self.mse_theta_w,
            self.mse_ref_w,
            self.mse_theta_l,
            self.mse_ref_l,
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidErrors(v));
            }
        }
        Ok(())
    }

    /// `(mse_theta_w - mse_ref_w) - (mse_theta_l - mse_ref_l)`.
    pub fn gap(&self) -> f64 {
        (self.mse_theta_w - self.mse_ref_w) - (self.mse_theta_l - self.mse_ref_l)
    }
}

/// `M x M` grid of pair errors, row `i` = winner `i`, column `j` = loser `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    size: usize,
    cells: Vec<PairErrors>,
}

impl ErrorGrid {
    pub fn new(size: usize, cells: Vec<PairErrors>) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyBatch);
        }
        check_dim(size * size, cells.len())?;
        Ok(Self { size, cells })
    }

    /// Builds the grid when every winner and loser carries one noise draw:
    /// cell `(i, j)` takes winner `i`'s errors and loser `j`'s errors.
    /// Each tuple is `(mse_theta, mse_ref)`.
    pub fn from_shared(winners: &[(f64, f64)], losers: &[(f64, f64)]) -> Result<Self> {
        check_dim(winners.len(), losers.len())?;
        let size = winners.len();
        let mut cells = Vec::with_capacity(size * size);
        for &(tw, rw) in winners {
            for &(tl, rl) in losers {
                cells.push(PairErrors::new(tw, rw, tl, rl));
            }
        }
        Self::new(size, cells)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> &PairErrors {
        &self.cells[i * self.size + j]
    }

    pub fn cells(&self) -> &[PairErrors] {
        &self.cells
    }

    pub fn diagonal(&self) -> Vec<PairErrors> {
        (0..self.size).map(|i| *self.get(i, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightPlacement {
    /// `-(1/M) sum w_ij log sigmoid(inner_ij)`.
    #[default]
    OutsideLogsigmoid,
    /// `-(1/M^2) sum log sigmoid(w_ij * inner_ij)`.
    InsideLogsigmoid,
}

/// Hyper-parameters shared by the preference losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub tau: f64,
    pub lambda_orpo: f64,
    pub weight_placement: WeightPlacement,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 5000.0,
            tau: 0.01,
            lambda_orpo: 0.2,
            weight_placement: WeightPlacement::OutsideLogsigmoid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if !(self.lambda_orpo >= 0.0 && self.lambda_orpo.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_orpo must be non-negative, got {}",
                self.lambda_orpo
            )));
        }
        Ok(())
    }
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable `sigmoid(x)`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(beta/2) * gap`; positive when the model favors the winner more than the
/// reference does.
pub fn rpo_inner(e: &PairErrors, beta: f64) -> f64 {
    -0.5 * beta * e.gap()
}

/// Partials of `inner` w.r.t. the four fields, times `scale`.
fn inner_grad(beta: f64, scale: f64) -> PairErrorsGrad {
    let k = -0.5 * beta * scale;
    PairErrorsGrad {
        d_theta_w: k,
        d_ref_w: -k,
        d_theta_l: -k,
        d_ref_l: k,
    }
}

fn validate_all(cells: &[PairErrors]) -> Result<()> {
    cells.iter().try_for_each(PairErrors::validate)
}

/// Weighted relative preference loss over the full winner/loser grid.
pub fn diffusion_rpo_loss(grid: &ErrorGrid, w: &WeightMatrix, cfg: &LossConfig) -> Result<f64> {
    diffusion_rpo_loss_with_grad(grid, w, cfg).map(|(l, _)| l)
}

pub fn diffusion_rpo_loss_with_grad(
    grid: &ErrorGrid,
    w: &WeightMatrix,
    cfg: &LossConfig,
) -> Result<(f64, Vec<PairErrorsGrad>)> {
    check_dim(grid.size(), w.size())?;
    validate_all(grid.cells())?;
    let m = grid.size() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(grid.cells().len());
    for (cell, &omega) in grid.cells().iter().zip(w.entries()) {
        let z = rpo_inner(cell, cfg.beta);
        match cfg.weight_placement {
            WeightPlacement::OutsideLogsigmoid => {
                loss -= omega * log_sigmoid(z);
                // d/dz of -omega log sigmoid(z) / M
                grads.push(inner_grad(cfg.beta, -omega * sigmoid(-z) / m));
            }
            WeightPlacement::InsideLogsigmoid => {
                loss -= log_sigmoid(omega * z);
                grads.push(inner_grad(cfg.beta, -omega * sigmoid(-omega * z) / (m * m)));
            }
        }
    }
    let loss = match cfg.weight_placement {
        WeightPlacement::OutsideLogsigmoid => loss / m,
        WeightPlacement::InsideLogsigmoid => loss / (m * m),
    };
    Ok((loss, grads))
}

/// Pairwise loss on matched pairs: mean of `-log sigmoid(inner)`.
pub fn diffusion_dpo_loss(pairs: &[PairErrors], cfg: &LossConfig) -> Result<f64> {
    diffusion_dpo_loss_with_grad(pairs, cfg).map(|(l, _)| l)
}

pub fn diffusion_dpo_loss_with_grad(
    pairs: &[PairErrors],
    cfg: &LossConfig,
) -> Result<(f64, Vec<PairErrorsGrad>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    validate_all(pairs)?;
    let m = pairs.len() as f64;
    let mut loss = 0.0;
    let grads = pairs
        .iter()
        .map(|e| {
            let z = rpo_inner(e, cfg.beta);
            loss -= log_sigmoid(z);
            inner_grad(cfg.beta, -sigmoid(-z) / m)
        })
        .collect();
    Ok((loss / m, grads))
}

/// Mean winner squared error.
pub fn sft_loss(mse_theta_w: &[f64]) -> Result<f64> {
    if mse_theta_w.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for &v in mse_theta_w {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidErrors(v));
        }
    }
    Ok(mse_theta_w.iter().sum::<f64>() / mse_theta_w.len() as f64)
}

/// Values below this are raised to it before `log(1 - exp(-mse/2))`.
pub const MSE_CLAMP: f64 = 1e-8;
/// Values at or below this are rejected outright.
pub const MSE_FLOOR: f64 = 1e-12;

/// Log-odds of the step likelihood under the density approximation
/// `p = exp(-mse/2)`: `log p - log(1 - p)`, and its derivative in `mse`.
fn log_odds(mse: f64) -> Result<(f64, f64)> {
    if mse <= MSE_FLOOR {
        return Err(Error::DegenerateMse(mse));
    }
    let (m, active) = if mse < MSE_CLAMP {
        (MSE_CLAMP, false)
    } else {
        (mse, true)
    };
    // log(1 - exp(-m/2)) == ln(-expm1(-m/2))
    let one_minus_p = -(-0.5 * m).exp_m1();
    let value = -0.5 * m - one_minus_p.ln();
    let deriv = if active { -0.5 / one_minus_p } else { 0.0 };
    Ok((value, deriv))
}

/// Odds-ratio term argument for one pairing and its partials in
/// `(mse_theta_w, mse_theta_l)`.
fn odds_ratio(e: &PairErrors) -> Result<(f64, f64, f64)> {
    let (gw, dw) = log_odds(e.mse_theta_w)?;
    let (gl, dl) = log_odds(e.mse_theta_l)?;
    Ok((gw - gl, dw, -dl))
}

/// Reference-free odds-ratio loss with relative weighting:
/// `(1/M) sum_ij w_ij [mse_theta_w - lambda * log sigmoid(q_ij)]`, where
/// `q_ij` is the log odds ratio of winner `i` against loser `j`.
pub fn orrpo_loss(grid: &ErrorGrid, w: &WeightMatrix, cfg: &LossConfig) -> Result<f64> {
    orrpo_loss_with_grad(grid, w, cfg).map(|(l, _)| l)
}

pub fn orrpo_loss_with_grad(
    grid: &ErrorGrid,
    w: &WeightMatrix,
    cfg: &LossConfig,
) -> Result<(f64, Vec<PairErrorsGrad>)> {
    check_dim(grid.size(), w.size())?;
    validate_all(grid.cells())?;
    let m = grid.size() as f64;
    let lambda = cfg.lambda_orpo;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(grid.cells().len());
    for (cell, &omega) in grid.cells().iter().zip(w.entries()) {
        let mut g = PairErrorsGrad {
            d_theta_w: omega / m,
            ..Default::default()
        };
        loss += omega * cell.mse_theta_w;
        if lambda > 0.0 {
            let (q, dq_w, dq_l) = odds_ratio(cell)?;
            loss -= omega * lambda * log_sigmoid(q);
            let outer = -omega * lambda * sigmoid(-q) / m;
            g.d_theta_w += outer * dq_w;
            g.d_theta_l += outer * dq_l;
        }
        grads.push(g);
    }
    Ok((loss / m, grads))
}

/// Diagonal-only odds-ratio loss: [`orrpo_loss`] restricted to matched pairs
/// with unit weight.
pub fn orpo_loss(pairs: &[PairErrors], cfg: &LossConfig) -> Result<f64> {
    orpo_loss_with_grad(pairs, cfg).map(|(l, _)| l)
}

pub fn orpo_loss_with_grad(
    pairs: &[PairErrors],
    cfg: &LossConfig,
) -> Result<(f64, Vec<PairErrorsGrad>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    validate_all(pairs)?;
    let m = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for e in pairs {
        let mut g = PairErrorsGrad {
            d_theta_w: 1.0 / m,
            ..Default::default()
        };
        loss += e.mse_theta_w;
        if cfg.lambda_orpo > 0.0 {
            let (q, dq_w, dq_l) = odds_ratio(e)?;
            loss -= cfg.lambda_orpo * log_sigmoid(q);
            let outer = -cfg.lambda_orpo * sigmoid(-q) / m;
            g.d_theta_w += outer * dq_w;
            g.d_theta_l += outer * dq_l;
        }
        grads.push(g);
    }
    Ok((loss / m, grads))
}
