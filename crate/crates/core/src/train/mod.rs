//! Training loops: supervised fine-tuning on preferred samples and
//! preference fine-tuning against a frozen reference.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreferencePair;
use crate::embed::{embed_pair, Codebook, CodebookSpec, JointEmbedding, WeightMatrix};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, WeightPlacement};
use crate::model::{
    loss_gradient, scaled_lr, LossKind, ObjectiveOptions, OptimizerState, PosteriorMode,
    TimestepMode,
};

/// Consecutive non-finite losses tolerated before a run is aborted.
pub const DIVERGENCE_STREAK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OneStage,
    #[default]
    TwoStage,
}

/// Which pairings a preference step contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Contrastive for `rpo`/`orrpo`, matched pairs only otherwise.
    #[default]
    Auto,
    Diagonal,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub beta: f64,
    pub tau: f64,
    pub lambda_orpo: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub stage: Stage,
    pub weight_placement: WeightPlacement,
    pub timestep_mode: TimestepMode,
    pub posterior_mode: PosteriorMode,
    pub weighting: Weighting,
    pub grad_accum: usize,
    /// Seed and output width of the frozen joint encoder used for weights.
    pub codebook_seed: u64,
    pub embed_dim: usize,
    /// Record real elapsed time in the metrics; off keeps reruns byte-identical.
    pub record_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Rpo,
            beta: 5000.0,
            tau: 0.01,
            lambda_orpo: 0.2,
            batch_size: 16,
            steps: 2000,
            base_lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            stage: Stage::TwoStage,
            weight_placement: WeightPlacement::OutsideLogsigmoid,
            timestep_mode: TimestepMode::Shared,
            posterior_mode: PosteriorMode::Mean,
            weighting: Weighting::Auto,
            grad_accum: 1,
            codebook_seed: 17,
            embed_dim: 8,
            record_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        self.loss_config().validate()?;
        self.contrastive()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            tau: self.tau,
            lambda_orpo: self.lambda_orpo,
            weight_placement: self.weight_placement,
        }
    }

    /// Whether preference steps build a contrastive weight matrix.
    pub fn contrastive(&self) -> Result<bool> {
        match (self.weighting, self.loss_kind.uses_grid()) {
            (Weighting::Auto, grid) => Ok(grid),
            (Weighting::Diagonal, _) => Ok(false),
            (Weighting::Contrastive, true) => Ok(true),
            (Weighting::Contrastive, false) => Err(Error::ConfigConflict(format!(
                "loss `{}` only contrasts matched pairs and cannot take a contrastive weight matrix",
                self.loss_kind
            ))),
        }
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            timestep_mode: self.timestep_mode,
            posterior: self.posterior_mode,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub mean_winner_mse: f64,
    pub mean_loser_mse: f64,
    pub implicit_accuracy: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,loss,mean_winner_mse,mean_loser_mse,implicit_accuracy,wall_ms";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.loss, r.mean_winner_mse, r.mean_loser_mse, r.implicit_accuracy, r.wall_ms
        )
        .expect("writing to a String");
    }
    s
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Supervised fine-tuning on the preferred samples, starting from `init`,
/// with step size `base_lr`.
pub fn run_sft(
    cfg: &TrainConfig,
    dataset: &[PreferencePair],
    init: &Checkpoint,
) -> Result<TrainOutput> {
    let cfg = TrainConfig {
        loss_kind: LossKind::Sft,
        weighting: Weighting::Diagonal,
        ..cfg.clone()
    };
    let lr = cfg.base_lr;
    train_loop(&cfg, dataset, init, lr)
}

/// Preference fine-tuning with the reference frozen at `init`. The step size
/// is `(2000 / beta) * base_lr` whatever the loss, so runs that differ only
/// in the loss share one learning rate.
pub fn run_preference(
    cfg: &TrainConfig,
    dataset: &[PreferencePair],
    init: &Checkpoint,
) -> Result<TrainOutput> {
    train_loop(cfg, dataset, init, scaled_lr(cfg.base_lr, cfg.beta))
}

/// Same pairs with the roles of preferred and rejected samples exchanged.
/// Supervised training on the result fits the rejected-side distribution.
pub fn swap_roles(dataset: &[PreferencePair]) -> Vec<PreferencePair> {
    dataset
        .iter()
        .map(|p| PreferencePair {
            y_w: p.y_l.clone(),
            y_l: p.y_w.clone(),
            ..p.clone()
        })
        .collect()
}

fn train_loop(
    cfg: &TrainConfig,
    dataset: &[PreferencePair],
    init: &Checkpoint,
    lr: f64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let reference = init.params.clone();
    let schedule = &init.schedule;
    let mut params = init.params.clone();
    let loss_cfg = cfg.loss_config();
    let opts = cfg.objective_options();
    let contrastive = cfg.contrastive()?;
    let codebook = if contrastive {
        let first = &dataset[0];
        Some(Codebook::random(CodebookSpec {
            seed: cfg.codebook_seed,
            in_dim: first.y_w.len() + first.prompt_features.len(),
            out_dim: cfg.embed_dim,
        })?)
    } else {
        None
    };

    let mut opt = OptimizerState::new(params.len(), lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.batch_size.min(dataset.len());
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut streak = 0;

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut row = MetricsRow {
            step,
            loss: 0.0,
            mean_winner_mse: 0.0,
            mean_loser_mse: 0.0,
            implicit_accuracy: 0.0,
            wall_ms: 0,
        };
        for _ in 0..cfg.grad_accum {
            let batch: Vec<PreferencePair> = index::sample(&mut rng, dataset.len(), m)
                .into_iter()
                .map(|i| dataset[i].clone())
                .collect();
            let w = match &codebook {
                Some(cb) => contrastive_weights(&batch, cb, cfg.tau)?,
                None => WeightMatrix::identity(m),
            };
            let eval = loss_gradient(
                &params,
                &reference,
                &batch,
                &w,
                schedule,
                &loss_cfg,
                cfg.loss_kind,
                opts,
                &mut rng,
            )?;
            for (g, e) in grad.iter_mut().zip(&eval.grad) {
                *g += e;
            }
            row.loss += eval.loss;
            row.mean_winner_mse += eval.stats.mean_winner_mse;
            row.mean_loser_mse += eval.stats.mean_loser_mse;
            row.implicit_accuracy += eval.stats.implicit_accuracy;
        }
        let k = cfg.grad_accum as f64;
        if cfg.grad_accum > 1 {
            grad.iter_mut().for_each(|g| *g /= k);
            row.loss /= k;
            row.mean_winner_mse /= k;
            row.mean_loser_mse /= k;
            row.implicit_accuracy /= k;
        }

        let finite = row.loss.is_finite() && grad.iter().all(|g| g.is_finite());
        if finite {
            streak = 0;
            opt.step(params.theta_mut(), &grad)?;
        } else {
            streak += 1;
        }
        if cfg.record_wall_ms {
            row.wall_ms = start.elapsed().as_millis() as u64;
        }
        metrics.push(row);
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Divergence { step, streak });
        }
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            params,
            schedule: schedule.clone(),
            config: cfg.to_toml(),
        },
        metrics,
    })
}

/// Softmax weights over the joint embeddings of a minibatch's winners and losers.
pub fn contrastive_weights(
    batch: &[PreferencePair],
    cb: &Codebook,
    tau: f64,
) -> Result<WeightMatrix> {
    let embed = |y: &[f64], x: &[f64]| embed_pair(y, x, cb);
    let winners: Vec<JointEmbedding> = batch
        .iter()
        .map(|p| embed(&p.y_w, &p.prompt_features))
        .collect::<Result<_>>()?;
    let losers: Vec<JointEmbedding> = batch
        .iter()
        .map(|p| embed(&p.y_l, &p.prompt_features))
        .collect::<Result<_>>()?;
    WeightMatrix::from_embeddings(&winners, &losers, tau)
}
