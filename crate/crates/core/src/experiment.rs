//! Flat experiment configuration and the end-to-end pipeline built on it:
//! dataset generation, base pretraining, supervised stage, preference stage
//! and evaluation.
//!
//! Precedence is built-in defaults, then the TOML file, then the `DRPO_SEED`
//! environment variable for the master seed, then `key=value` overrides.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_4;

use crate::data::{
    build_human_pref_dataset, build_style_dataset, BaseConfig, Component, HumanPrefConfig,
    PreferencePair, StyleTransform,
};
use crate::embed::{Codebook, CodebookSpec, WeightMatrix};
use crate::error::{Error, Result};
use crate::eval::{self, AblationRow, EvalPrompt, ToyReward, WinRate};
use crate::losses::WeightPlacement;
use crate::model::{init_params, Activation, Arch, LossKind, PosteriorMode, TimestepMode};
use crate::schedule::DiffusionSchedule;
use crate::train::{self, Checkpoint, Stage, TrainConfig, TrainOutput, Weighting};

pub const SEED_ENV: &str = "DRPO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Style,
    HumanPref,
}

/// Every tunable of a run, as one flat key/value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; the per-stage seeds below are offsets from it.
    pub seed: u64,

    pub dataset: DatasetKind,
    pub n_pairs: usize,
    /// Per-prompt lists of component means. Empty selects the built-in layout.
    pub prompt_means: Vec<Vec<Vec<f64>>>,
    pub component_var: f64,
    pub feature_noise_dim: usize,
    pub rotation: f64,
    pub scale: f64,
    pub shift: Vec<f64>,
    pub hp_perturbation: Vec<f64>,
    pub hp_spread: f64,
    pub hp_scorer_noise: f64,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub sft_steps: usize,
    pub sft_lr: f64,

    pub loss: LossKind,
    pub beta: f64,
    pub tau: f64,
    pub lambda_orpo: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub stage: Stage,
    pub weight_placement: WeightPlacement,
    pub timestep_mode: TimestepMode,
    pub posterior_mode: PosteriorMode,
    pub weighting: Weighting,
    pub grad_accum: usize,
    pub embed_dim: usize,
    pub record_wall_ms: bool,

    pub eval_samples: usize,
    pub win_prompts: usize,
    pub win_k: usize,
    pub ablation_taus: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetKind::Style,
            n_pairs: 2000,
            prompt_means: Vec::new(),
            component_var: 0.09,
            feature_noise_dim: 2,
            rotation: FRAC_PI_4,
            scale: 1.2,
            shift: vec![1.0, -1.0],
            hp_perturbation: vec![0.8, -0.4],
            hp_spread: 2.0,
            hp_scorer_noise: 0.5,
            diffusion_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            hidden: vec![64, 64],
            time_dim: 8,
            activation: Activation::Tanh,
            pretrain_steps: 3000,
            pretrain_lr: 5e-3,
            sft_steps: 200,
            sft_lr: 5e-3,
            loss: LossKind::Rpo,
            beta: 5000.0,
            tau: 0.01,
            lambda_orpo: 0.2,
            batch_size: 16,
            steps: 2000,
            base_lr: 5e-3,
            weight_decay: 0.0,
            stage: Stage::TwoStage,
            weight_placement: WeightPlacement::OutsideLogsigmoid,
            timestep_mode: TimestepMode::Shared,
            posterior_mode: PosteriorMode::Mean,
            weighting: Weighting::Auto,
            grad_accum: 1,
            embed_dim: 8,
            record_wall_ms: false,
            eval_samples: 1000,
            win_prompts: 200,
            win_k: 5,
            ablation_taus: vec![0.01, 0.1, 1.0, 2.0, 5.0],
        }
    }
}

/// Seeds derived from the master seed, recorded in run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub init: u64,
    pub pretrain: u64,
    pub sft: u64,
    pub preference: u64,
    pub codebook: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let at = |k: u64| master.wrapping_mul(1_000_003).wrapping_add(k);
        Self {
            master,
            data: at(1),
            init: at(2),
            pretrain: at(3),
            sft: at(4),
            preference: at(5),
            codebook: at(6),
            eval: at(7),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        let mut table = match toml::Value::try_from(&*self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    /// Replaces the master seed with `DRPO_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_config()?.validate()?;
        self.transform()?;
        self.schedule()?;
        self.arch()?.validate()?;
        self.train_config().validate()?;
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be at least 1".into()));
        }
        if self.ablation_taus.is_empty() {
            return Err(Error::Config("ablation_taus must not be empty".into()));
        }
        if let Some(t) = self.ablation_taus.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::NonPositiveTemperature(*t));
        }
        Ok(())
    }

    pub fn base_config(&self) -> Result<BaseConfig> {
        let mut base = BaseConfig::default();
        if !self.prompt_means.is_empty() {
            base.prompts = self
                .prompt_means
                .iter()
                .map(|means| {
                    means
                        .iter()
                        .map(|m| Component::isotropic(m.clone(), self.component_var))
                        .collect()
                })
                .collect();
        } else {
            for comps in &mut base.prompts {
                for c in comps.iter_mut() {
                    *c = Component::isotropic(c.mean.clone(), self.component_var);
                }
            }
        }
        base.feature_noise_dim = self.feature_noise_dim;
        base.feature_seed = self.seeds().data ^ 0x5eed;
        base.validate()?;
        Ok(base)
    }

    pub fn transform(&self) -> Result<StyleTransform> {
        StyleTransform::new(self.rotation, self.scale, self.shift.clone())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn arch(&self) -> Result<Arch> {
        let base = self.base_config()?;
        let mut arch = Arch::dense(base.dim(), base.feature_dim(), self.time_dim, &self.hidden);
        arch.activation = self.activation;
        Ok(arch)
    }

    /// Preference-stage training settings.
    pub fn train_config(&self) -> TrainConfig {
        let seeds = self.seeds();
        TrainConfig {
            loss_kind: self.loss,
            beta: self.beta,
            tau: self.tau,
            lambda_orpo: self.lambda_orpo,
            batch_size: self.batch_size,
            steps: self.steps,
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            seed: seeds.preference,
            stage: self.stage,
            weight_placement: self.weight_placement,
            timestep_mode: self.timestep_mode,
            posterior_mode: self.posterior_mode,
            weighting: self.weighting,
            grad_accum: self.grad_accum,
            codebook_seed: seeds.codebook,
            embed_dim: self.embed_dim,
            record_wall_ms: self.record_wall_ms,
        }
    }

    fn supervised_config(&self, steps: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_kind: LossKind::Sft,
            steps,
            base_lr: lr,
            seed,
            weighting: Weighting::Diagonal,
            ..self.train_config()
        }
    }

    pub fn dataset(&self) -> Result<Vec<PreferencePair>> {
        let base = self.base_config()?;
        let seed = self.seeds().data;
        match self.dataset {
            DatasetKind::Style => {
                build_style_dataset(&base, &self.transform()?, self.n_pairs, seed)
            }
            DatasetKind::HumanPref => {
                let hp = HumanPrefConfig {
                    perturbation: self.hp_perturbation.clone(),
                    spread: self.hp_spread,
                    scorer_noise: self.hp_scorer_noise,
                };
                build_human_pref_dataset(&base, &hp, self.n_pairs, seed)
            }
        }
    }

    /// Freshly initialized network under the configured schedule.
    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: init_params(self.arch()?, self.seeds().init)?,
            schedule: self.schedule()?,
            config: self.to_toml(),
        })
    }

    /// Base model: supervised training on the rejected samples, the stand-in
    /// for a pretrained generator that has never seen the preferred style.
    pub fn pretrain(&self, dataset: &[PreferencePair]) -> Result<TrainOutput> {
        let init = self.initial_checkpoint()?;
        if self.pretrain_steps == 0 {
            return Ok(TrainOutput {
                checkpoint: init,
                metrics: Vec::new(),
            });
        }
        let cfg =
            self.supervised_config(self.pretrain_steps, self.pretrain_lr, self.seeds().pretrain);
        train::run_sft(&cfg, &train::swap_roles(dataset), &init)
    }

    /// First stage of a two-stage run: supervised training on the winners.
    pub fn sft_stage(&self, dataset: &[PreferencePair], base: &Checkpoint) -> Result<TrainOutput> {
        let cfg = self.supervised_config(self.sft_steps, self.sft_lr, self.seeds().sft);
        train::run_sft(&cfg, dataset, base)
    }

    /// Preference stage with the reference frozen at `init`.
    pub fn preference_stage(
        &self,
        dataset: &[PreferencePair],
        init: &Checkpoint,
    ) -> Result<TrainOutput> {
        train::run_preference(&self.train_config(), dataset, init)
    }

    /// Base, optional supervised stage, preference stage.
    pub fn run(&self, dataset: &[PreferencePair]) -> Result<RunOutputs> {
        self.validate()?;
        let base = self.pretrain(dataset)?;
        let sft = match self.stage {
            Stage::TwoStage if self.sft_steps > 0 => {
                Some(self.sft_stage(dataset, &base.checkpoint)?)
            }
            _ => None,
        };
        let start = sft.as_ref().map_or(&base.checkpoint, |s| &s.checkpoint);
        let preference = self.preference_stage(dataset, start)?;
        Ok(RunOutputs {
            base,
            sft,
            preference,
        })
    }

    pub fn style_frechet(&self, ckpt: &Checkpoint) -> Result<f64> {
        eval::style_frechet(
            ckpt,
            &self.base_config()?,
            &self.transform()?,
            self.eval_samples,
            self.seeds().eval,
        )
    }

    pub fn mean_reward(&self, ckpt: &Checkpoint) -> Result<f64> {
        eval::mean_reward(
            ckpt,
            &self.base_config()?,
            &self.transform()?,
            self.eval_samples,
            self.seeds().eval,
        )
    }

    /// Evaluation prompts cycling through the prompt classes.
    pub fn eval_prompts(&self) -> Result<Vec<EvalPrompt>> {
        let base = self.base_config()?;
        (0..self.win_prompts)
            .map(|i| {
                let id = i % base.num_prompts();
                Ok(EvalPrompt {
                    id,
                    features: base.prompt_features(id)?,
                })
            })
            .collect()
    }

    /// Win rate of `a` over `b` under the styled-target toy reward.
    pub fn win_rate(&self, a: &Checkpoint, b: &Checkpoint) -> Result<WinRate> {
        let base = self.base_config()?;
        let transform = self.transform()?;
        let rewards = (0..base.num_prompts())
            .map(|p| ToyReward::for_prompt(&base, &transform, p))
            .collect::<Result<Vec<_>>>()?;
        eval::win_rate(
            a,
            b,
            &self.eval_prompts()?,
            self.win_k,
            |id, y| rewards[id].score(y),
            self.seeds().eval,
        )
    }

    /// Runs the preference stage once per temperature from the same start
    /// checkpoint and seeds, then evaluates each result.
    pub fn ablation_sweep(
        &self,
        dataset: &[PreferencePair],
        start: &Checkpoint,
        taus: &[f64],
    ) -> Result<Vec<AblationRow>> {
        if taus.is_empty() {
            return Err(Error::Config("temperature grid must not be empty".into()));
        }
        taus.iter()
            .map(|&tau| {
                let cfg = ExperimentConfig {
                    tau,
                    ..self.clone()
                };
                let out = cfg.preference_stage(dataset, start)?;
                Ok(AblationRow {
                    tau,
                    final_loss: out.metrics.last().map_or(f64::NAN, |r| r.loss),
                    frechet_distance: cfg.style_frechet(&out.checkpoint)?,
                    mean_reward: cfg.mean_reward(&out.checkpoint)?,
                })
            })
            .collect()
    }

    /// Contrastive weights the preference stage would use on `batch`.
    pub fn batch_weights(&self, batch: &[PreferencePair], tau: f64) -> Result<WeightMatrix> {
        let first = batch.first().ok_or(Error::EmptyBatch)?;
        let cb = Codebook::random(CodebookSpec {
            seed: self.seeds().codebook,
            in_dim: first.y_w.len() + first.prompt_features.len(),
            out_dim: self.embed_dim,
        })?;
        train::contrastive_weights(batch, &cb, tau)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub base: TrainOutput,
    pub sft: Option<TrainOutput>,
    pub preference: TrainOutput,
}

impl RunOutputs {
    /// Checkpoint the preference stage started from.
    pub fn start(&self) -> &Checkpoint {
        self.sft
            .as_ref()
            .map_or(&self.base.checkpoint, |s| &s.checkpoint)
    }
}
