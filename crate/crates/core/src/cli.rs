//! Command-line front end.
//!
//! Every verb resolves one [`ExperimentConfig`] (defaults, then `--config`,
//! then `DRPO_SEED`, then `--set`, then dedicated flags), writes its outputs
//! under `--out`, and records a `manifest.json` there.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, save_dataset, PreferencePair};
use crate::error::{Error, Result};
use crate::eval::{self, prompt_seed};
use crate::experiment::ExperimentConfig;
use crate::model::LossKind;
use crate::train::{write_metrics, Checkpoint};

#[derive(Debug, Parser)]
#[command(
    name = "drpo",
    version,
    about = "Relative preference optimization for toy diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a preference dataset and write it as JSON lines.
    GenData(Common),
    /// Pretrain a base model, run the optional supervised stage, then the preference stage.
    Train(Common),
    /// Compare a trained checkpoint against an opponent: Fréchet distance, reward, win rate.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Opponent: `base`, `sft` (checkpoints in the output directory) or a checkpoint path.
        #[arg(long, default_value = "base")]
        against: String,
        /// Candidate checkpoint; defaults to `final.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint for one prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from; defaults to `final.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt class to condition on.
        #[arg(long, default_value_t = 0)]
        prompt: usize,
        /// Number of samples.
        #[arg(short = 'n', long, default_value_t = 100)]
        count: usize,
    },
    /// Sweep the temperature of the preference stage and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated temperature grid; defaults to `ablation_taus`.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Start and reference checkpoint; by default the base and supervised stages are trained first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the contrastive weight matrix of the first minibatch.
    Weights(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "drpo-out")]
    out: PathBuf,
    /// Preference dataset (JSON lines) to use instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Preference loss: rpo, dpo, sft, orpo or orrpo.
    #[arg(long)]
    loss: Option<String>,
    /// Softmax temperature of the contrastive weights.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Preference strength.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Preference-stage optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `argv` (including the program name), runs the verb and returns
/// the process exit code: 0 on success, 1 for bad usage, config or input
/// files, 2 for runtime failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::ConfigConflict(_)
        | Error::UnknownLossKind(_)
        | Error::Parse { .. }
        | Error::InvalidRange(_)
        | Error::NonPositiveTemperature(_)
        | Error::InvalidArch(_)
        | Error::InvalidTransform(_)
        | Error::UnknownPrompt(_)
        | Error::InvalidK(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyBatch
        | Error::CorruptHeader(_)
        | Error::VersionMismatch { .. } => 1,
        Error::Divergence { .. }
        | Error::Io(_)
        | Error::TimestepOutOfRange { .. }
        | Error::ZeroProjection(_)
        | Error::DegenerateMse(_)
        | Error::InvalidErrors(_)
        | Error::InsufficientSamples { .. }
        | Error::NonPsd(_) => 2,
    }
}

/// Resolved inputs of one invocation plus the manifest being assembled.
struct Session {
    verb: &'static str,
    cfg: ExperimentConfig,
    out: PathBuf,
    inputs: Vec<(String, String)>,
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Session {
    fn open(verb: &'static str, c: &Common) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut cfg = match &c.config {
            Some(path) => {
                let bytes = read_input(path)?;
                inputs.push((format!("config:{}", path.display()), content_hash(&bytes)));
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        for o in &c.overrides {
            cfg.set(o)?;
        }
        if let Some(l) = &c.loss {
            cfg.loss = l.parse::<LossKind>()?;
        }
        if let Some(t) = c.tau {
            cfg.tau = t;
        }
        if let Some(b) = c.beta {
            cfg.beta = b;
        }
        if let Some(s) = c.steps {
            cfg.steps = s;
        }
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        fs::create_dir_all(&c.out)?;
        Ok(Self {
            verb,
            cfg,
            out: c.out.clone(),
            inputs,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let bytes = read_input(path)?;
        self.inputs.push((
            format!("checkpoint:{}", path.display()),
            content_hash(&bytes),
        ));
        Checkpoint::from_bytes(&bytes)
    }

    /// The `--data` file if given, otherwise a freshly generated dataset.
    fn dataset(&mut self, data: &Option<PathBuf>) -> Result<Vec<PreferencePair>> {
        match data {
            Some(path) => {
                let bytes = read_input(path)?;
                self.inputs
                    .push((format!("data:{}", path.display()), content_hash(&bytes)));
                load_dataset(path)
            }
            None => self.cfg.dataset(),
        }
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        fs::write(self.path(name), ckpt.to_bytes())?;
        Ok(())
    }

    fn finish(self, outputs: &[&str]) -> Result<()> {
        let config_text = self.cfg.to_toml();
        let mut inputs = self.inputs.clone();
        inputs.push((
            "resolved-config".into(),
            content_hash(config_text.as_bytes()),
        ));
        inputs.sort();
        let tree: String = inputs.iter().map(|(k, h)| format!("{h} {k}\n")).collect();
        let manifest = json!({
            "verb": self.verb,
            "config": self.cfg,
            "seeds": self.cfg.seeds(),
            "inputs": inputs.iter().map(|(k, h)| json!({"name": k, "hash": h})).collect::<Vec<_>>(),
            "input_hash": content_hash(tree.as_bytes()),
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(self.path("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::GenData(c) => {
            let mut s = Session::open("gen-data", &c)?;
            let data = s.dataset(&c.data)?;
            save_dataset(&data, &s.path("dataset.jsonl"))?;
            println!(
                "wrote {} pairs to {}",
                data.len(),
                s.path("dataset.jsonl").display()
            );
            s.finish(&["dataset.jsonl"])
        }
        Verb::Train(c) => {
            let mut s = Session::open("train", &c)?;
            let data = s.dataset(&c.data)?;
            save_dataset(&data, &s.path("dataset.jsonl"))?;
            let run = s.cfg.run(&data)?;
            let mut outputs = vec!["dataset.jsonl", "base.ckpt", "metrics_base.csv"];
            s.save("base.ckpt", &run.base.checkpoint)?;
            write_metrics(&run.base.metrics, &s.path("metrics_base.csv"))?;
            if let Some(sft) = &run.sft {
                s.save("sft.ckpt", &sft.checkpoint)?;
                write_metrics(&sft.metrics, &s.path("metrics_sft.csv"))?;
                outputs.extend(["sft.ckpt", "metrics_sft.csv"]);
            }
            s.save("final.ckpt", &run.preference.checkpoint)?;
            write_metrics(&run.preference.metrics, &s.path("metrics.csv"))?;
            outputs.extend(["final.ckpt", "metrics.csv"]);
            if let Some(last) = run.preference.metrics.last() {
                println!(
                    "{} finished: loss {:.6}, implicit accuracy {:.3}",
                    s.cfg.loss, last.loss, last.implicit_accuracy
                );
            }
            s.finish(&outputs)
        }
        Verb::Eval {
            common,
            against,
            checkpoint,
        } => {
            let mut s = Session::open("eval", &common)?;
            let cand_path = checkpoint.unwrap_or_else(|| s.path("final.ckpt"));
            let opp_path = match against.as_str() {
                "base" => s.path("base.ckpt"),
                "sft" => s.path("sft.ckpt"),
                other => PathBuf::from(other),
            };
            let cand = s.checkpoint(&cand_path)?;
            let opp = s.checkpoint(&opp_path)?;
            let wr = s.cfg.win_rate(&cand, &opp)?;
            let mut csv = String::from("model,checkpoint,frechet_distance,mean_reward,win_rate\n");
            for (name, path, ckpt, rate) in [
                ("candidate", &cand_path, &cand, wr.rate),
                (against.as_str(), &opp_path, &opp, 1.0 - wr.rate),
            ] {
                let fd = s.cfg.style_frechet(ckpt)?;
                let reward = s.cfg.mean_reward(ckpt)?;
                println!("{name}: frechet {fd:.4}, reward {reward:.4}, win rate {rate:.3}");
                csv.push_str(&format!("{name},{},{fd},{reward},{rate}\n", path.display()));
            }
            fs::write(s.path("eval.csv"), csv)?;
            fs::write(s.path("win_rate.csv"), wr.to_csv())?;
            s.finish(&["eval.csv", "win_rate.csv"])
        }
        Verb::Sample {
            common,
            checkpoint,
            prompt,
            count,
        } => {
            let mut s = Session::open("sample", &common)?;
            let ckpt = s.checkpoint(&checkpoint.unwrap_or_else(|| s.path("final.ckpt")))?;
            let features = s.cfg.base_config()?.prompt_features(prompt)?;
            let seed = prompt_seed(s.cfg.seeds().eval, prompt);
            let mut lines = String::new();
            for y in eval::reverse_sample(&ckpt, &features, count, seed)? {
                lines.push_str(&json!({"prompt_id": prompt, "y": y}).to_string());
                lines.push('\n');
            }
            fs::write(s.path("samples.jsonl"), lines)?;
            println!(
                "wrote {count} samples to {}",
                s.path("samples.jsonl").display()
            );
            s.finish(&["samples.jsonl"])
        }
        Verb::Ablate {
            common,
            taus,
            checkpoint,
        } => {
            let mut s = Session::open("ablate", &common)?;
            let data = s.dataset(&common.data)?;
            let start = match &checkpoint {
                Some(p) => s.checkpoint(p)?,
                None => {
                    let base = s.cfg.pretrain(&data)?.checkpoint;
                    if s.cfg.sft_steps > 0 {
                        s.cfg.sft_stage(&data, &base)?.checkpoint
                    } else {
                        base
                    }
                }
            };
            let grid = if taus.is_empty() {
                s.cfg.ablation_taus.clone()
            } else {
                taus
            };
            let csv = eval::ablation_csv(&s.cfg.ablation_sweep(&data, &start, &grid)?);
            print!("{csv}");
            fs::write(s.path("ablation.csv"), csv)?;
            s.finish(&["ablation.csv"])
        }
        Verb::Weights(c) => {
            let mut s = Session::open("weights", &c)?;
            let data = s.dataset(&c.data)?;
            let m = s.cfg.batch_size.min(data.len());
            let w = s.cfg.batch_weights(&data[..m], s.cfg.tau)?;
            let mut csv = String::new();
            for i in 0..w.size() {
                let row: Vec<String> = w.row(i).iter().map(|x| x.to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            print!("{csv}");
            fs::write(s.path("weights.csv"), csv)?;
            s.finish(&["weights.csv"])
        }
    }
}
