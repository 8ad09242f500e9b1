//! Acceptance suite. Prints one PASS/FAIL line per criterion to stderr
//! (uncaptured), then fails if any criterion failed.
//!
//! The toy criteria share one pipeline: pretrained base, supervised stage,
//! then preference runs from the supervised checkpoint. Its training time is
//! charged to criterion 6, the first one that needs it.

use std::f64::consts::LN_2;
use std::io::Write as _;
use std::time::{Duration, Instant};

use drpo::data::{load_dataset, save_dataset, PreferencePair};
use drpo::embed::{JointEmbedding, WeightMatrix};
use drpo::eval::{ablation_csv, AblationRow};
use drpo::experiment::ExperimentConfig;
use drpo::losses::{self, ErrorGrid, LossConfig, PairErrors, WeightPlacement};
use drpo::model::{init_params, loss_gradient, Arch, DenoiserParams, LossKind, ObjectiveOptions};
use drpo::schedule::DiffusionSchedule;
use drpo::train::{load_checkpoint, metrics_csv, save_checkpoint, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOY: &str = include_str!("../configs/toy.toml");
const LOGPROB_ORACLE: &str = include_str!("fixtures/logprob_coefficient_T1000.csv");

fn say(line: impl AsRef<str>) {
    let _ = writeln!(std::io::stderr(), "{}", line.as_ref());
}

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| normal(rng)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, m: usize, prompt_dim: usize) -> Vec<PreferencePair> {
    (0..m)
        .map(|i| PreferencePair {
            prompt_id: i,
            prompt_features: normal_vec(rng, prompt_dim),
            y_w: normal_vec(rng, 2),
            y_l: normal_vec(rng, 2),
        })
        .collect()
}

fn random_weights(rng: &mut ChaCha8Rng, m: usize, tau: f64) -> WeightMatrix {
    let d: Vec<f64> = (0..m * m).map(|_| rng.random_range(0.0..2.0)).collect();
    WeightMatrix::from_distances(m, &d, tau).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, m: usize, tied: bool) -> ErrorGrid {
    let cells = (0..m * m)
        .map(|_| {
            let tw = rng.random_range(0.0..4.0);
            let tl = rng.random_range(0.0..4.0);
            let (rw, rl) = if tied {
                (tw, tl)
            } else {
                (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0))
            };
            PairErrors::new(tw, rw, tl, rl)
        })
        .collect();
    ErrorGrid::new(m, cells).unwrap()
}

fn perturb(p: &DenoiserParams, rng: &mut ChaCha8Rng, scale: f64) -> DenoiserParams {
    let theta = p.theta().iter().map(|x| x + scale * normal(rng)).collect();
    DenoiserParams::from_theta(p.arch().clone(), theta).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let s = DiffusionSchedule::linear(50, 1e-3, 0.1).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let cfg = LossConfig {
            beta: [1.0, 10.0, 5000.0][rng.random_range(0..3)],
            tau: rng.random_range(0.01..5.0),
            ..Default::default()
        };
        let w = random_weights(&mut rng, m, cfg.tau);
        // error level: trained and reference errors coincide
        let grid = random_grid(&mut rng, m, true);
        let rpo = losses::diffusion_rpo_loss(&grid, &w, &cfg).unwrap();
        let dpo = losses::diffusion_dpo_loss(&grid.diagonal(), &cfg).unwrap();
        // network level: the trained network is the reference
        let p = init_params(Arch::dense(2, 3, 4, &[8]), rng.random()).unwrap();
        let batch = random_batch(&mut rng, m, 3);
        let seed: u64 = rng.random();
        let net = |kind| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            loss_gradient(
                &p,
                &p,
                &batch,
                &w,
                &s,
                &cfg,
                kind,
                ObjectiveOptions::default(),
                &mut r,
            )
            .unwrap()
            .loss
        };
        for v in [rpo, dpo, net(LossKind::Rpo), net(LossKind::Dpo)] {
            worst = worst.max((v - LN_2).abs());
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max |loss - log 2| = {worst:.3e} over 100 batches"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let s = DiffusionSchedule::linear(50, 1e-3, 0.1).unwrap();
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let cfg = LossConfig {
            beta: [0.5, 2.0, 10.0][rng.random_range(0..3)],
            ..Default::default()
        };
        let eye = WeightMatrix::identity(m);
        let grid = random_grid(&mut rng, m, false);
        let rpo = losses::diffusion_rpo_loss(&grid, &eye, &cfg).unwrap();
        let dpo = losses::diffusion_dpo_loss(&grid.diagonal(), &cfg).unwrap();
        worst = worst.max(rel(rpo, dpo));

        let r = init_params(Arch::dense(2, 2, 4, &[6]), rng.random()).unwrap();
        let p = perturb(&r, &mut rng, 0.1);
        let batch = random_batch(&mut rng, m, 2);
        let seed: u64 = rng.random();
        let net = |kind| {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            loss_gradient(
                &p,
                &r,
                &batch,
                &eye,
                &s,
                &cfg,
                kind,
                ObjectiveOptions::default(),
                &mut g,
            )
            .unwrap()
            .loss
        };
        worst = worst.max(rel(net(LossKind::Rpo), net(LossKind::Dpo)));
    }
    outcome(
        worst <= 1e-12,
        format!("max relative gap = {worst:.3e} over 100 batches"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut row_err: f64 = 0.0;
    let mut flat_err: f64 = 0.0;
    let mut min_mass: f64 = 1.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=12);
        let dim = rng.random_range(2..=6);
        let emb = |rng: &mut ChaCha8Rng| {
            (0..m)
                .map(|_| JointEmbedding::new(normal_vec(rng, dim)).unwrap())
                .collect::<Vec<_>>()
        };
        let (win, los) = (emb(&mut rng), emb(&mut rng));
        for tau in [1e-6, 0.01, 1.0, 5.0, 1e9] {
            let w = WeightMatrix::from_embeddings(&win, &los, tau).unwrap();
            for i in 0..m {
                row_err = row_err.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
            }
            if tau == 1e9 {
                let u = 1.0 / m as f64;
                flat_err = w
                    .entries()
                    .iter()
                    .fold(flat_err, |a, x| a.max((x - u).abs()));
            }
        }
        // distances separated by at least 1e-3 within each row
        let mut dist = Vec::with_capacity(m * m);
        let mut argmin = Vec::with_capacity(m);
        for _ in 0..m {
            let mut levels: Vec<f64> = (0..m).map(|k| k as f64 * 1.5e-3).collect();
            let offset = rng.random_range(0.0..1.0);
            for k in (1..m).rev() {
                levels.swap(k, rng.random_range(0..=k));
            }
            argmin.push(levels.iter().position(|&x| x == 0.0).unwrap());
            dist.extend(levels.iter().map(|x| x + offset));
        }
        let w = WeightMatrix::from_distances(m, &dist, 1e-6).unwrap();
        for (i, &j) in argmin.iter().enumerate() {
            min_mass = min_mass.min(w.get(i, j));
        }
    }

    // two-pair example; reference values from tests/oracles/weights_m2.py
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let e = |v: [f64; 2]| JointEmbedding::new(v.to_vec()).unwrap();
    let w = WeightMatrix::from_embeddings(
        &[e([1.0, 0.0]), e([0.0, 1.0])],
        &[e([1.0, 0.0]), e([s, s])],
        1.0,
    )
    .unwrap();
    let oracle = [
        0.572_704_292_795_536_9,
        0.427_295_707_204_463_1,
        0.330_238_450_673_343_1,
        0.669_761_549_326_656_9,
    ];
    let ex_err = w
        .entries()
        .iter()
        .zip(oracle)
        .fold(0.0_f64, |a, (x, o)| a.max((x - o).abs()));

    let ok = row_err <= 1e-9 && flat_err < 1e-6 && min_mass > 0.999 && ex_err <= 1e-10;
    outcome(
        ok,
        format!(
            "row-sum err {row_err:.1e}, tau=1e9 deviation {flat_err:.1e}, tau=1e-6 argmin mass >= {min_mass:.6}, example err {ex_err:.1e}"
        ),
    )
}

fn random_arch(rng: &mut ChaCha8Rng) -> Arch {
    loop {
        let prompt_dim = rng.random_range(0..=3);
        let time_dim = [2, 4][rng.random_range(0..2)];
        let hidden: Vec<usize> = if rng.random_bool(0.5) {
            vec![rng.random_range(1..=10)]
        } else {
            vec![rng.random_range(1..=6), rng.random_range(1..=6)]
        };
        let arch = Arch::dense(2, prompt_dim, time_dim, &hidden);
        if (10..=100).contains(&arch.param_count()) {
            return arch;
        }
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let s = DiffusionSchedule::linear(40, 1e-3, 0.1).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for kind in LossKind::ALL {
        for _ in 0..20 {
            let arch = random_arch(&mut rng);
            let r = init_params(arch, rng.random()).unwrap();
            let p = perturb(&r, &mut rng, 0.1);
            let m = rng.random_range(2..=4);
            let batch = random_batch(&mut rng, m, r.arch().prompt_dim());
            let cfg = LossConfig {
                beta: rng.random_range(0.5..8.0),
                tau: rng.random_range(0.1..2.0),
                lambda_orpo: rng.random_range(0.1..1.0),
                weight_placement: if rng.random_bool(0.5) {
                    WeightPlacement::OutsideLogsigmoid
                } else {
                    WeightPlacement::InsideLogsigmoid
                },
            };
            let w = random_weights(&mut rng, m, cfg.tau);
            let seed: u64 = rng.random();
            let eval = |q: &DenoiserParams| {
                let mut g = ChaCha8Rng::seed_from_u64(seed);
                loss_gradient(
                    q,
                    &r,
                    &batch,
                    &w,
                    &s,
                    &cfg,
                    kind,
                    ObjectiveOptions::default(),
                    &mut g,
                )
                .unwrap()
            };
            let grad = eval(&p).grad;
            for k in 0..p.len() {
                let shifted = |delta: f64| {
                    let mut theta = p.theta().to_vec();
                    theta[k] += delta;
                    eval(&DenoiserParams::from_theta(p.arch().clone(), theta).unwrap()).loss
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let scale = fd.abs().max(grad[k].abs()).max(1e-6);
                let rel = (fd - grad[k]).abs() / scale;
                worst = worst.max(rel);
                if rel > 1e-4 {
                    failures.push(format!("{kind} coord {k}: {} vs {fd}", grad[k]));
                }
            }
        }
    }
    let mut detail = format!("5 losses x 20 configurations, worst relative gap {worst:.2e}");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first failure {f}"));
    }
    outcome(failures.is_empty(), detail)
}

fn criterion_5() -> Outcome {
    let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for line in LOGPROB_ORACLE.lines().skip(1) {
        let (t, c) = line.split_once(',').unwrap();
        let t: usize = t.parse().unwrap();
        let c: f64 = c.parse().unwrap();
        worst = worst.max((s.logprob_coefficient(t).unwrap() - c).abs());
        rows += 1;
    }
    outcome(
        rows == 998 && worst <= 1e-12,
        format!("{rows} timesteps, max abs error {worst:.2e}"),
    )
}

/// Base and supervised checkpoints shared by the toy criteria.
struct Toy {
    cfg: ExperimentConfig,
    data: Vec<PreferencePair>,
    base: Checkpoint,
    sft: Checkpoint,
    rpo: Option<Checkpoint>,
}

fn toy_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(TOY).unwrap()
}

fn build_toy() -> Toy {
    let cfg = toy_config();
    let data = cfg.dataset().unwrap();
    let base = cfg.pretrain(&data).unwrap().checkpoint;
    let sft = cfg.sft_stage(&data, &base).unwrap().checkpoint;
    Toy {
        cfg,
        data,
        base,
        sft,
        rpo: None,
    }
}

fn write_artifact(name: &str, text: &str) {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(name), text).unwrap();
}

fn criterion_6(toy: &mut Toy) -> Outcome {
    let cfg = &toy.cfg;
    let fd_sft = cfg.style_frechet(&toy.sft).unwrap();
    let mut table = String::from("model,frechet_distance,mean_reward\n");
    table.push_str(&format!(
        "SFT,{fd_sft},{}\n",
        cfg.mean_reward(&toy.sft).unwrap()
    ));
    let mut results = Vec::new();
    for (name, kind) in [
        ("SFT+SFT", LossKind::Sft),
        ("SFT+DPO", LossKind::Dpo),
        ("SFT+RPO", LossKind::Rpo),
    ] {
        let run_cfg = ExperimentConfig {
            loss: kind,
            ..cfg.clone()
        };
        let out = run_cfg.preference_stage(&toy.data, &toy.sft).unwrap();
        let fd = run_cfg.style_frechet(&out.checkpoint).unwrap();
        let reward = run_cfg.mean_reward(&out.checkpoint).unwrap();
        table.push_str(&format!("{name},{fd},{reward}\n"));
        results.push((name, fd));
        if kind == LossKind::Rpo {
            toy.rpo = Some(out.checkpoint);
        }
    }
    write_artifact("style_comparison.csv", &table);
    for line in table.lines() {
        say(format!("    {line}"));
    }
    let fd_rpo = results[2].1;
    let best = results
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|r| r.0)
        .unwrap();
    say(format!(
        "    SFT+RPO lowest distance: {} (lowest: {best}; reported only)",
        if best == "SFT+RPO" { "yes" } else { "no" }
    ));
    let reduction = 1.0 - fd_rpo / fd_sft;
    outcome(
        reduction >= 0.5 && cfg.steps <= 2000 && cfg.tau == 5.0,
        format!(
            "tau=5: distance {fd_sft:.4} -> {fd_rpo:.4} ({:.1}% reduction, need >= 50%) in {} steps",
            100.0 * reduction,
            cfg.steps
        ),
    )
}

fn criterion_7(toy: &Toy) -> Outcome {
    let grid = [0.01, 0.1, 1.0, 2.0, 5.0];
    let rows: Vec<AblationRow> = toy.cfg.ablation_sweep(&toy.data, &toy.sft, &grid).unwrap();
    let csv = ablation_csv(&rows);
    write_artifact("ablation.csv", &csv);
    for line in csv.lines() {
        say(format!("    {line}"));
    }
    let taus_ok = rows.iter().map(|r| r.tau).eq(grid.iter().copied());
    let fd = |tau: f64| rows.iter().find(|r| r.tau == tau).unwrap().frechet_distance;
    let (hot, cold) = (fd(5.0), fd(0.01));
    outcome(
        taus_ok && hot <= cold,
        format!("distance at tau=5 {hot:.4} vs tau=0.01 {cold:.4}"),
    )
}

fn criterion_8(toy: &Toy) -> Outcome {
    let rpo = toy.rpo.as_ref().expect("criterion 6 trains the RPO model");
    let cfg = &toy.cfg;
    let selfplay = cfg.win_rate(rpo, rpo).unwrap().rate;
    let vs_base = cfg.win_rate(rpo, &toy.base).unwrap();
    write_artifact("win_rate.csv", &vs_base.to_csv());
    outcome(
        selfplay == 0.5 && vs_base.rate > 0.9 && cfg.win_prompts == 200,
        format!(
            "self-play {selfplay}, trained vs untrained base {:.3} over {} prompts (k = {})",
            vs_base.rate, cfg.win_prompts, cfg.win_k
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut cfg = toy_config();
    for o in [
        "n_pairs=300",
        "pretrain_steps=300",
        "sft_steps=20",
        "steps=100",
    ] {
        cfg.set(o).unwrap();
    }
    let fingerprint = |cfg: &ExperimentConfig| {
        let data = cfg.dataset().unwrap();
        let run = cfg.run(&data).unwrap();
        let mut bytes = Vec::new();
        for out in [Some(&run.base), run.sft.as_ref(), Some(&run.preference)]
            .into_iter()
            .flatten()
        {
            bytes.extend(metrics_csv(&out.metrics).into_bytes());
            bytes.extend(out.checkpoint.to_bytes());
        }
        (data, run.preference.checkpoint, bytes)
    };
    let (data, ckpt, first) = fingerprint(&cfg);
    let (_, _, second) = fingerprint(&cfg);
    let reruns_identical = first == second;

    let dir = tempfile::tempdir().unwrap();
    let dpath = dir.path().join("pairs.jsonl");
    save_dataset(&data, &dpath).unwrap();
    let back = load_dataset(&dpath).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let data_exact = back.len() == data.len()
        && back.iter().zip(&data).all(|(a, b)| {
            a.prompt_id == b.prompt_id
                && bits(&a.prompt_features) == bits(&b.prompt_features)
                && bits(&a.y_w) == bits(&b.y_w)
                && bits(&a.y_l) == bits(&b.y_l)
        });

    let cpath = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt.params, &ckpt.schedule, &ckpt.config, &cpath).unwrap();
    let loaded = load_checkpoint(&cpath).unwrap();
    let ckpt_exact = bits(loaded.params.theta()) == bits(ckpt.params.theta())
        && bits(loaded.schedule.betas()) == bits(ckpt.schedule.betas())
        && loaded.config == ckpt.config
        && loaded.to_bytes() == ckpt.to_bytes();

    outcome(
        reruns_identical && data_exact && ckpt_exact,
        format!(
            "reruns byte-identical: {reruns_identical} ({} bytes), dataset round trip exact: {data_exact}, checkpoint round trip exact: {ckpt_exact}",
            first.len()
        ),
    )
}

fn run(
    id: usize,
    name: &str,
    limit: Duration,
    f: impl FnOnce() -> Outcome,
    failed: &mut Vec<usize>,
) {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = elapsed < limit;
    let ok = o.ok && in_time;
    if !ok {
        failed.push(id);
    }
    say(format!(
        "{} criterion {id} ({name}): {} [{:.2} s, limit {} s]",
        if ok { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    ));
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let mut failed = Vec::new();
    run(1, "reference identity", secs(1), criterion_1, &mut failed);
    run(2, "RPO reduces to DPO", secs(1), criterion_2, &mut failed);
    run(3, "weight matrix", secs(1), criterion_3, &mut failed);
    run(
        4,
        "gradient correctness",
        secs(30),
        criterion_4,
        &mut failed,
    );
    run(
        5,
        "log-probability coefficient",
        secs(1),
        criterion_5,
        &mut failed,
    );

    let mut toy = None;
    run(
        6,
        "toy style alignment",
        secs(600),
        || {
            let mut t = build_toy();
            let o = criterion_6(&mut t);
            toy = Some(t);
            o
        },
        &mut failed,
    );
    let toy = toy.unwrap();
    run(
        7,
        "temperature ablation",
        secs(1800),
        || criterion_7(&toy),
        &mut failed,
    );
    run(
        8,
        "win-rate protocol",
        secs(120),
        || criterion_8(&toy),
        &mut failed,
    );
    run(
        9,
        "determinism and persistence",
        secs(120),
        criterion_9,
        &mut failed,
    );

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
