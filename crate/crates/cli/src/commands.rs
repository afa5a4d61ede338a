use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rodiff_core::control::{ControlInput, N_WAYPOINTS};
use rodiff_core::dataset::{self, Dataset, GenerateOptions, Split};
use rodiff_core::diffusion::checkpoint::{Checkpoint, TrainInfo};
use rodiff_core::diffusion::{Policy, Trainer, TrainingSet};
use rodiff_core::dynamics::Dynamics;
use rodiff_core::eval::{evaluate_policy, EvalReport, PolicySampler, CSV_SCHEMA};
use rodiff_core::model::{RodModel, DOF};
use rodiff_core::pita::{guided_sample, rollout_and_score, AdaptConfig, AdaptMode};
use rodiff_core::plot::{histogram, line_chart, Series};
use rodiff_core::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, EvalArgs, GenDatasetArgs, PlotArgs, SampleArgs, SimulateArgs, TrainArgs};

const LOSS_HEADER: &str = "step,total,q,qd";
const DIAGNOSTICS_HEADER: &str = "step,t,guided,loss_pos,loss_kbc,fallback,seconds";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::validation("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, cli.seed.unwrap_or(0), a),
        Command::GenDataset(a) => gen_dataset(&cfg, cli.seed.unwrap_or(0), cli.threads, a),
        Command::Train(a) => train(cfg, cli.seed, a),
        Command::Sample(a) => sample(&cfg, cli.seed.unwrap_or(0), a),
        Command::Eval(a) => eval(&cfg, cli.seed.unwrap_or(0), a),
        Command::Plot(a) => plot(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fixed<const N: usize>(flag: &str, v: &[f64]) -> Result<[f64; N]> {
    v.try_into()
        .map_err(|_| Error::validation(flag, format!("expects {N} comma-separated values, got {}", v.len())))
}

fn simulate(cfg: &RunConfig, seed: u64, a: SimulateArgs) -> Result<()> {
    let model = cfg.model();
    let control = match (&a.theta1, &a.theta2) {
        (Some(t1), Some(t2)) => ControlInput::new([fixed::<N_WAYPOINTS>("--theta1", t1)?, fixed("--theta2", t2)?])?,
        _ => dataset::sample_control(&mut dataset::record_rng(seed, 0)),
    };
    let dynamics = Dynamics::new(&model)?;
    let mut traj = dynamics.try_simulate(&control)?;
    if traj.valid {
        traj.goal = dataset::label_goal(&traj)?;
    }
    println!("theta1: {:?}", control.theta[0]);
    println!("theta2: {:?}", control.theta[1]);
    println!("valid: {}", traj.valid);
    let peak = traj.tip_speeds().fold(0.0, f64::max);
    println!("peak_tip_speed_mps: {peak:.4}");
    if traj.valid {
        println!("goal: {:.6},{:.6},{:.6}", traj.goal.x, traj.goal.y, traj.goal.z);
    }
    if let Some(out) = &a.out {
        dataset::write_record(out, &traj)?;
    }
    if let Some(svg) = &a.svg {
        let path = Series::new("tip (x, z)", traj.tip_positions().map(|p| (p.x, p.z)).collect());
        let mut series = vec![path];
        if traj.valid {
            series.push(Series::new("goal", vec![(traj.goal.x, traj.goal.z)]));
        }
        write(svg, &line_chart("tip path", "x (m)", "z (m)", &series)?)?;
    }
    Ok(())
}

fn gen_dataset(cfg: &RunConfig, seed: u64, threads: Option<usize>, a: GenDatasetArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::validation("--n", "must be at least 1"));
    }
    let manifest = dataset::generate(&cfg.model(), a.n, seed, &a.out, &GenerateOptions { threads })?;
    println!("requested: {}", manifest.n_requested);
    println!("valid: {}", manifest.n_valid);
    println!("filter_rate: {:.4}", manifest.filter_rate());
    println!("train: {}", manifest.entries(Split::Train).filter(|e| e.valid).count());
    println!("test: {}", manifest.entries(Split::Test).filter(|e| e.valid).count());
    println!("manifest_sha256: {}", manifest.content_hash());
    Ok(())
}

fn train(cfg: RunConfig, seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let mut config = cfg.train;
    if let Some(s) = seed {
        config.seed = s;
    }
    let iterations = a.iterations.unwrap_or(config.iterations);
    let trajs = ds.load_split(Split::Train)?;
    let data = TrainingSet::from_trajectories(&trajs, &config)?;
    let mut trainer = Trainer::new(config)?;
    let every = (iterations / 10).max(1);
    let mut log = format!("{LOSS_HEADER}\n");
    for i in 0..iterations {
        let l = trainer.step(&data)?;
        let _ = writeln!(log, "{i},{:e},{:e},{:e}", l.total, l.q, l.qd);
        if (i + 1) % every == 0 {
            eprintln!("iteration {}/{iterations}: loss {:.4e}", i + 1, l.total);
        }
    }
    let policy = trainer.policy(&data.normalizer)?;
    let info = TrainInfo {
        iterations,
        final_loss: trainer.history.last().map_or(f64::NAN, |l| l.total),
        dataset_hash: Some(ds.manifest.content_hash()),
        n_train: data.len(),
    };
    let ck = Checkpoint::from_policy(&policy, info);
    ck.save(&a.out)?;
    let log_path = a.out.with_extension("loss.csv");
    write(&log_path, &log)?;
    println!("examples: {}", data.len());
    println!("final_loss: {:.6e}", ck.info.final_loss);
    println!("checkpoint: {}", a.out.display());
    println!("loss_log: {}", log_path.display());
    Ok(())
}

fn adapt_config(cfg: &RunConfig, mode: Option<&str>) -> Result<AdaptConfig> {
    let mut adapt = cfg.adapt.clone();
    if let Some(m) = mode {
        adapt.mode = m.parse()?;
    }
    adapt.validate()?;
    Ok(adapt)
}

fn load_policy(path: &Path) -> Result<Policy> {
    Checkpoint::load(path)?.policy()
}

fn tokens_csv(q: &DMatrix<f64>, dt: f64) -> String {
    let mut s = String::from("t");
    for j in 0..DOF {
        let _ = write!(s, ",q{j}");
    }
    s.push('\n');
    for i in 0..q.nrows() {
        let _ = write!(s, "{:?}", i as f64 * dt);
        for j in 0..DOF {
            let _ = write!(s, ",{:?}", q[(i, j)]);
        }
        s.push('\n');
    }
    s
}

fn sample(cfg: &RunConfig, seed: u64, a: SampleArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => RodModel::load(p)?,
        None => cfg.model(),
    };
    let adapt = adapt_config(cfg, a.mode.as_deref())?;
    let policy = load_policy(&a.checkpoint)?;
    let goal = Vector3::from(fixed::<3>("--goal", &a.goal)?);
    let mut rng = rodiff_core::eval::case_rng(seed, 0);
    let (q, diagnostics) = if adapt.mode == AdaptMode::None {
        (policy.ddim_sample(&goal, adapt.ddim_steps, &mut rng)?, None)
    } else {
        let g = guided_sample(&policy, &model, &goal, &adapt, &mut rng)?;
        println!("loss_pos: {:.6e}", g.final_loss_pos);
        println!("loss_kbc: {:.6e}", g.final_loss_kbc);
        println!("fallbacks: {}", g.fallbacks());
        println!("seconds: {:.4}", g.seconds);
        let csv = g.diagnostics_csv();
        (g.q, Some(csv))
    };
    println!("mode: {}", adapt.mode);
    println!("tokens: {}", q.nrows());
    if let Some(out) = &a.out {
        write(out, &tokens_csv(&q, policy.config.token_dt()))?;
    }
    match (&a.diagnostics, diagnostics) {
        (Some(p), Some(csv)) => write(p, &csv)?,
        (Some(_), None) => eprintln!("note: no diagnostics for mode none"),
        _ => {}
    }
    if a.rollout {
        let score = rollout_and_score(&Dynamics::new(&model)?, &q, policy.config.stride, &goal)?;
        println!("distance_m: {:.6}", score.distance);
        println!("strike_index: {}", score.strike_index);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, seed: u64, a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let adapt = adapt_config(cfg, a.mode.as_deref())?;
    let policy = load_policy(&a.checkpoint)?;
    let mut goals: Vec<Vector3<f64>> = ds
        .manifest
        .entries(a.split.into())
        .filter(|e| e.valid)
        .map(|e| Vector3::from(e.goal))
        .collect();
    if let Some(n) = a.limit {
        goals.truncate(n);
    }
    if goals.is_empty() {
        return Err(Error::EmptyEval);
    }
    let sampler = PolicySampler {
        policy: &policy,
        model: &ds.model,
        adapt,
    };
    let report = evaluate_policy(&Dynamics::new(&ds.model)?, &sampler, &goals, seed)?;
    print!("{}", report.summary());
    if let Some(out) = &a.out {
        write(out, &report.to_csv())?;
    }
    Ok(())
}

fn parse_columns(text: &str, header: &str, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let names: Vec<&str> = header.split(',').collect();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| names.iter().position(|n| n == c).expect("known header"))
        .collect();
    let mut out = vec![Vec::new(); columns.len()];
    for (n, line) in text.lines().skip(1).enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        for (k, &i) in idx.iter().enumerate() {
            let v = f
                .get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::validation("input", format!("row {n}: bad `{}`", columns[k])))?;
            out[k].push(v);
        }
    }
    Ok(out)
}

fn plot(a: PlotArgs) -> Result<()> {
    let text = read(&a.input)?;
    let first = text.lines().next().unwrap_or("");
    let svg = if first == CSV_SCHEMA {
        let report = EvalReport::from_csv(&text)?;
        let title = format!("closest approach, {} cases, mean {:.4} m", report.n_cases, report.mean_distance);
        histogram(&title, "distance (m)", &report.distances(), a.bins)?
    } else if first == LOSS_HEADER {
        let cols = parse_columns(&text, LOSS_HEADER, &["step", "total", "q", "qd"])?;
        let series: Vec<Series> = ["total", "q", "qd"]
            .iter()
            .enumerate()
            .map(|(k, name)| Series::new(*name, cols[0].iter().copied().zip(cols[k + 1].iter().copied()).collect()))
            .collect();
        line_chart("training loss", "iteration", "loss", &series)?
    } else if first == DIAGNOSTICS_HEADER {
        let cols = parse_columns(&text, DIAGNOSTICS_HEADER, &["step", "loss_pos", "loss_kbc"])?;
        let series = vec![
            Series::new("position", cols[0].iter().copied().zip(cols[1].iter().copied()).collect()),
            Series::new("kinematic", cols[0].iter().copied().zip(cols[2].iter().copied()).collect()),
        ];
        line_chart("guidance losses", "sampling step", "loss", &series)?
    } else {
        return Err(Error::validation(
            "--input",
            format!("{}: not an eval report, loss log or diagnostics file", a.input.display()),
        ));
    };
    write(&a.out, &svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
