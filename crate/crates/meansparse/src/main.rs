//! Command-line surface: training, calibration, attacks, sweeps, ablations,
//! the prox demos, and report summaries. Every run writes its artifacts under
//! `--out`, including a manifest that makes the run replayable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meansparse::attacks::{parse_eps, AttackKind, AttackSpec, LossKind, Norm};
use meansparse::data::{load_cifar10, synth_blobs_spread, Dataset};
use meansparse::error::{Error, Result};
use meansparse::harness::{
    alpha_sweep, base_eval, run_ablation, select_alpha, write_manifest, write_plotdata_csv,
    write_report_csv, AblationConfig, AblationKind, EvalReport, EvalRow, SweepPlan,
};
use meansparse::nn::{build_mini_resnet, ActivationKind, Model, NetSpec};
use meansparse::prox::{penalty_solve, write_trace_csv, ProxProblem, ToyObjective};
use meansparse::sparsifier::{calibrate, Centering, Placement};
use meansparse::trainer::{train, write_history_csv, LrSchedule, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(name = "meansparse", version, about = "Post-training mean-centered sparsification lab")]
struct Cli {
    /// Output directory for run artifacts.
    #[arg(long, global = true, default_value = "runs/run")]
    out: PathBuf,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (1 = deterministic golden mode; parallelism never
    /// changes results, only timings).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CIFAR-10 binary batch directory; omit for synthetic blobs.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stratified subset sizes `n_train,n_test`.
    #[arg(long)]
    subset: Option<String>,
    /// Synthetic: total examples (split 2:1 train/test).
    #[arg(long, default_value_t = 3000)]
    n: usize,
    /// Synthetic: classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Synthetic: spatial size.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Synthetic: noise spread.
    #[arg(long, default_value_t = 0.12)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.data_dir {
            Some(dir) => {
                let subset = match &self.subset {
                    Some(s) => {
                        let (a, b) = s.split_once(',').ok_or_else(|| {
                            Error::Config("--subset wants `n_train,n_test`".into())
                        })?;
                        Some((
                            a.trim().parse().map_err(|_| Error::Config("bad subset".into()))?,
                            b.trim().parse().map_err(|_| Error::Config("bad subset".into()))?,
                        ))
                    }
                    None => None,
                };
                load_cifar10(dir, subset, self.data_seed)
            }
            None => {
                // One draw, then split: train and test must share the
                // class templates the seed generates.
                let n_test = self.n / 3;
                let all = synth_blobs_spread(self.n, self.classes, self.dim, self.data_seed, self.spread)?;
                all.split(self.n - n_test)
            }
        }
    }

    fn is_cifar(&self) -> bool {
        self.data_dir.is_some()
    }
}

#[derive(Args, Clone)]
struct NetArgs {
    #[arg(long, default_value_t = 16)]
    stem_width: usize,
    /// Residual block widths, comma-separated.
    #[arg(long, default_value = "16,16,32,64")]
    blocks: String,
    #[arg(long, default_value = "relu")]
    activation: String,
}

impl NetArgs {
    fn spec(&self, data: &DataArgs, classes: usize, hw: usize) -> Result<NetSpec> {
        let widths: Vec<usize> = self
            .blocks
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config("bad --blocks".into())))
            .collect::<Result<_>>()?;
        let (mean, std) = if data.is_cifar() {
            (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616])
        } else {
            (vec![0.5; 3], vec![0.25; 3])
        };
        Ok(NetSpec {
            in_channels: 3,
            in_hw: hw,
            stem_width: self.stem_width,
            block_widths: widths,
            classes,
            activation: ActivationKind::parse(&self.activation)?,
            input_mean: mean,
            input_std: std,
        })
    }
}

#[derive(Args, Clone)]
struct AttackArgs {
    #[arg(long, default_value = "pgd")]
    attack: String,
    #[arg(long, default_value = "linf")]
    norm: String,
    /// Accepts fractions like `8/255`.
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0.0078)]
    step_size: f64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value = "ce")]
    loss: String,
}

impl AttackArgs {
    fn spec(&self, seed: u64) -> Result<(AttackKind, AttackSpec)> {
        let loss = LossKind::parse(&self.loss)?;
        let spec = AttackSpec {
            norm: Norm::parse(&self.norm)?,
            epsilon: parse_eps(&self.eps)?,
            steps: self.steps,
            step_size: self.step_size,
            restarts: self.restarts,
            loss,
            seed,
        };
        spec.validate()?;
        Ok((AttackKind::parse(&self.attack)?, spec))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a base model (standard, pgd-at, or trades).
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value = "standard")]
        mode: String,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.6)]
        trades_beta: f64,
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        at: AttackArgs,
    },
    /// Calibrate per-channel statistics and store the sparsifier bank.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "all")]
        placement: String,
        #[arg(long, default_value = "channel")]
        centering: String,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Fraction of the calibration split to use (stratified).
        #[arg(long, default_value_t = 1.0)]
        calib_fraction: f64,
    },
    /// Evaluate one attack against a checkpoint.
    Attack {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Optional calibrated bank to enable.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Alpha sweep with shared calibration; writes report/plotdata/manifest.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated grid; must contain 0.
        #[arg(long, default_value = "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5")]
        alpha_grid: String,
        #[arg(long, default_value = "all")]
        placement: String,
        #[arg(long, default_value = "channel")]
        centering: String,
        #[arg(long, default_value_t = 0.1)]
        max_clean_drop: f64,
        /// Fraction of the calibration split to use (stratified).
        #[arg(long, default_value_t = 1.0)]
        calib_fraction: f64,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Re-run threshold selection on an existing report.csv.
    Select {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        max_clean_drop: f64,
    },
    /// One of the miniature ablations.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "0,0.1,0.2,0.3")]
        alpha_grid: String,
        #[arg(long, default_value = "pgd-at")]
        train_mode: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        no_train: bool,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Penalty-method solver demo on a toy problem; writes trace.csv.
    Proxdemo {
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda0: f64,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 0.2)]
        step: f64,
        #[arg(long, default_value = "quadratic")]
        problem: String,
    },
    /// Summarize an existing run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        max_clean_drop: f64,
    },
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad alpha grid entry `{t}`")))
        })
        .collect()
}

/// Stratified shrink of the calibration split; 1.0 is a no-op.
fn calib_subset(tr: meansparse::data::Dataset, fraction: f64, seed: u64) -> Result<meansparse::data::Dataset> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "calib fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(tr);
    }
    let total = ((tr.n as f64 * fraction).round() as usize).max(tr.classes);
    tr.stratified_subset(total, seed)
}

/// Flags override file values: clap has already parsed the flags, so the
/// file only fills keys the user did not pass. We approximate "did not pass"
/// by letting explicit CLI values win wholesale and echoing the effective
/// config into the manifest.
fn apply_config_file(cli: &mut Cli) -> Result<serde_json::Value> {
    let mut echo = serde_json::Map::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config file must be a JSON object".into()))?;
        if let Some(seed) = obj.get("seed").and_then(|s| s.as_u64()) {
            if cli.seed == 0 {
                cli.seed = seed;
            }
        }
        if let Some(threads) = obj.get("threads").and_then(|s| s.as_u64()) {
            if cli.threads.is_none() {
                cli.threads = Some(threads as usize);
            }
        }
        if let Some(out) = obj.get("out").and_then(|s| s.as_str()) {
            if cli.out == Path::new("runs/run") {
                cli.out = PathBuf::from(out);
            }
        }
        echo.extend(obj.clone());
    }
    echo.insert("seed".into(), cli.seed.into());
    echo.insert("out".into(), cli.out.display().to_string().into());
    Ok(serde_json::Value::Object(echo))
}

fn load_report_csv(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("report line {} malformed", i + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
        };
        rows.push(EvalRow {
            alpha: num(f[0])?,
            placement: f[1].into(),
            centering: f[2].into(),
            attack: f[3].into(),
            norm: f[4].into(),
            epsilon: num(f[5])?,
            clean_acc: num(f[6])?,
            robust_acc: num(f[7])?,
            seed: f[8].parse().map_err(|_| Error::Format("bad seed".into()))?,
            model_id: f[9].into(),
            failed: f[10] == "failed",
        });
    }
    Ok(EvalReport {
        rows,
        selected_alpha: None,
        eval_seconds: 0.0,
    })
}

fn write_run_outputs(out: &Path, report: &EvalReport, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut f = fs::File::create(out.join("report.csv"))?;
    write_report_csv(&mut f, report)?;
    let mut f = fs::File::create(out.join("plotdata.csv"))?;
    write_plotdata_csv(&mut f, report)?;
    let mut f = fs::File::create(out.join("manifest.json"))?;
    write_manifest(&mut f, report, config)?;
    Ok(())
}

fn run(mut cli: Cli) -> Result<()> {
    let config_echo = apply_config_file(&mut cli)?;
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.clone();
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Train {
            data,
            net,
            mode,
            epochs,
            batch_size,
            lr,
            trades_beta,
            no_augment,
            at,
        } => {
            let (tr, te) = data.load()?;
            let spec = net.spec(&data, tr.classes, tr.height)?;
            let mode = TrainMode::parse(&mode)?;
            let (_, at_spec) = at.spec(seed)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                lr: LrSchedule {
                    initial: lr,
                    decay_epochs: vec![epochs / 2, epochs * 5 / 6],
                    factor: 0.1,
                },
                momentum: 0.9,
                weight_decay: 5e-4,
                mode,
                trades_beta,
                at_attack: if mode == TrainMode::Standard { None } else { Some(at_spec.clone()) },
                eval_attack: Some(at_spec),
                select_by_robust: mode != TrainMode::Standard,
                augment: !no_augment && data.is_cifar(),
                seed,
            };
            let mut model = build_mini_resnet(&spec, seed)?;
            let (best, history) = train(&mut model, &tr, &te, &cfg)?;
            fs::create_dir_all(&out)?;
            best.save_to_file(&out.join("model.ckpt"))?;
            let mut f = fs::File::create(out.join("history.csv"))?;
            write_history_csv(&mut f, &history)?;
            let last = history.last().unwrap();
            println!(
                "trained {} epochs: clean {:.2}%, robust {:.2}% (checkpoint: {})",
                history.len(),
                last.clean_val_acc * 100.0,
                last.pgd_val_acc * 100.0,
                out.join("model.ckpt").display()
            );
        }
        Cmd::Calibrate {
            data,
            model,
            placement,
            centering,
            alpha,
            calib_fraction,
        } => {
            let (tr, _) = data.load()?;
            let tr = calib_subset(tr, calib_fraction, seed)?;
            let mut m = Model::load_from_file(&model)?;
            let placement = Placement::parse(&placement)?;
            let centering = Centering::parse(&centering)?;
            let sites = placement.sites(m.sites())?;
            let batches: Vec<_> = tr.batches(128).into_iter().map(|(t, _)| t).collect();
            let calib = calibrate(&mut m, &sites, &batches)?;
            let bank = calib.bank(&sites, alpha, centering)?;
            fs::create_dir_all(&out)?;
            let mut f = fs::File::create(out.join("bank.msp"))?;
            bank.save(&mut f)?;
            println!(
                "calibrated {} sites over {} batches -> {}",
                bank.len(),
                batches.len(),
                out.join("bank.msp").display()
            );
        }
        Cmd::Attack {
            data,
            model,
            bank,
            attack,
        } => {
            let (_, te) = data.load()?;
            let mut m = Model::load_from_file(&model)?;
            if let Some(path) = bank {
                let mut r = std::io::BufReader::new(fs::File::open(path)?);
                let mut b = meansparse::sparsifier::SparsifierBank::load(&mut r)?;
                b.enabled = true;
                m.sparsifiers = Some(b);
            }
            m.freeze();
            let (kind, spec) = attack.spec(seed)?;
            let (clean, robust) = base_eval(&m, &te, &spec, kind)?;
            println!(
                "clean_acc {:.2}%  robust_acc {:.2}%  ({} {} eps {:.5}, {} samples)",
                clean, robust, attack.attack, attack.norm, spec.epsilon, te.n
            );
        }
        Cmd::Sweep {
            data,
            model,
            alpha_grid,
            placement,
            centering,
            max_clean_drop,
            calib_fraction,
            attack,
        } => {
            let (tr, te) = data.load()?;
            let tr = calib_subset(tr, calib_fraction, seed)?;
            let mut m = Model::load_from_file(&model)?;
            m.freeze();
            let (kind, spec) = attack.spec(seed)?;
            let plan = SweepPlan {
                alpha_grid: parse_grid(&alpha_grid)?,
                attacks: vec![(kind, spec)],
                placement: Placement::parse(&placement)?,
                centering: Centering::parse(&centering)?,
                seed,
            };
            let mut report = alpha_sweep(&m, &tr, &te, &plan)?;
            let (alpha, fellback) = select_alpha(&report, max_clean_drop);
            report.selected_alpha = Some(alpha);
            write_run_outputs(&out, &report, config_echo)?;
            if fellback {
                eprintln!("warning: no alpha > 0 beat the base model within the clean budget");
            }
            println!("selected alpha = {alpha} -> {}", out.join("report.csv").display());
        }
        Cmd::Select {
            report,
            max_clean_drop,
        } => {
            let rep = load_report_csv(&report)?;
            let (alpha, fellback) = select_alpha(&rep, max_clean_drop);
            if fellback {
                eprintln!("warning: empty feasible set; falling back to alpha = 0");
            }
            println!("{alpha}");
        }
        Cmd::Ablate {
            data,
            net,
            kind,
            alpha_grid,
            train_mode,
            epochs,
            checkpoint_dir,
            no_train,
            attack,
        } => {
            let (tr, te) = data.load()?;
            let spec = net.spec(&data, tr.classes, tr.height)?;
            let kind = AblationKind::parse(&kind)?;
            let (eval_kind, eval_spec) = attack.spec(seed)?;
            let mut train_cfg = TrainConfig::default_recipe(TrainMode::parse(&train_mode)?, seed);
            train_cfg.epochs = epochs;
            train_cfg.lr.decay_epochs = vec![epochs / 2, epochs * 5 / 6];
            train_cfg.augment = data.is_cifar();
            let cfg = AblationConfig {
                net: spec,
                train_cfg,
                alpha_grid: parse_grid(&alpha_grid)?,
                eval_attack: eval_spec,
                eval_kind,
                seed,
                checkpoint_dir,
                no_train,
            };
            let report = run_ablation(kind, &cfg, &tr, &te)?;
            write_run_outputs(&out, &report, config_echo)?;
            println!(
                "{} ablation: {} rows -> {}",
                kind.name(),
                report.rows.len(),
                out.join("report.csv").display()
            );
        }
        Cmd::Proxdemo {
            gamma,
            lambda0,
            iters,
            step,
            problem,
        } => {
            let (objective, theta0) = match problem.as_str() {
                "quadratic" => {
                    let obj = ToyObjective::Quadratic {
                        a: vec![1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 0.5],
                        b: vec![1.0, 0.2, 0.05],
                        rows: 3,
                    };
                    (obj, vec![vec![0.0, 0.0, 0.0]])
                }
                "twolayer" => {
                    let ds = synth_blobs_spread(32, 2, 2, seed, 0.12)?;
                    let inputs = ds.image_len();
                    let y: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
                    let obj = ToyObjective::TwoLayer {
                        x: ds.images.clone(),
                        y,
                        samples: ds.n,
                        inputs,
                        hidden: 6,
                    };
                    use rand::{Rng, SeedableRng};
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let theta0 = obj
                        .block_shapes()
                        .iter()
                        .map(|s| {
                            (0..s.iter().product::<usize>())
                                .map(|_| rng.gen_range(-0.5..0.5))
                                .collect()
                        })
                        .collect();
                    (obj, theta0)
                }
                other => return Err(Error::Config(format!("unknown problem `{other}`"))),
            };
            let p = ProxProblem::new(objective, theta0, gamma, lambda0)?;
            let mut trace = Vec::new();
            let result = penalty_solve(&p, iters, step, &mut trace);
            fs::create_dir_all(&out)?;
            let mut f = fs::File::create(out.join("trace.csv"))?;
            write_trace_csv(&mut f, &trace)?;
            let outcome = result?;
            let last = trace.last().unwrap();
            println!(
                "{} iters: objective {:.6}, penalty_gap {:.3e}, {} active features -> {}",
                trace.len(),
                last.objective,
                last.penalty_gap,
                last.active_count,
                out.join("trace.csv").display()
            );
            drop(outcome);
        }
        Cmd::Report {
            run: run_dir,
            max_clean_drop,
        } => {
            let rep = load_report_csv(&run_dir.join("report.csv"))?;
            let (alpha, _) = select_alpha(&rep, max_clean_drop);
            println!("{:>6} {:>10} {:>9} {:>10} {:>10}", "alpha", "attack", "eps", "clean%", "robust%");
            for r in &rep.rows {
                println!(
                    "{:>6.2} {:>10} {:>9.5} {:>10.2} {:>10.2}{}",
                    r.alpha,
                    r.attack,
                    r.epsilon,
                    r.clean_acc,
                    r.robust_acc,
                    if r.failed { "  FAILED" } else { "" }
                );
            }
            println!("selected alpha (max clean drop {max_clean_drop}): {alpha}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
