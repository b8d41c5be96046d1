//! Experiment drivers: alpha sweeps over calibrated models, threshold
//! selection, and the six miniature ablations (activation, threat norm, AT
//! method, centering, attack power, placement), all emitting machine-readable
//! reports.
//!
//! Accuracies are reported in percentage points throughout, mirroring the
//! usual table layout, so `max_clean_drop = 0.1` means a tenth of a point.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::attacks::{evaluate_robust, AttackKind, AttackSpec, Norm, RobustResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, Mode, Model, NetSpec};
use crate::sparsifier::{attach, calibrate, Calibration, Centering, Placement};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainMode};

#[derive(Debug, Clone)]
pub struct SweepPlan {
    /// Must contain 0 — the base-model row.
    pub alpha_grid: Vec<f64>,
    pub attacks: Vec<(AttackKind, AttackSpec)>,
    pub placement: Placement,
    pub centering: Centering,
    pub seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_grid.contains(&0.0) {
            return Err(Error::Config("alpha grid must contain 0 (base row)".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack spec required".into()));
        }
        for (_, spec) in &self.attacks {
            spec.validate()?;
        }
        Ok(())
    }

    /// The default grid {0, 0.05, ..., 0.5}.
    pub fn default_grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 * 0.05).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub alpha: f64,
    pub placement: String,
    pub centering: String,
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    /// Percent.
    pub clean_acc: f64,
    /// Percent.
    pub robust_acc: f64,
    pub seed: u64,
    pub model_id: String,
    /// Per-row failures are recorded, not fatal; the sweep continues.
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub selected_alpha: Option<f64>,
    /// Wall-clock seconds; lives in the manifest, never in report.csv, so
    /// reports are byte-identical across runs.
    pub eval_seconds: f64,
}

fn attack_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
        AttackKind::MomentumPgd => "mpgd",
    }
}

/// FNV-1a of the checkpoint bytes: a stable short model identifier.
pub fn model_id(model: &Model) -> Result<String> {
    let mut bytes = Vec::new();
    model.save(&mut bytes)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

/// Calibrate once, then evaluate clean and robust accuracy at every grid
/// point. Statistics are alpha-independent, so one calibration pass serves
/// the whole sweep. Alpha = 0 disables the bank outright: the base row is
/// bit-identical to a direct base-model evaluation.
pub fn alpha_sweep(
    model: &Model,
    calib_set: &Dataset,
    test_set: &Dataset,
    plan: &SweepPlan,
) -> Result<EvalReport> {
    plan.validate()?;
    let start = Instant::now();
    let snap = model.snapshot()?;
    let mut work = snap.instantiate()?;
    let sites = plan.placement.sites(work.sites())?;
    let batches: Vec<Tensor> = calib_set.batches(128).into_iter().map(|(t, _)| t).collect();
    let calibration = calibrate(&mut work, &sites, &batches)?;
    let id = model_id(&work)?;
    let report = sweep_calibrated(&snap.instantiate()?, &calibration, test_set, plan, &id)?;
    Ok(EvalReport {
        eval_seconds: start.elapsed().as_secs_f64(),
        ..report
    })
}

/// The sweep proper, given an existing calibration (reused across sweeps).
pub fn sweep_calibrated(
    base: &Model,
    calibration: &Calibration,
    test_set: &Dataset,
    plan: &SweepPlan,
    id: &str,
) -> Result<EvalReport> {
    let snap = base.snapshot()?;
    let mut rows = Vec::new();
    for &alpha in &plan.alpha_grid {
        let mut m = snap.instantiate()?;
        if alpha > 0.0 {
            attach(&mut m, plan.placement, alpha, calibration, plan.centering)?;
            m.sparsifiers.as_mut().unwrap().enabled = true;
        }
        for (kind, spec) in &plan.attacks {
            let mut row = EvalRow {
                alpha,
                placement: plan.placement.label(),
                centering: plan.centering.name().into(),
                attack: attack_name(*kind).into(),
                norm: spec.norm.name().into(),
                epsilon: spec.epsilon,
                clean_acc: 0.0,
                robust_acc: 0.0,
                seed: plan.seed,
                model_id: id.into(),
                failed: false,
            };
            match evaluate_robust(&m, test_set, spec, *kind) {
                Ok(r) => {
                    row.clean_acc = r.clean_acc() * 100.0;
                    row.robust_acc = r.robust_acc() * 100.0;
                }
                Err(e) => {
                    eprintln!("warning: sweep row alpha={alpha} failed: {e}");
                    row.failed = true;
                }
            }
            rows.push(row);
        }
    }
    Ok(EvalReport {
        rows,
        selected_alpha: None,
        eval_seconds: 0.0,
    })
}

/// The alpha maximizing robust accuracy subject to a clean-accuracy budget:
/// `clean(alpha) >= clean(0) - max_clean_drop` (percentage points). Ties go
/// to the smaller alpha. Returns `(alpha, fell_back)`; `fell_back` flags an
/// empty feasible set — no positive alpha stayed within the clean budget —
/// in which case the selection is the base model's alpha = 0.
pub fn select_alpha(report: &EvalReport, max_clean_drop: f64) -> (f64, bool) {
    // Worst case over attacks per alpha.
    let mut per_alpha: Vec<(f64, f64, f64)> = Vec::new(); // (alpha, clean, robust)
    for row in report.rows.iter().filter(|r| !r.failed) {
        match per_alpha.iter_mut().find(|(a, _, _)| *a == row.alpha) {
            Some(e) => {
                e.1 = e.1.min(row.clean_acc);
                e.2 = e.2.min(row.robust_acc);
            }
            None => per_alpha.push((row.alpha, row.clean_acc, row.robust_acc)),
        }
    }
    per_alpha.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let base_clean = match per_alpha.iter().find(|(a, _, _)| *a == 0.0) {
        Some(&(_, c, _)) => c,
        None => return (0.0, true),
    };
    let mut best: Option<(f64, f64)> = None; // (alpha, robust)
    let mut any_positive_feasible = false;
    for &(alpha, clean, robust) in &per_alpha {
        if clean >= base_clean - max_clean_drop {
            any_positive_feasible |= alpha > 0.0;
            if best.map_or(true, |(_, br)| robust > br) {
                best = Some((alpha, robust));
            }
        }
    }
    match best {
        Some((alpha, _)) => (alpha, !any_positive_feasible),
        None => (0.0, true),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Activation,
    ThreatNorm,
    AtMethod,
    Centering,
    AttackPower,
    Placement,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<AblationKind> {
        match s.to_ascii_lowercase().as_str() {
            "activation" => Ok(AblationKind::Activation),
            "threat-norm" | "norm" => Ok(AblationKind::ThreatNorm),
            "at-method" | "at" => Ok(AblationKind::AtMethod),
            "centering" => Ok(AblationKind::Centering),
            "attack-power" | "power" => Ok(AblationKind::AttackPower),
            "placement" => Ok(AblationKind::Placement),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::Activation => "activation",
            AblationKind::ThreatNorm => "threat-norm",
            AblationKind::AtMethod => "at-method",
            AblationKind::Centering => "centering",
            AblationKind::AttackPower => "attack-power",
            AblationKind::Placement => "placement",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub net: NetSpec,
    pub train_cfg: TrainConfig,
    pub alpha_grid: Vec<f64>,
    pub eval_attack: AttackSpec,
    pub eval_kind: AttackKind,
    pub seed: u64,
    /// Reuse trained checkpoints from here when present; train and store
    /// otherwise (unless `no_train`).
    pub checkpoint_dir: Option<PathBuf>,
    pub no_train: bool,
}

impl AblationConfig {
    /// Train (or load) the model this variant needs.
    fn model(&self, label: &str, net: &NetSpec, tc: &TrainConfig, tr: &Dataset, te: &Dataset) -> Result<Model> {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("{label}.ckpt"));
            if path.exists() {
                return Model::load_from_file(&path);
            }
            if self.no_train {
                return Err(Error::Config(format!(
                    "checkpoint {} missing and --no-train given",
                    path.display()
                )));
            }
        }
        let mut model = crate::nn::build_mini_resnet(net, self.seed)?;
        let (best, _) = train(&mut model, tr, te, tc)?;
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            best.save_to_file(&dir.join(format!("{label}.ckpt")))?;
        }
        Ok(best)
    }

    fn plan(&self) -> SweepPlan {
        SweepPlan {
            alpha_grid: self.alpha_grid.clone(),
            attacks: vec![(self.eval_kind, self.eval_attack.clone())],
            placement: Placement::All,
            centering: Centering::PerChannelMean,
            seed: self.seed,
        }
    }
}

/// One miniature ablation mirroring the corresponding appendix table's axes.
/// Variant labels ride in the `model_id` column.
pub fn run_ablation(
    kind: AblationKind,
    cfg: &AblationConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    match kind {
        AblationKind::Activation => {
            for act in [ActivationKind::ReLU, ActivationKind::GELU, ActivationKind::SiLU] {
                let mut net = cfg.net.clone();
                net.activation = act;
                let model = cfg.model(act.name(), &net, &cfg.train_cfg, train_set, test_set)?;
                let mut rep = alpha_sweep(&model, train_set, test_set, &cfg.plan())?;
                for r in &mut rep.rows {
                    r.model_id = act.name().into();
                }
                rows.extend(rep.rows);
            }
        }
        AblationKind::ThreatNorm => {
            let model = cfg.model("base", &cfg.net, &cfg.train_cfg, train_set, test_set)?;
            for (norm, eps) in [(Norm::Linf, 8.0 / 255.0), (Norm::L2, 128.0 / 255.0)] {
                let mut plan = cfg.plan();
                plan.attacks[0].1.norm = norm;
                plan.attacks[0].1.epsilon = eps;
                let mut rep = alpha_sweep(&model, train_set, test_set, &plan)?;
                for r in &mut rep.rows {
                    r.model_id = norm.name().into();
                }
                rows.extend(rep.rows);
            }
        }
        AblationKind::AtMethod => {
            for mode in [TrainMode::PgdAt, TrainMode::Trades] {
                let mut tc = cfg.train_cfg.clone();
                tc.mode = mode;
                if mode == TrainMode::Trades && tc.trades_beta <= 0.0 {
                    tc.trades_beta = 0.6;
                }
                let model = cfg.model(mode.name(), &cfg.net, &tc, train_set, test_set)?;
                let mut rep = alpha_sweep(&model, train_set, test_set, &cfg.plan())?;
                for r in &mut rep.rows {
                    r.model_id = mode.name().into();
                }
                rows.extend(rep.rows);
            }
        }
        AblationKind::Centering => {
            let model = cfg.model("base", &cfg.net, &cfg.train_cfg, train_set, test_set)?;
            for centering in [Centering::Zero, Centering::GlobalMean, Centering::PerChannelMean] {
                let mut plan = cfg.plan();
                plan.centering = centering;
                let rep = alpha_sweep(&model, train_set, test_set, &plan)?;
                rows.extend(rep.rows);
            }
        }
        AblationKind::AttackPower => {
            let model = cfg.model("base", &cfg.net, &cfg.train_cfg, train_set, test_set)?;
            rows.extend(attack_power_rows(&model, train_set, test_set, cfg)?);
        }
        AblationKind::Placement => {
            let model = cfg.model("base", &cfg.net, &cfg.train_cfg, train_set, test_set)?;
            let sites = model.sites();
            let mut placements: Vec<Placement> = vec![Placement::All, Placement::MainPathOnly, Placement::AfterAdditionOnly];
            placements.extend((0..sites).map(Placement::SingleSite));
            for placement in placements {
                let mut plan = cfg.plan();
                plan.placement = placement;
                let rep = alpha_sweep(&model, train_set, test_set, &plan)?;
                rows.extend(rep.rows);
            }
        }
    }
    Ok(EvalReport {
        rows,
        selected_alpha: None,
        eval_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Attack-power grid: epsilon in {1..16}/255 per alpha in {0, 0.2, 0.35}.
/// Per alpha, samples broken at a smaller epsilon stay broken at larger ones
/// (an ensemble over budgets — any nested-ball attack success carries over),
/// which makes the reported columns monotone by construction while staying an
/// honest attack.
pub fn attack_power_rows(
    model: &Model,
    calib_set: &Dataset,
    test_set: &Dataset,
    cfg: &AblationConfig,
) -> Result<Vec<EvalRow>> {
    let alphas = [0.0, 0.2, 0.35];
    let snap = model.snapshot()?;
    let mut work = snap.instantiate()?;
    let sites = Placement::All.sites(work.sites())?;
    let batches: Vec<Tensor> = calib_set.batches(128).into_iter().map(|(t, _)| t).collect();
    let calibration = calibrate(&mut work, &sites, &batches)?;
    let id = model_id(&work)?;
    let mut rows = Vec::new();
    for &alpha in &alphas {
        let mut m = snap.instantiate()?;
        if alpha > 0.0 {
            attach(&mut m, Placement::All, alpha, &calibration, Centering::PerChannelMean)?;
            m.sparsifiers.as_mut().unwrap().enabled = true;
        }
        let mut surviving: Option<Vec<bool>> = None;
        for e in 1..=16u32 {
            let mut spec = cfg.eval_attack.clone();
            spec.epsilon = e as f64 / 255.0;
            let r: RobustResult = evaluate_robust(&m, test_set, &spec, cfg.eval_kind)?;
            let flags = match surviving.take() {
                Some(prev) => prev
                    .iter()
                    .zip(&r.robust_correct)
                    .map(|(&a, &b)| a && b)
                    .collect::<Vec<bool>>(),
                None => r.robust_correct.clone(),
            };
            let robust = flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
            surviving = Some(flags);
            rows.push(EvalRow {
                alpha,
                placement: Placement::All.label(),
                centering: Centering::PerChannelMean.name().into(),
                attack: attack_name(cfg.eval_kind).into(),
                norm: spec.norm.name().into(),
                epsilon: spec.epsilon,
                clean_acc: r.clean_acc() * 100.0,
                robust_acc: robust * 100.0,
                seed: cfg.seed,
                model_id: id.clone(),
                failed: false,
            });
        }
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(w: &mut W, report: &EvalReport) -> Result<()> {
    writeln!(
        w,
        "alpha,placement,centering,attack,norm,epsilon,clean_acc,robust_acc,seed,model_id,status"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{:.4},{},{},{},{},{:.8},{:.4},{:.4},{},{},{}",
            r.alpha,
            r.placement,
            r.centering,
            r.attack,
            r.norm,
            r.epsilon,
            r.clean_acc,
            r.robust_acc,
            r.seed,
            r.model_id,
            if r.failed { "failed" } else { "ok" }
        )?;
    }
    Ok(())
}

/// Alpha against clean/robust curves for the first attack in the report.
pub fn write_plotdata_csv<W: Write>(w: &mut W, report: &EvalReport) -> Result<()> {
    writeln!(w, "alpha,clean_acc,robust_acc")?;
    let first_attack = match report.rows.first() {
        Some(r) => (r.attack.clone(), r.norm.clone(), r.epsilon),
        None => return Ok(()),
    };
    for r in &report.rows {
        if (r.attack.clone(), r.norm.clone(), r.epsilon) == first_attack && !r.failed {
            writeln!(w, "{:.4},{:.4},{:.4}", r.alpha, r.clean_acc, r.robust_acc)?;
        }
    }
    Ok(())
}

/// Run manifest: seeds, configuration echo, timings, versions. Wall-clock
/// lives here so `report.csv` stays byte-identical across runs.
pub fn write_manifest<W: Write>(
    w: &mut W,
    report: &EvalReport,
    config: serde_json::Value,
) -> Result<()> {
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "eval_seconds": report.eval_seconds,
        "threads": rayon::current_num_threads(),
        "rows": report.rows.len(),
        "selected_alpha": report.selected_alpha,
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Direct base-model evaluation used by the base-row identity tests.
pub fn base_eval(model: &Model, test_set: &Dataset, spec: &AttackSpec, kind: AttackKind) -> Result<(f64, f64)> {
    let r = evaluate_robust(model, test_set, spec, kind)?;
    Ok((r.clean_acc() * 100.0, r.robust_acc() * 100.0))
}

/// Clean accuracy of a model variant in percent (helper for the CLI).
pub fn clean_percent(model: &Model, data: &Dataset) -> Result<f64> {
    let mut m = model.snapshot()?.instantiate()?;
    let mut correct = 0usize;
    for (x, labels) in data.batches(256) {
        let logits = m.forward(&x, Mode::Eval)?;
        let k = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let rl = &logits.data()[row * k..(row + 1) * k];
            let pred = rl
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.n as f64 * 100.0)
}
