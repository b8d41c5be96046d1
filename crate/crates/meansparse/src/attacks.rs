//! Gradient-based evasion attacks with strict feasibility guarantees: FGSM,
//! PGD under l-inf and l2, and a momentum/step-halving PGD variant standing
//! in for APGD-CE. Full AutoAttack is out of scope.
//!
//! Every returned example satisfies the norm bound and stays in the [0,1]
//! pixel box. Attacks are per-sample independent; evaluation parallelizes
//! across samples with per-sample derived seeds, so results do not depend on
//! thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Norm> {
        match s.to_ascii_lowercase().as_str() {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Difference-of-logits-ratio; needs K >= 4 classes, otherwise the
    /// attack falls back to cross-entropy.
    Dlr,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::CrossEntropy),
            "dlr" => Ok(LossKind::Dlr),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Parse an epsilon given either as a plain float or a fraction like `8/255`.
pub fn parse_eps(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse epsilon `{s}`"));
    let v = if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| bad())?;
        let d: f64 = den.trim().parse().map_err(|_| bad())?;
        if d == 0.0 {
            return Err(bad());
        }
        n / d
    } else {
        s.trim().parse().map_err(|_| bad())?
    };
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Config(format!("epsilon must be finite and >= 0, got {s}")));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.step_size < 0.0 {
            return Err(Error::InvalidParam("epsilon and step_size must be >= 0".into()));
        }
        if self.steps < 1 || self.restarts < 1 {
            return Err(Error::InvalidParam("steps and restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    MomentumPgd,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<AttackKind> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mpgd" | "momentum-pgd" => Ok(AttackKind::MomentumPgd),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

/// Loss value and its gradient with respect to the input image.
fn loss_and_grad(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let x = Tensor::with_grad(image.to_vec(), &[1, shape[0], shape[1], shape[2]])?;
    let logits = model.forward(&x, Mode::Eval)?;
    let classes = logits.shape()[1];
    let l = match loss {
        LossKind::Dlr if classes >= 4 => logits.dlr_loss(&[label])?,
        _ => logits.cross_entropy(&[label])?,
    };
    l.backward()?;
    let g = x.grad().ok_or(Error::NonFinite { op: "attack grad" })?;
    Ok((l.data()[0], g))
}

pub fn predict(model: &mut Model, image: &[f64], shape: &[usize; 3]) -> Result<usize> {
    let x = Tensor::new(image.to_vec(), &[1, shape[0], shape[1], shape[2]])?;
    let logits = model.forward(&x, Mode::Eval)?;
    Ok(argmax(logits.data()))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Random point in the epsilon-ball around the origin.
fn random_delta(norm: Norm, eps: f64, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| rng.gen_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let n = l2(&v);
            if n > 0.0 {
                let r = eps * rng.gen_range(0.0..1.0f64).powf(1.0 / d as f64);
                for x in &mut v {
                    *x *= r / n;
                }
            }
            v
        }
    }
}

/// Ascent direction from a gradient; falls back to a seeded random direction
/// when the gradient is identically zero (fully blocked sparsifier band).
fn direction(norm: Norm, g: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let zero = g.iter().all(|&x| x == 0.0);
    match norm {
        Norm::Linf => {
            if zero {
                g.iter().map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
            } else {
                g.iter().map(|&x| x.signum()).collect()
            }
        }
        Norm::L2 => {
            let v: Vec<f64> = if zero {
                (0..g.len())
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            } else {
                g.to_vec()
            };
            let n = l2(&v);
            v.iter().map(|&x| x / n.max(1e-300)).collect()
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Project `adv` onto the epsilon-ball around `x0` intersected with [0,1].
/// The box clip never grows a coordinate's offset, so the norm bound
/// survives it for both norms.
fn project(adv: &mut [f64], x0: &[f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => {
            for (a, &x) in adv.iter_mut().zip(x0) {
                *a = (*a).clamp(x - eps, x + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let mut delta: Vec<f64> = adv.iter().zip(x0).map(|(a, x)| a - x).collect();
            let n = l2(&delta);
            if n > eps {
                let s = eps / n;
                for d in &mut delta {
                    *d *= s;
                }
            }
            for ((a, &x), d) in adv.iter_mut().zip(x0).zip(&delta) {
                *a = (x + d).clamp(0.0, 1.0);
            }
        }
    }
}

/// Single-step sign attack: `clip(x + eps * sign(grad))`.
pub fn fgsm(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let (_, g) = loss_and_grad(model, image, shape, label, spec.loss)?;
    let mut adv: Vec<f64> = image
        .iter()
        .zip(&g)
        .map(|(&x, &gi)| x + spec.epsilon * gi.signum())
        .collect();
    project(&mut adv, image, Norm::Linf, spec.epsilon);
    Ok(adv)
}

struct Trajectory {
    momentum: f64,
    halving: bool,
    /// Return the best-loss iterate seen anywhere, rather than the final
    /// iterate of the best restart.
    track_best: bool,
}

fn iterative_attack(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
    traj: &Trajectory,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let d = image.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let halve_at: Vec<usize> = if traj.halving {
        [0.22, 0.44, 0.66, 0.88]
            .iter()
            .map(|f| ((spec.steps as f64) * f).floor() as usize)
            .collect()
    } else {
        Vec::new()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |loss: f64, adv: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        if best.as_ref().map_or(true, |(bl, _)| loss > *bl) {
            *best = Some((loss, adv.to_vec()));
        }
    };
    for restart in 0..spec.restarts {
        // First restart starts at x itself; later ones sample the ball.
        let mut adv: Vec<f64> = if restart == 0 {
            image.to_vec()
        } else {
            let delta = random_delta(spec.norm, spec.epsilon, d, &mut rng);
            image.iter().zip(&delta).map(|(x, dl)| x + dl).collect()
        };
        project(&mut adv, image, spec.norm, spec.epsilon);
        let mut step = spec.step_size;
        let mut mbuf = vec![0.0; d];
        let mut final_loss = f64::NEG_INFINITY;
        for k in 0..spec.steps {
            if halve_at.contains(&k) && k > 0 {
                step *= 0.5;
            }
            let (loss, g) = loss_and_grad(model, &adv, shape, label, spec.loss)?;
            if traj.track_best {
                consider(loss, &adv, &mut best);
            }
            let g = if traj.momentum > 0.0 {
                for (m, gi) in mbuf.iter_mut().zip(&g) {
                    *m = traj.momentum * *m + gi;
                }
                mbuf.clone()
            } else {
                g
            };
            let dir = direction(spec.norm, &g, &mut rng);
            for (a, di) in adv.iter_mut().zip(&dir) {
                *a += step * di;
            }
            project(&mut adv, image, spec.norm, spec.epsilon);
            if k + 1 == spec.steps {
                let x = Tensor::new(adv.clone(), &[1, shape[0], shape[1], shape[2]])?;
                let logits = model.forward(&x, Mode::Eval)?;
                let classes = logits.shape()[1];
                let l = match spec.loss {
                    LossKind::Dlr if classes >= 4 => logits.dlr_loss(&[label])?,
                    _ => logits.cross_entropy(&[label])?,
                };
                final_loss = l.data()[0];
            }
        }
        consider(final_loss, &adv, &mut best);
    }
    Ok(best.expect("restarts >= 1").1)
}

/// Plain PGD: returns the final iterate of the highest-loss restart.
pub fn pgd(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
) -> Result<Vec<f64>> {
    pgd_seeded(model, image, shape, label, spec, spec.seed)
}

pub fn pgd_seeded(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    iterative_attack(
        model,
        image,
        shape,
        label,
        spec,
        &Trajectory {
            momentum: 0.0,
            halving: false,
            track_best: false,
        },
        seed,
    )
}

/// PGD with gradient momentum 0.75 and step halving at fixed fractions of
/// the budget, returning the best-loss iterate. An approximation of APGD-CE,
/// not a reimplementation.
pub fn momentum_pgd_ce(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
) -> Result<Vec<f64>> {
    momentum_pgd_seeded(model, image, shape, label, spec, spec.seed)
}

pub fn momentum_pgd_seeded(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    iterative_attack(
        model,
        image,
        shape,
        label,
        spec,
        &Trajectory {
            momentum: 0.75,
            halving: true,
            track_best: true,
        },
        seed,
    )
}

/// Attack one sample with a seed derived from the spec seed and the sample
/// index, so parallel evaluation is order-independent.
pub fn attack_sample(
    model: &mut Model,
    image: &[f64],
    shape: &[usize; 3],
    label: usize,
    spec: &AttackSpec,
    kind: AttackKind,
    sample_index: usize,
) -> Result<Vec<f64>> {
    let seed = spec.seed ^ sample_index as u64;
    match kind {
        AttackKind::Fgsm => fgsm(model, image, shape, label, spec),
        AttackKind::Pgd => pgd_seeded(model, image, shape, label, spec, seed),
        AttackKind::MomentumPgd => momentum_pgd_seeded(model, image, shape, label, spec, seed),
    }
}

#[derive(Debug, Clone)]
pub struct RobustResult {
    pub clean_correct: Vec<bool>,
    /// Correct on the clean input *and* on its adversarial example. A sample
    /// already misclassified cleanly counts as successfully attacked.
    pub robust_correct: Vec<bool>,
}

impl RobustResult {
    pub fn clean_acc(&self) -> f64 {
        frac(&self.clean_correct)
    }

    pub fn robust_acc(&self) -> f64 {
        frac(&self.robust_correct)
    }
}

fn frac(v: &[bool]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Clean and robust accuracy over a dataset. Parallel across samples; each
/// worker instantiates its own model from a shared snapshot.
pub fn evaluate_robust(
    model: &Model,
    data: &Dataset,
    spec: &AttackSpec,
    kind: AttackKind,
) -> Result<RobustResult> {
    spec.validate()?;
    data.validate()?;
    let snap = model.snapshot()?;
    let shape = [data.channels, data.height, data.width];
    let flags: Vec<(bool, bool)> = (0..data.n)
        .into_par_iter()
        .map_init(
            || snap.instantiate(),
            |m, i| -> Result<(bool, bool)> {
                let m = m.as_mut().map_err(|e| Error::Config(format!("snapshot: {e}")))?;
                let image = data.image(i);
                let label = data.labels[i];
                let clean = predict(m, image, &shape)? == label;
                if !clean {
                    return Ok((false, false));
                }
                let adv = attack_sample(m, image, &shape, label, spec, kind, i)?;
                debug_assert!(feasible(&adv, image, spec.norm, spec.epsilon));
                let robust = predict(m, &adv, &shape)? == label;
                Ok((true, robust))
            },
        )
        .collect::<Result<_>>()?;
    Ok(RobustResult {
        clean_correct: flags.iter().map(|f| f.0).collect(),
        robust_correct: flags.iter().map(|f| f.1).collect(),
    })
}

/// Norm-bound and box check, used by tests and debug assertions.
pub fn feasible(adv: &[f64], x0: &[f64], norm: Norm, eps: f64) -> bool {
    if adv.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return false;
    }
    match norm {
        Norm::Linf => adv
            .iter()
            .zip(x0)
            .all(|(a, x)| (a - x).abs() <= eps + 1e-12),
        Norm::L2 => {
            let n = l2(&adv.iter().zip(x0).map(|(a, x)| a - x).collect::<Vec<_>>());
            n <= eps * (1.0 + 1e-9)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::{build_mini_resnet, ActivationKind, NetSpec};

    fn tiny_model(classes: usize) -> Model {
        let spec = NetSpec {
            in_channels: 3,
            in_hw: 8,
            stem_width: 4,
            block_widths: vec![4],
            classes,
            activation: ActivationKind::ReLU,
            input_mean: vec![0.5; 3],
            input_std: vec![0.25; 3],
        };
        let mut m = build_mini_resnet(&spec, 1).unwrap();
        m.freeze();
        m
    }

    fn spec(norm: Norm, eps: f64) -> AttackSpec {
        AttackSpec {
            norm,
            epsilon: eps,
            steps: 5,
            step_size: eps / 3.0,
            restarts: 2,
            loss: LossKind::CrossEntropy,
            seed: 9,
        }
    }

    #[test]
    fn eps_parsing() {
        assert!((parse_eps("8/255").unwrap() - 8.0 / 255.0).abs() < 1e-15);
        assert_eq!(parse_eps("0.031").unwrap(), 0.031);
        assert!(parse_eps("-1").is_err());
        assert!(parse_eps("8/0").is_err());
        assert!(parse_eps("abc").is_err());
    }

    #[test]
    fn fgsm_eps_zero_is_identity() {
        let mut m = tiny_model(4);
        let ds = synth_blobs(2, 4, 8, 3).unwrap();
        let adv = fgsm(&mut m, ds.image(0), &[3, 8, 8], ds.labels[0], &spec(Norm::Linf, 0.0)).unwrap();
        assert_eq!(adv, ds.image(0));
    }

    #[test]
    fn attacks_are_feasible() {
        let mut m = tiny_model(4);
        let ds = synth_blobs(6, 4, 8, 5).unwrap();
        for (norm, eps) in [(Norm::Linf, 8.0 / 255.0), (Norm::L2, 0.5)] {
            let sp = spec(norm, eps);
            for i in 0..ds.n {
                let adv =
                    attack_sample(&mut m, ds.image(i), &[3, 8, 8], ds.labels[i], &sp, AttackKind::Pgd, i)
                        .unwrap();
                assert!(feasible(&adv, ds.image(i), norm, eps), "{norm:?} sample {i}");
                let adv = attack_sample(
                    &mut m,
                    ds.image(i),
                    &[3, 8, 8],
                    ds.labels[i],
                    &sp,
                    AttackKind::MomentumPgd,
                    i,
                )
                .unwrap();
                assert!(feasible(&adv, ds.image(i), norm, eps), "mpgd {norm:?} sample {i}");
            }
        }
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let mut m = tiny_model(4);
        let ds = synth_blobs(3, 4, 8, 7).unwrap();
        let eps = 8.0 / 255.0;
        let sp = AttackSpec {
            norm: Norm::Linf,
            epsilon: eps,
            steps: 1,
            step_size: eps,
            restarts: 1,
            loss: LossKind::CrossEntropy,
            seed: 0,
        };
        for i in 0..ds.n {
            let a = pgd(&mut m, ds.image(i), &[3, 8, 8], ds.labels[i], &sp).unwrap();
            let b = fgsm(&mut m, ds.image(i), &[3, 8, 8], ds.labels[i], &sp).unwrap();
            assert_eq!(a, b, "sample {i}");
        }
    }

    #[test]
    fn momentum_zero_no_halving_matches_pgd() {
        let mut m = tiny_model(4);
        let ds = synth_blobs(3, 4, 8, 11).unwrap();
        let sp = spec(Norm::Linf, 8.0 / 255.0);
        let traj = Trajectory {
            momentum: 0.0,
            halving: false,
            track_best: false,
        };
        for i in 0..ds.n {
            let a = iterative_attack(&mut m, ds.image(i), &[3, 8, 8], ds.labels[i], &sp, &traj, 5).unwrap();
            let b = pgd_seeded(&mut m, ds.image(i), &[3, 8, 8], ds.labels[i], &sp, 5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_ordered() {
        let m = tiny_model(4);
        let ds = synth_blobs(12, 4, 8, 13).unwrap();
        let sp = spec(Norm::Linf, 8.0 / 255.0);
        let r1 = evaluate_robust(&m, &ds, &sp, AttackKind::Pgd).unwrap();
        let r2 = evaluate_robust(&m, &ds, &sp, AttackKind::Pgd).unwrap();
        assert_eq!(r1.clean_correct, r2.clean_correct);
        assert_eq!(r1.robust_correct, r2.robust_correct);
        assert!(r1.robust_acc() <= r1.clean_acc());
    }

    #[test]
    fn eps_zero_eval_has_equal_accuracies() {
        let m = tiny_model(4);
        let ds = synth_blobs(10, 4, 8, 17).unwrap();
        let r = evaluate_robust(&m, &ds, &spec(Norm::Linf, 0.0), AttackKind::Pgd).unwrap();
        assert_eq!(r.clean_acc(), r.robust_acc());
    }

    #[test]
    fn zero_gradient_falls_back_to_random_direction() {
        // Saturate the model with a sparsifier blocking everything at the
        // stem: logits become constant, gradients vanish.
        let mut m = tiny_model(4);
        let ds = synth_blobs(2, 4, 8, 19).unwrap();
        let batches: Vec<Tensor> = ds.batches(2).into_iter().map(|(t, _)| t).collect();
        let calib = crate::sparsifier::calibrate(&mut m, &[0], &batches).unwrap();
        crate::sparsifier::attach(
            &mut m,
            crate::sparsifier::Placement::SingleSite(0),
            1e6,
            &calib,
            crate::sparsifier::Centering::PerChannelMean,
        )
        .unwrap();
        m.sparsifiers.as_mut().unwrap().enabled = true;
        let sp = spec(Norm::Linf, 8.0 / 255.0);
        let adv = pgd(&mut m, ds.image(0), &[3, 8, 8], ds.labels[0], &sp).unwrap();
        assert!(feasible(&adv, ds.image(0), Norm::Linf, sp.epsilon));
        // the fallback direction actually moved the point
        assert_ne!(adv, ds.image(0));
    }
}
