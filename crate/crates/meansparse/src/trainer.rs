//! SGD training loops producing the frozen base models that sparsification
//! post-processes: standard cross-entropy, PGD adversarial training, and
//! TRADES.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{evaluate_robust, AttackKind, AttackSpec, Norm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    PgdAt,
    Trades,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(TrainMode::Standard),
            "pgd-at" | "pgd_at" | "at" => Ok(TrainMode::PgdAt),
            "trades" => Ok(TrainMode::Trades),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::PgdAt => "pgd-at",
            TrainMode::Trades => "trades",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs at which the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial * self.factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: TrainMode,
    /// TRADES robustness weight; must be > 0 in TRADES mode.
    pub trades_beta: f64,
    /// Inner-maximization attack for PGD-AT and TRADES.
    pub at_attack: Option<AttackSpec>,
    /// Attack used for per-epoch validation and model selection; falls back
    /// to `at_attack` when absent.
    pub eval_attack: Option<AttackSpec>,
    /// Select the checkpoint with the best robust validation accuracy
    /// (otherwise best clean accuracy).
    pub select_by_robust: bool,
    /// Random crop + horizontal flip.
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        match self.mode {
            TrainMode::Standard => {}
            TrainMode::PgdAt => {
                if self.at_attack.is_none() {
                    return Err(Error::Config("pgd-at requires an attack spec".into()));
                }
            }
            TrainMode::Trades => {
                if self.at_attack.is_none() {
                    return Err(Error::Config("trades requires an attack spec".into()));
                }
                if self.trades_beta <= 0.0 {
                    return Err(Error::Config(format!(
                        "trades beta must be > 0, got {}",
                        self.trades_beta
                    )));
                }
            }
        }
        Ok(())
    }

    /// Desk-scale default recipe: the long-schedule recipe compressed to 30
    /// epochs with drops at the same relative positions (1/2 and ~3/4).
    pub fn default_recipe(mode: TrainMode, seed: u64) -> TrainConfig {
        let at = AttackSpec {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 0.0078,
            restarts: 1,
            loss: crate::attacks::LossKind::CrossEntropy,
            seed,
        };
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: LrSchedule {
                initial: 0.1,
                decay_epochs: vec![15, 25],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            mode,
            trades_beta: 0.6,
            at_attack: if mode == TrainMode::Standard { None } else { Some(at.clone()) },
            eval_attack: Some(at),
            select_by_robust: mode != TrainMode::Standard,
            augment: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_val_acc: f64,
    pub pgd_val_acc: f64,
}

pub fn write_history_csv<W: Write>(w: &mut W, history: &[EpochStats]) -> Result<()> {
    writeln!(w, "epoch,lr,train_loss,clean_val_acc,pgd_val_acc")?;
    for h in history {
        writeln!(
            w,
            "{},{:.6e},{:.8e},{:.6},{:.6}",
            h.epoch, h.lr, h.train_loss, h.clean_val_acc, h.pgd_val_acc
        )?;
    }
    Ok(())
}

/// Random crop (zero padding) and horizontal flip of one image in place.
fn augment_image(img: &mut [f64], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let pad = (h / 8).clamp(1, 4);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.gen::<bool>();
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize + dy;
                let sx = x as isize + dx;
                let sx = if flip { w as isize - 1 - sx } else { sx };
                let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

/// Batched inner maximization for adversarial training. Uses eval-mode
/// forward passes (frozen batch-norm statistics) for the attack; the update
/// step afterwards runs in train mode.
fn batch_adv(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    trades_ref: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let n = shape[0];
    let img_len: usize = shape[1..].iter().product();
    let x0 = x.data().to_vec();
    let mut adv = x0.clone();
    // random start inside the ball
    match spec.norm {
        Norm::Linf => {
            for a in adv.iter_mut() {
                *a += rng.gen_range(-spec.epsilon..=spec.epsilon);
            }
        }
        Norm::L2 => {
            for s in 0..n {
                let delta: Vec<f64> = (0..img_len)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
                let r = spec.epsilon * rng.gen_range(0.0..1.0f64).powf(1.0 / img_len as f64);
                for (a, d) in adv[s * img_len..(s + 1) * img_len].iter_mut().zip(&delta) {
                    *a += d * r / norm;
                }
            }
        }
    }
    project_batch(&mut adv, &x0, n, img_len, spec);
    for _ in 0..spec.steps {
        let xt = Tensor::with_grad(adv.clone(), &shape)?;
        let logits = model.forward(&xt, Mode::Eval)?;
        let loss = match trades_ref {
            // TRADES maximizes the divergence from the clean prediction
            Some(clean_logits) => clean_logits.kl_div(&logits)?,
            None => logits.cross_entropy(labels)?,
        };
        loss.backward()?;
        let g = xt.grad().ok_or(Error::NonFinite { op: "at grad" })?;
        match spec.norm {
            Norm::Linf => {
                for (a, gi) in adv.iter_mut().zip(&g) {
                    *a += spec.step_size * gi.signum();
                }
            }
            Norm::L2 => {
                for s in 0..n {
                    let gs = &g[s * img_len..(s + 1) * img_len];
                    let norm = gs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    for (a, gi) in adv[s * img_len..(s + 1) * img_len].iter_mut().zip(gs) {
                        *a += spec.step_size * gi / norm;
                    }
                }
            }
        }
        project_batch(&mut adv, &x0, n, img_len, spec);
    }
    Tensor::new(adv, &shape)
}

fn project_batch(adv: &mut [f64], x0: &[f64], n: usize, img_len: usize, spec: &AttackSpec) {
    match spec.norm {
        Norm::Linf => {
            for (a, &x) in adv.iter_mut().zip(x0) {
                *a = (*a).clamp(x - spec.epsilon, x + spec.epsilon).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            for s in 0..n {
                let range = s * img_len..(s + 1) * img_len;
                let norm = adv[range.clone()]
                    .iter()
                    .zip(&x0[range.clone()])
                    .map(|(a, x)| (a - x) * (a - x))
                    .sum::<f64>()
                    .sqrt();
                let scale = if norm > spec.epsilon { spec.epsilon / norm } else { 1.0 };
                for (a, &x) in adv[range.clone()].iter_mut().zip(&x0[range]) {
                    *a = (x + (*a - x) * scale).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// The per-batch training loss for the configured mode. Exposed for tests.
pub fn training_loss(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match cfg.mode {
        TrainMode::Standard => {
            let logits = model.forward(x, Mode::Train)?;
            logits.cross_entropy(labels)
        }
        TrainMode::PgdAt => {
            let spec = cfg.at_attack.as_ref().expect("validated");
            let adv = batch_adv(model, x, labels, spec, None, rng)?;
            // The inner maximization backprops through the live parameters;
            // drop those gradients so the returned loss's backward produces
            // exactly this batch's gradient.
            for p in model.params() {
                p.zero_grad();
            }
            let logits = model.forward(&adv, Mode::Train)?;
            logits.cross_entropy(labels)
        }
        TrainMode::Trades => {
            let spec = cfg.at_attack.as_ref().expect("validated");
            let clean_ref = model.forward(x, Mode::Eval)?.detach();
            let adv = batch_adv(model, x, labels, spec, Some(&clean_ref), rng)?;
            for p in model.params() {
                p.zero_grad();
            }
            let clean_logits = model.forward(x, Mode::Train)?;
            let adv_logits = model.forward(&adv, Mode::Train)?;
            let ce = clean_logits.cross_entropy(labels)?;
            let kl = clean_logits.kl_div(&adv_logits)?;
            ce.add(&kl.scale(cfg.trades_beta)?)
        }
    }
}

struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
    /// Parameter indices excluded from weight decay (activation parameters).
    no_decay: std::ops::Range<usize>,
}

impl Sgd {
    fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        let params = model.params();
        let mut new = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let mut data = p.data().to_vec();
            match p.grad() {
                Some(g) => {
                    let wd = if self.no_decay.contains(&i) { 0.0 } else { self.weight_decay };
                    let v = &mut self.velocity[i];
                    for ((d, gi), vi) in data.iter_mut().zip(&g).zip(v.iter_mut()) {
                        *vi = self.momentum * *vi + gi + wd * *d;
                        *d -= lr * *vi;
                    }
                }
                None => {} // parameter unused by this batch's graph
            }
            new.push(Tensor::with_grad(data, p.shape())?);
        }
        model.set_params(new)
    }
}

/// Train `model` in place, returning the selected best checkpoint and the
/// per-epoch history. Fixed seed gives bit-identical results.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    train_set.validate()?;
    val_set.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd {
        velocity: model.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        no_decay: model.activation_param_range(),
    };
    let sel_attack = cfg.eval_attack.as_ref().or(cfg.at_attack.as_ref());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<u8>)> = None;
    let (c, h, w) = (train_set.channels, train_set.height, train_set.width);
    let mut order: Vec<usize> = (0..train_set.n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk);
            let x = if cfg.augment {
                let mut data = x.data().to_vec();
                let img_len = c * h * w;
                for s in 0..chunk.len() {
                    augment_image(&mut data[s * img_len..(s + 1) * img_len], c, h, w, &mut rng);
                }
                Tensor::new(data, x.shape())?
            } else {
                x
            };
            let loss = training_loss(model, &x, &labels, cfg, &mut rng).map_err(|e| {
                Error::Divergence(format!("epoch {epoch}, batch {batches}: {e}"))
            })?;
            let value = loss.data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {batches}"
                )));
            }
            loss.backward()?;
            opt.step(model, lr)?;
            loss_sum += value;
            batches += 1;
        }
        let clean_val_acc = clean_accuracy(model, val_set)?;
        let pgd_val_acc = match sel_attack {
            Some(spec) => evaluate_robust(model, val_set, spec, AttackKind::Pgd)?.robust_acc(),
            None => clean_val_acc,
        };
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            clean_val_acc,
            pgd_val_acc,
        });
        let score = if cfg.select_by_robust { pgd_val_acc } else { clean_val_acc };
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            let mut bytes = Vec::new();
            model.save(&mut bytes)?;
            best = Some((score, bytes));
        }
    }
    let (_, bytes) = best.expect("epochs >= 1");
    let best_model = Model::load(&mut bytes.as_slice())?;
    Ok((best_model, history))
}

/// Batched clean accuracy in eval mode.
pub fn clean_accuracy(model: &mut Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, labels) in data.batches(256) {
        let logits = model.forward(&x, Mode::Eval)?;
        let k = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let row_logits = &logits.data()[row * k..(row + 1) * k];
            let pred = row_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.n as f64)
}
