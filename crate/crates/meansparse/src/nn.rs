//! Layers, the activation-function catalogue, and a small residual network
//! with indexed activation sites.
//!
//! Activation sites are numbered `0..=2B` for a net with `B` residual blocks:
//! site 0 is the stem activation, odd sites sit inside a block's main path,
//! even sites (> 0) consume the sum of main path and shortcut. Sparsifiers
//! attach to these sites, immediately before the activation.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsifier::SparsifierBank;
use crate::tensor::{DType, Tensor};

/// Activation function selector; parametric kinds carry trainable scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    ReLU,
    ELU,
    GELU,
    SiLU,
    /// `x * sigmoid(beta * x)`, beta learnable.
    PSiLU,
    /// `x * (sigmoid(beta * x) - s) / (1 - s)`, beta and shift learnable.
    /// Formula follows the parametric shifted SiLU of Dai et al. (2022),
    /// "Parameterizing Activation Functions for Adversarial Robustness".
    PSSiLU,
}

impl ActivationKind {
    pub fn parse(s: &str) -> Result<ActivationKind> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::ReLU),
            "elu" => Ok(ActivationKind::ELU),
            "gelu" => Ok(ActivationKind::GELU),
            "silu" => Ok(ActivationKind::SiLU),
            "psilu" => Ok(ActivationKind::PSiLU),
            "pssilu" => Ok(ActivationKind::PSSiLU),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::ReLU => "relu",
            ActivationKind::ELU => "elu",
            ActivationKind::GELU => "gelu",
            ActivationKind::SiLU => "silu",
            ActivationKind::PSiLU => "psilu",
            ActivationKind::PSSiLU => "pssilu",
        }
    }
}

/// Activation kind plus its learnable parameters, shared across all sites.
pub struct Activation {
    pub kind: ActivationKind,
    /// `[beta]` for PSiLU; `[beta, shift]` for PSSiLU; empty otherwise.
    pub params: Vec<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Result<Activation> {
        let params = match kind {
            ActivationKind::PSiLU => vec![Tensor::with_grad(vec![1.0], &[1])?],
            ActivationKind::PSSiLU => vec![
                Tensor::with_grad(vec![1.0], &[1])?,
                Tensor::with_grad(vec![0.1], &[1])?,
            ],
            _ => vec![],
        };
        Ok(Activation { kind, params })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            ActivationKind::ReLU => x.relu(),
            ActivationKind::ELU => x.elu(),
            ActivationKind::GELU => x.gelu(),
            ActivationKind::SiLU => x.silu(),
            ActivationKind::PSiLU => x.psilu(&self.params[0]),
            ActivationKind::PSSiLU => x.pssilu(&self.params[0], &self.params[1]),
        }
    }
}

/// Declarative description of the mini residual network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub in_hw: usize,
    /// Stem width; block `i` has width `block_widths[i]`, with stride 2
    /// wherever the width increases over the previous stage.
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    pub classes: usize,
    pub activation: ActivationKind,
    /// Per-channel input standardization folded into the model so attack
    /// budgets stay in raw pixel units.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl NetSpec {
    /// Default desk-scale net: 4 blocks, widths (16, 16, 32, 64).
    pub fn mini(in_channels: usize, in_hw: usize, classes: usize, activation: ActivationKind) -> NetSpec {
        NetSpec {
            in_channels,
            in_hw,
            stem_width: 16,
            block_widths: vec![16, 16, 32, 64],
            classes,
            activation,
            input_mean: vec![0.5; in_channels],
            input_std: vec![0.25; in_channels],
        }
    }

    pub fn blocks(&self) -> usize {
        self.block_widths.len()
    }

    /// Number of activation sites, `2B + 1`.
    pub fn sites(&self) -> usize {
        2 * self.blocks() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.blocks() < 1 {
            return Err(Error::Config("at least one residual block required".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes required".into()));
        }
        if self.input_mean.len() != self.in_channels || self.input_std.len() != self.in_channels {
            return Err(Error::Config("input standardization must be per channel".into()));
        }
        Ok(())
    }
}

/// Where a given activation site sits in the block structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Stem,
    MainPath,
    AfterAddition,
}

pub fn site_kind(site: usize) -> SiteKind {
    if site == 0 {
        SiteKind::Stem
    } else if site % 2 == 1 {
        SiteKind::MainPath
    } else {
        SiteKind::AfterAddition
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Conv {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> Result<Conv> {
        let fan_in = cin * k * k;
        let limit = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Ok(Conv {
            weight: Tensor::with_grad(data, &[cout, cin, k, k])?,
            stride,
            pad,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.stride, self.pad)
    }
}

/// Batch normalization with running population statistics.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: Tensor::with_grad(vec![1.0; c], &[c])?,
            beta: Tensor::with_grad(vec![0.0; c], &[c])?,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (out, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, self.eps)?;
                let m = self.momentum;
                for c in 0..mean.len() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
                }
                Ok(out)
            }
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Eval mode is a deterministic per-channel affine map.
    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.running_mean.len();
        let mut scale = vec![0.0; c];
        let mut shift = vec![0.0; c];
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            scale[ch] = self.gamma.data()[ch] * inv;
            shift[ch] = self.beta.data()[ch] - self.running_mean[ch] * self.gamma.data()[ch] * inv;
        }
        x.channel_affine(&scale, &shift)
    }
}

pub struct ResBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    /// 1x1 projection when width or resolution changes.
    shortcut: Option<(Conv, BatchNorm)>,
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Result<Linear> {
        let limit = (6.0 / d_in as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-limit..limit)).collect();
        Ok(Linear {
            weight: Tensor::with_grad(data, &[d_in, d_out])?,
            bias: Tensor::with_grad(vec![0.0; d_out], &[d_out])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.row_bias(&self.bias)
    }
}

/// Mini residual network. Owns an optional sparsifier bank; when the bank is
/// present and enabled, each attached site applies the sparsification
/// operator right before its activation.
pub struct Model {
    pub spec: NetSpec,
    pub seed: u64,
    stem: (Conv, BatchNorm),
    blocks: Vec<ResBlock>,
    fc: Linear,
    pub activation: Activation,
    pub sparsifiers: Option<SparsifierBank>,
    frozen: bool,
}

/// Observes pre-activation tensors (before any sparsifier) during a forward
/// pass; used for calibration and graph inspection.
pub type SiteTap<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Deterministic He-uniform initialization from the seed.
pub fn build_mini_resnet(spec: &NetSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_conv = Conv::init(&mut rng, spec.stem_width, spec.in_channels, 3, 1, 1)?;
    let stem_bn = BatchNorm::new(spec.stem_width)?;
    let mut blocks = Vec::new();
    let mut prev = spec.stem_width;
    for &w in &spec.block_widths {
        let stride = if w == prev { 1 } else { 2 };
        let conv1 = Conv::init(&mut rng, w, prev, 3, stride, 1)?;
        let bn1 = BatchNorm::new(w)?;
        let conv2 = Conv::init(&mut rng, w, w, 3, 1, 1)?;
        let bn2 = BatchNorm::new(w)?;
        let shortcut = if stride != 1 || w != prev {
            Some((Conv::init(&mut rng, w, prev, 1, stride, 0)?, BatchNorm::new(w)?))
        } else {
            None
        };
        blocks.push(ResBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        });
        prev = w;
    }
    let fc = Linear::init(&mut rng, prev, spec.classes)?;
    let activation = Activation::new(spec.activation)?;
    Ok(Model {
        spec: spec.clone(),
        seed,
        stem: (stem_conv, stem_bn),
        blocks,
        fc,
        activation,
        sparsifiers: None,
        frozen: false,
    })
}

impl Model {
    pub fn sites(&self) -> usize {
        self.spec.sites()
    }

    /// Mark the model read-only for calibration and evaluation.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_inner(x, mode, None)
    }

    /// Forward pass that reports each site's pre-activation tensor.
    pub fn forward_tapped(&mut self, x: &Tensor, mode: Mode, tap: SiteTap) -> Result<Tensor> {
        self.forward_inner(x, mode, Some(tap))
    }

    fn forward_inner(&mut self, x: &Tensor, mode: Mode, mut tap: Option<SiteTap>) -> Result<Tensor> {
        if mode == Mode::Train && self.frozen {
            return Err(Error::InvalidParam("train-mode forward on a frozen model".into()));
        }
        let mut inv_std = vec![0.0; self.spec.in_channels];
        let mut shift = vec![0.0; self.spec.in_channels];
        for c in 0..self.spec.in_channels {
            inv_std[c] = 1.0 / self.spec.input_std[c];
            shift[c] = -self.spec.input_mean[c] / self.spec.input_std[c];
        }
        let mut h = x.channel_affine(&inv_std, &shift)?;

        // borrow dance: batch norm needs &mut for running stats
        let (stem_conv, stem_bn) = (&self.stem.0, &mut self.stem.1);
        let pre = stem_bn.forward(&stem_conv.forward(&h)?, mode)?;
        let act = &self.activation;
        let spars = &self.sparsifiers;
        let mut site_in = |site: usize, pre: Tensor| -> Result<Tensor> {
            if let Some(t) = tap.as_mut() {
                t(site, &pre);
            }
            match spars {
                Some(bank) => bank.apply(site, &pre),
                None => Ok(pre),
            }
        };
        h = act.apply(&site_in(0, pre)?)?;

        for (b, block) in self.blocks.iter_mut().enumerate() {
            let main = block.bn1.forward(&block.conv1.forward(&h)?, mode)?;
            let main = act.apply(&site_in(2 * b + 1, main)?)?;
            let main = block.bn2.forward(&block.conv2.forward(&main)?, mode)?;
            let short = match &mut block.shortcut {
                Some((conv, bn)) => bn.forward(&conv.forward(&h)?, mode)?,
                None => h.clone(),
            };
            let sum = main.add(&short)?;
            h = act.apply(&site_in(2 * b + 2, sum)?)?;
        }

        let pooled = h.global_avg_pool()?;
        self.fc.forward(&pooled)
    }

    /// Trainable leaves in declaration order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = vec![self.stem.0.weight.clone(), self.stem.1.gamma.clone(), self.stem.1.beta.clone()];
        for b in &self.blocks {
            out.push(b.conv1.weight.clone());
            out.push(b.bn1.gamma.clone());
            out.push(b.bn1.beta.clone());
            out.push(b.conv2.weight.clone());
            out.push(b.bn2.gamma.clone());
            out.push(b.bn2.beta.clone());
            if let Some((c, bn)) = &b.shortcut {
                out.push(c.weight.clone());
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
            }
        }
        out.push(self.fc.weight.clone());
        out.push(self.fc.bias.clone());
        out.extend(self.activation.params.iter().cloned());
        out
    }

    /// Indices into `params()` of the activation-function parameters (they
    /// are excluded from weight decay).
    pub fn activation_param_range(&self) -> std::ops::Range<usize> {
        let n = self.params().len();
        n - self.activation.params.len()..n
    }

    /// Replace parameters, in the same order `params()` reports them.
    pub fn set_params(&mut self, new: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidParam("cannot mutate a frozen model".into()));
        }
        let expected = self.params().len();
        if new.len() != expected {
            return Err(Error::InvalidParam(format!(
                "expected {expected} parameter tensors, got {}",
                new.len()
            )));
        }
        let mut it = new.into_iter();
        let mut take = |slot: &mut Tensor| {
            *slot = it.next().unwrap();
        };
        take(&mut self.stem.0.weight);
        take(&mut self.stem.1.gamma);
        take(&mut self.stem.1.beta);
        for b in &mut self.blocks {
            take(&mut b.conv1.weight);
            take(&mut b.bn1.gamma);
            take(&mut b.bn1.beta);
            take(&mut b.conv2.weight);
            take(&mut b.bn2.gamma);
            take(&mut b.bn2.beta);
            if let Some((c, bn)) = &mut b.shortcut {
                take(&mut c.weight);
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        take(&mut self.fc.weight);
        take(&mut self.fc.bias);
        for p in &mut self.activation.params {
            take(p);
        }
        Ok(())
    }

    fn running_stats(&self) -> Vec<(&Vec<f64>, &Vec<f64>)> {
        let mut out = vec![(&self.stem.1.running_mean, &self.stem.1.running_var)];
        for b in &self.blocks {
            out.push((&b.bn1.running_mean, &b.bn1.running_var));
            out.push((&b.bn2.running_mean, &b.bn2.running_var));
            if let Some((_, bn)) = &b.shortcut {
                out.push((&bn.running_mean, &bn.running_var));
            }
        }
        out
    }

    fn running_stats_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        let mut out = vec![(&mut self.stem.1.running_mean, &mut self.stem.1.running_var)];
        for b in &mut self.blocks {
            out.push((&mut b.bn1.running_mean, &mut b.bn1.running_var));
            out.push((&mut b.bn2.running_mean, &mut b.bn2.running_var));
            if let Some((_, bn)) = &mut b.shortcut {
                out.push((&mut bn.running_mean, &mut bn.running_var));
            }
        }
        out
    }

    /// Checkpoint: JSON header line (spec, seed, activation), then parameter
    /// tensors and batch-norm running statistics in declaration order.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::json!({
            "spec": self.spec,
            "seed": self.seed,
            "activation": self.spec.activation.name(),
        });
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for p in self.params() {
            p.write_to(w, DType::F64)?;
        }
        for (m, v) in self.running_stats() {
            crate::tensor::write_mstn(w, m, &[m.len()], DType::F64)?;
            crate::tensor::write_mstn(w, v, &[v.len()], DType::F64)?;
        }
        Ok(())
    }

    pub fn save_to_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Model> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let header: serde_json::Value = serde_json::from_slice(&line)?;
        let spec: NetSpec = serde_json::from_value(header["spec"].clone())?;
        let seed = header["seed"].as_u64().unwrap_or(0);
        let mut model = build_mini_resnet(&spec, seed)?;
        let count = model.params().len();
        let mut params = Vec::with_capacity(count);
        for old in model.params() {
            let (data, shape, _) = crate::tensor::read_mstn(r)?;
            if shape != old.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor shape {:?} does not match model shape {:?}",
                    shape,
                    old.shape()
                )));
            }
            params.push(Tensor::with_grad(data, &shape)?);
        }
        model.set_params(params)?;
        for (m, v) in model.running_stats_mut() {
            let (data, _, _) = crate::tensor::read_mstn(r)?;
            *m = data;
            let (data, _, _) = crate::tensor::read_mstn(r)?;
            *v = data;
        }
        Ok(model)
    }

    pub fn load_from_file(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Model::load(&mut r)
    }

    /// Serialized, thread-shareable copy of the full model state. Tensors
    /// are `Rc`-backed and not `Send`, so parallel evaluation shares a
    /// snapshot and each worker instantiates its own model from it.
    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut ckpt = Vec::new();
        self.save(&mut ckpt)?;
        let bank = match &self.sparsifiers {
            Some(b) => {
                let mut bytes = Vec::new();
                b.save(&mut bytes)?;
                Some((bytes, b.enabled))
            }
            None => None,
        };
        Ok(Snapshot { ckpt, bank })
    }
}

#[derive(Clone)]
pub struct Snapshot {
    ckpt: Vec<u8>,
    bank: Option<(Vec<u8>, bool)>,
}

impl Snapshot {
    /// Rebuild a frozen model from the snapshot.
    pub fn instantiate(&self) -> Result<Model> {
        let mut model = Model::load(&mut self.ckpt.as_slice())?;
        if let Some((bytes, enabled)) = &self.bank {
            let mut bank = crate::sparsifier::SparsifierBank::load(&mut bytes.as_slice())?;
            bank.enabled = *enabled;
            model.sparsifiers = Some(bank);
        }
        model.freeze();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            in_channels: 3,
            in_hw: 8,
            stem_width: 4,
            block_widths: vec![4, 8],
            classes: 4,
            activation: ActivationKind::GELU,
            input_mean: vec![0.5; 3],
            input_std: vec![0.25; 3],
        }
    }

    #[test]
    fn site_count_matches_block_count() {
        // 2B + 1 sites
        let spec = NetSpec {
            block_widths: vec![16; 8],
            ..NetSpec::mini(3, 32, 10, ActivationKind::ReLU)
        };
        assert_eq!(spec.sites(), 17);
        let spec1 = NetSpec {
            block_widths: vec![16],
            ..NetSpec::mini(3, 32, 10, ActivationKind::ReLU)
        };
        assert_eq!(spec1.sites(), 3);
    }

    #[test]
    fn forward_on_zero_input_is_finite() {
        let mut model = build_mini_resnet(&tiny_spec(), 7).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn site_parity_matches_block_structure() {
        let mut model = build_mini_resnet(&tiny_spec(), 7).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let mut seen = Vec::new();
        model
            .forward_tapped(&x, Mode::Eval, &mut |site, t| {
                seen.push((site, t.shape().to_vec()));
            })
            .unwrap();
        assert_eq!(seen.len(), 5);
        for (site, _) in &seen {
            match site_kind(*site) {
                SiteKind::Stem => assert_eq!(*site, 0),
                SiteKind::MainPath => assert_eq!(site % 2, 1),
                SiteKind::AfterAddition => {
                    assert!(site % 2 == 0 && *site > 0)
                }
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build_mini_resnet(&tiny_spec(), 42).unwrap();
        let b = build_mini_resnet(&tiny_spec(), 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut model = build_mini_resnet(&tiny_spec(), 3).unwrap();
        let x = Tensor::new(vec![0.3; 2 * 3 * 64], &[2, 3, 8, 8]).unwrap();
        // touch running stats so they are not defaults
        model.forward(&x, Mode::Train).unwrap();
        let before = model.forward(&x, Mode::Eval).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let mut loaded = Model::load(&mut buf.as_slice()).unwrap();
        let after = loaded.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn activation_values() {
        let x = Tensor::new(vec![-2.0, 0.0, 1.0], &[3]).unwrap();
        let relu = Activation::new(ActivationKind::ReLU).unwrap();
        assert_eq!(relu.apply(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
        let silu = Activation::new(ActivationKind::SiLU).unwrap();
        let out = silu.apply(&x).unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
        // PSiLU at beta=1 equals SiLU
        let psilu = Activation::new(ActivationKind::PSiLU).unwrap();
        let pout = psilu.apply(&x).unwrap();
        assert_eq!(pout.data(), out.data());
    }

    #[test]
    fn psilu_beta_limit_approaches_relu_on_positives() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        let beta = Tensor::new(vec![500.0], &[1]).unwrap();
        let out = x.psilu(&beta).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_beta_rejected() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        let beta = Tensor::new(vec![0.0], &[1]).unwrap();
        assert!(x.psilu(&beta).is_err());
    }
}
