//! The mean-centered sparsification operator and its one-pass calibration.
//!
//! A calibrated site blocks every feature within `Th = alpha * sigma_ch` of
//! its center (the per-channel mean by default), replacing it with the center
//! value and passing everything else through unchanged. The boundary is
//! inclusive: `|a - c| <= Th` is blocked. Gradients through the blocked band
//! are exactly zero, so attacks face the true function.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{site_kind, Mode, Model, SiteKind};
use crate::tensor::{read_mstn, write_mstn, DType, Tensor};

/// Keeps `Th` well-defined on dead (constant) channels.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Reference point the operator centers on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Centering {
    /// Per-channel calibration mean (the default).
    PerChannelMean,
    /// Plain hard thresholding around zero.
    Zero,
    /// One mean shared by all channels.
    GlobalMean,
}

impl Centering {
    pub fn parse(s: &str) -> Result<Centering> {
        match s.to_ascii_lowercase().as_str() {
            "channel" => Ok(Centering::PerChannelMean),
            "zero" => Ok(Centering::Zero),
            "global" => Ok(Centering::GlobalMean),
            other => Err(Error::Config(format!("unknown centering `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Centering::PerChannelMean => "channel",
            Centering::Zero => "zero",
            Centering::GlobalMean => "global",
        }
    }
}

/// Frozen per-site operator state.
#[derive(Debug, Clone)]
pub struct SparsifierState {
    pub channels: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub global_mu: f64,
    pub alpha: f64,
    pub centering: Centering,
    /// Off by default: the attacker must face the true (blocked) gradient.
    pub straight_through: bool,
}

impl SparsifierState {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, alpha: f64, centering: Centering) -> Result<SparsifierState> {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidParam("mu/sigma length mismatch".into()));
        }
        if alpha < 0.0 {
            return Err(Error::InvalidParam(format!("alpha must be >= 0, got {alpha}")));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParam("sigma must be nonnegative".into()));
        }
        let n = mu.len().max(1);
        let global_mu = mu.iter().sum::<f64>() / n as f64;
        Ok(SparsifierState {
            channels: mu.len(),
            mu,
            sigma,
            global_mu,
            alpha,
            centering,
            straight_through: false,
        })
    }

    fn center(&self, ch: usize) -> f64 {
        match self.centering {
            Centering::PerChannelMean => self.mu[ch],
            Centering::Zero => 0.0,
            Centering::GlobalMean => self.global_mu,
        }
    }

    /// Elementwise rule on raw values; returns the output and the gradient
    /// mask (1 = pass, 0 = blocked).
    pub fn apply_values(&self, data: &[f64], channels_stride: (usize, usize)) -> (Vec<f64>, Vec<u8>) {
        let (c, inner) = channels_stride;
        let mut out = Vec::with_capacity(data.len());
        let mut mask = Vec::with_capacity(data.len());
        let outer = data.len() / (c * inner);
        for o in 0..outer {
            for ch in 0..c {
                let center = self.center(ch);
                let th = self.alpha * self.sigma[ch];
                let base = (o * c + ch) * inner;
                for &v in &data[base..base + inner] {
                    if (v - center).abs() <= th {
                        out.push(center);
                        mask.push(u8::from(self.straight_through));
                    } else {
                        out.push(v);
                        mask.push(1);
                    }
                }
            }
        }
        (out, mask)
    }

    /// Forward on a tape tensor; the backward rule passes gradients only
    /// outside the blocked band.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (c, inner) = match s.len() {
            4 => (s[1], s[2] * s[3]),
            2 => (s[1], 1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "sparsify",
                    lhs: s.to_vec(),
                    rhs: vec![self.channels],
                })
            }
        };
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "sparsify",
                lhs: s.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let (out, mask) = self.apply_values(x.data(), (c, inner));
        Ok(Tensor::pass_mask(x, out, mask))
    }
}

/// Streaming per-channel moments in Welford form; merge is deterministic for
/// a fixed shard order.
#[derive(Debug, Clone)]
pub struct CalibrationAccumulator {
    pub count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CalibrationAccumulator {
    pub fn new(channels: usize) -> CalibrationAccumulator {
        CalibrationAccumulator {
            count: vec![0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, ch: usize, v: f64) {
        self.count[ch] += 1;
        let d = v - self.mean[ch];
        self.mean[ch] += d / self.count[ch] as f64;
        self.m2[ch] += d * (v - self.mean[ch]);
    }

    /// Pool an `N x C x H x W` batch per channel.
    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let (c, inner) = match s.len() {
            4 => (s[1], s[2] * s[3]),
            2 => (s[1], 1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "calibrate",
                    lhs: s.to_vec(),
                    rhs: vec![self.channels()],
                })
            }
        };
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "calibrate",
                lhs: s.to_vec(),
                rhs: vec![self.channels()],
            });
        }
        let data = x.data();
        let outer = data.len() / (c * inner);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for &v in &data[base..base + inner] {
                    self.push(ch, v);
                }
            }
        }
        Ok(())
    }

    /// Chan-style pairwise combine.
    pub fn merge(&mut self, other: &CalibrationAccumulator) {
        for ch in 0..self.channels() {
            let (na, nb) = (self.count[ch] as f64, other.count[ch] as f64);
            if nb == 0.0 {
                continue;
            }
            if na == 0.0 {
                self.count[ch] = other.count[ch];
                self.mean[ch] = other.mean[ch];
                self.m2[ch] = other.m2[ch];
                continue;
            }
            let n = na + nb;
            let delta = other.mean[ch] - self.mean[ch];
            self.mean[ch] += delta * nb / n;
            self.m2[ch] += other.m2[ch] + delta * delta * na * nb / n;
            self.count[ch] += other.count[ch];
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }

    /// Population standard deviation with the sigma floor applied.
    pub fn sigma(&self) -> Vec<f64> {
        self.m2
            .iter()
            .zip(&self.count)
            .map(|(&m2, &n)| {
                if n == 0 {
                    SIGMA_FLOOR
                } else {
                    (m2 / n as f64).sqrt().max(SIGMA_FLOOR)
                }
            })
            .collect()
    }

    pub fn finalize(&self, alpha: f64, centering: Centering) -> Result<SparsifierState> {
        SparsifierState::new(self.mean(), self.sigma(), alpha, centering)
    }
}

/// Which activation sites receive a sparsifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    All,
    SingleSite(usize),
    /// Sites `0..=i`.
    Cumulative(usize),
    MainPathOnly,
    AfterAdditionOnly,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Placement> {
        let lower = s.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("single:") {
            return Ok(Placement::SingleSite(rest.parse().map_err(|_| {
                Error::Config(format!("bad site index in placement `{s}`"))
            })?));
        }
        if let Some(rest) = lower.strip_prefix("cumulative:") {
            return Ok(Placement::Cumulative(rest.parse().map_err(|_| {
                Error::Config(format!("bad site index in placement `{s}`"))
            })?));
        }
        match lower.as_str() {
            "all" => Ok(Placement::All),
            "main" => Ok(Placement::MainPathOnly),
            "after" => Ok(Placement::AfterAdditionOnly),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Placement::All => "all".into(),
            Placement::SingleSite(i) => format!("single:{i}"),
            Placement::Cumulative(i) => format!("cumulative:{i}"),
            Placement::MainPathOnly => "main".into(),
            Placement::AfterAdditionOnly => "after".into(),
        }
    }

    /// Site indices selected out of `total` sites.
    pub fn sites(&self, total: usize) -> Result<Vec<usize>> {
        let check = |site: usize| -> Result<()> {
            if site >= total {
                Err(Error::InvalidSite { site, count: total })
            } else {
                Ok(())
            }
        };
        Ok(match self {
            Placement::All => (0..total).collect(),
            Placement::SingleSite(i) => {
                check(*i)?;
                vec![*i]
            }
            Placement::Cumulative(i) => {
                check(*i)?;
                (0..=*i).collect()
            }
            Placement::MainPathOnly => (0..total)
                .filter(|&s| site_kind(s) == SiteKind::MainPath)
                .collect(),
            Placement::AfterAdditionOnly => (0..total)
                .filter(|&s| site_kind(s) == SiteKind::AfterAddition)
                .collect(),
        })
    }
}

/// Site-indexed sparsifier states sharing one `alpha`.
#[derive(Debug, Clone, Default)]
pub struct SparsifierBank {
    states: BTreeMap<usize, SparsifierState>,
    pub enabled: bool,
}

impl SparsifierBank {
    pub fn apply(&self, site: usize, x: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(x.clone());
        }
        match self.states.get(&site) {
            Some(state) => state.forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        for s in self.states.values_mut() {
            s.alpha = alpha;
        }
    }

    pub fn alpha(&self) -> f64 {
        self.states.values().next().map_or(0.0, |s| s.alpha)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn sites(&self) -> Vec<usize> {
        self.states.keys().copied().collect()
    }

    pub fn get(&self, site: usize) -> Option<&SparsifierState> {
        self.states.get(&site)
    }

    /// JSON header line, then per site the mu and sigma tensors.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct SiteHeader {
            site: usize,
            channels: usize,
            global_mu: f64,
        }
        let sites: Vec<SiteHeader> = self
            .states
            .iter()
            .map(|(&site, s)| SiteHeader {
                site,
                channels: s.channels,
                global_mu: s.global_mu,
            })
            .collect();
        let header = serde_json::json!({
            "alpha": self.alpha(),
            "centering": self.states.values().next().map_or("channel", |s| s.centering.name()),
            "sigma_floor": SIGMA_FLOOR,
            "sites": sites,
        });
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for s in self.states.values() {
            write_mstn(w, &s.mu, &[s.mu.len()], DType::F64)?;
            write_mstn(w, &s.sigma, &[s.sigma.len()], DType::F64)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<SparsifierBank> {
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
        let alpha = header["alpha"].as_f64().unwrap_or(0.0);
        let centering = Centering::parse(header["centering"].as_str().unwrap_or("channel"))?;
        let mut bank = SparsifierBank {
            states: BTreeMap::new(),
            enabled: true,
        };
        for entry in header["sites"].as_array().cloned().unwrap_or_default() {
            let site = entry["site"].as_u64().unwrap() as usize;
            let (mu, _, _) = read_mstn(r)?;
            let (sigma, _, _) = read_mstn(r)?;
            let mut state = SparsifierState::new(mu, sigma, alpha, centering)?;
            if let Some(g) = entry["global_mu"].as_f64() {
                state.global_mu = g;
            }
            bank.states.insert(site, state);
        }
        Ok(bank)
    }
}

/// Per-site accumulators from one calibration pass.
pub struct Calibration {
    accs: BTreeMap<usize, CalibrationAccumulator>,
}

impl Calibration {
    pub fn accumulator(&self, site: usize) -> Option<&CalibrationAccumulator> {
        self.accs.get(&site)
    }

    /// Build a bank for some placement with a shared alpha. The statistics do
    /// not depend on alpha, so one calibration serves every sweep point.
    pub fn bank(&self, sites: &[usize], alpha: f64, centering: Centering) -> Result<SparsifierBank> {
        let mut states = BTreeMap::new();
        for &site in sites {
            let acc = self.accs.get(&site).ok_or(Error::InvalidSite {
                site,
                count: self.accs.len(),
            })?;
            states.insert(site, acc.finalize(alpha, centering)?);
        }
        Ok(SparsifierBank {
            states,
            enabled: true,
        })
    }
}

/// One pass over the calibration batches with sparsifiers disabled,
/// collecting per-channel streaming moments of every requested site's
/// pre-activation tensor. Batches form the merge shards; they are merged in
/// batch order, so the result is independent of evaluation parallelism.
pub fn calibrate(model: &mut Model, sites: &[usize], batches: &[Tensor]) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = model.sites();
    for &s in sites {
        if s >= total {
            return Err(Error::InvalidSite { site: s, count: total });
        }
    }
    model.freeze();
    let saved = model.sparsifiers.take();
    let wanted: std::collections::BTreeSet<usize> = sites.iter().copied().collect();
    let mut accs: BTreeMap<usize, CalibrationAccumulator> = BTreeMap::new();
    let result = (|| -> Result<()> {
        for batch in batches {
            let mut shard: BTreeMap<usize, CalibrationAccumulator> = BTreeMap::new();
            let mut err = None;
            model.forward_tapped(batch, Mode::Eval, &mut |site, t| {
                if !wanted.contains(&site) || err.is_some() {
                    return;
                }
                let c = t.shape()[1];
                let acc = shard.entry(site).or_insert_with(|| CalibrationAccumulator::new(c));
                if let Err(e) = acc.update(t) {
                    err = Some(e);
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            for (site, acc) in shard {
                match accs.get_mut(&site) {
                    Some(total) => total.merge(&acc),
                    None => {
                        accs.insert(site, acc);
                    }
                }
            }
        }
        Ok(())
    })();
    model.sparsifiers = saved;
    result?;
    Ok(Calibration { accs })
}

/// Attach sparsifiers at the placement's sites, all sharing `alpha`. The
/// bank starts disabled, so model output is unchanged until it is enabled.
pub fn attach(
    model: &mut Model,
    placement: Placement,
    alpha: f64,
    calib: &Calibration,
    centering: Centering,
) -> Result<()> {
    let sites = placement.sites(model.sites())?;
    let mut bank = calib.bank(&sites, alpha, centering)?;
    bank.enabled = false;
    model.sparsifiers = Some(bank);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(mu: Vec<f64>, sigma: Vec<f64>, alpha: f64, centering: Centering) -> SparsifierState {
        SparsifierState::new(mu, sigma, alpha, centering).unwrap()
    }

    #[test]
    fn blocks_within_threshold_inclusive() {
        let s = state(vec![2.0], vec![1.0], 0.5, Centering::PerChannelMean);
        let (out, mask) = s.apply_values(&[2.3, 3.0, 2.5, 1.5], (1, 4));
        // |2.3-2| <= 0.5 blocked; 3.0 passes; 2.5 is exactly on the boundary
        assert_eq!(out, vec![2.0, 3.0, 2.0, 2.0]);
        assert_eq!(mask, vec![0, 1, 0, 0]);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let s = state(vec![2.0], vec![1.0], 0.0, Centering::PerChannelMean);
        let input = [2.0, 3.0, -1.0, 1.999_999];
        let (out, _) = s.apply_values(&input, (1, 4));
        assert_eq!(out, input.to_vec());
    }

    #[test]
    fn zero_centering_matches_hard_threshold() {
        let s = state(vec![5.0], vec![1.0], 2.0, Centering::Zero);
        let (out, _) = s.apply_values(&[-1.0, 3.0, -2.0], (1, 3));
        assert_eq!(out, vec![0.0, 3.0, 0.0]);
    }

    #[test]
    fn calibration_population_moments() {
        let mut acc = CalibrationAccumulator::new(1);
        for v in [1.0, 2.0, 3.0] {
            acc.push(0, v);
        }
        assert!((acc.mean()[0] - 2.0).abs() < 1e-15);
        assert!((acc.sigma()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_gets_sigma_floor() {
        let mut acc = CalibrationAccumulator::new(1);
        for _ in 0..3 {
            acc.push(0, 5.0);
        }
        assert_eq!(acc.mean()[0], 5.0);
        assert_eq!(acc.sigma()[0], SIGMA_FLOOR);
    }

    #[test]
    fn welford_matches_two_pass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..50_000).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let mut acc = CalibrationAccumulator::new(1);
        for &v in &vals {
            acc.push(0, v);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((acc.mean()[0] - mean).abs() / mean.abs() < 1e-9);
        assert!((acc.sigma()[0] - var.sqrt()).abs() / var.sqrt() < 1e-9);
    }

    #[test]
    fn merge_is_deterministic_and_close_to_single_stream() {
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut single = CalibrationAccumulator::new(1);
        for &v in &vals {
            single.push(0, v);
        }
        let mut a = CalibrationAccumulator::new(1);
        let mut b = CalibrationAccumulator::new(1);
        for &v in &vals[..400] {
            a.push(0, v);
        }
        for &v in &vals[400..] {
            b.push(0, v);
        }
        let mut merged1 = a.clone();
        merged1.merge(&b);
        let mut merged2 = a.clone();
        merged2.merge(&b);
        assert_eq!(merged1.mean(), merged2.mean());
        assert_eq!(merged1.sigma(), merged2.sigma());
        assert!((merged1.mean()[0] - single.mean()[0]).abs() < 1e-12);
        assert!((merged1.sigma()[0] - single.sigma()[0]).abs() < 1e-12);
    }

    #[test]
    fn placement_site_selection() {
        // 2B + 1 = 9 sites for B = 4
        assert_eq!(Placement::All.sites(9).unwrap().len(), 9);
        assert_eq!(Placement::SingleSite(0).sites(9).unwrap(), vec![0]);
        assert_eq!(Placement::Cumulative(3).sites(9).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(Placement::MainPathOnly.sites(9).unwrap(), vec![1, 3, 5, 7]);
        assert_eq!(Placement::AfterAdditionOnly.sites(9).unwrap(), vec![2, 4, 6, 8]);
        assert!(Placement::SingleSite(9).sites(9).is_err());
    }

    #[test]
    fn blocked_gradient_is_zero_pass_is_identity() {
        let s = state(vec![0.0], vec![1.0], 1.0, Centering::PerChannelMean);
        let x = Tensor::with_grad(vec![0.5, 3.0], &[1, 1, 1, 2]).unwrap();
        let y = s.forward(&x).unwrap();
        let loss = y.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn straight_through_passes_blocked_gradient() {
        let mut s = state(vec![0.0], vec![1.0], 1.0, Centering::PerChannelMean);
        s.straight_through = true;
        let x = Tensor::with_grad(vec![0.5, 3.0], &[1, 1, 1, 2]).unwrap();
        let y = s.forward(&x).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn idempotent() {
        let s = state(vec![0.3], vec![2.0], 0.7, Centering::PerChannelMean);
        let input: Vec<f64> = (0..100).map(|i| (i as f64 * 0.13).sin() * 3.0).collect();
        let (once, _) = s.apply_values(&input, (1, 100));
        let (twice, _) = s.apply_values(&once, (1, 100));
        assert_eq!(once, twice);
    }
}
