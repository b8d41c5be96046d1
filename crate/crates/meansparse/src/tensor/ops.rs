//! Forward operations and the tape node type.

use statrs::function::erf::erf;

use crate::error::{Error, Result};

use super::{check_finite, Tensor};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const SQRT_2_PI: f64 = 2.506_628_274_631_000_7; // sqrt(2*pi)

/// Tape node: op kind, input tensors and whatever the backward rule needs.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Matmul(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        input: Tensor,
        bias: Tensor,
    },
    RowBias {
        input: Tensor,
        bias: Tensor,
    },
    ChannelAffine {
        input: Tensor,
        scale: Vec<f64>,
    },
    AvgPool {
        input: Tensor,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(Tensor),
    Relu(Tensor),
    Elu(Tensor),
    Gelu(Tensor),
    Silu(Tensor),
    PSilu {
        input: Tensor,
        beta: Tensor,
    },
    PSSilu {
        input: Tensor,
        beta: Tensor,
        shift: Tensor,
    },
    Softmax(Tensor),
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
    },
    KlDiv {
        p_logits: Tensor,
        q_logits: Tensor,
    },
    DlrLoss {
        logits: Tensor,
        targets: Vec<usize>,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis {
        input: Tensor,
        axis: usize,
    },
    MeanAxis {
        input: Tensor,
        axis: usize,
    },
    Reshape(Tensor),
    BatchNorm {
        input: Tensor,
        gamma: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    PassMask {
        input: Tensor,
        mask: Vec<u8>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a) => vec![a],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::ChannelBias { input, bias } | Op::RowBias { input, bias } => vec![input, bias],
            Op::ChannelAffine { input, .. }
            | Op::AvgPool { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::PassMask { input, .. } => vec![input],
            Op::PSilu { input, beta } => vec![input, beta],
            Op::PSSilu { input, beta, shift } => vec![input, beta, shift],
            Op::CrossEntropy { logits, .. } | Op::DlrLoss { logits, .. } => vec![logits],
            Op::KlDiv { p_logits, q_logits } => vec![p_logits, q_logits],
            Op::BatchNorm { input, gamma, .. } => vec![input, gamma],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the exact erf formulation.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2_PI
}

/// Row-wise log-softmax for a `[n, k]` slice, written into `out`.
pub(crate) fn log_softmax_rows(data: &[f64], n: usize, k: usize, out: &mut [f64]) {
    for r in 0..n {
        let row = &data[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - m).exp()).sum::<f64>().ln() + m;
        for c in 0..k {
            out[r * k + c] = row[c] - lse;
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        check_finite("add", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        check_finite("sub", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        check_finite("mul", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        check_finite("scale", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Scale(self.clone(), c),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        check_finite("add_scalar", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddScalar(self.clone()),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (s1, s2) = (self.shape(), other.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: s1.to_vec(),
                rhs: s2.to_vec(),
            });
        }
        let (m, k, n) = (s1[0], s1[1], s2[1]);
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        check_finite("matmul", &data)?;
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// 2-D convolution, `N x Cin x H x W` input, `Cout x Cin x K x K` weight,
    /// zero padding.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        conv2d_forward(
            self.data(),
            weight.data(),
            &mut out,
            [n, cin, h, w],
            [cout, kh, kw],
            stride,
            pad as isize,
        );
        check_finite("conv2d", &out)?;
        Ok(Tensor::from_op(
            out,
            vec![n, cout, ho, wo],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Add a `[C]` bias across an `N x C x H x W` tensor.
    pub fn channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || bias.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = self.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let bv = bias.data()[ch];
                for v in &mut data[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v += bv;
                }
            }
        }
        check_finite("channel_bias", &data)?;
        Ok(Tensor::from_op(
            data,
            s.to_vec(),
            Op::ChannelBias {
                input: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Add a `[k]` bias across the rows of an `[n, k]` tensor.
    pub fn row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "row_bias",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (n, k) = (s[0], s[1]);
        let mut data = self.data().to_vec();
        for r in 0..n {
            for c in 0..k {
                data[r * k + c] += bias.data()[c];
            }
        }
        check_finite("row_bias", &data)?;
        Ok(Tensor::from_op(
            data,
            s.to_vec(),
            Op::RowBias {
                input: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Per-channel affine map `x * scale[c] + shift[c]` with constant
    /// coefficients (eval-mode batch norm, input standardization).
    pub fn channel_affine(&self, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || scale.len() != s[1] || shift.len() != s[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: s.to_vec(),
                rhs: vec![scale.len()],
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = self.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let (a, b) = (scale[ch], shift[ch]);
                for v in &mut data[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = *v * a + b;
                }
            }
        }
        check_finite("channel_affine", &data)?;
        Ok(Tensor::from_op(
            data,
            s.to_vec(),
            Op::ChannelAffine {
                input: self.clone(),
                scale: scale.to_vec(),
            },
        ))
    }

    /// Average pooling with a `k x k` window.
    pub fn avg_pool(&self, k: usize, stride: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || s[2] < k || s[3] < k {
            return Err(Error::ShapeMismatch {
                op: "avg_pool",
                lhs: s.to_vec(),
                rhs: vec![k, k],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        let x = self.data();
        for img in 0..n * c {
            let xb = img * h * w;
            let ob = img * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = xb + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            acc += x[row + kx];
                        }
                    }
                    out[ob + oy * wo + ox] = acc * inv;
                }
            }
        }
        check_finite("avg_pool", &out)?;
        Ok(Tensor::from_op(
            out,
            vec![n, c, ho, wo],
            Op::AvgPool {
                input: self.clone(),
                k,
                stride,
            },
        ))
    }

    /// `N x C x H x W -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = 1.0 / hw as f64;
        let x = self.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = x[i * hw..(i + 1) * hw].iter().sum::<f64>() * inv;
        }
        check_finite("global_avg_pool", &out)?;
        Ok(Tensor::from_op(out, vec![n, c], Op::GlobalAvgPool(self.clone())))
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Relu(self.clone()),
        ))
    }

    pub fn elu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        check_finite("elu", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Elu(self.clone()),
        ))
    }

    /// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v * norm_cdf(v)).collect();
        check_finite("gelu", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Gelu(self.clone()),
        ))
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v * sigmoid(v)).collect();
        check_finite("silu", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Silu(self.clone()),
        ))
    }

    /// `x * sigmoid(beta * x)` with a learnable scalar `beta > 0`.
    pub fn psilu(&self, beta: &Tensor) -> Result<Tensor> {
        let b = beta.item();
        if b <= 0.0 {
            return Err(Error::InvalidParam(format!("psilu beta must be > 0, got {b}")));
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v * sigmoid(b * v)).collect();
        check_finite("psilu", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::PSilu {
                input: self.clone(),
                beta: beta.clone(),
            },
        ))
    }

    /// Parametric shifted SiLU: `x * (sigmoid(beta * x) - s) / (1 - s)` with
    /// learnable `beta > 0` and shift `0 <= s < 1`.
    pub fn pssilu(&self, beta: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let b = beta.item();
        let s = shift.item();
        if b <= 0.0 {
            return Err(Error::InvalidParam(format!("pssilu beta must be > 0, got {b}")));
        }
        if !(0.0..1.0).contains(&s) {
            return Err(Error::InvalidParam(format!(
                "pssilu shift must lie in [0, 1), got {s}"
            )));
        }
        let inv = 1.0 / (1.0 - s);
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| v * (sigmoid(b * v) - s) * inv)
            .collect();
        check_finite("pssilu", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::PSSilu {
                input: self.clone(),
                beta: beta.clone(),
                shift: shift.clone(),
            },
        ))
    }

    /// Row-wise softmax of an `[n, k]` tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, k) = (s[0], s[1]);
        let mut data = vec![0.0; n * k];
        log_softmax_rows(self.data(), n, k, &mut data);
        for v in &mut data {
            *v = v.exp();
        }
        check_finite("softmax", &data)?;
        Ok(Tensor::from_op(data, s.to_vec(), Op::Softmax(self.clone())))
    }

    /// Mean cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidParam(format!(
                "target class {bad} out of range for {k} classes"
            )));
        }
        let mut logp = vec![0.0; n * k];
        log_softmax_rows(self.data(), n, k, &mut logp);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp[r * k + t])
            .sum::<f64>()
            / n as f64;
        let data = vec![loss];
        check_finite("cross_entropy", &data)?;
        Ok(Tensor::from_op(
            data,
            vec![1],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean KL divergence `KL(softmax(self) || softmax(other))` over rows.
    pub fn kl_div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("kl_div", self, other)?;
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, k) = (s[0], s[1]);
        let mut logp = vec![0.0; n * k];
        let mut logq = vec![0.0; n * k];
        log_softmax_rows(self.data(), n, k, &mut logp);
        log_softmax_rows(other.data(), n, k, &mut logq);
        let mut acc = 0.0;
        for i in 0..n * k {
            acc += logp[i].exp() * (logp[i] - logq[i]);
        }
        let data = vec![acc / n as f64];
        check_finite("kl_div", &data)?;
        Ok(Tensor::from_op(
            data,
            vec![1],
            Op::KlDiv {
                p_logits: self.clone(),
                q_logits: other.clone(),
            },
        ))
    }

    /// Mean difference-of-logits-ratio loss over rows; needs at least 4 classes.
    pub fn dlr_loss(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "dlr_loss",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if k < 4 {
            return Err(Error::InvalidParam(format!(
                "dlr loss requires at least 4 classes, got {k}"
            )));
        }
        let z = self.data();
        let mut acc = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let (zy, best_other, z1, z3) = dlr_row_stats(row, targets[r]);
            acc += -(zy - best_other) / (z1 - z3 + DLR_EPS);
        }
        let data = vec![acc / n as f64];
        check_finite("dlr_loss", &data)?;
        Ok(Tensor::from_op(
            data,
            vec![1],
            Op::DlrLoss {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let data = vec![self.data().iter().sum::<f64>()];
        check_finite("sum_all", &data)?;
        Ok(Tensor::from_op(data, vec![1], Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel().max(1);
        let data = vec![self.data().iter().sum::<f64>() / n as f64];
        check_finite("mean_all", &data)?;
        Ok(Tensor::from_op(data, vec![1], Op::MeanAll(self.clone())))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::InvalidParam(format!(
                "axis {axis} out of range for rank {}",
                s.len()
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += x[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / mid as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        check_finite("reduce_axis", &out)?;
        let op = if mean {
            Op::MeanAxis {
                input: self.clone(),
                axis,
            }
        } else {
            Op::SumAxis {
                input: self.clone(),
                axis,
            }
        };
        Ok(Tensor::from_op(out, shape, op))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Batch-norm forward with batch statistics (training mode). Returns the
    /// output plus the population batch mean and variance per channel, which
    /// the layer folds into its running estimates.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let s = self.shape();
        if s.len() != 4 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let cnt = (n * hw) as f64;
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for v in &x[base..base + hw] {
                    mean[ch] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= cnt;
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for v in &x[base..base + hw] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= cnt;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let g = gamma.data()[ch];
                let (m, is) = (mean[ch], inv_std[ch]);
                for j in 0..hw {
                    out[base + j] = (x[base + j] - m) * is * g;
                }
            }
        }
        check_finite("batch_norm", &out)?;
        let bias_in = Tensor::from_op(
            out,
            s.to_vec(),
            Op::BatchNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                mean: mean.clone(),
                inv_std,
            },
        );
        // beta enters as a plain channel bias; its gradient comes from that op
        let with_bias = bias_in.channel_bias(beta)?;
        Ok((with_bias, mean, var))
    }

    /// Elementwise pass/block layer: output was computed by the caller, the
    /// mask (1 = gradient passes, 0 = blocked) drives the backward rule.
    pub(crate) fn pass_mask(input: &Tensor, data: Vec<f64>, mask: Vec<u8>) -> Tensor {
        debug_assert_eq!(data.len(), input.numel());
        debug_assert_eq!(mask.len(), input.numel());
        Tensor::from_op(
            data,
            input.shape().to_vec(),
            Op::PassMask {
                input: input.clone(),
                mask,
            },
        )
    }
}

pub(crate) const DLR_EPS: f64 = 1e-12;

/// Per-row quantities for the DLR loss: target logit, best non-target logit,
/// first and third order statistics.
pub(crate) fn dlr_row_stats(row: &[f64], target: usize) -> (f64, f64, f64, f64) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let zy = row[target];
    let best_other = if idx[0] == target { row[idx[1]] } else { row[idx[0]] };
    (zy, best_other, row[idx[0]], row[idx[2]])
}

pub(crate) fn dlr_row_indices(row: &[f64], target: usize) -> (usize, usize, usize) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let other = if idx[0] == target { idx[1] } else { idx[0] };
    (other, idx[0], idx[2])
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    [n, cin, h, wd]: [usize; 4],
    [cout, kh, kw]: [usize; 3],
    stride: usize,
    pad: isize,
) {
    let ho = (h + 2 * pad as usize - kh) / stride + 1;
    let wo = (wd + 2 * pad as usize - kw) / stride + 1;
    for img in 0..n {
        for co in 0..cout {
            let out_base = (img * cout + co) * ho * wo;
            for ci in 0..cin {
                let in_base = (img * cin + ci) * h * wd;
                let w_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_window(
                            x, out, in_base, out_base, wv, h, wd, ho, wo, stride, pad, ky, kx,
                        );
                    }
                }
            }
        }
    }
}

/// out[oy, ox] += wv * x[oy*s + ky - pad, ox*s + kx - pad] over the in-bounds
/// output range.
#[allow(clippy::too_many_arguments)]
fn accumulate_window(
    x: &[f64],
    out: &mut [f64],
    in_base: usize,
    out_base: usize,
    wv: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: isize,
    ky: usize,
    kx: usize,
) {
    let s = stride as isize;
    for oy in 0..ho as isize {
        let iy = oy * s + ky as isize - pad;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        // ix = ox*s + kx - pad must land in [0, w)
        let off = kx as isize - pad;
        let ox_lo = (((-off) + s - 1).div_euclid(s)).max(0);
        let ox_hi = ((w as isize - 1 - off).div_euclid(s) + 1).min(wo as isize);
        let irow = in_base + iy as usize * w;
        let orow = out_base + oy as usize * wo;
        for ox in ox_lo..ox_hi {
            let ix = (ox * s + off) as usize;
            out[orow + ox as usize] += wv * x[irow + ix];
        }
    }
}
