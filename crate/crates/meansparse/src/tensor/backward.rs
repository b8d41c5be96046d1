//! Reverse-mode pass: walks the tape in decreasing id order and applies each
//! op's backward rule. Accumulation order is fixed, so results are
//! bit-reproducible for a given op sequence.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::ops::{
    dlr_row_indices, dlr_row_stats, log_softmax_rows, norm_cdf, norm_pdf, sigmoid, Op, DLR_EPS,
};
use super::Tensor;

impl Tensor {
    /// Populate `grad` on every grad-requiring leaf reachable from this
    /// scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidParam(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::InvalidParam(
                "backward on a tensor with an empty tape".into(),
            ));
        }
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.id()) {
                if let Some(op) = t.op() {
                    for inp in op.inputs() {
                        if inp.requires_grad() {
                            stack.push(inp.clone());
                        }
                    }
                }
                nodes.push(t);
            }
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in &nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => node.accumulate_grad(&g),
                Some(op) => backprop(op, node, &g, &mut grads),
            }
        }
        Ok(())
    }
}

fn add_to(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, delta: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    use std::collections::hash_map::Entry;
    match grads.entry(t.id()) {
        Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        Entry::Vacant(e) => {
            e.insert(delta);
        }
    }
}

fn backprop(op: &Op, node: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::Add(a, b) => {
            add_to(grads, a, g.to_vec());
            add_to(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_to(grads, a, g.to_vec());
            add_to(grads, b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            add_to(grads, a, g.iter().zip(b.data()).map(|(gi, bi)| gi * bi).collect());
            add_to(grads, b, g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect());
        }
        Op::Scale(a, c) => {
            add_to(grads, a, g.iter().map(|v| v * c).collect());
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            add_to(grads, a, g.to_vec());
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (ad, bd) = (a.data(), b.data());
            if a.requires_grad() {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                add_to(grads, a, da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                add_to(grads, b, db);
            }
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        } => {
            let xs = input.shape();
            let ws = weight.shape();
            let dims = [xs[0], xs[1], xs[2], xs[3]];
            let kdims = [ws[0], ws[2], ws[3]];
            if input.requires_grad() {
                let mut dx = vec![0.0; input.numel()];
                conv2d_backward_input(g, weight.data(), &mut dx, dims, kdims, *stride, *pad as isize);
                add_to(grads, input, dx);
            }
            if weight.requires_grad() {
                let mut dw = vec![0.0; weight.numel()];
                conv2d_backward_weight(g, input.data(), &mut dw, dims, kdims, *stride, *pad as isize);
                add_to(grads, weight, dw);
            }
        }
        Op::ChannelBias { input, bias } => {
            add_to(grads, input, g.to_vec());
            if bias.requires_grad() {
                let s = input.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        db[ch] += g[base..base + hw].iter().sum::<f64>();
                    }
                }
                add_to(grads, bias, db);
            }
        }
        Op::RowBias { input, bias } => {
            add_to(grads, input, g.to_vec());
            if bias.requires_grad() {
                let (n, k) = (input.shape()[0], input.shape()[1]);
                let mut db = vec![0.0; k];
                for r in 0..n {
                    for c in 0..k {
                        db[c] += g[r * k + c];
                    }
                }
                add_to(grads, bias, db);
            }
        }
        Op::ChannelAffine { input, scale } => {
            let s = input.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut dx = vec![0.0; input.numel()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let a = scale[ch];
                    for j in 0..hw {
                        dx[base + j] = g[base + j] * a;
                    }
                }
            }
            add_to(grads, input, dx);
        }
        Op::AvgPool { input, k, stride } => {
            let s = input.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let ho = (h - k) / stride + 1;
            let wo = (w - k) / stride + 1;
            let inv = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; input.numel()];
            for img in 0..n * c {
                let xb = img * h * w;
                let ob = img * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[ob + oy * wo + ox] * inv;
                        for ky in 0..*k {
                            let row = xb + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..*k {
                                dx[row + kx] += gv;
                            }
                        }
                    }
                }
            }
            add_to(grads, input, dx);
        }
        Op::GlobalAvgPool(input) => {
            let s = input.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let inv = 1.0 / hw as f64;
            let mut dx = vec![0.0; input.numel()];
            for i in 0..n * c {
                let gv = g[i] * inv;
                for v in &mut dx[i * hw..(i + 1) * hw] {
                    *v = gv;
                }
            }
            add_to(grads, input, dx);
        }
        Op::Relu(a) => {
            add_to(
                grads,
                a,
                a.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            );
        }
        Op::Elu(a) => {
            add_to(
                grads,
                a,
                a.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| if x > 0.0 { *gi } else { gi * x.exp() })
                    .collect(),
            );
        }
        Op::Gelu(a) => {
            add_to(
                grads,
                a,
                a.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| gi * (norm_cdf(x) + x * norm_pdf(x)))
                    .collect(),
            );
        }
        Op::Silu(a) => {
            add_to(
                grads,
                a,
                a.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| {
                        let s = sigmoid(x);
                        gi * (s + x * s * (1.0 - s))
                    })
                    .collect(),
            );
        }
        Op::PSilu { input, beta } => {
            let b = beta.item();
            let x = input.data();
            if input.requires_grad() {
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, gi)| {
                        let s = sigmoid(b * xi);
                        gi * (s + xi * b * s * (1.0 - s))
                    })
                    .collect();
                add_to(grads, input, dx);
            }
            if beta.requires_grad() {
                let mut acc = 0.0;
                for (&xi, gi) in x.iter().zip(g) {
                    let s = sigmoid(b * xi);
                    acc += gi * xi * xi * s * (1.0 - s);
                }
                add_to(grads, beta, vec![acc]);
            }
        }
        Op::PSSilu { input, beta, shift } => {
            let b = beta.item();
            let sh = shift.item();
            let inv = 1.0 / (1.0 - sh);
            let x = input.data();
            if input.requires_grad() {
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, gi)| {
                        let s = sigmoid(b * xi);
                        gi * inv * (s - sh + xi * b * s * (1.0 - s))
                    })
                    .collect();
                add_to(grads, input, dx);
            }
            if beta.requires_grad() {
                let mut acc = 0.0;
                for (&xi, gi) in x.iter().zip(g) {
                    let s = sigmoid(b * xi);
                    acc += gi * inv * xi * xi * s * (1.0 - s);
                }
                add_to(grads, beta, vec![acc]);
            }
            if shift.requires_grad() {
                let mut acc = 0.0;
                for (&xi, gi) in x.iter().zip(g) {
                    let s = sigmoid(b * xi);
                    acc += gi * xi * (s - 1.0) * inv * inv;
                }
                add_to(grads, shift, vec![acc]);
            }
        }
        Op::Softmax(a) => {
            let (n, k) = (node.shape()[0], node.shape()[1]);
            let s = node.data();
            let mut dz = vec![0.0; n * k];
            for r in 0..n {
                let srow = &s[r * k..(r + 1) * k];
                let grow = &g[r * k..(r + 1) * k];
                let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                for c in 0..k {
                    dz[r * k + c] = srow[c] * (grow[c] - dot);
                }
            }
            add_to(grads, a, dz);
        }
        Op::CrossEntropy { logits, targets } => {
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let mut logp = vec![0.0; n * k];
            log_softmax_rows(logits.data(), n, k, &mut logp);
            let scale = g[0] / n as f64;
            let mut dz = vec![0.0; n * k];
            for r in 0..n {
                for c in 0..k {
                    let p = logp[r * k + c].exp();
                    let y = if c == targets[r] { 1.0 } else { 0.0 };
                    dz[r * k + c] = scale * (p - y);
                }
            }
            add_to(grads, logits, dz);
        }
        Op::KlDiv { p_logits, q_logits } => {
            let (n, k) = (p_logits.shape()[0], p_logits.shape()[1]);
            let mut logp = vec![0.0; n * k];
            let mut logq = vec![0.0; n * k];
            log_softmax_rows(p_logits.data(), n, k, &mut logp);
            log_softmax_rows(q_logits.data(), n, k, &mut logq);
            let scale = g[0] / n as f64;
            if p_logits.requires_grad() {
                let mut dp = vec![0.0; n * k];
                for r in 0..n {
                    let mut kl_row = 0.0;
                    for c in 0..k {
                        let i = r * k + c;
                        kl_row += logp[i].exp() * (logp[i] - logq[i]);
                    }
                    for c in 0..k {
                        let i = r * k + c;
                        let p = logp[i].exp();
                        dp[i] = scale * p * (logp[i] - logq[i] - kl_row);
                    }
                }
                add_to(grads, p_logits, dp);
            }
            if q_logits.requires_grad() {
                let mut dq = vec![0.0; n * k];
                for i in 0..n * k {
                    dq[i] = scale * (logq[i].exp() - logp[i].exp());
                }
                add_to(grads, q_logits, dq);
            }
        }
        Op::DlrLoss { logits, targets } => {
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let z = logits.data();
            let scale = g[0] / n as f64;
            let mut dz = vec![0.0; n * k];
            for r in 0..n {
                let row = &z[r * k..(r + 1) * k];
                let (zy, best_other, z1, z3) = dlr_row_stats(row, targets[r]);
                let (other, top1, top3) = dlr_row_indices(row, targets[r]);
                let den = z1 - z3 + DLR_EPS;
                let num = zy - best_other;
                // subgradient with the sort indices held fixed
                dz[r * k + targets[r]] += scale * (-1.0 / den);
                dz[r * k + other] += scale * (1.0 / den);
                dz[r * k + top1] += scale * (num / (den * den));
                dz[r * k + top3] += scale * (-num / (den * den));
            }
            add_to(grads, logits, dz);
        }
        Op::SumAll(a) => {
            add_to(grads, a, vec![g[0]; a.numel()]);
        }
        Op::MeanAll(a) => {
            add_to(grads, a, vec![g[0] / a.numel() as f64; a.numel()]);
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let s = input.shape();
            let outer: usize = s[..*axis].iter().product();
            let mid = s[*axis];
            let inner: usize = s[*axis + 1..].iter().product();
            let scale = if matches!(op, Op::MeanAxis { .. }) {
                1.0 / mid as f64
            } else {
                1.0
            };
            let mut dx = vec![0.0; input.numel()];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        dx[base + i] = g[o * inner + i] * scale;
                    }
                }
            }
            add_to(grads, input, dx);
        }
        Op::BatchNorm {
            input,
            gamma,
            mean,
            inv_std,
        } => {
            let s = input.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let cnt = (n * hw) as f64;
            let x = input.data();
            if gamma.requires_grad() {
                let mut dg = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            let xhat = (x[base + j] - mean[ch]) * inv_std[ch];
                            dg[ch] += g[base + j] * xhat;
                        }
                    }
                }
                add_to(grads, gamma, dg);
            }
            if input.requires_grad() {
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            let xhat = (x[base + j] - mean[ch]) * inv_std[ch];
                            sum_g[ch] += g[base + j];
                            sum_gx[ch] += g[base + j] * xhat;
                        }
                    }
                }
                let mut dx = vec![0.0; input.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let coef = gamma.data()[ch] * inv_std[ch] / cnt;
                        for j in 0..hw {
                            let xhat = (x[base + j] - mean[ch]) * inv_std[ch];
                            dx[base + j] =
                                coef * (cnt * g[base + j] - sum_g[ch] - xhat * sum_gx[ch]);
                        }
                    }
                }
                add_to(grads, input, dx);
            }
        }
        Op::PassMask { input, mask } => {
            add_to(
                grads,
                input,
                g.iter()
                    .zip(mask)
                    .map(|(gi, &m)| if m != 0 { *gi } else { 0.0 })
                    .collect(),
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gout: &[f64],
    w: &[f64],
    dx: &mut [f64],
    [n, cin, h, wd]: [usize; 4],
    [cout, kh, kw]: [usize; 3],
    stride: usize,
    pad: isize,
) {
    let ho = (h + 2 * pad as usize - kh) / stride + 1;
    let wo = (wd + 2 * pad as usize - kw) / stride + 1;
    let s = stride as isize;
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
                        let off = kx as isize - pad;
                        for oy in 0..ho as isize {
                            let iy = oy * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ox_lo = (((-off) + s - 1).div_euclid(s)).max(0);
                            let ox_hi = ((wd as isize - 1 - off).div_euclid(s) + 1).min(wo as isize);
                            let irow = in_base + iy as usize * wd;
                            let orow = out_base + oy as usize * wo;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s + off) as usize;
                                dx[irow + ix] += wv * gout[orow + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    gout: &[f64],
    x: &[f64],
    dw: &mut [f64],
    [n, cin, h, wd]: [usize; 4],
    [cout, kh, kw]: [usize; 3],
    stride: usize,
    pad: isize,
) {
    let ho = (h + 2 * pad as usize - kh) / stride + 1;
    let wo = (wd + 2 * pad as usize - kw) / stride + 1;
    let s = stride as isize;
    for img in 0..n {
        for co in 0..cout {
            let out_base = (img * cout + co) * ho * wo;
            for ci in 0..cin {
                let in_base = (img * cin + ci) * h * wd;
                let w_base = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = kx as isize - pad;
                        let mut acc = 0.0;
                        for oy in 0..ho as isize {
                            let iy = oy * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ox_lo = (((-off) + s - 1).div_euclid(s)).max(0);
                            let ox_hi = ((wd as isize - 1 - off).div_euclid(s) + 1).min(wo as isize);
                            let irow = in_base + iy as usize * wd;
                            let orow = out_base + oy as usize * wo;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s + off) as usize;
                                acc += x[irow + ix] * gout[orow + ox as usize];
                            }
                        }
                        dw[w_base + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}
