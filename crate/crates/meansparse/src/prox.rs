//! The l0 proximal operator and a penalty-method block-coordinate solver on
//! toy problems.
//!
//! The sparsification operator is, at heart, hard thresholding — the exact
//! proximal map of `t * ||x||_0`. This module keeps that connection honest:
//! `prox_l0` is tested against brute-force minimization, and `penalty_solve`
//! runs the alternating scheme (exact prox step on the auxiliary vector, one
//! gradient step on the parameters) with a decaying penalty parameter.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise prox of `t * ||x||_0`: keep `v_i` where `|v_i| > sqrt(2t)`,
/// zero otherwise. The boundary ties to zero — both branches cost the same
/// there, and zero matches the sparsifier's inclusive blocking.
pub fn prox_l0(v: &[f64], t: f64) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParam(format!("prox threshold weight must be >= 0, got {t}")));
    }
    let thr = (2.0 * t).sqrt();
    Ok(v.iter().map(|&x| if x.abs() > thr { x } else { 0.0 }).collect())
}

/// Differentiable toy objective: a scalar loss `L(theta)` plus a feature map
/// `a_bar(theta)` that the penalty couples to the sparse auxiliary vector.
#[derive(Debug, Clone)]
pub enum ToyObjective {
    /// `L = 0.5 * ||A theta - b||^2`, features `a_bar = theta`.
    Quadratic { a: Vec<f64>, b: Vec<f64>, rows: usize },
    /// Linear regression through a 2-layer net; the features are the hidden
    /// pre-activations, mean-centered over the batch.
    TwoLayer {
        x: Vec<f64>,
        y: Vec<f64>,
        samples: usize,
        inputs: usize,
        hidden: usize,
    },
}

impl ToyObjective {
    /// Shapes of the parameter blocks, in update order.
    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            ToyObjective::Quadratic { a, rows, .. } => vec![vec![a.len() / rows]],
            ToyObjective::TwoLayer { inputs, hidden, .. } => vec![
                vec![*inputs, *hidden], // W1
                vec![*hidden],          // b1
                vec![*hidden, 1],       // w2
                vec![1],                // b2
            ],
        }
    }

    /// Builds `(L, a_bar)` on the tape from grad-enabled parameter blocks.
    fn build(&self, blocks: &[Tensor]) -> Result<(Tensor, Tensor)> {
        match self {
            ToyObjective::Quadratic { a, b, rows } => {
                let theta = &blocks[0];
                let d = theta.numel();
                let am = Tensor::new(a.clone(), &[*rows, d])?;
                let bv = Tensor::new(b.clone(), &[*rows, 1])?;
                let r = am.matmul(&theta.reshape(&[d, 1])?)?.sub(&bv)?;
                let loss = r.mul(&r)?.sum_all()?.scale(0.5)?;
                Ok((loss, theta.clone()))
            }
            ToyObjective::TwoLayer {
                x,
                y,
                samples,
                inputs,
                hidden: _,
            } => {
                let (w1, b1, w2, b2) = (&blocks[0], &blocks[1], &blocks[2], &blocks[3]);
                let xm = Tensor::new(x.clone(), &[*samples, *inputs])?;
                let ym = Tensor::new(y.clone(), &[*samples, 1])?;
                let pre = xm.matmul(w1)?.row_bias(b1)?;
                // Mean-center each hidden unit over the batch.
                let neg_mean = pre.mean_axis(0)?.scale(-1.0)?;
                let abar = pre.row_bias(&neg_mean)?;
                let out = abar.relu()?.matmul(w2)?.row_bias(b2)?;
                let r = out.sub(&ym)?;
                let loss = r.mul(&r)?.mean_all()?.scale(0.5)?;
                let n = abar.numel();
                Ok((loss, abar.reshape(&[n])?))
            }
        }
    }
}

/// Penalty formulation of the l0-regularized problem: minimize
/// `L(theta) + gamma * ||w||_0` subject to `w = a_bar(theta)`, relaxed as
/// `L + gamma ||w||_0 + (1 / 2 lambda) ||w - a_bar||^2` with `lambda` driven
/// toward zero.
#[derive(Debug, Clone)]
pub struct ProxProblem {
    pub gamma: f64,
    pub lambda0: f64,
    /// Geometric decay factor per iteration, strictly inside (0, 1).
    pub decay: f64,
    pub theta0: Vec<Vec<f64>>,
    pub objective: ToyObjective,
}

impl ProxProblem {
    pub fn new(
        objective: ToyObjective,
        theta0: Vec<Vec<f64>>,
        gamma: f64,
        lambda0: f64,
    ) -> Result<ProxProblem> {
        if gamma < 0.0 {
            return Err(Error::InvalidParam(format!("gamma must be >= 0, got {gamma}")));
        }
        if lambda0 <= 0.0 {
            return Err(Error::InvalidParam(format!("lambda0 must be > 0, got {lambda0}")));
        }
        let shapes = objective.block_shapes();
        if theta0.len() != shapes.len()
            || theta0
                .iter()
                .zip(&shapes)
                .any(|(b, s)| b.len() != s.iter().product::<usize>())
        {
            return Err(Error::InvalidParam("theta0 blocks do not match objective".into()));
        }
        Ok(ProxProblem {
            gamma,
            lambda0,
            decay: 0.95,
            theta0,
            objective,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iter: usize,
    pub lambda: f64,
    /// `L(theta) + gamma * active_count` — the l0 objective being driven down.
    pub objective: f64,
    /// `||w - a_bar(theta)||` after the parameter step.
    pub penalty_gap: f64,
    /// Features surviving the current threshold, `|a_bar_i| > sqrt(2 lambda gamma)`.
    pub active_count: usize,
}

pub struct SolveOutcome {
    pub theta: Vec<Vec<f64>>,
    pub w: Vec<f64>,
}

/// Alternating scheme: `w_k` from the exact prox of the previous features,
/// then one explicit gradient step on `L + (1 / 2 lambda) ||w_k - a_bar||^2`.
/// The penalty term has curvature `1 / lambda`, so the step is clamped to
/// `lambda / 2` once the schedule drops below the requested step; otherwise
/// the explicit update oscillates and diverges. The trace is appended to
/// `trace` as rows are produced, so it survives a divergence error.
pub fn penalty_solve(
    p: &ProxProblem,
    iters: usize,
    step: f64,
    trace: &mut Vec<TraceRow>,
) -> Result<SolveOutcome> {
    if step <= 0.0 {
        return Err(Error::InvalidParam(format!("step must be > 0, got {step}")));
    }
    if !(0.0 < p.decay && p.decay < 1.0) {
        return Err(Error::InvalidParam(format!("decay must be in (0, 1), got {}", p.decay)));
    }
    let shapes = p.objective.block_shapes();
    let mut theta: Vec<Vec<f64>> = p.theta0.clone();
    let mut w = Vec::new();
    let mut lambda = p.lambda0;
    for k in 0..iters {
        // Forward pass without grad for the prox step on a_bar(theta_{k-1}).
        let blocks: Vec<Tensor> = theta
            .iter()
            .zip(&shapes)
            .map(|(d, s)| Tensor::new(d.clone(), s))
            .collect::<Result<_>>()?;
        let (_, abar) = p.objective.build(&blocks)?;
        w = prox_l0(abar.data(), lambda * p.gamma)?;

        // One gradient step on the relaxed objective with w_k fixed.
        let blocks: Vec<Tensor> = theta
            .iter()
            .zip(&shapes)
            .map(|(d, s)| Tensor::with_grad(d.clone(), s))
            .collect::<Result<_>>()?;
        let (loss, abar) = p.objective.build(&blocks)?;
        let n = abar.numel();
        let wt = Tensor::new(w.clone(), &[n])?;
        let gap = abar.sub(&wt)?;
        let penalty = gap.mul(&gap)?.sum_all()?.scale(0.5 / lambda)?;
        let relaxed = loss.add(&penalty)?;
        relaxed.backward()?;
        let eff_step = step.min(lambda / 2.0);
        for (block, tensor) in theta.iter_mut().zip(&blocks) {
            let g = tensor.grad().ok_or(Error::Divergence("missing gradient".into()))?;
            for (t, gi) in block.iter_mut().zip(&g) {
                *t -= eff_step * gi;
            }
        }

        // Trace the l0 objective at the new iterate.
        let blocks: Vec<Tensor> = theta
            .iter()
            .zip(&shapes)
            .map(|(d, s)| Tensor::new(d.clone(), s))
            .collect::<Result<_>>()?;
        let (loss, abar) = p.objective.build(&blocks)?;
        let thr = (2.0 * lambda * p.gamma).sqrt();
        let active = abar.data().iter().filter(|v| v.abs() > thr).count();
        let objective = loss.data()[0] + p.gamma * active as f64;
        let penalty_gap = abar
            .data()
            .iter()
            .zip(&w)
            .map(|(a, wi)| (a - wi) * (a - wi))
            .sum::<f64>()
            .sqrt();
        trace.push(TraceRow {
            iter: k,
            lambda,
            objective,
            penalty_gap,
            active_count: active,
        });
        if !objective.is_finite() {
            return Err(Error::Divergence(format!(
                "objective non-finite at iteration {k} (lambda = {lambda:.3e})"
            )));
        }
        lambda *= p.decay;
    }
    Ok(SolveOutcome { theta, w })
}

pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "iter,lambda,objective,penalty_gap,active_count")?;
    for r in trace {
        writeln!(
            w,
            "{},{:.12e},{:.12e},{:.12e},{}",
            r.iter, r.lambda, r.objective, r.penalty_gap, r.active_count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force minimizer of `t * ||x||_0 + 0.5 (x - v)^2` over a fine grid
    /// plus the exact point 0, ties resolved toward 0.
    fn brute_force_prox(v: f64, t: f64) -> f64 {
        let mut best_x = 0.0;
        let mut best = 0.5 * v * v; // cost of zeroing
        let lo = v - 1.0;
        let steps = ((2.0) / 1e-4) as i64;
        for i in 0..=steps {
            let x = lo + i as f64 * 1e-4;
            let cost = if x == 0.0 { 0.0 } else { t } + 0.5 * (x - v) * (x - v);
            if cost < best {
                best = cost;
                best_x = x;
            }
        }
        best_x
    }

    #[test]
    fn prox_examples() {
        // sqrt(2t) = 2: |-2| on the boundary is blocked
        assert_eq!(prox_l0(&[1.0, 3.0, -2.0], 2.0).unwrap(), vec![0.0, 3.0, 0.0]);
        // keeping 1.9 costs t = 2 > 1.805 = cost of zeroing
        assert_eq!(prox_l0(&[1.9], 2.0).unwrap(), vec![0.0]);
        assert_eq!(prox_l0(&[0.3, -0.7], 0.0).unwrap(), vec![0.3, -0.7]);
        assert!(prox_l0(&[1.0], -0.1).is_err());
    }

    #[test]
    fn prox_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v: f64 = rng.gen_range(-4.0..4.0);
            let t: f64 = rng.gen_range(0.0..3.0);
            let ours = prox_l0(&[v], t).unwrap()[0];
            let brute = brute_force_prox(v, t);
            // grid answers are off by at most half a grid step when keeping v
            assert!(
                (ours - brute).abs() <= 5.1e-5,
                "v={v} t={t}: ours={ours} brute={brute}"
            );
        }
    }

    fn free_problem() -> ProxProblem {
        // L = 0 via a zero design matrix; a_bar = theta.
        let obj = ToyObjective::Quadratic {
            a: vec![0.0, 0.0],
            b: vec![0.0],
            rows: 1,
        };
        ProxProblem::new(obj, vec![vec![3.0, 0.1]], 1.0, 0.5).unwrap()
    }

    #[test]
    fn free_problem_sparsifies_small_coordinate() {
        let mut trace = Vec::new();
        let out = penalty_solve(&free_problem(), 300, 0.3, &mut trace).unwrap();
        let theta = &out.theta[0];
        assert!((theta[0] - 3.0).abs() < 1e-6, "large coordinate should survive: {theta:?}");
        assert!(theta[1].abs() < 1e-3, "small coordinate should vanish: {theta:?}");
    }

    #[test]
    fn penalty_gap_shrinks_as_lambda_decays() {
        let obj = ToyObjective::Quadratic {
            a: vec![1.0, 0.3, 0.3, 2.0],
            b: vec![1.0, 0.2],
            rows: 2,
        };
        let p = ProxProblem::new(obj, vec![vec![0.5, -0.5]], 0.05, 1.0).unwrap();
        let mut trace = Vec::new();
        penalty_solve(&p, 400, 0.2, &mut trace).unwrap();
        let early = trace[20].penalty_gap;
        let late = trace.last().unwrap().penalty_gap;
        assert!(late < early, "gap should shrink: early {early}, late {late}");
        assert!(late < 1e-3, "gap should close as lambda -> 0, got {late}");
    }

    #[test]
    fn objective_non_increasing_on_final_quarter() {
        let obj = ToyObjective::Quadratic {
            a: vec![2.0, 0.0, 0.0, 0.5],
            b: vec![2.0, 0.1],
            rows: 2,
        };
        let p = ProxProblem::new(obj, vec![vec![0.0, 0.0]], 0.1, 1.0).unwrap();
        let mut trace = Vec::new();
        penalty_solve(&p, 400, 0.2, &mut trace).unwrap();
        let tail = &trace[300..];
        for pair in tail.windows(2) {
            assert!(
                pair[1].objective <= pair[0].objective + 1e-9,
                "objective increased at iter {}: {} -> {}",
                pair[1].iter,
                pair[0].objective,
                pair[1].objective
            );
        }
    }

    #[test]
    fn gamma_zero_is_plain_gradient_descent() {
        let obj = ToyObjective::Quadratic {
            a: vec![1.0, 0.0, 0.0, 1.0],
            b: vec![1.0, -2.0],
            rows: 2,
        };
        let p = ProxProblem::new(obj, vec![vec![0.0, 0.0]], 0.0, 1.0).unwrap();
        let mut trace = Vec::new();
        let out = penalty_solve(&p, 500, 0.2, &mut trace).unwrap();
        let theta = &out.theta[0];
        assert!((theta[0] - 1.0).abs() < 1e-3 && (theta[1] + 2.0).abs() < 1e-3, "{theta:?}");
    }

    #[test]
    fn two_layer_runs_and_centers_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, h) = (16, 3, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i * d] * 0.7 - 0.2).collect();
        let obj = ToyObjective::TwoLayer {
            x,
            y,
            samples: n,
            inputs: d,
            hidden: h,
        };
        let theta0: Vec<Vec<f64>> = obj
            .block_shapes()
            .iter()
            .map(|s| {
                (0..s.iter().product::<usize>())
                    .map(|_| rng.gen_range(-0.5..0.5))
                    .collect()
            })
            .collect();
        let p = ProxProblem::new(obj.clone(), theta0, 0.01, 0.5).unwrap();
        let mut trace = Vec::new();
        let out = penalty_solve(&p, 120, 0.1, &mut trace).unwrap();
        assert!(trace.iter().all(|r| r.objective.is_finite()));
        // The features really are mean-centered per hidden unit.
        let blocks: Vec<Tensor> = out
            .theta
            .iter()
            .zip(obj.block_shapes())
            .map(|(dta, s)| Tensor::new(dta.clone(), &s).unwrap())
            .collect();
        let (_, abar) = obj.build(&blocks).unwrap();
        let vals = abar.data();
        for unit in 0..h {
            let mean: f64 = (0..n).map(|i| vals[i * h + unit]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10, "unit {unit} mean {mean}");
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut trace = Vec::new();
        penalty_solve(&free_problem(), 5, 0.3, &mut trace).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,lambda,objective,penalty_gap,active_count\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
