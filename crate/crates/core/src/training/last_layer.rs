//! Convex fit of the class-connection matrix with off-class L1.
//!
//! With the backbone and prototypes frozen the similarities are constants,
//! so the objective `(1/n) Σ CE + λ Σ_off |w|` is convex in the head. It is
//! minimized by accelerated proximal gradient: a gradient step on the
//! cross-entropy, then soft-thresholding of the off-class entries, with a
//! backtracking step size. Momentum restarts whenever a step would raise the
//! objective, so accepted iterates never increase it.

use serde::{Deserialize, Serialize};

use super::config::ConvexConfig;
use super::push::compute_latents;
use crate::dataset::EEGSample;
use crate::diffcore::dot;
use crate::error::{Error, Result};
use crate::model::{similarities, ClassLayout, HeadWeights, ProtoEEGNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastLayerReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
    /// Objective before the first and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    pub warning: Option<String>,
}

struct Problem<'a> {
    sims: &'a [Vec<f64>],
    labels: &'a [usize],
    layout: ClassLayout,
    mask: Vec<bool>,
    lambda: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy and its gradient.
    fn smooth(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (k, p) = (self.layout.num_classes, self.layout.num_prototypes());
        let mut grad = vec![0.0; k * p];
        let mut loss = 0.0;
        let mut q = vec![0.0; k];
        for (s, &y) in self.sims.iter().zip(self.labels) {
            for c in 0..k {
                q[c] = dot(&w[c * p..(c + 1) * p], s);
            }
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = q.iter().map(|v| (v - m).exp()).sum();
            loss += m + z.ln() - q[y];
            for c in 0..k {
                let r = (q[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 };
                for (g, sj) in grad[c * p..(c + 1) * p].iter_mut().zip(s) {
                    *g += r * sj;
                }
            }
        }
        let n = self.sims.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        self.lambda * w.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| v.abs()).sum::<f64>()
    }

    fn prox(&self, v: &[f64], step: f64) -> Vec<f64> {
        let thr = step * self.lambda;
        v.iter()
            .zip(&self.mask)
            .map(|(&x, &off)| {
                if !off {
                    x
                } else if x > thr {
                    x - thr
                } else if x < -thr {
                    x + thr
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `(1/n) Σ CE(softmax(W s_i), y_i) + λ Σ_off |w|`.
pub fn last_layer_objective(head: &HeadWeights, sims: &[Vec<f64>], labels: &[usize], lambda: f64) -> f64 {
    let layout = head.layout();
    let problem = Problem {
        sims,
        labels,
        layout,
        mask: layout.offclass_mask(),
        lambda,
    };
    let w = head.matrix().data();
    problem.smooth(w).0 + problem.penalty(w)
}

const MIN_STEP: f64 = 1e-18;

/// Minimizes the last-layer objective in place, starting from the current
/// head. Running out of iterations is reported, not raised.
pub fn fit_last_layer(
    head: &mut HeadWeights,
    sims: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
    cfg: &ConvexConfig,
) -> Result<LastLayerReport> {
    let layout = head.layout();
    if sims.is_empty() || sims.len() != labels.len() {
        return Err(Error::Config(format!(
            "last layer needs matching nonempty data ({} rows, {} labels)",
            sims.len(),
            labels.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= layout.num_classes) {
        return Err(Error::Index(format!("label {y} out of range")));
    }
    if sims.iter().any(|s| s.len() != layout.num_prototypes()) {
        return Err(Error::Dimension("similarity rows must have one entry per prototype".into()));
    }
    let problem = Problem {
        sims,
        labels,
        layout,
        mask: layout.offclass_mask(),
        lambda,
    };
    let mut w = head.matrix().data().to_vec();
    let mut objective = problem.smooth(&w).0 + problem.penalty(&w);
    if !objective.is_finite() {
        return Err(Error::Numeric("last-layer objective is not finite".into()));
    }
    let initial = objective;
    let mut trace = vec![objective];
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    // extrapolated point and momentum weight; `t == 1` means a plain step
    let mut y = w.clone();
    let mut t = 1.0f64;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (fy, gy) = problem.smooth(&y);
        let candidate = loop {
            let v: Vec<f64> = y.iter().zip(&gy).map(|(x, g)| x - step * g).collect();
            let z = problem.prox(&v, step);
            let f_z = problem.smooth(&z).0;
            let (mut lin, mut quad) = (0.0, 0.0);
            for i in 0..z.len() {
                let d = z[i] - y[i];
                lin += gy[i] * d;
                quad += d * d;
            }
            if f_z <= fy + lin + quad / (2.0 * step) {
                break Some((z, f_z));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((z, f_z)) = candidate else {
            converged = true;
            break;
        };
        let new_objective = f_z + problem.penalty(&z);
        if !(new_objective <= objective) {
            if t == 1.0 {
                // a plain proximal step from the current point cannot improve
                converged = true;
                break;
            }
            // restart the momentum from the best point
            t = 1.0;
            y = w.clone();
            continue;
        }
        let decrease = objective - new_objective;
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = z.iter().zip(&w).map(|(a, b)| a + beta * (a - b)).collect();
        w = z;
        t = t_next;
        objective = new_objective;
        trace.push(objective);
        if decrease < cfg.tol {
            converged = true;
            break;
        }
    }
    *head = HeadWeights::from_matrix(layout, w)?;
    Ok(LastLayerReport {
        iterations,
        initial_objective: initial,
        final_objective: objective,
        converged,
        objective_trace: trace,
        warning: (!converged).then(|| {
            format!(
                "last-layer solver stopped at max_iters = {} before the decrease fell below {:e}",
                cfg.max_iters, cfg.tol
            )
        }),
    })
}

/// Fits the head of `model` on `samples` with backbone and prototypes frozen.
pub fn optimize_last_layer(
    model: &mut ProtoEEGNet,
    samples: &[&EEGSample],
    lambda: f64,
    cfg: &ConvexConfig,
    batch_size: usize,
) -> Result<LastLayerReport> {
    let latents = compute_latents(model, samples, batch_size)?;
    fit_from_latents(model, samples, &latents, lambda, cfg)
}

pub(crate) fn fit_from_latents(
    model: &mut ProtoEEGNet,
    samples: &[&EEGSample],
    latents: &[Vec<f64>],
    lambda: f64,
    cfg: &ConvexConfig,
) -> Result<LastLayerReport> {
    let sims: Vec<Vec<f64>> = latents.iter().map(|z| similarities(z, model.prototypes())).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class()).collect();
    let mut head = model.head().clone();
    let report = fit_last_layer(&mut head, &sims, &labels, lambda, cfg)?;
    model.set_head(head)?;
    Ok(report)
}
