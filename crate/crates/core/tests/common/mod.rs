//! Oracles and fixtures shared by the integration tests. The oracles are
//! written from the definitions and do not call into the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use protoeeg::dataset::{Dataset, DatasetManifest, EEGSample, Split, DATASET_FORMAT_VERSION};
use protoeeg::diffcore::{Graph, Tensor, Var};
use protoeeg::model::{BackboneConfig, BlockSpec, ModelConfig};
use protoeeg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this true gradient magnitude the absolute bound applies.
pub const SMALL_GRAD: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal_vec(rng, n);
    let norm = dot_naive(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).unwrap()
}

/// Worst gradient mismatch found by [`check_gradients`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    /// Largest `|a - n| / |n|` over coordinates with `|n| >= SMALL_GRAD`.
    pub max_rel: f64,
    /// Largest `|a - n|` over coordinates with `|n| < SMALL_GRAD`.
    pub max_abs_small: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.max_rel <= REL_TOL && self.max_abs_small <= ABS_TOL
    }

    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs_small: self.max_abs_small.max(other.max_abs_small),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

/// Compares reverse-mode gradients of `⟨r, f(inputs)⟩` against central
/// differences, for a random projection `r` of the output.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &leaves)?;
    let r = normal_vec(&mut rng(seed), g.value(out).len());
    g.backward_with(out, &r)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|d| d.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let project = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..inputs[i].len() {
            let x0 = inputs[i].data()[c];
            work[i].data_mut()[c] = x0 + STEP;
            let up = project(&work)?;
            work[i].data_mut()[c] = x0 - STEP;
            let down = project(&work)?;
            work[i].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (grad[c] - numeric).abs();
            if numeric.abs() < SMALL_GRAD {
                report.max_abs_small = report.max_abs_small.max(err);
            } else {
                report.max_rel = report.max_rel.max(err / numeric.abs());
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

pub fn dot_naive(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-(1/N) Σ_i max over own-class prototypes`.
pub fn cluster_oracle(sims: &[Vec<f64>], labels: &[usize], per_class: usize) -> f64 {
    let mut total = 0.0;
    for (s, &y) in sims.iter().zip(labels) {
        let mut best = f64::NEG_INFINITY;
        for j in 0..s.len() {
            if j / per_class == y && s[j] > best {
                best = s[j];
            }
        }
        total += best;
    }
    -total / sims.len() as f64
}

pub fn separation_oracle(sims: &[Vec<f64>], labels: &[usize], per_class: usize) -> f64 {
    let mut total = 0.0;
    for (s, &y) in sims.iter().zip(labels) {
        let mut best = f64::NEG_INFINITY;
        for j in 0..s.len() {
            if j / per_class != y && s[j] > best {
                best = s[j];
            }
        }
        total += best;
    }
    total / sims.len() as f64
}

/// `Σ_c Σ_{a,b in c} (⟨p_a, p_b⟩ - δ_ab)²`
pub fn orthogonality_oracle(prototypes: &[Vec<f64>], per_class: usize) -> f64 {
    let mut total = 0.0;
    for a in 0..prototypes.len() {
        for b in 0..prototypes.len() {
            if a / per_class != b / per_class {
                continue;
            }
            let d = dot_naive(&prototypes[a], &prototypes[b]) - if a == b { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    total
}

/// Off-class L1 of a row-major `K×P` head.
pub fn l1_oracle(head: &[Vec<f64>], per_class: usize) -> f64 {
    let mut total = 0.0;
    for (k, row) in head.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            if j / per_class != k {
                total += w.abs();
            }
        }
    }
    total
}

/// `-ln max(softmax(logits)[label], floor)`
pub fn cross_entropy_oracle(logits: &[f64], label: usize, floor: f64) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|q| (q - m).exp()).sum();
    -((logits[label] - m).exp() / z).max(floor).ln()
}

/// Mann–Whitney count over every positive/negative pair, ties worth a half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// For every prototype, the id of the own-class training window whose latent
/// is most similar, ties to the smallest id.
pub fn exhaustive_push_targets(
    prototypes: &[Vec<f64>],
    per_class: usize,
    samples: &[&EEGSample],
    latents: &[Vec<f64>],
) -> Vec<u64> {
    prototypes
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut best: Option<(f64, u64)> = None;
            for (s, z) in samples.iter().zip(latents) {
                if s.votes as usize != j / per_class {
                    continue;
                }
                let sim = dot_naive(z, p);
                best = match best {
                    Some((b, id)) if b > sim || (b == sim && id < s.sample_id) => Some((b, id)),
                    _ => Some((sim, s.sample_id)),
                };
            }
            best.expect("class without training windows").1
        })
        .collect()
}

/// `(1/n) Σ CE + λ Σ_off |w|` and its smooth-part gradient, for a flat
/// row-major head.
fn last_layer_parts(sims: &[Vec<f64>], labels: &[usize], k: usize, w: &[f64]) -> (f64, Vec<f64>) {
    let p = sims[0].len();
    let mut grad = vec![0.0; k * p];
    let mut loss = 0.0;
    for (s, &y) in sims.iter().zip(labels) {
        let q: Vec<f64> = (0..k).map(|c| dot_naive(&w[c * p..(c + 1) * p], s)).collect();
        let m = q.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = q.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        loss += -(e[y] / z).ln();
        for c in 0..k {
            let r = e[c] / z - if c == y { 1.0 } else { 0.0 };
            for j in 0..p {
                grad[c * p + j] += r * s[j];
            }
        }
    }
    let n = sims.len() as f64;
    (loss / n, grad.into_iter().map(|g| g / n).collect())
}

/// Independent solver for the last-layer problem: the off-class entries are
/// split as `u - v` with `u, v >= 0`, which makes the objective smooth on a
/// box, and Nesterov's projected gradient runs on that reformulation.
/// Returns the optimal objective.
pub fn convex_oracle(sims: &[Vec<f64>], labels: &[usize], k: usize, per_class: usize, lambda: f64) -> f64 {
    let p = sims[0].len();
    let n = k * p;
    let off = |i: usize| (i % p) / per_class != i / p;
    let assemble = |x: &[f64]| -> Vec<f64> {
        (0..n).map(|i| if off(i) { x[n + i] - x[2 * n + i] } else { x[i] }).collect()
    };
    // step below 1/L for similarities bounded by one
    let smax = sims.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let step = 0.5 / (2.0 * smax * smax * p as f64).max(1e-12);
    let mut x = vec![0.0; 3 * n];
    let mut prev = x.clone();
    for it in 1..=100_000 {
        let beta = (it as f64 - 1.0) / (it as f64 + 2.0);
        let y: Vec<f64> = x.iter().zip(&prev).map(|(a, b)| a + beta * (a - b)).collect();
        let (_, g) = last_layer_parts(sims, labels, k, &assemble(&y));
        prev = x.clone();
        for i in 0..n {
            if off(i) {
                x[n + i] = (y[n + i] - step * (g[i] + lambda)).max(0.0);
                x[2 * n + i] = (y[2 * n + i] - step * (-g[i] + lambda)).max(0.0);
                x[i] = 0.0;
            } else {
                x[i] = y[i] - step * g[i];
            }
        }
    }
    let w = assemble(&x);
    let l1: f64 = (0..n).filter(|&i| off(i)).map(|i| w[i].abs()).sum();
    last_layer_parts(sims, labels, k, &w).0 + lambda * l1
}

pub const TOY_T: usize = 24;
pub const TOY_C: usize = 6;

/// Two-block backbone on 24×6 windows.
pub fn toy_model_config(classes: usize, per_class: usize, width: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_time: TOY_T,
            input_channels: TOY_C,
            blocks: vec![
                BlockSpec::new(width / 2, (5, 3), (2, 1)),
                BlockSpec::new(width, (10, 4), (1, 1)),
            ],
            latent_dim: width,
            layer_norm_eps: 1e-5,
        },
        num_classes: classes,
        prototypes_per_class: per_class,
    }
}

/// Noisy copies of one random template per class; votes equal the class.
/// Every sample is in the training split.
pub fn toy_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| normal_vec(&mut rng, TOY_T * TOY_C)).collect();
    let samples: Vec<EEGSample> = (0..n)
        .map(|i| {
            let c = i % classes;
            EEGSample {
                sample_id: i as u64,
                votes: c as u8,
                values: templates[c]
                    .iter()
                    .map(|t| (3.0 * t + rng.random_range(-1.0..1.0)) as f32)
                    .collect(),
            }
        })
        .collect();
    let splits: BTreeMap<u64, Split> = samples.iter().map(|s| (s.sample_id, Split::Train)).collect();
    Dataset {
        manifest: DatasetManifest {
            version: DATASET_FORMAT_VERSION,
            sample_count: n,
            channel_count: TOY_C,
            time_steps: TOY_T,
            sample_rate_hz: 128.0,
            splits,
            split_fractions: [1.0, 0.0, 0.0],
            split_seed: seed,
            generator_seed: None,
            config_digest: None,
        },
        samples,
    }
}

/// Scores from two overlapping Gaussians; about a third positive.
pub fn gaussian_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = rng(seed);
    (0..n)
        .map(|_| {
            let pos = rng.random_bool(1.0 / 3.0);
            let z: f64 = StandardNormal.sample(&mut rng);
            (z + if pos { 1.0 } else { 0.0 }, pos)
        })
        .unzip()
}

pub fn sine(freq: f64, fs: f64, seconds: f64) -> Vec<f64> {
    let n = (fs * seconds).round() as usize;
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
        .collect()
}

/// RMS-based amplitude after discarding the first quarter of the signal.
pub fn steady_amplitude(y: &[f64]) -> f64 {
    let tail = &y[y.len() / 4..];
    (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt() * 2f64.sqrt()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
