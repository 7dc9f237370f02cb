//! Binary spike-vs-non-spike evaluation of the 9-class vote model.
//!
//! Class probabilities are reduced to a two-way score, ranked with AUROC
//! (ties count half), and given percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EEGSample, NUM_VOTE_CLASSES};
use crate::diffcore::softmax_values;
use crate::error::{Error, Result};
use crate::model::ProtoEEGNet;

/// Windows with at least this many votes are positives.
pub const POSITIVE_VOTES: u8 = 4;
/// Vote counts dropped by the filtered view.
pub const AMBIGUOUS_VOTES: [u8; 3] = [3, 4, 5];
pub const DEFAULT_BOOTSTRAP_ROUNDS: usize = 10_000;

pub fn is_positive(votes: u8) -> bool {
    votes >= POSITIVE_VOTES
}

pub fn is_ambiguous(votes: u8) -> bool {
    AMBIGUOUS_VOTES.contains(&votes)
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.len() != NUM_VOTE_CLASSES {
        return Err(Error::Contract(format!(
            "expected {NUM_VOTE_CLASSES} class probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{probs:?} is not a probability distribution")));
    }
    Ok(())
}

/// `(mean of positive-class probs, mean of negative-class probs)`.
pub fn pooled_probabilities(probs: &[f64]) -> Result<(f64, f64)> {
    check_distribution(probs)?;
    let k = POSITIVE_VOTES as usize;
    let neg = probs[..k].iter().sum::<f64>() / k as f64;
    let pos = probs[k..].iter().sum::<f64>() / (NUM_VOTE_CLASSES - k) as f64;
    Ok((pos, neg))
}

/// Two-way softmax of the pooled probabilities: `(p_pos, p_neg)`.
pub fn binarize(probs: &[f64]) -> Result<(f64, f64)> {
    let (pos, neg) = pooled_probabilities(probs)?;
    let p = softmax_values(&[pos, neg]);
    Ok((p[0], p[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScore {
    pub sample_id: u64,
    pub votes: u8,
    pub p_pos: f64,
    pub p_neg: f64,
}

impl BinaryScore {
    pub fn new(sample_id: u64, votes: u8, probs: &[f64]) -> Result<Self> {
        let (p_pos, p_neg) = binarize(probs)?;
        Ok(BinaryScore {
            sample_id,
            votes,
            p_pos,
            p_neg,
        })
    }

    pub fn label(&self) -> bool {
        is_positive(self.votes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; `None` for the origin.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    pub curve: Vec<RocPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    Ok((n_pos, n_neg))
}

/// ROC curve by threshold sweep. The trapezoid area is accumulated in exact
/// integer arithmetic, so it equals the Mann–Whitney statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        curve.push(RocPoint {
            threshold: Some(threshold),
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocResult {
        auroc: twice_area as f64 / (2 * n_pos * n_neg) as f64,
        curve,
        n_pos,
        n_neg,
    })
}

/// Drops windows whose vote count is ambiguous.
pub fn filtered_view<'a>(samples: impl IntoIterator<Item = &'a EEGSample>) -> Vec<&'a EEGSample> {
    samples.into_iter().filter(|s| !is_ambiguous(s.votes)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub rounds: usize,
    pub seed: u64,
}

/// Scores collapsed into tie groups (ascending), for O(n) resampled AUROC.
struct TieGroups {
    group_of: Vec<usize>,
    n_groups: usize,
}

impl TieGroups {
    fn new(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let mut group_of = vec![0; scores.len()];
        let mut g = 0;
        for (k, &i) in order.iter().enumerate() {
            if k > 0 && scores[i] != scores[order[k - 1]] {
                g += 1;
            }
            group_of[i] = g;
        }
        TieGroups {
            group_of,
            n_groups: g + 1,
        }
    }

    /// AUROC of a resample given per-group positive/negative counts.
    fn auroc(pos: &[u64], neg: &[u64]) -> Option<f64> {
        let (mut below, mut twice_correct) = (0u64, 0u128);
        for (p, n) in pos.iter().zip(neg) {
            twice_correct += (*p as u128) * (2 * below as u128 + *n as u128);
            below += n;
        }
        let n_pos: u64 = pos.iter().sum();
        if n_pos == 0 || below == 0 {
            return None;
        }
        Some(twice_correct as f64 / (2 * n_pos as u128 * below as u128) as f64)
    }
}

/// Percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile bootstrap interval. Round `r` draws from its own ChaCha
/// stream, so results do not depend on thread count. Resamples with a
/// single class are redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], rounds: usize, seed: u64) -> Result<BootstrapCI> {
    let point = auroc(scores, labels)?.auroc;
    if rounds == 0 {
        return Err(Error::Config("bootstrap needs at least one round".into()));
    }
    let groups = TieGroups::new(scores);
    let n = scores.len();
    let mut values: Vec<f64> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(round as u64);
            let mut pos = vec![0u64; groups.n_groups];
            let mut neg = vec![0u64; groups.n_groups];
            loop {
                pos.iter_mut().for_each(|v| *v = 0);
                neg.iter_mut().for_each(|v| *v = 0);
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    let g = groups.group_of[i];
                    if labels[i] {
                        pos[g] += 1;
                    } else {
                        neg[g] += 1;
                    }
                }
                if let Some(a) = TieGroups::auroc(&pos, &neg) {
                    return a;
                }
            }
        })
        .collect();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCI {
        point,
        lower: percentile(&values, 0.025).min(point),
        upper: percentile(&values, 0.975).max(point),
        rounds,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub rounds: usize,
    pub seed: u64,
    pub filtered: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rounds: DEFAULT_BOOTSTRAP_ROUNDS,
            seed: 0,
            filtered: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc_unfiltered: f64,
    pub ci_unfiltered: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc_filtered: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ci_filtered: Option<[f64; 2]>,
    pub n_test: usize,
    pub n_filtered: usize,
    pub seed: u64,
    pub rounds: usize,
}

/// Metrics from previously computed scores.
pub fn metrics_from_scores(scores: &[BinaryScore], opts: &EvalOptions) -> Result<Metrics> {
    let view = |keep: &dyn Fn(&BinaryScore) -> bool| -> (Vec<f64>, Vec<bool>) {
        scores.iter().filter(|s| keep(s)).map(|s| (s.p_pos, s.label())).unzip()
    };
    let (all_s, all_l) = view(&|_| true);
    let unfiltered = bootstrap_ci(&all_s, &all_l, opts.rounds, opts.seed)?;
    let (f_s, f_l) = view(&|s| !is_ambiguous(s.votes));
    let filtered = if opts.filtered {
        Some(bootstrap_ci(&f_s, &f_l, opts.rounds, opts.seed)?)
    } else {
        None
    };
    Ok(Metrics {
        auroc_unfiltered: unfiltered.point,
        ci_unfiltered: [unfiltered.lower, unfiltered.upper],
        auroc_filtered: filtered.map(|c| c.point),
        ci_filtered: filtered.map(|c| [c.lower, c.upper]),
        n_test: scores.len(),
        n_filtered: f_s.len(),
        seed: opts.seed,
        rounds: opts.rounds,
    })
}

/// Binary scores of every sample, in input order.
pub fn score_samples(model: &ProtoEEGNet, samples: &[&EEGSample]) -> Result<Vec<BinaryScore>> {
    samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.input())?;
            BinaryScore::new(s.sample_id, s.votes, &pred.probs)
        })
        .collect()
}

pub fn evaluate(model: &ProtoEEGNet, samples: &[&EEGSample], opts: &EvalOptions) -> Result<(Metrics, Vec<BinaryScore>)> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty test split".into()));
    }
    let scores = score_samples(model, samples)?;
    Ok((metrics_from_scores(&scores, opts)?, scores))
}
