//! Staged training: warm, secondary warm and joint gradient stages, with
//! prototype pushes each followed by a convex last-layer fit.
//!
//! Epochs are numbered from 1. Batches are split into fixed-size chunks whose
//! gradients are computed in parallel and summed in chunk order, so results
//! do not depend on the number of worker threads.

mod config;
mod last_layer;
mod push;

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ConvexConfig, GroupLrs, LearningRates, Stage, TrainConfig};
pub use last_layer::{fit_last_layer, last_layer_objective, optimize_last_layer, LastLayerReport};
pub use push::{compute_latents, push_from_latents, push_prototypes, PushRecord};

use crate::dataset::{Dataset, EEGSample, Split, NUM_VOTE_CLASSES};
use crate::diffcore::{adam_step, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{auroc, binarize, is_positive};
use crate::losses::{data_terms, regularizer_terms, BatchLossReport, LossCoefficients};
use crate::model::{BoundParams, ClassLayout, ProtoEEGNet, Trainable};

/// Samples per gradient chunk.
const GRAD_CHUNK: usize = 8;

impl Stage {
    pub fn trainable(self) -> Trainable {
        match self {
            Stage::Warm => Trainable {
                backbone: false,
                prototypes: true,
                head: false,
            },
            Stage::SecondaryWarm => Trainable {
                backbone: true,
                prototypes: true,
                head: false,
            },
            Stage::Joint => Trainable::ALL,
        }
    }
}

struct Grads {
    features: Vec<Vec<f64>>,
    prototypes: Vec<f64>,
    head: Vec<f64>,
}

impl Grads {
    fn collect(g: &Graph, params: &BoundParams, t: Trainable) -> Grads {
        let take = |v, on: bool| -> Vec<f64> {
            if !on {
                return Vec::new();
            }
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        };
        Grads {
            features: params
                .backbone
                .iter()
                .flat_map(|b| b.iter().map(|v| take(*v, t.backbone)).collect::<Vec<_>>())
                .collect(),
            prototypes: take(params.prototypes, t.prototypes),
            head: take(params.head, t.head),
        }
    }

    fn add(&mut self, other: &Grads) {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            add(a, b);
        }
        add(&mut self.prototypes, &other.prototypes);
        add(&mut self.head, &other.head);
    }
}

struct Optimizer {
    trainable: Trainable,
    features: Vec<AdamState>,
    prototypes: AdamState,
    head: AdamState,
}

impl Optimizer {
    fn new(model: &ProtoEEGNet, trainable: Trainable) -> Self {
        Optimizer {
            trainable,
            features: model.backbone().tensors().map(|t| AdamState::new(t.len())).collect(),
            prototypes: AdamState::new(model.prototypes().vectors().len()),
            head: AdamState::new(model.head().matrix().len()),
        }
    }

    fn step(&mut self, model: &mut ProtoEEGNet, grads: &Grads, lrs: GroupLrs) -> Result<()> {
        if self.trainable.backbone {
            let tensors = model.backbone_mut().tensors_mut();
            for ((t, g), st) in tensors.zip(&grads.features).zip(&mut self.features) {
                adam_step(t.data_mut(), g, st, lrs.features)?;
            }
        }
        if self.trainable.prototypes {
            let bank = model.prototypes_mut();
            adam_step(bank.vectors_mut().data_mut(), &grads.prototypes, &mut self.prototypes, lrs.prototypes)?;
            bank.renormalize()?;
        }
        if self.trainable.head {
            adam_step(model.head.matrix_mut().data_mut(), &grads.head, &mut self.head, lrs.head)?;
        }
        Ok(())
    }
}

/// Training samples with their class labels.
struct TrainSet<'a> {
    samples: Vec<&'a EEGSample>,
    labels: Vec<usize>,
}

impl<'a> TrainSet<'a> {
    fn new(samples: &[&'a EEGSample], layout: ClassLayout) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.class() >= layout.num_classes) {
            return Err(Error::Config(format!(
                "sample {} has label {} but the model has {} classes",
                s.sample_id,
                s.class(),
                layout.num_classes
            )));
        }
        Ok(TrainSet {
            samples: samples.to_vec(),
            labels: samples.iter().map(|s| s.class()).collect(),
        })
    }
}

/// Gradient of the data terms over one chunk, weighted by its share of the
/// batch, plus the unweighted component sums.
fn chunk_gradients(
    model: &ProtoEEGNet,
    set: &TrainSet,
    chunk: &[usize],
    latents: Option<&[Vec<f64>]>,
    trainable: Trainable,
    coefs: &LossCoefficients,
    batch_len: usize,
) -> Result<(Grads, [f64; 3])> {
    let layout = model.layout();
    let mut g = Graph::new();
    let params = model.bind(&mut g, trainable);
    let mut outputs = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let out = match latents {
            Some(l) => {
                let z = g.leaf(Tensor::vector(l[i].clone()), false);
                model.classify_in(&mut g, &params, z)?
            }
            None => model.forward_in(&mut g, &params, &set.samples[i].input())?,
        };
        outputs.push(out);
    }
    let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
    let (data, parts) = data_terms(&mut g, &outputs, &labels, &layout, coefs)?;
    let value = g.value(data).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    g.backward_with(data, &[chunk.len() as f64 / batch_len as f64])?;
    let n = chunk.len() as f64;
    let sums = parts.map(|v| g.value(v).data()[0] * n);
    Ok((Grads::collect(&g, &params, trainable), sums))
}

fn batch_step(
    model: &mut ProtoEEGNet,
    opt: &mut Optimizer,
    set: &TrainSet,
    batch: &[usize],
    latents: Option<&[Vec<f64>]>,
    coefs: &LossCoefficients,
    lrs: GroupLrs,
) -> Result<BatchLossReport> {
    let trainable = opt.trainable;
    let model_ref = &*model;
    let chunks: Vec<(Grads, [f64; 3])> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|c| chunk_gradients(model_ref, set, c, latents, trainable, coefs, batch.len()))
        .collect::<Result<_>>()?;

    let layout = model.layout();
    let mut g = Graph::new();
    let params = model.bind(&mut g, trainable);
    let (reg, [ortho, l1]) = regularizer_terms(&mut g, params.prototypes, params.head, &layout, coefs)?;
    g.backward(reg)?;
    let mut grads = Grads::collect(&g, &params, trainable);
    let mut sums = [0.0; 3];
    for (cg, cs) in &chunks {
        grads.add(cg);
        for k in 0..3 {
            sums[k] += cs[k];
        }
    }
    let n = batch.len() as f64;
    let mut report = BatchLossReport {
        total: 0.0,
        cross_entropy: sums[0] / n,
        cluster: sums[1] / n,
        separation: sums[2] / n,
        orthogonality: g.value(ortho).data()[0],
        l1: g.value(l1).data()[0],
        batch_size: batch.len(),
    };
    report.total = report.recombine(coefs);
    opt.step(model, &grads, lrs)?;
    Ok(report)
}

/// Batch-size weighted mean of per-batch reports.
fn aggregate(reports: &[BatchLossReport], coefs: &LossCoefficients) -> BatchLossReport {
    let n: usize = reports.iter().map(|r| r.batch_size).sum();
    let mean = |f: fn(&BatchLossReport) -> f64| {
        reports.iter().map(|r| f(r) * r.batch_size as f64).sum::<f64>() / n.max(1) as f64
    };
    let mut out = BatchLossReport {
        total: 0.0,
        cross_entropy: mean(|r| r.cross_entropy),
        cluster: mean(|r| r.cluster),
        separation: mean(|r| r.separation),
        orthogonality: mean(|r| r.orthogonality),
        l1: mean(|r| r.l1),
        batch_size: n,
    };
    out.total = out.recombine(coefs);
    out
}

/// Optimizer state and cached latents for one stage.
struct StageRunner {
    stage: Stage,
    opt: Optimizer,
    latents: Option<Vec<Vec<f64>>>,
}

impl StageRunner {
    fn new(model: &ProtoEEGNet, stage: Stage) -> Self {
        StageRunner {
            stage,
            opt: Optimizer::new(model, stage.trainable()),
            latents: None,
        }
    }

    fn run_epoch(
        &mut self,
        model: &mut ProtoEEGNet,
        set: &TrainSet,
        cfg: &TrainConfig,
        epoch: u32,
    ) -> Result<BatchLossReport> {
        // a frozen backbone gives fixed latents for the whole stage
        if !self.opt.trainable.backbone && self.latents.is_none() {
            self.latents = Some(compute_latents(model, &set.samples, cfg.train_push_batch_size)?);
        }
        let mut order: Vec<usize> = (0..set.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lrs = cfg.group_lrs(epoch);
        let mut reports = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            reports.push(batch_step(
                model,
                &mut self.opt,
                set,
                batch,
                self.latents.as_deref(),
                &cfg.coefs,
                lrs,
            )?);
        }
        Ok(aggregate(&reports, &cfg.coefs))
    }
}

fn run_stage(
    model: &mut ProtoEEGNet,
    train: &[&EEGSample],
    cfg: &TrainConfig,
    stage: Stage,
    epochs: RangeInclusive<u32>,
) -> Result<Vec<BatchLossReport>> {
    cfg.validate()?;
    let set = TrainSet::new(train, model.layout())?;
    let mut runner = StageRunner::new(model, stage);
    epochs.map(|e| runner.run_epoch(model, &set, cfg, e)).collect()
}

/// Prototype-only epochs `1..=num_warm_epochs`; backbone and head frozen.
pub fn run_warm_stage(
    model: &mut ProtoEEGNet,
    train: &[&EEGSample],
    cfg: &TrainConfig,
) -> Result<Vec<BatchLossReport>> {
    run_stage(model, train, cfg, Stage::Warm, 1..=cfg.num_warm_epochs)
}

/// Prototype and backbone epochs following the warm stage; head frozen.
pub fn run_secondary_warm_stage(
    model: &mut ProtoEEGNet,
    train: &[&EEGSample],
    cfg: &TrainConfig,
) -> Result<Vec<BatchLossReport>> {
    let first = cfg.num_warm_epochs + 1;
    run_stage(
        model,
        train,
        cfg,
        Stage::SecondaryWarm,
        first..=cfg.num_warm_epochs + cfg.num_secondary_warm_epochs,
    )
}

/// All-parameter epochs. No pushes happen here; see [`train`] for the full
/// schedule.
pub fn run_joint_stage(
    model: &mut ProtoEEGNet,
    train: &[&EEGSample],
    cfg: &TrainConfig,
    epochs: RangeInclusive<u32>,
) -> Result<Vec<BatchLossReport>> {
    if *epochs.start() < cfg.first_joint_epoch() {
        return Err(Error::Config(format!(
            "joint epochs start at {}, got {}",
            cfg.first_joint_epoch(),
            epochs.start()
        )));
    }
    run_stage(model, train, cfg, Stage::Joint, epochs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub cross_entropy: f64,
    /// Binarized AUROC, when the model has the 9 vote classes and both
    /// binary labels occur.
    pub auroc: Option<f64>,
}

pub fn validation_metrics(model: &ProtoEEGNet, samples: &[&EEGSample]) -> Result<Option<ValidationMetrics>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let probs: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| model.predict(&s.input()).map(|p| p.probs))
        .collect::<Result<_>>()?;
    let n = samples.len();
    let mut correct = 0;
    let mut ce = 0.0;
    for (s, p) in samples.iter().zip(&probs) {
        let pred = crate::model::argmax(p);
        if pred == s.class() {
            correct += 1;
        }
        ce -= p.get(s.class()).copied().unwrap_or(0.0).max(crate::diffcore::CE_LOG_FLOOR).ln();
    }
    let mut roc = None;
    if model.layout().num_classes == NUM_VOTE_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|p| binarize(p).map(|b| b.0)).collect::<Result<_>>()?;
        let labels: Vec<bool> = samples.iter().map(|s| is_positive(s.votes)).collect();
        roc = auroc(&scores, &labels).ok().map(|r| r.auroc);
    }
    Ok(Some(ValidationMetrics {
        n,
        accuracy: correct as f64 / n as f64,
        cross_entropy: ce / n as f64,
        auroc: roc,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushEvent {
    pub records: Vec<PushRecord>,
    pub last_layer: LastLayerReport,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub stage: Stage,
    pub lr: GroupLrs,
    pub losses: BatchLossReport,
    pub push: Option<PushEvent>,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Last epoch of each stage, in schedule order.
    pub fn stage_ends(&self) -> Vec<(Stage, u32)> {
        let mut out: Vec<(Stage, u32)> = Vec::new();
        for r in &self.epochs {
            match out.last_mut() {
                Some((s, e)) if *s == r.stage => *e = r.epoch,
                _ => out.push((r.stage, r.epoch)),
            }
        }
        out
    }

    pub fn push_epochs(&self) -> Vec<u32> {
        self.epochs.iter().filter(|r| r.push.is_some()).map(|r| r.epoch).collect()
    }

    /// JSON lines, one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Called after every epoch, e.g. to stream history or write checkpoints.
pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ProtoEEGNet) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &ProtoEEGNet) -> Result<()> {
        Ok(())
    }
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ProtoEEGNet, TrainHistory)> {
    train_with_observer(cfg, dataset, &mut ())
}

/// Full schedule from a fresh model seeded with `cfg.seed`.
pub fn train_with_observer(
    cfg: &TrainConfig,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<(ProtoEEGNet, TrainHistory)> {
    cfg.validate()?;
    let bb = &cfg.model.backbone;
    let m = &dataset.manifest;
    if bb.input_time != m.time_steps || bb.input_channels != m.channel_count {
        return Err(Error::Config(format!(
            "model expects {}×{} windows, dataset has {}×{}",
            bb.input_time, bb.input_channels, m.time_steps, m.channel_count
        )));
    }
    let mut model = ProtoEEGNet::new(cfg.model.clone(), cfg.seed)?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let set = TrainSet::new(&train, model.layout())?;
    let mut history = TrainHistory::default();
    let mut runner: Option<StageRunner> = None;
    for epoch in 1..=cfg.num_train_epochs {
        let stage = cfg.stage_of(epoch);
        if runner.as_ref().map(|r| r.stage) != Some(stage) {
            runner = Some(StageRunner::new(&model, stage));
        }
        let losses = runner.as_mut().unwrap().run_epoch(&mut model, &set, cfg, epoch)?;
        let push = if cfg.push_epochs.contains(&epoch) {
            let latents = compute_latents(&model, &set.samples, cfg.train_push_batch_size)?;
            let records = push_from_latents(&mut model, &set.samples, &latents, epoch)?;
            let last_layer = last_layer::fit_from_latents(&mut model, &set.samples, &latents, cfg.coefs.l1, &cfg.convex)?;
            Some(PushEvent { records, last_layer })
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            stage,
            lr: cfg.group_lrs(epoch),
            losses,
            push,
            validation: validation_metrics(&model, &val)?,
        };
        observer.on_epoch(&record, &model)?;
        history.epochs.push(record);
    }
    Ok((model, history))
}
