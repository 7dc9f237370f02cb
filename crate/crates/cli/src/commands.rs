//! One function per subcommand.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use protoeeg::dataset::{
    generate_synthetic, load_dataset, manifest_path, save_dataset, split as split_samples, Dataset, EEGSample, Split,
    SynthConfig, DEFAULT_SPLIT_FRACTIONS,
};
use protoeeg::eval::{evaluate, EvalOptions, DEFAULT_BOOTSTRAP_ROUNDS};
use protoeeg::explain::{explain as explain_sample, global_prototype_report, render_report, DEFAULT_TOP_K};
use protoeeg::model::{encode_model, load_model, ProtoEEGNet};
use protoeeg::sigproc::{preprocess_window, PreprocessConfig};
use protoeeg::training::{
    optimize_last_layer, push_prototypes, train_with_observer, ConvexConfig, EpochRecord, TrainConfig, TrainObserver,
};

use crate::config::{parse_override, resolve};
use crate::run::{with_path, RunDir};
use crate::{CliError, Common};

pub const DATASET_FILE: &str = "dataset.peeg";
pub const MODEL_FILE: &str = "model.pegm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: DEFAULT_SPLIT_FRACTIONS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub rounds: usize,
    pub seed: u64,
    pub filtered: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            rounds: DEFAULT_BOOTSTRAP_ROUNDS,
            seed: 0,
            filtered: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PushConfig {
    pub batch_size: usize,
    /// Epoch number stored in the provenance.
    pub epoch: u32,
    /// Refit the head after pushing.
    pub last_layer: bool,
    pub l1: f64,
    pub convex: ConvexConfig,
}

impl Default for PushConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        PushConfig {
            batch_size: train.train_push_batch_size,
            epoch: 0,
            last_layer: false,
            l1: train.coefs.l1,
            convex: train.convex,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub top_k: usize,
    /// Windows drawn from `split` when no sample ids are given.
    pub count: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            top_k: DEFAULT_TOP_K,
            count: 10,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub batch_size: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            batch_size: TrainConfig::default().train_push_batch_size,
        }
    }
}

/// Resolves a command config, applying `--seed` and `--set` plus any
/// command-specific flags (lowest precedence first).
fn load_config<T>(common: &Common, flags: Vec<(String, Value)>) -> Result<(T, Value), CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut overrides = flags;
    if let Some(seed) = common.seed {
        let defaults = serde_json::to_value(T::default())?;
        if defaults.get("seed").is_some() {
            overrides.push(("seed".into(), seed.into()));
        }
    }
    for s in &common.overrides {
        overrides.push(parse_override(s)?);
    }
    resolve(common.config.as_deref(), &overrides)
}

fn dataset_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

fn model_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn locate(e: protoeeg::Error, path: &Path) -> CliError {
    match e {
        protoeeg::Error::Io(io) => with_path(io, path),
        other => CliError::Core(other),
    }
}

fn open_dataset(path: &Path, run: &mut RunDir) -> Result<Dataset, CliError> {
    let file = dataset_file(path);
    let dataset = load_dataset(&file).map_err(|e| locate(e, &file))?;
    run.input(&file)?;
    run.input(&manifest_path(&file))?;
    Ok(dataset)
}

fn open_model(path: &Path, run: &mut RunDir) -> Result<ProtoEEGNet, CliError> {
    let file = model_file(path);
    let model = load_model(&file).map_err(|e| locate(e, &file))?;
    run.input(&file)?;
    Ok(model)
}

fn store_dataset(dataset: &Dataset, run: &mut RunDir) -> Result<(), CliError> {
    let file = run.path(DATASET_FILE);
    save_dataset(dataset, &file)?;
    run.record(&file)?;
    run.record(&manifest_path(&file))
}

fn check_model_fits(model: &ProtoEEGNet, dataset: &Dataset) -> Result<(), CliError> {
    let bb = &model.config().backbone;
    let m = &dataset.manifest;
    if bb.input_time != m.time_steps || bb.input_channels != m.channel_count {
        return Err(CliError::Core(protoeeg::Error::Dimension(format!(
            "model expects {}×{} windows, dataset has {}×{}",
            bb.input_time, bb.input_channels, m.time_steps, m.channel_count
        ))));
    }
    Ok(())
}

pub fn synth(common: &Common, n: Option<usize>) -> Result<(), CliError> {
    let flags = n.map(|n| ("n_samples".to_string(), n.into())).into_iter().collect();
    let (cfg, resolved): (SynthConfig, _) = load_config(common, flags)?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let dataset = generate_synthetic(&cfg)?;
    store_dataset(&dataset, &mut run)?;
    eprintln!("wrote {} windows to {}", dataset.samples.len(), run.path(DATASET_FILE).display());
    run.finish("synth", Some(cfg.seed))
}

pub fn preprocess(common: &Common, data: &Path) -> Result<(), CliError> {
    let (cfg, resolved): (PreprocessConfig, _) = load_config(common, Vec::new())?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let input = open_dataset(data, &mut run)?;
    let m = &input.manifest;
    let processed: Vec<(EEGSample, usize)> = input
        .samples
        .par_iter()
        .map(|s| {
            let (values, t) = preprocess_window(&s.input(), m.channel_count, m.sample_rate_hz, &cfg)?;
            let sample = EEGSample {
                sample_id: s.sample_id,
                votes: s.votes,
                values: values.into_iter().map(|v| v as f32).collect(),
            };
            Ok((sample, t))
        })
        .collect::<protoeeg::Result<_>>()?;
    let time_steps = processed.first().map_or(m.time_steps, |p| p.1);
    let manifest = m.clone().with_shape(time_steps, m.channel_count).with_sample_rate(cfg.target_rate_hz);
    let output = Dataset {
        manifest,
        samples: processed.into_iter().map(|p| p.0).collect(),
    };
    store_dataset(&output, &mut run)?;
    run.finish("preprocess", common.seed)
}

pub fn split(common: &Common, data: &Path) -> Result<(), CliError> {
    let (cfg, resolved): (SplitConfig, _) = load_config(common, Vec::new())?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let mut dataset = open_dataset(data, &mut run)?;
    let old = dataset.manifest.clone();
    let mut manifest = split_samples(&dataset.samples, cfg.fractions, cfg.seed)?
        .with_shape(old.time_steps, old.channel_count)
        .with_sample_rate(old.sample_rate_hz);
    manifest.generator_seed = old.generator_seed;
    manifest.config_digest = old.config_digest;
    dataset.manifest = manifest;
    store_dataset(&dataset, &mut run)?;
    run.finish("split", Some(cfg.seed))
}

/// Streams history lines, writes a checkpoint after every push and reports
/// progress on standard error.
struct RunObserver<'a> {
    run: &'a mut RunDir,
    history: File,
    total: u32,
}

impl TrainObserver for RunObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ProtoEEGNet) -> protoeeg::Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.history.write_all(line.as_bytes())?;
        let mut msg = format!(
            "epoch {}/{} {:?} loss {:.5}",
            record.epoch, self.total, record.stage, record.losses.total
        );
        if let Some(v) = &record.validation {
            msg += &format!(" val_acc {:.4}", v.accuracy);
            if let Some(a) = v.auroc {
                msg += &format!(" val_auroc {a:.4}");
            }
        }
        if let Some(p) = &record.push {
            let rel = format!("checkpoints/epoch_{:03}.pegm", record.epoch);
            self.run
                .write(&rel, &encode_model(model))
                .map_err(|e| protoeeg::Error::Io(std::io::Error::other(e.to_string())))?;
            msg += &format!(" pushed; last layer {:.6}", p.last_layer.final_objective);
            if let Some(w) = &p.last_layer.warning {
                msg += &format!(" ({w})");
            }
        }
        eprintln!("{msg}");
        Ok(())
    }
}

pub const HISTORY_FILE: &str = "history.jsonl";

pub fn train(common: &Common, data: &Path, epochs: Option<u32>) -> Result<(), CliError> {
    let flags = epochs
        .map(|e| ("num_train_epochs".to_string(), e.into()))
        .into_iter()
        .collect();
    let (cfg, resolved): (TrainConfig, _) = load_config(common, flags)?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    cfg.validate()?;
    let dataset = open_dataset(data, &mut run)?;
    let history_path = run.path(HISTORY_FILE);
    let history = File::create(&history_path)?;
    let mut observer = RunObserver {
        run: &mut run,
        history,
        total: cfg.num_train_epochs,
    };
    let (model, _) = train_with_observer(&cfg, &dataset, &mut observer)?;
    drop(observer);
    run.record(&history_path)?;
    run.write(&format!("final/{MODEL_FILE}"), &encode_model(&model))?;
    run.finish("train", Some(cfg.seed))
}

pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.json";

pub fn eval(common: &Common, model: &Path, data: &Path, filtered: bool) -> Result<(), CliError> {
    let flags = if filtered {
        vec![("filtered".to_string(), Value::Bool(true))]
    } else {
        Vec::new()
    };
    let (cfg, resolved): (EvalConfig, _) = load_config(common, flags)?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let model = open_model(model, &mut run)?;
    let dataset = open_dataset(data, &mut run)?;
    check_model_fits(&model, &dataset)?;
    let samples = dataset.split(cfg.split);
    let opts = EvalOptions {
        rounds: cfg.rounds,
        seed: cfg.seed,
        filtered: cfg.filtered,
    };
    let (metrics, scores) = evaluate(&model, &samples, &opts)?;
    run.write_json(METRICS_FILE, &metrics)?;
    run.write_json(SCORES_FILE, &scores)?;
    let mut msg = format!(
        "AUROC {:.4} [{:.4}, {:.4}] on {} windows",
        metrics.auroc_unfiltered, metrics.ci_unfiltered[0], metrics.ci_unfiltered[1], metrics.n_test
    );
    if let (Some(a), Some(ci)) = (metrics.auroc_filtered, metrics.ci_filtered) {
        msg += &format!(
            "; filtered {a:.4} [{:.4}, {:.4}] on {} windows",
            ci[0], ci[1], metrics.n_filtered
        );
    }
    eprintln!("{msg}");
    run.finish("eval", Some(cfg.seed))
}

pub const PUSH_FILE: &str = "push.json";

#[derive(Serialize)]
struct PushSummary<'a> {
    records: &'a [protoeeg::training::PushRecord],
    last_layer: Option<&'a protoeeg::training::LastLayerReport>,
}

pub fn push(common: &Common, model: &Path, data: &Path) -> Result<(), CliError> {
    let (cfg, resolved): (PushConfig, _) = load_config(common, Vec::new())?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let mut model = open_model(model, &mut run)?;
    let dataset = open_dataset(data, &mut run)?;
    check_model_fits(&model, &dataset)?;
    let train = dataset.split(Split::Train);
    let records = push_prototypes(&mut model, &train, cfg.batch_size, cfg.epoch)?;
    let last_layer = if cfg.last_layer {
        Some(optimize_last_layer(&mut model, &train, cfg.l1, &cfg.convex, cfg.batch_size)?)
    } else {
        None
    };
    run.write(MODEL_FILE, &encode_model(&model))?;
    run.write_json(
        PUSH_FILE,
        &PushSummary {
            records: &records,
            last_layer: last_layer.as_ref(),
        },
    )?;
    run.finish("push", common.seed)
}

pub fn explain(
    common: &Common,
    model: &Path,
    data: &Path,
    ids: &[u64],
    top_k: Option<usize>,
) -> Result<(), CliError> {
    let flags = top_k.map(|k| ("top_k".to_string(), k.into())).into_iter().collect();
    let (cfg, resolved): (ExplainConfig, _) = load_config(common, flags)?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let model = open_model(model, &mut run)?;
    let dataset = open_dataset(data, &mut run)?;
    check_model_fits(&model, &dataset)?;
    let chosen: Vec<u64> = if ids.is_empty() {
        let pool = dataset.split(cfg.split);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<u64> = sample(&mut rng, pool.len(), cfg.count.min(pool.len()))
            .into_iter()
            .map(|i| pool[i].sample_id)
            .collect();
        picked.sort_unstable();
        picked
    } else {
        ids.to_vec()
    };
    for id in chosen {
        let s = dataset
            .find(id)
            .ok_or_else(|| protoeeg::Error::Reference(format!("sample {id} is not in the dataset")))?;
        let e = explain_sample(&model, s, cfg.top_k)?;
        let files = render_report(&e, &dataset, &common.out)?;
        for f in [&files.json, &files.svg, &files.text] {
            run.record(f)?;
        }
        eprintln!(
            "sample {id}: predicted class {}, p_spike {:.4}",
            e.predicted_class, e.p_spike
        );
    }
    run.finish("explain", Some(cfg.seed))
}

pub const REPORT_JSON: &str = "prototypes.json";
pub const REPORT_TEXT: &str = "prototypes.txt";

pub fn report(common: &Common, model: &Path, data: &Path) -> Result<(), CliError> {
    let (cfg, resolved): (ReportConfig, _) = load_config(common, Vec::new())?;
    let mut run = RunDir::create(&common.out, &resolved)?;
    let model = open_model(model, &mut run)?;
    let dataset = open_dataset(data, &mut run)?;
    check_model_fits(&model, &dataset)?;
    let report = global_prototype_report(&model, &dataset, cfg.batch_size)?;
    run.write_json(REPORT_JSON, &report)?;
    run.write(REPORT_TEXT, report.to_text().as_bytes())?;
    eprintln!(
        "{} prototypes, {} flagged",
        report.rows.len(),
        report.flagged.len()
    );
    run.finish("report", common.seed)
}
