//! EEG windows with annotator vote counts, splits and on-disk storage.

mod storage;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use storage::{
    decode_samples, encode_samples, load_dataset, manifest_path, save_dataset, DATASET_FORMAT_VERSION,
    DATASET_MAGIC,
};
pub use synth::{generate_synthetic, AnnotatorModel, BackgroundConfig, SpikeMorphology, SynthConfig};

/// Number of annotators, and therefore the largest possible vote count.
pub const NUM_ANNOTATORS: usize = 8;
/// Vote classes 0..=8.
pub const NUM_VOTE_CLASSES: usize = NUM_ANNOTATORS + 1;

pub const DEFAULT_TIME_STEPS: usize = 128;
pub const DEFAULT_CHANNELS: usize = 37;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 128.0;
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.73, 0.12, 0.15];

/// One window, time-major (`values[t * channels + c]`), in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EEGSample {
    pub sample_id: u64,
    pub votes: u8,
    pub values: Vec<f32>,
}

impl EEGSample {
    /// Values widened for computation.
    pub fn input(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn class(&self) -> usize {
        self.votes as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_count: usize,
    pub channel_count: usize,
    pub time_steps: usize,
    pub sample_rate_hz: f64,
    pub splits: BTreeMap<u64, Split>,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub generator_seed: Option<u64>,
    pub config_digest: Option<String>,
}

impl DatasetManifest {
    pub fn split_of(&self, sample_id: u64) -> Option<Split> {
        self.splits.get(&sample_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.values().filter(|s| **s == split).count()
    }
}

/// Samples plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<EEGSample>,
}

impl Dataset {
    /// Checks shapes, vote ranges, id uniqueness and split coverage.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.sample_count != self.samples.len() {
            return Err(Error::format(
                "sample_count",
                format!("manifest says {}, found {}", m.sample_count, self.samples.len()),
            ));
        }
        let len = m.time_steps * m.channel_count;
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if s.values.len() != len {
                return Err(Error::format(
                    "values",
                    format!("sample {} has {} values, expected {len}", s.sample_id, s.values.len()),
                ));
            }
            if s.votes as usize > NUM_ANNOTATORS {
                return Err(Error::format("votes", format!("sample {} has {} votes", s.sample_id, s.votes)));
            }
            if !seen.insert(s.sample_id) {
                return Err(Error::format("sample_id", format!("duplicate id {}", s.sample_id)));
            }
            if !m.splits.contains_key(&s.sample_id) {
                return Err(Error::format("splits", format!("sample {} has no split", s.sample_id)));
            }
        }
        if m.splits.len() != self.samples.len() {
            return Err(Error::format("splits", "assignments reference unknown samples"));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.manifest.time_steps * self.manifest.channel_count
    }

    /// Samples of one split, in stored order.
    pub fn split(&self, split: Split) -> Vec<&EEGSample> {
        self.samples
            .iter()
            .filter(|s| self.manifest.split_of(s.sample_id) == Some(split))
            .collect()
    }

    pub fn find(&self, sample_id: u64) -> Option<&EEGSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }
}

pub fn class_histogram<'a>(samples: impl IntoIterator<Item = &'a EEGSample>) -> [usize; NUM_VOTE_CLASSES] {
    let mut h = [0; NUM_VOTE_CLASSES];
    for s in samples {
        h[s.class()] += 1;
    }
    h
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Per-class split counts: rounded targets, then every split with a nonzero
/// fraction gets at least one member when the class has three or more.
fn class_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    let mut counts = [train, val, n - train - val];
    if n >= 3 {
        for k in 0..3 {
            if fractions[k] > 0.0 && counts[k] == 0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Stratified train/val/test assignment. Shape fields take the defaults and
/// generator fields are left empty; adjust with the `with_*` builders.
pub fn split(samples: &[EEGSample], fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::Config("cannot split an empty sample set".into()));
    }
    check_fractions(fractions)?;
    let mut by_class: Vec<Vec<u64>> = vec![Vec::new(); NUM_VOTE_CLASSES];
    for s in samples {
        if s.class() >= NUM_VOTE_CLASSES {
            return Err(Error::Config(format!("sample {} has {} votes", s.sample_id, s.votes)));
        }
        by_class[s.class()].push(s.sample_id);
    }
    let mut splits = BTreeMap::new();
    for (class, ids) in by_class.iter_mut().enumerate() {
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        ids.shuffle(&mut rng);
        let counts = class_counts(ids.len(), fractions);
        let mut rest = ids.as_slice();
        for (k, split) in Split::ALL.into_iter().enumerate() {
            let (head, tail) = rest.split_at(counts[k]);
            for id in head {
                if splits.insert(*id, split).is_some() {
                    return Err(Error::Config(format!("duplicate sample_id {id}")));
                }
            }
            rest = tail;
        }
    }
    Ok(DatasetManifest {
        version: DATASET_FORMAT_VERSION,
        sample_count: samples.len(),
        channel_count: DEFAULT_CHANNELS,
        time_steps: DEFAULT_TIME_STEPS,
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        splits,
        split_fractions: fractions,
        split_seed: seed,
        generator_seed: None,
        config_digest: None,
    })
}

impl DatasetManifest {
    pub fn with_shape(mut self, time_steps: usize, channels: usize) -> Self {
        self.time_steps = time_steps;
        self.channel_count = channels;
        self
    }

    pub fn with_sample_rate(mut self, hz: f64) -> Self {
        self.sample_rate_hz = hz;
        self
    }
}
