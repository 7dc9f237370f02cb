//! Small models and datasets shared by unit tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, DatasetManifest, EEGSample, Split, DATASET_FORMAT_VERSION};
use crate::model::{BackboneConfig, BlockSpec, ModelConfig};

pub const T: usize = 24;
pub const C: usize = 6;

pub fn toy_model_config(classes: usize, per_class: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_time: T,
            input_channels: C,
            blocks: vec![BlockSpec::new(8, (5, 3), (2, 1)), BlockSpec::new(16, (10, 4), (1, 1))],
            latent_dim: 16,
            layer_norm_eps: 1e-5,
        },
        num_classes: classes,
        prototypes_per_class: per_class,
    }
}

/// Class templates plus Gaussian noise; separable by construction.
pub fn toy_dataset(n: usize, classes: usize, seed: u64, val_every: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..T * C).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
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
    let splits: BTreeMap<u64, Split> = samples
        .iter()
        .map(|s| {
            let val = val_every > 0 && (s.sample_id as usize / classes) % val_every == val_every - 1;
            (s.sample_id, if val { Split::Val } else { Split::Train })
        })
        .collect();
    Dataset {
        manifest: DatasetManifest {
            version: DATASET_FORMAT_VERSION,
            sample_count: n,
            channel_count: C,
            time_steps: T,
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
