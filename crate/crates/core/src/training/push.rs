//! Prototype projection onto training latents.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EEGSample;
use crate::diffcore::dot;
use crate::error::{Error, Result};
use crate::model::{ProtoEEGNet, Provenance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushRecord {
    pub prototype: usize,
    pub class: usize,
    /// Index within the class.
    pub slot: usize,
    pub sample_id: u64,
    /// Similarity to the source just before the push.
    pub similarity: f64,
    pub epoch: u32,
}

/// Latents of `samples` in order, computed `batch_size` windows at a time.
pub fn compute_latents(model: &ProtoEEGNet, samples: &[&EEGSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(batch_size.max(1)) {
        let latents: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|s| model.embed(&s.input()))
            .collect::<Result<_>>()?;
        out.extend(latents);
    }
    Ok(out)
}

/// Replaces every prototype by the most similar latent of its own class.
/// Ties go to the smallest sample id.
pub fn push_from_latents(
    model: &mut ProtoEEGNet,
    samples: &[&EEGSample],
    latents: &[Vec<f64>],
    epoch: u32,
) -> Result<Vec<PushRecord>> {
    if samples.len() != latents.len() {
        return Err(Error::Dimension(format!(
            "{} samples for {} latents",
            samples.len(),
            latents.len()
        )));
    }
    let layout = model.layout();
    let mut records = Vec::with_capacity(layout.num_prototypes());
    for class in 0..layout.num_classes {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == class).collect();
        if members.is_empty() {
            return Err(Error::Config(format!("class {class} has no training samples to push onto")));
        }
        members.sort_by_key(|&i| samples[i].sample_id);
        for (slot, j) in layout.prototypes_of(class).enumerate() {
            let proto = model.prototypes().vector(j).to_vec();
            let mut best = members[0];
            let mut best_sim = dot(&latents[best], &proto);
            for &i in &members[1..] {
                let s = dot(&latents[i], &proto);
                if s > best_sim {
                    best = i;
                    best_sim = s;
                }
            }
            let sample_id = samples[best].sample_id;
            let bank = model.prototypes_mut();
            bank.set_vector(j, &latents[best]);
            bank.set_provenance(
                j,
                Some(Provenance {
                    sample_id,
                    similarity: best_sim,
                    epoch,
                }),
            );
            records.push(PushRecord {
                prototype: j,
                class,
                slot,
                sample_id,
                similarity: best_sim,
                epoch,
            });
        }
    }
    Ok(records)
}

/// Computes training latents and pushes every prototype.
pub fn push_prototypes(
    model: &mut ProtoEEGNet,
    samples: &[&EEGSample],
    batch_size: usize,
    epoch: u32,
) -> Result<Vec<PushRecord>> {
    let latents = compute_latents(model, samples, batch_size)?;
    push_from_latents(model, samples, &latents, epoch)
}
