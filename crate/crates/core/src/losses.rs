//! Training objectives: cross-entropy plus cluster, separation,
//! orthogonality and off-class L1 terms.
//!
//! All functions build on a [`Graph`] so every term is differentiable.
//! Similarity inputs are the per-sample outputs of the prototype layer; on
//! unit vectors they are the cosine similarities the terms are defined on.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ClassLayout, ForwardVars};

/// Weights of the loss terms.
///
/// `clst` multiplies the cluster loss, which already carries a leading minus
/// (it is minus the mean best same-class similarity), so a positive `clst`
/// rewards similarity to own-class prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoefficients {
    pub crs_ent: f64,
    pub clst: f64,
    pub sep: f64,
    pub ortho: f64,
    pub l1: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            crs_ent: 1.25,
            clst: 0.1,
            sep: 0.0,
            ortho: 0.5,
            l1: 0.01,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [self.crs_ent, self.clst, self.sep, self.ortho, self.l1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss coefficients must be finite".into()));
        }
        if !(self.crs_ent > 0.0) {
            return Err(Error::Config("crs_ent coefficient must be > 0".into()));
        }
        Ok(())
    }

    /// Only the cross-entropy term, with weight one.
    pub fn cross_entropy_only() -> Self {
        LossCoefficients {
            crs_ent: 1.0,
            clst: 0.0,
            sep: 0.0,
            ortho: 0.0,
            l1: 0.0,
        }
    }
}

/// Unweighted components and weighted total of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub total: f64,
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub orthogonality: f64,
    pub l1: f64,
    pub batch_size: usize,
}

impl BatchLossReport {
    /// The weighted combination of the components.
    pub fn recombine(&self, c: &LossCoefficients) -> f64 {
        c.crs_ent * self.cross_entropy
            + c.sep * self.separation
            + c.clst * self.cluster
            + c.ortho * self.orthogonality
            + c.l1 * self.l1
    }
}

fn check_batch(sims: &[Var], labels: &[usize], layout: &ClassLayout) -> Result<()> {
    if sims.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if sims.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} outputs for {} labels",
            sims.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= layout.num_classes) {
        return Err(Error::Index(format!(
            "label {y} out of range for {} classes",
            layout.num_classes
        )));
    }
    Ok(())
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = g.add_n(terms)?;
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// Mean cross-entropy of per-sample class distributions.
pub fn cross_entropy_loss(g: &mut Graph, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Dimension("cross-entropy batch/label mismatch".into()));
    }
    let terms = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| g.cross_entropy(p, y))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, &terms)
}

/// `-(1/N) Σ_i max_{j of class y_i} sims_i[j]`
pub fn cluster_loss(g: &mut Graph, sims: &[Var], labels: &[usize], layout: &ClassLayout) -> Result<Var> {
    layout.validate()?;
    check_batch(sims, labels, layout)?;
    let mut terms = Vec::with_capacity(sims.len());
    for (&s, &y) in sims.iter().zip(labels) {
        let own: Vec<usize> = layout.prototypes_of(y).collect();
        terms.push(g.max_over(s, &own)?);
    }
    let mean = batch_mean(g, &terms)?;
    Ok(g.scale(mean, -1.0))
}

/// `(1/N) Σ_i max_{j not of class y_i} sims_i[j]`
pub fn separation_loss(g: &mut Graph, sims: &[Var], labels: &[usize], layout: &ClassLayout) -> Result<Var> {
    layout.validate()?;
    if layout.num_classes < 2 {
        return Err(Error::Config("separation needs at least two classes".into()));
    }
    check_batch(sims, labels, layout)?;
    let mut terms = Vec::with_capacity(sims.len());
    for (&s, &y) in sims.iter().zip(labels) {
        terms.push(g.max_over(s, &layout.other_prototypes(y))?);
    }
    batch_mean(g, &terms)
}

/// `Σ_c ‖P_c P_cᵀ − I‖_F²` over the per-class blocks of a `P×d` matrix.
pub fn orthogonality_loss(g: &mut Graph, prototypes: Var, layout: &ClassLayout) -> Result<Var> {
    layout.validate()?;
    let l = layout.per_class;
    let mut eye = Tensor::zeros(vec![l, l]);
    for i in 0..l {
        eye.data_mut()[i * l + i] = 1.0;
    }
    let eye = g.leaf(eye, false);
    let mut terms = Vec::with_capacity(layout.num_classes);
    for c in 0..layout.num_classes {
        let block = g.slice_rows(prototypes, c * l, l)?;
        let gram = g.matmul_nt(block, block)?;
        let diff = g.sub(gram, eye)?;
        terms.push(g.sum_squares(diff));
    }
    g.add_n(&terms)
}

/// `Σ_k Σ_{j not of class k} |w[k][j]|`
pub fn l1_offclass(g: &mut Graph, head: Var, layout: &ClassLayout) -> Result<Var> {
    layout.validate()?;
    g.masked_abs_sum(head, layout.offclass_mask())
}

/// Graph nodes of every loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cross_entropy: Var,
    pub cluster: Var,
    pub separation: Var,
    pub orthogonality: Var,
    pub l1: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph, batch_size: usize) -> BatchLossReport {
        let v = |x: Var| g.value(x).data()[0];
        BatchLossReport {
            total: v(self.total),
            cross_entropy: v(self.cross_entropy),
            cluster: v(self.cluster),
            separation: v(self.separation),
            orthogonality: v(self.orthogonality),
            l1: v(self.l1),
            batch_size,
        }
    }
}

/// Sample-dependent part: `crs_ent·CE + clst·l_clst + sep·l_sep`, as batch
/// means. Returns `(weighted, [ce, cluster, separation])`.
pub fn data_terms(
    g: &mut Graph,
    outputs: &[ForwardVars],
    labels: &[usize],
    layout: &ClassLayout,
    coefs: &LossCoefficients,
) -> Result<(Var, [Var; 3])> {
    let probs: Vec<Var> = outputs.iter().map(|o| o.probs).collect();
    let sims: Vec<Var> = outputs.iter().map(|o| o.sims).collect();
    let ce = cross_entropy_loss(g, &probs, labels)?;
    let clst = cluster_loss(g, &sims, labels, layout)?;
    let sep = if layout.num_classes > 1 {
        separation_loss(g, &sims, labels, layout)?
    } else {
        g.leaf(Tensor::scalar(0.0), false)
    };
    let parts = [
        g.scale(ce, coefs.crs_ent),
        g.scale(sep, coefs.sep),
        g.scale(clst, coefs.clst),
    ];
    Ok((g.add_n(&parts)?, [ce, clst, sep]))
}

/// Parameter-only part: `ortho·l_ortho + l1·l1_offclass`. Returns
/// `(weighted, [orthogonality, l1])`.
pub fn regularizer_terms(
    g: &mut Graph,
    prototypes: Var,
    head: Var,
    layout: &ClassLayout,
    coefs: &LossCoefficients,
) -> Result<(Var, [Var; 2])> {
    let ortho = orthogonality_loss(g, prototypes, layout)?;
    let l1 = l1_offclass(g, head, layout)?;
    let parts = [g.scale(ortho, coefs.ortho), g.scale(l1, coefs.l1)];
    Ok((g.add_n(&parts)?, [ortho, l1]))
}

/// The full weighted objective of one batch.
pub fn total_loss(
    g: &mut Graph,
    outputs: &[ForwardVars],
    labels: &[usize],
    params: &BoundParams,
    layout: &ClassLayout,
    coefs: &LossCoefficients,
) -> Result<LossVars> {
    let (data, [ce, clst, sep]) = data_terms(g, outputs, labels, layout, coefs)?;
    let (reg, [ortho, l1]) = regularizer_terms(g, params.prototypes, params.head, layout, coefs)?;
    let total = g.add(data, reg)?;
    Ok(LossVars {
        total,
        cross_entropy: ce,
        cluster: clst,
        separation: sep,
        orthogonality: ortho,
        l1,
    })
}
