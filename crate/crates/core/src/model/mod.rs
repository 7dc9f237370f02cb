//! The prototype network: backbone, prototype layer and class head.

mod checkpoint;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, norm, softmax_values, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use config::{BackboneConfig, BlockSpec, ClassLayout, ModelConfig, FINAL_KERNEL_TIME};

/// Weight linking a prototype to its own class logit at initialization.
pub const ON_CLASS_INIT: f64 = 1.0;
/// Weight linking a prototype to every other class logit at initialization.
pub const OFF_CLASS_INIT: f64 = -0.5;

/// Where a pushed prototype came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: u64,
    pub similarity: f64,
    pub epoch: u32,
}

/// Parameters of one conv → LayerNorm → ELU block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub(crate) kernels: Arc<Tensor>,
    pub(crate) gain: Arc<Tensor>,
    pub(crate) bias: Arc<Tensor>,
}

impl ConvBlock {
    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }
    pub fn gain(&self) -> &Tensor {
        &self.gain
    }
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub(crate) blocks: Vec<ConvBlock>,
}

impl Backbone {
    /// He-normal kernels, unit gains, zero biases.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.block_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            let fan_in = c_in * b.kernel.0 * b.kernel.1;
            let std = (2.0 / fan_in as f64).sqrt();
            let n = b.out_channels * fan_in;
            let w: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let kernels = Tensor::new(vec![b.out_channels, c_in, b.kernel.0, b.kernel.1], w)?;
            blocks.push(ConvBlock {
                kernels: Arc::new(kernels),
                gain: Arc::new(Tensor::vector(vec![1.0; b.out_channels])),
                bias: Arc::new(Tensor::vector(vec![0.0; b.out_channels])),
            });
            c_in = b.out_channels;
        }
        Ok(Backbone { blocks })
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    /// Flat views of every parameter tensor in checkpoint order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| [&*b.kernels, &*b.gain, &*b.bias])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| {
            [
                Arc::make_mut(&mut b.kernels),
                Arc::make_mut(&mut b.gain),
                Arc::make_mut(&mut b.bias),
            ]
        })
    }
}

/// Unit-norm prototype vectors, class-major, with push provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub(crate) layout: ClassLayout,
    /// `P×d`
    pub(crate) vectors: Arc<Tensor>,
    pub(crate) provenance: Vec<Option<Provenance>>,
}

impl PrototypeBank {
    pub fn from_vectors(layout: ClassLayout, dim: usize, data: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        let p = layout.num_prototypes();
        let vectors = Tensor::new(vec![p, dim], data)?;
        Ok(PrototypeBank {
            layout,
            vectors: Arc::new(vectors),
            provenance: vec![None; p],
        })
    }

    pub fn layout(&self) -> ClassLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.layout.num_prototypes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[j * d..(j + 1) * d]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn provenance(&self) -> &[Option<Provenance>] {
        &self.provenance
    }

    pub fn set_vector(&mut self, j: usize, v: &[f64]) {
        let d = self.dim();
        Arc::make_mut(&mut self.vectors).data_mut()[j * d..(j + 1) * d].copy_from_slice(v);
    }

    pub fn set_provenance(&mut self, j: usize, p: Option<Provenance>) {
        self.provenance[j] = p;
    }

    /// Projects every vector back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        let d = self.dim();
        let data = Arc::make_mut(&mut self.vectors).data_mut();
        for (j, row) in data.chunks_exact_mut(d).enumerate() {
            let n = norm(row);
            if n <= crate::diffcore::MIN_NORM {
                return Err(Error::Degenerate(format!("prototype {j} collapsed to zero")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.vectors)
    }
}

/// Bias-free `K×P` class-connection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub(crate) layout: ClassLayout,
    pub(crate) weights: Arc<Tensor>,
}

impl HeadWeights {
    pub fn from_matrix(layout: ClassLayout, data: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        let weights = Tensor::new(vec![layout.num_classes, layout.num_prototypes()], data)?;
        if weights.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("head weights must be finite".into()));
        }
        Ok(HeadWeights {
            layout,
            weights: Arc::new(weights),
        })
    }

    pub fn layout(&self) -> ClassLayout {
        self.layout
    }

    pub fn get(&self, class: usize, prototype: usize) -> f64 {
        self.weights.data()[class * self.layout.num_prototypes() + prototype]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let p = self.layout.num_prototypes();
        &self.weights.data()[class * p..(class + 1) * p]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.weights)
    }
}

/// Random prototypes on the unit sphere: isotropic Gaussian draws, normalized.
pub fn init_prototypes(layout: ClassLayout, dim: usize, seed: u64) -> Result<PrototypeBank> {
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = layout.num_prototypes();
    let data: Vec<f64> = (0..p * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut bank = PrototypeBank::from_vectors(layout, dim, data)?;
    bank.renormalize()?;
    Ok(bank)
}

/// `1` where the prototype's class matches the logit, `-0.5` elsewhere.
pub fn init_head(layout: ClassLayout) -> Result<HeadWeights> {
    let p = layout.num_prototypes();
    let data = (0..layout.num_classes * p)
        .map(|i| {
            if layout.class_of(i % p) == i / p {
                ON_CLASS_INIT
            } else {
                OFF_CLASS_INIT
            }
        })
        .collect();
    HeadWeights::from_matrix(layout, data)
}

/// Cosine similarity of a unit latent with every prototype.
pub fn similarities(z: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    (0..bank.len()).map(|j| dot(z, bank.vector(j))).collect()
}

/// `head · sims`
pub fn class_logits(sims: &[f64], head: &HeadWeights) -> Vec<f64> {
    (0..head.layout.num_classes)
        .map(|k| dot(head.row(k), sims))
        .collect()
}

pub fn class_probabilities(sims: &[f64], head: &HeadWeights) -> Vec<f64> {
    softmax_values(&class_logits(sims, head))
}

/// `points[k][j] = sims[j] * head[k][j]`
pub fn points_contributed(sims: &[f64], head: &HeadWeights) -> Vec<Vec<f64>> {
    (0..head.layout.num_classes)
        .map(|k| head.row(k).iter().zip(sims).map(|(w, s)| s * w).collect())
        .collect()
}

/// Which parameter groups receive gradients in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    pub backbone: bool,
    pub prototypes: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        prototypes: false,
        head: false,
    };
    pub const ALL: Trainable = Trainable {
        backbone: true,
        prototypes: true,
        head: true,
    };
}

/// Model parameters bound as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    /// `[kernels, gain, bias]` per block.
    pub backbone: Vec<[Var; 3]>,
    pub prototypes: Var,
    pub head: Var,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub latent: Var,
    pub sims: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub latent: Vec<f64>,
    pub sims: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Backbone f, prototype layer g_p and head h.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoEEGNet {
    pub(crate) config: ModelConfig,
    pub(crate) backbone: Backbone,
    pub(crate) prototypes: PrototypeBank,
    pub(crate) head: HeadWeights,
}

impl ProtoEEGNet {
    /// Fresh network: random backbone and prototypes, 1/−0.5 head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(&config.backbone, seed)?;
        let prototypes = init_prototypes(
            config.layout(),
            config.backbone.latent_dim,
            seed ^ 0x9E37_79B9_7F4A_7C15,
        )?;
        let head = init_head(config.layout())?;
        Ok(ProtoEEGNet {
            config,
            backbone,
            prototypes,
            head,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        backbone: Backbone,
        prototypes: PrototypeBank,
        head: HeadWeights,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.backbone.block_shapes()?;
        if backbone.blocks.len() != shapes.len() {
            return Err(Error::Dimension("backbone block count differs from config".into()));
        }
        if prototypes.layout != config.layout() || head.layout != config.layout() {
            return Err(Error::Dimension("prototype layout differs from config".into()));
        }
        if prototypes.dim() != config.backbone.latent_dim {
            return Err(Error::Dimension("prototype dimension differs from latent".into()));
        }
        Ok(ProtoEEGNet {
            config,
            backbone,
            prototypes,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_digest(&self) -> String {
        crate::digest::json_digest(&self.config)
    }

    pub fn layout(&self) -> ClassLayout {
        self.config.layout()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut PrototypeBank {
        &mut self.prototypes
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn set_head(&mut self, head: HeadWeights) -> Result<()> {
        if head.layout != self.layout() {
            return Err(Error::Dimension("head layout differs from model".into()));
        }
        self.head = head;
        Ok(())
    }

    pub(crate) fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundParams {
        let backbone = self
            .backbone
            .blocks
            .iter()
            .map(|b| {
                [
                    g.leaf_shared(b.kernels.clone(), trainable.backbone),
                    g.leaf_shared(b.gain.clone(), trainable.backbone),
                    g.leaf_shared(b.bias.clone(), trainable.backbone),
                ]
            })
            .collect();
        BoundParams {
            backbone,
            prototypes: g.leaf_shared(self.prototypes.vectors.clone(), trainable.prototypes),
            head: g.leaf_shared(self.head.weights.clone(), trainable.head),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        let cfg = &self.config.backbone;
        if input.len() != cfg.input_len() {
            return Err(Error::Dimension(format!(
                "expected {}×{} input, got {} values",
                cfg.input_time,
                cfg.input_channels,
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Backbone on a time-major window; returns the unit latent.
    pub fn embed_in(&self, g: &mut Graph, params: &BoundParams, input: &[f64]) -> Result<Var> {
        self.check_input(input)?;
        let cfg = &self.config.backbone;
        let x = Tensor::new(vec![1, cfg.input_time, cfg.input_channels], input.to_vec())?;
        let mut h = g.leaf(x, false);
        for (spec, [k, gain, bias]) in cfg.blocks.iter().zip(&params.backbone) {
            h = g.conv2d_valid(h, *k, spec.stride)?;
            h = g.layer_norm(h, *gain, *bias, cfg.layer_norm_eps)?;
            h = g.elu(h);
        }
        let flat = g.reshape(h, vec![cfg.latent_dim])?;
        g.l2_normalize(flat)
    }

    /// Prototype layer and head on a latent already in `g`.
    pub fn classify_in(&self, g: &mut Graph, params: &BoundParams, latent: Var) -> Result<ForwardVars> {
        let sims = g.linear(latent, params.prototypes)?;
        let logits = g.linear(sims, params.head)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardVars {
            latent,
            sims,
            logits,
            probs,
        })
    }

    pub fn forward_in(&self, g: &mut Graph, params: &BoundParams, input: &[f64]) -> Result<ForwardVars> {
        let z = self.embed_in(g, params, input)?;
        self.classify_in(g, params, z)
    }

    /// Unit-norm latent of one window.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, Trainable::NONE);
        let z = self.embed_in(&mut g, &params, input)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Prediction from a latent computed earlier.
    pub fn predict_latent(&self, latent: Vec<f64>) -> Prediction {
        let sims = similarities(&latent, &self.prototypes);
        let logits = class_logits(&sims, &self.head);
        let probs = softmax_values(&logits);
        Prediction {
            latent,
            sims,
            logits,
            probs,
        }
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        Ok(self.predict_latent(self.embed(input)?))
    }
}
