use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time extent of the last backbone kernel; it collapses the time axis.
pub const FINAL_KERNEL_TIME: usize = 10;

/// One conv → LayerNorm → ELU stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    /// (time, channel) extent.
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl BlockSpec {
    pub const fn new(out_channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        BlockSpec {
            out_channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_time: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub latent_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for BackboneConfig {
    /// 1×128×37 → 16×62×17 → 32×29×7 → 64×10×3 → 128×1×1.
    fn default() -> Self {
        BackboneConfig {
            input_time: 128,
            input_channels: 37,
            blocks: vec![
                BlockSpec::new(16, (5, 5), (2, 2)),
                BlockSpec::new(32, (5, 4), (2, 2)),
                BlockSpec::new(64, (10, 3), (2, 2)),
                BlockSpec::new(128, (FINAL_KERNEL_TIME, 3), (1, 1)),
            ],
            latent_dim: 128,
            layer_norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Output shape `[channels, time, width]` of every block, after checking
    /// that the stack ends in `latent_dim×1×1`.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be > 0".into()));
        }
        let mut shape = [1, self.input_time, self.input_channels];
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (kh, kw) = b.kernel;
            let (sh, sw) = b.stride;
            if b.out_channels == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 {
                return Err(Error::Config(format!("block {i} has a zero extent")));
            }
            if kh > shape[1] || kw > shape[2] {
                return Err(Error::Config(format!(
                    "block {i}: kernel {kh}×{kw} exceeds input {}×{}",
                    shape[1], shape[2]
                )));
            }
            shape = [b.out_channels, (shape[1] - kh) / sh + 1, (shape[2] - kw) / sw + 1];
            out.push(shape);
        }
        if shape != [self.latent_dim, 1, 1] {
            return Err(Error::Config(format!(
                "backbone ends in {shape:?}, expected [{}, 1, 1]",
                self.latent_dim
            )));
        }
        let last = self.blocks.last().expect("nonempty");
        if last.kernel.0 != FINAL_KERNEL_TIME {
            return Err(Error::Config(format!(
                "final kernel time extent is {}, expected {FINAL_KERNEL_TIME}",
                last.kernel.0
            )));
        }
        Ok(out)
    }

    pub fn input_len(&self) -> usize {
        self.input_time * self.input_channels
    }
}

/// How prototypes are assigned to classes: `per_class` consecutive
/// prototypes for each class, class-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub num_classes: usize,
    pub per_class: usize,
}

impl ClassLayout {
    pub const fn new(num_classes: usize, per_class: usize) -> Self {
        ClassLayout {
            num_classes,
            per_class,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn class_of(&self, prototype: usize) -> usize {
        prototype / self.per_class
    }

    pub fn prototypes_of(&self, class: usize) -> Range<usize> {
        class * self.per_class..(class + 1) * self.per_class
    }

    pub fn other_prototypes(&self, class: usize) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&j| self.class_of(j) != class)
            .collect()
    }

    /// Row-major `K×P` mask of head entries whose prototype belongs to a
    /// different class than the logit.
    pub fn offclass_mask(&self) -> Vec<bool> {
        let p = self.num_prototypes();
        (0..self.num_classes * p)
            .map(|i| self.class_of(i % p) != i / p)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("every class needs at least one prototype".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            num_classes: 9,
            prototypes_per_class: 12,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> ClassLayout {
        ClassLayout::new(self.num_classes, self.prototypes_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().validate()?;
        self.backbone.block_shapes().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_reaches_latent() {
        let shapes = BackboneConfig::default().block_shapes().unwrap();
        assert_eq!(
            shapes,
            vec![[16, 62, 17], [32, 29, 7], [64, 10, 3], [128, 1, 1]]
        );
    }

    #[test]
    fn rejects_wrong_final_kernel() {
        let mut cfg = BackboneConfig::default();
        cfg.blocks[3].kernel = (8, 3);
        assert!(cfg.block_shapes().is_err());
    }

    #[test]
    fn layout_counts() {
        let l = ClassLayout::new(9, 12);
        assert_eq!(l.num_prototypes(), 108);
        assert_eq!(l.class_of(107), 8);
        assert_eq!(l.prototypes_of(3), 36..48);
        assert_eq!(l.other_prototypes(0).len(), 96);
        assert_eq!(l.offclass_mask().iter().filter(|m| **m).count(), 9 * 96);
        assert!(ClassLayout::new(9, 0).validate().is_err());
    }
}
