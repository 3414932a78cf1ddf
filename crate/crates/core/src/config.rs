use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::WeightInit;
use crate::ops::ConvSpec;

/// Convolutions per VGG block.
pub const VGG_LAYOUT: [usize; 5] = [2, 2, 3, 3, 3];

/// Per-level `(kernel, stride)` of the two convolutions in each EGB branch.
/// Their stride products are 1, 2, 4, 8 and 16.
pub const EGB_BRANCH_GEOMETRY: [[(usize, usize); 2]; 5] = [
    [(3, 1), (3, 1)],
    [(3, 2), (3, 1)],
    [(3, 2), (3, 2)],
    [(3, 2), (5, 4)],
    [(5, 4), (5, 4)],
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Every weight `N(0, init_std²)`.
    #[default]
    Gaussian,
    /// Fan-in scaled `N(0, 2 / fan_in)`; `init_std` then only sets the output
    /// convolutions of the edge guidance branches.
    He,
}

/// Network geometry and initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Square input side in pixels; divisible by 32.
    pub input_size: usize,
    /// Output channels of the five VGG blocks.
    pub block_channels: [usize; 5],
    /// Width of side outputs, condition features and EGB branches.
    pub side_channels: usize,
    /// Width of the deconvolution chain and the local feature.
    pub fuse_channels: usize,
    /// VALID kernels of the global block; must shrink level 5 to 1×1.
    pub global_kernels: Vec<usize>,
    /// Number of edge guidance blocks: 0, 3 (levels 1–3) or 5.
    pub egb_blocks: usize,
    pub init: InitScheme,
    /// Standard deviation for the `gaussian` scheme and for the output
    /// convolutions of the edge guidance branches.
    pub init_std: f64,
    /// Supervise the upsampled full-resolution map instead of level 1.
    pub supervise_full_res: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// 96×96 input, 32-channel geometry that trains in minutes on a CPU.
    pub fn desk() -> Self {
        NetworkConfig {
            input_size: 96,
            block_channels: [16, 32, 48, 64, 64],
            side_channels: 32,
            fuse_channels: 32,
            global_kernels: vec![3, 1, 1],
            egb_blocks: 5,
            init: InitScheme::He,
            init_std: 0.01,
            supervise_full_res: false,
        }
    }

    /// Full 352×352, 128-channel geometry.
    pub fn paper() -> Self {
        NetworkConfig {
            input_size: 352,
            block_channels: [64, 128, 256, 512, 512],
            side_channels: 128,
            fuse_channels: 128,
            global_kernels: vec![5, 5, 3],
            egb_blocks: 5,
            init: InitScheme::Gaussian,
            init_std: 0.01,
            supervise_full_res: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }

    pub fn weight_init(&self) -> WeightInit {
        match self.init {
            InitScheme::Gaussian => WeightInit::Gaussian(self.init_std),
            InitScheme::He => WeightInit::He,
        }
    }

    /// Spatial side of encoder level `i` (1-based).
    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// Resolution of the fused saliency map (level 1).
    pub fn output_size(&self) -> usize {
        self.level_size(1)
    }

    /// Whether level `i` (1-based) is modulated by an edge guidance block.
    pub fn has_egb(&self, level: usize) -> bool {
        level <= self.egb_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return fail(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        if self.block_channels.contains(&0) {
            return fail(format!("block_channels {:?} must all be positive", self.block_channels));
        }
        if self.side_channels == 0 || self.fuse_channels == 0 {
            return fail("side_channels and fuse_channels must be positive".into());
        }
        if !matches!(self.egb_blocks, 0 | 3 | 5) {
            return fail(format!("egb_blocks must be 0, 3 or 5, got {}", self.egb_blocks));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail(format!("init_std {} must be finite and nonnegative", self.init_std));
        }
        let mut size = self.level_size(5);
        for &k in &self.global_kernels {
            if k == 0 || k > size {
                return fail(format!(
                    "global_kernels {:?} cannot reduce the {}x{} level-5 map to 1x1",
                    self.global_kernels,
                    self.level_size(5),
                    self.level_size(5)
                ));
            }
            size = size - k + 1;
        }
        if size != 1 {
            return fail(format!(
                "global_kernels {:?} reduce the {}x{} level-5 map to {size}x{size}, not 1x1",
                self.global_kernels,
                self.level_size(5),
                self.level_size(5)
            ));
        }
        for level in 1..=5 {
            let mut s = self.output_size();
            for (k, stride) in EGB_BRANCH_GEOMETRY[level - 1] {
                s = ConvSpec::same(k, stride).conv_output(s, s)?.0;
            }
            if s != self.level_size(level) {
                return fail(format!(
                    "EGB level {level} branch yields {s}x{s}, side feature is {}",
                    self.level_size(level)
                ));
            }
        }
        Ok(())
    }
}
