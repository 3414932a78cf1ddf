//! Edge maps, the shared condition network, and edge guidance blocks.
//!
//! An edge guidance block reads the condition features through two
//! independent two-convolution branches, producing a per-position scale
//! `γ` and shift `β` at the resolution of its side feature, and returns
//! `X ⊙ γ + β`.

use rand::Rng;

use crate::config::{NetworkConfig, EGB_BRANCH_GEOMETRY};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ConvLayer, WeightInit};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Sobel edge map of an RGB batch at half resolution, in `[0, 1]`.
///
/// Gray is the RGB mean; the gradient magnitude is normalised by its
/// per-image maximum (all-zero when the image is flat) and then
/// area-downsampled by 2.
pub fn extract_edge_map(image: &Tensor) -> Result<Tensor> {
    let gray = ops::channel_mean(image);
    let mut mag = ops::sobel_magnitude(&gray);
    let plane = mag.shape().plane();
    for chunk in mag.data_mut().chunks_mut(plane) {
        let max = chunk.iter().fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            chunk.iter_mut().for_each(|v| *v /= max);
        }
    }
    let mut edge = ops::area_downsample(&mag, 2)?;
    edge.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(edge)
}

/// Brings an externally supplied edge map to `size × size`, clamped to `[0, 1]`.
pub fn fit_edge_map(edge: &Tensor, size: usize) -> Result<Tensor> {
    let s = edge.shape();
    if s.c() != 1 {
        return Err(Error::shape(
            "fit_edge_map",
            format!("edge map must have 1 channel, got {s}"),
        ));
    }
    let mut out = if s.h() == size && s.w() == size {
        edge.clone()
    } else {
        ops::bilinear_resize(edge, size, size)?
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EgbBlock {
    pub level: usize,
    pub gamma: [ConvLayer; 2],
    pub beta: [ConvLayer; 2],
}

impl EgbBlock {
    fn new(level: usize, width: usize) -> Self {
        let branch = |kind: &str| {
            let [(k1, s1), (k2, s2)] = EGB_BRANCH_GEOMETRY[level - 1];
            [
                ConvLayer::new(format!("egb{level}.{kind}.conv1"), width, width, ConvSpec::same(k1, s1)),
                ConvLayer::new(format!("egb{level}.{kind}.conv2"), width, width, ConvSpec::same(k2, s2)),
            ]
        };
        EgbBlock {
            level,
            gamma: branch("gamma"),
            beta: branch("beta"),
        }
    }

    fn branch(layers: &[ConvLayer; 2], g: &mut Graph, store: &ParamStore, cond: Var) -> Result<Var> {
        let h = layers[0].forward_relu(g, store, cond)?;
        layers[1].forward(g, store, h)
    }

    /// `X ⊙ γ(cond) + β(cond)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cond: Var, x: Var) -> Result<Var> {
        let gamma = Self::branch(&self.gamma, g, store, cond)?;
        let beta = Self::branch(&self.beta, g, store, cond)?;
        let (sg, sx) = (g.shape(gamma), g.shape(x));
        if sg != sx {
            return Err(Error::shape(
                "egb_forward",
                format!(
                    "level {} branch output {sg} does not match side feature {sx}",
                    self.level
                ),
            ));
        }
        let scaled = g.mul(x, gamma)?;
        g.add(scaled, beta)
    }
}

#[derive(Clone, Debug)]
pub struct EdgeGuidance {
    cond_size: usize,
    condition: Vec<ConvLayer>,
    /// Indexed by level − 1; `None` where the level is passed through unchanged.
    blocks: Vec<Option<EgbBlock>>,
}

impl EdgeGuidance {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.side_channels;
        let condition = if cfg.egb_blocks == 0 {
            Vec::new()
        } else {
            (0..4)
                .map(|j| {
                    ConvLayer::new(
                        format!("edge.cond{}", j + 1),
                        if j == 0 { 1 } else { w },
                        w,
                        ConvSpec::same(3, 1),
                    )
                })
                .collect()
        };
        let blocks = (1..=5).map(|l| cfg.has_egb(l).then(|| EgbBlock::new(l, w))).collect();
        Ok(EdgeGuidance {
            cond_size: cfg.output_size(),
            condition,
            blocks,
        })
    }

    pub fn is_active(&self) -> bool {
        !self.condition.is_empty()
    }

    pub fn block(&self, level: usize) -> Option<&EgbBlock> {
        self.blocks.get(level - 1).and_then(Option::as_ref)
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.condition
            .iter()
            .chain(self.blocks.iter().flatten().flat_map(|b| b.gamma.iter().chain(&b.beta)))
    }

    /// Random weights. The last convolution of each branch draws from
    /// `N(0, head_std²)` whatever the scheme, and γ-branch output biases
    /// start at 1, so every block begins close to the identity modulation.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: WeightInit, head_std: f64, rng: &mut R) {
        let head = WeightInit::Gaussian(head_std);
        for l in &self.condition {
            l.init(store, init, 0.0, rng);
        }
        for b in self.blocks.iter().flatten() {
            b.gamma[0].init(store, init, 0.0, rng);
            b.gamma[1].init(store, head, 1.0, rng);
            b.beta[0].init(store, init, 0.0, rng);
            b.beta[1].init(store, head, 0.0, rng);
        }
    }

    /// Four 3×3 convolutions + relu over the half-resolution edge map.
    pub fn condition_network(&self, g: &mut Graph, store: &ParamStore, edge: Var) -> Result<Var> {
        let s = g.shape(edge);
        if s.c() != 1 || s.h() != self.cond_size || s.w() != self.cond_size {
            return Err(Error::shape(
                "condition_network",
                format!("edge map {s} does not match expected [N,1,{0},{0}]", self.cond_size),
            ));
        }
        let mut x = edge;
        for l in &self.condition {
            x = l.forward_relu(g, store, x)?;
        }
        Ok(x)
    }

    /// Applies the block for `level` if present, otherwise returns `x`.
    pub fn modulate(&self, g: &mut Graph, store: &ParamStore, level: usize, cond: Option<Var>, x: Var) -> Result<Var> {
        match (self.block(level), cond) {
            (Some(b), Some(c)) => b.forward(g, store, c, x),
            (Some(_), None) => Err(Error::Graph(format!("EGB level {level} needs condition features"))),
            (None, _) => Ok(x),
        }
    }
}

/// Shape of the condition features for `cfg`.
pub fn condition_shape(cfg: &NetworkConfig, batch: usize) -> Shape {
    Shape::new(batch, cfg.side_channels, cfg.output_size(), cfg.output_size())
}
