//! VGG-style encoder with one side output per block and a global block.

use rand::Rng;

use crate::config::{NetworkConfig, VGG_LAYOUT};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ConvLayer, WeightInit};
use crate::ops::ConvSpec;
use crate::params::ParamStore;

/// Side outputs `X_1..X_5` (level `i` at `input_size / 2^i`) plus the
/// pooled block-5 activation that feeds the global block.
#[derive(Clone, Copy, Debug)]
pub struct SideFeatures {
    pub levels: [Var; 5],
    pub pooled5: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    input_size: usize,
    blocks: Vec<Vec<ConvLayer>>,
    sides: Vec<ConvLayer>,
    global: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(5);
        let mut cin = 3;
        for (b, (&convs, &width)) in VGG_LAYOUT.iter().zip(&cfg.block_channels).enumerate() {
            let layers = (0..convs)
                .map(|j| {
                    let l = ConvLayer::new(
                        format!("backbone.block{}.conv{}", b + 1, j + 1),
                        if j == 0 { cin } else { width },
                        width,
                        ConvSpec::same(3, 1),
                    );
                    l
                })
                .collect();
            blocks.push(layers);
            cin = width;
        }
        let sides = cfg
            .block_channels
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                ConvLayer::new(
                    format!("backbone.side{}", i + 1),
                    w,
                    cfg.side_channels,
                    ConvSpec::same(3, 1),
                )
            })
            .collect();
        let global = cfg
            .global_kernels
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let cin = if j == 0 {
                    cfg.block_channels[4]
                } else {
                    cfg.side_channels
                };
                ConvLayer::new(
                    format!("backbone.global{}", j + 1),
                    cin,
                    cfg.side_channels,
                    ConvSpec::valid(k),
                )
            })
            .collect();
        Ok(Backbone {
            input_size: cfg.input_size,
            blocks,
            sides,
            global,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.blocks.iter().flatten().chain(&self.sides).chain(&self.global)
    }

    /// Random weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: WeightInit, rng: &mut R) {
        for l in self.layers() {
            l.init(store, init, 0.0, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<SideFeatures> {
        let s = g.shape(image);
        if s.c() != 3 || s.h() != self.input_size || s.w() != self.input_size {
            return Err(Error::shape(
                "backbone_forward",
                format!("image {s} does not match expected [N,3,{0},{0}]", self.input_size),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(5);
        for (block, side) in self.blocks.iter().zip(&self.sides) {
            for layer in block {
                x = layer.forward_relu(g, store, x)?;
            }
            x = g.max_pool2d(x, 2)?;
            levels.push(side.forward_relu(g, store, x)?);
        }
        Ok(SideFeatures {
            levels: levels.try_into().expect("five levels"),
            pooled5: x,
        })
    }

    /// VALID convolutions + relu reducing the level-5 map to `1 × 1`.
    pub fn global_block(&self, g: &mut Graph, store: &ParamStore, level5: Var) -> Result<Var> {
        let mut x = level5;
        for layer in &self.global {
            x = layer.forward_relu(g, store, x)?;
        }
        let s = g.shape(x);
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::shape(
                "global_block",
                format!("global feature is {}x{}, expected 1x1", s.h(), s.w()),
            ));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            input_size: 32,
            block_channels: [2, 3, 3, 4, 4],
            side_channels: 3,
            fuse_channels: 3,
            global_kernels: vec![1],
            ..NetworkConfig::desk()
        }
    }

    fn build(cfg: &NetworkConfig, seed: u64) -> (Backbone, ParamStore) {
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        bb.init(
            &mut store,
            WeightInit::Gaussian(0.1),
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        (bb, store)
    }

    #[test]
    fn desk_halving_chain_and_global() {
        let cfg = NetworkConfig::desk();
        let (bb, store) = build(&cfg, 0);
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(Shape::new(1, 3, 96, 96), 0.5));
        let sides = bb.forward(&mut g, &store, img).unwrap();
        let sizes: Vec<_> = sides.levels.iter().map(|&v| g.shape(v)).collect();
        for (i, s) in sizes.iter().enumerate() {
            assert_eq!(*s, Shape::new(1, 32, 48 >> i, 48 >> i));
        }
        let xg = bb.global_block(&mut g, &store, sides.pooled5).unwrap();
        assert_eq!(g.shape(xg), Shape::new(1, 32, 1, 1));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build(&tiny(), 9);
        let (_, b) = build(&tiny(), 9);
        let (_, c) = build(&tiny(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = tiny();
        let (bb, store) = build(&cfg, 1);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(Shape::new(1, 3, 32, 32)));
        let sides = bb.forward(&mut g, &store, img).unwrap();
        for v in sides.levels {
            assert_eq!(g.value(v).max_abs(), 0.0);
        }
        let xg = bb.global_block(&mut g, &store, sides.pooled5).unwrap();
        assert_eq!(g.value(xg).max_abs(), 0.0);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let (bb, store) = build(&tiny(), 1);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
        assert!(bb.forward(&mut g, &store, img).is_err());
    }
}
