//! Contrast features, the deconvolution chain, the local feature and the
//! local/global score fusion.

use rand::Rng;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ConvLayer, WeightInit};
use crate::ops::ConvSpec;
use crate::params::ParamStore;

/// Channel of the two-way softmax holding the foreground probability.
pub const FOREGROUND: usize = 0;

/// Transposed convolution that exactly doubles spatial size.
pub fn deconv_spec() -> ConvSpec {
    ConvSpec::same(5, 2).with_output_padding(1)
}

/// `X − avg3x3(X)`.
pub fn contrast_feature(g: &mut Graph, xf: Var) -> Result<Var> {
    let local = g.avg_pool2d_same(xf, 3)?;
    g.sub(xf, local)
}

/// Logits, class probabilities and the foreground map from score fusion.
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    pub logits: Var,
    pub probs: Var,
    pub saliency: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Deconvolutions for levels 2..=5 (index 0 is level 2).
    deconvs: Vec<ConvLayer>,
    local: ConvLayer,
    score_local: ConvLayer,
    score_global: ConvLayer,
}

impl Decoder {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let (side, fuse) = (cfg.side_channels, cfg.fuse_channels);
        let deconvs = (2..=5)
            .map(|level| {
                let cin = if level == 5 { 2 * side } else { 2 * side + fuse };
                ConvLayer::transposed(format!("decoder.deconv{level}"), cin, fuse, deconv_spec())
            })
            .collect();
        Ok(Decoder {
            deconvs,
            local: ConvLayer::new("decoder.local", 2 * side + fuse, fuse, ConvSpec::valid(1)),
            score_local: ConvLayer::new("decoder.score_local", fuse, 2, ConvSpec::valid(1)),
            score_global: ConvLayer::new("decoder.score_global", side, 2, ConvSpec::valid(1)),
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.deconvs
            .iter()
            .chain([&self.local, &self.score_local, &self.score_global])
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: WeightInit, rng: &mut R) {
        for l in self.layers() {
            l.init(store, init, 0.0, rng);
        }
    }

    pub fn score_local(&self) -> &ConvLayer {
        &self.score_local
    }

    pub fn score_global(&self) -> &ConvLayer {
        &self.score_global
    }

    /// `D_i = relu(deconv(concat(X^F_i, X^C_i [, D_{i+1}])))` at twice the
    /// level-`i` size. `level` must be in 2..=5; `d_next` is absent at 5.
    pub fn deconv_fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        xf: Var,
        xc: Var,
        d_next: Option<Var>,
    ) -> Result<Var> {
        let layer = self
            .deconvs
            .get(level.wrapping_sub(2))
            .ok_or_else(|| Error::Graph(format!("no deconvolution layer for level {level}")))?;
        let parts = match d_next {
            Some(d) => vec![xf, xc, d],
            None => vec![xf, xc],
        };
        let cat = g.concat_channels(&parts)?;
        layer.forward_relu(g, store, cat)
    }

    /// `X^L = relu(conv1x1(concat(X^F_1, X^C_1, D_2)))`.
    pub fn local_feature(&self, g: &mut Graph, store: &ParamStore, xf1: Var, xc1: Var, d2: Var) -> Result<Var> {
        let cat = g.concat_channels(&[xf1, xc1, d2])?;
        self.local.forward_relu(g, store, cat)
    }

    /// Per-pixel logits `W_L·X^L + b_L + W_G·X_G + b_G` and their softmax.
    pub fn score_fusion(&self, g: &mut Graph, store: &ParamStore, xl: Var, xg: Var) -> Result<Scores> {
        let sg = g.shape(xg);
        if sg.h() != 1 || sg.w() != 1 {
            return Err(Error::shape("score_fusion", format!("global feature {sg} is not 1x1")));
        }
        let local = self.score_local.forward(g, store, xl)?;
        let global = self.score_global.forward(g, store, xg)?;
        let logits = g.add_spatial(local, global)?;
        let probs = g.pixel_softmax2(logits)?;
        let saliency = g.slice_channels(probs, FOREGROUND, 1)?;
        Ok(Scores {
            logits,
            probs,
            saliency,
        })
    }
}

/// Bilinear ×2 upsampling of a saliency map.
pub fn predict_fullres(g: &mut Graph, saliency: Var) -> Result<Var> {
    g.bilinear_upsample(saliency, 2)
}
