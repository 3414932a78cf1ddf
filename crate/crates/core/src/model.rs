use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::NetworkConfig;
use crate::decoder::{contrast_feature, predict_fullres, Decoder, Scores};
use crate::edge::EdgeGuidance;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Every intermediate of one forward pass, as nodes on the caller's graph.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Side outputs `X_1..X_5`.
    pub sides: [Var; 5],
    pub condition: Option<Var>,
    /// Edge-modulated features `X^F_1..X^F_5`.
    pub modulated: [Var; 5],
    pub contrast: [Var; 5],
    /// `D_2..D_5` (index 0 is `D_2`).
    pub deconv: [Var; 4],
    pub local: Var,
    pub global: Var,
    pub scores: Scores,
    /// Saliency upsampled to the input resolution.
    pub fullres: Var,
}

impl Forward {
    pub fn saliency(&self) -> Var {
        self.scores.saliency
    }
}

#[derive(Clone, Debug)]
pub struct Enfnet {
    config: NetworkConfig,
    backbone: Backbone,
    edge: EdgeGuidance,
    decoder: Decoder,
}

impl Enfnet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(Enfnet {
            backbone: Backbone::new(&config)?,
            edge: EdgeGuidance::new(&config)?,
            decoder: Decoder::new(&config)?,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn edge_guidance(&self) -> &EdgeGuidance {
        &self.edge
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let init = self.config.weight_init();
        self.backbone.init(&mut store, init, &mut rng);
        self.edge.init(&mut store, init, self.config.init_std, &mut rng);
        self.decoder.init(&mut store, init, &mut rng);
        store
    }

    /// Runs the network on `image` (`[N,3,S,S]`) with edge map `edge`
    /// (`[N,1,S/2,S/2]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, edge: &Tensor) -> Result<Forward> {
        let img = g.constant(image.clone());
        let sf = self.backbone.forward(g, store, img)?;
        let global = self.backbone.global_block(g, store, sf.pooled5)?;

        let condition = if self.edge.is_active() {
            let e = g.constant(edge.clone());
            Some(self.edge.condition_network(g, store, e)?)
        } else {
            None
        };

        let mut modulated = Vec::with_capacity(5);
        let mut contrast = Vec::with_capacity(5);
        for (i, &x) in sf.levels.iter().enumerate() {
            let xf = self.edge.modulate(g, store, i + 1, condition, x)?;
            contrast.push(contrast_feature(g, xf)?);
            modulated.push(xf);
        }

        let mut deconv = [None; 4];
        let mut next = None;
        for level in (2..=5).rev() {
            let d = self
                .decoder
                .deconv_fuse(g, store, level, modulated[level - 1], contrast[level - 1], next)?;
            deconv[level - 2] = Some(d);
            next = Some(d);
        }
        let d2 = deconv[0].expect("D_2 computed");
        let local = self.decoder.local_feature(g, store, modulated[0], contrast[0], d2)?;
        let scores = self.decoder.score_fusion(g, store, local, global)?;
        let fullres = predict_fullres(g, scores.saliency)?;

        Ok(Forward {
            sides: sf.levels,
            condition,
            modulated: modulated.try_into().expect("five levels"),
            contrast: contrast.try_into().expect("five levels"),
            deconv: deconv.map(|d| d.expect("all deconvolutions computed")),
            local,
            global,
            scores,
            fullres,
        })
    }

    /// Full-resolution saliency for one image, without keeping the graph.
    pub fn predict(&self, store: &ParamStore, image: &Tensor, edge: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, image, edge)?;
        Ok(g.value(out.fullres).clone())
    }

    /// Rejects parameter stores whose names or shapes differ from this model's.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        self.init(0).check_compatible(store).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("checkpoint does not fit this model: {msg}")),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::extract_edge_map;
    use crate::tensor::Shape;

    #[test]
    fn desk_forward_shapes() {
        let net = Enfnet::new(NetworkConfig::desk()).unwrap();
        let store = net.init(0);
        let img = Tensor::full(Shape::new(1, 3, 96, 96), 0.5);
        let edge = extract_edge_map(&img).unwrap();
        let mut g = Graph::new();
        let f = net.forward(&mut g, &store, &img, &edge).unwrap();
        assert_eq!(g.shape(f.saliency()), Shape::new(1, 1, 48, 48));
        assert_eq!(g.shape(f.fullres), Shape::new(1, 1, 96, 96));
        let d: Vec<_> = f.deconv.iter().map(|&v| g.shape(v).h()).collect();
        assert_eq!(d, [48, 24, 12, 6]);
        let sum = g
            .value(f.scores.probs)
            .data()
            .chunks(48 * 48)
            .fold(vec![0.0; 48 * 48], |mut acc, c| {
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                acc
            });
        assert!(sum.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn egb_variants_have_nested_parameters() {
        let count = |k| {
            let net = Enfnet::new(NetworkConfig {
                egb_blocks: k,
                ..NetworkConfig::desk()
            })
            .unwrap();
            net.init(0).len()
        };
        let (zero, three, five) = (count(0), count(3), count(5));
        assert!(zero < three && three < five);
        // 4 condition convs + 4 convs per block, 2 tensors each
        assert_eq!(three - zero, 2 * (4 + 3 * 4));
        assert_eq!(five - three, 2 * (2 * 4));
    }

    #[test]
    fn foreign_checkpoint_rejected_with_shape() {
        let desk = Enfnet::new(NetworkConfig::desk()).unwrap();
        let other = Enfnet::new(NetworkConfig {
            side_channels: 16,
            ..NetworkConfig::desk()
        })
        .unwrap();
        let err = desk.check_params(&other.init(0)).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
        desk.check_params(&desk.init(5)).unwrap();
    }
}
