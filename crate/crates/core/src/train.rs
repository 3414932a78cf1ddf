//! Adam training loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hflip_augment, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{aggregate, MetricsRecord};
use crate::model::Enfnet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Adds a mirrored copy of every sample to each epoch.
    pub augment: bool,
    /// Write a checkpoint after every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            weights: LossWeights::default(),
            augment: true,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ((b1, b2), (lr, eps)) = ((self.beta1, self.beta2), (self.lr, self.eps));
        for ((name, p), ((_, m), (_, v))) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {} does not match parameter {name} {}", g.shape(), p.shape()),
                ));
            }
            let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, (m, v)), &g) in it.zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub ce_loss: f64,
    pub boundary_loss: f64,
    pub total_loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,ce_loss,boundary_loss,total_loss";

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.epoch, r.ce_loss, r.boundary_loss, r.total_loss
        );
    }
    out
}

/// Loss terms and parameter gradients for one sample.
pub fn loss_and_grads(
    net: &Enfnet,
    store: &ParamStore,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<([f64; 3], ParamStore)> {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, store, &sample.image, &sample.edge)?;
    let terms = total_loss(&mut g, fwd.saliency(), &sample.gt, weights)?;
    let values = [
        g.value(terms.cross_entropy).item()?,
        g.value(terms.boundary).item()?,
        g.value(terms.total).item()?,
    ];
    let grads = g.backward(terms.total)?.for_params(store);
    Ok((values, grads))
}

pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    /// Emitted after each completed epoch (1-based).
    EpochEnd {
        epoch: usize,
        params: &'a ParamStore,
    },
}

/// Trains `params` in place. Every epoch visits the samples (and their
/// mirrors when augmenting) in an order shuffled by a generator seeded once
/// from `cfg.seed`; each step averages the gradients of `batch_size` of
/// them and applies one Adam update.
pub fn train<F>(
    net: &Enfnet,
    params: &mut ParamStore,
    data: &[Sample],
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    net.check_params(params)?;
    let flipped: Vec<Sample> = if cfg.augment {
        data.iter().map(hflip_augment).collect()
    } else {
        Vec::new()
    };
    let pool: Vec<&Sample> = data.iter().chain(&flipped).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params, cfg.learning_rate);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = log.len() + 1;
            let mut sums = [0.0; 3];
            let mut acc = params.zeros_like();
            for &i in batch {
                let (values, grads) = loss_and_grads(net, params, pool[i], &cfg.weights)?;
                if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                    let term = ["cross-entropy", "boundary", "total"][bad];
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("{term} loss is {} on sample {}", values[bad], pool[i].id),
                    });
                }
                for (k, v) in values.iter().enumerate() {
                    sums[k] += v;
                }
                for ((name, a), (_, g)) in acc.iter_mut().zip(grads.iter()) {
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            step,
                            detail: format!("gradient of {name} is not finite on sample {}", pool[i].id),
                        });
                    }
                    a.add_assign(g)?;
                }
            }
            let n = batch.len() as f64;
            if batch.len() > 1 {
                for (_, a) in acc.iter_mut() {
                    *a = a.scale(1.0 / n);
                }
            }
            adam.update(params, &acc)?;
            let entry = StepLog {
                step,
                epoch,
                ce_loss: sums[0] / n,
                boundary_loss: sums[1] / n,
                total_loss: sums[2] / n,
            };
            log.push(entry);
            hook(TrainEvent::Step(&entry))?;
        }
        hook(TrainEvent::EpochEnd { epoch, params })?;
    }
    Ok(log)
}

/// Full-resolution predictions for every sample.
pub fn predict_all(net: &Enfnet, params: &ParamStore, data: &[Sample]) -> Result<Vec<Tensor>> {
    data.iter().map(|s| net.predict(params, &s.image, &s.edge)).collect()
}

/// Metrics of the full-resolution predictions against `gt_full`.
pub fn evaluate(net: &Enfnet, params: &ParamStore, data: &[Sample]) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let preds = predict_all(net, params, data)?;
    aggregate(preds.iter().zip(data.iter().map(|s| &s.gt_full)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::edge::extract_edge_map;
    use crate::ops;
    use crate::tensor::Shape;

    fn tiny_net() -> Enfnet {
        Enfnet::new(NetworkConfig {
            input_size: 32,
            block_channels: [3, 4, 4, 4, 4],
            side_channels: 4,
            fuse_channels: 4,
            global_kernels: vec![1],
            init: crate::config::InitScheme::Gaussian,
            init_std: 0.1,
            ..NetworkConfig::desk()
        })
        .unwrap()
    }

    fn square_sample(size: usize) -> Sample {
        let (image, mask) = crate::data::synthetic_square(size);
        Sample {
            id: "sq".into(),
            edge: extract_edge_map(&image).unwrap(),
            gt: ops::nearest_resize(&mask, size / 2, size / 2).unwrap(),
            gt_full: mask,
            image,
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let mut g = ParamStore::new();
        g.insert(
            "w",
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -4.0, 0.0]).unwrap(),
        );
        let mut adam = Adam::new(&p, 0.1);
        adam.update(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - 2.1).abs() < 1e-7);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let net = tiny_net();
        let mut p = net.init(1);
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..3 {
            adam.update(&mut p, &before.zeros_like()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let net = tiny_net();
        let mut p = net.init(2);
        let before = p.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let log = train(&net, &mut p, &[square_sample(32)], &cfg, |_| Ok(())).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let net = tiny_net();
        let data = [square_sample(32)];
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            augment: false,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = net.init(3);
            let log = train(&net, &mut p, &data, &cfg, |_| Ok(())).unwrap();
            (p, log)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(loss_csv(&l1), loss_csv(&l2));
        assert_eq!(p1, p2);
        assert!(l1.last().unwrap().total_loss < l1[0].total_loss);
    }

    #[test]
    fn hook_sees_epochs_and_batches() {
        let net = tiny_net();
        let mut p = net.init(4);
        let data = [square_sample(32), square_sample(32)];
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut epochs = Vec::new();
        let log = train(&net, &mut p, &data, &cfg, |e| {
            if let TrainEvent::EpochEnd { epoch, .. } = e {
                epochs.push(epoch);
            }
            Ok(())
        })
        .unwrap();
        // four samples per epoch with mirrors, batches of 3 and 1
        assert_eq!(log.len(), 4);
        assert_eq!(epochs, [1, 2]);
        assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 1, 2, 2]);
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let net = tiny_net();
        let mut p = net.init(0);
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&net, &mut p, &[square_sample(32)], &bad, |_| Ok(())).is_err());
        assert!(train(&net, &mut p, &[], &TrainConfig::default(), |_| Ok(())).is_err());
    }

    #[test]
    fn nan_parameter_aborts_with_step() {
        let net = tiny_net();
        let mut p = net.init(0);
        p.get_mut("decoder.score_local.bias").unwrap().data_mut()[0] = f64::NAN;
        let err = train(&net, &mut p, &[square_sample(32)], &TrainConfig::default(), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    }

    #[test]
    fn evaluate_is_pure_and_in_range() {
        let net = tiny_net();
        let p = net.init(5);
        let data = [square_sample(32)];
        let a = evaluate(&net, &p, &data).unwrap();
        let b = evaluate(&net, &p, &data).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.max_f) && (0.0..=1.0).contains(&a.mae));
    }
}
