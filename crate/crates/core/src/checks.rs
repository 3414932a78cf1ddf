//! Named finite-difference checks for every differentiable operation and
//! for the end-to-end training loss of a small network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{InitScheme, NetworkConfig};
use crate::edge::{extract_edge_map, EdgeGuidance};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, finite_diff_check_params, project, FdOptions, FdReport};
use crate::graph::{Graph, Var};
use crate::loss::{boundary_map, iou_boundary_loss, total_loss, LossWeights};
use crate::model::Enfnet;
use crate::ops::{ConvSpec, Padding, SobelAxis};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

type Check = fn(u64) -> Result<FdReport>;

/// Check name, default instance count, check body.
const CHECKS: &[(&str, usize, Check)] = &[
    ("conv2d", 10, conv2d),
    ("conv2d_transpose", 10, conv2d_transpose),
    ("max_pool2d", 10, max_pool2d),
    ("avg_pool2d_same", 10, avg_pool2d_same),
    ("bilinear_resize", 10, bilinear_resize),
    ("concat_channels", 10, concat_channels),
    ("slice_channels", 10, slice_channels),
    ("add", 10, add),
    ("sub", 10, sub),
    ("mul", 10, mul),
    ("div", 10, div),
    ("add_spatial", 10, add_spatial),
    ("scale", 10, scale),
    ("add_scalar", 10, add_scalar),
    ("relu", 10, relu),
    ("tanh", 10, tanh),
    ("sqrt", 10, sqrt),
    ("softmax2", 10, softmax2),
    ("sobel", 10, sobel),
    ("sum", 10, sum),
    ("cross_entropy", 10, cross_entropy),
    ("boundary_map", 10, boundary),
    ("iou_boundary_loss", 10, iou),
    ("egb", 10, egb),
    ("total_loss", 10, loss_wrt_prediction),
    ("end_to_end", 2, end_to_end),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|c| c.0)
}

/// Runs check `name` over its default number of random instances and
/// returns the merged report.
pub fn run(name: &str) -> Result<FdReport> {
    let &(_, instances, f) = CHECKS
        .iter()
        .find(|c| c.0 == name)
        .ok_or_else(|| Error::Config(format!("unknown gradient check {name:?}")))?;
    let mut report = f(0)?;
    for seed in 1..instances as u64 {
        report.merge(f(seed)?);
    }
    Ok(report)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values bounded away from zero: magnitude in `[lo, 1]`, random sign.
fn away_from_zero(shape: Shape, lo: f64, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let m = r.random_range(lo..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// `Σ f(x) ⊙ r` for a random `r` so the whole Jacobian is exercised.
fn projected<F>(inputs: &[Tensor], r: &mut ChaCha8Rng, f: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.shape(out);
    let weights = normal(out_shape, r);
    finite_diff_check(
        |g, v| {
            let out = f(g, v)?;
            project(g, out, &weights)
        },
        inputs,
        &FdOptions::default(),
    )
}

fn conv2d(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let (k, stride) = [(3, 1), (3, 2), (1, 1), (5, 2)][seed as usize % 4];
    let padding = if seed.is_multiple_of(3) {
        Padding::Valid
    } else {
        Padding::Same
    };
    let spec = ConvSpec::new(k, stride, padding);
    let x = normal(Shape::new(1, 2, 6, 5), &mut r);
    let w = normal(Shape::new(3, 2, k, k), &mut r);
    let b = normal(Shape::new(1, 3, 1, 1), &mut r);
    projected(&[x, w, b], &mut r, |g, v| g.conv2d(v[0], v[1], v[2], spec))
}

fn conv2d_transpose(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let spec = if seed.is_multiple_of(2) {
        ConvSpec::same(5, 2).with_output_padding(1)
    } else {
        ConvSpec::same(3, 1)
    };
    let x = normal(Shape::new(1, 3, 3, 4), &mut r);
    let w = normal(Shape::new(3, 2, spec.kernel[0], spec.kernel[1]), &mut r);
    let b = normal(Shape::new(1, 2, 1, 1), &mut r);
    projected(&[x, w, b], &mut r, |g, v| g.conv2d_transpose(v[0], v[1], v[2], spec))
}

fn max_pool2d(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    // distinct values 0.01 apart keep every window's maximum unique
    let shape = Shape::new(1, 2, 4, 6);
    let mut vals: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut r);
    let x = Tensor::from_vec(shape, vals)?;
    projected(&[x], &mut r, |g, v| g.max_pool2d(v[0], 2))
}

fn avg_pool2d_same(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 5, 4), &mut r);
    projected(&[x], &mut r, |g, v| g.avg_pool2d_same(v[0], 3))
}

fn bilinear_resize(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 4), &mut r);
    let (h, w) = [(5, 7), (6, 8), (2, 3)][seed as usize % 3];
    projected(&[x], &mut r, |g, v| g.bilinear_resize(v[0], h, w))
}

fn concat_channels(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let a = normal(Shape::new(1, 2, 3, 3), &mut r);
    let b = normal(Shape::new(1, 1, 3, 3), &mut r);
    let c = normal(Shape::new(1, 3, 3, 3), &mut r);
    projected(&[a, b, c], &mut r, |g, v| g.concat_channels(v))
}

fn slice_channels(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 4, 3, 3), &mut r);
    let start = seed as usize % 3;
    projected(&[x], &mut r, |g, v| g.slice_channels(v[0], start, 2))
}

fn binary_inputs(seed: u64) -> (ChaCha8Rng, [Tensor; 2]) {
    let mut r = rng(seed);
    let s = Shape::new(1, 2, 3, 4);
    let a = normal(s, &mut r);
    let b = normal(s, &mut r);
    (r, [a, b])
}

fn add(seed: u64) -> Result<FdReport> {
    let (mut r, x) = binary_inputs(seed);
    projected(&x, &mut r, |g, v| g.add(v[0], v[1]))
}

fn sub(seed: u64) -> Result<FdReport> {
    let (mut r, x) = binary_inputs(seed);
    projected(&x, &mut r, |g, v| g.sub(v[0], v[1]))
}

fn mul(seed: u64) -> Result<FdReport> {
    let (mut r, x) = binary_inputs(seed);
    projected(&x, &mut r, |g, v| g.mul(v[0], v[1]))
}

fn div(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let a = normal(Shape::new(1, 2, 3, 4), &mut r);
    let b = away_from_zero(Shape::new(1, 2, 3, 4), 0.3, &mut r);
    projected(&[a, b], &mut r, |g, v| g.div(v[0], v[1]))
}

fn add_spatial(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 3, 4, 4), &mut r);
    let b = normal(Shape::new(1, 3, 1, 1), &mut r);
    projected(&[x, b], &mut r, |g, v| g.add_spatial(v[0], v[1]))
}

fn scale(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 3), &mut r);
    let k = r.random_range(-2.0..2.0);
    projected(&[x], &mut r, |g, v| Ok(g.scale(v[0], k)))
}

fn add_scalar(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 3), &mut r);
    let c = r.random_range(-2.0..2.0);
    projected(&[x], &mut r, |g, v| Ok(g.add_scalar(v[0], c)))
}

fn relu(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    // the kink at 0 is excluded: every |x| ≥ 1e-3
    let x = away_from_zero(Shape::new(1, 2, 4, 4), 1e-3, &mut r);
    projected(&[x], &mut r, |g, v| Ok(g.relu(v[0])))
}

fn tanh(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 3), &mut r);
    projected(&[x], &mut r, |g, v| Ok(g.tanh(v[0])))
}

fn sqrt(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(Shape::new(1, 2, 3, 3), 0.1, 3.0, &mut r);
    projected(&[x], &mut r, |g, v| Ok(g.sqrt(v[0])))
}

fn softmax2(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 4), &mut r).scale(2.0);
    projected(&[x], &mut r, |g, v| g.pixel_softmax2(v[0]))
}

fn sobel(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 4, 5), &mut r);
    let axis = if seed.is_multiple_of(2) {
        SobelAxis::X
    } else {
        SobelAxis::Y
    };
    projected(&[x], &mut r, |g, v| Ok(g.sobel(v[0], axis)))
}

fn sum(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = normal(Shape::new(1, 2, 3, 3), &mut r);
    finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], &FdOptions::default())
}

fn random_mask(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn cross_entropy(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 1, 4, 4);
    let p = Tensor::uniform(shape, 0.05, 0.95, &mut r);
    let y = random_mask(shape, &mut r);
    finite_diff_check(|g, v| g.cross_entropy(v[0], &y, 1e-7), &[p], &FdOptions::default())
}

fn boundary(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(Shape::new(1, 1, 6, 6), 0.0, 1.0, &mut r);
    projected(&[x], &mut r, |g, v| boundary_map(g, v[0]))
}

fn iou(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let a = Tensor::uniform(Shape::new(1, 1, 5, 5), 0.0, 1.0, &mut r);
    let b = Tensor::uniform(Shape::new(1, 1, 5, 5), 0.0, 1.0, &mut r);
    finite_diff_check(|g, v| iou_boundary_loss(g, v[0], v[1]), &[a, b], &FdOptions::default())
}

fn loss_wrt_prediction(seed: u64) -> Result<FdReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 1, 6, 6);
    let p = Tensor::uniform(shape, 0.05, 0.95, &mut r);
    let y = random_mask(shape, &mut r);
    let w = LossWeights::default();
    finite_diff_check(
        |g, v| Ok(total_loss(g, v[0], &y, &w)?.total),
        &[p],
        &FdOptions::default(),
    )
}

fn tiny_config(egb_blocks: usize) -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        block_channels: [4, 6, 8, 8, 8],
        side_channels: 4,
        fuse_channels: 4,
        global_kernels: vec![1],
        egb_blocks,
        init: InitScheme::He,
        init_std: 0.3,
        ..NetworkConfig::desk()
    }
}

/// One edge guidance block (level cycling 1..=5) with respect to its input
/// features, condition features and branch parameters.
fn egb(seed: u64) -> Result<FdReport> {
    let cfg = NetworkConfig {
        input_size: 64,
        global_kernels: vec![2],
        ..tiny_config(5)
    };
    let level = seed as usize % 5 + 1;
    let eg = EdgeGuidance::new(&cfg)?;
    let block = eg.block(level).expect("five blocks");
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    eg.init(&mut store, cfg.weight_init(), cfg.init_std, &mut r);
    let n = cfg.level_size(level);
    let x = normal(Shape::new(1, cfg.side_channels, n, n), &mut r);
    let cond = Tensor::uniform(
        Shape::new(1, cfg.side_channels, cfg.output_size(), cfg.output_size()),
        0.0,
        1.0,
        &mut r,
    );
    let proj = normal(x.shape(), &mut r);
    let opts = FdOptions {
        max_coords: Some(24),
        seed,
        ..FdOptions::default()
    };

    let mut report = finite_diff_check(
        |g, v| {
            let out = block.forward(g, &store, v[1], v[0])?;
            project(g, out, &proj)
        },
        &[x.clone(), cond.clone()],
        &opts,
    )?;
    let mut own = ParamStore::new();
    for l in block.gamma.iter().chain(&block.beta) {
        for name in [l.weight_name(), l.bias_name()] {
            own.insert(name.clone(), store.get(&name)?.clone());
        }
    }
    report.merge(finite_diff_check_params(
        |g, s| {
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            let out = block.forward(g, s, cv, xv)?;
            project(g, out, &proj)
        },
        &own,
        &opts,
    )?);
    Ok(report)
}

/// Total loss of a narrow 32×32 network with respect to a sample of every
/// parameter tensor.
fn end_to_end(seed: u64) -> Result<FdReport> {
    let net = Enfnet::new(tiny_config(5))?;
    let mut store = net.init(seed);
    let mut r = rng(seed);
    // zero biases over flat input regions put whole feature maps exactly on
    // the relu kink; jitter them so the check runs at a generic point
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            let noise = Tensor::randn(t.shape(), 0.05, &mut r);
            t.add_assign(&noise)?;
        }
    }
    let image = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut r);
    let edge = extract_edge_map(&image)?;
    let gt = random_mask(Shape::new(1, 1, 16, 16), &mut r);
    let weights = LossWeights::default();
    // below ~1e-6 the central difference of an O(1) loss is dominated by
    // round-off (≈ 1e-11 absolute at eps = 1e-5), not by the gradient
    let opts = FdOptions {
        max_coords: Some(3),
        seed,
        min_grad: 1e-6,
        // a coordinate whose ±eps probe crosses a relu or max-pool switch
        // has no usable central difference; below this tolerance any
        // crossing moves it by less than 1e-4
        kink_tol: Some(2e-4),
        ..FdOptions::default()
    };
    finite_diff_check_params(
        |g, s| {
            let f = net.forward(g, s, &image, &edge)?;
            Ok(total_loss(g, f.saliency(), &gt, &weights)?.total)
        },
        &store,
        &opts,
    )
}
