//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every builder method evaluates its kernel eagerly, pushes a node holding
//! the result plus whatever the backward pass needs, and returns a [`Var`]
//! handle. Nodes only ever reference earlier nodes, so walking the tape
//! backwards from the terminal visits consumers before producers.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, SobelAxis};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPoolSame {
        x: Var,
        k: usize,
    },
    Bilinear {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x + b` with `b: [N, C, 1, 1]` broadcast over space.
    AddSpatial {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    AddScalar {
        x: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    Softmax2(Var),
    Sobel {
        x: Var,
        axis: SobelAxis,
    },
    Sum(Var),
    /// Binary cross-entropy of a probability map against a fixed target.
    CrossEntropy {
        p: Var,
        target: Tensor,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients from one reverse pass, indexed by node.
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Grads {
    /// Gradient of the terminal with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`; parameters the terminal does
    /// not depend on get zeros.
    pub fn for_params(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.zeros_like();
        for (name, var) in &self.params {
            if let (Some(g), Ok(slot)) = (self.wrt(*var), out.get_mut(name)) {
                *slot = g.clone();
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g).expect("gradient shape matches node"),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (e.g. an input under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for parameter `name`, registered on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.input(store.get(name)?.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), &spec)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d_transpose(self.value(x), self.value(w), self.value(b), &spec)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), k)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d_same(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = ops::avg_pool2d_same(self.value(x), k)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPoolSame { x, k }, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), h, w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Bilinear { x }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("bilinear_upsample", "factor must be at least 1"));
        }
        let s = self.shape(x);
        self.bilinear_resize(x, s.h() * factor, s.w() * factor)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no parts given"))?;
        let s0 = self.shape(first);
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if (s.n(), s.h(), s.w()) != (s0.n(), s0.h(), s0.w()) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("part {i} has shape {s}, expected N/H/W of {s0}"),
                ));
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.shape(p).c()).sum();
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.n() * total_c * plane);
        for n in 0..s0.n() {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().c() * plane;
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor::from_vec(Shape::new(s0.n(), total_c, s0.h(), s0.w()), data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("operand shapes differ: {} vs {}", ta.shape(), tb.shape()),
            ));
        }
        let out = ta.zip_map(tb, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_spatial(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sb != Shape::new(sx.n(), sx.c(), 1, 1) {
            return Err(Error::shape(
                "add_spatial",
                format!("bias {sb} does not broadcast over {sx}"),
            ));
        }
        let mut out = tx.clone();
        let plane = sx.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let v = tb.data()[i];
            chunk.iter_mut().for_each(|e| *e += v);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddSpatial { x, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sqrt(x), rg)
    }

    pub fn pixel_softmax2(&mut self, x: Var) -> Result<Var> {
        let out = ops::pixel_softmax2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax2(x), rg))
    }

    pub fn sobel(&mut self, x: Var, axis: SobelAxis) -> Var {
        let out = ops::sobel(self.value(x), axis);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sobel { x, axis }, rg)
    }

    /// Sum of all elements as a `[1,1,1,1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy `−[y·ln p + (1−y)·ln(1−p)]` with both
    /// probabilities clamped to `[eps, 1−eps]`.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.shape() != target.shape() {
            return Err(Error::shape(
                "cross_entropy",
                format!("prediction {} vs target {}", tp.shape(), target.shape()),
            ));
        }
        let clamp = |v: f64| v.clamp(eps, 1.0 - eps);
        let total: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let mut l = 0.0;
                if y != 0.0 {
                    l += y * clamp(p).ln();
                }
                if y != 1.0 {
                    l += (1.0 - y) * clamp(1.0 - p).ln();
                }
                l
            })
            .sum();
        let out = Tensor::scalar(-total / tp.numel() as f64);
        let rg = self.rg(&[p]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                p,
                target: target.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar terminal.
    pub fn backward(&self, terminal: Var) -> Result<Grads> {
        let t = self.value(terminal);
        if t.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar terminal, got shape {}",
                t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; terminal.0 + 1];
        grads[terminal.0] = Some(Tensor::ones(t.shape()));
        for i in (0..=terminal.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect::<BTreeMap<_, _>>();
        Ok(Grads {
            by_node: grads,
            params: params.into_iter().collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = ops::conv2d_backward(self.value(*x), self.value(*w), spec, g)?;
                self.acc_if(grads, *x, gx);
                self.acc_if(grads, *w, gw);
                let gb = gb.reshape(self.shape(*b))?;
                self.acc_if(grads, *b, gb);
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (gx, gw, gb) = ops::conv2d_transpose_backward(self.value(*x), self.value(*w), spec, g)?;
                self.acc_if(grads, *x, gx);
                self.acc_if(grads, *w, gw);
                let gb = gb.reshape(self.shape(*b))?;
                self.acc_if(grads, *b, gb);
            }
            Op::MaxPool { x, argmax } => {
                let gx = ops::max_pool2d_backward(self.shape(*x), argmax, g);
                self.acc_if(grads, *x, gx);
            }
            Op::AvgPoolSame { x, k } => {
                self.acc_if(grads, *x, ops::avg_pool2d_same_backward(g, *k));
            }
            Op::Bilinear { x } => {
                self.acc_if(grads, *x, ops::bilinear_resize_backward(self.shape(*x), g));
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    if self.needs(p) {
                        acc(grads, p, g.slice_channels(start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let mut gx = Tensor::zeros(sx);
                    let plane = sx.plane();
                    let len = g.shape().c() * plane;
                    for n in 0..sx.n() {
                        let dst = (n * sx.c() + start) * plane;
                        gx.data_mut()[dst..dst + len].copy_from_slice(&g.data()[n * len..(n + 1) * len]);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g.clone());
                self.acc_if(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g.clone());
                self.acc_if(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.needs(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.needs(*a) {
                    acc(grads, *a, g.zip_map(tb, |g, y| g / y)?);
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(tb, |q, y| q / y)?;
                    acc(grads, *b, g.zip_map(&q, |g, q| -g * q)?);
                }
            }
            Op::AddSpatial { x, b } => {
                self.acc_if(grads, *x, g.clone());
                if self.needs(*b) {
                    let plane = g.shape().plane();
                    let sums = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    acc(grads, *b, Tensor::from_vec(self.shape(*b), sums)?);
                }
            }
            Op::Scale { x, k } => self.acc_if(grads, *x, g.scale(*k)),
            Op::AddScalar { x } => self.acc_if(grads, *x, g.clone()),
            Op::Relu(x) => {
                if self.needs(*x) {
                    acc(
                        grads,
                        *x,
                        g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?,
                    );
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    acc(grads, *x, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?);
                }
            }
            Op::Sqrt(x) => {
                if self.needs(*x) {
                    acc(grads, *x, g.zip_map(&node.value, |g, y| g / (2.0 * y))?);
                }
            }
            Op::Softmax2(x) => {
                self.acc_if(grads, *x, ops::pixel_softmax2_backward(&node.value, g));
            }
            Op::Sobel { x, axis } => {
                self.acc_if(grads, *x, ops::sobel_backward(g, *axis));
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                self.acc_if(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::CrossEntropy { p, target, eps } => {
                if self.needs(*p) {
                    let tp = self.value(*p);
                    let scale = g.item()? / tp.numel() as f64;
                    let (lo, hi) = (*eps, 1.0 - eps);
                    let gp = tp.zip_map(target, |p, y| {
                        let mut d = 0.0;
                        if p > lo && p < hi {
                            d -= y / p;
                        }
                        let q = 1.0 - p;
                        if q > lo && q < hi {
                            d += (1.0 - y) / q;
                        }
                        d * scale
                    })?;
                    acc(grads, *p, gp);
                }
            }
        }
        Ok(())
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            acc(grads, v, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_twice_w() {
        let mut store = ParamStore::new();
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        store.insert("w", w.clone());
        let mut g = Graph::new();
        let v = g.param(&store, "w").unwrap();
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap().for_params(&store);
        assert_eq!(grads.get("w").unwrap(), &w.scale(2.0));
    }

    #[test]
    fn constant_terminal_gives_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(Shape::new(1, 1, 2, 2)));
        let mut g = Graph::new();
        let _ = g.param(&store, "w").unwrap();
        let c = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap().for_params(&store);
        assert_eq!(grads.get("w").unwrap(), &Tensor::zeros(Shape::new(1, 1, 2, 2)));
    }

    #[test]
    fn unreached_parameters_get_zero() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::ones(Shape::new(1, 1, 1, 2)));
        store.insert("unused", Tensor::ones(Shape::new(1, 1, 1, 3)));
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap().for_params(&store);
        assert_eq!(grads.get("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_terminal_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn concat_reports_mismatched_part() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(Shape::new(1, 2, 4, 4)));
        let b = g.input(Tensor::ones(Shape::new(1, 2, 4, 3)));
        let err = g.concat_channels(&[a, a, b]).unwrap_err().to_string();
        assert!(err.contains("part 2"), "{err}");
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x²
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[12.0]);
    }
}
