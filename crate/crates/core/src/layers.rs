use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// How convolution weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// `N(0, std²)` for every layer.
    Gaussian(f64),
    /// `N(0, 2 / fan_in)` with `fan_in = cin · kh · kw`.
    He,
}

/// A (possibly transposed) convolution whose weight and bias live in a
/// [`ParamStore`] under `<name>.weight` / `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub spec: ConvSpec,
    pub transpose: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            cin,
            cout,
            spec,
            transpose: false,
        }
    }

    pub fn transposed(name: impl Into<String>, cin: usize, cout: usize, spec: ConvSpec) -> Self {
        ConvLayer {
            transpose: true,
            ..Self::new(name, cin, cout, spec)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        let [kh, kw] = self.spec.kernel;
        if self.transpose {
            Shape::new(self.cin, self.cout, kh, kw)
        } else {
            Shape::new(self.cout, self.cin, kh, kw)
        }
    }

    pub fn init_std(&self, init: WeightInit) -> f64 {
        match init {
            WeightInit::Gaussian(std) => std,
            WeightInit::He => {
                let [kh, kw] = self.spec.kernel;
                (2.0 / (self.cin * kh * kw) as f64).sqrt()
            }
        }
    }

    /// Registers a random weight and a constant bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, init: WeightInit, bias: f64, rng: &mut R) {
        let std = self.init_std(init);
        store.insert(self.weight_name(), Tensor::randn(self.weight_shape(), std, rng));
        store.insert(self.bias_name(), Tensor::full(Shape::new(1, self.cout, 1, 1), bias));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        if self.transpose {
            g.conv2d_transpose(x, w, b, self.spec)
        } else {
            g.conv2d(x, w, b, self.spec)
        }
    }

    pub fn forward_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}
