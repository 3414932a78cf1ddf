//! Central-difference gradient checks against reverse accumulation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Parameter checks only sample coordinates whose reverse-mode gradient
    /// is at least this large in magnitude.
    pub min_grad: f64,
    /// Parameter checks skip coordinates whose one-sided slopes
    /// `(f(x+ε) − f(x)) / ε` and `(f(x) − f(x−ε)) / ε` disagree by more than
    /// this fraction of the larger one. A single kink inside `[x−ε, x+ε]`
    /// biases the central difference by at most half that disagreement.
    pub kink_tol: Option<f64>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            min_grad: 0.0,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates dropped because a kink lies within `ε` of them.
    pub kinks_skipped: usize,
    /// Tensor name (or input index) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl FdReport {
    fn new() -> Self {
        FdReport {
            max_rel_error: 0.0,
            coords_checked: 0,
            kinks_skipped: 0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((name.to_string(), i));
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.coords_checked += other.coords_checked;
        self.kinks_skipped += other.kinks_skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn coords(len: usize, opts: &FdOptions, salt: u64) -> Vec<usize> {
    sample_from((0..len).collect(), opts, salt)
}

fn sample_from(candidates: Vec<usize>, opts: &FdOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < candidates.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => candidates,
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item()
}

/// Checks `f(inputs)` (which must build a scalar) against central differences
/// in every input coordinate.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = FdReport::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let name = format!("input{k}");
        for i in coords(inputs[k].numel(), opts, k as u64) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(&name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Like [`finite_diff_check`] but perturbs named parameters of `store`.
pub fn finite_diff_check_params<F>(f: F, store: &ParamStore, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base = scalar_of(&g, out)?;
    let grads = g.backward(out)?.for_params(store);

    let mut report = FdReport::new();
    let mut work = store.clone();
    for (k, (name, t)) in store.iter().enumerate() {
        let analytic = grads.get(name)?;
        let candidates = (0..t.numel())
            .filter(|&i| analytic.data()[i].abs() >= opts.min_grad)
            .collect();
        for i in sample_from(candidates, opts, k as u64) {
            let orig = t.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            if let Some(tol) = opts.kink_tol {
                let up = (plus - base) / opts.eps;
                let down = (base - minus) / opts.eps;
                if (up - down).abs() > tol * up.abs().max(down.abs()).max(1e-8) {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            report.record(name, i, analytic.data()[i], (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued node to a scalar `Σ out ⊙ r` so its full
/// Jacobian participates in a check.
pub fn project(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    Ok(g.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvSpec;
    use crate::tensor::Shape;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn conv2d_on_4x4_passes() {
        let mut r = rng(1);
        let x = Tensor::uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut r);
        let w = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut r);
        let b = Tensor::uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, &mut r);
        let proj = Tensor::uniform(Shape::new(1, 3, 4, 4), -1.0, 1.0, &mut r);
        let rep = finite_diff_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], ConvSpec::same(3, 1))?;
                project(g, y, &proj)
            },
            &[x, w, b],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert_eq!(rep.coords_checked, 32 + 54 + 3);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut r = rng(2);
        let mut x = Tensor::uniform(Shape::new(1, 1, 5, 5), -1.0, 1.0, &mut r);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v = 0.5
            }
        });
        let proj = Tensor::uniform(x.shape(), -1.0, 1.0, &mut r);
        let rep = finite_diff_check(
            |g, v| {
                let y = g.relu(v[0]);
                project(g, y, &proj)
            },
            &[x],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4);
    }

    #[test]
    fn concat_is_exact() {
        let mut r = rng(3);
        let a = Tensor::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut r);
        let b = Tensor::uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut r);
        let proj = Tensor::uniform(Shape::new(1, 3, 3, 3), -1.0, 1.0, &mut r);
        let rep = finite_diff_check(
            |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                project(g, y, &proj)
            },
            &[a, b],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::ones(Shape::new(1, 1, 10, 10));
        let opts = FdOptions {
            max_coords: Some(7),
            ..FdOptions::default()
        };
        let rep = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], &opts).unwrap();
        assert_eq!(rep.coords_checked, 7);
    }
}
