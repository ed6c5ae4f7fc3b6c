//! Central finite-difference checks of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probes {
    All,
    /// Up to `count` distinct coordinates per input, drawn with `seed`.
    Random { count: usize, seed: u64 },
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar produced by `f`, over the probed coordinates of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, probes: Probes) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape("grad_check closure must return a scalar"));
    }
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match probes {
            Probes::All => (0..n).collect(),
            Probes::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let zeros;
        let analytic = match g.grad(v) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(inputs[i].shape());
                &zeros
            }
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
    }
    Ok(worst)
}
