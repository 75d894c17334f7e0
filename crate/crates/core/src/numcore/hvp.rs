//! Hessian–vector products by central differences of gradients, and power
//! iteration for the Hessian spectral norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Value and gradient of a scalar function written against the tape.
pub fn value_and_grad<F>(f: F, theta: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(theta.to_vec()))?;
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Tape("value_and_grad needs a scalar output".into()));
    }
    let value = tape.value(y).data()[0];
    let grads = tape.backward(&[(y, Tensor::scalar(1.0))])?;
    Ok((value, grads.wrt(x).into_data()))
}

/// `(∇f(θ + h v) − ∇f(θ − h v)) / 2h`.
pub fn hvp<G>(mut grad: G, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return Err(Error::Hvp(format!("direction has {} entries, point has {}", v.len(), theta.len())));
    }
    let vmax = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let tmax = theta.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    if !(h > 0.0) || h * vmax <= 1e2 * f64::EPSILON * tmax {
        return Err(Error::Hvp(format!("step {h:e} is below the precision floor")));
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - h * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::Hvp("gradient length differs from parameter length".into()));
    }
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "hvp" });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    /// Estimated largest absolute eigenvalue.
    pub norm: f64,
    pub iterations: usize,
    pub vector: Vec<f64>,
}

/// Power iteration on a symmetric linear operator given as a matvec closure.
///
/// The estimate is `‖A v‖` for the normalized iterate, which converges to the
/// largest absolute eigenvalue even when `±λ` are both dominant.
pub fn power_iteration<M>(mut matvec: M, dim: usize, max_iters: usize, tol: f64, seed: u64) -> Result<SpectralEstimate>
where
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::Hvp("empty operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        let mut w = matvec(&v)?;
        let norm = l2(&w);
        if norm == 0.0 {
            return Ok(SpectralEstimate {
                norm: 0.0,
                iterations: it,
                vector: v,
            });
        }
        if (norm - prev).abs() <= tol * norm.max(1e-300) {
            return Ok(SpectralEstimate {
                norm,
                iterations: it,
                vector: v,
            });
        }
        prev = norm;
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
    }
    Err(Error::Hvp(format!("power iteration did not converge in {max_iters} iterations")))
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
