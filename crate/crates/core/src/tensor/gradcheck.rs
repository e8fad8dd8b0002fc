//! Central finite-difference oracles for the tape.
//!
//! These never look at the backward implementation: the numeric side only
//! evaluates forward passes at perturbed points.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Which parameter coordinates [`param_grad_check`] perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most this many coordinates per parameter tensor, drawn with the seed.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub params: Vec<ParamCheck>,
}

impl ParamCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare the tape gradient of a loss with respect to every parameter of
/// `store` against central differences. `loss` rebuilds the forward pass on
/// a fresh tape bound to whatever store it is given.
pub fn param_grad_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    eps: f64,
    coords: Coordinates,
) -> Result<ParamCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let y = loss(&mut tape)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let y = loss(&mut tape)?;
        scalar_of(&tape, y)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(match coords {
        Coordinates::Sample { seed, .. } => seed,
        Coordinates::All => 0,
    });
    let mut work = store.clone();
    let mut report = Vec::new();
    let ids: Vec<ParamId> = store.param_ids().collect();
    for id in ids {
        let n = store.param(id).value.len();
        let zeros = Tensor::zeros(store.param(id).value.shape());
        let analytic = grads.param(id).unwrap_or(&zeros);
        let picked: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample { per_tensor, .. } if per_tensor >= n => (0..n).collect(),
            Coordinates::Sample { per_tensor, .. } => sample(&mut rng, n, per_tensor).into_vec(),
        };
        let mut worst = 0.0f64;
        for &k in &picked {
            let orig = work.param(id).value.data()[k];
            work.param_mut(id).value.data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.param_mut(id).value.data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.param_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        report.push(ParamCheck {
            name: store.param(id).name.clone(),
            checked: picked.len(),
            max_rel_err: worst,
        });
    }
    Ok(ParamCheckReport { params: report })
}
