use rand::Rng;

use crate::error::Result;
use crate::tensor::{BufferId, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How BatchNorm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    TrainUntracked,
    /// Frozen running statistics.
    Eval,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, 3, 3],
            fan_in_bound(c_in * 9),
            rng,
        )?;
        let bias = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[c_out]), true)?;
        Ok(Conv2d { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, b, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            scale: store.add_param(
                &format!("{name}.scale"),
                Tensor::full(&[channels], T::ONE),
                true,
            )?,
            shift: store.add_param(&format!("{name}.shift"), Tensor::zeros(&[channels]), true)?,
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::ONE),
            )?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mode: BnMode) -> Result<Var> {
        let (g, b) = (tape.param(self.scale), tape.param(self.shift));
        if mode == BnMode::Eval {
            let mean = tape.buffer(self.running_mean).data().to_vec();
            let var = tape.buffer(self.running_var).data().to_vec();
            return Ok(tape.batch_norm(x, g, b, Some((&mean, &var)), BN_EPS)?.0);
        }
        let (y, stats) = tape.batch_norm(x, g, b, None, BN_EPS)?;
        if mode == BnMode::Train {
            let stats = stats.expect("training-mode batch norm reports statistics");
            let m = T::from_f64(BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| (T::ONE - m) * o + m * n)
                    .collect();
                Tensor::new(old.shape(), data).expect("running statistics keep their shape")
            };
            let mean = blend(tape.buffer(self.running_mean), &stats.mean);
            let var = blend(tape.buffer(self.running_var), &stats.var_unbiased);
            tape.record_buffer(self.running_mean, mean);
            tape.record_buffer(self.running_var, var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight` is `[out, in]`; a zero-initialized layer starts as the
    /// constant zero map.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = if zero_init {
            store.add_param(&wname, Tensor::zeros(&[d_out, d_in]), true)?
        } else {
            store.add_uniform(&wname, &[d_out, d_in], fan_in_bound(d_in), rng)?
        };
        let bias = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[d_out]), true)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.linear(x, w, Some(b))
    }
}

/// conv3×3 → BN → ReLU, optionally followed by 2×2 max pooling.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mode: BnMode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        Ok(tape.relu(y))
    }
}
