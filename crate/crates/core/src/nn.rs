//! Parameterized layers shared by the detector modules.

use crate::error::{PdseError, Result};
use crate::params::{init_tensor, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Batch-norm momentum (fraction of the running statistic kept per update).
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Creates parameters (init mode) or looks up existing ones by name (bind mode),
/// so model structure is declared exactly once.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    bind: bool,
    touched: usize,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn init(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            seed,
            bind: false,
            touched: 0,
        }
    }

    pub fn bind(store: &'a mut ParamStore<T>) -> Self {
        Self {
            store,
            seed: 0,
            bind: true,
            touched: 0,
        }
    }

    /// Number of parameters declared so far.
    pub fn declared(&self) -> usize {
        self.touched
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        self.touched += 1;
        if self.bind {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| PdseError::Config(format!("missing parameter {name}")))?;
            let p = self.store.get(id);
            if p.value.shape() != shape {
                return Err(PdseError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
            Ok(id)
        } else {
            let value = init_tensor(shape, init, self.seed, name);
            self.store.insert(name, value, trainable)
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        init: Init,
        bias: Option<Init>,
    ) -> Result<Conv2d> {
        let weight = self.tensor(&format!("{name}.weight"), &[out_c, in_c, k, k], init, true)?;
        let bias = match bias {
            Some(b) => Some(self.tensor(&format!("{name}.bias"), &[out_c], b, true)?),
            None => None,
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            gamma: self.tensor(&format!("{name}.gamma"), &[c], Init::Const(1.0), true)?,
            beta: self.tensor(&format!("{name}.beta"), &[c], Init::Zeros, true)?,
            running_mean: self.tensor(&format!("{name}.running_mean"), &[c], Init::Zeros, false)?,
            running_var: self.tensor(&format!("{name}.running_var"), &[c], Init::Const(1.0), false)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            &store.get(self.running_mean).value,
            &store.get(self.running_var).value,
            Some((self.running_mean, self.running_var)),
            BN_EPS,
        )
    }
}
