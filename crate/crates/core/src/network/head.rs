use crate::error::Result;
use crate::nn::{Conv2d, ParamBuilder};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// A stack of 3×3 conv + ReLU layers and a 3×3 output conv, run with the same
/// weights on every pyramid level.
#[derive(Clone, Debug)]
pub struct Subnet {
    hidden: Vec<Conv2d>,
    out: Conv2d,
}

impl Subnet {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_c: usize,
        width: usize,
        depth: usize,
        out_c: usize,
        out_bias: f64,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(depth);
        let mut c = in_c;
        for i in 0..depth {
            hidden.push(b.conv(&format!("{name}.conv{i}"), width, c, 3, 1, Init::Kaiming, Some(Init::Zeros))?);
            c = width;
        }
        let out = b.conv(
            &format!("{name}.out"),
            out_c,
            c,
            3,
            1,
            Init::Normal(0.01),
            Some(Init::Const(out_bias)),
        )?;
        Ok(Self { hidden, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.hidden {
            h = conv.forward(g, store, h)?;
            h = g.relu(h)?;
        }
        self.out.forward(g, store, h)
    }
}

/// `−ln((1 − π)/π)`: the logit whose sigmoid is the foreground prior `π`.
pub fn prior_bias(pi: f64) -> f64 {
    -((1.0 - pi) / pi).ln()
}
