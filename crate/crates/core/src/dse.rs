//! Deformable squeeze-and-excitation (DSE) block and its parts.
//!
//! ```text
//! F   = exit_1x1(deform_3x3(relu(entry_1x1(x))))
//! out = x + local_gate(se(F))
//! ```
//!
//! The deformable 3×3 conv predicts `(dy, dx)` for each of its nine taps from
//! the bottleneck features; SE rescales channels by `sigmoid(W2·relu(W1·mean))`;
//! the local gate rescales positions by `sigmoid(conv1x1(·))`.

use crate::error::{PdseError, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

pub const DEFORM_KERNEL: usize = 3;
/// Offset channels predicted per position: a `(dy, dx)` pair per kernel tap.
pub const OFFSET_CHANNELS: usize = 2 * DEFORM_KERNEL * DEFORM_KERNEL;

#[derive(Clone, Debug)]
pub struct DeformableConv {
    pub offset_conv: Conv2d,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl DeformableConv {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        let offset_conv = b.conv(
            &format!("{name}.offset_conv"),
            OFFSET_CHANNELS,
            in_c,
            DEFORM_KERNEL,
            1,
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        let weight = b.tensor(
            &format!("{name}.weight"),
            &[out_c, in_c, DEFORM_KERNEL, DEFORM_KERNEL],
            Init::Kaiming,
            true,
        )?;
        let bias = Some(b.tensor(&format!("{name}.bias"), &[out_c], Init::Zeros, true)?);
        Ok(Self {
            offset_conv,
            weight,
            bias,
            stride: 1,
            pad: 1,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let off = self.offset_conv.forward(g, store, x)?;
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        deformable_conv2d(g, x, off, w, b, self.stride, self.pad)
    }
}

/// Deformable convolution with an explicit offset map (`N × 18 × Ho × Wo`).
pub fn deformable_conv2d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    offsets: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let off_c = g.shape(offsets).get(1).copied().unwrap_or(0);
    if off_c != OFFSET_CHANNELS {
        return Err(PdseError::Config(format!(
            "offset predictor must emit {OFFSET_CHANNELS} channels, got {off_c}"
        )));
    }
    g.deform_conv2d(x, offsets, weight, bias, stride, pad)
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SeBlock {
    /// `W2` starts at zero, so a fresh block scales every channel by exactly 0.5.
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(PdseError::Config(format!(
                "SE reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: b.tensor(&format!("{name}.w1"), &[hidden, channels], Init::Kaiming, true)?,
            b1: b.tensor(&format!("{name}.b1"), &[hidden], Init::Zeros, true)?,
            w2: b.tensor(&format!("{name}.w2"), &[channels, hidden], Init::Zeros, true)?,
            b2: b.tensor(&format!("{name}.b2"), &[channels], Init::Zeros, true)?,
        })
    }

    /// Per-channel mean, `[N, C]`.
    pub fn squeeze<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
        if c != self.channels {
            return Err(PdseError::Config(format!(
                "SE block configured for {} channels, input has {c}",
                self.channels
            )));
        }
        let pooled = g.global_avg_pool(x)?;
        g.reshape(pooled, &[n, c])
    }

    /// Channel weights in (0, 1), `[N, C]`.
    pub fn excitation<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, squeezed: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.linear(squeezed, w1, Some(b1))?;
        let h = g.relu(h)?;
        let e = g.linear(h, w2, Some(b2))?;
        g.sigmoid(e)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.squeeze(g, x)?;
        let e = self.excitation(g, store, s)?;
        se_reweight(g, x, e)
    }
}

/// Scales channel `c` of `x` by `excitation[n, c]`.
pub fn se_reweight<T: Real>(g: &mut Graph<T>, x: Var, excitation: Var) -> Result<Var> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let e = g.reshape(excitation, &[n, c, 1, 1])?;
    g.mul(x, e)
}

/// Spatial gate: `x · sigmoid(conv1x1(x))`, the gate broadcast over channels.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub conv: Conv2d,
}

impl LocalAttention {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: b.conv(name, 1, channels, 1, 1, Init::Zeros, Some(Init::Zeros))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(g, store, x)?;
        let gate = g.sigmoid(logits)?;
        g.mul(x, gate)
    }
}

#[derive(Clone, Debug)]
pub struct DseBlock {
    pub channels: usize,
    pub entry: Conv2d,
    pub deform: DeformableConv,
    pub exit: Conv2d,
    pub se: SeBlock,
    pub local: LocalAttention,
}

impl DseBlock {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(PdseError::Config(format!(
                "DSE block needs an even channel count, got {channels}"
            )));
        }
        let mid = channels / 2;
        Ok(Self {
            channels,
            entry: b.conv(&format!("{name}.entry"), mid, channels, 1, 1, Init::Kaiming, Some(Init::Zeros))?,
            deform: DeformableConv::build(b, &format!("{name}.deform"), mid, mid)?,
            exit: b.conv(&format!("{name}.exit"), channels, mid, 1, 1, Init::Kaiming, Some(Init::Zeros))?,
            se: SeBlock::build(b, &format!("{name}.se"), channels, se_reduction)?,
            local: LocalAttention::build(b, &format!("{name}.local"), channels)?,
        })
    }

    /// The residual branch before attention.
    pub fn modeling<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(PdseError::Config(format!(
                "DSE block configured for {} channels, input has {c}",
                self.channels
            )));
        }
        let h = self.entry.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.deform.forward(g, store, h)?;
        self.exit.forward(g, store, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let f = self.modeling(g, store, x)?;
        let global = self.se.forward(g, store, f)?;
        let fused = self.local.forward(g, store, global)?;
        g.add(x, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_offsets_reduce_to_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::<f64>::new(false);
        let xv = g.constant(x);
        let wv = g.constant(w);
        let off = g.constant(Tensor::zeros(&[2, 18, 7, 6]));
        let d = deformable_conv2d(&mut g, xv, off, wv, None, 1, 1).unwrap();
        let c = g.conv2d(xv, wv, None, 1, 1).unwrap();
        assert!(g.value(d).max_abs_diff(g.value(c)) < 1e-12);
    }

    #[test]
    fn wrong_offset_channels_is_config_error() {
        let mut g = Graph::<f64>::new(false);
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let off = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        assert!(matches!(
            deformable_conv2d(&mut g, x, off, w, None, 1, 1),
            Err(PdseError::Config(_))
        ));
    }

    #[test]
    fn se_rejects_indivisible_ratio() {
        let mut store = ParamStore::<f64>::new();
        let mut b = ParamBuilder::init(&mut store, 0);
        assert!(SeBlock::build(&mut b, "se", 10, 4).is_err());
    }

    #[test]
    fn dse_shape_is_preserved() {
        let mut store = ParamStore::<f32>::new();
        let block = DseBlock::build(&mut ParamBuilder::init(&mut store, 3), "dse.p3", 64, 16).unwrap();
        let mut g = Graph::<f32>::new(false);
        let x = g.constant(Tensor::full(&[2, 64, 32, 32], 0.1));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 32, 32]);
    }
}
