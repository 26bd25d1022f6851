use crate::error::{PdseError, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamBuilder};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Real, Var};

use super::ModelConfig;

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        conv: &str,
        bn: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: b.conv(conv, out_c, in_c, k, stride, Init::Kaiming, None)?,
            bn: b.batch_norm(bn, out_c)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        self.bn.forward(g, store, h)
    }
}

/// Basic (two 3×3) or bottleneck (1×1, 3×3, 1×1) residual block.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    branch: Vec<ConvBn>,
    projection: Option<ConvBn>,
}

impl ResidualBlock {
    fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bottleneck: bool,
    ) -> Result<Self> {
        let branch = if bottleneck {
            let mid = (out_c / 4).max(1);
            vec![
                ConvBn::build(b, &format!("{name}.conv1"), &format!("{name}.bn1"), mid, in_c, 1, 1)?,
                ConvBn::build(b, &format!("{name}.conv2"), &format!("{name}.bn2"), mid, mid, 3, stride)?,
                ConvBn::build(b, &format!("{name}.conv3"), &format!("{name}.bn3"), out_c, mid, 1, 1)?,
            ]
        } else {
            vec![
                ConvBn::build(b, &format!("{name}.conv1"), &format!("{name}.bn1"), out_c, in_c, 3, stride)?,
                ConvBn::build(b, &format!("{name}.conv2"), &format!("{name}.bn2"), out_c, out_c, 3, 1)?,
            ]
        };
        let projection = if stride != 1 || in_c != out_c {
            Some(ConvBn::build(
                b,
                &format!("{name}.proj"),
                &format!("{name}.proj_bn"),
                out_c,
                in_c,
                1,
                stride,
            )?)
        } else {
            None
        };
        Ok(Self { branch, projection })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.branch.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.branch.len() {
                h = g.relu(h)?;
            }
        }
        let shortcut = match &self.projection {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(h, shortcut)?;
        g.relu(sum)
    }
}

/// Stem (3×3 stride 2) followed by four residual stages, each opening with a
/// stride-2 block, giving C2..C5 at strides 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
    widths: Vec<usize>,
}

impl Backbone {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let stem = ConvBn::build(b, "backbone.stem.conv", "backbone.stem.bn", cfg.stem_width, 1, 3, 2)?;
        let mut in_c = cfg.stem_width;
        let mut stages = Vec::with_capacity(4);
        for (si, (&blocks, &width)) in cfg.backbone_blocks.iter().zip(&cfg.backbone_widths).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if bi == 0 { 2 } else { 1 };
                let name = format!("backbone.s{}.b{bi}", si + 2);
                stage.push(ResidualBlock::build(b, &name, in_c, width, stride, cfg.bottleneck)?);
                in_c = width;
            }
            stages.push(stage);
        }
        Ok(Self {
            stem,
            stages,
            widths: cfg.backbone_widths.clone(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Returns `[C2, C3, C4, C5]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(PdseError::shape("backbone_forward", &s, &[0, 1, 0, 0]));
        }
        if s[2] % 128 != 0 || s[3] % 128 != 0 {
            return Err(PdseError::Config(format!(
                "input size {}x{} must be divisible by 128",
                s[2], s[3]
            )));
        }
        let h = self.stem.forward(g, store, image)?;
        let mut h = g.relu(h)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, store, h)?;
            }
            feats.push(h);
        }
        Ok(feats)
    }
}
