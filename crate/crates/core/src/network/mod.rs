//! The full detector: backbone → FPN → (bottom-up, refresh, bottom-up) →
//! per-level DSE → shared class and box subnets.

mod backbone;
mod head;
mod pyramid;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, ResidualBlock};
pub use head::{prior_bias, Subnet};
pub use pyramid::{BottomUp, FeaturePyramid, Fpn, TopDownRefresh};

use crate::anchors::{AnchorSpec, BatchTargets, MatchThresholds, LEVELS};
use crate::dse::DseBlock;
use crate::error::{PdseError, Result};
use crate::nn::ParamBuilder;
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Var};

pub const NUM_CLASSES: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_panet: bool,
    pub use_dse: bool,
    /// Residual blocks per stage (C2..C5).
    pub backbone_blocks: Vec<usize>,
    /// Output channels per stage (C2..C5).
    pub backbone_widths: Vec<usize>,
    pub stem_width: usize,
    pub bottleneck: bool,
    /// Feed C2 into the first bottom-up path.
    pub include_low_level: bool,
    pub pyramid_width: usize,
    pub anchors: AnchorSpec,
    pub num_classes: usize,
    pub se_reduction: usize,
    /// Pyramid levels that get a DSE block when `use_dse` is set.
    pub dse_levels: Vec<u32>,
    /// Zero-initialize the path-aggregation convs, so enabling them leaves
    /// the initial forward unchanged.
    pub panet_zero_init: bool,
    pub head_depth: usize,
    pub head_width: usize,
    pub prior_prob: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub box_loss_weight: f64,
    pub matching: MatchThresholds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_panet: true,
            use_dse: true,
            backbone_blocks: vec![2, 2, 2, 2],
            backbone_widths: vec![16, 32, 64, 128],
            stem_width: 16,
            bottleneck: false,
            include_low_level: true,
            pyramid_width: 64,
            anchors: AnchorSpec::default(),
            num_classes: NUM_CLASSES,
            se_reduction: 16,
            dse_levels: LEVELS.to_vec(),
            panet_zero_init: true,
            head_depth: 4,
            head_width: 64,
            prior_prob: 0.01,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            box_loss_weight: 1.0,
            matching: MatchThresholds::default(),
        }
    }
}

impl ModelConfig {
    /// Stage layout of a 50-layer bottleneck network.
    pub fn resnet50_like() -> Self {
        Self {
            backbone_blocks: vec![3, 4, 6, 3],
            backbone_widths: vec![256, 512, 1024, 2048],
            stem_width: 64,
            bottleneck: true,
            pyramid_width: 256,
            head_width: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PdseError::Config(m));
        if self.num_classes != NUM_CLASSES {
            return err(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.backbone_blocks.len() != 4 || self.backbone_widths.len() != 4 {
            return err("backbone needs exactly four stages".into());
        }
        if self.backbone_blocks.iter().any(|&b| b == 0) || self.backbone_widths.iter().any(|&w| w == 0) {
            return err("backbone stages need at least one block and positive width".into());
        }
        if self.stem_width == 0 || self.pyramid_width == 0 || self.head_width == 0 {
            return err("layer widths must be positive".into());
        }
        self.anchors.validate()?;
        if self.use_dse {
            if self.pyramid_width % 2 != 0 {
                return err("DSE needs an even pyramid width".into());
            }
            if self.se_reduction == 0 || self.pyramid_width % self.se_reduction != 0 {
                return err(format!(
                    "SE reduction {} must divide pyramid width {}",
                    self.se_reduction, self.pyramid_width
                ));
            }
            if let Some(l) = self.dse_levels.iter().find(|l| !LEVELS.contains(l)) {
                return err(format!("DSE level P{l} is not a pyramid level"));
            }
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return err("prior_prob must lie in (0, 1)".into());
        }
        if !(self.focal_alpha >= 0.0 && self.focal_alpha <= 1.0 && self.focal_gamma >= 0.0) {
            return err("focal alpha must lie in [0, 1] and gamma be non-negative".into());
        }
        if !(self.smooth_l1_beta > 0.0 && self.box_loss_weight >= 0.0) {
            return err("smooth_l1_beta must be positive and box_loss_weight non-negative".into());
        }
        let m = self.matching;
        if !(m.negative <= m.positive && m.positive <= 1.0 && m.negative >= 0.0) {
            return err("matching thresholds need 0 ≤ negative ≤ positive ≤ 1".into());
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.per_cell()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelOutput {
    pub level: u32,
    /// `N × (A·K) × H × W`, channel `a·K + k`.
    pub cls: Var,
    /// `N × (A·4) × H × W`, channel `a·4 + c`.
    pub boxes: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub boxes: Var,
}

#[derive(Clone, Debug)]
struct PathAggregation {
    first: BottomUp,
    refresh: TopDownRefresh,
    second: BottomUp,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    backbone: Backbone,
    fpn: Fpn,
    panet: Option<PathAggregation>,
    dse: Vec<(u32, DseBlock)>,
    cls_head: Subnet,
    box_head: Subnet,
}

impl Model {
    fn build<T: Real>(b: &mut ParamBuilder<'_, T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.pyramid_width;
        let backbone = Backbone::build(b, config)?;
        let fpn = Fpn::build(b, &config.backbone_widths[1..], w)?;
        let panet = if config.use_panet {
            let low = config.include_low_level.then_some(config.backbone_widths[0]);
            let z = config.panet_zero_init;
            Some(PathAggregation {
                first: BottomUp::build(b, "panet.bu1", w, low, z)?,
                refresh: TopDownRefresh::build(b, "panet.refresh", w, z)?,
                second: BottomUp::build(b, "panet.bu2", w, None, z)?,
            })
        } else {
            None
        };
        let mut dse = Vec::new();
        if config.use_dse {
            let mut levels = config.dse_levels.clone();
            levels.sort_unstable();
            levels.dedup();
            for l in levels {
                dse.push((l, DseBlock::build(b, &format!("dse.p{l}"), w, config.se_reduction)?));
            }
        }
        let a = config.anchors_per_cell();
        let cls_head = Subnet::build(
            b,
            "head.cls",
            w,
            config.head_width,
            config.head_depth,
            a * config.num_classes,
            prior_bias(config.prior_prob),
        )?;
        let box_head = Subnet::build(b, "head.box", w, config.head_width, config.head_depth, a * 4, 0.0)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            fpn,
            panet,
            dse,
            cls_head,
            box_head,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::build(&mut ParamBuilder::init(&mut store, seed), config)?;
        Ok((model, store))
    }

    /// Attaches the structure for `config` to existing parameters, checking
    /// every name and shape.
    pub fn bind<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let total = store.len();
        let mut b = ParamBuilder::bind(store);
        let model = Self::build(&mut b, config)?;
        if b.declared() != total {
            return Err(PdseError::Config(format!(
                "parameter set has {total} tensors but the configuration uses {}",
                b.declared()
            )));
        }
        Ok(model)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// The pyramid handed to the heads.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let c = self.backbone.forward(g, store, image)?;
        let mut p = self.fpn.forward(g, store, &c[1..])?;
        if let Some(pa) = &self.panet {
            let low = self.config.include_low_level.then_some(c[0]);
            let n = pa.first.forward(g, store, &p, low)?;
            let m = pa.refresh.forward(g, store, &n)?;
            p = pa.second.forward(g, store, &m, None)?;
        }
        for (l, block) in &self.dse {
            let x = p.get(*l)?;
            let y = block.forward(g, store, x)?;
            p.maps.insert(*l, y);
        }
        Ok(p)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<HeadOutputs> {
        let p = self.features(g, store, image)?;
        let mut levels = Vec::with_capacity(LEVELS.len());
        for (level, x) in p.iter() {
            let cls = self.cls_head.forward(g, store, x)?;
            let boxes = self.box_head.forward(g, store, x)?;
            levels.push(LevelOutput { level, cls, boxes });
        }
        Ok(HeadOutputs { levels })
    }

    /// Focal loss over non-ignored anchors normalized by `max(1, #pos)`, plus
    /// smooth-L1 over positive coordinates normalized by `4·max(1, #pos)`.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, out: &HeadOutputs, targets: &BatchTargets<T>) -> Result<LossParts> {
        if out.levels.len() != targets.levels.len() {
            return Err(PdseError::invalid(
                "loss",
                format!("{} output levels vs {} target levels", out.levels.len(), targets.levels.len()),
            ));
        }
        let c = &self.config;
        let npos = targets.num_positive.max(1) as f64;
        let mut cls_terms = Vec::new();
        let mut box_terms = Vec::new();
        for (o, t) in out.levels.iter().zip(&targets.levels) {
            cls_terms.push(g.focal_loss(o.cls, &t.cls_target, &t.cls_weight, c.focal_alpha, c.focal_gamma, npos)?);
            box_terms.push(g.smooth_l1(o.boxes, &t.box_target, &t.box_mask, c.smooth_l1_beta, 4.0 * npos)?);
        }
        let cls = sum_vars(g, &cls_terms)?;
        let boxes = sum_vars(g, &box_terms)?;
        let weighted = g.scale(boxes, c.box_loss_weight)?;
        let total = g.add(cls, weighted)?;
        Ok(LossParts { total, cls, boxes })
    }
}

fn sum_vars<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| PdseError::invalid("loss", "no pyramid levels"))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}
