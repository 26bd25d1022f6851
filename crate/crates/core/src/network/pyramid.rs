use std::collections::BTreeMap;

use crate::anchors::LEVELS;
use crate::error::{PdseError, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Feature maps keyed by pyramid level (3..=7), all `pyramid_width` channels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeaturePyramid {
    pub maps: BTreeMap<u32, Var>,
}

impl FeaturePyramid {
    pub fn get(&self, level: u32) -> Result<Var> {
        self.maps
            .get(&level)
            .copied()
            .ok_or_else(|| PdseError::Config(format!("pyramid has no level P{level}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Var)> + '_ {
        self.maps.iter().map(|(&l, &v)| (l, v))
    }
}

fn check_halving<T: Real>(g: &Graph<T>, op: &'static str, fine: Var, coarse: Var) -> Result<()> {
    let (a, b) = (g.shape(fine), g.shape(coarse));
    if a.len() != 4 || b.len() != 4 || a[2] != 2 * b[2] || a[3] != 2 * b[3] {
        return Err(PdseError::shape(op, a, b));
    }
    Ok(())
}

/// Lateral 1×1 on C3..C5, top-down nearest upsample-add, 3×3 smoothing, and
/// P6/P7 from stride-2 convs on P5.
#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
    p6: Conv2d,
    p7: Conv2d,
}

impl Fpn {
    /// `in_widths` are the channel counts of C3, C4, C5.
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, in_widths: &[usize], width: usize) -> Result<Self> {
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &c) in in_widths.iter().enumerate() {
            let l = i + 3;
            lateral.push(b.conv(&format!("fpn.lat{l}"), width, c, 1, 1, Init::Kaiming, Some(Init::Zeros))?);
            output.push(b.conv(&format!("fpn.out{l}"), width, width, 3, 1, Init::Kaiming, Some(Init::Zeros))?);
        }
        Ok(Self {
            lateral,
            output,
            p6: b.conv("fpn.p6", width, width, 3, 2, Init::Kaiming, Some(Init::Zeros))?,
            p7: b.conv("fpn.p7", width, width, 3, 2, Init::Kaiming, Some(Init::Zeros))?,
        })
    }

    /// `c345` = `[C3, C4, C5]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c345: &[Var]) -> Result<FeaturePyramid> {
        if c345.len() != 3 {
            return Err(PdseError::invalid("fpn_topdown", format!("expected 3 inputs, got {}", c345.len())));
        }
        check_halving(g, "fpn_topdown", c345[0], c345[1])?;
        check_halving(g, "fpn_topdown", c345[1], c345[2])?;
        let mut merged = vec![c345[2]; 3];
        merged[2] = self.lateral[2].forward(g, store, c345[2])?;
        for i in (0..2).rev() {
            let lat = self.lateral[i].forward(g, store, c345[i])?;
            let up = g.upsample2x(merged[i + 1])?;
            merged[i] = g.add(lat, up)?;
        }
        let mut maps = BTreeMap::new();
        for (i, &m) in merged.iter().enumerate() {
            maps.insert(i as u32 + 3, self.output[i].forward(g, store, m)?);
        }
        let p6 = self.p6.forward(g, store, maps[&5])?;
        let r6 = g.relu(p6)?;
        let p7 = self.p7.forward(g, store, r6)?;
        maps.insert(6, p6);
        maps.insert(7, p7);
        Ok(FeaturePyramid { maps })
    }
}

fn panet_init(zero: bool) -> Init {
    if zero {
        Init::Zeros
    } else {
        Init::Kaiming
    }
}

/// Bottom-up path augmentation: `N3 = P3 (+ proj(C2))`,
/// `N_l = conv3x3_s2(N_{l−1}) + P_l`.
#[derive(Clone, Debug)]
pub struct BottomUp {
    down: Vec<Conv2d>,
    low_level: Option<Conv2d>,
}

impl BottomUp {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        width: usize,
        low_level_width: Option<usize>,
        zero_init: bool,
    ) -> Result<Self> {
        let init = panet_init(zero_init);
        let down = LEVELS[1..]
            .iter()
            .map(|l| b.conv(&format!("{name}.down{l}"), width, width, 3, 2, init, Some(Init::Zeros)))
            .collect::<Result<Vec<_>>>()?;
        let low_level = match low_level_width {
            Some(c) => Some(b.conv(&format!("{name}.low_level"), width, c, 3, 2, init, Some(Init::Zeros))?),
            None => None,
        };
        Ok(Self { down, low_level })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &FeaturePyramid,
        low_level: Option<Var>,
    ) -> Result<FeaturePyramid> {
        let mut n = p.get(3)?;
        match (&self.low_level, low_level) {
            (Some(proj), Some(c2)) => {
                let inj = proj.forward(g, store, c2)?;
                n = g.add(n, inj)?;
            }
            (Some(_), None) => {
                return Err(PdseError::Config("low-level injection enabled but no C2 map given".into()));
            }
            _ => {}
        }
        let mut maps = BTreeMap::new();
        maps.insert(3, n);
        for (i, &l) in LEVELS[1..].iter().enumerate() {
            let d = self.down[i].forward(g, store, n)?;
            n = g.add(d, p.get(l)?)?;
            maps.insert(l, n);
        }
        Ok(FeaturePyramid { maps })
    }
}

/// Second top-down pass between the two bottom-up couplings:
/// `M7 = N7`, `M_l = N_l + up2(conv1x1(M_{l+1}))`.
#[derive(Clone, Debug)]
pub struct TopDownRefresh {
    lateral: Vec<Conv2d>,
}

impl TopDownRefresh {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize, zero_init: bool) -> Result<Self> {
        let init = panet_init(zero_init);
        let lateral = LEVELS[..4]
            .iter()
            .map(|l| b.conv(&format!("{name}.lat{l}"), width, width, 1, 1, init, Some(Init::Zeros)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lateral })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, n: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut maps = BTreeMap::new();
        let mut m = n.get(7)?;
        maps.insert(7, m);
        for (i, &l) in LEVELS[..4].iter().enumerate().rev() {
            let lat = self.lateral[i].forward(g, store, m)?;
            let up = g.upsample2x(lat)?;
            m = g.add(n.get(l)?, up)?;
            maps.insert(l, m);
        }
        Ok(FeaturePyramid { maps })
    }
}
