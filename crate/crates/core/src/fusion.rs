//! Fusion strategies mapping per-scale [`BranchOutput`]s to final scores.
//!
//! The hierarchical variants share one gated step,
//!
//! ```text
//! fused(s) = a(s) * feat(s) + (1 - a(s)) * resize(fused(prev), grid(s))
//! ```
//!
//! where a pathway starts from the plain feature at its first scale. The
//! bidirectional variant runs two such pathways over disjoint halves of the
//! trunk features:
//!
//! * fine-to-coarse: `alpha` gates over `feat_a`, finest scale to coarsest;
//! * coarse-to-fine: `beta` gates over `feat_b`, coarsest scale to finest.
//!
//! Fusing 0.5x and 1x therefore applies `alpha` predicted at 0.5x in one
//! pathway and `1 - beta` predicted at 1x on the coarse contribution in the
//! other. Note that the architecture description elsewhere pairs the first
//! attention branch with the coarse-to-fine pathway; the attention analysis
//! pairs `alpha` with fine-to-coarse. This module follows the latter.
//!
//! All fusion happens on trunk-output grids. Terminal maps are resized to
//! the 1x grid, passed through the segmentation head where needed, and
//! upsampled to the requested output size last.
//!
//! `avg` and `max` emit log-probabilities so they can be trained with the
//! same cross-entropy as every other strategy and averaged across tiles.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::layers::{softmax, Conv};
use crate::model::BranchOutput;
use crate::pyramid::{resize_to_grid, spatial};

/// Lower bound applied to fused probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyId {
    Single,
    Avg,
    Max,
    MsdConcat,
    HmsaScore,
    FhmsaFeature,
    Bimsa,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::Single,
        StrategyId::Avg,
        StrategyId::Max,
        StrategyId::MsdConcat,
        StrategyId::HmsaScore,
        StrategyId::FhmsaFeature,
        StrategyId::Bimsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::Single => "single",
            StrategyId::Avg => "avg",
            StrategyId::Max => "max",
            StrategyId::MsdConcat => "msd-concat",
            StrategyId::HmsaScore => "hmsa-score",
            StrategyId::FhmsaFeature => "fhmsa-feature",
            StrategyId::Bimsa => "bimsa",
        }
    }

    /// Channels per attention head, or `None` when the strategy has no gates.
    pub fn attention_channels(self, nc: usize) -> Option<usize> {
        match self {
            StrategyId::HmsaScore => Some(1),
            StrategyId::FhmsaFeature => Some(nc),
            StrategyId::Bimsa => Some(nc / 2),
            _ => None,
        }
    }

    pub fn attention_heads(self) -> usize {
        match self {
            StrategyId::Bimsa => 2,
            StrategyId::HmsaScore | StrategyId::FhmsaFeature => 1,
            _ => 0,
        }
    }

    /// Gated strategies that train on two scales and infer on more.
    pub fn is_hierarchical(self) -> bool {
        self.attention_heads() > 0
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    FineToCoarse,
    CoarseToFine,
}

/// A pathway's running fused features at its current scale.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub pathway: Pathway,
    pub scale: f64,
    pub fused: Tensor,
}

impl FusionState {
    pub fn start(pathway: Pathway, scale: f64, feature: Tensor) -> Self {
        Self {
            pathway,
            scale,
            fused: feature,
        }
    }
}

/// One gated hierarchical step onto `scale`, which must be the next scale
/// in the pathway's direction (a factor of two away).
pub fn fuse_step(state: &FusionState, scale: f64, attention: &Tensor, feature: &Tensor) -> Result<FusionState> {
    let adjacent = match state.pathway {
        Pathway::FineToCoarse => scale * 2.0 == state.scale,
        Pathway::CoarseToFine => scale == state.scale * 2.0,
    };
    if !adjacent {
        return Err(Error::Contract(format!(
            "{:?} step from scale {} to {scale} is not adjacent",
            state.pathway, state.scale
        )));
    }
    let (ac, fc) = (attention.dim(1)?, feature.dim(1)?);
    if (ac != 1 && ac != fc) || spatial(attention) != spatial(feature) {
        return Err(Error::Contract(format!(
            "attention {:?} does not match feature {:?}",
            attention.dims(),
            feature.dims()
        )));
    }
    if state.fused.dim(1)? != fc {
        return Err(Error::Contract("fused and feature channel counts differ".into()));
    }
    let prev = resize_to_grid(&state.fused, spatial(feature))?;
    let keep = attention.affine(-1.0, 1.0)?;
    let fused = (attention.broadcast_mul(feature)? + keep.broadcast_mul(&prev)?)?;
    Ok(FusionState {
        pathway: state.pathway,
        scale,
        fused,
    })
}

/// Output heads applied after fusion.
pub struct FusionHeads<'a> {
    pub seg: &'a Conv,
    /// 1x1 projection for `msd-concat` (`len(scales) * nc -> nc`).
    pub project: Option<&'a Conv>,
}

/// Checks ordering and returns the index of the 1x branch.
fn check_branches(branches: &[BranchOutput], need_octaves: bool) -> Result<usize> {
    if branches.is_empty() {
        return Err(Error::Contract("no branches to fuse".into()));
    }
    for w in branches.windows(2) {
        if w[1].scale <= w[0].scale {
            return Err(Error::Contract("branches must be in increasing scale order".into()));
        }
        if need_octaves && w[1].scale != 2.0 * w[0].scale {
            return Err(Error::Contract(format!(
                "scales {} and {} are not consecutive powers of two",
                w[0].scale, w[1].scale
            )));
        }
    }
    branches
        .iter()
        .position(|b| b.scale == 1.0)
        .ok_or_else(|| Error::Contract("scale 1.0 missing from branches".into()))
}

fn gate<'a>(b: &'a BranchOutput, second: bool) -> Result<&'a Tensor> {
    let g = if second { &b.beta } else { &b.alpha };
    g.as_ref()
        .ok_or_else(|| Error::Contract(format!("branch at scale {} has no attention", b.scale)))
}

fn finish(scores_on_grid: Tensor, out_size: (usize, usize)) -> Result<Tensor> {
    resize_to_grid(&scores_on_grid, out_size)
}

pub fn run(strategy: StrategyId, branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    match strategy {
        StrategyId::Single => run_single(branches, heads, out),
        StrategyId::Avg => run_avg(branches, heads, out),
        StrategyId::Max => run_max(branches, heads, out),
        StrategyId::MsdConcat => run_msd_concat(branches, heads, out),
        StrategyId::HmsaScore => run_hmsa_score(branches, heads, out),
        StrategyId::FhmsaFeature => run_fhmsa_feature(branches, heads, out),
        StrategyId::Bimsa => run_bimsa(branches, heads, out),
    }
}

/// Segmentation head on the 1x branch only.
pub fn run_single(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let unit = check_branches(branches, false)?;
    finish(heads.seg.forward(&branches[unit].f)?, out)
}

fn unit_probs(branches: &[BranchOutput], heads: &FusionHeads) -> Result<(Vec<Tensor>, (usize, usize))> {
    let unit = check_branches(branches, false)?;
    let grid = branches[unit].grid();
    let probs = branches
        .iter()
        .map(|b| resize_to_grid(&softmax(&heads.seg.forward(&b.f)?)?, grid))
        .collect::<Result<Vec<_>>>()?;
    Ok((probs, grid))
}

/// Mean of per-scale class probabilities on the 1x grid.
pub fn run_avg(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let (probs, _) = unit_probs(branches, heads)?;
    let mean = (Tensor::stack(&probs, 0)?.sum(0)? / probs.len() as f64)?;
    finish(mean.clamp(PROB_FLOOR, f64::MAX)?.log()?, out)
}

/// Per-class maximum over scales, renormalized to sum to one per pixel.
pub fn run_max(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let (probs, _) = unit_probs(branches, heads)?;
    let m = Tensor::stack(&probs, 0)?.max(0)?;
    let norm = m.broadcast_div(&m.sum_keepdim(1)?)?;
    finish(norm.clamp(PROB_FLOOR, f64::MAX)?.log()?, out)
}

/// Features of every scale on the 1x grid, concatenated coarse to fine,
/// projected back to `nc` channels.
pub fn run_msd_concat(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let unit = check_branches(branches, false)?;
    let grid = branches[unit].grid();
    let feats = branches
        .iter()
        .map(|b| resize_to_grid(&b.f, grid))
        .collect::<Result<Vec<_>>>()?;
    let cat = Tensor::cat(&feats, 1)?;
    let proj = heads
        .project
        .ok_or_else(|| Error::Contract("msd-concat requires a projection head".into()))?;
    finish(heads.seg.forward(&proj.forward(&cat)?)?, out)
}

/// Coarse-to-fine pathway over arbitrary per-scale maps with the gate
/// predicted at the finer member of each pair.
fn coarse_to_fine(branches: &[BranchOutput], maps: Vec<Tensor>, second_gate: bool) -> Result<Tensor> {
    let mut maps = maps.into_iter();
    let first = maps.next().expect("non-empty");
    let mut st = FusionState::start(Pathway::CoarseToFine, branches[0].scale, first);
    for (b, m) in branches.iter().skip(1).zip(maps) {
        st = fuse_step(&st, b.scale, gate(b, second_gate)?, &m)?;
    }
    Ok(st.fused)
}

/// Score-level hierarchical attention with a single-channel gate.
pub fn run_hmsa_score(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let unit = check_branches(branches, true)?;
    let scores = branches
        .iter()
        .map(|b| heads.seg.forward(&b.f))
        .collect::<Result<Vec<_>>>()?;
    let fused = coarse_to_fine(branches, scores, false)?;
    finish(resize_to_grid(&fused, branches[unit].grid())?, out)
}

/// Feature-level hierarchical attention; the segmentation head runs once
/// on the fused `nc`-channel features.
pub fn run_fhmsa_feature(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let unit = check_branches(branches, true)?;
    let feats = branches.iter().map(|b| b.f.clone()).collect();
    let fused = coarse_to_fine(branches, feats, false)?;
    let on_unit = resize_to_grid(&fused, branches[unit].grid())?;
    finish(heads.seg.forward(&on_unit)?, out)
}

/// Bidirectional fusion: both pathways, concatenated on the 1x grid.
pub fn run_bimsa(branches: &[BranchOutput], heads: &FusionHeads, out: (usize, usize)) -> Result<Tensor> {
    let unit = check_branches(branches, true)?;
    let n = branches.len();
    if n == 1 {
        let b = &branches[0];
        let f = Tensor::cat(&[b.feat_a()?, b.feat_b()?], 1)?;
        return finish(heads.seg.forward(&f)?, out);
    }
    let finest = &branches[n - 1];
    let mut down = FusionState::start(Pathway::FineToCoarse, finest.scale, finest.feat_a()?);
    for b in branches[..n - 1].iter().rev() {
        down = fuse_step(&down, b.scale, gate(b, false)?, &b.feat_a()?)?;
    }
    let feats_b = branches.iter().map(|b| b.feat_b()).collect::<Result<Vec<_>>>()?;
    let up = coarse_to_fine(branches, feats_b, true)?;
    let grid = branches[unit].grid();
    let fused = Tensor::cat(&[resize_to_grid(&down.fused, grid)?, resize_to_grid(&up, grid)?], 1)?;
    finish(heads.seg.forward(&fused)?, out)
}

fn gated(a: &Tensor, current: &Tensor, other: &Tensor) -> Result<Tensor> {
    let other = resize_to_grid(other, spatial(current))?;
    Ok((a.broadcast_mul(current)? + a.affine(-1.0, 1.0)?.broadcast_mul(&other)?)?)
}

/// The two-scale training graph of the hierarchical strategies, written
/// out directly for one adjacent pair.
pub fn two_scale(
    strategy: StrategyId,
    coarse: &BranchOutput,
    fine: &BranchOutput,
    heads: &FusionHeads,
    out: (usize, usize),
) -> Result<Tensor> {
    if fine.scale != 2.0 * coarse.scale {
        return Err(Error::Contract("training pair must be adjacent octaves".into()));
    }
    let unit_grid = if coarse.scale == 1.0 {
        coarse.grid()
    } else if fine.scale == 1.0 {
        fine.grid()
    } else {
        return Err(Error::Contract("training pair must include scale 1.0".into()));
    };
    let scores = match strategy {
        StrategyId::Bimsa => {
            let f2c = gated(gate(coarse, false)?, &coarse.feat_a()?, &fine.feat_a()?)?;
            let c2f = gated(gate(fine, true)?, &fine.feat_b()?, &coarse.feat_b()?)?;
            let cat = Tensor::cat(&[resize_to_grid(&f2c, unit_grid)?, resize_to_grid(&c2f, unit_grid)?], 1)?;
            heads.seg.forward(&cat)?
        }
        StrategyId::HmsaScore => {
            let s = gated(gate(fine, false)?, &heads.seg.forward(&fine.f)?, &heads.seg.forward(&coarse.f)?)?;
            resize_to_grid(&s, unit_grid)?
        }
        StrategyId::FhmsaFeature => {
            let f = gated(gate(fine, false)?, &fine.f, &coarse.f)?;
            heads.seg.forward(&resize_to_grid(&f, unit_grid)?)?
        }
        other => {
            return Err(Error::Contract(format!("{other} has no two-scale training graph")));
        }
    };
    finish(scores, out)
}
