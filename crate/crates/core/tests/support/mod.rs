#![allow(dead_code)]

pub mod oracle;

use bimsa::fusion::{FusionHeads, StrategyId};
use bimsa::model::layers::{Conv, ParamStore};
use bimsa::model::BranchOutput;
use candle_core::{DType, Device, Tensor};
use rand::Rng;

use oracle::{Branch, Heads, Map};

pub fn map_to_tensor(m: &Map) -> Tensor {
    Tensor::from_vec(m.v.clone(), (1, m.c, m.h, m.w), &Device::Cpu).unwrap()
}

pub fn tensor_to_map(t: &Tensor) -> Map {
    let (_, c, h, w) = t.dims4().unwrap();
    let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    Map::new(c, h, w, v)
}

pub fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Map {
    Map::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect())
}

/// A random fusion problem: branches, heads and output size, in both the
/// library's tensor form and the reference form.
pub struct Instance {
    pub strategy: StrategyId,
    pub branches: Vec<Branch>,
    pub outputs: Vec<BranchOutput>,
    pub seg: Conv,
    pub project: Option<Conv>,
    pub heads: Heads,
    pub out: (usize, usize),
}

impl Instance {
    pub fn fusion_heads(&self) -> FusionHeads<'_> {
        FusionHeads {
            seg: &self.seg,
            project: self.project.as_ref(),
        }
    }
}

fn set_random<R: Rng>(rng: &mut R, conv: &Conv) -> (Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = (0..conv.out_channels * conv.in_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..conv.out_channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
    conv.weight
        .set(&Tensor::from_vec(w.clone(), (conv.out_channels, conv.in_channels, 1, 1), &Device::Cpu).unwrap())
        .unwrap();
    conv.bias
        .as_ref()
        .unwrap()
        .set(&Tensor::from_vec(b.clone(), conv.out_channels, &Device::Cpu).unwrap())
        .unwrap();
    (w, b)
}

/// Up to three octave scales containing 1.0, grids no larger than 4x4.
pub fn random_instance<R: Rng>(rng: &mut R, strategy: StrategyId) -> Instance {
    let scale_sets: [&[f64]; 4] = [&[1.0], &[0.5, 1.0], &[1.0, 2.0], &[0.5, 1.0, 2.0]];
    let needs_pairs = strategy.is_hierarchical();
    let scales = loop {
        let s = scale_sets[rng.gen_range(0..4)];
        if !(needs_pairs && s.len() == 1 && strategy != StrategyId::Bimsa) {
            break s;
        }
    };
    let max_unit = if scales.contains(&2.0) { 2 } else { 4 };
    let unit = (rng.gen_range(1..=max_unit), rng.gen_range(1..=max_unit));
    let n_class = rng.gen_range(2..=4);
    let nc = 2 * rng.gen_range(1..=2);
    let out = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let gate_c = strategy.attention_channels(nc);
    let mut branches = Vec::new();
    for &s in scales {
        let g = |n: usize| ((n as f64 * s).ceil() as usize).max(1);
        let (h, w) = (g(unit.0), g(unit.1));
        let f = random_map(rng, nc, h, w, -2.0, 2.0);
        let mut gate = |k: Option<usize>| k.map(|k| random_map(rng, k, h, w, 0.01, 0.99));
        let alpha = gate(gate_c);
        let beta = if strategy.attention_heads() > 1 { gate(gate_c) } else { None };
        branches.push(Branch { scale: s, f, alpha, beta });
    }
    let mut store = ParamStore::new(rng.gen(), DType::F64, Device::Cpu);
    let seg = Conv::projection(&mut store, "seg", nc, n_class).unwrap();
    let (seg_w, seg_b) = set_random(rng, &seg);
    let (project, proj_w, proj_b) = if strategy == StrategyId::MsdConcat {
        let p = Conv::projection(&mut store, "proj", scales.len() * nc, nc).unwrap();
        let (w, b) = set_random(rng, &p);
        (Some(p), w, b)
    } else {
        (None, Vec::new(), Vec::new())
    };
    let outputs = branches
        .iter()
        .map(|b| BranchOutput {
            scale: b.scale,
            f_b: map_to_tensor(&b.f),
            f: map_to_tensor(&b.f),
            alpha: b.alpha.as_ref().map(map_to_tensor),
            beta: b.beta.as_ref().map(map_to_tensor),
            aux_scores: None,
        })
        .collect();
    Instance {
        strategy,
        branches,
        outputs,
        seg,
        project,
        heads: Heads {
            seg_w,
            seg_b,
            proj_w,
            proj_b,
        },
        out,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
