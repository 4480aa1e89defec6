//! Shared-parameter trunk, attention heads, segmentation and auxiliary heads.
//!
//! One [`Model`] holds exactly one set of parameters; every pyramid level
//! runs through the same objects, so a parameter update is visible at all
//! scales.

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Mode, ParamStore};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, FusionHeads, StrategyId};
use crate::pyramid::{self, build_pyramid, grid_len, PyramidLevel};
use layers::{global_avg_pool, sigmoid, Conv, ConvBnRelu, ConvSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_class: usize,
    /// Channel expansion: the trunk emits `n_class * d` feature channels.
    pub d: usize,
    /// Backbone and context-module width.
    pub trunk_width: usize,
    /// Width of the refinement and attention-head 3x3 stages.
    pub head_width: usize,
    pub aspp_rates: Vec<usize>,
    pub output_stride: usize,
    pub train_scales: Vec<f64>,
    pub infer_scales: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_class: 8,
            d: 4,
            trunk_width: 16,
            head_width: 16,
            aspp_rates: vec![1, 6, 12, 18],
            output_stride: 4,
            train_scales: vec![0.5, 1.0],
            infer_scales: vec![0.5, 1.0, 2.0],
        }
    }
}

impl ModelConfig {
    pub fn nc(&self) -> usize {
        self.n_class * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_class == 0 || self.n_class >= crate::data::IGNORE_INDEX as usize {
            return Err(Error::config("n_class", "must lie in 1..255"));
        }
        if self.d == 0 || self.nc() % 2 != 0 {
            return Err(Error::config("d", format!("n_class * d = {} must be even and positive", self.nc())));
        }
        if self.trunk_width == 0 || self.head_width == 0 {
            return Err(Error::config("trunk_width", "widths must be positive"));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::config("aspp_rates", "need at least one positive rate"));
        }
        if !matches!(self.output_stride, 2 | 4 | 8 | 16) {
            return Err(Error::config("output_stride", "must be 2, 4, 8 or 16"));
        }
        let train = pyramid::validate_scales(&self.train_scales)
            .map_err(|_| Error::config("train_scales", "must be positive, distinct and contain 1.0"))?;
        let infer = pyramid::validate_scales(&self.infer_scales)
            .map_err(|_| Error::config("infer_scales", "must be positive, distinct and contain 1.0"))?;
        if let Some(s) = train.iter().find(|s| !infer.contains(s)) {
            return Err(Error::config("train_scales", format!("scale {s} missing from infer_scales")));
        }
        for (key, list) in [("train_scales", &train), ("infer_scales", &infer)] {
            if list.windows(2).any(|w| w[1] != 2.0 * w[0]) {
                return Err(Error::config(key, "adjacent scales must differ by a factor of 2"));
            }
        }
        Ok(())
    }
}

/// Per-scale products of the shared trunk.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub scale: f64,
    /// Context features (`trunk_width` channels).
    pub f_b: Tensor,
    /// Refined features (`nc` channels).
    pub f: Tensor,
    /// First attention head. For the bidirectional variant this is the
    /// fine-to-coarse gate; single-gate variants store their gate here.
    pub alpha: Option<Tensor>,
    /// Second attention head: the coarse-to-fine gate.
    pub beta: Option<Tensor>,
    pub aux_scores: Option<Tensor>,
}

impl BranchOutput {
    pub fn half(&self) -> Result<usize> {
        Ok(self.f.dim(1)? / 2)
    }

    /// First half of the feature channels (fine-to-coarse pathway).
    pub fn feat_a(&self) -> Result<Tensor> {
        Ok(self.f.narrow(1, 0, self.half()?)?)
    }

    /// Second half of the feature channels (coarse-to-fine pathway).
    pub fn feat_b(&self) -> Result<Tensor> {
        let h = self.half()?;
        Ok(self.f.narrow(1, h, h)?)
    }

    pub fn grid(&self) -> (usize, usize) {
        pyramid::spatial(&self.f)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvBnRelu,
    b: Conv,
    bn: layers::BatchNorm,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            let spec = ConvSpec { kernel: 1, stride, dilation: 1, bias: false };
            Some(Conv::new(store, &format!("{name}.shortcut"), cin, cout, spec)?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBnRelu::new(store, &format!("{name}.a"), cin, cout, ConvSpec::k3().stride(stride))?,
            b: Conv::new(store, &format!("{name}.b.conv"), cout, cout, ConvSpec::k3())?,
            bn: layers::BatchNorm::new(store, &format!("{name}.b.bn"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn.forward(&self.b.forward(&self.a.forward(x, mode)?)?, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Parallel atrous branches plus image pooling, fused by a 1x1 conv.
#[derive(Clone, Debug)]
struct Aspp {
    branches: Vec<ConvBnRelu>,
    pool: Conv,
    project: ConvBnRelu,
}

impl Aspp {
    fn new(store: &mut ParamStore, width: usize, rates: &[usize]) -> Result<Self> {
        let branches = rates
            .iter()
            .map(|&r| {
                let spec = if r == 1 {
                    ConvSpec { kernel: 1, stride: 1, dilation: 1, bias: false }
                } else {
                    ConvSpec::k3().dilation(r)
                };
                ConvBnRelu::new(store, &format!("aspp.rate{r}"), width, width, spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = Conv::new(store, "aspp.pool", width, width, ConvSpec::k1())?;
        let cat = width * (rates.len() + 1);
        let spec = ConvSpec { kernel: 1, stride: 1, dilation: 1, bias: false };
        let project = ConvBnRelu::new(store, "aspp.project", cat, width, spec)?;
        Ok(Self { branches, pool, project })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut outs = self
            .branches
            .iter()
            .map(|b| b.forward(x, mode))
            .collect::<Result<Vec<_>>>()?;
        let pooled = self.pool.forward(&global_avg_pool(x)?)?.relu()?;
        outs.push(pooled.broadcast_as(outs[0].shape())?.contiguous()?);
        self.project.forward(&Tensor::cat(&outs, 1)?, mode)
    }
}

/// Conv3x3 -> BN -> ReLU -> Conv3x3 -> BN -> ReLU -> Conv1x1.
#[derive(Clone, Debug)]
struct HeadStack {
    a: ConvBnRelu,
    b: ConvBnRelu,
    out: Conv,
}

impl HeadStack {
    fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBnRelu::new(store, &format!("{name}.0"), cin, width, ConvSpec::k3())?,
            b: ConvBnRelu::new(store, &format!("{name}.1"), width, width, ConvSpec::k3())?,
            out: Conv::projection(store, &format!("{name}.out"), width, cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.out.forward(&self.b.forward(&self.a.forward(x, mode)?, mode)?)
    }
}

#[derive(Clone, Debug)]
struct Trunk {
    stem: ConvBnRelu,
    stages: Vec<ResBlock>,
    aspp: Aspp,
    refine: HeadStack,
}

/// Converts an RGB image into a normalized `1 x 3 x H x W` tensor.
pub fn image_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = (px.0[c] as f32 / 255.0 - 0.5) / 0.25;
        }
    }
    Ok(Tensor::from_vec(planar, (1, 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn batch_tensor(imgs: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = imgs
        .iter()
        .map(|i| image_tensor(i, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Outputs of the training graph.
pub struct TrainOutput {
    /// Fused scores at input resolution.
    pub main: Tensor,
    /// Auxiliary scores per training scale, at input resolution.
    pub aux: Vec<Tensor>,
    pub branches: Vec<BranchOutput>,
}

pub struct Model {
    cfg: ModelConfig,
    strategy: StrategyId,
    store: ParamStore,
    trunk: Trunk,
    attention: Vec<HeadStack>,
    seg: Conv,
    aux: Conv,
    project: Option<Conv>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, strategy: StrategyId, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, strategy, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(
        cfg: &ModelConfig,
        strategy: StrategyId,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new(seed, dtype, device.clone());
        let w = cfg.trunk_width;
        let nc = cfg.nc();
        let stem = ConvBnRelu::new(&mut s, "stem", 3, w, ConvSpec::k3().stride(2))?;
        let mut stride = 2;
        let mut stages = Vec::new();
        for i in 0..3 {
            let st = if stride < cfg.output_stride { 2 } else { 1 };
            stride *= st;
            stages.push(ResBlock::new(&mut s, &format!("stage{i}"), w, w, st)?);
        }
        let aspp = Aspp::new(&mut s, w, &cfg.aspp_rates)?;
        let refine = HeadStack::new(&mut s, "refine", w, cfg.head_width, nc)?;
        let attention = match strategy.attention_channels(nc) {
            Some(k) => (0..strategy.attention_heads())
                .map(|i| HeadStack::new(&mut s, &format!("attn{i}"), w, cfg.head_width, k))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let seg = Conv::projection(&mut s, "seg", nc, cfg.n_class)?;
        let aux = Conv::projection(&mut s, "aux", nc, cfg.n_class)?;
        let project = if strategy == StrategyId::MsdConcat {
            let n = cfg.infer_scales.len();
            Some(Conv::projection(&mut s, "msd_project", n * nc, nc)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            strategy,
            store: s,
            trunk: Trunk { stem, stages, aspp, refine },
            attention,
            seg,
            aux,
            project,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn strategy(&self) -> StrategyId {
        self.strategy
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Scales the training graph runs on.
    pub fn train_scales(&self) -> Vec<f64> {
        match self.strategy {
            StrategyId::Single => vec![1.0],
            // the concat projection is sized for one fixed scale set
            StrategyId::MsdConcat => self.cfg.infer_scales.clone(),
            _ => self.cfg.train_scales.clone(),
        }
    }

    pub fn infer_scales(&self) -> Vec<f64> {
        match self.strategy {
            StrategyId::Single => vec![1.0],
            _ => self.cfg.infer_scales.clone(),
        }
    }

    /// Backbone + context module + refinement: returns `(f_b, f)`.
    pub fn trunk_forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (h, w) = pyramid::spatial(x);
        if h < self.cfg.output_stride || w < self.cfg.output_stride {
            return Err(Error::Contract(format!(
                "input {h}x{w} smaller than output stride {}",
                self.cfg.output_stride
            )));
        }
        let mut y = self.trunk.stem.forward(x, mode)?;
        for st in &self.trunk.stages {
            y = st.forward(&y, mode)?;
        }
        let f_b = self.trunk.aspp.forward(&y, mode)?;
        let f = self.trunk.refine.forward(&f_b, mode)?;
        Ok((f_b, f))
    }

    /// Sigmoid gates from every attention head of this strategy.
    pub fn attention_heads(&self, f_b: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.attention
            .iter()
            .map(|h| sigmoid(&h.forward(f_b, mode)?))
            .collect()
    }

    pub fn seg_head(&self, fused: &Tensor) -> Result<Tensor> {
        self.seg.forward(fused)
    }

    pub fn aux_head(&self, f: &Tensor) -> Result<Tensor> {
        self.aux.forward(f)
    }

    pub fn heads(&self) -> FusionHeads<'_> {
        FusionHeads {
            seg: &self.seg,
            project: self.project.as_ref(),
        }
    }

    /// Feature grid produced for an input of the given size.
    pub fn grid_for(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (grid_len(h, self.cfg.output_stride), grid_len(w, self.cfg.output_stride))
    }

    pub fn branch(&self, level: &PyramidLevel, mode: Mode, with_aux: bool) -> Result<BranchOutput> {
        let (f_b, f) = self.trunk_forward(&level.image, mode)?;
        let mut gates = self.attention_heads(&f_b, mode)?.into_iter();
        let aux_scores = if with_aux { Some(self.aux_head(&f)?) } else { None };
        Ok(BranchOutput {
            scale: level.scale,
            alpha: gates.next(),
            beta: gates.next(),
            f_b,
            f,
            aux_scores,
        })
    }

    pub fn branches(&self, image: &Tensor, scales: &[f64], mode: Mode, with_aux: bool) -> Result<Vec<BranchOutput>> {
        let p = build_pyramid(image, scales)?;
        p.levels.iter().map(|l| self.branch(l, mode, with_aux)).collect()
    }

    /// Inference graph: fused scores at input resolution for `scales`.
    pub fn forward(&self, image: &Tensor, scales: &[f64], mode: Mode) -> Result<Tensor> {
        let branches = self.branches(image, scales, mode, false)?;
        fusion::run(self.strategy, &branches, &self.heads(), pyramid::spatial(image))
    }

    /// Training graph over [`Self::train_scales`]: hierarchical strategies
    /// use the explicit two-scale composition; aux scores are upsampled to
    /// the input size.
    pub fn forward_train(&self, image: &Tensor, mode: Mode) -> Result<TrainOutput> {
        let out_size = pyramid::spatial(image);
        let scales = self.train_scales();
        let with_aux = scales.len() > 1;
        let branches = self.branches(image, &scales, mode, with_aux)?;
        let main = if branches.len() == 2 && self.strategy.is_hierarchical() {
            fusion::two_scale(self.strategy, &branches[0], &branches[1], &self.heads(), out_size)?
        } else {
            fusion::run(self.strategy, &branches, &self.heads(), out_size)?
        };
        let aux = branches
            .iter()
            .filter_map(|b| b.aux_scores.as_ref())
            .map(|a| pyramid::resize_to_grid(a, out_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainOutput { main, aux, branches })
    }
}

/// Per-pixel argmax over channels of a `C x H x W` score buffer; ties go to
/// the lowest class index.
pub fn label_from_scores(scores: &[f32], n_class: usize, (h, w): (usize, usize)) -> crate::data::LabelMap {
    let plane = h * w;
    let data = (0..plane)
        .map(|i| {
            let mut best = 0;
            let mut best_v = scores[i];
            for c in 1..n_class {
                let v = scores[c * plane + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    crate::data::LabelMap { width: w, height: h, data }
}
