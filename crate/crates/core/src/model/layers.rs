//! Parameter storage and the few layers the trunk and heads are built from.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Frozen running statistics; forward passes are pure.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Named parameters in creation order, initialized from a seeded stream so a
/// `(config, seed)` pair always yields the same model.
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: String, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, v, shape, true)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let n = shape.iter().product();
        self.push(name, vec![value; n], shape, trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k1() -> Self {
        Self { kernel: 1, stride: 1, dilation: 1, bias: true }
    }

    pub fn k3() -> Self {
        Self { kernel: 3, stride: 1, dilation: 1, bias: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }
}

/// 2-D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Option<Var>,
    pub in_channels: usize,
    pub out_channels: usize,
    spec: ConvSpec,
}

impl Conv {
    /// He-uniform weights for layers feeding a ReLU, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        let fan_in = (cin * spec.kernel * spec.kernel) as f64;
        Self::with_bound(store, name, cin, cout, spec, (6.0 / fan_in).sqrt())
    }

    /// Uniform `1/sqrt(fan_in)` weights for linear output projections.
    pub fn projection(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::with_bound(store, name, cin, cout, ConvSpec::k1(), 1.0 / (cin as f64).sqrt())
    }

    fn with_bound(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bound: f64,
    ) -> Result<Self> {
        let k = spec.kernel;
        let weight = store.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound)?;
        let bias = if spec.bias {
            Some(store.constant(format!("{name}.bias"), &[cout], 0.0, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cin = x.dim(1)?;
        if cin != self.in_channels {
            return Err(Error::Contract(format!(
                "convolution expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let pad = self.spec.dilation * (self.spec.kernel / 2);
        let y = if self.spec.kernel == 1 && self.spec.stride == 1 {
            // pointwise: a matmul over the channel axis
            let (n, _, h, w) = x.dims4()?;
            let wmat = self.weight.as_tensor().reshape((self.out_channels, cin))?;
            let xs = x.reshape((n, cin, h * w))?;
            wmat.broadcast_matmul(&xs)?.reshape((n, self.out_channels, h, w))?
        } else {
            x.conv2d(self.weight.as_tensor(), pad, self.spec.stride, self.spec.dilation, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `N x H x W` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{name}.gamma"), &[channels], 1.0, true)?,
            beta: store.constant(format!("{name}.beta"), &[channels], 0.0, true)?,
            running_mean: store.constant(format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: store.constant(format!("{name}.running_var"), &[channels], 1.0, false)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels;
        let shape = (1, c, 1, 1);
        let (mean, var) = match mode {
            Mode::Train => {
                let (n, _, h, w) = x.dims4()?;
                let count = (n * h * w) as f64;
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().reshape(c)? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().reshape(c)? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            ),
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

/// Conv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, spec)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Log-softmax over the channel axis (dim 1).
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// Spatial mean, kept as a `N x C x 1 x 1` map.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let z = Tensor::zeros((1, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = sigmoid(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| *x == 0.5));
    }

    #[test]
    fn pointwise_conv_matches_conv2d() {
        let mut store = ParamStore::new(3, DType::F64, Device::Cpu);
        let conv = Conv::projection(&mut store, "p", 4, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 6), &Device::Cpu).unwrap();
        let fast = conv.forward(&x).unwrap();
        let slow = x.conv2d(conv.weight.as_tensor(), 0, 1, 1, 1).unwrap();
        let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let conv = Conv::projection(&mut store, "p", 4, 3).unwrap();
        let x = Tensor::zeros((1, 5, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(conv.forward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_stats() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = (Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &Device::Cpu).unwrap().affine(3.0, 5.0)).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m: Vec<f64> = y.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap()
            .flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-9));
        let rm: Vec<f64> = store.get("bn.running_mean").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(rm.iter().all(|v| *v > 0.2));
        // eval is pure
        let a = bn.forward(&x, Mode::Eval).unwrap();
        let b = bn.forward(&x, Mode::Eval).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn log_softmax_is_shift_invariant_and_normalized() {
        let x = Tensor::randn(0f64, 2.0, (1, 5, 2, 2), &Device::Cpu).unwrap();
        let a = log_softmax(&x).unwrap();
        let b = log_softmax(&(&x + 100.0).unwrap()).unwrap();
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-9);
        let s: Vec<f64> = a.exp().unwrap().sum(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
