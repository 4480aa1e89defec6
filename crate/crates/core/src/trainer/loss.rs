use candle_core::{DType, Device, Tensor};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::layers::log_softmax;

/// One-hot targets for a batch; ignored pixels are all-zero rows.
pub struct Targets {
    pub onehot: Tensor,
    pub valid: usize,
}

pub fn targets(labels: &[&LabelMap], n_class: usize, dtype: DType, device: &Device) -> Result<Targets> {
    let first = labels.first().ok_or_else(|| Error::Contract("empty label batch".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut v = vec![0f32; labels.len() * n_class * plane];
    let mut valid = 0;
    for (n, l) in labels.iter().enumerate() {
        if (l.height, l.width) != (h, w) {
            return Err(Error::Contract("label maps in a batch differ in size".into()));
        }
        for (i, &c) in l.data.iter().enumerate() {
            if (c as usize) < n_class {
                v[(n * n_class + c as usize) * plane + i] = 1.0;
                valid += 1;
            }
        }
    }
    Ok(Targets {
        onehot: Tensor::from_vec(v, (labels.len(), n_class, h, w), device)?.to_dtype(dtype)?,
        valid,
    })
}

/// Mean cross-entropy over non-ignored pixels. Scalar tensor.
pub fn cross_entropy(scores: &Tensor, target: &Targets) -> Result<Tensor> {
    if scores.dims() != target.onehot.dims() {
        return Err(Error::Contract(format!(
            "scores {:?} do not match targets {:?}",
            scores.dims(),
            target.onehot.dims()
        )));
    }
    if target.valid == 0 {
        return Ok(Tensor::zeros((), scores.dtype(), scores.device())?);
    }
    let picked = (log_softmax(scores)? * &target.onehot)?.sum_all()?;
    Ok((picked.neg()? / target.valid as f64)?)
}

/// Loss applied to the fused output. Cross-entropy stands in for the
/// region-mutual-information loss; implementors can supply another.
pub trait MainLoss {
    fn name(&self) -> &str;
    fn loss(&self, scores: &Tensor, target: &Targets) -> Result<Tensor>;
}

pub struct CrossEntropy;

impl MainLoss for CrossEntropy {
    fn name(&self) -> &str {
        "cross-entropy"
    }

    fn loss(&self, scores: &Tensor, target: &Targets) -> Result<Tensor> {
        cross_entropy(scores, target)
    }
}

/// `main_loss(main) + aux_weight * sum_s CE(aux_s)`.
pub fn compute_loss(
    main: &Tensor,
    aux: &[Tensor],
    target: &Targets,
    aux_weight: f64,
    main_loss: &dyn MainLoss,
) -> Result<Tensor> {
    if target.valid == 0 {
        log::warn!("every pixel in the batch is ignored; loss is zero");
    }
    let mut total = main_loss.loss(main, target)?;
    if aux_weight > 0.0 {
        for a in aux {
            total = (total + (cross_entropy(a, target)? * aux_weight)?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IGNORE_INDEX;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn labels(h: usize, w: usize, seed: u64, n_class: u8) -> LabelMap {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LabelMap {
            width: w,
            height: h,
            data: (0..h * w).map(|_| rng.gen_range(0..n_class)).collect(),
        }
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let l = labels(4, 5, 0, 8);
        let t = targets(&[&l], 8, DType::F64, &Device::Cpu).unwrap();
        let s = Tensor::zeros((1, 8, 4, 5), DType::F64, &Device::Cpu).unwrap();
        let ce = scalar(&cross_entropy(&s, &t).unwrap());
        assert!((ce - 8f64.ln()).abs() < 1e-12);
        assert!((ce - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_scores_approach_zero() {
        let l = labels(3, 3, 1, 8);
        let t = targets(&[&l], 8, DType::F64, &Device::Cpu).unwrap();
        let s = (&t.onehot * 50.0).unwrap();
        let loss = compute_loss(&s, &[], &t, 0.0, &CrossEntropy).unwrap();
        assert!(scalar(&loss) < 1e-15);
    }

    #[test]
    fn aux_term_adds_strictly() {
        let l = labels(3, 3, 2, 8);
        let t = targets(&[&l], 8, DType::F64, &Device::Cpu).unwrap();
        let main = (&t.onehot * 10.0).unwrap();
        let aux = vec![Tensor::zeros((1, 8, 3, 3), DType::F64, &Device::Cpu).unwrap()];
        let a = scalar(&compute_loss(&main, &aux, &t, 0.0, &CrossEntropy).unwrap());
        let b = scalar(&compute_loss(&main, &aux, &t, 0.4, &CrossEntropy).unwrap());
        assert!(b > a);
        assert!((b - a - 0.4 * 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut l = labels(2, 2, 3, 4);
        l.data[0] = IGNORE_INDEX;
        let t = targets(&[&l], 4, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.valid, 3);
        let mut s = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        // garbage at the ignored pixel must not matter
        let mut v: Vec<f64> = s.flatten_all().unwrap().to_vec1().unwrap();
        v[0] = 1e3;
        s = Tensor::from_vec(v, (1, 4, 2, 2), &Device::Cpu).unwrap();
        assert!((scalar(&cross_entropy(&s, &t).unwrap()) - 4f64.ln()).abs() < 1e-12);

        let all = LabelMap::filled(2, 2, IGNORE_INDEX);
        let t = targets(&[&all], 4, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&compute_loss(&s, &[], &t, 0.4, &CrossEntropy).unwrap()), 0.0);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let (a, b) = (labels(4, 4, 5, 3), labels(4, 4, 6, 3));
        let sa = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let sb = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let t1 = targets(&[&a, &b], 3, DType::F64, &Device::Cpu).unwrap();
        let t2 = targets(&[&b, &a], 3, DType::F64, &Device::Cpu).unwrap();
        let l1 = scalar(&cross_entropy(&Tensor::cat(&[&sa, &sb], 0).unwrap(), &t1).unwrap());
        let l2 = scalar(&cross_entropy(&Tensor::cat(&[&sb, &sa], 0).unwrap(), &t2).unwrap());
        assert!((l1 - l2).abs() < 1e-12);
    }
}
