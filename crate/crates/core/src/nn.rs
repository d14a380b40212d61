//! Layers built on [`ParamStore`] parameters.

use candle_core::{DType, Device, Tensor, D};

use crate::conv;
use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        Self::with_init(store, name, inp, out, bias, Init::Uniform(1.0 / (inp as f64).sqrt()))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Self::with_init(store, name, inp, out, true, Init::Zeros)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[out, inp], init)?;
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            bias: store.get(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            bias: store.get(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// `x` is (B, C, ...).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (b, c) = (dims[0], dims[1]);
        let g = x.reshape((b, self.groups, ()))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape(dims.as_slice())?;
        let mut affine = vec![1; dims.len()];
        affine[1] = c;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(affine.as_slice())?)?
            .broadcast_add(&self.bias.reshape(affine.as_slice())?)?)
    }
}

fn largest_divisor_at_most(n: usize, max: usize) -> usize {
    (1..=max.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (inp * kernel * kernel) as f64;
        Ok(Self {
            weight: store.get(
                &format!("{name}.weight"),
                &[out, inp, kernel, kernel],
                Init::Uniform(1.0 / fan_in.sqrt()),
            )?,
            bias: store.get(&format!("{name}.bias"), &[out], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv::conv2d(
            x,
            &self.weight,
            Some(&self.bias),
            self.stride,
            self.padding,
        )?)
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is (B, Lq, C); `k` and `v` are (B, Lk, C). `mask` is an additive
/// bias broadcastable to (B, heads, Lq, Lk). Returns the attended values
/// (B, Lq, C) and the attention weights (B, heads, Lq, Lk).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let dh = c / heads;
    let split =
        |t: &Tensor, l: usize| -> Result<Tensor> { Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?) };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let mut scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = scores.broadcast_add(m)?;
    }
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&vh)?.transpose(1, 2)?.reshape((b, lq, c))?;
    Ok((out, weights))
}

/// Additive mask hiding key positions at or beyond each row's length.
/// Returns (B, 1, 1, L).
pub fn key_padding_mask(lengths: &[usize], len: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| (0..len).map(move |j| if j < n { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(values, (lengths.len(), 1, 1, len), device)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of integer timesteps: (B,) → (B, dim).
pub fn timestep_embedding(steps: &[usize], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        for j in 0..half {
            let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
            values.push((s as f64 * freq).sin());
        }
        for j in 0..half {
            let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
            values.push((s as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            values.push(0.0);
        }
    }
    Ok(Tensor::from_vec(values, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Row-wise L2 normalization along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn attention_rows_sum_to_one_and_mask_hides_keys() {
        let mut store = ParamStore::new(1, DType::F64);
        let q = store.get("q", &[2, 5, 8], Init::Normal(1.0)).unwrap();
        let k = store.get("k", &[2, 4, 8], Init::Normal(1.0)).unwrap();
        let mask = key_padding_mask(&[4, 2], 4, store.device(), store.dtype()).unwrap();
        let (_, w) = attention(&q, &k, &k, 2, Some(&mask)).unwrap();
        let sums = w
            .sum(D::Minus1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let hidden = w.narrow(0, 1, 1).unwrap().narrow(3, 2, 2).unwrap();
        assert_eq!(
            hidden.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(),
            0.0
        );
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut store = ParamStore::new(2, DType::F64);
        let x = store.get("x", &[2, 4, 3, 3], Init::Normal(3.0)).unwrap();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 2, 18)).unwrap();
        let mean = y.mean(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_matches_candle_reference() {
        let mut store = ParamStore::new(3, DType::F32);
        let x = store.get("x", &[3, 6], Init::Normal(2.0)).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
        let ours = ln.forward(&x).unwrap();
        let w = Tensor::ones(6, DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(6, DType::F32, &Device::Cpu).unwrap();
        let theirs = candle_nn::ops::layer_norm(&x, &w, &b, 1e-5).unwrap();
        let d = (ours - theirs)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let store = ParamStore::new(0, DType::F32);
        let e = timestep_embedding(&[0, 50, 100], 16, store.device(), store.dtype()).unwrap();
        assert_eq!(e.dims(), &[3, 16]);
        let first = e.get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&first[..8], &[0.0; 8]);
        assert_eq!(&first[8..], &[1.0; 8]);
    }
}
