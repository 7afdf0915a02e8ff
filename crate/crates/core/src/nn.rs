//! Small neural-network toolkit on top of `candle-core`: named parameter
//! sets with content digests, initializers, a handful of differentiable
//! building blocks and the two optimizers used by the trainers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// Deterministic RNG for `(seed, stream)`. Distinct streams never share state.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = normal_vec(rng, n, std);
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Raw little-endian bytes of a tensor in row-major order.
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    let bytes = match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        other => return Err(invalid(format!("unsupported dtype {other:?}"))),
    };
    Ok(bytes)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// SHA-256 over the concatenated little-endian parameter bytes in name order.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for t in self.tensors.values() {
            h.update(tensor_le_bytes(t)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy with no autograd tracking.
    pub fn snapshot(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, t) in &self.tensors {
            out.insert(k.clone(), t.detach().copy()?);
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (k, t) in &self.tensors {
            out.insert(k.clone(), t.to_dtype(dtype)?.detach());
        }
        Ok(out)
    }

    /// Adds `prefix` to every name.
    pub fn prefixed(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (k, t) in &self.tensors {
            out.insert(format!("{prefix}{k}"), t.clone());
        }
        out
    }

    /// Sub-set whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (k, t) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for (k, t) in other.iter() {
            self.insert(k.clone(), t.clone());
        }
    }

    /// Bit-level equality of names, shapes, dtypes and contents.
    pub fn bit_equal(&self, other: &ParamSet) -> Result<bool> {
        if self.tensors.len() != other.tensors.len() {
            return Ok(false);
        }
        for ((ka, a), (kb, b)) in self.tensors.iter().zip(other.tensors.iter()) {
            if ka != kb || a.dims() != b.dims() || a.dtype() != b.dtype() {
                return Ok(false);
            }
            if tensor_le_bytes(a)? != tensor_le_bytes(b)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Trainable view of a [`ParamSet`]: one `Var` per entry.
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, t) in params.iter() {
            vars.insert(k.clone(), Var::from_tensor(&t.detach().copy()?)?);
        }
        Ok(Self { vars })
    }

    /// Tracked tensors sharing storage with the vars; updates through
    /// [`Var::set`] are visible through them.
    pub fn params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().clone());
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn snapshot(&self) -> Result<ParamSet> {
        self.params().snapshot()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum (`buf = m * buf + g; w -= lr * buf`).
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    buffers: ParamSet,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            buffers: ParamSet::new(),
        }
    }

    pub fn step(&mut self, vars: &VarSet, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let buf = match self.buffers.tensors.get(name) {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g.detach().copy()?,
            };
            var.set(&(var.as_tensor() - (&buf * lr)?)?)?;
            self.buffers.insert(name.clone(), buf.detach());
        }
        Ok(())
    }

    pub fn state(&self) -> &ParamSet {
        &self.buffers
    }

    pub fn load_state(&mut self, state: ParamSet) {
        self.buffers = state;
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    first: ParamSet,
    second: ParamSet,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    pub fn step(&mut self, vars: &VarSet, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.tensors.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.tensors.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> ParamSet {
        let mut out = self.first.prefixed("m/");
        out.extend(&self.second.prefixed("v/"));
        out
    }

    pub fn load_state(&mut self, state: &ParamSet, steps_taken: usize) {
        self.first = state.strip_prefix("m/");
        self.second = state.strip_prefix("v/");
        self.step = steps_taken;
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// 2-D convolution with bias; weight `[out, in, k, k]`, bias `[out]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let y = x.conv2d(w, padding, stride, 1, 1)?;
    let c = b.dim(0)?;
    Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
}

/// `x @ w + b` over the last axis; `w` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(w)?.broadcast_add(b)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

/// Row-stochastic `[out, in]` matrix of 1-D linear interpolation weights
/// (half-pixel centers, edge clamped).
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let w1 = src - i0 as f64;
        m[o * inp + i0] += 1.0 - w1;
        m[o * inp + i1] += w1;
    }
    m
}

/// Nearest-neighbour upsampling. candle's backward for this op replaces the
/// input's accumulated gradient instead of adding to it, so the op gets a
/// private input node (an exact identity) that has no other consumers.
pub fn upsample_nearest2d(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(x.affine(1.0, 0.0)?.upsample_nearest2d(h, w)?)
}

/// Differentiable bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rw = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let rh = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let y = x.broadcast_matmul(&rw)?;
    Ok(rh.broadcast_matmul(&y)?)
}

/// Scalar value of a rank-0 (or single-element) tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if to_f64_vec(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Index of the last axis, as candle's `D::Minus1`.
pub const LAST: D = D::Minus1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(8, 4), (4, 4), (64, 32), (5, 3)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::full(3.5f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = bilinear_resize(&x, 8, 8).unwrap();
        for v in to_f64_vec(&y).unwrap() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn digest_tracks_content() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap());
        let b = a.snapshot().unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = ParamSet::new();
        c.insert("w", Tensor::new(&[1.0f32, 2.5], &Device::Cpu).unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::new(&[[1.0f64, -2.0, 0.5], [100.0, 99.0, -50.0]], &Device::Cpu).unwrap();
        let a = to_f64_vec(&log_softmax(&x, 1).unwrap()).unwrap();
        let b = to_f64_vec(&softmax(&x, 1).unwrap().log().unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9 || (p.is_infinite() && q.is_infinite()));
        }
    }

    #[test]
    fn upsample_gradient_accumulates_over_consumers() {
        let x = Var::from_tensor(&Tensor::arange(0f64, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap()).unwrap();
        let up = upsample_nearest2d(x.as_tensor(), 4, 4).unwrap();
        let loss = (up.sum_all().unwrap() + (x.as_tensor() * 3.0).unwrap().sum_all().unwrap()).unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(to_f64_vec(g.get(x.as_tensor()).unwrap()).unwrap(), vec![7.0; 4]);
    }
}
