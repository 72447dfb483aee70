//! Named parameter sets and the handful of layers the networks are built
//! from. Activations are NHWC throughout, so every channel-wise layer acts
//! on the last dimension.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameters of one model component, keyed by dotted path.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter, detached from the autograd graph.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every parameter from `tensors[prefix + name]`. The name set
    /// and shapes must match exactly.
    pub fn load(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = tensors.keys().filter(|k| k.starts_with(prefix)).count();
        if expected != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "'{prefix}*' holds {expected} arrays, component expects {}",
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array '{key}'")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "'{key}' has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Copies all values from `other`, which must have the same structure.
    pub fn copy_from(&self, other: &ParamSet) -> Result<()> {
        self.check_same_structure(other)?;
        for (name, var) in &self.vars {
            var.set(other.vars[name].as_tensor())?;
        }
        Ok(())
    }

    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::Shape(format!(
                "parameter sets differ in size: {} vs {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            match other.vars.get(name) {
                Some(o) if o.dims() == var.dims() => {}
                Some(o) => {
                    return Err(Error::Shape(format!(
                        "parameter '{name}': {:?} vs {:?}",
                        var.dims(),
                        o.dims()
                    )))
                }
                None => return Err(Error::Shape(format!("parameter '{name}' missing"))),
            }
        }
        Ok(())
    }
}

/// Creates parameters from a seeded stream so initialization is
/// reproducible (the backend's own RNG cannot be seeded).
pub struct ParamBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    device: Device,
    prefix: String,
    vars: BTreeMap<String, Var>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, device: &Device) -> Self {
        Self { rng, device: device.clone(), prefix: String::new(), vars: BTreeMap::new() }
    }

    pub fn finish(self) -> ParamSet {
        ParamSet { vars: self.vars }
    }

    /// Runs `f` with `name.` appended to the parameter prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn insert(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(format!("{}{name}", self.prefix), var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }
}

/// Fully connected layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[out_dim, in_dim], bound)?,
                bias: pb.uniform("bias", &[out_dim], bound)?,
                in_dim,
                out_dim,
            })
        })
    }

    /// All-zero layer; used as the last projection of residual branches.
    pub fn zeros(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.constant("weight", &[out_dim, in_dim], 0.0)?,
                bias: pb.constant("bias", &[out_dim], 0.0)?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn with_bias(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: f32) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[out_dim, in_dim], bound)?,
                bias: pb.constant("bias", &[out_dim], bias)?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let last = *dims.last().ok_or_else(|| Error::Shape("dense input is a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!("dense expects {} inputs, got {last}", self.in_dim)));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over channels with a learned affine map.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelNorm {
    const EPS: f64 = 1e-6;

    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self { gamma: pb.constant("gamma", &[dim], 1.0)?, beta: pb.constant("beta", &[dim], 0.0)? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Dense 3x3 convolution with zero padding, on NHWC input.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv3x3 {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / ((in_dim * 9) as f32).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[out_dim, in_dim, 3, 3], bound)?,
                bias: pb.uniform("bias", &[out_dim], bound)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let nchw = x.permute((0, 3, 1, 2))?.contiguous()?;
        let y = nchw.conv2d(&self.weight, 1, 1, 1, 1)?;
        Ok(y.permute((0, 2, 3, 1))?.broadcast_add(&self.bias)?)
    }
}

/// `(N, H, W, C)` to `(N, H/p, W/p, p*p*C)`: non-overlapping patches, which
/// turns a stride-`p`, kernel-`p` convolution into a [`Dense`] layer.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    if p == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((n, h / p, p, w / p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((n, h / p, w / p, p * p * c))?)
}

/// Inverse of [`patchify`]: `(N, H, W, p*p*C)` to `(N, H*p, W*p, C)`.
pub fn unpatchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, h, w, pc) = x.dims4()?;
    let c = pc / (p * p);
    Ok(x.reshape((n, h, w, p, p, c))?.permute((0, 1, 3, 2, 4, 5))?.reshape((n, h * p, w * p, c))?)
}

/// Numerically safe softplus, `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Scalar sum of `a * b`.
pub fn inner(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a * b)?.sum_all()?)
}

pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
