//! Layer descriptors and their forward/backward kernels.
//!
//! Activations carry a leading batch axis; the per-sample shapes are
//! `[C, H, W]` for spatial layers and `[F]` after pooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::gemm::gemm;
use crate::numerics::Tensor;

pub const DEFAULT_GN_EPS: f64 = 1e-5;

/// Group count used when a descriptor does not specify one: the largest
/// divisor of `channels` up to 8 that leaves at least two channels per group.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels / 2))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        eps: f64,
    },
    Relu,
    GlobalAvgPool,
    /// Terminal loss marker; the network forward pass stops before it and
    /// emits logits.
    SoftmaxCrossEntropy {
        classes: usize,
    },
}

impl LayerSpec {
    /// 3x3-style convolution with "same" padding.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn group_norm(channels: usize) -> Self {
        LayerSpec::GroupNorm {
            channels,
            groups: default_groups(channels),
            eps: DEFAULT_GN_EPS,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::GroupNorm { .. } => "group_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    /// Checks hyperparameters that do not depend on the input shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(self.kind(), msg));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("channels, kernel and stride must be positive");
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("widths must be positive");
                }
            }
            LayerSpec::GroupNorm {
                channels,
                groups,
                eps,
            } => {
                if groups == 0 || channels % groups != 0 {
                    return bad("channel count must be divisible by group count");
                }
                if eps.is_nan() || eps <= 0.0 {
                    return bad("eps must be positive");
                }
            }
            LayerSpec::SoftmaxCrossEntropy { classes } => {
                if classes < 2 {
                    return bad("needs at least two classes");
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
        }
        Ok(())
    }

    /// Parameter names and shapes, in declaration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            LayerSpec::GroupNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            _ => Vec::new(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: String| {
            Err(Error::config(
                self.kind(),
                format!("expected input {want}, got {input:?}"),
            ))
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return mismatch(format!("[{in_channels}, H, W]"));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return mismatch(format!("spatial size >= kernel {kernel}"));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.iter().product::<usize>() != in_features {
                    return mismatch(format!("{in_features} features"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::GroupNorm { channels, .. } => {
                if input.is_empty() || input[0] != channels {
                    return mismatch(format!("{channels} channels"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return mismatch("[C, H, W]".into());
                }
                Ok(vec![input[0]])
            }
            LayerSpec::SoftmaxCrossEntropy { classes } => {
                if input != [classes] {
                    return mismatch(format!("[{classes}] logits"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv2d in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding}"
            ),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear in={in_features} out={out_features}"),
            LayerSpec::GroupNorm {
                channels,
                groups,
                eps,
            } => write!(f, "group_norm channels={channels} groups={groups} eps={eps:e}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::GlobalAvgPool => f.write_str("global_avg_pool"),
            LayerSpec::SoftmaxCrossEntropy { classes } => {
                write!(f, "softmax_cross_entropy classes={classes}")
            }
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// Parses `kind key=value ...`. Omitted conv2d stride/padding default to
    /// 1 and `kernel / 2`; omitted group_norm groups/eps use the defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words
            .next()
            .ok_or_else(|| Error::config("layer", "empty layer descriptor"))?;
        let mut kv = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::config(kind, format!("expected key=value, got `{w}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut take = |key: &str| kv.remove(key);
        let num = |key: &str, v: Option<String>| -> Result<Option<usize>> {
            v.map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::config(kind, format!("`{key}` must be an integer")))
            })
            .transpose()
        };
        let required = |key: &str, v: Option<usize>| {
            v.ok_or_else(|| Error::config(kind, format!("missing `{key}`")))
        };
        let spec = match kind {
            "conv2d" => {
                let in_channels = required("in", num("in", take("in"))?)?;
                let out_channels = required("out", num("out", take("out"))?)?;
                let kernel = required("kernel", num("kernel", take("kernel"))?)?;
                let stride = num("stride", take("stride"))?.unwrap_or(1);
                let padding = num("padding", take("padding"))?.unwrap_or(kernel / 2);
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                }
            }
            "linear" => LayerSpec::Linear {
                in_features: required("in", num("in", take("in"))?)?,
                out_features: required("out", num("out", take("out"))?)?,
            },
            "group_norm" => {
                let channels = required("channels", num("channels", take("channels"))?)?;
                let groups = num("groups", take("groups"))?.unwrap_or(default_groups(channels));
                let eps = match take("eps") {
                    Some(v) => v
                        .parse::<f64>()
                        .map_err(|_| Error::config(kind, "`eps` must be a number"))?,
                    None => DEFAULT_GN_EPS,
                };
                LayerSpec::GroupNorm {
                    channels,
                    groups,
                    eps,
                }
            }
            "relu" => LayerSpec::Relu,
            "global_avg_pool" => LayerSpec::GlobalAvgPool,
            "softmax_cross_entropy" => LayerSpec::SoftmaxCrossEntropy {
                classes: required("classes", num("classes", take("classes"))?)?,
            },
            other => return Err(Error::config(other, "unknown layer kind")),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(kind, format!("unknown key `{k}`")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for LayerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Saved activations needed by a layer's backward pass.
#[derive(Debug)]
pub(crate) enum LayerCache {
    Conv {
        cols: Vec<f64>,
        in_shape: Vec<usize>,
        out_hw: (usize, usize),
    },
    Linear {
        input: Vec<f64>,
        in_shape: Vec<usize>,
    },
    GroupNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Pool {
        in_shape: Vec<usize>,
    },
    Empty,
}

/// Gradients produced by one layer's backward pass.
pub(crate) struct LayerGrads {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl LayerSpec {
    /// Batched forward. `params` follow [`LayerSpec::param_shapes`] order.
    pub(crate) fn forward(
        &self,
        params: &[&Tensor],
        input: &Tensor,
        record: bool,
    ) -> Result<(Tensor, LayerCache)> {
        let batch = input.shape()[0];
        let sample_shape = &input.shape()[1..];
        let out_sample = self.output_shape(sample_shape)?;
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&out_sample);
        let x = input.data();
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (weight, bias) = (params[0].data(), params[1].data());
                let (h, w) = (sample_shape[1], sample_shape[2]);
                let (ho, wo) = (out_sample[1], out_sample[2]);
                let ck2 = in_channels * kernel * kernel;
                let (in_len, out_len) = (in_channels * h * w, out_channels * ho * wo);
                let mut out = vec![0.0; batch * out_len];
                let mut all_cols = if record {
                    vec![0.0; batch * ck2 * ho * wo]
                } else {
                    Vec::new()
                };
                let mut scratch = vec![0.0; ck2 * ho * wo];
                for n in 0..batch {
                    let cols: &mut [f64] = if record {
                        &mut all_cols[n * ck2 * ho * wo..(n + 1) * ck2 * ho * wo]
                    } else {
                        &mut scratch
                    };
                    im2col(
                        &x[n * in_len..(n + 1) * in_len],
                        (in_channels, h, w),
                        kernel,
                        stride,
                        padding,
                        (ho, wo),
                        cols,
                    );
                    let o = &mut out[n * out_len..(n + 1) * out_len];
                    for (co, row) in o.chunks_mut(ho * wo).enumerate() {
                        row.fill(bias[co]);
                    }
                    gemm(out_channels, ck2, ho * wo, weight, false, cols, false, 1.0, o);
                }
                let cache = if record {
                    LayerCache::Conv {
                        cols: all_cols,
                        in_shape: input.shape().to_vec(),
                        out_hw: (ho, wo),
                    }
                } else {
                    LayerCache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let (weight, bias) = (params[0].data(), params[1].data());
                let mut out = Vec::with_capacity(batch * out_features);
                for _ in 0..batch {
                    out.extend_from_slice(bias);
                }
                gemm(batch, in_features, out_features, x, false, weight, true, 1.0, &mut out);
                let cache = if record {
                    LayerCache::Linear {
                        input: x.to_vec(),
                        in_shape: input.shape().to_vec(),
                    }
                } else {
                    LayerCache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::GroupNorm {
                channels,
                groups,
                eps,
            } => {
                let (gamma, beta) = (params[0].data(), params[1].data());
                let spatial: usize = sample_shape[1..].iter().product();
                let cpg = channels / groups;
                let group_len = cpg * spatial;
                let mut out = vec![0.0; x.len()];
                let mut xhat = if record { vec![0.0; x.len()] } else { Vec::new() };
                let mut inv_stds = Vec::with_capacity(if record { batch * groups } else { 0 });
                for n in 0..batch {
                    for g in 0..groups {
                        let start = (n * channels + g * cpg) * spatial;
                        let seg = &x[start..start + group_len];
                        // Shifted by the first element so a constant group has
                        // an exactly representable mean.
                        let shift = seg[0];
                        let mean = shift
                            + seg.iter().map(|v| v - shift).sum::<f64>() / group_len as f64;
                        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / group_len as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        for (j, &v) in seg.iter().enumerate() {
                            let c = g * cpg + j / spatial;
                            let xh = (v - mean) * inv_std;
                            out[start + j] = gamma[c] * xh + beta[c];
                            if record {
                                xhat[start + j] = xh;
                            }
                        }
                        if record {
                            inv_stds.push(inv_std);
                        }
                    }
                }
                let cache = if record {
                    LayerCache::GroupNorm {
                        xhat,
                        inv_std: inv_stds,
                    }
                } else {
                    LayerCache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::Relu => {
                let out: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let cache = if record {
                    LayerCache::Relu {
                        mask: x.iter().map(|&v| v > 0.0).collect(),
                    }
                } else {
                    LayerCache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::GlobalAvgPool => {
                let spatial = sample_shape[1] * sample_shape[2];
                let out: Vec<f64> = x
                    .chunks(spatial)
                    .map(|c| c.iter().sum::<f64>() / spatial as f64)
                    .collect();
                let cache = if record {
                    LayerCache::Pool {
                        in_shape: input.shape().to_vec(),
                    }
                } else {
                    LayerCache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerSpec::SoftmaxCrossEntropy { .. } => Ok((input.clone(), LayerCache::Empty)),
        }
    }

    /// Batched backward given the cache from a recorded forward pass.
    pub(crate) fn backward(
        &self,
        params: &[&Tensor],
        cache: LayerCache,
        upstream: &Tensor,
    ) -> Result<LayerGrads> {
        let dy = upstream.data();
        match (self, cache) {
            (
                &LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerCache::Conv {
                    cols,
                    in_shape,
                    out_hw: (ho, wo),
                },
            ) => {
                let weight = params[0].data();
                let (batch, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
                let ck2 = in_channels * kernel * kernel;
                let hw_out = ho * wo;
                let in_len = in_channels * h * w;
                let mut dweight = vec![0.0; out_channels * ck2];
                let mut dbias = vec![0.0; out_channels];
                let mut dx = vec![0.0; batch * in_len];
                let mut dcols = vec![0.0; ck2 * hw_out];
                for n in 0..batch {
                    let dyn_ = &dy[n * out_channels * hw_out..(n + 1) * out_channels * hw_out];
                    let cols_n = &cols[n * ck2 * hw_out..(n + 1) * ck2 * hw_out];
                    gemm(out_channels, hw_out, ck2, dyn_, false, cols_n, true, 1.0, &mut dweight);
                    for (co, row) in dyn_.chunks(hw_out).enumerate() {
                        dbias[co] += row.iter().sum::<f64>();
                    }
                    gemm(ck2, out_channels, hw_out, weight, true, dyn_, false, 0.0, &mut dcols);
                    col2im(
                        &dcols,
                        (in_channels, h, w),
                        kernel,
                        stride,
                        padding,
                        (ho, wo),
                        &mut dx[n * in_len..(n + 1) * in_len],
                    );
                }
                Ok(LayerGrads {
                    params: vec![
                        Tensor::new(params[0].shape().to_vec(), dweight)?,
                        Tensor::new(vec![out_channels], dbias)?,
                    ],
                    input: Tensor::new(in_shape, dx)?,
                })
            }
            (
                &LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                LayerCache::Linear { input, in_shape },
            ) => {
                let weight = params[0].data();
                let batch = in_shape[0];
                let mut dweight = vec![0.0; out_features * in_features];
                gemm(out_features, batch, in_features, dy, true, &input, false, 0.0, &mut dweight);
                let mut dbias = vec![0.0; out_features];
                for row in dy.chunks(out_features) {
                    for (b, v) in dbias.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                let mut dx = vec![0.0; batch * in_features];
                gemm(batch, out_features, in_features, dy, false, weight, false, 0.0, &mut dx);
                Ok(LayerGrads {
                    params: vec![
                        Tensor::new(vec![out_features, in_features], dweight)?,
                        Tensor::new(vec![out_features], dbias)?,
                    ],
                    input: Tensor::new(in_shape, dx)?,
                })
            }
            (
                &LayerSpec::GroupNorm {
                    channels, groups, ..
                },
                LayerCache::GroupNorm { xhat, inv_std },
            ) => {
                let gamma = params[0].data();
                let shape = upstream.shape();
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product();
                let cpg = channels / groups;
                let group_len = cpg * spatial;
                let m = group_len as f64;
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dx = vec![0.0; dy.len()];
                let mut dxhat = vec![0.0; group_len];
                for n in 0..batch {
                    for g in 0..groups {
                        let start = (n * channels + g * cpg) * spatial;
                        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                        for j in 0..group_len {
                            let c = g * cpg + j / spatial;
                            let (d, xh) = (dy[start + j], xhat[start + j]);
                            dgamma[c] += d * xh;
                            dbeta[c] += d;
                            dxhat[j] = d * gamma[c];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh;
                        }
                        let s = inv_std[n * groups + g] / m;
                        for j in 0..group_len {
                            dx[start + j] = s * (m * dxhat[j] - sum_d - xhat[start + j] * sum_dx);
                        }
                    }
                }
                Ok(LayerGrads {
                    params: vec![
                        Tensor::new(vec![channels], dgamma)?,
                        Tensor::new(vec![channels], dbeta)?,
                    ],
                    input: Tensor::new(shape.to_vec(), dx)?,
                })
            }
            (LayerSpec::Relu, LayerCache::Relu { mask }) => {
                let dx = dy
                    .iter()
                    .zip(&mask)
                    .map(|(&d, &m)| if m { d } else { 0.0 })
                    .collect();
                Ok(LayerGrads {
                    params: Vec::new(),
                    input: Tensor::new(upstream.shape().to_vec(), dx)?,
                })
            }
            (LayerSpec::GlobalAvgPool, LayerCache::Pool { in_shape }) => {
                let spatial = in_shape[2] * in_shape[3];
                let scale = 1.0 / spatial as f64;
                let mut dx = Vec::with_capacity(dy.len() * spatial);
                for &d in dy {
                    dx.extend(std::iter::repeat_n(d * scale, spatial));
                }
                Ok(LayerGrads {
                    params: Vec::new(),
                    input: Tensor::new(in_shape, dx)?,
                })
            }
            (LayerSpec::SoftmaxCrossEntropy { .. }, _) => Ok(LayerGrads {
                params: Vec::new(),
                input: upstream.clone(),
            }),
            (spec, _) => Err(Error::config(
                spec.kind(),
                "backward called without a recorded forward pass",
            )),
        }
    }
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`.
///
/// Returns the loss, the gradient with respect to the logits and the
/// per-row probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Input(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.data_mut()[i * k + y] -= 1.0;
    }
    grad.scale(inv_n);
    Ok((loss * inv_n, grad, probs))
}

/// Row-wise softmax of a `[N, K]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}
