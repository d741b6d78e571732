//! Frozen 18-layer residual image network used as the floor-plan feature
//! extractor. Inference only; batch norm is folded into the convolutions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

const BN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct Conv2d {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    /// `out_c x (in_c * k * k)`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

/// Channel-major feature map.
#[derive(Clone, Debug)]
struct FMap {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Conv2d {
    fn random(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            weight: (0..out_c * fan_in).map(|_| normal.sample(rng) as f32).collect(),
            bias: vec![0.0; out_c],
        }
    }

    fn forward(&self, x: &FMap) -> FMap {
        debug_assert_eq!(x.c, self.in_c);
        let ho = (x.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (x.w + 2 * self.pad - self.k) / self.stride + 1;
        let kk = self.in_c * self.k * self.k;
        let n = ho * wo;
        let mut cols = vec![0f32; kk * n];
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                dst[oy * wo + ox] =
                                    x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0f32; self.out_c * n];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        // SAFETY: operands are dense row-major buffers whose sizes match the
        // stated dimensions: weight out_c x kk, cols kk x n, out out_c x n.
        unsafe {
            matrixmultiply::sgemm(
                self.out_c,
                kk,
                n,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        FMap {
            c: self.out_c,
            h: ho,
            w: wo,
            data: out,
        }
    }
}

fn relu(x: &mut FMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn max_pool_3x3_s2(x: &FMap) -> FMap {
    let ho = (x.h + 2 - 3) / 2 + 1;
    let wo = (x.w + 2 - 3) / 2 + 1;
    let mut out = vec![f32::NEG_INFINITY; x.c * ho * wo];
    for c in 0..x.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && iy < x.h as isize && ix >= 0 && ix < x.w as isize {
                            m = m.max(x.data[(c * x.h + iy as usize) * x.w + ix as usize]);
                        }
                    }
                }
                out[(c * ho + oy) * wo + ox] = m;
            }
        }
    }
    FMap {
        c: x.c,
        h: ho,
        w: wo,
        data: out,
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    down: Option<Conv2d>,
}

impl BasicBlock {
    fn forward(&self, x: &FMap) -> FMap {
        let mut h = self.conv1.forward(x);
        relu(&mut h);
        let mut h = self.conv2.forward(&h);
        match &self.down {
            Some(d) => {
                let s = d.forward(x);
                h.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
            }
            None => h.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b),
        }
        relu(&mut h);
        h
    }
}

/// Single-channel ResNet-18 trunk with global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet18 {
    width: usize,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
}

impl ResNet18 {
    /// He-initialized network with `width` channels in the first stage
    /// (64 in the standard architecture).
    pub fn random(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("backbone width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::random(1, width, 7, 2, &mut rng);
        let mut blocks = Vec::new();
        let mut in_c = width;
        for stage in 0..4 {
            let out_c = width << stage;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let c_in = if b == 0 { in_c } else { out_c };
                let conv1 = Conv2d::random(c_in, out_c, 3, stride, &mut rng);
                let conv2 = Conv2d::random(out_c, out_c, 3, 1, &mut rng);
                let down = (stride != 1 || c_in != out_c).then(|| {
                    let mut d = Conv2d::random(c_in, out_c, 1, stride, &mut rng);
                    d.pad = 0;
                    d
                });
                blocks.push(BasicBlock { conv1, conv2, down });
            }
            in_c = out_c;
        }
        Ok(ResNet18 {
            width,
            stem,
            blocks,
        })
    }

    /// Loads torchvision-named weights (`conv1.weight`, `bn1.*`,
    /// `layer{1..4}.{0,1}.*`) from a safetensors file. The RGB stem is summed
    /// over input channels, which equals feeding the mask replicated to 3 channels.
    pub fn from_safetensors(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let load = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let t = st
                .tensor(name)
                .map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
            if t.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, got {:?}", t.dtype())));
            }
            let data = t
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok((t.shape().to_vec(), data))
        };
        let conv_bn = |conv: &str, bn: &str, stride: usize| -> Result<Conv2d> {
            let (shape, w) = load(&format!("{conv}.weight"))?;
            if shape.len() != 4 || shape[2] != shape[3] {
                return Err(Error::Checkpoint(format!("{conv}: unexpected shape {shape:?}")));
            }
            let (out_c, mut in_c, k) = (shape[0], shape[1], shape[2]);
            let mut w = w;
            if in_c == 3 {
                let mut summed = vec![0f32; out_c * k * k];
                for o in 0..out_c {
                    for c in 0..3 {
                        for i in 0..k * k {
                            summed[o * k * k + i] += w[(o * 3 + c) * k * k + i];
                        }
                    }
                }
                w = summed;
                in_c = 1;
            }
            let (_, gamma) = load(&format!("{bn}.weight"))?;
            let (_, beta) = load(&format!("{bn}.bias"))?;
            let (_, mean) = load(&format!("{bn}.running_mean"))?;
            let (_, var) = load(&format!("{bn}.running_var"))?;
            let fan = in_c * k * k;
            let mut bias = vec![0f32; out_c];
            for o in 0..out_c {
                let s = gamma[o] / (var[o] + BN_EPS).sqrt();
                w[o * fan..(o + 1) * fan].iter_mut().for_each(|v| *v *= s);
                bias[o] = beta[o] - mean[o] * s;
            }
            Ok(Conv2d {
                in_c,
                out_c,
                k,
                stride,
                pad: if k == 1 { 0 } else { k / 2 },
                weight: w,
                bias,
            })
        };
        let stem = conv_bn("conv1", "bn1", 2)?;
        let width = stem.out_c;
        let mut blocks = Vec::new();
        for stage in 0..4 {
            for b in 0..2 {
                let p = format!("layer{}.{b}", stage + 1);
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let conv1 = conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), stride)?;
                let conv2 = conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), 1)?;
                let down = if st.tensor(&format!("{p}.downsample.0.weight")).is_ok() {
                    Some(conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        stride,
                    )?)
                } else {
                    None
                };
                blocks.push(BasicBlock { conv1, conv2, down });
            }
        }
        Ok(ResNet18 {
            width,
            stem,
            blocks,
        })
    }

    /// Folded weights as `(name, shape, values)`, loadable with [`ResNet18::from_folded`].
    pub fn folded_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        let mut put = |name: String, c: &Conv2d| {
            out.push((
                format!("{name}.weight"),
                vec![c.out_c, c.in_c, c.k, c.k],
                c.weight.clone(),
            ));
            out.push((format!("{name}.bias"), vec![c.out_c], c.bias.clone()));
        };
        put("stem".into(), &self.stem);
        for (i, b) in self.blocks.iter().enumerate() {
            put(format!("block{i}.conv1"), &b.conv1);
            put(format!("block{i}.conv2"), &b.conv2);
            if let Some(d) = &b.down {
                put(format!("block{i}.down"), d);
            }
        }
        out
    }

    /// Rebuilds a network from [`ResNet18::folded_tensors`] output.
    pub fn from_folded(
        mut get: impl FnMut(&str) -> Option<(Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        let mut conv = |name: &str, stride: usize| -> Result<Option<Conv2d>> {
            let Some((shape, weight)) = get(&format!("{name}.weight")) else {
                return Ok(None);
            };
            let (_, bias) = get(&format!("{name}.bias"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}.bias")))?;
            if shape.len() != 4
                || weight.len() != shape.iter().product::<usize>()
                || bias.len() != shape[0]
            {
                return Err(Error::Checkpoint(format!("{name}: inconsistent shape {shape:?}")));
            }
            Ok(Some(Conv2d {
                in_c: shape[1],
                out_c: shape[0],
                k: shape[2],
                stride,
                pad: shape[2] / 2,
                weight,
                bias,
            }))
        };
        let missing = |n: &str| Error::Checkpoint(format!("missing backbone tensor {n}"));
        let stem = conv("stem", 2)?.ok_or_else(|| missing("stem"))?;
        let mut blocks = Vec::new();
        for i in 0..8 {
            let stride = if i >= 2 && i % 2 == 0 { 2 } else { 1 };
            let conv1 = conv(&format!("block{i}.conv1"), stride)?
                .ok_or_else(|| missing(&format!("block{i}.conv1")))?;
            let conv2 = conv(&format!("block{i}.conv2"), 1)?
                .ok_or_else(|| missing(&format!("block{i}.conv2")))?;
            let down = conv(&format!("block{i}.down"), stride)?;
            blocks.push(BasicBlock { conv1, conv2, down });
        }
        Ok(ResNet18 {
            width: stem.out_c,
            stem,
            blocks,
        })
    }

    pub fn out_dim(&self) -> usize {
        8 * self.width
    }

    /// Globally pooled final-stage features of a `res x res` mask, rescaled to
    /// unit root-mean-square so their scale does not depend on the weights.
    pub fn features(&self, mask: &[f32], res: usize) -> Result<Vec<f32>> {
        if mask.len() != res * res || res < 4 {
            return Err(Error::Shape(format!(
                "floor mask has {} cells, expected {res}x{res} with res >= 4",
                mask.len()
            )));
        }
        let x = FMap {
            c: 1,
            h: res,
            w: res,
            data: mask.to_vec(),
        };
        let mut h = self.stem.forward(&x);
        relu(&mut h);
        let mut h = max_pool_3x3_s2(&h);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let hw = (h.h * h.w) as f32;
        let mut pooled: Vec<f32> = (0..h.c)
            .map(|c| h.data[c * h.h * h.w..(c + 1) * h.h * h.w].iter().sum::<f32>() / hw)
            .collect();
        let rms = (pooled.iter().map(|v| v * v).sum::<f32>() / pooled.len() as f32).sqrt();
        if rms > 0.0 {
            pooled.iter_mut().for_each(|v| *v /= rms);
        }
        Ok(pooled)
    }
}
