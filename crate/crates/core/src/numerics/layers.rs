//! Layers built from the kernels in `ops`, each with an explicit backward pass.
//!
//! Sequences are processed *packed*: the rows of all sequences in a batch are stacked
//! into one matrix and `segments` lists each sequence's `(start, len)`. Position-wise
//! layers see one big matrix; attention works per segment.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::ops::{gelu, gelu_backward, gemm, layer_norm, layer_norm_backward, LayerNormCache, LAYER_NORM_EPS};
use super::{Parameter, Tensor};
use crate::rng::Rng;
use crate::Result;

pub type Segments = [(usize, usize)];

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w: Parameter::new(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], std, rng)),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, k) = x.dims2()?;
        let m = self.fan_out();
        if k != self.fan_in() {
            return Err(crate::Error::Shape(format!("linear `{}` expects {} inputs, got {k}", self.w.name, self.fan_in())));
        }
        let mut y = Tensor::zeros(&[n, m]);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(self.b.value.data());
        }
        gemm(n, k, m, x.data(), false, self.w.value.data(), false, 1.0, y.data_mut());
        Ok(y)
    }

    /// Single-row forward for incremental decoding.
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let m = self.fan_out();
        let mut y = self.b.value.data().to_vec();
        gemm(1, x.len(), m, x, false, self.w.value.data(), false, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let (n, k) = (x.shape()[0], self.fan_in());
        let m = self.fan_out();
        gemm(k, n, m, x.data(), true, gy.data(), false, 1.0, self.w.grad.data_mut());
        let gb = self.b.grad.data_mut();
        for r in 0..n {
            for (g, v) in gb.iter_mut().zip(gy.row(r)) {
                *g += v;
            }
        }
        let mut gx = Tensor::zeros(&[n, k]);
        gemm(n, m, k, gy.data(), false, self.w.value.data(), true, 0.0, gx.data_mut());
        gx
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d]).expect("sized")),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, &self.gain.value, &self.bias.value)
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .zip(self.gain.value.data())
            .zip(self.bias.value.data())
            .map(|((v, g), b)| g * (v - mean) * s + b)
            .collect()
    }

    pub fn backward(&mut self, cache: &LayerNormCache, gy: &Tensor) -> Result<Tensor> {
        let (dx, dg, db) = layer_norm_backward(cache, &self.gain.value, gy)?;
        self.gain.grad.add_assign(&dg);
        self.bias.grad.add_assign(&db);
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Multi-head self-attention, optionally causal.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    qkv: Tensor,
    /// Per segment, per head: `len × len` attention probabilities.
    probs: Vec<Vec<Vec<f64>>>,
    ctx: Tensor,
}

/// Keys and values seen so far by one attention layer during incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Attention {
    pub fn new(name: &str, d: usize, heads: usize, causal: bool, out_std: f64, rng: &mut Rng) -> Self {
        assert_eq!(d % heads, 0, "model width must split evenly across heads");
        let std = 1.0 / (d as f64).sqrt();
        Self {
            qkv: Linear::new(&format!("{name}.qkv"), d, 3 * d, std, rng),
            proj: Linear::new(&format!("{name}.proj"), d, d, out_std, rng),
            heads,
            causal,
        }
    }

    fn width(&self) -> usize {
        self.proj.fan_in()
    }

    pub fn forward(&self, x: &Tensor, segments: &Segments) -> Result<(Tensor, AttentionCache)> {
        let d = self.width();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x)?;
        let n = x.shape()[0];
        let mut ctx = Tensor::zeros(&[n, d]);
        let mut probs = Vec::with_capacity(segments.len());
        let q_at = |r: usize, h: usize| &qkv.row(r)[h * dh..(h + 1) * dh];
        let k_at = |r: usize, h: usize| &qkv.row(r)[d + h * dh..d + (h + 1) * dh];
        let v_at = |r: usize, h: usize| &qkv.row(r)[2 * d + h * dh..2 * d + (h + 1) * dh];
        for &(start, len) in segments {
            let mut seg_probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let visible = if self.causal { i + 1 } else { len };
                    let qi = q_at(start + i, h);
                    let row = &mut p[i * len..i * len + visible];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = qi.iter().zip(k_at(start + j, h)).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                    let out = &mut ctx.row_mut(start + i)[h * dh..(h + 1) * dh];
                    for (j, &pij) in row.iter().enumerate() {
                        for (o, v) in out.iter_mut().zip(v_at(start + j, h)) {
                            *o += pij * v;
                        }
                    }
                }
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        let y = self.proj.forward(&ctx)?;
        Ok((y, AttentionCache { x: x.clone(), qkv, probs, ctx }))
    }

    pub fn backward(&mut self, cache: &AttentionCache, segments: &Segments, gy: &Tensor) -> Tensor {
        let d = self.width();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gctx = self.proj.backward(&cache.ctx, gy);
        let n = gctx.shape()[0];
        let mut gqkv = Tensor::zeros(&[n, 3 * d]);
        let qkv = &cache.qkv;
        for (s, &(start, len)) in segments.iter().enumerate() {
            for h in 0..self.heads {
                let p = &cache.probs[s][h];
                let mut dp = vec![0.0; len];
                for i in 0..len {
                    let visible = if self.causal { i + 1 } else { len };
                    let go = &gctx.row(start + i)[h * dh..(h + 1) * dh];
                    // dP_ij = go · v_j and dv_j += P_ij go
                    for j in 0..visible {
                        let vj = &qkv.row(start + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let pij = p[i * len + j];
                        let gv = &mut gqkv.row_mut(start + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        for (g, o) in gv.iter_mut().zip(go) {
                            *g += pij * o;
                        }
                    }
                    let prow = &p[i * len..i * len + visible];
                    let dot: f64 = prow.iter().zip(&dp[..visible]).map(|(a, b)| a * b).sum();
                    for j in 0..visible {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        // dq_i += ds k_j ; dk_j += ds q_i
                        for c in 0..dh {
                            let kj = qkv.row(start + j)[d + h * dh + c];
                            let qi = qkv.row(start + i)[h * dh + c];
                            gqkv.row_mut(start + i)[h * dh + c] += ds * kj;
                            gqkv.row_mut(start + j)[d + h * dh + c] += ds * qi;
                        }
                    }
                }
            }
        }
        self.qkv.backward(&cache.x, &gqkv)
    }

    /// Attends from one new position over everything in `kv` (plus itself).
    pub fn step(&self, x: &[f64], kv: &mut KvCache) -> Vec<f64> {
        let d = self.width();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward_row(x);
        kv.keys.push(qkv[d..2 * d].to_vec());
        kv.values.push(qkv[2 * d..].to_vec());
        let t = kv.keys.len();
        let mut ctx = vec![0.0; d];
        let mut scores = vec![0.0; t];
        for h in 0..self.heads {
            let q = &qkv[h * dh..(h + 1) * dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                *s = q.iter().zip(&kv.keys[j][h * dh..(h + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut ctx[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter().enumerate() {
                let w = s / sum;
                for (o, v) in out.iter_mut().zip(&kv.values[j][h * dh..(h + 1) * dh]) {
                    *o += w * v;
                }
            }
        }
        self.proj.forward_row(&ctx)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        [self.qkv.params(), self.proj.params()].concat()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.qkv.params_mut();
        v.extend(self.proj.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn new(name: &str, d: usize, hidden: usize, out_std: f64, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), d, hidden, 1.0 / (d as f64).sqrt(), rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d, out_std, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let pre = self.fc1.forward(x)?;
        let act = gelu(&pre);
        let y = self.fc2.forward(&act)?;
        Ok((y, FeedForwardCache { x: x.clone(), pre, act }))
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let pre = Tensor::new(vec![1, self.fc1.fan_out()], self.fc1.forward_row(x)).expect("sized");
        self.fc2.forward_row(gelu(&pre).data())
    }

    pub fn backward(&mut self, cache: &FeedForwardCache, gy: &Tensor) -> Tensor {
        let gact = self.fc2.backward(&cache.act, gy);
        let gpre = gelu_backward(&cache.pre, &gact);
        self.fc1.backward(&cache.x, &gpre)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        [self.fc1.params(), self.fc2.params()].concat()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + ff(ln2(h))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
}

impl Block {
    pub fn new(name: &str, d: usize, heads: usize, hidden: usize, causal: bool, out_std: f64, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: Attention::new(&format!("{name}.attn"), d, heads, causal, out_std, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, hidden, out_std, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, segments: &Segments) -> Result<(Tensor, BlockCache)> {
        let (h1, ln1) = self.ln1.forward(x)?;
        let (a, attn) = self.attn.forward(&h1, segments)?;
        let mut mid = x.clone();
        mid.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(&mid)?;
        let (f, ff) = self.ff.forward(&h2)?;
        mid.add_assign(&f);
        Ok((mid, BlockCache { ln1, attn, ln2, ff }))
    }

    pub fn backward(&mut self, cache: &BlockCache, segments: &Segments, gy: &Tensor) -> Result<Tensor> {
        let gh2 = self.ff.backward(&cache.ff, gy);
        let mut gmid = self.ln2.backward(&cache.ln2, &gh2)?;
        gmid.add_assign(gy);
        let gh1 = self.attn.backward(&cache.attn, segments, &gmid);
        let mut gx = self.ln1.backward(&cache.ln1, &gh1)?;
        gx.add_assign(&gmid);
        Ok(gx)
    }

    pub fn step(&self, x: &[f64], kv: &mut KvCache) -> Vec<f64> {
        let a = self.attn.step(&self.ln1.forward_row(x), kv);
        let mid: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let f = self.ff.forward_row(&self.ln2.forward_row(&mid));
        mid.iter().zip(&f).map(|(u, v)| u + v).collect()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        [self.ln1.params(), self.attn.params(), self.ln2.params(), self.ff.params()].concat()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff.params_mut());
        v
    }
}

/// Small random perturbation helper used by tests across the crate.
#[doc(hidden)]
pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}
