use std::collections::BTreeMap;
use std::path::Path;

use super::Embedding;
use crate::microworld::{CaptionText, RawImageFeature};
use crate::numerics::layers::{Block, Linear};
use crate::numerics::{
    gelu, gelu_backward, l2_normalize, l2_normalize_backward, read_checkpoint, write_checkpoint, ParamSet, Parameter,
    Tensor,
};
use crate::rng::Rng;
use crate::vocab::{sidecar_path, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub raw_dim: usize,
    pub d_embed: usize,
    pub image_hidden: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub max_len: usize,
    /// Initial softmax temperature; the learnable logit scale starts at its inverse.
    pub init_temperature: f64,
    /// Upper clamp on the logit scale.
    pub max_logit_scale: f64,
}

impl EncoderConfig {
    pub fn new(raw_dim: usize) -> Self {
        Self {
            raw_dim,
            d_embed: 64,
            image_hidden: 256,
            text_heads: 4,
            text_ff: 256,
            max_len: 32,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        }
    }
}

/// Image side: two affine layers with GELU between. Text side: token and position
/// embeddings, one bidirectional transformer block, mean pooling and an affine map.
/// Both outputs are L2-normalized.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub img_fc1: Linear,
    pub img_fc2: Linear,
    pub tok_emb: Parameter,
    pub pos_emb: Parameter,
    pub block: Block,
    pub txt_proj: Linear,
    pub log_scale: Parameter,
}

pub struct ImageCache {
    x: Tensor,
    z1: Tensor,
    a1: Tensor,
    out: Tensor,
    norms: Vec<f64>,
}

pub struct TextCache {
    ids: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    block: crate::numerics::layers::BlockCache,
    pooled: Tensor,
    out: Tensor,
    norms: Vec<f64>,
}

fn normalize_rows(u: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = u.dims2()?;
    let mut y = Tensor::zeros(&[n, d]);
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let (row, norm) = l2_normalize(u.row(r))?;
        y.row_mut(r).copy_from_slice(&row);
        norms.push(norm);
    }
    Ok((y, norms))
}

fn normalize_rows_backward(y: &Tensor, norms: &[f64], gy: &Tensor) -> Tensor {
    let mut gu = Tensor::zeros(y.shape());
    for (r, &norm) in norms.iter().enumerate() {
        let g = l2_normalize_backward(y.row(r), norm, gy.row(r));
        gu.row_mut(r).copy_from_slice(&g);
    }
    gu
}

fn rows_to_embeddings(t: &Tensor) -> Vec<Embedding> {
    (0..t.shape()[0]).map(|r| Embedding::new(t.row(r).to_vec())).collect()
}

impl DualEncoder {
    pub fn new(cfg: EncoderConfig, vocab: Vocab, rng: &mut Rng) -> Self {
        let d = cfg.d_embed;
        let emb_std = 0.1;
        let init = |name: &str, shape: &[usize], rng: &mut Rng| {
            Parameter::new(name, crate::numerics::layers::normal_tensor(shape, emb_std, rng))
        };
        Self {
            img_fc1: Linear::new("enc.img.fc1", cfg.raw_dim, cfg.image_hidden, (1.0 / cfg.raw_dim as f64).sqrt(), rng),
            img_fc2: Linear::new("enc.img.fc2", cfg.image_hidden, d, (1.0 / cfg.image_hidden as f64).sqrt(), rng),
            tok_emb: init("enc.txt.tok_emb", &[vocab.len(), d], rng),
            pos_emb: init("enc.txt.pos_emb", &[cfg.max_len, d], rng),
            block: Block::new("enc.txt.block", d, cfg.text_heads, cfg.text_ff, false, 0.02, rng),
            txt_proj: Linear::new("enc.txt.proj", d, d, (1.0 / d as f64).sqrt(), rng),
            log_scale: Parameter::new(
                "enc.logit_scale",
                Tensor::new(vec![1], vec![(1.0 / cfg.init_temperature).ln()]).expect("sized"),
            ),
            cfg,
            vocab,
        }
    }

    /// Current logit scale (inverse temperature).
    pub fn logit_scale(&self) -> f64 {
        self.log_scale.value.data()[0].exp()
    }

    /// Keeps the logit scale within `[1, max_logit_scale]`.
    pub fn clamp_scale(&mut self) {
        let hi = self.cfg.max_logit_scale.ln();
        let v = &mut self.log_scale.value.data_mut()[0];
        *v = v.clamp(0.0, hi);
    }

    pub fn image_forward(&self, raws: &[&RawImageFeature]) -> Result<(Tensor, ImageCache)> {
        let mut data = Vec::with_capacity(raws.len() * self.cfg.raw_dim);
        for r in raws {
            if r.values.len() != self.cfg.raw_dim {
                return Err(Error::Shape(format!(
                    "image feature has dimension {}, encoder expects {}",
                    r.values.len(),
                    self.cfg.raw_dim
                )));
            }
            data.extend_from_slice(&r.values);
        }
        let x = Tensor::new(vec![raws.len(), self.cfg.raw_dim], data)?;
        let z1 = self.img_fc1.forward(&x)?;
        let a1 = gelu(&z1);
        let u = self.img_fc2.forward(&a1)?;
        let (out, norms) = normalize_rows(&u)?;
        Ok((out.clone(), ImageCache { x, z1, a1, out, norms }))
    }

    pub fn image_backward(&mut self, cache: &ImageCache, gy: &Tensor) {
        let gu = normalize_rows_backward(&cache.out, &cache.norms, gy);
        let ga = self.img_fc2.backward(&cache.a1, &gu);
        let gz = gelu_backward(&cache.z1, &ga);
        self.img_fc1.backward(&cache.x, &gz);
    }

    fn token_ids(&self, caption: &CaptionText) -> Result<Vec<usize>> {
        if caption.tokens.is_empty() {
            return Err(Error::Empty("cannot encode an empty caption".into()));
        }
        if caption.tokens.len() > self.cfg.max_len {
            return Err(Error::TooLong { len: caption.tokens.len(), max_len: self.cfg.max_len });
        }
        self.vocab.encode(&caption.tokens)
    }

    pub fn text_forward(&self, captions: &[&CaptionText]) -> Result<(Tensor, TextCache)> {
        let d = self.cfg.d_embed;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(captions.len());
        for c in captions {
            let t = self.token_ids(c)?;
            segments.push((ids.len(), t.len()));
            positions.extend(0..t.len());
            ids.extend(t);
        }
        let mut x = Tensor::zeros(&[ids.len(), d]);
        for (r, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
            let tok = self.tok_emb.value.row(id);
            let p = self.pos_emb.value.row(pos);
            for ((o, a), b) in x.row_mut(r).iter_mut().zip(tok).zip(p) {
                *o = a + b;
            }
        }
        let (h, block) = self.block.forward(&x, &segments)?;
        let mut pooled = Tensor::zeros(&[captions.len(), d]);
        for (s, &(start, len)) in segments.iter().enumerate() {
            let row = pooled.row_mut(s);
            for r in start..start + len {
                for (o, v) in row.iter_mut().zip(h.row(r)) {
                    *o += v / len as f64;
                }
            }
        }
        let u = self.txt_proj.forward(&pooled)?;
        let (out, norms) = normalize_rows(&u)?;
        Ok((out.clone(), TextCache { ids, positions, segments, block, pooled, out, norms }))
    }

    pub fn text_backward(&mut self, cache: &TextCache, gy: &Tensor) -> Result<()> {
        let d = self.cfg.d_embed;
        let gu = normalize_rows_backward(&cache.out, &cache.norms, gy);
        let gp = self.txt_proj.backward(&cache.pooled, &gu);
        let mut gh = Tensor::zeros(&[cache.ids.len(), d]);
        for (s, &(start, len)) in cache.segments.iter().enumerate() {
            for r in start..start + len {
                for (o, v) in gh.row_mut(r).iter_mut().zip(gp.row(s)) {
                    *o = v / len as f64;
                }
            }
        }
        let gx = self.block.backward(&cache.block, &cache.segments, &gh)?;
        for (r, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
            for (g, v) in self.tok_emb.grad.row_mut(id).iter_mut().zip(gx.row(r)) {
                *g += v;
            }
            for (g, v) in self.pos_emb.grad.row_mut(pos).iter_mut().zip(gx.row(r)) {
                *g += v;
            }
        }
        Ok(())
    }

    pub fn encode_image(&self, raw: &RawImageFeature) -> Result<Embedding> {
        Ok(rows_to_embeddings(&self.image_forward(&[raw])?.0).remove(0))
    }

    pub fn encode_text(&self, caption: &CaptionText) -> Result<Embedding> {
        Ok(rows_to_embeddings(&self.text_forward(&[caption])?.0).remove(0))
    }

    /// Batched [`DualEncoder::encode_image`]; results are identical to encoding one at a time.
    pub fn encode_images(&self, raws: &[&RawImageFeature]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(raws.len());
        for chunk in raws.chunks(256) {
            out.extend(rows_to_embeddings(&self.image_forward(chunk)?.0));
        }
        Ok(out)
    }

    pub fn encode_texts(&self, captions: &[&CaptionText]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(256) {
            out.extend(rows_to_embeddings(&self.text_forward(chunk)?.0));
        }
        Ok(out)
    }

    /// Writes the parameters to `path` and the text vocabulary next to it (`.vocab`).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.vocab.save(&sidecar_path(path))?;
        let mut tensors = self.named_tensors();
        tensors.push((HEADS_TENSOR.into(), Tensor::new(vec![1], vec![self.cfg.text_heads as f64])?));
        write_checkpoint(path, &tensors)
    }

    /// Loads a checkpoint written by [`DualEncoder::save`]; sizes are read from the tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let tensors: BTreeMap<String, Tensor> = read_checkpoint(path)?;
        let vocab = Vocab::load(&sidecar_path(path))?;
        let shape = |name: &str| -> Result<Vec<usize>> {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let fc1 = shape("enc.img.fc1.w")?;
        let pos = shape("enc.txt.pos_emb")?;
        let ff = shape("enc.txt.block.ff.fc1.w")?;
        let mut cfg = EncoderConfig::new(fc1[0]);
        cfg.image_hidden = fc1[1];
        cfg.max_len = pos[0];
        cfg.d_embed = pos[1];
        cfg.text_ff = ff[1];
        cfg.text_heads = tensors
            .get(HEADS_TENSOR)
            .map(|t| t.data()[0] as usize)
            .filter(|&h| h > 0 && cfg.d_embed % h == 0)
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid `{HEADS_TENSOR}`")))?;
        let mut enc = Self::new(cfg, vocab, &mut crate::rng::substream(0, "encoder-load"));
        enc.load_named(&tensors)?;
        Ok(enc)
    }
}

/// Non-trainable record of the text block's head count.
const HEADS_TENSOR: &str = "enc.txt.heads";


impl ParamSet for DualEncoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.img_fc1.params();
        v.extend(self.img_fc2.params());
        v.push(&self.tok_emb);
        v.push(&self.pos_emb);
        v.extend(self.block.params());
        v.extend(self.txt_proj.params());
        v.push(&self.log_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.img_fc1.params_mut();
        v.extend(self.img_fc2.params_mut());
        v.push(&mut self.tok_emb);
        v.push(&mut self.pos_emb);
        v.extend(self.block.params_mut());
        v.extend(self.txt_proj.params_mut());
        v.push(&mut self.log_scale);
        v
    }
}
