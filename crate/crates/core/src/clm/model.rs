use std::path::Path;

use super::layout::{InputSequence, Slot};
use crate::numerics::layers::{normal_tensor, Block, BlockCache, KvCache, LayerNorm, Linear};
use crate::numerics::{read_checkpoint, write_checkpoint, LayerNormCache, ParamSet, Parameter, Tensor};
use crate::rng::Rng;
use crate::vocab::{sidecar_path, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 2, heads: 4, ff: 256, max_len: 48 }
    }
}

/// GPT-2-style decoder: token and learned position embeddings, pre-norm causal blocks,
/// final layer norm and an untied output projection. Slot 1 of every input is a dense
/// vector that replaces the token-table lookup but still gets its position embedding.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab: Vocab,
    pub tok_emb: Parameter,
    pub pos_emb: Parameter,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

pub struct DecoderCache {
    slots: Vec<Slot>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    normed: Tensor,
    /// Gradient w.r.t. each sequence's dense prefix, filled by `backward`.
    pub prefix_grads: Vec<Vec<f64>>,
}

/// Incremental decoding state: per-layer keys/values and the next position.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    kv: Vec<KvCache>,
    pub position: usize,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, vocab: Vocab, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        Self {
            tok_emb: Parameter::new("dec.tok_emb", normal_tensor(&[vocab.len(), d], 0.02, rng)),
            pos_emb: Parameter::new("dec.pos_emb", normal_tensor(&[cfg.max_len, d], 0.02, rng)),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&format!("dec.block{i}"), d, cfg.heads, cfg.ff, true, out_std, rng))
                .collect(),
            ln_f: LayerNorm::new("dec.ln_f", d),
            out: Linear::new("dec.out", d, vocab.len(), 0.02, rng),
            cfg,
            vocab,
        }
    }

    fn embed_slot(&self, slot: Slot, prefix: &[f64], pos: usize, row: &mut [f64]) -> Result<()> {
        let p = self.pos_emb.value.row(pos);
        match slot {
            Slot::Token(t) => {
                if t >= self.vocab.len() {
                    return Err(Error::IndexOutOfRange { index: t, size: self.vocab.len() });
                }
                for ((o, a), b) in row.iter_mut().zip(self.tok_emb.value.row(t)).zip(p) {
                    *o = a + b;
                }
            }
            Slot::Prefix => {
                if prefix.len() != self.cfg.d_model {
                    return Err(Error::Shape(format!(
                        "prefix has dimension {}, decoder width is {}",
                        prefix.len(),
                        self.cfg.d_model
                    )));
                }
                for ((o, a), b) in row.iter_mut().zip(prefix).zip(p) {
                    *o = a + b;
                }
            }
        }
        Ok(())
    }

    /// Logits for every position of every sequence, rows packed in input order.
    pub fn forward(&self, batch: &[&InputSequence]) -> Result<(Tensor, DecoderCache)> {
        let d = self.cfg.d_model;
        let total: usize = batch.iter().map(|s| s.len()).sum();
        let mut x = Tensor::zeros(&[total, d]);
        let mut slots = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(batch.len());
        let mut r = 0;
        for seq in batch {
            if seq.len() > self.cfg.max_len {
                return Err(Error::TooLong { len: seq.len(), max_len: self.cfg.max_len });
            }
            segments.push((r, seq.len()));
            for (pos, &slot) in seq.slots.iter().enumerate() {
                self.embed_slot(slot, &seq.prefix.values, pos, x.row_mut(r))?;
                slots.push(slot);
                positions.push(pos);
                r += 1;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            let (next, c) = b.forward(&h, &segments)?;
            caches.push(c);
            h = next;
        }
        let (normed, ln_f) = self.ln_f.forward(&h)?;
        let logits = self.out.forward(&normed)?;
        let cache = DecoderCache { slots, positions, segments, blocks: caches, ln_f, normed, prefix_grads: Vec::new() };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients from `glogits`; prefix gradients land in the cache.
    pub fn backward(&mut self, cache: &mut DecoderCache, glogits: &Tensor) -> Result<()> {
        let gn = self.out.backward(&cache.normed, glogits);
        let mut g = self.ln_f.backward(&cache.ln_f, &gn)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &cache.segments, &g)?;
        }
        cache.prefix_grads.clear();
        for (r, (&slot, &pos)) in cache.slots.iter().zip(&cache.positions).enumerate() {
            let gr = g.row(r);
            for (a, v) in self.pos_emb.grad.row_mut(pos).iter_mut().zip(gr) {
                *a += v;
            }
            match slot {
                Slot::Token(t) => {
                    for (a, v) in self.tok_emb.grad.row_mut(t).iter_mut().zip(gr) {
                        *a += v;
                    }
                }
                Slot::Prefix => cache.prefix_grads.push(gr.to_vec()),
            }
        }
        Ok(())
    }

    fn step_row(&self, state: &mut DecoderState, x: Vec<f64>) -> Vec<f64> {
        if state.kv.is_empty() {
            state.kv = vec![KvCache::default(); self.blocks.len()];
        }
        let mut h = x;
        for (b, kv) in self.blocks.iter().zip(state.kv.iter_mut()) {
            h = b.step(&h, kv);
        }
        state.position += 1;
        self.out.forward_row(&self.ln_f.forward_row(&h))
    }

    /// Feeds one slot at the next position and returns the logits there.
    pub fn step(&self, state: &mut DecoderState, slot: Slot, prefix: &[f64]) -> Result<Vec<f64>> {
        if state.position >= self.cfg.max_len {
            return Err(Error::TooLong { len: state.position + 1, max_len: self.cfg.max_len });
        }
        let mut x = vec![0.0; self.cfg.d_model];
        self.embed_slot(slot, prefix, state.position, &mut x)?;
        Ok(self.step_row(state, x))
    }

    /// Runs the whole input incrementally; returns the state and the last position's logits.
    pub fn start(&self, input: &InputSequence) -> Result<(DecoderState, Vec<f64>)> {
        let mut state = DecoderState::default();
        let mut logits = Vec::new();
        for &slot in &input.slots {
            logits = self.step(&mut state, slot, &input.prefix.values)?;
        }
        Ok((state, logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vocab.save(&sidecar_path(path))?;
        let mut tensors = self.named_tensors();
        tensors.push((HEADS_TENSOR.into(), Tensor::new(vec![1], vec![self.cfg.heads as f64])?));
        write_checkpoint(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(path)?;
        let vocab = Vocab::load(&sidecar_path(path))?;
        let shape = |name: &str| -> Result<Vec<usize>> {
            tensors
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let pos = shape("dec.pos_emb")?;
        let ff = shape("dec.block0.ff.fc1.w")?;
        let layers = (0..).take_while(|i| tensors.contains_key(&format!("dec.block{i}.ln1.gain"))).count();
        let heads = tensors
            .get(HEADS_TENSOR)
            .map(|t| t.data()[0] as usize)
            .filter(|&h| h > 0 && pos[1] % h == 0)
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid `{HEADS_TENSOR}`")))?;
        let cfg = DecoderConfig { d_model: pos[1], layers, heads, ff: ff[1], max_len: pos[0] };
        let mut dec = Self::new(cfg, vocab, &mut crate::rng::substream(0, "decoder-load"));
        dec.load_named(&tensors)?;
        Ok(dec)
    }
}

const HEADS_TENSOR: &str = "dec.heads";

impl ParamSet for Decoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_f.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}
