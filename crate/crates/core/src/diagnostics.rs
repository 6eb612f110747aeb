//! Finite-difference checks over every differentiable piece: the raw kernels, the layers,
//! the contrastive loss and both full models.

use serde::Serialize;

use crate::clm::{batch_loss, batch_loss_and_grad, build_training_input, clm_loss, targets_and_weights, Decoder, DecoderConfig};
use crate::dualencoder::{contrastive_loss, contrastive_loss_and_grads, DualEncoder, EncoderConfig, Embedding};
use crate::microworld::{CaptionText, RawImageFeature};
use crate::numerics::layers::{random_tensor, Attention, Block, FeedForward, LayerNorm, Linear};
use crate::numerics::{
    cross_entropy, cross_entropy_backward, gelu, gelu_backward, grad_check, l2_normalize, l2_normalize_backward,
    layer_norm, layer_norm_backward, matmul, matmul_backward, softmax_backward, softmax_stable, weighted_nll,
    GradCheckConfig, ParamSet, Parameter, Tensor,
};
use crate::rng::{substream, Rng};
use crate::vocab::Vocab;
use crate::Result;

/// Tolerance for whole layers and models.
pub const RELATIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the elementwise kernels, which are smooth enough for a tighter bound.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-6;

const STEP: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Parameter and flat index of the worst coordinate, when parameters were checked.
    pub worst: Option<(String, usize)>,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Central differences of `f` around `x` on every coordinate against `analytic`.
fn input_check(name: &str, x: &Tensor, analytic: &Tensor, tolerance: f64, f: impl Fn(&Tensor) -> Result<f64>) -> Result<GradientCheck> {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += STEP;
        let mut down = x.clone();
        down.data_mut()[i] -= STEP;
        let numeric = (f(&up)? - f(&down)?) / (2.0 * STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR));
    }
    Ok(GradientCheck { name: name.into(), max_rel_error: worst, tolerance, checked: x.len(), worst: None })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn kernel_checks(rng: &mut Rng) -> Result<Vec<GradientCheck>> {
    let mut out = Vec::new();

    let a = random_tensor(&[3, 4], rng);
    let b = random_tensor(&[4, 5], rng);
    let w = random_tensor(&[3, 5], rng);
    let (ga, gb) = matmul_backward(&a, &b, &w)?;
    out.push(input_check("matmul/lhs", &a, &ga, RELATIVE_TOLERANCE, |a| Ok(dot(&matmul(a, &b)?, &w)))?);
    out.push(input_check("matmul/rhs", &b, &gb, RELATIVE_TOLERANCE, |b| Ok(dot(&matmul(&a, b)?, &w)))?);

    let x = random_tensor(&[3, 6], rng);
    let w = random_tensor(&[3, 6], rng);
    for axis in [0, 1] {
        let y = softmax_stable(&x, axis)?;
        let g = softmax_backward(&y, &w, axis)?;
        let name = format!("softmax/axis{axis}");
        out.push(input_check(&name, &x, &g, ELEMENTWISE_TOLERANCE, |x| Ok(dot(&softmax_stable(x, axis)?, &w)))?);
    }

    let gain = random_tensor(&[6], rng);
    let bias = random_tensor(&[6], rng);
    let (_, cache) = layer_norm(&x, &gain, &bias)?;
    let (gx, ggain, gbias) = layer_norm_backward(&cache, &gain, &w)?;
    out.push(input_check("layer_norm/input", &x, &gx, ELEMENTWISE_TOLERANCE, |x| Ok(dot(&layer_norm(x, &gain, &bias)?.0, &w)))?);
    out.push(input_check("layer_norm/gain", &gain, &ggain, ELEMENTWISE_TOLERANCE, |g| Ok(dot(&layer_norm(&x, g, &bias)?.0, &w)))?);
    out.push(input_check("layer_norm/bias", &bias, &gbias, ELEMENTWISE_TOLERANCE, |b| Ok(dot(&layer_norm(&x, &gain, b)?.0, &w)))?);

    let g = gelu_backward(&x, &w);
    out.push(input_check("gelu", &x, &g, ELEMENTWISE_TOLERANCE, |x| Ok(dot(&gelu(x), &w)))?);

    let targets = [1, 5, 0];
    let weights = [0.5, 0.0, 0.25];
    let (_, g) = weighted_nll(&x, &targets, &weights)?;
    out.push(input_check("weighted_nll", &x, &g, ELEMENTWISE_TOLERANCE, |x| Ok(weighted_nll(x, &targets, &weights)?.0))?);
    let mask = [1.0, 1.0, 0.0];
    let g = cross_entropy_backward(&x, &targets, &mask)?;
    out.push(input_check("cross_entropy", &x, &g, ELEMENTWISE_TOLERANCE, |x| cross_entropy(x, &targets, &mask))?);

    let v = random_tensor(&[6], rng);
    let wv = random_tensor(&[6], rng);
    let (y, norm) = l2_normalize(v.data())?;
    let g = Tensor::new(vec![6], l2_normalize_backward(&y, norm, wv.data()))?;
    out.push(input_check("l2_normalize", &v, &g, ELEMENTWISE_TOLERANCE, |v| {
        Ok(l2_normalize(v.data())?.0.iter().zip(wv.data()).map(|(a, b)| a * b).sum())
    })?);

    let imgs = random_tensor(&[4, 5], rng);
    let txts = random_tensor(&[4, 5], rng);
    let log_scale = 1.3;
    let (_, g) = contrastive_loss_and_grads(&imgs, &txts, log_scale)?;
    out.push(input_check("contrastive/images", &imgs, &g.images, RELATIVE_TOLERANCE, |i| contrastive_loss(i, &txts, log_scale))?);
    out.push(input_check("contrastive/texts", &txts, &g.texts, RELATIVE_TOLERANCE, |t| contrastive_loss(&imgs, t, log_scale))?);
    let s = Tensor::scalar(log_scale);
    let gs = Tensor::scalar(g.log_scale);
    out.push(input_check("contrastive/log_scale", &s, &gs, RELATIVE_TOLERANCE, |s| contrastive_loss(&imgs, &txts, s.data()[0]))?);
    Ok(out)
}

/// A layer under test with a fixed input and a fixed linear read-out of its output.
struct Probe<L> {
    layer: L,
    x: Tensor,
    w: Tensor,
}

macro_rules! probe_params {
    ($t:ty) => {
        impl ParamSet for Probe<$t> {
            fn params(&self) -> Vec<&Parameter> {
                self.layer.params()
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                self.layer.params_mut()
            }
        }
    };
}

probe_params!(Linear);
probe_params!(LayerNorm);
probe_params!(FeedForward);
probe_params!(Attention);
probe_params!(Block);

fn param_check<M: ParamSet>(
    name: &str,
    model: &mut M,
    loss_and_grad: impl FnMut(&mut M) -> Result<f64>,
    loss: impl FnMut(&M) -> Result<f64>,
    seed: u64,
) -> Result<GradientCheck> {
    let cfg = GradCheckConfig { step: STEP, tolerance: RELATIVE_TOLERANCE, samples_per_param: 12, abs_floor: ABS_FLOOR, seed };
    let r = grad_check(model, loss_and_grad, loss, &cfg)?;
    Ok(GradientCheck { name: name.into(), max_rel_error: r.max_rel_error, tolerance: r.tolerance, checked: r.checked, worst: r.worst })
}

/// Perturbs every weight so attention patterns and activations are far from the
/// near-symmetric initialization.
fn jitter<M: ParamSet>(m: &mut M, rng: &mut Rng) {
    for p in m.params_mut() {
        let noise = random_tensor(p.value.shape(), rng);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
}

fn layer_checks(rng: &mut Rng, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut out = Vec::new();
    let (d, n) = (8, 7);
    let segments = vec![(0, 3), (3, 4)];

    let mut p = Probe { layer: Linear::new("lin", d, 5, 0.3, rng), x: random_tensor(&[n, d], rng), w: random_tensor(&[n, 5], rng) };
    jitter(&mut p, rng);
    out.push(param_check(
        "linear",
        &mut p,
        |p| {
            let y = p.layer.forward(&p.x)?;
            let (x, w) = (p.x.clone(), p.w.clone());
            p.layer.backward(&x, &w);
            Ok(dot(&y, &w))
        },
        |p| Ok(dot(&p.layer.forward(&p.x)?, &p.w)),
        seed,
    )?);

    let mut p = Probe { layer: LayerNorm::new("ln", d), x: random_tensor(&[n, d], rng), w: random_tensor(&[n, d], rng) };
    jitter(&mut p, rng);
    out.push(param_check(
        "layer_norm_layer",
        &mut p,
        |p| {
            let (y, cache) = p.layer.forward(&p.x)?;
            let w = p.w.clone();
            p.layer.backward(&cache, &w)?;
            Ok(dot(&y, &w))
        },
        |p| Ok(dot(&p.layer.forward(&p.x)?.0, &p.w)),
        seed,
    )?);

    let mut p = Probe { layer: FeedForward::new("ff", d, 16, 0.3, rng), x: random_tensor(&[n, d], rng), w: random_tensor(&[n, d], rng) };
    jitter(&mut p, rng);
    out.push(param_check(
        "feed_forward",
        &mut p,
        |p| {
            let (y, cache) = p.layer.forward(&p.x)?;
            let w = p.w.clone();
            p.layer.backward(&cache, &w);
            Ok(dot(&y, &w))
        },
        |p| Ok(dot(&p.layer.forward(&p.x)?.0, &p.w)),
        seed,
    )?);

    for causal in [true, false] {
        let mut p = Probe { layer: Attention::new("att", d, 2, causal, 0.3, rng), x: random_tensor(&[n, d], rng), w: random_tensor(&[n, d], rng) };
        jitter(&mut p, rng);
        let name = if causal { "attention/causal" } else { "attention/bidirectional" };
        out.push(param_check(
            name,
            &mut p,
            |p| {
                let (y, cache) = p.layer.forward(&p.x, &segments)?;
                let w = p.w.clone();
                p.layer.backward(&cache, &segments, &w);
                Ok(dot(&y, &w))
            },
            |p| Ok(dot(&p.layer.forward(&p.x, &segments)?.0, &p.w)),
            seed,
        )?);

        let mut p = Probe { layer: Block::new("blk", d, 2, 16, causal, 0.3, rng), x: random_tensor(&[n, d], rng), w: random_tensor(&[n, d], rng) };
        jitter(&mut p, rng);
        let name = if causal { "block/causal" } else { "block/bidirectional" };
        out.push(param_check(
            name,
            &mut p,
            |p| {
                let (y, cache) = p.layer.forward(&p.x, &segments)?;
                let w = p.w.clone();
                p.layer.backward(&cache, &segments, &w)?;
                Ok(dot(&y, &w))
            },
            |p| Ok(dot(&p.layer.forward(&p.x, &segments)?.0, &p.w)),
            seed,
        )?);

        // gradient with respect to the block input, which the text encoder and decoder
        // push further down into their embeddings
        let (_, cache) = p.layer.forward(&p.x, &segments)?;
        let mut layer = p.layer.clone();
        let gx = layer.backward(&cache, &segments, &p.w)?;
        let name = format!("{name}/input");
        out.push(input_check(&name, &p.x, &gx, RELATIVE_TOLERANCE, |x| Ok(dot(&p.layer.forward(x, &segments)?.0, &p.w)))?);
    }
    Ok(out)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn model_checks(rng: &mut Rng, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut out = Vec::new();
    let vocab = Vocab::from_words(words("a red blue dog ball near")).expect("distinct words");

    let mut cfg = EncoderConfig::new(6);
    cfg.d_embed = 8;
    cfg.image_hidden = 12;
    cfg.text_heads = 2;
    cfg.text_ff = 16;
    let mut enc = DualEncoder::new(cfg, vocab.clone(), rng);
    jitter(&mut enc, rng);
    let imgs: Vec<RawImageFeature> =
        (0..3).map(|i| RawImageFeature { scene_id: i, values: random_tensor(&[6], rng).into_data() }).collect();
    let caps: Vec<CaptionText> = ["a red dog", "a blue ball near a dog", "red ball"].iter().map(|t| CaptionText::from_text(0, t)).collect();
    let ir: Vec<&RawImageFeature> = imgs.iter().collect();
    let cr: Vec<&CaptionText> = caps.iter().collect();
    out.push(param_check(
        "dual_encoder",
        &mut enc,
        |e| {
            let (fi, ic) = e.image_forward(&ir)?;
            let (ft, tc) = e.text_forward(&cr)?;
            let (l, g) = contrastive_loss_and_grads(&fi, &ft, e.log_scale.value.data()[0])?;
            e.image_backward(&ic, &g.images);
            e.text_backward(&tc, &g.texts)?;
            e.log_scale.grad.data_mut()[0] += g.log_scale;
            Ok(l)
        },
        |e| {
            let (fi, _) = e.image_forward(&ir)?;
            let (ft, _) = e.text_forward(&cr)?;
            contrastive_loss(&fi, &ft, e.log_scale.value.data()[0])
        },
        seed,
    )?);

    let dcfg = DecoderConfig { d_model: 8, layers: 2, heads: 2, ff: 16, max_len: 16 };
    let mut dec = Decoder::new(dcfg, vocab, rng);
    jitter(&mut dec, rng);
    let prefix = |rng: &mut Rng| Embedding::new(random_tensor(&[8], rng).into_data());
    let mut drop = substream(seed, "gradcheck-dropout");
    let batch = vec![
        build_training_input(&prefix(rng), &words("dog ball"), &words("a red dog near a ball"), 0.0, &mut drop, &dec.vocab, 16)?,
        build_training_input(&prefix(rng), &[], &words("blue ball"), 0.0, &mut drop, &dec.vocab, 16)?,
    ];
    out.push(param_check(
        "clm_loss",
        &mut dec,
        |d| batch_loss_and_grad(d, &batch.iter().collect::<Vec<_>>()),
        |d| batch_loss(d, &batch.iter().collect::<Vec<_>>()),
        seed,
    )?);

    // the prefix is an input, not a parameter, but its gradient is what a jointly
    // trained encoder would receive
    let s = &batch[0];
    let (logits, mut cache) = dec.forward(&[s])?;
    let (t, w) = targets_and_weights(&[s])?;
    let (_, g) = weighted_nll(&logits, &t, &w)?;
    let mut d2 = dec.clone();
    d2.backward(&mut cache, &g)?;
    let p = Tensor::new(vec![8], s.prefix.values.clone())?;
    let gp = Tensor::new(vec![8], cache.prefix_grads[0].clone())?;
    out.push(input_check("clm_loss/prefix", &p, &gp, RELATIVE_TOLERANCE, |p| {
        let mut moved = s.clone();
        moved.prefix = Embedding::new(p.data().to_vec());
        clm_loss(&dec, &moved)
    })?);
    Ok(out)
}

/// Runs every check; each entry carries its own tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = substream(seed, "gradcheck");
    let mut out = kernel_checks(&mut rng)?;
    out.extend(layer_checks(&mut rng, seed)?);
    out.extend(model_checks(&mut rng, seed)?);
    Ok(out)
}
