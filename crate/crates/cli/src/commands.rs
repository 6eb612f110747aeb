//! One function per subcommand. Each reads its inputs from the configured directories,
//! writes its artifacts, and returns the results so callers can print or check them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorcap::clm::{generate_for, train_clm, Decoder, EvalItem, TrainingLog, Vocab};
use anchorcap::counterfactual::{concept_direction, counterfactual_report, summarize, CounterfactualPair, CounterfactualSummary};
use anchorcap::diagnostics::{gradient_suite, GradientCheck};
use anchorcap::dualencoder::{train_encoder, DualEncoder, EncoderTrainingLog};
use anchorcap::generation::filter_anchors;
use anchorcap::metrics::{evaluate_set, MetricReport};
use anchorcap::microworld::{build_dataset, CaptionText, DatasetBundle, DetectorNoiseSpec, RawImageFeature, Split};
use anchorcap::rng::substream;
use anyhow::{bail, Context as _, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{detections_for, image_eval_items, object_mention_rate, text_eval_items, text_samples, without_prefix};

pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const CLM_CKPT: &str = "clm.ckpt";
pub const ENCODER_LOG: &str = "encoder_log.jsonl";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RUN_CFG: &str = "run.cfg";

/// Writes `lines` to `path` through a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn record_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(RUN_CFG), cfg.to_kv().render().as_bytes())
}

fn ckpt(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.checkpoint_dir.join(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn load_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    DatasetBundle::load(&cfg.data_dir)
        .with_context(|| format!("loading dataset from {} (run gen-data first)", cfg.data_dir.display()))
}

pub fn load_encoder(cfg: &RunConfig) -> Result<DualEncoder> {
    let path = ckpt(cfg, ENCODER_CKPT);
    DualEncoder::load(&path).with_context(|| format!("loading encoder {} (run train-encoder first)", path.display()))
}

pub fn load_decoder(cfg: &RunConfig) -> Result<Decoder> {
    let path = ckpt(cfg, CLM_CKPT);
    Decoder::load(&path).with_context(|| format!("loading decoder {} (run train-clm first)", path.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    let bundle = build_dataset(&cfg.world(), cfg.sizes, &mut substream(cfg.seed, "data"))?;
    bundle.save(&cfg.data_dir).with_context(|| format!("writing dataset to {}", cfg.data_dir.display()))?;
    Ok(bundle)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLogLine {
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_retrieval: f64,
    pub logit_scale: f64,
}

pub fn cmd_train_encoder(cfg: &RunConfig) -> Result<(DualEncoder, EncoderTrainingLog)> {
    let bundle = load_data(cfg)?;
    let (enc, log) = fit_encoder(cfg, &[&bundle])?;
    let path = ckpt(cfg, ENCODER_CKPT);
    ensure_parent(&path)?;
    enc.save(&path)?;
    let lines: Vec<EncoderLogLine> = log
        .epochs
        .iter()
        .map(|e| EncoderLogLine { seed: cfg.seed, epoch: e.epoch, loss: e.loss, val_retrieval: e.val_retrieval, logit_scale: e.logit_scale })
        .collect();
    write_jsonl(&ckpt(cfg, ENCODER_LOG), &lines)?;
    record_config(cfg, &cfg.checkpoint_dir)?;
    Ok((enc, log))
}

/// Contrastive training on the train-split pairs of every bundle, validated on the first
/// reference of each validation image.
fn fit_encoder(cfg: &RunConfig, bundles: &[&DatasetBundle]) -> Result<(DualEncoder, EncoderTrainingLog)> {
    let pairs: Vec<_> = bundles.iter().flat_map(|b| b.train_pairs()).collect();
    let val: Vec<_> = bundles.iter().flat_map(|b| b.paired_eval(Split::Val)).map(|(i, r)| (i, &r[0])).collect();
    Ok(train_encoder(&pairs, &val, &cfg.encoder_config())?)
}

/// Top-1 retrieval on the test split, first reference per image.
pub fn test_retrieval(enc: &DualEncoder, bundle: &DatasetBundle) -> Result<f64> {
    let pairs: Vec<_> = bundle.paired_eval(Split::Test).into_iter().map(|(i, r)| (i, &r[0])).collect();
    Ok(anchorcap::dualencoder::retrieval_accuracy(enc, &pairs)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub seed: u64,
    pub q: f64,
    pub epoch: usize,
    pub loss: f64,
    pub text: Option<MetricReport>,
    pub caption: Option<MetricReport>,
    pub best: bool,
}

/// Trains a CLM from text alone. Model selection looks at image captions on the
/// validation split with anchors above `gen.p`, or none for an anchor-free model.
pub fn fit_clm(cfg: &RunConfig, bundle: &DatasetBundle, enc: &DualEncoder, q: f64) -> Result<(Decoder, TrainingLog)> {
    let samples = text_samples(bundle, enc)?;
    let vocab = Vocab::build(&bundle.text_corpus)?;
    let text_val = text_eval_items(bundle, Split::Val, enc)?;
    let p_val = if q >= 1.0 { 1.0 } else { cfg.generation.p };
    let image_val = image_eval_items(bundle, Split::Val, enc, &bundle.spec.detector_noise, p_val, cfg.seed)?;
    Ok(train_clm(&samples, &vocab, &text_val, &image_val, &cfg.clm_config(q))?)
}

fn log_lines(cfg: &RunConfig, q: f64, log: &TrainingLog) -> Vec<TrainLogLine> {
    log.epochs
        .iter()
        .map(|e| TrainLogLine {
            seed: cfg.seed,
            q,
            epoch: e.epoch,
            loss: e.loss,
            text: e.text,
            caption: e.caption,
            best: e.epoch == log.best_epoch,
        })
        .collect()
}

pub fn cmd_train_clm(cfg: &RunConfig) -> Result<(Decoder, TrainingLog)> {
    let bundle = load_data(cfg)?;
    let enc = load_encoder(cfg)?;
    let (dec, log) = fit_clm(cfg, &bundle, &enc, cfg.clm.q)?;
    let path = ckpt(cfg, CLM_CKPT);
    ensure_parent(&path)?;
    dec.save(&path)?;
    write_jsonl(&ckpt(cfg, TRAIN_LOG), &log_lines(cfg, cfg.clm.q, &log))?;
    record_config(cfg, &cfg.checkpoint_dir)?;
    Ok((dec, log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub seed: u64,
    pub scene_id: u64,
    pub caption: String,
    pub anchors: Vec<String>,
    pub references: Vec<String>,
}

pub struct CaptionRun {
    pub records: Vec<CaptionRecord>,
    /// Mean wall-clock decode time per image, in milliseconds.
    pub ms_per_image: f64,
}

pub fn parse_split(s: &str) -> Result<Split> {
    Split::ALL.into_iter().find(|x| x.name() == s).with_context(|| format!("unknown split `{s}`"))
}

pub fn cmd_caption(cfg: &RunConfig, split: Split) -> Result<CaptionRun> {
    let bundle = load_data(cfg)?;
    let enc = load_encoder(cfg)?;
    let dec = load_decoder(cfg)?;
    let items = image_eval_items(&bundle, split, &enc, &bundle.spec.detector_noise, cfg.generation.p, cfg.seed)?;
    let start = Instant::now();
    let caps = generate_for(&dec, &items, &cfg.generation)?;
    let ms_per_image = start.elapsed().as_secs_f64() * 1e3 / items.len().max(1) as f64;
    let records: Vec<CaptionRecord> = items
        .iter()
        .zip(&caps)
        .map(|(it, c)| CaptionRecord {
            seed: cfg.seed,
            scene_id: it.scene_id,
            caption: c.text(),
            anchors: it.anchors.clone(),
            references: it.references.iter().map(CaptionText::text).collect(),
        })
        .collect();
    write_jsonl(&cfg.output_dir.join(format!("captions_{}.jsonl", split.name())), &records)?;
    record_config(cfg, &cfg.output_dir)?;
    Ok(CaptionRun { records, ms_per_image })
}

/// What `evaluate` feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSource {
    /// Image embedding with detector anchors.
    #[default]
    Image,
    /// Image embedding with the scene's true categories as anchors.
    ImageNoiseFree,
    /// Zero prefix with detector anchors.
    NoPrefix,
    /// First reference's text embedding with its nouns: the training-side upper bound.
    Text,
}

impl EvalSource {
    pub fn name(self) -> &'static str {
        match self {
            EvalSource::Image => "image",
            EvalSource::ImageNoiseFree => "image-noise-free",
            EvalSource::NoPrefix => "no-prefix",
            EvalSource::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub split: Split,
    pub source: String,
    pub p: f64,
    pub report: MetricReport,
    pub object_mention: f64,
}

/// Builds the evaluation items for one source.
pub fn eval_items(cfg: &RunConfig, bundle: &DatasetBundle, enc: &DualEncoder, split: Split, source: EvalSource, p: f64) -> Result<Vec<EvalItem>> {
    Ok(match source {
        EvalSource::Image => image_eval_items(bundle, split, enc, &bundle.spec.detector_noise, p, cfg.seed)?,
        EvalSource::ImageNoiseFree => image_eval_items(bundle, split, enc, &DetectorNoiseSpec::noise_free(), p, cfg.seed)?,
        EvalSource::NoPrefix => without_prefix(&image_eval_items(bundle, split, enc, &bundle.spec.detector_noise, p, cfg.seed)?),
        EvalSource::Text => text_eval_items(bundle, split, enc)?,
    })
}

/// Captions `items` and scores them against their references.
pub fn score(bundle: &DatasetBundle, dec: &Decoder, items: &[EvalItem], cfg: &RunConfig) -> Result<(MetricReport, f64)> {
    let caps = generate_for(dec, items, &cfg.generation)?;
    let refs: Vec<Vec<CaptionText>> = items.iter().map(|i| i.references.clone()).collect();
    Ok((evaluate_set(&caps, &refs)?, object_mention_rate(bundle, &caps)?))
}

pub fn cmd_evaluate(cfg: &RunConfig, split: Split, sources: &[EvalSource]) -> Result<Vec<EvalRecord>> {
    let bundle = load_data(cfg)?;
    let enc = load_encoder(cfg)?;
    let dec = load_decoder(cfg)?;
    let mut out = Vec::new();
    for &source in sources {
        let items = eval_items(cfg, &bundle, &enc, split, source, cfg.generation.p)?;
        let (report, object_mention) = score(&bundle, &dec, &items, cfg)?;
        out.push(EvalRecord { seed: cfg.seed, split, source: source.name().into(), p: cfg.generation.p, report, object_mention });
    }
    write_jsonl(&cfg.output_dir.join(format!("eval_{}.jsonl", split.name())), &out)?;
    record_config(cfg, &cfg.output_dir)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub q: f64,
    /// `None` for the anchor-free model, whose score does not depend on the threshold.
    pub p: Option<f64>,
    pub report: MetricReport,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Mean score of a cell; the anchor-free column answers for every `p`.
    pub fn mean_score(&self, p: f64, q: f64) -> Option<f64> {
        self.cells.iter().find(|c| c.q == q && (c.p.is_none() || c.p == Some(p))).map(|c| c.report.mean_score)
    }
}

pub fn ablation_path(cfg: &RunConfig, q: f64) -> PathBuf {
    cfg.checkpoint_dir.join("ablate").join(format!("clm_q{q}.ckpt"))
}

/// One CLM per `q` (in parallel), each scored at every `p`. q = 1 never sees anchors
/// in training and is scored once without them.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationTable> {
    let bundle = load_data(cfg)?;
    let enc = load_encoder(cfg)?;
    let per_q: Vec<(Vec<AblationCell>, Vec<TrainLogLine>)> = cfg
        .grid
        .q
        .par_iter()
        .map(|&q| -> Result<_> {
            let (dec, log) = fit_clm(cfg, &bundle, &enc, q)?;
            let path = ablation_path(cfg, q);
            ensure_parent(&path)?;
            dec.save(&path)?;
            let ps: Vec<Option<f64>> = if q >= 1.0 { vec![None] } else { cfg.grid.p.iter().map(|&p| Some(p)).collect() };
            let mut cells = Vec::new();
            for p in ps {
                let items = eval_items(cfg, &bundle, &enc, Split::Test, EvalSource::Image, p.unwrap_or(1.0))?;
                let (report, _) = score(&bundle, &dec, &items, cfg)?;
                cells.push(AblationCell { seed: cfg.seed, q, p, report, best_epoch: log.best_epoch });
            }
            Ok((cells, log_lines(cfg, q, &log)))
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut logs = Vec::new();
    for (c, l) in per_q {
        cells.extend(c);
        logs.extend(l);
    }
    write_jsonl(&cfg.output_dir.join("ablate.jsonl"), &cells)?;
    write_jsonl(&cfg.checkpoint_dir.join("ablate").join(TRAIN_LOG), &logs)?;
    record_config(cfg, &cfg.output_dir)?;
    Ok(AblationTable { p: cfg.grid.p.clone(), q: cfg.grid.q.clone(), cells })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDomainRecord {
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub report: MetricReport,
}

/// One shared encoder over both domains' training pairs, one CLM per domain's text, and
/// every (text domain, image domain) combination evaluated on the test images.
pub fn cmd_cross_domain(cfg: &RunConfig, data_b: &Path) -> Result<Vec<CrossDomainRecord>> {
    let a = load_data(cfg)?;
    let b = DatasetBundle::load(data_b).with_context(|| format!("loading dataset from {}", data_b.display()))?;
    let (enc, _) = fit_encoder(cfg, &[&a, &b])?;
    let bundles = [&a, &b];
    let decoders: Vec<Decoder> = bundles
        .par_iter()
        .map(|bundle| Ok(fit_clm(cfg, bundle, &enc, cfg.clm.q)?.0))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (src, dec) in bundles.iter().zip(&decoders) {
        for tgt in &bundles {
            let items = eval_items(cfg, tgt, &enc, Split::Test, EvalSource::Image, cfg.generation.p)?;
            let (report, _) = score(tgt, dec, &items, cfg)?;
            out.push(CrossDomainRecord { seed: cfg.seed, source: src.spec.domain_id.clone(), target: tgt.spec.domain_id.clone(), report });
        }
    }
    write_jsonl(&cfg.output_dir.join("cross_domain.jsonl"), &out)?;
    record_config(cfg, &cfg.output_dir)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub text_mean: f64,
    pub caption_mean: f64,
    pub early_stop: bool,
}

/// Aligns the two validation curves of a training log and marks the epoch with the best
/// caption score (the first one on ties).
pub fn dynamics(lines: &[TrainLogLine]) -> Result<Vec<DynamicsRecord>> {
    if lines.is_empty() {
        bail!("training log has no epochs");
    }
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        let (Some(t), Some(c)) = (l.text, l.caption) else {
            bail!("epoch {} has no validation scores", l.epoch);
        };
        out.push(DynamicsRecord { seed: l.seed, epoch: l.epoch, text_mean: t.mean_score, caption_mean: c.mean_score, early_stop: false });
    }
    let best = out.iter().enumerate().fold(0, |b, (i, r)| if r.caption_mean > out[b].caption_mean { i } else { b });
    out[best].early_stop = true;
    Ok(out)
}

pub fn cmd_dynamics(cfg: &RunConfig, log: Option<&Path>) -> Result<Vec<DynamicsRecord>> {
    let path = log.map(Path::to_path_buf).unwrap_or_else(|| ckpt(cfg, TRAIN_LOG));
    let lines: Vec<TrainLogLine> = read_jsonl(&path)?;
    let out = dynamics(&lines).with_context(|| format!("malformed training log {}", path.display()))?;
    write_jsonl(&cfg.output_dir.join("dynamics.jsonl"), &out)?;
    Ok(out)
}

/// A raw image feature vector supplied on the command line as JSON.
#[derive(Debug, Clone, Deserialize)]
pub struct ImageFile {
    #[serde(default)]
    pub scene_id: u64,
    pub values: Vec<f64>,
    #[serde(default)]
    pub anchors: Vec<String>,
}

pub struct CounterfactualRun {
    pub pairs: Vec<CounterfactualPair>,
    pub summary: CounterfactualSummary,
}

#[derive(Debug, Clone, Serialize)]
struct CounterfactualLine<'a> {
    seed: u64,
    source: String,
    target: String,
    scale: f64,
    #[serde(flatten)]
    pair: &'a CounterfactualPair,
}

/// Test scenes with an entity matching `phrase`: a single word matches a category or an
/// attribute, two words match `attribute category`.
pub fn applicable_scenes(bundle: &DatasetBundle, phrase: &CaptionText) -> Vec<u64> {
    bundle
        .split_ids(Split::Test)
        .iter()
        .copied()
        .filter(|&id| {
            let scene = bundle.scene(id).expect("split ids index scenes");
            scene.entities.iter().any(|e| match phrase.tokens.as_slice() {
                [w] => &e.category == w || &e.attribute == w,
                [a, c] => &e.attribute == a && &e.category == c,
                _ => false,
            })
        })
        .collect()
}

/// Recaptions test images holding `source` (or one supplied image) after shifting the
/// image embedding towards `target`. Anchors come from the detector above `gen.p`, or
/// are the scene's true categories when `noise_free` is set.
pub fn cmd_counterfactual(
    cfg: &RunConfig,
    source: &str,
    target: &str,
    scale: f64,
    image: Option<&Path>,
    noise_free: bool,
) -> Result<CounterfactualRun> {
    let bundle = load_data(cfg)?;
    let enc = load_encoder(cfg)?;
    let dec = load_decoder(cfg)?;
    let (src, tgt) = (CaptionText::from_text(0, source), CaptionText::from_text(0, target));
    let shift = concept_direction(&src, &tgt, &enc).context("phrases must use words the encoder knows")?.with_scale(scale);
    let owned: Vec<(RawImageFeature, Vec<String>)> = match image {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let f: ImageFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if f.values.len() != bundle.image_dim() {
                bail!("image has {} values, the world uses {}", f.values.len(), bundle.image_dim());
            }
            vec![(RawImageFeature { scene_id: f.scene_id, values: f.values }, f.anchors)]
        }
        None => applicable_scenes(&bundle, &src)
            .into_iter()
            .map(|id| {
                let scene = bundle.scene(id).expect("split ids index scenes");
                let noise = if noise_free { DetectorNoiseSpec::noise_free() } else { bundle.spec.detector_noise };
                let det = detections_for(scene, &bundle, &noise, cfg.seed);
                (bundle.image(id).expect("every scene has an image").clone(), filter_anchors(&det, cfg.generation.p))
            })
            .collect(),
    };
    if owned.is_empty() {
        bail!("no test image contains `{source}`");
    }
    let images: Vec<(&RawImageFeature, Vec<String>)> = owned.iter().map(|(r, a)| (r, a.clone())).collect();
    let pairs = counterfactual_report(&images, &shift, &enc, &dec, &cfg.generation)?;
    let summary = summarize(&pairs, &shift, &bundle.spec.categories);
    let lines: Vec<CounterfactualLine> = pairs
        .iter()
        .map(|pair| CounterfactualLine { seed: cfg.seed, source: source.into(), target: target.into(), scale, pair })
        .collect();
    write_jsonl(&cfg.output_dir.join("counterfactual.jsonl"), &lines)?;
    record_config(cfg, &cfg.output_dir)?;
    Ok(CounterfactualRun { pairs, summary })
}

#[derive(Debug, Clone, Serialize)]
struct Seeded<'a, T> {
    seed: u64,
    #[serde(flatten)]
    inner: &'a T,
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradientCheck>> {
    let checks = gradient_suite(cfg.seed)?;
    let lines: Vec<_> = checks.iter().map(|inner| Seeded { seed: cfg.seed, inner }).collect();
    write_jsonl(&cfg.output_dir.join("gradcheck.jsonl"), &lines)?;
    Ok(checks)
}
