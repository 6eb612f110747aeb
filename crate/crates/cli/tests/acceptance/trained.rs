//! Criteria that train models on the default world. The dataset, the encoder and the
//! q = 0.5 decoder are built once and shared.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorcap::clm::Decoder;
use anchorcap::counterfactual::{concept_direction, counterfactual_report, summarize};
use anchorcap::diagnostics::gradient_suite;
use anchorcap::dualencoder::DualEncoder;
use anchorcap::microworld::{CaptionText, DatasetBundle, DetectorNoiseSpec, Split};
use anchorcap_cli::commands::{self, EvalSource};
use anchorcap_cli::config::RunConfig;
use anchorcap_cli::pipeline::{image_eval_items, without_prefix};
use anyhow::{ensure, Context as _, Result};
use sha2::{Digest, Sha256};

pub struct Trained {
    pub cfg: RunConfig,
    _dir: tempfile::TempDir,
    bundle: Option<DatasetBundle>,
    encoder: Option<(DualEncoder, f64, f64)>,
    decoder: Option<(Decoder, f64)>,
}

impl Trained {
    pub fn new() -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let mut cfg = RunConfig::default();
        cfg.data_dir = dir.path().join("data");
        cfg.checkpoint_dir = dir.path().join("ckpt");
        cfg.output_dir = dir.path().join("out");
        Ok(Self { cfg, _dir: dir, bundle: None, encoder: None, decoder: None })
    }

    fn bundle(&mut self) -> Result<&DatasetBundle> {
        if self.bundle.is_none() {
            self.bundle = Some(commands::gen_data(&self.cfg)?);
        }
        Ok(self.bundle.as_ref().expect("just built"))
    }

    /// Encoder with its test retrieval and training seconds.
    fn encoder(&mut self) -> Result<(&DualEncoder, f64, f64)> {
        if self.encoder.is_none() {
            self.bundle()?;
            let start = Instant::now();
            let (enc, _) = commands::cmd_train_encoder(&self.cfg)?;
            let secs = start.elapsed().as_secs_f64();
            let acc = commands::test_retrieval(&enc, self.bundle.as_ref().expect("built"))?;
            self.encoder = Some((enc, acc, secs));
        }
        let (e, a, s) = self.encoder.as_ref().expect("just trained");
        Ok((e, *a, *s))
    }

    /// q = 0.5 decoder trained from text alone, with its training seconds.
    fn decoder(&mut self) -> Result<f64> {
        if self.decoder.is_none() {
            self.encoder()?;
            let start = Instant::now();
            let cfg = RunConfig { clm: anchorcap::clm::ClmConfig { q: 0.5, ..self.cfg.clm.clone() }, ..self.cfg.clone() };
            let (dec, _) = commands::cmd_train_clm(&cfg)?;
            self.decoder = Some((dec, start.elapsed().as_secs_f64()));
        }
        Ok(self.decoder.as_ref().expect("just trained").1)
    }

    fn parts(&self) -> (&DatasetBundle, &DualEncoder, &Decoder) {
        (
            self.bundle.as_ref().expect("built"),
            &self.encoder.as_ref().expect("trained").0,
            &self.decoder.as_ref().expect("trained").0,
        )
    }
}

pub fn gradients() -> Result<String> {
    let start = Instant::now();
    let checks = gradient_suite(0)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).context("empty gradient suite")?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    ensure!(failed.is_empty(), "failed: {failed:?}");
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{} checks, worst {} at {:.2e}, {secs:.1}s", checks.len(), worst.name, worst.max_rel_error))
}

pub fn alignment(t: &mut Trained) -> Result<String> {
    let (_, acc, secs) = t.encoder()?;
    let n = t.bundle()?.split_ids(Split::Test).len();
    ensure!(acc >= 0.9, "top-1 retrieval {acc:.3} on {n} pairs");
    ensure!(secs < 600.0, "encoder took {secs:.0}s");
    Ok(format!("top-1 retrieval {acc:.3} on {n} held-out pairs, {secs:.0}s"))
}

pub fn transfer(t: &mut Trained) -> Result<String> {
    let train_secs = t.decoder()?;
    let start = Instant::now();
    let cfg = t.cfg.clone();
    let (bundle, enc, dec) = t.parts();
    let items = image_eval_items(bundle, Split::Test, enc, &DetectorNoiseSpec::noise_free(), 0.5, cfg.seed)?;
    let (full, mention) = commands::score(bundle, dec, &items, &cfg)?;
    let (zero, _) = commands::score(bundle, dec, &without_prefix(&items), &cfg)?;
    let secs = train_secs + start.elapsed().as_secs_f64();
    let detail = format!(
        "{} images, mention {mention:.3}, CIDEr {:.3} vs zero prefix {:.3} ({:.1}x), {secs:.0}s",
        items.len(),
        full.cider,
        zero.cider,
        full.cider / zero.cider.max(f64::MIN_POSITIVE)
    );
    ensure!(mention >= 0.8, "{detail}");
    ensure!(full.cider >= 2.0 * zero.cider, "{detail}");
    ensure!(secs < 1200.0, "{detail}");
    Ok(detail)
}

pub fn ablation(t: &mut Trained) -> Result<String> {
    t.encoder()?;
    let start = Instant::now();
    let table = commands::cmd_ablate(&t.cfg)?;
    let secs = start.elapsed().as_secs_f64();
    print!("{}", anchorcap_cli::table::ablation_grid(&table));
    let cell = |p: f64, q: f64| table.mean_score(p, q).with_context(|| format!("missing cell p={p} q={q}"));
    let anchored = [0.5, 0.7, 0.9];
    let column = |q: f64| -> Result<f64> { Ok(table.p.iter().map(|&p| cell(p, q)).sum::<Result<f64>>()? / table.p.len() as f64) };

    let mut problems = Vec::new();
    let (c0, c5, c1) = (column(0.0)?, column(0.5)?, column(1.0)?);
    if !(c5 >= c0 && c5 >= c1) {
        problems.push(format!("(a) column means q=0 {c0:.1}, q=0.5 {c5:.1}, q=1 {c1:.1}"));
    }
    for &q in table.q.iter().filter(|&&q| q < 1.0) {
        let best = anchored.iter().map(|&p| cell(p, q)).collect::<Result<Vec<_>>>()?.into_iter().fold(f64::MIN, f64::max);
        let none = cell(1.0, q)?;
        if none >= best {
            problems.push(format!("(b) q={q}: p=1 {none:.1} >= best anchored {best:.1}"));
        }
    }
    for q in [0.25, 0.5, 0.75] {
        let v = anchored.iter().map(|&p| cell(p, q)).collect::<Result<Vec<_>>>()?;
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        if hi - lo > 0.15 * hi {
            problems.push(format!("(c) q={q}: spread {lo:.1}..{hi:.1}"));
        }
    }
    if secs >= 7200.0 {
        problems.push(format!("sweep took {secs:.0}s"));
    }
    let detail = format!("column means q=0 {c0:.1}, q=0.5 {c5:.1}, q=1 {c1:.1}; {secs:.0}s");
    ensure!(problems.is_empty(), "{}; {detail}", problems.join("; "));
    Ok(detail)
}

pub fn counterfactual(t: &mut Trained) -> Result<String> {
    t.decoder()?;
    let start = Instant::now();
    let cfg = t.cfg.clone();
    let (bundle, enc, dec) = t.parts();
    let (src, tgt) = (CaptionText::from_text(0, "red dog"), CaptionText::from_text(0, "blue dog"));
    let shift = concept_direction(&src, &tgt, enc)?;
    let ids = commands::applicable_scenes(bundle, &src);
    let items = image_eval_items(bundle, Split::Test, enc, &DetectorNoiseSpec::noise_free(), 0.5, cfg.seed)?;
    let anchors: BTreeMap<u64, &Vec<String>> = items.iter().map(|i| (i.scene_id, &i.anchors)).collect();
    let images: Vec<_> = ids.iter().map(|id| (bundle.image(*id).expect("test image"), anchors[id].clone())).collect();
    ensure!(!images.is_empty(), "no test image has a red dog");
    let pairs = counterfactual_report(&images, &shift, enc, dec, &cfg.generation)?;
    let s = summarize(&pairs, &shift, &bundle.spec.categories);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("red dog -> blue dog on {} images: flip {:.3}, categories kept {:.3}, {secs:.1}s", s.pairs, s.flip_rate(), s.preserve_rate());
    ensure!(s.flip_rate() >= 0.7 && s.preserve_rate() >= 0.7 && secs < 300.0, "{detail}");
    Ok(detail)
}

/// Small settings: every command finishes in seconds.
const SMALL: &[(&str, &str)] = &[
    ("train_size", "120"),
    ("val_size", "10"),
    ("test_size", "30"),
    ("encoder.epochs", "1"),
    ("encoder.batch_size", "16"),
    ("clm.epochs", "2"),
    ("clm.batch_size", "16"),
    ("gen.beam_width", "2"),
    ("ablate.p", "0.5,1"),
    ("ablate.q", "0.5,1"),
];

fn run_all(root: &Path) -> Result<()> {
    let mut overrides: Vec<(String, String)> = SMALL.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    for (k, d) in [("data_dir", "data"), ("checkpoint_dir", "ckpt"), ("output_dir", "out")] {
        overrides.push((k.into(), root.join(d).display().to_string()));
    }
    let cfg = RunConfig::load(None, &overrides)?;
    commands::gen_data(&cfg)?;
    commands::cmd_train_encoder(&cfg)?;
    commands::cmd_train_clm(&cfg)?;
    commands::cmd_caption(&cfg, Split::Test)?;
    commands::cmd_evaluate(&cfg, Split::Test, &[EvalSource::Image, EvalSource::ImageNoiseFree, EvalSource::NoPrefix, EvalSource::Text])?;
    commands::cmd_dynamics(&cfg, None)?;
    commands::cmd_counterfactual(&cfg, "dog", "cat", 1.0, None, false)?;
    commands::cmd_ablate(&cfg)?;
    commands::cmd_gradcheck(&cfg)?;

    let mut b = cfg.clone();
    b.apply("domain", "B")?;
    b.data_dir = root.join("data_b");
    commands::gen_data(&b)?;
    let cross = RunConfig { output_dir: root.join("out_cross"), ..cfg };
    commands::cmd_cross_domain(&cross, &b.data_dir)?;
    Ok(())
}

/// Relative path to digest, for every file below `root`.
fn digests(root: &Path) -> Result<BTreeMap<PathBuf, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let d: String = Sha256::digest(fs::read(&path)?).iter().map(|b| format!("{b:02x}")).collect();
                out.insert(path.strip_prefix(root)?.to_path_buf(), d);
            }
        }
    }
    Ok(out)
}

pub fn reproducibility() -> Result<String> {
    // same directories both times: the run records name them
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("run");
    run_all(&root)?;
    let da = digests(&root)?;
    fs::remove_dir_all(&root)?;
    run_all(&root)?;
    let db = digests(&root)?;
    ensure!(da.keys().eq(db.keys()), "different file sets");
    let differing: Vec<_> = da.iter().filter(|(k, v)| db[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "differing artifacts: {differing:?}");
    Ok(format!("{} artifacts identical across two runs", da.len()))
}
