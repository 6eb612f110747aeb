//! Run configuration: built-in defaults, then a `key = value` file, then command-line
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anchorcap::clm::{ClmConfig, EarlyStopping};
use anchorcap::dualencoder::EncoderTrainConfig;
use anchorcap::generation::GenerationConfig;
use anchorcap::kv::{split_list, KvFile};
use anchorcap::microworld::{SplitSizes, WorldSpec};
use anyhow::{bail, Context as _, Result};

/// Threshold and dropout values swept by `ablate`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self { p: vec![0.5, 0.7, 0.9, 1.0], q: vec![0.0, 0.25, 0.5, 0.75, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub world: WorldSpec,
    pub sizes: SplitSizes,
    pub encoder: EncoderTrainConfig,
    pub clm: ClmConfig,
    pub generation: GenerationConfig,
    pub grid: AblationGrid,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
            world: WorldSpec::park(),
            sizes: SplitSizes { train: 5000, val: 200, test: 500 },
            encoder: EncoderTrainConfig { epochs: 10, ..Default::default() },
            clm: ClmConfig { epochs: 12, ..Default::default() },
            generation: GenerationConfig::default(),
            grid: AblationGrid::default(),
            seed: 0,
        }
    }
}

/// Every key `apply` understands, in the order `to_kv` writes them.
pub const KEYS: &[&str] = &[
    "data_dir",
    "checkpoint_dir",
    "output_dir",
    "domain",
    "image_noise_std",
    "detector.miss_rate",
    "detector.false_positive_rate",
    "detector.confidence_concentration",
    "train_size",
    "val_size",
    "test_size",
    "encoder.epochs",
    "encoder.batch_size",
    "encoder.lr",
    "clm.q",
    "clm.epochs",
    "clm.batch_size",
    "clm.lr",
    "clm.patience",
    "clm.shuffle_anchors",
    "gen.beam_width",
    "gen.max_len",
    "gen.p",
    "ablate.p",
    "ablate.q",
    "seed",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().ok().with_context(|| format!("bad value `{v}` for `{key}`"))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    let out = split_list(v).iter().map(|s| num(key, s)).collect::<Result<Vec<f64>>>()?;
    if out.is_empty() || out.iter().any(|x| !(0.0..=1.0).contains(x)) {
        bail!("`{key}` needs values in [0, 1], got `{v}`");
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let kv = KvFile::parse(&text)?;
            // the domain picks the base world, so it goes first whatever its position
            if let Some(d) = kv.get("domain") {
                cfg.apply("domain", d)?;
            }
            for (k, v) in kv.entries() {
                cfg.apply(k, v)?;
            }
        }
        if let Some((_, d)) = overrides.iter().rev().find(|(k, _)| k == "domain") {
            cfg.apply("domain", d)?;
        }
        for (k, v) in overrides {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = v.into(),
            "checkpoint_dir" => self.checkpoint_dir = v.into(),
            "output_dir" => self.output_dir = v.into(),
            "domain" => {
                if self.world.domain_id != WorldSpec::preset(v)?.domain_id {
                    let keep = (self.world.image_noise_std, self.world.detector_noise);
                    self.world = WorldSpec::preset(v)?;
                    (self.world.image_noise_std, self.world.detector_noise) = keep;
                }
            }
            "image_noise_std" => self.world.image_noise_std = num(key, v)?,
            "detector.miss_rate" => self.world.detector_noise.miss_rate = num(key, v)?,
            "detector.false_positive_rate" => self.world.detector_noise.false_positive_rate = num(key, v)?,
            "detector.confidence_concentration" => self.world.detector_noise.confidence_concentration = num(key, v)?,
            "train_size" => self.sizes.train = num(key, v)?,
            "val_size" => self.sizes.val = num(key, v)?,
            "test_size" => self.sizes.test = num(key, v)?,
            "encoder.epochs" => self.encoder.epochs = num(key, v)?,
            "encoder.batch_size" => self.encoder.batch_size = num(key, v)?,
            "encoder.lr" => self.encoder.optimizer.learning_rate = num(key, v)?,
            "clm.q" => self.clm.q = num(key, v)?,
            "clm.epochs" => self.clm.epochs = num(key, v)?,
            "clm.batch_size" => self.clm.batch_size = num(key, v)?,
            "clm.lr" => self.clm.optimizer.learning_rate = num(key, v)?,
            "clm.patience" => {
                let p: usize = num(key, v)?;
                self.clm.early_stopping = (p > 0).then_some(EarlyStopping { patience: p });
            }
            "clm.shuffle_anchors" => self.clm.shuffle_anchors = num(key, v)?,
            "gen.beam_width" => self.generation.beam_width = num(key, v)?,
            "gen.max_len" => self.generation.max_len = num(key, v)?,
            "gen.p" => self.generation.p = num(key, v)?,
            "ablate.p" => self.grid.p = list(key, v)?,
            "ablate.q" => self.grid.q = list(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.clm.validate()?;
        self.generation.validate()?;
        self.encoder.optimizer.validate()?;
        if self.sizes.train == 0 || self.sizes.test == 0 {
            bail!("train and test splits must be non-empty");
        }
        Ok(())
    }

    /// Training configs carry the global seed; the stages derive their own substreams
    /// from it.
    pub fn encoder_config(&self) -> EncoderTrainConfig {
        EncoderTrainConfig { seed: self.seed, ..self.encoder.clone() }
    }

    pub fn clm_config(&self, q: f64) -> ClmConfig {
        ClmConfig { q, seed: self.seed, generation: self.generation, ..self.clm.clone() }
    }

    pub fn world(&self) -> WorldSpec {
        self.world.clone().with_seed(self.seed)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let fmt_list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        kv.push("data_dir", self.data_dir.display());
        kv.push("checkpoint_dir", self.checkpoint_dir.display());
        kv.push("output_dir", self.output_dir.display());
        kv.push("domain", &self.world.domain_id);
        kv.push("image_noise_std", self.world.image_noise_std);
        kv.push("detector.miss_rate", self.world.detector_noise.miss_rate);
        kv.push("detector.false_positive_rate", self.world.detector_noise.false_positive_rate);
        kv.push("detector.confidence_concentration", self.world.detector_noise.confidence_concentration);
        kv.push("train_size", self.sizes.train);
        kv.push("val_size", self.sizes.val);
        kv.push("test_size", self.sizes.test);
        kv.push("encoder.epochs", self.encoder.epochs);
        kv.push("encoder.batch_size", self.encoder.batch_size);
        kv.push("encoder.lr", self.encoder.optimizer.learning_rate);
        kv.push("clm.q", self.clm.q);
        kv.push("clm.epochs", self.clm.epochs);
        kv.push("clm.batch_size", self.clm.batch_size);
        kv.push("clm.lr", self.clm.optimizer.learning_rate);
        kv.push("clm.patience", self.clm.early_stopping.map_or(0, |e| e.patience));
        kv.push("clm.shuffle_anchors", self.clm.shuffle_anchors);
        kv.push("gen.beam_width", self.generation.beam_width);
        kv.push("gen.max_len", self.generation.max_len);
        kv.push("gen.p", self.generation.p);
        kv.push("ablate.p", fmt_list(&self.grid.p));
        kv.push("ablate.q", fmt_list(&self.grid.q));
        kv.push("seed", self.seed);
        kv
    }
}

/// Parses a `KEY=VALUE` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let k = k.trim();
    if !KEYS.contains(&k) {
        return Err(format!("unknown config key `{k}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}
