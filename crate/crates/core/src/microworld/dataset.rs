use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{
    generate_scene, image_feature_dim, render_caption, render_image_features, render_references, CaptionText,
    RawImageFeature, Scene,
};
use super::spec::WorldSpec;
use crate::kv::KvFile;
use crate::rng::{keyed_substream, Rng};
use crate::{Error, Result};

/// Reference captions rendered per validation/test image.
pub const REFERENCES_PER_IMAGE: usize = 5;

/// Attempts at drawing a scene whose content differs from all earlier scenes.
const MAX_UNIQUE_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// One generated world.
///
/// `scenes` and `images` are aligned and ordered train, then val, then test. The text
/// corpus holds one caption per train scene; `references` holds rendered references
/// for every val and test scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: WorldSpec,
    pub scenes: Vec<Scene>,
    pub images: Vec<RawImageFeature>,
    pub text_corpus: Vec<CaptionText>,
    pub references: BTreeMap<u64, Vec<CaptionText>>,
    pub splits: BTreeMap<Split, Vec<u64>>,
}

/// Generates a bundle from `spec.seed`. Scene ids are `0..total`; every scene has
/// content distinct from all others, so no test image duplicates a training caption.
pub fn build_dataset(spec: &WorldSpec, sizes: SplitSizes, rng: &mut Rng) -> Result<DatasetBundle> {
    spec.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidSpec("every split needs at least one scene".into()));
    }
    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(sizes.total());
    for id in 0..sizes.total() as u64 {
        let mut attempt = 0;
        let scene = loop {
            let s = generate_scene(spec, id, rng);
            if seen.insert(s.content_key()) {
                break s;
            }
            attempt += 1;
            if attempt >= MAX_UNIQUE_RETRIES {
                return Err(Error::CorpusTooSmall(format!(
                    "world {} cannot supply {} distinct scenes",
                    spec.domain_id,
                    sizes.total()
                )));
            }
        };
        scenes.push(scene);
    }

    let mut splits = BTreeMap::new();
    let mut next = 0u64;
    for split in Split::ALL {
        let n = sizes.get(split) as u64;
        splits.insert(split, (next..next + n).collect::<Vec<_>>());
        next += n;
    }

    let images = scenes
        .iter()
        .map(|s| render_image_features(s, spec, &mut keyed_substream(spec.seed, "image", s.scene_id)))
        .collect();
    let text_corpus = scenes[..sizes.train]
        .iter()
        .map(|s| render_caption(s, spec, &mut keyed_substream(spec.seed, "caption", s.scene_id)))
        .collect::<Result<_>>()?;
    let references = scenes[sizes.train..]
        .iter()
        .map(|s| Ok((s.scene_id, render_references(s, spec, REFERENCES_PER_IMAGE)?)))
        .collect::<Result<_>>()?;

    Ok(DatasetBundle { spec: spec.clone(), scenes, images, text_corpus, references, splits })
}

#[derive(Serialize, Deserialize)]
struct RefsRecord {
    scene_id: u64,
    references: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    split: Split,
    scene_ids: Vec<u64>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

impl DatasetBundle {
    pub const FILES: [&'static str; 7] =
        ["world.cfg", "scenes.jsonl", "corpus.jsonl", "images.f32", "images.f32.hdr", "refs.jsonl", "splits.jsonl"];

    pub fn split_ids(&self, split: Split) -> &[u64] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes.get(scene_id as usize).filter(|s| s.scene_id == scene_id)
    }

    pub fn image(&self, scene_id: u64) -> Option<&RawImageFeature> {
        self.images.get(scene_id as usize).filter(|f| f.scene_id == scene_id)
    }

    /// Image and reference set for every scene in a val/test split.
    pub fn paired_eval(&self, split: Split) -> Vec<(&RawImageFeature, &[CaptionText])> {
        self.split_ids(split)
            .iter()
            .filter_map(|id| Some((self.image(*id)?, self.references.get(id)?.as_slice())))
            .collect()
    }

    /// (image, caption) pairs of the train split: the text corpus aligned with its images.
    pub fn train_pairs(&self) -> Vec<(&RawImageFeature, &CaptionText)> {
        self.text_corpus.iter().filter_map(|c| Some((self.image(c.scene_id)?, c))).collect()
    }

    pub fn image_dim(&self) -> usize {
        image_feature_dim(&self.spec)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("world.cfg"), self.spec.to_kv().render())?;
        write_jsonl(&dir.join("scenes.jsonl"), &self.scenes)?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.text_corpus)?;
        write_jsonl(
            &dir.join("refs.jsonl"),
            self.references.iter().map(|(id, refs)| RefsRecord {
                scene_id: *id,
                references: refs.iter().map(|r| r.tokens.clone()).collect(),
            }),
        )?;
        write_jsonl(
            &dir.join("splits.jsonl"),
            self.splits.iter().map(|(s, ids)| SplitRecord { split: *s, scene_ids: ids.clone() }),
        )?;
        let dim = self.image_dim();
        let mut bytes = Vec::with_capacity(self.images.len() * dim * 4);
        for img in &self.images {
            for v in &img.values {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join("images.f32"), bytes)?;
        fs::write(dir.join("images.f32.hdr"), format!("dim={dim} count={}\n", self.images.len()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = WorldSpec::from_kv(&KvFile::parse(&fs::read_to_string(dir.join("world.cfg"))?)?)?;
        let scenes: Vec<Scene> = read_jsonl(&dir.join("scenes.jsonl"))?;
        for (i, s) in scenes.iter().enumerate() {
            if s.scene_id != i as u64 {
                return Err(Error::Parse(format!("scenes.jsonl: expected scene_id {i}, found {}", s.scene_id)));
            }
            s.validate(&spec)?;
        }
        let text_corpus = read_jsonl(&dir.join("corpus.jsonl"))?;
        let references = read_jsonl::<RefsRecord>(&dir.join("refs.jsonl"))?
            .into_iter()
            .map(|r| {
                let refs = r.references.into_iter().map(|t| CaptionText::new(r.scene_id, t)).collect();
                (r.scene_id, refs)
            })
            .collect();
        let splits = read_jsonl::<SplitRecord>(&dir.join("splits.jsonl"))?
            .into_iter()
            .map(|r| (r.split, r.scene_ids))
            .collect();

        let header = fs::read_to_string(dir.join("images.f32.hdr"))?;
        let mut dim = None;
        let mut count = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                _ => return Err(Error::Parse(format!("images.f32.hdr: unexpected field `{field}`"))),
            }
        }
        let (dim, count) = dim.zip(count).ok_or_else(|| Error::Parse("images.f32.hdr: need dim and count".into()))?;
        if dim != image_feature_dim(&spec) || count != scenes.len() {
            return Err(Error::Parse(format!("images.f32.hdr: dim={dim} count={count} does not match world")));
        }
        let bytes = fs::read(dir.join("images.f32"))?;
        if bytes.len() != dim * count * 4 {
            return Err(Error::Parse(format!("images.f32: expected {} bytes, found {}", dim * count * 4, bytes.len())));
        }
        let images = bytes
            .chunks_exact(dim * 4)
            .enumerate()
            .map(|(i, chunk)| RawImageFeature {
                scene_id: i as u64,
                values: chunk
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect(),
            })
            .collect();

        let bundle = Self { spec, scenes, images, text_corpus, references, splits };
        bundle.check()?;
        Ok(bundle)
    }

    /// Structural invariants: disjoint splits covering all scenes, corpus drawn from
    /// train only, references present for every val/test scene.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ids in self.splits.values() {
            for id in ids {
                if !seen.insert(*id) || self.scene(*id).is_none() {
                    return Err(Error::InvalidSpec(format!("scene {id} duplicated across splits or unknown")));
                }
            }
        }
        if seen.len() != self.scenes.len() {
            return Err(Error::InvalidSpec("splits do not cover every scene".into()));
        }
        let train: HashSet<u64> = self.split_ids(Split::Train).iter().copied().collect();
        if let Some(c) = self.text_corpus.iter().find(|c| !train.contains(&c.scene_id)) {
            return Err(Error::InvalidSpec(format!("corpus caption for non-train scene {}", c.scene_id)));
        }
        for split in [Split::Val, Split::Test] {
            for id in self.split_ids(split) {
                if self.references.get(id).is_none_or(Vec::is_empty) {
                    return Err(Error::InvalidSpec(format!("scene {id} has no references")));
                }
            }
        }
        Ok(())
    }
}
