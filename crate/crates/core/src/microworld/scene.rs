use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{Piece, Template, WorldSpec};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub category: String,
    pub attribute: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub phrase: String,
    pub object: usize,
}

/// Ground-truth state of one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub entities: Vec<Entity>,
    pub relation: Option<Relation>,
}

impl Scene {
    /// Content without the id: two scenes with equal keys render identically.
    pub fn content_key(&self) -> (Vec<Entity>, Option<Relation>) {
        (self.entities.clone(), self.relation.clone())
    }

    pub fn categories(&self) -> Vec<&str> {
        self.entities.iter().map(|e| e.category.as_str()).collect()
    }

    pub fn validate(&self, spec: &WorldSpec) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::InvalidSpec(format!("scene {} has no entities", self.scene_id)));
        }
        for e in &self.entities {
            if !spec.attributes_of(&e.category).contains(&e.attribute) {
                return Err(Error::InvalidSpec(format!("`{} {}` is not in world {}", e.attribute, e.category, spec.domain_id)));
            }
        }
        if let Some(r) = &self.relation {
            if r.subject >= self.entities.len() || r.object >= self.entities.len() || r.subject == r.object {
                return Err(Error::InvalidSpec(format!("scene {} has a dangling relation", self.scene_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionText {
    pub scene_id: u64,
    pub tokens: Vec<String>,
}

impl CaptionText {
    pub fn new(scene_id: u64, tokens: Vec<String>) -> Self {
        Self { scene_id, tokens }
    }

    pub fn from_text(scene_id: u64, text: &str) -> Self {
        Self { scene_id, tokens: tokenize(text) }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercase whitespace tokenization, shared by captions, references and metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawImageFeature {
    pub scene_id: u64,
    pub values: Vec<f64>,
}

/// Draws a scene: entity count uniform in the spec range, distinct categories,
/// attributes uniform per category, and a relation between entities 0 and 1 with
/// `relation_probability` when there are at least two entities.
pub fn generate_scene(spec: &WorldSpec, scene_id: u64, rng: &mut Rng) -> Scene {
    let (lo, hi) = spec.entity_count;
    let n = rng.random_range(lo..=hi);
    let cats: Vec<&String> = spec.categories.choose_multiple(rng, n).collect();
    let entities = cats
        .into_iter()
        .map(|c| Entity {
            category: c.clone(),
            attribute: spec.attributes_of(c).choose(rng).expect("validated: nonempty attributes").clone(),
        })
        .collect();
    let relation = if n >= 2 && rng.random_bool(spec.relation_probability) {
        Some(Relation { subject: 0, phrase: spec.relations.choose(rng).expect("validated: relations").clone(), object: 1 })
    } else {
        None
    };
    Scene { scene_id, entities, relation }
}

fn applicable<'a>(scene: &Scene, spec: &'a WorldSpec) -> Vec<&'a Template> {
    spec.templates
        .iter()
        .filter(|t| t.arity() == scene.entities.len() && t.has_relation() == scene.relation.is_some())
        .collect()
}

pub fn fill_template(template: &Template, scene: &Scene) -> Result<CaptionText> {
    let mismatch = |reason: String| Error::Template { template: template.source().to_string(), reason };
    if template.arity() != scene.entities.len() {
        return Err(mismatch(format!("template has {} entities, scene has {}", template.arity(), scene.entities.len())));
    }
    let mut tokens = Vec::new();
    for piece in template.pieces() {
        match piece {
            Piece::Word(w) => tokens.push(w.clone()),
            Piece::Category(i) => tokens.push(scene.entities[*i].category.clone()),
            Piece::Attribute(i) => tokens.push(scene.entities[*i].attribute.clone()),
            Piece::Relation => {
                let rel = scene.relation.as_ref().ok_or_else(|| mismatch("scene has no relation".into()))?;
                if (rel.subject, rel.object) != (0, 1) {
                    return Err(mismatch("templates express relations from entity 0 to entity 1".into()));
                }
                tokens.extend(rel.phrase.split_whitespace().map(str::to_lowercase));
            }
        }
    }
    Ok(CaptionText { scene_id: scene.scene_id, tokens })
}

/// One caption from a uniformly chosen applicable template.
pub fn render_caption(scene: &Scene, spec: &WorldSpec, rng: &mut Rng) -> Result<CaptionText> {
    let templates = applicable(scene, spec);
    let t = templates.choose(rng).ok_or_else(|| Error::Template {
        template: "<none>".into(),
        reason: format!("no template for {} entities (relation: {})", scene.entities.len(), scene.relation.is_some()),
    })?;
    fill_template(t, scene)
}

/// `k` reference captions from distinct applicable templates in declaration order,
/// cycling when `k` exceeds the number of templates.
pub fn render_references(scene: &Scene, spec: &WorldSpec, k: usize) -> Result<Vec<CaptionText>> {
    let templates = applicable(scene, spec);
    if templates.is_empty() {
        return Err(Error::Template { template: "<none>".into(), reason: "no applicable template".into() });
    }
    (0..k).map(|i| fill_template(templates[i % templates.len()], scene)).collect()
}

/// Width of each hashed multi-hot block in the raw image feature.
pub const FEATURE_BLOCK: usize = 48;
/// Active indices per concept code.
pub const CODE_BITS: usize = 3;

/// Raw image dimension: per entity slot a category block and an attribute block, then
/// one relation block.
pub fn image_feature_dim(spec: &WorldSpec) -> usize {
    spec.entity_count.1 * 2 * FEATURE_BLOCK + FEATURE_BLOCK
}

/// Deterministic multi-hot code of a concept word: `CODE_BITS` distinct indices within a
/// block, independent of the world the word comes from.
pub fn concept_code(word: &str) -> [usize; CODE_BITS] {
    let mut out = [usize::MAX; CODE_BITS];
    let mut filled = 0;
    let mut salt = 0u32;
    while filled < CODE_BITS {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes().chain(salt.to_le_bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        // splitmix64 finalizer: FNV's low bits alone cluster badly modulo small widths
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        let idx = (h % FEATURE_BLOCK as u64) as usize;
        if !out[..filled].contains(&idx) {
            out[filled] = idx;
            filled += 1;
        }
        salt += 1;
    }
    out
}

/// Structured encoding of the scene plus Gaussian noise. Values are rounded to `f32` so
/// the feature survives the on-disk format unchanged.
pub fn render_image_features(scene: &Scene, spec: &WorldSpec, rng: &mut Rng) -> RawImageFeature {
    let dim = image_feature_dim(spec);
    let mut values = vec![0.0; dim];
    for (slot, e) in scene.entities.iter().enumerate().take(spec.entity_count.1) {
        let base = slot * 2 * FEATURE_BLOCK;
        for i in concept_code(&e.category) {
            values[base + i] = 1.0;
        }
        for i in concept_code(&e.attribute) {
            values[base + FEATURE_BLOCK + i] = 1.0;
        }
    }
    if let Some(rel) = &scene.relation {
        let base = dim - FEATURE_BLOCK;
        for i in concept_code(&rel.phrase) {
            values[base + i] = 1.0;
        }
    }
    if spec.image_noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.image_noise_std).expect("validated std");
        for v in values.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in values.iter_mut() {
        *v = f64::from(*v as f32);
    }
    RawImageFeature { scene_id: scene.scene_id, values }
}

/// Stand-in for a grammar parser: the category words of the caption, deduplicated, in
/// order of first appearance.
pub fn extract_nouns(caption: &CaptionText, spec: &WorldSpec) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in &caption.tokens {
        if spec.is_category(t) && !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}
