use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::kv::{split_list, KvFile};
use crate::{Error, Result};

/// Words shared by every built-in world's templates and relation phrases.
pub const FUNCTION_WORDS: &[&str] = &["a", "and", "is", "of", "photo", "see", "the", "there", "we", "with"];

/// Simulated object-detector noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorNoiseSpec {
    pub miss_rate: f64,
    /// Expected number of spurious detections per scene (Poisson mean).
    pub false_positive_rate: f64,
    /// True detections draw confidence from `Beta(c, 1)`, spurious ones from `Beta(1, c)`.
    pub confidence_concentration: f64,
}

impl Default for DetectorNoiseSpec {
    fn default() -> Self {
        Self { miss_rate: 0.1, false_positive_rate: 0.5, confidence_concentration: 4.0 }
    }
}

impl DetectorNoiseSpec {
    /// No misses, no spurious labels, and confidences pinned (numerically) at 1.
    pub fn noise_free() -> Self {
        Self { miss_rate: 0.0, false_positive_rate: 0.0, confidence_concentration: 1e6 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::InvalidSpec(format!("miss_rate {} outside [0, 1]", self.miss_rate)));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!("false_positive_rate {} must be >= 0", self.false_positive_rate)));
        }
        if !(self.confidence_concentration > 0.0 && self.confidence_concentration.is_finite()) {
            return Err(Error::InvalidSpec("confidence_concentration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Category(usize),
    Attribute(usize),
    Relation,
}

/// A caption template such as `a {attr0} {cat0} {rel} a {attr1} {cat1}`.
///
/// A template with `{rel}` expresses "entity 0 <relation> entity 1".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    pieces: Vec<Piece>,
    arity: usize,
    has_relation: bool,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let bad = |reason: String| Error::Template { template: source.to_string(), reason };
        let mut pieces = Vec::new();
        for word in source.split_whitespace() {
            let piece = match word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                None if word.contains(['{', '}']) => return Err(bad(format!("malformed slot `{word}`"))),
                None => Piece::Word(word.to_lowercase()),
                Some("rel") => Piece::Relation,
                Some(slot) => {
                    let (kind, idx) = if let Some(i) = slot.strip_prefix("cat") {
                        ("cat", i)
                    } else if let Some(i) = slot.strip_prefix("attr") {
                        ("attr", i)
                    } else {
                        return Err(bad(format!("unknown slot `{slot}`")));
                    };
                    let idx: usize = idx.parse().map_err(|_| bad(format!("bad slot index in `{slot}`")))?;
                    if kind == "cat" {
                        Piece::Category(idx)
                    } else {
                        Piece::Attribute(idx)
                    }
                }
            };
            pieces.push(piece);
        }
        let cats: Vec<usize> = pieces.iter().filter_map(|p| if let Piece::Category(i) = p { Some(*i) } else { None }).collect();
        let arity = cats.len();
        let distinct: BTreeSet<usize> = cats.iter().copied().collect();
        if distinct.len() != arity || distinct.iter().copied().ne(0..arity) {
            return Err(bad("category slots must be {cat0}..{catN-1}, each exactly once".into()));
        }
        if pieces.iter().any(|p| matches!(p, Piece::Attribute(i) if *i >= arity)) {
            return Err(bad("attribute slot without a matching category slot".into()));
        }
        let rel_count = pieces.iter().filter(|p| **p == Piece::Relation).count();
        if rel_count > 1 || (rel_count == 1 && arity < 2) {
            return Err(bad("{rel} needs at least two entities and may appear once".into()));
        }
        Ok(Self { source: source.to_string(), pieces, arity, has_relation: rel_count == 1 })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn has_relation(&self) -> bool {
        self.has_relation
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Everything needed to generate one synthetic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub domain_id: String,
    pub categories: Vec<String>,
    pub attributes: BTreeMap<String, Vec<String>>,
    pub relations: Vec<String>,
    /// Inclusive `(min, max)` entity count per scene.
    pub entity_count: (usize, usize),
    /// Chance that a scene with two or more entities gets a relation.
    pub relation_probability: f64,
    pub templates: Vec<Template>,
    pub detector_noise: DetectorNoiseSpec,
    /// Standard deviation of the Gaussian noise added to raw image features.
    pub image_noise_std: f64,
    pub seed: u64,
}

pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a {attr0} {cat0}",
    "there is a {attr0} {cat0}",
    "a photo of a {attr0} {cat0}",
    "we see a {attr0} {cat0}",
    "the {cat0} is {attr0}",
    "a {attr0} {cat0} {rel} a {attr1} {cat1}",
    "there is a {attr0} {cat0} {rel} a {attr1} {cat1}",
    "a photo of a {attr0} {cat0} {rel} a {attr1} {cat1}",
    "we see a {attr0} {cat0} {rel} a {attr1} {cat1}",
    "the {attr0} {cat0} is {rel} the {attr1} {cat1}",
    "a {attr0} {cat0} and a {attr1} {cat1}",
    "there is a {attr0} {cat0} and a {attr1} {cat1}",
    "a photo of a {attr0} {cat0} and a {attr1} {cat1}",
    "we see a {attr0} {cat0} and a {attr1} {cat1}",
    "a {attr0} {cat0} with a {attr1} {cat1}",
    "a {attr0} {cat0} {rel} a {attr1} {cat1} and a {attr2} {cat2}",
    "there is a {attr0} {cat0} {rel} a {attr1} {cat1} and a {attr2} {cat2}",
    "a photo of a {attr0} {cat0} {rel} a {attr1} {cat1} and a {attr2} {cat2}",
    "we see a {attr0} {cat0} {rel} a {attr1} {cat1} and a {attr2} {cat2}",
    "the {attr0} {cat0} is {rel} the {attr1} {cat1} with a {attr2} {cat2}",
    "a {attr0} {cat0} a {attr1} {cat1} and a {attr2} {cat2}",
    "there is a {attr0} {cat0} a {attr1} {cat1} and a {attr2} {cat2}",
    "a photo of a {attr0} {cat0} a {attr1} {cat1} and a {attr2} {cat2}",
    "we see a {attr0} {cat0} a {attr1} {cat1} and a {attr2} {cat2}",
    "a {attr0} {cat0} with a {attr1} {cat1} and a {attr2} {cat2}",
];

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl WorldSpec {
    /// Outdoor domain: animals, toys and street objects with colour attributes.
    pub fn park() -> Self {
        let attrs: &[(&str, &[&str])] = &[
            ("ball", &["red", "blue", "green", "yellow", "orange"]),
            ("bench", &["brown", "green", "gray", "white", "black"]),
            ("bike", &["red", "blue", "black", "yellow", "green"]),
            ("bird", &["blue", "yellow", "red", "black", "white"]),
            ("car", &["red", "blue", "black", "white", "gray"]),
            ("cat", &["black", "white", "gray", "orange", "brown"]),
            ("dog", &["red", "blue", "brown", "black", "white"]),
            ("kite", &["red", "green", "yellow", "pink", "orange"]),
            ("tree", &["green", "brown", "yellow", "orange", "pink"]),
            ("umbrella", &["pink", "blue", "red", "black", "yellow"]),
        ];
        Self::from_tables("A", attrs, &["next to", "behind", "in front of", "near", "above"])
    }

    /// Indoor domain: kitchenware with material/state attributes. Shares only function
    /// words with [`WorldSpec::park`].
    pub fn kitchen() -> Self {
        let attrs: &[(&str, &[&str])] = &[
            ("bottle", &["glass", "plastic", "empty", "full", "tall"]),
            ("bowl", &["ceramic", "wooden", "empty", "full", "clean"]),
            ("cup", &["ceramic", "glass", "dirty", "clean", "empty"]),
            ("fork", &["metal", "plastic", "shiny", "dirty", "clean"]),
            ("jar", &["glass", "plastic", "empty", "full", "sealed"]),
            ("kettle", &["metal", "shiny", "plastic", "dirty", "hot"]),
            ("knife", &["metal", "shiny", "sharp", "dirty", "wooden"]),
            ("pan", &["metal", "hot", "dirty", "clean", "shiny"]),
            ("plate", &["ceramic", "dirty", "clean", "plastic", "wooden"]),
            ("spoon", &["metal", "wooden", "plastic", "shiny", "dirty"]),
        ];
        Self::from_tables("B", attrs, &["beside", "on top of", "inside", "left of", "right of"])
    }

    /// Built-in world by domain id (`A`/`park`, `B`/`kitchen`).
    pub fn preset(domain_id: &str) -> Result<Self> {
        match domain_id {
            "A" | "park" => Ok(Self::park()),
            "B" | "kitchen" => Ok(Self::kitchen()),
            other => Err(Error::InvalidSpec(format!("no built-in world `{other}`"))),
        }
    }

    fn from_tables(domain_id: &str, attrs: &[(&str, &[&str])], relations: &[&str]) -> Self {
        Self {
            domain_id: domain_id.to_string(),
            categories: attrs.iter().map(|(c, _)| c.to_string()).collect(),
            attributes: attrs.iter().map(|(c, a)| (c.to_string(), owned(a))).collect(),
            relations: owned(relations),
            entity_count: (1, 3),
            relation_probability: 0.5,
            templates: DEFAULT_TEMPLATES.iter().map(|t| Template::parse(t).expect("built-in template")).collect(),
            detector_noise: DetectorNoiseSpec::default(),
            image_noise_std: 0.1,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn attributes_of(&self, category: &str) -> &[String] {
        self.attributes.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn is_category(&self, word: &str) -> bool {
        self.categories.iter().any(|c| c == word)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return bad("duplicate category".into());
        }
        for c in &self.categories {
            if self.attributes_of(c).is_empty() {
                return bad(format!("category `{c}` has no attributes"));
            }
        }
        let (lo, hi) = self.entity_count;
        if lo == 0 || lo > hi {
            return bad(format!("entity count range {lo}..={hi} is empty or admits empty scenes"));
        }
        if hi > self.categories.len() {
            return bad(format!("scenes of {hi} distinct entities need at least {hi} categories"));
        }
        if !(0.0..=1.0).contains(&self.relation_probability) {
            return bad("relation_probability outside [0, 1]".into());
        }
        let relations_possible = hi >= 2 && self.relation_probability > 0.0;
        if relations_possible && self.relations.is_empty() {
            return bad("relations may occur but none are declared".into());
        }
        for t in &self.templates {
            if t.arity() > hi {
                return bad(format!("template `{t}` references more entities than a scene can have"));
            }
        }
        for n in lo..=hi {
            let with_rel = n >= 2 && self.relation_probability > 0.0;
            let without_rel = n < 2 || self.relation_probability < 1.0;
            for (needed, rel) in [(with_rel, true), (without_rel, false)] {
                if needed && !self.templates.iter().any(|t| t.arity() == n && t.has_relation() == rel) {
                    return bad(format!("no template for {n} entities (relation: {rel})"));
                }
            }
        }
        if !(self.image_noise_std >= 0.0 && self.image_noise_std.is_finite()) {
            return bad("image_noise_std must be finite and >= 0".into());
        }
        self.detector_noise.validate()
    }

    /// Every word any caption of this world can contain, sorted.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = self.categories.iter().cloned().collect();
        v.extend(self.attributes.values().flatten().cloned());
        v.extend(self.relations.iter().flat_map(|r| r.split_whitespace().map(String::from)));
        for t in &self.templates {
            for p in t.pieces() {
                if let Piece::Word(w) = p {
                    v.insert(w.clone());
                }
            }
        }
        v
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.push("domain_id", &self.domain_id);
        kv.push("seed", self.seed);
        kv.push("categories", self.categories.join(", "));
        for c in &self.categories {
            kv.push(format!("attributes.{c}"), self.attributes_of(c).join(", "));
        }
        kv.push("relations", self.relations.join(", "));
        kv.push("entity_count", format!("{}..{}", self.entity_count.0, self.entity_count.1));
        kv.push("relation_probability", self.relation_probability);
        kv.push("image_noise_std", self.image_noise_std);
        kv.push("detector.miss_rate", self.detector_noise.miss_rate);
        kv.push("detector.false_positive_rate", self.detector_noise.false_positive_rate);
        kv.push("detector.confidence_concentration", self.detector_noise.confidence_concentration);
        for t in &self.templates {
            kv.push("template", t.source());
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let categories = split_list(kv.require("categories")?);
        let mut attributes = BTreeMap::new();
        for c in &categories {
            attributes.insert(c.clone(), split_list(kv.require(&format!("attributes.{c}"))?));
        }
        let range = kv.require("entity_count")?;
        let (lo, hi) = range
            .split_once("..")
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| Error::Parse(format!("bad entity_count `{range}`")))?;
        let num = |key: &str| -> Result<f64> {
            kv.parse_value::<f64>(key)?.ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
        };
        let spec = Self {
            domain_id: kv.require("domain_id")?.to_string(),
            categories,
            attributes,
            relations: split_list(kv.get("relations").unwrap_or("")),
            entity_count: (lo, hi),
            relation_probability: num("relation_probability")?,
            templates: kv.get_all("template").into_iter().map(Template::parse).collect::<Result<_>>()?,
            detector_noise: DetectorNoiseSpec {
                miss_rate: num("detector.miss_rate")?,
                false_positive_rate: num("detector.false_positive_rate")?,
                confidence_concentration: num("detector.confidence_concentration")?,
            },
            image_noise_std: num("image_noise_std")?,
            seed: kv.parse_value("seed")?.unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }
}
