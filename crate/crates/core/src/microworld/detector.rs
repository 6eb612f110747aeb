use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::spec::{DetectorNoiseSpec, WorldSpec};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
}

/// Simulated detector over the categories of `spec`.
///
/// Each true object is kept with probability `1 - miss_rate` and scored from
/// `Beta(c, 1)`; a Poisson number of absent categories is added with scores from
/// `Beta(1, c)`. Output is sorted by descending confidence (ties by label).
pub fn detect_objects(scene: &Scene, spec: &WorldSpec, noise: &DetectorNoiseSpec, rng: &mut Rng) -> Vec<Detection> {
    let c = noise.confidence_concentration;
    let high = Beta::new(c, 1.0).expect("validated concentration");
    let low = Beta::new(1.0, c).expect("validated concentration");
    let mut out = Vec::new();
    for cat in scene.categories() {
        if rng.random_bool(1.0 - noise.miss_rate) {
            out.push(Detection { label: cat.to_string(), confidence: high.sample(rng) });
        }
    }
    if noise.false_positive_rate > 0.0 {
        let present = scene.categories();
        let absent: Vec<&String> = spec.categories.iter().filter(|c| !present.contains(&c.as_str())).collect();
        let n = Poisson::new(noise.false_positive_rate).expect("validated rate").sample(rng) as usize;
        for cat in absent.choose_multiple(rng, n.min(absent.len())) {
            out.push(Detection { label: (*cat).clone(), confidence: low.sample(rng) });
        }
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.label.cmp(&b.label)));
    out
}
