//! Glue between the library stages: building training samples and evaluation sets from
//! a dataset bundle and trained encoders.

use anchorcap::clm::{EvalItem, TrainingSample};
use anchorcap::dualencoder::{DualEncoder, Embedding};
use anchorcap::generation::filter_anchors;
use anchorcap::microworld::{
    detect_objects, extract_nouns, CaptionText, DatasetBundle, Detection, DetectorNoiseSpec, Scene, Split,
};
use anchorcap::rng::keyed_substream;
use anyhow::{Context as _, Result};

/// Text-only CLM samples: each corpus caption with its own embedding and its nouns.
pub fn text_samples(bundle: &DatasetBundle, enc: &DualEncoder) -> Result<Vec<TrainingSample>> {
    let caps: Vec<&CaptionText> = bundle.text_corpus.iter().collect();
    let emb = enc.encode_texts(&caps).context("encoding the text corpus")?;
    Ok(bundle
        .text_corpus
        .iter()
        .zip(emb)
        .map(|(c, prefix)| TrainingSample { prefix, anchors: extract_nouns(c, &bundle.spec), caption: c.clone() })
        .collect())
}

/// Text-side evaluation: the first reference stands in for the image, with its nouns as
/// noise-free anchors.
pub fn text_eval_items(bundle: &DatasetBundle, split: Split, enc: &DualEncoder) -> Result<Vec<EvalItem>> {
    let pairs = bundle.paired_eval(split);
    let firsts: Vec<&CaptionText> = pairs.iter().map(|(_, refs)| &refs[0]).collect();
    let emb = enc.encode_texts(&firsts)?;
    Ok(pairs
        .iter()
        .zip(emb)
        .map(|((img, refs), prefix)| EvalItem {
            scene_id: img.scene_id,
            prefix,
            anchors: extract_nouns(&refs[0], &bundle.spec),
            references: refs.to_vec(),
        })
        .collect())
}

/// Detector output for a scene. Draws are keyed by scene id, so the same scene gets the
/// same detections regardless of threshold, split or evaluation order.
pub fn detections_for(scene: &Scene, bundle: &DatasetBundle, noise: &DetectorNoiseSpec, seed: u64) -> Vec<Detection> {
    detect_objects(scene, &bundle.spec, noise, &mut keyed_substream(seed, "detector", scene.scene_id))
}

/// Image-side evaluation: image embeddings, detector anchors above `p`.
pub fn image_eval_items(
    bundle: &DatasetBundle,
    split: Split,
    enc: &DualEncoder,
    noise: &DetectorNoiseSpec,
    p: f64,
    seed: u64,
) -> Result<Vec<EvalItem>> {
    let pairs = bundle.paired_eval(split);
    let imgs: Vec<_> = pairs.iter().map(|(img, _)| *img).collect();
    let emb = enc.encode_images(&imgs)?;
    pairs
        .iter()
        .zip(emb)
        .map(|((img, refs), prefix)| {
            let scene = bundle.scene(img.scene_id).context("image without scene")?;
            let det = detections_for(scene, bundle, noise, seed);
            Ok(EvalItem { scene_id: img.scene_id, prefix, anchors: filter_anchors(&det, p), references: refs.to_vec() })
        })
        .collect()
}

/// Same items with the prefix replaced by the zero vector.
pub fn without_prefix(items: &[EvalItem]) -> Vec<EvalItem> {
    items
        .iter()
        .map(|it| EvalItem { prefix: Embedding::zeros(it.prefix.dim()), ..it.clone() })
        .collect()
}

/// Mean over images of the fraction of the scene's categories named in the caption.
pub fn object_mention_rate(bundle: &DatasetBundle, captions: &[CaptionText]) -> Result<f64> {
    anyhow::ensure!(!captions.is_empty(), "no captions");
    let mut total = 0.0;
    for c in captions {
        let scene = bundle.scene(c.scene_id).context("caption for unknown scene")?;
        let cats = scene.categories();
        let hit = cats.iter().filter(|cat| c.tokens.iter().any(|t| t == *cat)).count();
        total += hit as f64 / cats.len() as f64;
    }
    Ok(total / captions.len() as f64)
}
