//! Synthetic micro-world: scenes, captions, raw image features, a noun extractor for
//! training anchors and a noisy object detector for generation anchors.

mod dataset;
mod detector;
mod scene;
mod spec;

pub use dataset::{build_dataset, DatasetBundle, Split, SplitSizes, REFERENCES_PER_IMAGE};
pub use detector::{detect_objects, Detection};
pub use scene::{
    concept_code, extract_nouns, fill_template, generate_scene, image_feature_dim, render_caption,
    render_image_features, render_references, tokenize, CaptionText, Entity, RawImageFeature, Relation, Scene,
    CODE_BITS, FEATURE_BLOCK,
};
pub use spec::{DetectorNoiseSpec, Piece, Template, WorldSpec, DEFAULT_TEMPLATES, FUNCTION_WORDS};
