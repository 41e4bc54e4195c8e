//! Shared fixtures for unit tests.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynres::Image;
use crate::mllm::ModelParams;
use crate::seqpack::{pack, MapResolver, MultimodalDocument, PackedSequence};
use crate::vitsim::{VisualTokenizer, VisualTokenizerConfig};

pub fn vit() -> VisualTokenizer {
    VisualTokenizer::new(VisualTokenizerConfig::default()).unwrap()
}

pub fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, 3, (0..h * w * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn resolver() -> MapResolver {
    let mut m = HashMap::new();
    m.insert("in.ppm".to_string(), noise_image(32, 40, 11));
    m.insert("out.ppm".to_string(), noise_image(32, 32, 12));
    MapResolver(m)
}

pub fn packed(json: &str) -> PackedSequence {
    let doc: MultimodalDocument = serde_json::from_str(json).unwrap();
    pack(&doc, &vit(), &resolver()).unwrap()
}

/// Input image, boxed caption, and a target image.
pub fn multimodal_seq() -> PackedSequence {
    packed(
        r#"{"items":[{"type":"image","path":"in.ppm","role":"input"},
        {"type":"boxed_text","spans":[{"text":"a "},{"box":[0.3,0.6,0.2,0.4]},{"text":"b"}]},
        {"type":"image","path":"out.ppm","role":"target"},{"type":"text","text":"z"}]}"#,
    )
}

pub fn text_seq(s: &str) -> PackedSequence {
    packed(&format!(
        r#"{{"items":[{{"type":"text","text":{}}}]}}"#,
        serde_json::to_string(s).unwrap()
    ))
}

pub fn tiny_params(seed: u64) -> ModelParams {
    crate::mllm::gradcheck::probe_params(seed).unwrap()
}
