use std::fs;
use std::path::{Path, PathBuf};

use mmseq::codec::render;
use mmseq::detok::{decode as detok_decode, DetokParams};
use mmseq::dynres::Image;
use mmseq::mllm::{event_tokens, generate, Event};
use mmseq::seqpack::{pack, DirResolver, DocItem, ImageRole, MultimodalDocument};
use mmseq::trainer::load_model;
use serde_json::json;

use crate::emit;
use crate::error::CliResult;
use crate::manifest::RunManifest;

pub struct DecodeArgs<'a> {
    pub checkpoint: &'a Path,
    pub detok: &'a Path,
    pub prompt: &'a str,
    /// Input image placed before the prompt text.
    pub image: Option<&'a Path>,
    /// Condition image for a stage-2 de-tokenizer.
    pub condition: Option<&'a Path>,
    pub max_new: usize,
    pub seed: u64,
    pub out: &'a Path,
}

/// Greedy generation from the prompt; every generated image's regressed
/// features go through the de-tokenizer. Writes `transcript.txt`,
/// `tokens.json` and `image_<k>.ppm`.
pub fn decode(a: &DecodeArgs) -> CliResult {
    let config = json!({
        "prompt": a.prompt,
        "image": a.image,
        "condition": a.condition,
        "max_new": a.max_new,
    });
    let mut run = RunManifest::new("decode", config, Some(a.seed))?
        .input(a.checkpoint)?
        .input(a.detok)?;
    for p in [a.image, a.condition].into_iter().flatten() {
        run = run.input(p)?;
    }
    run.output(a.out).write(a.out)?;

    let (params, vit) = load_model(a.checkpoint)?;
    let detok = DetokParams::load(a.detok)?;
    let condition = a.condition.map(Image::load_pnm).transpose()?;
    let mut items = Vec::new();
    if let Some(p) = a.image {
        let abs: PathBuf = fs::canonicalize(p)?;
        items.push(DocItem::Image {
            path: abs.display().to_string(),
            role: ImageRole::Input,
        });
    }
    items.push(DocItem::Text { text: a.prompt.into() });
    let prompt = pack(&MultimodalDocument { items }, &vit, &DirResolver::new(""))?;

    let events = generate(&params, &prompt, a.max_new)?;
    let mut images = Vec::new();
    for e in &events {
        if let Event::ImageFeatures(f) = e {
            let img = detok_decode(&detok, f, condition.as_ref(), a.seed)?;
            let path = a.out.join(format!("image_{:02}.ppm", images.len()));
            img.save_pnm(&path)?;
            images.push(path);
        }
    }
    let tokens = event_tokens(&events);
    let transcript = render(&tokens);
    fs::write(a.out.join("transcript.txt"), &transcript)?;
    fs::write(a.out.join("tokens.json"), serde_json::to_string(&tokens)?)?;
    emit(&json!({
        "generated_tokens": tokens.len(),
        "transcript": transcript,
        "images": images,
    }))
}
