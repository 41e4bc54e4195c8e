use std::fs;
use std::path::Path;

use mmseq::codec::{encode_box, parse_box_spans, render, token_name, BBox, ParsePolicy, TokenId};
use mmseq::dynres::{partition, GridPlan, Image};
use mmseq::seqpack::{pack_all, parse_manifest, DirResolver, PackedCorpus, Segment};
use mmseq::synth::{sample_corpus, task_corpus};
use mmseq::vitsim::{VisualTokenizer, VisualTokenizerConfig};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{emit, CorpusKind};

pub fn plan_grid(height: usize, width: usize, tile_h: usize, tile_w: usize) -> CliResult {
    let plan = GridPlan::new(height, width, tile_h, tile_w)?;
    let centers: Vec<[f64; 2]> = plan.cells.iter().map(|c| [c.center.0, c.center.1]).collect();
    emit(&json!({ "n_h": plan.n_h, "n_w": plan.n_w, "centers": centers }))
}

pub fn tile(image: &Path, tile_h: usize, tile_w: usize, out: &Path) -> CliResult {
    RunManifest::new("tile", json!({ "tile_h": tile_h, "tile_w": tile_w }), None)?
        .input(image)?
        .output(out)
        .write(out)?;
    let img = Image::load_pnm(image)?;
    let part = partition(&img, tile_h, tile_w)?;
    let mut files = Vec::new();
    for (cell, sub) in part.plan.cells.iter().zip(&part.sub_images) {
        let name = format!("tile_{}_{}.ppm", cell.row, cell.col);
        sub.save_pnm(out.join(&name))?;
        files.push(name);
    }
    part.global_image.save_pnm(out.join("global.ppm"))?;
    files.push("global.ppm".into());
    emit(&json!({ "plan": part.plan, "files": files }))
}

fn parse_box(s: &str) -> CliResult<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--box expects four comma-separated numbers, got {s:?}")))?;
    let [x, y, w, h] = v[..] else {
        return Err(CliError::Usage(format!("--box expects four numbers, got {}", v.len())));
    };
    Ok(BBox::new(x, y, w, h)?)
}

pub fn encode(spec: &str) -> CliResult {
    let b = parse_box(spec)?;
    let tokens = encode_box(&b)?;
    emit(&json!({
        "tokens": tokens,
        "names": tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>(),
        "quantized": b.quantized()?.coords(),
    }))
}

fn parse_ids(s: &str) -> CliResult<Vec<TokenId>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<TokenId>()
                .map_err(|_| CliError::Usage(format!("not a token id: {p:?}")))
        })
        .collect()
}

/// Boxes and malformed spans in a token stream. With `abort` the first
/// malformed span is a verification failure.
pub fn parse(tokens: &str, abort: bool) -> CliResult {
    let ids = parse_ids(tokens)?;
    let policy = if abort {
        ParsePolicy::Abort
    } else {
        ParsePolicy::Recover
    };
    match parse_box_spans(&ids, policy) {
        Ok(scan) => emit(&json!({
            "rendered": render(&ids),
            "boxes": scan.boxes.iter().map(|(p, b)| json!({ "position": p, "box": b.coords() })).collect::<Vec<_>>(),
            "errors": scan.errors.iter().map(|e| json!({ "position": e.position, "defect": e.defect.to_string() })).collect::<Vec<_>>(),
        })),
        Err(e) => {
            emit(&json!({ "errors": [{ "position": e.position, "defect": e.defect.to_string() }] }))?;
            Err(CliError::Verification(e.to_string()))
        }
    }
}

pub fn make_corpus(kind: CorpusKind, out: &Path) -> CliResult {
    RunManifest::new("make-corpus", json!({ "kind": kind }), None)?
        .output(out)
        .write(out)?;
    let corpus = match kind {
        CorpusKind::Sample => sample_corpus()?,
        CorpusKind::Task => task_corpus()?,
    };
    corpus.write(out)?;
    emit(&json!({
        "documents": corpus.documents.len(),
        "images": corpus.images.len(),
        "manifest": out.join("manifest.jsonl"),
    }))
}

/// Packs a JSONL manifest whose image refs resolve against its directory.
/// A corpus with invariant violations is still written (with its report)
/// and then fails verification.
pub fn pack(manifest: &Path, out: &Path, tokenizer: VisualTokenizerConfig) -> CliResult {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest).map_err(|e| CliError::Usage(format!("{}: {e}", manifest.display())))?;
    let docs = parse_manifest(&text)?;
    let mut run = RunManifest::new("pack", &tokenizer, Some(tokenizer.seed))?.input(manifest)?;
    for d in &docs {
        for r in d.image_refs() {
            run = run.input(&base.join(r))?;
        }
    }
    run.output(out).write(out)?;
    let vit = VisualTokenizer::new(tokenizer)?;
    let sequences = pack_all(&docs, &vit, &DirResolver::new(base))?;
    let corpus = PackedCorpus {
        tokenizer: vit,
        sequences,
    };
    corpus.write(out)?;
    let violations = corpus.violations();
    let bad = violations.iter().filter(|v| !v.is_empty()).count();
    let tiles: usize = corpus
        .sequences
        .iter()
        .flat_map(|s| &s.segments)
        .map(|s| match s {
            Segment::Visual(v) => v.num_tiles(),
            _ => 0,
        })
        .sum();
    emit(&json!({
        "documents": docs.len(),
        "sequences": corpus.sequences.len(),
        "lm_targets": corpus.sequences.iter().map(|s| s.num_lm_targets()).sum::<usize>(),
        "query_segments": corpus.sequences.iter().map(|s| s.query_segments().len()).sum::<usize>(),
        "visual_tiles": tiles,
        "clean": bad == 0,
        "out": out,
    }))?;
    if bad > 0 {
        return Err(CliError::Verification(format!(
            "{bad} sequences violate corpus invariants; see {}",
            out.join("validation.json").display()
        )));
    }
    Ok(())
}
