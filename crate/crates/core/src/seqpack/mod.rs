//! Interleaved document packing.
//!
//! A document is an ordered list of text, boxed captions, and images. Input
//! images become visual segments (64 rows per tile, sub-tiles row-major,
//! global tile last). Target images become
//! `IMG_START, 64 query slots, IMG_END` with the tokenizer embedding of the
//! globally resized image as regression target.
//!
//! Position `i` carries an LM target when the token at `i + 1` is text,
//! loc, `BOX_START`, `BOX_END` or `IMG_START` and position `i` is a token or
//! the last row of a visual segment. `IMG_END` is never a target.

mod manifest;
mod store;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use manifest::{
    parse_manifest, DirResolver, DocItem, ImageResolver, ImageRole, MapResolver, MultimodalDocument, Span,
};
pub use store::{PackedCorpus, CORPUS_FORMAT};

use crate::codec::{self, TokenClass, TokenId, IMG_END, IMG_START, PAD};
use crate::dynres::{self, Image, GLOBAL_CENTER};
use crate::error::{contract, Result};
use crate::kernel::Tensor;
use crate::vitsim::{VisualTokenizer, POOLED_COUNT};

/// Query slots per generated image.
pub const QUERY_SLOTS: usize = POOLED_COUNT;

/// Tokenizer features of one input image. Position embeddings are learnable
/// and applied by the model from `centers`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSegment {
    /// `[64·tiles × d_v]`, sub-tiles row-major then the global tile.
    pub features: Tensor,
    /// One `(x_c, y_c)` per tile.
    pub centers: Vec<(f64, f64)>,
}

impl VisualSegment {
    pub fn num_tiles(&self) -> usize {
        self.centers.len()
    }

    pub fn tile_features(&self, tile: usize) -> Result<Tensor> {
        self.features.slice_rows(tile * POOLED_COUNT, POOLED_COUNT)
    }

    /// Features with each tile's position embedding added.
    pub fn with_position_embeddings(&self, params: &dynres::PositionEmbeddingParams) -> Result<Tensor> {
        let mut out = self.features.clone();
        let d = out.last_dim();
        for (t, &(x, y)) in self.centers.iter().enumerate() {
            let p = params.embed(x, y)?;
            for r in t * POOLED_COUNT..(t + 1) * POOLED_COUNT {
                for (v, e) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(p.data()) {
                    *v += e;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Tokens(Vec<TokenId>),
    Visual(VisualSegment),
    Query { slots: usize },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Visual(v) => v.features.shape()[0],
            Segment::Query { slots } => *slots,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What occupies one position of a packed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    Visual { segment: usize, row: usize },
    Query { segment: usize, slot: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTarget {
    /// Index into `segments` of the query segment.
    pub segment: usize,
    /// `[64 × d_v]`
    pub target: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PackedSequence {
    pub segments: Vec<Segment>,
    /// One entry per position.
    pub lm_targets: Vec<Option<TokenId>>,
    pub regression_targets: Vec<RegressionTarget>,
}

impl PackedSequence {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.total_len());
        for (s, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Tokens(ids) => out.extend(ids.iter().map(|&t| Slot::Token(t))),
                Segment::Visual(v) => {
                    out.extend((0..v.features.shape()[0]).map(|row| Slot::Visual { segment: s, row }))
                }
                Segment::Query { slots } => out.extend((0..*slots).map(|slot| Slot::Query { segment: s, slot })),
            }
        }
        out
    }

    /// Appends tokens, merging with a trailing token segment.
    pub fn push_tokens(&mut self, ids: &[TokenId]) {
        if ids.is_empty() {
            return;
        }
        match self.segments.last_mut() {
            Some(Segment::Tokens(t)) => t.extend_from_slice(ids),
            _ => self.segments.push(Segment::Tokens(ids.to_vec())),
        }
    }

    pub fn query_segments(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Query { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Recomputes `lm_targets` from the segment layout.
    pub fn assign_lm_targets(&mut self) {
        self.lm_targets = lm_targets_for(&self.slots());
    }

    pub fn num_lm_targets(&self) -> usize {
        self.lm_targets.iter().filter(|t| t.is_some()).count()
    }
}

fn lm_targets_for(slots: &[Slot]) -> Vec<Option<TokenId>> {
    let mut out = vec![None; slots.len()];
    for i in 0..slots.len().saturating_sub(1) {
        let Slot::Token(next) = slots[i + 1] else { continue };
        let source_ok = match slots[i] {
            Slot::Token(_) => true,
            Slot::Visual { .. } => !matches!(slots[i + 1], Slot::Visual { .. }),
            Slot::Query { .. } => false,
        };
        if source_ok && TokenClass::of(next).is_some_and(TokenClass::is_lm_target) {
            out[i] = Some(next);
        }
    }
    out
}

/// Packs one document. Tile size comes from the tokenizer config.
pub fn pack(doc: &MultimodalDocument, vit: &VisualTokenizer, resolver: &dyn ImageResolver) -> Result<PackedSequence> {
    doc.validate()?;
    let mut seq = PackedSequence::default();
    for item in &doc.items {
        match item {
            DocItem::Text { text } => seq.push_tokens(&codec::tokenize_text(text.as_bytes())),
            DocItem::BoxedText { spans } => {
                for span in spans {
                    match span {
                        Span::Text { text } => seq.push_tokens(&codec::tokenize_text(text.as_bytes())),
                        Span::Box { bbox } => {
                            let b = codec::BBox::new(bbox[0], bbox[1], bbox[2], bbox[3])?;
                            seq.push_tokens(&codec::encode_box(&b)?);
                        }
                    }
                }
            }
            DocItem::Image { path, role } => {
                let img = resolver.resolve(path)?;
                match role {
                    ImageRole::Input => {
                        seq.segments.push(Segment::Visual(encode_input_image(&img, vit)?));
                    }
                    ImageRole::Target => {
                        let target = regression_target(&img, vit)?;
                        seq.push_tokens(&[IMG_START]);
                        seq.segments.push(Segment::Query { slots: QUERY_SLOTS });
                        seq.regression_targets.push(RegressionTarget {
                            segment: seq.segments.len() - 1,
                            target,
                        });
                        seq.segments.push(Segment::Tokens(vec![IMG_END]));
                    }
                }
            }
        }
    }
    seq.assign_lm_targets();
    Ok(seq)
}

/// Packs documents in parallel; the first failure is reported with its
/// 1-based document number.
pub fn pack_all(
    docs: &[MultimodalDocument],
    vit: &VisualTokenizer,
    resolver: &dyn ImageResolver,
) -> Result<Vec<PackedSequence>> {
    use rayon::prelude::*;
    docs.par_iter()
        .enumerate()
        .map(|(i, d)| pack(d, vit, resolver).map_err(|e| crate::Error::Ingest(format!("document {}: {e}", i + 1))))
        .collect()
}

/// Partition, tokenize every tile, and record centres.
pub fn encode_input_image(img: &Image, vit: &VisualTokenizer) -> Result<VisualSegment> {
    let cfg = vit.config();
    let part = dynres::partition(img, cfg.tile_h, cfg.tile_w)?;
    let mut tiles = Vec::with_capacity(part.sub_images.len() + 1);
    for tile in part.sub_images.iter().chain(std::iter::once(&part.global_image)) {
        tiles.push(vit.tokenize(tile)?);
    }
    let refs: Vec<&Tensor> = tiles.iter().collect();
    let mut centers: Vec<_> = part.plan.cells.iter().map(|c| c.center).collect();
    centers.push(GLOBAL_CENTER);
    Ok(VisualSegment {
        features: Tensor::concat_rows(&refs)?,
        centers,
    })
}

/// Tokenizer embedding of the image resized to one tile.
pub fn regression_target(img: &Image, vit: &VisualTokenizer) -> Result<Tensor> {
    let cfg = vit.config();
    vit.tokenize(&dynres::upsample(img, cfg.tile_h, cfg.tile_w)?)
}

/// A single broken invariant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub segment: Option<usize>,
    pub message: String,
}

impl Violation {
    fn at(segment: usize, message: impl Into<String>) -> Self {
        Self {
            segment: Some(segment),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            segment: None,
            message: message.into(),
        }
    }
}

/// Every invariant of a packed sequence; empty iff valid.
pub fn validate(seq: &PackedSequence, visual_dim: usize) -> Vec<Violation> {
    let mut v = Vec::new();
    let total = seq.total_len();
    if seq.lm_targets.len() != total {
        v.push(Violation::global(format!(
            "lm_targets has {} entries for {total} positions",
            seq.lm_targets.len()
        )));
    }
    let mut start = 0;
    for (i, seg) in seq.segments.iter().enumerate() {
        let len = seg.len();
        if len == 0 {
            v.push(Violation::at(i, "empty segment"));
        }
        match seg {
            Segment::Tokens(ids) => {
                if let Some(&bad) = ids.iter().find(|&&t| TokenClass::of(t).is_none()) {
                    v.push(Violation::at(i, format!("token id {bad} outside the vocabulary")));
                }
            }
            Segment::Visual(vis) => {
                let rows = vis.features.shape()[0];
                if vis.features.rank() != 2 || vis.features.last_dim() != visual_dim {
                    v.push(Violation::at(
                        i,
                        format!("visual features {:?} not [_, {visual_dim}]", vis.features.shape()),
                    ));
                }
                if rows % POOLED_COUNT != 0 || rows / POOLED_COUNT != vis.centers.len() || vis.centers.len() < 2 {
                    v.push(Violation::at(
                        i,
                        format!("visual segment has {rows} rows for {} tiles", vis.centers.len()),
                    ));
                }
                if vis
                    .centers
                    .iter()
                    .any(|&(x, y)| !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0))
                {
                    v.push(Violation::at(i, "tile centre outside the open unit square"));
                }
                if !vis.features.is_finite() {
                    v.push(Violation::at(i, "non-finite visual features"));
                }
                check_no_targets(seq, i, start, len - 1, &mut v);
            }
            Segment::Query { slots } => {
                if *slots != QUERY_SLOTS {
                    v.push(Violation::at(
                        i,
                        format!("query segment arity {slots}, expected {QUERY_SLOTS}"),
                    ));
                }
                check_no_targets(seq, i, start, len, &mut v);
                let before = i.checked_sub(1).and_then(|p| match &seq.segments[p] {
                    Segment::Tokens(t) => t.last().copied(),
                    _ => None,
                });
                if before != Some(IMG_START) {
                    v.push(Violation::at(i, "query segment not preceded by IMG_START"));
                }
                let after = match seq.segments.get(i + 1) {
                    Some(Segment::Tokens(t)) => t.first().copied(),
                    _ => None,
                };
                if after != Some(IMG_END) {
                    v.push(Violation::at(i, "query segment not followed by IMG_END"));
                }
                let n = seq.regression_targets.iter().filter(|r| r.segment == i).count();
                if n != 1 {
                    v.push(Violation::at(i, format!("query segment has {n} regression targets")));
                }
            }
        }
        start += len;
    }
    for r in &seq.regression_targets {
        if !matches!(seq.segments.get(r.segment), Some(Segment::Query { .. })) {
            v.push(Violation::at(
                r.segment,
                "regression target does not point at a query segment",
            ));
        }
        if r.target.shape() != [QUERY_SLOTS, visual_dim] {
            v.push(Violation::at(
                r.segment,
                format!("regression target shape {:?}", r.target.shape()),
            ));
        }
    }
    if seq.lm_targets.len() == total && seq.lm_targets != lm_targets_for(&seq.slots()) {
        v.push(Violation::global(
            "lm_targets disagree with the maskable token positions",
        ));
    }
    v
}

fn check_no_targets(seq: &PackedSequence, segment: usize, start: usize, len: usize, out: &mut Vec<Violation>) {
    let end = (start + len).min(seq.lm_targets.len());
    if seq
        .lm_targets
        .get(start..end)
        .is_some_and(|t| t.iter().any(Option::is_some))
    {
        out.push(Violation::at(segment, "LM target inside a visual or query segment"));
    }
}

/// Right-padded batch. Padding carries no LM target and is masked out.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<Arc<PackedSequence>>,
    /// Per item, `true` on real positions.
    pub attention_mask: Vec<Vec<bool>>,
    pub pad_to: usize,
}

pub fn collate(seqs: &[PackedSequence], pad_to: usize) -> Result<Batch> {
    let mut items = Vec::with_capacity(seqs.len());
    let mut attention_mask = Vec::with_capacity(seqs.len());
    for s in seqs {
        let len = s.total_len();
        if len > pad_to {
            return Err(contract(format!("sequence of length {len} exceeds pad_to {pad_to}")));
        }
        let mut padded = s.clone();
        if len < pad_to {
            padded.segments.push(Segment::Tokens(vec![PAD; pad_to - len]));
            padded.lm_targets.resize(pad_to, None);
        }
        let mut mask = vec![true; len];
        mask.resize(pad_to, false);
        items.push(Arc::new(padded));
        attention_mask.push(mask);
    }
    Ok(Batch {
        items,
        attention_mask,
        pad_to,
    })
}
