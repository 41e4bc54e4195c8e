//! Packed corpus directory:
//!
//! ```text
//! corpus.json          format tag, tokenizer config, projection checksum, count
//! sequences.jsonl      one line per sequence; tensors referenced by blob name
//! blobs/*.mmt          visual features and regression targets (MMT1)
//! vit_projection.mmt   the tokenizer projection
//! validation.json      per-sequence violations (all empty when clean)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate, PackedSequence, RegressionTarget, Segment, Violation, VisualSegment};
use crate::codec::TokenId;
use crate::error::{Error, Result};
use crate::kernel::io;
use crate::vitsim::{VisualTokenizer, VisualTokenizerConfig};

pub const CORPUS_FORMAT: &str = "mmseq-packed v1";

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    tokenizer: VisualTokenizerConfig,
    projection_sha256: String,
    sequences: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SegmentRecord {
    Tokens { ids: Vec<TokenId> },
    Visual { blob: String, centers: Vec<(f64, f64)> },
    Query { slots: usize },
}

#[derive(Serialize, Deserialize)]
struct TargetRecord {
    segment: usize,
    blob: String,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    segments: Vec<SegmentRecord>,
    lm_targets: Vec<Option<TokenId>>,
    regression_targets: Vec<TargetRecord>,
}

#[derive(Serialize, Deserialize)]
struct ValidationReport {
    clean: bool,
    sequences: Vec<Vec<Violation>>,
}

#[derive(Clone, Debug)]
pub struct PackedCorpus {
    pub tokenizer: VisualTokenizer,
    pub sequences: Vec<PackedSequence>,
}

impl PackedCorpus {
    pub fn visual_dim(&self) -> usize {
        self.tokenizer.embed_dim()
    }

    pub fn violations(&self) -> Vec<Vec<Violation>> {
        self.sequences.iter().map(|s| validate(s, self.visual_dim())).collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("blobs"))?;
        self.tokenizer.save_projection(dir.join("vit_projection.mmt"))?;
        let mut lines = String::new();
        for (n, seq) in self.sequences.iter().enumerate() {
            let mut segments = Vec::with_capacity(seq.segments.len());
            for (i, seg) in seq.segments.iter().enumerate() {
                segments.push(match seg {
                    Segment::Tokens(ids) => SegmentRecord::Tokens { ids: ids.clone() },
                    Segment::Query { slots } => SegmentRecord::Query { slots: *slots },
                    Segment::Visual(v) => {
                        let blob = format!("blobs/{n:05}_{i:03}_visual.mmt");
                        io::save(dir.join(&blob), &v.features)?;
                        SegmentRecord::Visual {
                            blob,
                            centers: v.centers.clone(),
                        }
                    }
                });
            }
            let mut regression_targets = Vec::new();
            for r in &seq.regression_targets {
                let blob = format!("blobs/{n:05}_{:03}_target.mmt", r.segment);
                io::save(dir.join(&blob), &r.target)?;
                regression_targets.push(TargetRecord {
                    segment: r.segment,
                    blob,
                });
            }
            let rec = SequenceRecord {
                segments,
                lm_targets: seq.lm_targets.clone(),
                regression_targets,
            };
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
        fs::write(dir.join("sequences.jsonl"), lines)?;
        let violations = self.violations();
        let report = ValidationReport {
            clean: violations.iter().all(Vec::is_empty),
            sequences: violations,
        };
        fs::write(dir.join("validation.json"), serde_json::to_string_pretty(&report)?)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            tokenizer: self.tokenizer.config().clone(),
            projection_sha256: self.tokenizer.checksum(),
            sequences: self.sequences.len(),
        };
        fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
        if header.format != CORPUS_FORMAT {
            return Err(Error::Format(format!("unsupported corpus format {:?}", header.format)));
        }
        let tokenizer = VisualTokenizer::load(header.tokenizer, dir.join("vit_projection.mmt"))?;
        if tokenizer.checksum() != header.projection_sha256 {
            return Err(Error::Format("tokenizer projection checksum mismatch".into()));
        }
        let mut sequences = Vec::with_capacity(header.sequences);
        for (n, line) in fs::read_to_string(dir.join("sequences.jsonl"))?.lines().enumerate() {
            let rec: SequenceRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("sequences.jsonl line {}: {e}", n + 1)))?;
            let mut segments = Vec::with_capacity(rec.segments.len());
            for seg in rec.segments {
                segments.push(match seg {
                    SegmentRecord::Tokens { ids } => Segment::Tokens(ids),
                    SegmentRecord::Query { slots } => Segment::Query { slots },
                    SegmentRecord::Visual { blob, centers } => Segment::Visual(VisualSegment {
                        features: io::load(dir.join(blob))?,
                        centers,
                    }),
                });
            }
            let regression_targets = rec
                .regression_targets
                .into_iter()
                .map(|t| {
                    Ok(RegressionTarget {
                        segment: t.segment,
                        target: io::load(dir.join(t.blob))?,
                    })
                })
                .collect::<Result<_>>()?;
            sequences.push(PackedSequence {
                segments,
                lm_targets: rec.lm_targets,
                regression_targets,
            });
        }
        if sequences.len() != header.sequences {
            return Err(Error::Format(format!(
                "corpus.json lists {} sequences, found {}",
                header.sequences,
                sequences.len()
            )));
        }
        Ok(Self { tokenizer, sequences })
    }
}
