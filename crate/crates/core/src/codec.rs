//! Token space: byte-level text, special tokens, and 224 location tokens
//! that encode bounding boxes as
//! `BOX_START loc(x_center) loc(y_center) loc(width) loc(height) BOX_END`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type TokenId = u32;

pub const NUM_BYTE_TOKENS: u32 = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const IMG_START: TokenId = 259;
pub const IMG_END: TokenId = 260;
pub const BOX_START: TokenId = 261;
pub const BOX_END: TokenId = 262;
pub const LOC_BASE: TokenId = 263;
pub const NUM_LOC_TOKENS: u32 = 224;
pub const VOCAB_SIZE: usize = (LOC_BASE + NUM_LOC_TOKENS) as usize;

/// Version tag written at the top of the vocabulary layout file.
pub const VOCAB_LAYOUT_VERSION: &str = "mmseq-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Byte(u8),
    Bos,
    Eos,
    Pad,
    ImgStart,
    ImgEnd,
    BoxStart,
    BoxEnd,
    Loc(u8),
}

impl TokenClass {
    pub fn of(id: TokenId) -> Option<TokenClass> {
        Some(match id {
            0..=255 => TokenClass::Byte(id as u8),
            BOS => TokenClass::Bos,
            EOS => TokenClass::Eos,
            PAD => TokenClass::Pad,
            IMG_START => TokenClass::ImgStart,
            IMG_END => TokenClass::ImgEnd,
            BOX_START => TokenClass::BoxStart,
            BOX_END => TokenClass::BoxEnd,
            id if (LOC_BASE..LOC_BASE + NUM_LOC_TOKENS).contains(&id) => TokenClass::Loc((id - LOC_BASE) as u8),
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenClass::Byte(_) => "byte",
            TokenClass::Loc(_) => "loc",
            _ => "special",
        }
    }

    /// Tokens that carry a next-token prediction target when they appear as
    /// the successor of a token position.
    pub fn is_lm_target(self) -> bool {
        matches!(
            self,
            TokenClass::Byte(_) | TokenClass::Loc(_) | TokenClass::BoxStart | TokenClass::BoxEnd | TokenClass::ImgStart
        )
    }
}

/// Human-readable token name.
pub fn token_name(id: TokenId) -> String {
    match TokenClass::of(id) {
        Some(TokenClass::Byte(b)) => format!("0x{b:02x}"),
        Some(TokenClass::Bos) => "<bos>".into(),
        Some(TokenClass::Eos) => "<eos>".into(),
        Some(TokenClass::Pad) => "<pad>".into(),
        Some(TokenClass::ImgStart) => "<IMG>".into(),
        Some(TokenClass::ImgEnd) => "</IMG>".into(),
        Some(TokenClass::BoxStart) => "<box_start>".into(),
        Some(TokenClass::BoxEnd) => "<box_end>".into(),
        Some(TokenClass::Loc(i)) => format!("<loc-{i}>"),
        None => format!("<invalid-{id}>"),
    }
}

/// Text rendering of a token stream: bytes decoded lossily, everything
/// else by name.
pub fn render(tokens: &[TokenId]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &t in tokens {
        if let Some(TokenClass::Byte(b)) = TokenClass::of(t) {
            bytes.push(b);
            continue;
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        bytes.clear();
        out.push_str(&token_name(t));
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}

/// The versioned id → class → name table shipped with checkpoints.
pub fn vocabulary_layout() -> String {
    let mut s = format!("# {VOCAB_LAYOUT_VERSION}\n# size {VOCAB_SIZE}\n# id\tclass\tname\n");
    for id in 0..VOCAB_SIZE as TokenId {
        let class = TokenClass::of(id).expect("dense id space");
        s.push_str(&format!("{id}\t{}\t{}\n", class.label(), token_name(id)));
    }
    s
}

pub fn write_vocabulary_layout(path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, vocabulary_layout())?;
    Ok(())
}

pub fn tokenize_text(s: &[u8]) -> Vec<TokenId> {
    s.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`tokenize_text`]; fails on any non-byte token.
pub fn detokenize_text(tokens: &[TokenId]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| match TokenClass::of(t) {
            Some(TokenClass::Byte(b)) => Ok(b),
            _ => Err(contract(format!("token {} is not a byte token", token_name(t)))),
        })
        .collect()
}

pub fn loc_token(index: u8) -> Result<TokenId> {
    if u32::from(index) >= NUM_LOC_TOKENS {
        return Err(contract(format!("location index {index} exceeds 223")));
    }
    Ok(LOC_BASE + TokenId::from(index))
}

/// `min(⌊v·224⌋, 223)` for `v ∈ [0, 1]`.
pub fn quantize_coord(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(contract(format!("coordinate {v} outside [0, 1]")));
    }
    Ok(((v * NUM_LOC_TOKENS as f64).floor() as u32).min(NUM_LOC_TOKENS - 1) as u8)
}

/// Bin centre `(i + 0.5) / 224`.
pub fn dequantize_coord(index: u8) -> Result<f64> {
    if u32::from(index) >= NUM_LOC_TOKENS {
        return Err(contract(format!("location index {index} exceeds 223")));
    }
    Ok((f64::from(index) + 0.5) / NUM_LOC_TOKENS as f64)
}

/// Normalised box in centre/size form. Each coordinate lies in `[0, 1]`;
/// the box itself may extend past the image edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_center: f64,
    pub y_center: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x_center: f64, y_center: f64, width: f64, height: f64) -> Result<Self> {
        for (name, v) in [
            ("x_center", x_center),
            ("y_center", y_center),
            ("width", width),
            ("height", height),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(contract(format!("box {name} = {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            x_center,
            y_center,
            width,
            height,
        })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_center, self.y_center, self.width, self.height]
    }

    /// The box as it survives a quantize/dequantize round trip.
    pub fn quantized(&self) -> Result<BBox> {
        let q = |v| quantize_coord(v).and_then(dequantize_coord);
        BBox::new(q(self.x_center)?, q(self.y_center)?, q(self.width)?, q(self.height)?)
    }
}

pub fn encode_box(b: &BBox) -> Result<[TokenId; 6]> {
    let mut out = [BOX_START, 0, 0, 0, 0, BOX_END];
    for (slot, v) in out[1..5].iter_mut().zip(b.coords()) {
        *slot = loc_token(quantize_coord(v)?)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpanDefect {
    /// A closed span did not hold exactly four location tokens.
    Arity(usize),
    /// A non-location token inside a span.
    NonLocInterior { offset: usize, token: TokenId },
    /// The stream ended, or a new span began, before `BOX_END`.
    MissingEnd,
    /// `BOX_END` with no open span.
    UnmatchedEnd,
}

impl fmt::Display for SpanDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpanDefect::Arity(n) => write!(f, "arity {n}, expected 4"),
            SpanDefect::NonLocInterior { offset, token } => {
                write!(f, "non-location token {} at span offset {offset}", token_name(*token))
            }
            SpanDefect::MissingEnd => write!(f, "missing box end"),
            SpanDefect::UnmatchedEnd => write!(f, "box end without box start"),
        }
    }
}

/// A malformed box span and where it started.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("malformed box span at position {position}: {defect}")]
pub struct BoxParseError {
    pub position: usize,
    pub defect: SpanDefect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParsePolicy {
    /// Stop at the first malformed span.
    Abort,
    /// Record malformed spans and keep scanning.
    Recover,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxScan {
    pub boxes: Vec<(usize, BBox)>,
    pub errors: Vec<BoxParseError>,
}

/// Finds every `BOX_START … BOX_END` span. Well-formed spans are
/// dequantised to bin centres; malformed ones are reported with their
/// start position.
pub fn parse_box_spans(tokens: &[TokenId], policy: ParsePolicy) -> std::result::Result<BoxScan, BoxParseError> {
    let mut scan = BoxScan::default();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            BOX_START => {
                let (next, outcome) = read_span(tokens, i);
                match outcome {
                    Ok(b) => scan.boxes.push((i, b)),
                    Err(defect) => {
                        let err = BoxParseError { position: i, defect };
                        if policy == ParsePolicy::Abort {
                            return Err(err);
                        }
                        scan.errors.push(err);
                    }
                }
                i = next;
            }
            BOX_END => {
                let err = BoxParseError {
                    position: i,
                    defect: SpanDefect::UnmatchedEnd,
                };
                if policy == ParsePolicy::Abort {
                    return Err(err);
                }
                scan.errors.push(err);
                i += 1;
            }
            _ => i += 1,
        }
    }
    Ok(scan)
}

/// Reads the span opened at `start`; returns where scanning resumes.
fn read_span(tokens: &[TokenId], start: usize) -> (usize, std::result::Result<BBox, SpanDefect>) {
    let mut j = start + 1;
    while j < tokens.len() && tokens[j] != BOX_END && tokens[j] != BOX_START {
        j += 1;
    }
    if j >= tokens.len() || tokens[j] == BOX_START {
        return (j, Err(SpanDefect::MissingEnd));
    }
    let interior = &tokens[start + 1..j];
    let mut locs = Vec::with_capacity(4);
    for (offset, &t) in interior.iter().enumerate() {
        match TokenClass::of(t) {
            Some(TokenClass::Loc(i)) => locs.push(i),
            _ => {
                return (
                    j + 1,
                    Err(SpanDefect::NonLocInterior {
                        offset: offset + 1,
                        token: t,
                    }),
                )
            }
        }
    }
    if locs.len() != 4 {
        return (j + 1, Err(SpanDefect::Arity(locs.len())));
    }
    let d = |i: u8| dequantize_coord(i).expect("loc index in range");
    let b = BBox {
        x_center: d(locs[0]),
        y_center: d(locs[1]),
        width: d(locs[2]),
        height: d(locs[3]),
    };
    (j + 1, Ok(b))
}
