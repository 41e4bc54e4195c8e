use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dynres::Image;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Input,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Span {
    Text {
        text: String,
    },
    /// Normalised `[x_center, y_center, width, height]`.
    Box {
        #[serde(rename = "box")]
        bbox: [f64; 4],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DocItem {
    Text { text: String },
    Image { path: String, role: ImageRole },
    BoxedText { spans: Vec<Span> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalDocument {
    pub items: Vec<DocItem>,
}

impl MultimodalDocument {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(contract("document has no items"));
        }
        let mut inputs = HashSet::new();
        let mut targets = HashSet::new();
        for item in &self.items {
            if let DocItem::Image { path, role } = item {
                match role {
                    ImageRole::Input => inputs.insert(path.as_str()),
                    ImageRole::Target => targets.insert(path.as_str()),
                };
            }
        }
        if let Some(p) = inputs.intersection(&targets).next() {
            return Err(contract(format!(
                "image {p} is both an input and a target in one document"
            )));
        }
        Ok(())
    }

    /// Image refs in document order.
    pub fn image_refs(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter_map(|i| match i {
                DocItem::Image { path, .. } => Some(path.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Parses a JSONL manifest, one document per non-blank line. Errors carry
/// the 1-based line number.
pub fn parse_manifest(text: &str) -> Result<Vec<MultimodalDocument>> {
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: MultimodalDocument =
            serde_json::from_str(line).map_err(|e| Error::Ingest(format!("line {}: {e}", n + 1)))?;
        doc.validate()
            .map_err(|e| Error::Ingest(format!("line {}: {e}", n + 1)))?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Ingest("no documents".into()));
    }
    Ok(docs)
}

pub trait ImageResolver: Sync {
    fn resolve(&self, reference: &str) -> Result<Image>;
}

/// Resolves refs as PPM/PGM paths relative to a base directory.
#[derive(Clone, Debug)]
pub struct DirResolver {
    pub base: PathBuf,
}

impl DirResolver {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { base: base.into() }
    }
}

impl ImageResolver for DirResolver {
    fn resolve(&self, reference: &str) -> Result<Image> {
        let path = self.base.join(reference);
        if !path.is_file() {
            return Err(Error::Ingest(format!(
                "unresolvable image ref {reference} ({})",
                path.display()
            )));
        }
        Image::load_pnm(&path).map_err(|e| Error::Ingest(format!("image ref {reference}: {e}")))
    }
}

/// In-memory refs.
#[derive(Clone, Debug, Default)]
pub struct MapResolver(pub HashMap<String, Image>);

impl ImageResolver for MapResolver {
    fn resolve(&self, reference: &str) -> Result<Image> {
        self.0
            .get(reference)
            .cloned()
            .ok_or_else(|| Error::Ingest(format!("unresolvable image ref {reference}")))
    }
}
