//! Procedural toy scenes and the two bundled corpora built from them.
//!
//! Everything here is a pure function of its seed, so the shipped fixture
//! files can be regenerated and compared byte for byte.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{dequantize_coord, BBox, NUM_LOC_TOKENS};
use crate::dynres::Image;
use crate::error::Result;
use crate::seqpack::{DocItem, ImageRole, MultimodalDocument, Span};

/// A gradient background with two rectangles and a disc.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub rects: Vec<BBox>,
    pub disc: BBox,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

pub fn scene(height: usize, width: usize, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let horizontal = rng.random_bool(0.5);
    let mut px = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let s = if horizontal {
                x as f64 / width as f64
            } else {
                y as f64 / height as f64
            };
            for c in 0..3 {
                px[(y * width + x) * 3 + c] = c0[c] * (1.0 - s) + c1[c] * s;
            }
        }
    }
    let (hf, wf) = (height as f64, width as f64);
    let mut rects = Vec::new();
    for _ in 0..2 {
        let rh = rng.random_range(height / 5..=height / 2);
        let rw = rng.random_range(width / 5..=width / 2);
        let top = rng.random_range(0..=height - rh);
        let left = rng.random_range(0..=width - rw);
        let col = color(&mut rng);
        for y in top..top + rh {
            for x in left..left + rw {
                px[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&col);
            }
        }
        rects.push(BBox::new(
            (left as f64 + rw as f64 / 2.0) / wf,
            (top as f64 + rh as f64 / 2.0) / hf,
            rw as f64 / wf,
            rh as f64 / hf,
        )?);
    }
    let r = rng.random_range(height.min(width) as f64 / 8.0..height.min(width) as f64 / 4.0);
    let cy = rng.random_range(r..hf - r);
    let cx = rng.random_range(r..wf - r);
    let col = color(&mut rng);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                px[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&col);
            }
        }
    }
    let disc = BBox::new(cx / wf, cy / hf, 2.0 * r / wf, 2.0 * r / hf)?;
    Ok(Scene {
        image: Image::new(height, width, 3, px)?,
        rects,
        disc,
    })
}

/// A manifest plus the images it refers to.
#[derive(Clone, Debug)]
pub struct FixtureCorpus {
    pub documents: Vec<MultimodalDocument>,
    /// `(relative path, image)` in first-use order.
    pub images: Vec<(String, Image)>,
}

impl FixtureCorpus {
    pub fn manifest(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `manifest.jsonl` and `images/*.ppm` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        for (path, img) in &self.images {
            img.save_pnm(dir.join(path))?;
        }
        fs::write(dir.join("manifest.jsonl"), self.manifest()?)?;
        Ok(())
    }

    /// Images used with the target role, in document order.
    pub fn target_images(&self) -> Vec<(&str, &Image)> {
        let mut out = Vec::new();
        for d in &self.documents {
            for item in &d.items {
                if let DocItem::Image {
                    path,
                    role: ImageRole::Target,
                } = item
                {
                    let img = &self.images.iter().find(|(p, _)| p == path).expect("registered").1;
                    out.push((path.as_str(), img));
                }
            }
        }
        out
    }
}

struct Builder {
    seed: u64,
    images: Vec<(String, Image)>,
}

impl Builder {
    fn image(&mut self, name: &str, h: usize, w: usize) -> Result<(String, Scene)> {
        let s = scene(h, w, self.seed)?;
        self.seed += 1;
        let path = format!("images/{name}.ppm");
        self.images.push((path.clone(), s.image.clone()));
        Ok((path, s))
    }
}

fn text(s: &str) -> DocItem {
    DocItem::Text { text: s.into() }
}

fn input(path: String) -> DocItem {
    DocItem::Image {
        path,
        role: ImageRole::Input,
    }
}

fn target(path: String) -> DocItem {
    DocItem::Image {
        path,
        role: ImageRole::Target,
    }
}

fn t(s: &str) -> Span {
    Span::Text { text: s.into() }
}

fn bx(b: &BBox) -> Span {
    Span::Box { bbox: b.coords() }
}

fn doc(items: Vec<DocItem>) -> MultimodalDocument {
    MultimodalDocument { items }
}

/// Sixteen documents mixing plain text, boxed captions over input images,
/// caption-to-image pairs and one edit. Every document is distinguishable
/// from its first position so the whole corpus can be memorised.
pub fn sample_corpus() -> Result<FixtureCorpus> {
    let mut b = Builder {
        seed: 100,
        images: vec![],
    };
    let mut docs = vec![
        doc(vec![text("a: the lantern hums over quiet water.")]),
        doc(vec![text("b: seven gulls argue about the wind.")]),
        doc(vec![text("c: ink dries slowly on cold paper.")]),
        doc(vec![text("d: the clock forgets the hour.")]),
    ];
    let (p, s) = b.image("s04", 32, 32)?;
    docs.push(doc(vec![
        input(p),
        DocItem::BoxedText {
            spans: vec![t("e: the disc is at "), bx(&s.disc), t(".")],
        },
    ]));
    let (p, s) = b.image("s05", 32, 48)?;
    docs.push(doc(vec![
        input(p),
        DocItem::BoxedText {
            spans: vec![t("f: a box "), bx(&s.rects[0]), t(" and a disc "), bx(&s.disc)],
        },
    ]));
    let (p, s) = b.image("s06", 32, 32)?;
    docs.push(doc(vec![
        input(p),
        DocItem::BoxedText {
            spans: vec![t("g: the second box "), bx(&s.rects[1]), t(".")],
        },
    ]));
    let (p, s) = b.image("s07", 48, 32)?;
    docs.push(doc(vec![
        input(p),
        DocItem::BoxedText {
            spans: vec![t("h: boxes "), bx(&s.rects[0]), bx(&s.rects[1])],
        },
    ]));
    for (name, caption) in [
        ("s08", "i: paint a warm scene."),
        ("s09", "j: paint a cool scene."),
        ("s10", "k: paint a bright scene."),
        ("s11", "l: paint a dim scene."),
    ] {
        let (p, _) = b.image(name, 32, 32)?;
        docs.push(doc(vec![text(caption), target(p), text(" done.")]));
    }
    let (p, _) = b.image("s12", 32, 32)?;
    docs.push(doc(vec![input(p), text("m: two boxes, one disc.")]));
    let (_, s) = b.image("s13", 32, 32)?;
    b.images.pop();
    docs.push(doc(vec![DocItem::BoxedText {
        spans: vec![t("n: the region "), bx(&s.disc), t(" is empty.")],
    }]));
    let (src, _) = b.image("s14", 32, 32)?;
    let (dst, _) = b.image("s15", 32, 32)?;
    docs.push(doc(vec![input(src), text("o: repaint it."), target(dst)]));
    // Every location bin and the fine-tuning prompts' capitals occur at
    // least once; output rows of tokens never seen in pre-training collapse
    // together and a frozen LM head cannot separate them again.
    let mut spans = vec![t("p: Quiet? A ruler: ")];
    for k in 0..NUM_LOC_TOKENS / 4 {
        let c = |i: u32| dequantize_coord((4 * k + i) as u8);
        spans.push(bx(&BBox::new(c(0)?, c(1)?, c(2)?, c(3)?)?));
    }
    spans.push(t("."));
    docs.push(doc(vec![DocItem::BoxedText { spans }]));
    Ok(FixtureCorpus {
        documents: docs,
        images: b.images,
    })
}

/// Four instruction-style documents for fine-tuning.
pub fn task_corpus() -> Result<FixtureCorpus> {
    let mut b = Builder {
        seed: 200,
        images: vec![],
    };
    let mut docs = Vec::new();
    let (p, s) = b.image("t00", 32, 32)?;
    docs.push(doc(vec![
        input(p),
        DocItem::BoxedText {
            spans: vec![t("Q: where is the disc? A: "), bx(&s.disc)],
        },
    ]));
    let (p, _) = b.image("t01", 32, 48)?;
    docs.push(doc(vec![input(p), text("Q: what is here? A: shapes.")]));
    let (p, _) = b.image("t02", 32, 32)?;
    docs.push(doc(vec![text("R: draw the harbor."), target(p)]));
    docs.push(doc(vec![text("S: name three colors. A: red, teal, ochre.")]));
    Ok(FixtureCorpus {
        documents: docs,
        images: b.images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_boxes_valid() {
        let a = scene(32, 48, 5).unwrap();
        let b = scene(32, 48, 5).unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, scene(32, 48, 6).unwrap().image);
        for r in a.rects.iter().chain([&a.disc]) {
            assert!(r.coords().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corpora_have_the_documented_shape() {
        let s = sample_corpus().unwrap();
        assert_eq!(s.documents.len(), 16);
        assert_eq!(s.target_images().len(), 5);
        assert!(s.documents.iter().all(|d| d.validate().is_ok()));
        let t = task_corpus().unwrap();
        assert_eq!(t.documents.len(), 4);
        assert_eq!(s.manifest().unwrap().lines().count(), 16);
    }
}
