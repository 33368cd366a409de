//! Procedural grounded corpus: colored shapes on small images, caption pairs
//! naming each concept, and two-turn dialogues whose correct response names
//! the concept while the context never does. That construction forces the
//! response's concept through the image path, which is what makes grounding
//! measurable: a model that ignores images cannot know which concept to name.
//!
//! Shapes are drawn at jittered near-central positions, so any masked block
//! at the default geometry hides a substantial part of most shapes and
//! masked reconstruction genuinely benefits from the caption.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::image::PixelImage;
use crate::retrieval::DialogueExample;
use crate::rng::Rng;

pub const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [60, 90, 220]),
    ("yellow", [230, 220, 50]),
];

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

const CAPTION_TEMPLATES: [&str; 4] = [
    "a {c} {s}",
    "the {c} {s}",
    "a picture of a {c} {s}",
    "this is a {c} {s}",
];

const CONTEXT_TEMPLATES: [[&str; 2]; 4] = [
    ["look at this !", "what is it ?"],
    ["i found a picture .", "tell me what you see ."],
    ["here is something for you .", "describe it please ."],
    ["check this out !", "what do you think it shows ?"],
];

const RESPONSE_TEMPLATES: [&str; 3] = [
    "it is a {c} {s} .",
    "i see a {c} {s} .",
    "that looks like a {c} {s} .",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub color: &'static str,
    pub rgb: [u8; 3],
    pub shape: &'static str,
}

impl Concept {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub n_concepts: usize,
    pub images_per_concept: usize,
    pub dialogues_per_concept: usize,
    pub image_size: usize,
    /// Fraction of captions written as dialogue transcripts (context turns
    /// plus response joined by the separator token). Transcript captions
    /// put stage-2 retrieval queries in-distribution for the matching space.
    pub transcript_fraction: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            n_concepts: 16,
            images_per_concept: 36,
            dialogues_per_concept: 44,
            image_size: 16,
            transcript_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthImage {
    pub id: String,
    pub pixels: PixelImage,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPair {
    pub image_id: String,
    pub caption: String,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDialogue {
    pub context: Vec<String>,
    pub response: String,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub concepts: Vec<Concept>,
    pub images: Vec<SynthImage>,
    pub pairs: Vec<SynthPair>,
    pub dialogues: Vec<SynthDialogue>,
}

fn concept_table(n: usize) -> Vec<Concept> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (color, rgb) = COLORS[i % COLORS.len()];
        let shape = SHAPES[(i / COLORS.len()) % SHAPES.len()];
        out.push(Concept { color, rgb, shape });
    }
    out
}

/// Draws a shape stencil into a `span`-sized box at the given origin. The
/// four stencils are chosen to differ strongly in both fill pattern and lit
/// pixel count: filled square, ring, wedge triangle, thin plus.
fn draw_shape(img: &mut PixelImage, shape: &str, rgb: [u8; 3], ox: usize, oy: usize, span: usize) {
    let s = span as f64;
    let c = (s - 1.0) / 2.0;
    for y in 0..span {
        for x in 0..span {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let on = match shape {
                "square" => true,
                "circle" => {
                    let r2 = dx * dx + dy * dy;
                    let outer = (s / 2.0) * (s / 2.0);
                    let inner = (s / 2.0 - 2.0).max(0.0).powi(2);
                    r2 <= outer && r2 >= inner
                }
                "triangle" => dx.abs() <= (y as f64 + 1.0) / 2.0,
                "cross" => dx.abs() < 1.0 || dy.abs() < 1.0,
                _ => false,
            };
            if on {
                img.set(ox + x, oy + y, rgb);
            }
        }
    }
}

fn render(concept: &Concept, variant: usize, size: usize) -> PixelImage {
    let mut img = PixelImage::new(size, size);
    // Color wash plus a shape-keyed background texture over the whole
    // canvas. With a flat black background the encoder's hidden states are
    // dominated by a shared component and the concept signal is a few
    // percent of the state magnitude — too weak for downstream fusion to
    // bootstrap on at desk scale — so both concept factors are rendered
    // globally: the color as the wash tint, the shape as the texture
    // (solid / row stripes / column stripes / checkerboard).
    let scaled = |num: u8, den: u8| {
        [
            (concept.rgb[0] as u16 * num as u16 / den as u16) as u8,
            (concept.rgb[1] as u16 * num as u16 / den as u16) as u8,
            (concept.rgb[2] as u16 * num as u16 / den as u16) as u8,
        ]
    };
    let lo = scaled(1, 8);
    let hi = scaled(3, 8);
    for y in 0..size {
        for x in 0..size {
            let bright = match concept.shape {
                "square" => true,
                "circle" => (y / 2) % 2 == 0,
                "triangle" => (x / 2) % 2 == 0,
                "cross" => ((x / 2) + (y / 2)) % 2 == 0,
                _ => false,
            };
            img.set(x, y, if bright { hi } else { lo });
        }
    }
    // The full-intensity stencil sits wholly inside one quadrant (one mask
    // block at the default geometry), jittered within it. Masking that
    // block hides the entire stencil, so its reconstruction genuinely
    // depends on the caption even though color and texture survive
    // elsewhere.
    let half = size / 2;
    let quadrant = variant % 4;
    let qx = (quadrant % 2) * half;
    let qy = (quadrant / 2) * half;
    draw_shape(&mut img, concept.shape, concept.rgb, qx, qy, half);
    img
}

fn fill(template: &str, concept: &Concept) -> String {
    template.replace("{c}", concept.color).replace("{s}", concept.shape)
}

/// Renders all images and emits the caption-pair and dialogue corpora.
/// Deterministic for a given rng stream.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, rng: &Rng) -> SynthData {
    let concepts = concept_table(spec.n_concepts);
    let mut caption_rng = rng.split(1);
    let mut dialogue_rng = rng.split(2);

    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for (c, concept) in concepts.iter().enumerate() {
        for v in 0..spec.images_per_concept {
            let id = format!("synth-{:04}", c * spec.images_per_concept + v);
            let pixels = render(concept, v, spec.image_size);
            // Half the captions are plain, half are dialogue transcripts in
            // the exact shape of stage-2 retrieval queries (turns joined by
            // the separator token), so the frozen text encoder's matching
            // space covers both query distributions.
            let caption = if caption_rng.uniform() >= spec.transcript_fraction {
                let t = CAPTION_TEMPLATES[caption_rng.below(CAPTION_TEMPLATES.len())];
                fill(t, concept)
            } else {
                let ctx = CONTEXT_TEMPLATES[caption_rng.below(CONTEXT_TEMPLATES.len())];
                let resp = RESPONSE_TEMPLATES[caption_rng.below(RESPONSE_TEMPLATES.len())];
                format!("{} <sep> {} <sep> {}", ctx[0], ctx[1], fill(resp, concept))
            };
            pairs.push(SynthPair { image_id: id.clone(), caption, concept: c });
            images.push(SynthImage { id, pixels, concept: c });
        }
    }

    let mut dialogues = Vec::new();
    for (c, concept) in concepts.iter().enumerate() {
        for _ in 0..spec.dialogues_per_concept {
            let ctx = CONTEXT_TEMPLATES[dialogue_rng.below(CONTEXT_TEMPLATES.len())];
            let resp = RESPONSE_TEMPLATES[dialogue_rng.below(RESPONSE_TEMPLATES.len())];
            dialogues.push(SynthDialogue {
                context: ctx.iter().map(|s| String::from(*s)).collect(),
                response: fill(resp, concept),
                concept: c,
            });
        }
    }

    SynthData { concepts, images, pairs, dialogues }
}

impl SynthData {
    pub fn image_by_id(&self, id: &str) -> Option<&SynthImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn concept_of_image(&self, id: &str) -> Option<usize> {
        self.image_by_id(id).map(|i| i.concept)
    }

    /// Splits pairs per concept: the last `heldout_per_concept` of each
    /// concept go to the held-out set.
    pub fn split_pairs(&self, heldout_per_concept: usize) -> (Vec<&SynthPair>, Vec<&SynthPair>) {
        let per = self.pairs.len() / self.concepts.len().max(1);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if i % per >= per.saturating_sub(heldout_per_concept) {
                held.push(p);
            } else {
                train.push(p);
            }
        }
        (train, held)
    }

    /// Splits dialogues per concept, like [`SynthData::split_pairs`].
    pub fn split_dialogues(
        &self,
        eval_per_concept: usize,
    ) -> (Vec<&SynthDialogue>, Vec<&SynthDialogue>) {
        let per = self.dialogues.len() / self.concepts.len().max(1);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (i, d) in self.dialogues.iter().enumerate() {
            if i % per >= per.saturating_sub(eval_per_concept) {
                eval.push(d);
            } else {
                train.push(d);
            }
        }
        (train, eval)
    }

    pub fn to_dialogue_examples<'a>(
        dialogues: impl IntoIterator<Item = &'a SynthDialogue>,
    ) -> Vec<DialogueExample> {
        dialogues
            .into_iter()
            .map(|d| DialogueExample {
                context: d.context.clone(),
                response: d.response.clone(),
                image_ids: None,
                retrieval_mode: None,
            })
            .collect()
    }
}

/// Which concept (if any) a response text names: both the color and shape
/// word must appear.
pub fn concept_of_text(text: &str, concepts: &[Concept]) -> Option<usize> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    concepts.iter().position(|c| {
        tokens.iter().any(|t| *t == c.color) && tokens.iter().any(|t| *t == c.shape)
    })
}
