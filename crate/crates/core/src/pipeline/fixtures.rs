//! Synthetic labeled pages: one medicine name per 64x256 grayscale image,
//! rendered as a 5x3 dot-matrix band at a random vertical offset.
//!
//! The rendered text is an optionally corrupted copy of the lexicon entry,
//! standing in for print defects the recognizer would misread. The clean
//! entry stays the ground truth, so corrupted fixtures have a nonzero
//! pre-matching error rate by construction.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::Lexicon;
use crate::metrics::BitMask;
use crate::tensor::Tensor;

pub const IMG_H: usize = 64;
pub const IMG_W: usize = 256;
pub const GLYPH_H: usize = 5;
pub const GLYPH_W: usize = 3;
/// Glyph width plus one blank column.
pub const CHAR_PITCH: usize = 4;
/// Fixed left margin of every band.
pub const BAND_X0: usize = 2;

/// Lit width of a rendered word: the trailing gap is not part of the band.
pub fn band_width(chars: usize) -> usize {
    CHAR_PITCH * chars - 1
}

/// 5 rows of 3 pixels, packed little-endian per row: bit 2 is the left
/// column. Covers exactly the recognizer vocabulary's printable characters.
pub fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    let rows = match c {
        'a' => [0b111, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b111, 0b100, 0b100, 0b100, 0b111],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b111, 0b100, 0b101, 0b101, 0b111],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b011, 0b001, 0b001, 0b101, 0b111],
        'k' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b101, 0b111, 0b101, 0b101, 0b101],
        'o' => [0b000, 0b111, 0b101, 0b111, 0b000],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b111, 0b101, 0b111, 0b001, 0b001],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        ' ' => [0b000; GLYPH_H],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    };
    Some(rows)
}

/// Stamp `text` onto `img` with the band's top-left pixel at (x0, y0).
pub fn render_text(img: &mut Tensor, text: &str, x0: usize, y0: usize) -> Result<()> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::Config("cannot render an empty transcript".into()));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if y0 + GLYPH_H > h || x0 + band_width(chars.len()) > w {
        return Err(Error::Config(format!(
            "band for {text:?} at ({x0}, {y0}) does not fit a {w}x{h} image"
        )));
    }
    for (i, &c) in chars.iter().enumerate() {
        let rows = glyph(c)
            .ok_or_else(|| Error::Config(format!("no glyph for character {c:?} in {text:?}")))?;
        let cx = x0 + CHAR_PITCH * i;
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row >> (GLYPH_W - 1 - dx) & 1 == 1 {
                    let idx = (y0 + dy) * w + cx + dx;
                    img.data_mut()[idx] = 1.0;
                }
            }
        }
    }
    Ok(())
}

/// How rendered transcripts get damaged relative to the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionMode {
    Clean,
    /// Substitute each character independently with this probability.
    PerChar(f64),
    /// Substitute exactly one character, position chosen uniformly.
    SingleEdit,
}

/// Sorted distinct characters across all entries, the substitution pool.
pub fn lexicon_alphabet(lex: &Lexicon) -> Vec<char> {
    let mut chars: Vec<char> = lex.entries().iter().flat_map(|e| e.chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

fn substitute(c: char, alphabet: &[char], rng: &mut impl Rng) -> char {
    let others: Vec<char> = alphabet.iter().copied().filter(|&a| a != c).collect();
    others[rng.gen_range(0..others.len())]
}

/// Damage one transcript. Substitutions always pick a different character.
pub fn corrupt(text: &str, alphabet: &[char], mode: CorruptionMode, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    match mode {
        CorruptionMode::Clean => {}
        CorruptionMode::PerChar(p) => {
            for c in chars.iter_mut() {
                if rng.gen_bool(p) {
                    *c = substitute(*c, alphabet, rng);
                }
            }
        }
        CorruptionMode::SingleEdit => {
            let pos = rng.gen_range(0..chars.len());
            chars[pos] = substitute(chars[pos], alphabet, rng);
        }
    }
    chars.into_iter().collect()
}

/// One labeled region: the clean entry is the reference, `corrupted` is
/// what was actually printed.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: [f64; 4],
    pub mask: BitMask,
    pub transcript: String,
    pub corrupted: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub seed: u64,
    pub fixtures: Vec<Fixture>,
}

fn mode_needs_alphabet(mode: CorruptionMode) -> bool {
    match mode {
        CorruptionMode::Clean => false,
        CorruptionMode::PerChar(p) => p > 0.0,
        CorruptionMode::SingleEdit => true,
    }
}

/// Deterministically draw `count` single-word pages from the lexicon.
pub fn gen_fixtures(
    seed: u64,
    count: usize,
    lex: &Lexicon,
    mode: CorruptionMode,
) -> Result<FixtureSet> {
    if count == 0 {
        return Err(Error::Config("fixture count must be at least 1".into()));
    }
    if let CorruptionMode::PerChar(p) = mode {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("corruption probability {p} outside [0, 1]")));
        }
    }
    let alphabet = lexicon_alphabet(lex);
    if mode_needs_alphabet(mode) && alphabet.len() < 2 {
        return Err(Error::Config(
            "corruption needs at least 2 distinct characters in the lexicon".into(),
        ));
    }
    let max_chars = (IMG_W - BAND_X0 + 1) / CHAR_PITCH;
    if let Some(long) = lex.entries().iter().find(|e| e.chars().count() > max_chars) {
        return Err(Error::Config(format!(
            "entry {long:?} exceeds the {max_chars}-character render limit"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixtures = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = &lex.entries()[rng.gen_range(0..lex.len())];
        let y0 = rng.gen_range(0..=IMG_H - GLYPH_H);
        let printed = corrupt(entry, &alphabet, mode, &mut rng);
        let mut image = Tensor::zeros(vec![IMG_H, IMG_W]);
        render_text(&mut image, &printed, BAND_X0, y0)?;
        let bbox = [
            BAND_X0 as f64,
            y0 as f64,
            (BAND_X0 + band_width(entry.chars().count())) as f64,
            (y0 + GLYPH_H) as f64,
        ];
        let mask = BitMask::from_box(IMG_H, IMG_W, bbox);
        fixtures.push(Fixture {
            image,
            annotations: vec![Annotation {
                bbox,
                mask,
                transcript: entry.clone(),
                corrupted: printed,
            }],
        });
    }
    Ok(FixtureSet { seed, fixtures })
}

/// Row-major run lengths, alternating zero and one runs, zeros first.
/// The first count is 0 when the mask starts with a set pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl MaskRle {
    pub fn from_mask(mask: &BitMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &b in mask.bits() {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle { height: mask.height(), width: mask.width(), counts }
    }

    pub fn to_mask(&self) -> Result<BitMask> {
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Config(format!(
                "RLE counts sum to {total}, mask is {}x{}",
                self.height, self.width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &run in &self.counts {
            bits.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        BitMask::new(self.height, self.width, bits)
    }
}

/// JSON sidecar stored next to each page image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub masks: Vec<MaskRle>,
    pub transcripts: Vec<String>,
    /// Transcripts as printed; equals `transcripts` for clean fixtures.
    #[serde(default)]
    pub corrupted: Vec<String>,
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:04}.pgm")
}

pub fn sidecar_name(index: usize) -> String {
    format!("img_{index:04}.json")
}

/// Write PGM + JSON pairs into `dir`, creating it if needed.
pub fn write_fixtures(dir: impl AsRef<Path>, set: &FixtureSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, fx) in set.fixtures.iter().enumerate() {
        super::pgm::save_pgm(dir.join(image_name(i)), &fx.image)?;
        let ann = AnnotationFile {
            image: image_name(i),
            boxes: fx.annotations.iter().map(|a| a.bbox).collect(),
            masks: fx.annotations.iter().map(|a| MaskRle::from_mask(&a.mask)).collect(),
            transcripts: fx.annotations.iter().map(|a| a.transcript.clone()).collect(),
            corrupted: fx.annotations.iter().map(|a| a.corrupted.clone()).collect(),
        };
        let path = dir.join(sidecar_name(i));
        let json = serde_json::to_string_pretty(&ann)
            .map_err(|e| Error::Config(format!("annotation serialization failed: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationFile> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Config(
        format!("{}: bad annotation JSON: {e}", path.display()),
    ))?;
    if ann.boxes.len() != ann.transcripts.len() || ann.boxes.len() != ann.masks.len() {
        return Err(Error::Config(format!(
            "{}: boxes, masks and transcripts must have equal lengths",
            path.display()
        )));
    }
    if ann.corrupted.is_empty() {
        ann.corrupted = ann.transcripts.clone();
    } else if ann.corrupted.len() != ann.transcripts.len() {
        return Err(Error::Config(format!(
            "{}: corrupted list length does not match transcripts",
            path.display()
        )));
    }
    Ok(ann)
}
