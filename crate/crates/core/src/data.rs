//! Seeded synthetic tasks.
//!
//! *complementary*: a coarse shape (constant on `block × block` cells) plus
//! a fine texture that averages to zero inside every cell. The label names
//! the (shape, texture) pair, so a branch that only sees cell means, or only
//! the residual around them, can recover one factor but never both.
//!
//! *tile-detail*: one small glyph per grid cell, drawn only on pixels that
//! the whole-image downscale gives zero weight. The downscaled view is
//! therefore identical for every class, and only full-resolution tiles
//! carry the label.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{write_jsonl, QaRecord};
use crate::encoder::InputView;
use crate::error::{Error, Result};
use crate::tiler::{resize_bilinear, select_grid, ImageBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TileDetail,
    Complementary,
}

fn default_block() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub image_width: usize,
    pub image_height: usize,
    pub tile_size: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Cell size separating coarse from fine content (complementary task).
    #[serde(default = "default_block")]
    pub block: usize,
    /// Tile cap used when checking tile-detail geometry.
    #[serde(default = "default_max_tiles")]
    pub max_tiles: usize,
}

fn default_max_tiles() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub images: Vec<ImageBuffer>,
    pub question: String,
    pub answer: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Answer text for class `label`: one lowercase letter.
pub fn class_letter(label: usize) -> String {
    char::from(b'a' + label as u8).to_string()
}

fn sample_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split << 32 | index as u64);
    rng
}

/// Builds both splits. Labels cycle through the classes so every split is
/// balanced to within one sample per class.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    match spec.kind {
        TaskKind::Complementary => {
            let g = Complementary::new(spec)?;
            Ok(Dataset {
                train: g.split(spec, 0, spec.n_train),
                eval: g.split(spec, 1, spec.n_eval),
            })
        }
        TaskKind::TileDetail => {
            let g = TileDetail::new(spec)?;
            Ok(Dataset {
                train: g.split(spec, 0, spec.n_train),
                eval: g.split(spec, 1, spec.n_eval),
            })
        }
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

// ---- complementary ---------------------------------------------------------

pub const SHAPES: usize = 4;
pub const TEXTURES: usize = 4;

/// Shape masks on the cell grid, as `(rows, cols, filled?)`.
fn shape_mask(shape: usize) -> (usize, usize, fn(usize, usize) -> bool) {
    match shape {
        0 => (4, 4, |_, _| true),
        1 => (2, 6, |_, _| true),
        2 => (6, 2, |_, _| true),
        _ => (5, 5, |r, c| r == 2 || c == 2),
    }
}

/// Texture sign at pixel `(y, x)`; each pattern sums to zero over any
/// aligned 4×4 cell (and any aligned cell whose side is a multiple of 4).
fn texture_sign(texture: usize, y: usize, x: usize) -> i32 {
    let odd = |v: usize| if v % 2 == 0 { 1 } else { -1 };
    match texture {
        0 => odd(y),
        1 => odd(x),
        2 => odd(x + y),
        _ => odd(y / 2),
    }
}

/// Generative factors of one complementary image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplementaryFactors {
    pub shape: usize,
    pub texture: usize,
    pub offset: (usize, usize),
    pub background: u8,
    pub foreground: u8,
    pub amplitude: u8,
    pub flip: bool,
}

struct Complementary {
    shapes: usize,
    textures: usize,
}

impl Complementary {
    fn new(spec: &TaskSpec) -> Result<Self> {
        let mut problems = Vec::new();
        let side = (spec.n_classes as f64).sqrt().round() as usize;
        if side * side != spec.n_classes || side < 2 || side > SHAPES.min(TEXTURES) {
            problems.push(format!(
                "task.n_classes: {} must be s·s shapes×textures with 2 ≤ s ≤ 4",
                spec.n_classes
            ));
        }
        if spec.block < 4 || spec.block % 4 != 0 {
            problems.push(format!(
                "task.block: {} must be a positive multiple of 4 so textures average out per cell",
                spec.block
            ));
        }
        if spec.image_width != spec.image_height {
            problems.push("task.image_width: complementary images are square".into());
        }
        if spec.image_width != spec.tile_size {
            problems.push(format!(
                "task.image_width: {} must equal tile_size {} (one tile per image)",
                spec.image_width, spec.tile_size
            ));
        }
        if spec.block > 0 && (spec.image_width % spec.block != 0 || spec.image_width / spec.block < 8) {
            problems.push(format!(
                "task.block: {} must divide image side {} into at least 8 cells",
                spec.block, spec.image_width
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            shapes: side,
            textures: side,
        })
    }

    fn factors(&self, spec: &TaskSpec, label: usize, rng: &mut ChaCha8Rng) -> ComplementaryFactors {
        let shape = label / self.textures;
        let texture = label % self.textures;
        let cells = spec.image_width / spec.block;
        let (h, w, _) = shape_mask(shape);
        ComplementaryFactors {
            shape,
            texture,
            offset: (rng.random_range(0..=cells - h), rng.random_range(0..=cells - w)),
            background: rng.random_range(60..=100),
            foreground: rng.random_range(160..=200),
            amplitude: rng.random_range(24..=40),
            flip: rng.random(),
        }
    }

    fn split(&self, spec: &TaskSpec, split: u64, n: usize) -> Vec<Sample> {
        let mut order_rng = sample_rng(spec.seed, split | 0x100, 0);
        let labels = balanced_labels(n, self.shapes * self.textures, &mut order_rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let mut rng = sample_rng(spec.seed, split, i);
                let f = self.factors(spec, label, &mut rng);
                Sample {
                    images: vec![render_complementary(spec, &f)],
                    question: "class?".into(),
                    answer: class_letter(label),
                    label,
                }
            })
            .collect()
    }
}

/// Draws an image from its factors. Every value is a multiple of 1/255, so
/// 8-bit files store it exactly.
pub fn render_complementary(spec: &TaskSpec, f: &ComplementaryFactors) -> ImageBuffer {
    let (h, w, inside) = shape_mask(f.shape);
    let k = spec.block;
    let side = spec.image_width;
    let sign = if f.flip { -1 } else { 1 };
    ImageBuffer::from_fn(side, side, 3, |y, x, _| {
        let (cy, cx) = (y / k, x / k);
        let (ry, rx) = (cy.wrapping_sub(f.offset.0), cx.wrapping_sub(f.offset.1));
        let base = if ry < h && rx < w && inside(ry, rx) {
            f.foreground
        } else {
            f.background
        };
        let v = i32::from(base) + sign * texture_sign(f.texture, y, x) * i32::from(f.amplitude);
        f64::from(v) / 255.0
    })
    .expect("non-empty image")
}

/// Regenerates sample `index` of a split with one factor replaced, for the
/// frequency-content check.
pub fn complementary_factors(spec: &TaskSpec, split: u64, index: usize) -> Result<ComplementaryFactors> {
    let g = Complementary::new(spec)?;
    let n = if split == 0 { spec.n_train } else { spec.n_eval };
    let mut order_rng = sample_rng(spec.seed, split | 0x100, 0);
    let labels = balanced_labels(n, g.shapes * g.textures, &mut order_rng);
    let label = *labels
        .get(index)
        .ok_or_else(|| Error::Contract(format!("sample {index} out of range")))?;
    let mut rng = sample_rng(spec.seed, split, index);
    Ok(g.factors(spec, label, &mut rng))
}

/// Frequency-content check of the complementary construction over the
/// first `n` samples of a split: swapping the texture must leave the
/// lowpass view unchanged, and swapping the shape must leave the highpass
/// view unchanged. Returns the largest deviation seen.
pub fn complementary_frequency_check(spec: &TaskSpec, split: u64, n: usize) -> Result<f64> {
    let low = InputView::Lowpass { block: spec.block };
    let high = InputView::Highpass { block: spec.block };
    let side = (spec.n_classes as f64).sqrt().round() as usize;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let f = complementary_factors(spec, split, i)?;
        let img = render_complementary(spec, &f);
        let other_texture = ComplementaryFactors {
            texture: (f.texture + 1) % side,
            ..f
        };
        let other_shape = ComplementaryFactors {
            shape: (f.shape + 1) % side,
            ..f
        };
        let a = low.apply(&img)?;
        let a2 = low.apply(&render_complementary(spec, &other_texture))?;
        let b = high.apply(&img)?;
        let b2 = high.apply(&render_complementary(spec, &other_shape))?;
        for (x, y) in a.pixels().iter().zip(a2.pixels()).chain(b.pixels().iter().zip(b2.pixels())) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Full-resolution oracle for the complementary task: recovers the shape
/// from cell means and the texture from the residual.
pub fn complementary_oracle(spec: &TaskSpec, img: &ImageBuffer) -> Result<usize> {
    let side = (spec.n_classes as f64).sqrt().round() as usize;
    let k = spec.block;
    let cells = img.width() / k;
    let low = InputView::Lowpass { block: k }.apply(img)?;
    let high = InputView::Highpass { block: k }.apply(img)?;
    // shape: cells brighter than the midpoint of the two levels
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for cy in 0..cells {
        for cx in 0..cells {
            let v = low.get(cy * k, cx * k, 0);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mid = 0.5 * (lo + hi);
    let lit = |cy: usize, cx: usize| low.get(cy * k, cx * k, 0) > mid;
    let mut shape = None;
    'shapes: for s in 0..side {
        let (h, w, inside) = shape_mask(s);
        for oy in 0..=cells - h {
            for ox in 0..=cells - w {
                let fits = (0..cells).all(|cy| {
                    (0..cells).all(|cx| {
                        let (ry, rx) = (cy.wrapping_sub(oy), cx.wrapping_sub(ox));
                        lit(cy, cx) == (ry < h && rx < w && inside(ry, rx))
                    })
                });
                if fits {
                    shape = Some(s);
                    break 'shapes;
                }
            }
        }
    }
    let shape = shape.ok_or_else(|| Error::Contract("no shape template matches".into()))?;
    let texture = (0..side)
        .max_by(|&a, &b| {
            let score = |t: usize| {
                let mut acc = 0.0;
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        acc += high.get(y, x, 0) * f64::from(texture_sign(t, y, x));
                    }
                }
                acc.abs()
            };
            score(a).total_cmp(&score(b))
        })
        .unwrap_or(0);
    Ok(shape * side + texture)
}

// ---- tile-detail -----------------------------------------------------------

/// Glyph bitmaps live on a 4×4 grid of macro cells, each `MACRO` pixels.
const GLYPH_CELLS: usize = 4;
const MACRO: usize = 3;
const GLYPH_PX: usize = GLYPH_CELLS * MACRO;

/// Eight fixed 4×4 glyph bitmaps (bit `r·4 + c` set = filled), pairwise at
/// Hamming distance ≥ 6.
const GLYPHS: [u16; 8] = [
    0b1001_0110_0110_1001, // ring-ish X
    0b1111_1000_1000_1111, // C
    0b0110_0110_0110_0110, // bar
    0b1111_0000_0000_1111, // rails
    0b1000_0100_0010_0001, // diagonal
    0b0001_0011_0111_1111, // wedge
    0b1100_1100_0011_0011, // blocks
    0b0000_1111_1111_0000, // belt
];

fn glyph_on(class: usize, dy: usize, dx: usize) -> bool {
    let bit = (dy / MACRO) * GLYPH_CELLS + dx / MACRO;
    GLYPHS[class] >> (15 - bit) & 1 == 1
}

/// Pixels of a `width × height` image that receive zero weight when the
/// whole image is resized to `tile × tile`; true = invisible.
pub fn downscale_blind_mask(width: usize, height: usize, tile: usize) -> Result<Vec<bool>> {
    let blind_axis = |n: usize| -> Result<Vec<bool>> {
        (0..n)
            .map(|i| {
                let probe = ImageBuffer::from_fn(1, n, 1, |_, x, _| f64::from(u8::from(x == i)))?;
                let out = resize_bilinear(&probe, tile, 1)?;
                Ok(out.pixels().iter().all(|&v| v == 0.0))
            })
            .collect()
    };
    let cols = blind_axis(width)?;
    let rows = blind_axis(height)?;
    Ok((0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| rows[y] || cols[x])
        .collect())
}

struct TileDetail {
    cols: usize,
    rows: usize,
    blind: Vec<bool>,
}

impl TileDetail {
    fn new(spec: &TaskSpec) -> Result<Self> {
        let mut problems = Vec::new();
        let t = spec.tile_size;
        if spec.n_classes < 2 || spec.n_classes > GLYPHS.len() {
            problems.push(format!(
                "task.n_classes: {} must be between 2 and {}",
                spec.n_classes,
                GLYPHS.len()
            ));
        }
        if t < GLYPH_PX || spec.image_width % t != 0 || spec.image_height % t != 0 {
            problems.push(format!(
                "task.tile_size: {t} must be at least {GLYPH_PX} and divide the {}x{} image",
                spec.image_width, spec.image_height
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (cols, rows) = (spec.image_width / t, spec.image_height / t);
        let grid = select_grid(spec.image_width, spec.image_height, spec.max_tiles);
        if (grid.cols, grid.rows) != (cols, rows) || cols * rows < 2 {
            return Err(Error::config(format!(
                "task: a {}x{} image must tile exactly into more than one {t}-pixel tile within {} tiles",
                spec.image_width, spec.image_height, spec.max_tiles
            )));
        }
        let blind = downscale_blind_mask(spec.image_width, spec.image_height, t)?;
        let this = Self { cols, rows, blind };
        // every glyph must keep a distinct footprint on blind pixels
        for cy in 0..rows {
            for cx in 0..cols {
                let prints: Vec<Vec<bool>> = (0..spec.n_classes)
                    .map(|k| this.footprint(spec, cy, cx, k))
                    .collect();
                for a in 0..prints.len() {
                    for b in a + 1..prints.len() {
                        if prints[a] == prints[b] {
                            return Err(Error::config(format!(
                                "task: glyphs {a} and {b} are indistinguishable in cell ({cy},{cx}) \
                                 once the downscale-visible pixels are removed"
                            )));
                        }
                    }
                }
                if prints.iter().flatten().all(|&p| !p) {
                    return Err(Error::config("task: no downscale-invisible pixels available".to_string()));
                }
            }
        }
        Ok(this)
    }

    fn origin(spec: &TaskSpec, cy: usize, cx: usize) -> (usize, usize) {
        let t = spec.tile_size;
        let pad = (t - GLYPH_PX) / 2;
        (cy * t + pad, cx * t + pad)
    }

    /// Painted pixels of glyph `class` in cell `(cy, cx)`, over the glyph box.
    fn footprint(&self, spec: &TaskSpec, cy: usize, cx: usize, class: usize) -> Vec<bool> {
        let (oy, ox) = Self::origin(spec, cy, cx);
        let mut out = Vec::with_capacity(GLYPH_PX * GLYPH_PX);
        for dy in 0..GLYPH_PX {
            for dx in 0..GLYPH_PX {
                let blind = self.blind[(oy + dy) * spec.image_width + ox + dx];
                out.push(blind && glyph_on(class, dy, dx));
            }
        }
        out
    }

    fn split(&self, spec: &TaskSpec, split: u64, n: usize) -> Vec<Sample> {
        let mut order_rng = sample_rng(spec.seed, split | 0x100, 0);
        let labels = balanced_labels(n, spec.n_classes, &mut order_rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let mut rng = sample_rng(spec.seed, split, i);
                let asked = (rng.random_range(0..self.rows), rng.random_range(0..self.cols));
                let classes: Vec<usize> = (0..self.rows * self.cols)
                    .map(|c| {
                        if c == asked.0 * self.cols + asked.1 {
                            label
                        } else {
                            rng.random_range(0..spec.n_classes)
                        }
                    })
                    .collect();
                let image = self.render(spec, &classes, &mut rng);
                Sample {
                    images: vec![image],
                    question: format!("row {} col {}?", asked.0, asked.1),
                    answer: class_letter(label),
                    label,
                }
            })
            .collect()
    }

    fn render(&self, spec: &TaskSpec, classes: &[usize], rng: &mut ChaCha8Rng) -> ImageBuffer {
        let bg: [u8; 3] = [
            rng.random_range(40..=80),
            rng.random_range(40..=80),
            rng.random_range(40..=80),
        ];
        let mut img = ImageBuffer::from_fn(spec.image_height, spec.image_width, 3, |_, _, c| {
            f64::from(bg[c]) / 255.0
        })
        .expect("non-empty image");
        for cy in 0..self.rows {
            for cx in 0..self.cols {
                let ink: [u8; 3] = [
                    rng.random_range(160..=255),
                    rng.random_range(160..=255),
                    rng.random_range(160..=255),
                ];
                let (oy, ox) = Self::origin(spec, cy, cx);
                let print = self.footprint(spec, cy, cx, classes[cy * self.cols + cx]);
                for dy in 0..GLYPH_PX {
                    for dx in 0..GLYPH_PX {
                        if print[dy * GLYPH_PX + dx] {
                            for (c, &v) in ink.iter().enumerate() {
                                img.set(oy + dy, ox + dx, c, f64::from(v) / 255.0);
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

/// Nearest-template oracle for tile-detail: reads the asked cell at full
/// resolution and returns the glyph whose footprint matches best.
pub fn tile_detail_oracle(spec: &TaskSpec, img: &ImageBuffer, row: usize, col: usize) -> Result<usize> {
    let g = TileDetail::new(spec)?;
    let (oy, ox) = TileDetail::origin(spec, row, col);
    let bg = img.get(0, 0, 0);
    let seen: Vec<bool> = (0..GLYPH_PX * GLYPH_PX)
        .map(|i| (img.get(oy + i / GLYPH_PX, ox + i % GLYPH_PX, 0) - bg).abs() > 1e-9)
        .collect();
    (0..spec.n_classes)
        .min_by_key(|&k| {
            g.footprint(spec, row, col, k)
                .iter()
                .zip(&seen)
                .filter(|(a, b)| a != b)
                .count()
        })
        .ok_or_else(|| Error::Contract("no classes".into()))
}

/// Parses the `row R col C?` question of a tile-detail sample.
pub fn parse_cell(question: &str) -> Option<(usize, usize)> {
    let mut it = question.trim_end_matches('?').split_whitespace();
    match (it.next(), it.next(), it.next(), it.next()) {
        (Some("row"), Some(r), Some("col"), Some(c)) => Some((r.parse().ok()?, c.parse().ok()?)),
        _ => None,
    }
}

/// Writes `train.jsonl` / `eval.jsonl` plus one PPM per image under `dir`.
/// Image paths in the index are relative to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (name, split) in [("train", &data.train), ("eval", &data.eval)] {
        let mut records = Vec::with_capacity(split.len());
        for (i, s) in split.iter().enumerate() {
            let mut paths = Vec::new();
            for (j, img) in s.images.iter().enumerate() {
                let rel = Path::new("images").join(format!("{name}_{i:05}_{j}.ppm"));
                img.write_ppm(dir.join(&rel))?;
                paths.push(rel);
            }
            records.push(QaRecord {
                images: paths,
                question: s.question.clone(),
                answer: s.answer.clone(),
            });
        }
        write_jsonl(dir.join(format!("{name}.jsonl")), &records)?;
    }
    Ok(())
}

/// Reads a split written by [`write_dataset`] (or any index in that format).
/// Labels are recovered from single-letter answers where possible.
pub fn read_split(index: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let index = index.as_ref();
    let base = index.parent().unwrap_or(Path::new("."));
    crate::assembler::read_jsonl(index)?
        .into_iter()
        .map(|r| {
            let images = r
                .images
                .iter()
                .map(|p| ImageBuffer::read_ppm(if p.is_absolute() { p.clone() } else { base.join(p) }))
                .collect::<Result<_>>()?;
            let label = match r.answer.as_bytes() {
                [c @ b'a'..=b'z'] => usize::from(c - b'a'),
                _ => usize::MAX,
            };
            Ok(Sample {
                images,
                question: r.question,
                answer: r.answer,
                label,
            })
        })
        .collect()
}
