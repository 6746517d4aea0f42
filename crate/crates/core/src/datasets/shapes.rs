//! Procedural stand-in for a natural-image dataset. Each class owns a
//! glyph. In the `Template` arrangement a sample is its class glyph centred
//! on the canvas. In the `Scattered` arrangement a sample scatters a few
//! copies of the glyph over a 3x3 grid of cells, each copy with its own
//! offset and contrast, and drops squares of random clutter into free
//! cells, so class evidence is local and repeated, as with object parts
//! and textures in photographs, and irrelevant high-contrast content is
//! common. Both add clamped Gaussian pixel noise.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TEMPLATE_COUNT: usize = 12;

const INTENSITY: [f32; TEMPLATE_COUNT] = [1.0, 0.9, 0.95, 0.85, 1.0, 0.9, 0.8, 0.85, 0.95, 1.0, 0.9, 0.8];

/// Glyph copies per image, each in its own grid cell.
pub const COPIES: usize = 3;
/// Clutter squares per image, each in a cell without a glyph.
pub const CLUTTER: usize = 2;
/// Subsamples per pixel side when rasterizing glyphs.
const SUPERSAMPLE: usize = 4;
const GRID: usize = 3;
/// Default per-copy contrast range.
pub const DEFAULT_CONTRAST: [f32; 2] = [0.4, 0.8];

fn disk(u: f64, v: f64, cu: f64, cv: f64, r: f64) -> bool {
    (u - cu).powi(2) + (v - cv).powi(2) < r * r
}

/// Membership of normalized point `(u, v)` (column, row in `[0, 1]`) in the
/// glyph of `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let span = |t: f64| (0.15..0.85).contains(&t);
    let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
    let cheb = (u - 0.5).abs().max((v - 0.5).abs());
    match class {
        0 => (v - 0.5).abs() < 0.12 && span(u),
        1 => (u - 0.5).abs() < 0.12 && span(v),
        2 => ((v - 0.5).abs() < 0.08 && span(u)) || ((u - 0.5).abs() < 0.08 && span(v)),
        3 => span(u) && span(v) && ((u - v).abs() < 0.09 || (u + v - 1.0).abs() < 0.09),
        4 => r < 0.3,
        5 => (0.22..0.34).contains(&r),
        6 => {
            ((0.15..0.27).contains(&u) && (0.15..0.65).contains(&v))
                || ((0.15..0.27).contains(&v) && (0.15..0.65).contains(&u))
        }
        7 => {
            ((0.73..0.85).contains(&u) && (0.35..0.85).contains(&v))
                || ((0.73..0.85).contains(&v) && (0.35..0.85).contains(&u))
        }
        8 => (0.22..0.33).contains(&cheb),
        9 => disk(u, v, 0.3, 0.3, 0.13) || disk(u, v, 0.7, 0.7, 0.13),
        10 => (0.25..0.8).contains(&v) && (u - 0.5).abs() < (v - 0.25) * 0.6,
        11 => span(u) && span(v) && (u - v).abs() < 0.1,
        _ => unreachable!(),
    }
}

/// Smallest canvas side: glyphs need at least 5 pixels and fit in a cell.
pub const MIN_SIDE: usize = 15;

/// Side of the square glyph box on an `height x width` canvas.
pub fn glyph_side(height: usize, width: usize) -> usize {
    (height.min(width) / 4).max(5).min(height.min(width) / GRID)
}

/// Fraction of pixel `(x, y)` of a `side x side` box covered by the glyph.
fn coverage(class: usize, side: usize, x: usize, y: usize) -> f32 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let u = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / side as f64;
            let v = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / side as f64;
            hits += inside(class, u, v) as usize;
        }
    }
    hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

/// An axis-aligned square: top-left `(row, col)` and side.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Square {
    row: usize,
    col: usize,
    side: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    /// Glyph boxes with their contrast.
    glyphs: Vec<(Square, f32)>,
    clutter: Vec<Square>,
}

fn place<R: Rng>(r: &mut R, cell: usize, cell_side: (usize, usize), side: usize) -> Square {
    let (cell_h, cell_w) = cell_side;
    Square {
        row: (cell / GRID) * cell_h + r.random_range(0..=cell_h - side),
        col: (cell % GRID) * cell_w + r.random_range(0..=cell_w - side),
        side,
    }
}

fn layout<R: Rng>(r: &mut R, canvas: (usize, usize), contrast: [f32; 2]) -> Layout {
    let (height, width) = canvas;
    let side = glyph_side(height, width);
    let cell = (height / GRID, width / GRID);
    let cells = sample(r, GRID * GRID, COPIES + CLUTTER).into_vec();
    let mut glyph_cells = cells[..COPIES].to_vec();
    glyph_cells.sort_unstable();
    let glyphs = glyph_cells
        .into_iter()
        .map(|c| {
            let sq = place(r, c, cell, side);
            (sq, r.random_range(contrast[0]..=contrast[1]))
        })
        .collect();
    let clutter = cells[COPIES..]
        .iter()
        .map(|&c| {
            let s = r.random_range(2..=side - 2);
            place(r, c, cell, s)
        })
        .collect();
    Layout { glyphs, clutter }
}

/// Renders one noiseless sample, drawing clutter values from `r`.
fn render<R: Rng>(class: usize, channels: usize, canvas: (usize, usize), lay: &Layout, r: &mut R) -> Vec<f32> {
    let (height, width) = canvas;
    let mut out = vec![0f32; channels * height * width];
    for ch in 0..channels {
        // multi-channel datasets get a per-class tint
        let tint = if channels > 1 && (class + ch).is_multiple_of(3) { 0.7 } else { 1.0 };
        for (sq, contrast) in &lay.glyphs {
            for y in 0..sq.side {
                for x in 0..sq.side {
                    let cov = coverage(class, sq.side, x, y);
                    out[(ch * height + sq.row + y) * width + sq.col + x] = INTENSITY[class] * tint * contrast * cov;
                }
            }
        }
    }
    for sq in &lay.clutter {
        for ch in 0..channels {
            for y in 0..sq.side {
                for x in 0..sq.side {
                    out[(ch * height + sq.row + y) * width + sq.col + x] = r.random::<f32>();
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// One glyph filling the middle of the canvas; every sample of a class
    /// shares the same noiseless image.
    #[default]
    Template,
    /// Several glyph copies at random offsets and contrasts plus clutter.
    Scattered,
}

fn template_layout(canvas: (usize, usize)) -> Layout {
    let (height, width) = canvas;
    let side = height.min(width) * 3 / 4;
    let sq = Square { row: (height - side) / 2, col: (width - side) / 2, side };
    Layout { glyphs: vec![(sq, 1.0)], clutter: Vec::new() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapesSpec {
    pub class_count: usize,
    pub per_class: usize,
    /// `(channels, height, width)`.
    pub dims: (usize, usize, usize),
    pub noise_std: f32,
    pub arrangement: Arrangement,
    /// Per-copy glyph contrast is drawn uniformly from this range
    /// (`Scattered` only).
    pub contrast: [f32; 2],
}

impl ShapesSpec {
    pub fn new(class_count: usize, per_class: usize, dims: (usize, usize, usize), noise_std: f32) -> Self {
        ShapesSpec {
            class_count,
            per_class,
            dims,
            noise_std,
            arrangement: Arrangement::Template,
            contrast: DEFAULT_CONTRAST,
        }
    }
}

/// `per_class` samples of each of the first `class_count` glyph classes,
/// interleaved by class. Labels cycle `0, 1, ..., K-1, 0, ...`.
///
/// A `Template` sample is the class glyph in a centred box of side
/// `3/4 min(h, w)` at the class intensity. A `Scattered` sample places `COPIES` anti-aliased glyphs of side
/// `glyph_side(h, w)` in distinct cells of a 3x3 grid, at a random offset
/// inside the cell and with a contrast drawn from `spec.contrast`, fills
/// `CLUTTER` squares of side `2..=glyph_side - 2` in other cells with
/// uniform noise, then adds Gaussian noise of `noise_std` and clamps to
/// `[0, 1]`.
pub fn gen_shapes_dataset(spec: &ShapesSpec, seed: u64) -> Result<LabeledDataset> {
    let ShapesSpec { class_count, per_class, dims, noise_std, arrangement, contrast } = *spec;
    let (c, h, w) = dims;
    if !(2..=TEMPLATE_COUNT).contains(&class_count) {
        return Err(Error::invalid(format!(
            "class_count {class_count} outside the template library (2..={TEMPLATE_COUNT})"
        )));
    }
    if c == 0 || h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(format!("image dims {dims:?} too small (need at least {MIN_SIDE}x{MIN_SIDE})")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std must be finite and non-negative"));
    }
    if !(0.0 < contrast[0] && contrast[0] <= contrast[1] && contrast[1] <= 1.0) {
        return Err(Error::invalid(format!("contrast range {contrast:?} must satisfy 0 < lo <= hi <= 1")));
    }
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0f32, noise_std.max(f32::MIN_POSITIVE)).unwrap();
    for i in 0..n {
        let class = i % class_count;
        labels.push(class);
        let mut r = rng::stream(seed, &[rng::tag("shapes"), i as u64]);
        let lay = match arrangement {
            Arrangement::Template => template_layout((h, w)),
            Arrangement::Scattered => layout(&mut r, (h, w), contrast),
        };
        let img = render(class, c, (h, w), &lay, &mut r);
        if noise_std == 0.0 {
            data.extend_from_slice(&img);
        } else {
            data.extend(img.iter().map(|&t| (t + noise.sample(&mut r)).clamp(0.0, 1.0)));
        }
    }
    LabeledDataset::new(Tensor::from_raw(vec![n, c, h, w], data), labels, class_count)
}
