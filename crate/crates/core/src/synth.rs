//! Deterministic referring-segmentation scenes: coloured shapes on a 3×3
//! grid, a templated expression and the exact mask of the referred object.
//!
//! Objects occupy distinct cells and stay inside them, so no two objects
//! overlap. Distractors share the target's colour or shape, which forces the
//! expression to be read as a whole rather than by its first word.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::vocab::Vocab;

pub const GRID_SIDE: usize = 3;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
/// Side of the low-resolution supervision block.
pub const GT_FACTOR: usize = 4;

const BACKGROUND: [u8; 3] = [24, 24, 32];
const POSITIONS: [&str; GRID_CELLS] = [
    "top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 70],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half-extent as a fraction of the cell side.
    fn extent(self) -> f64 {
        match self {
            Size::Small => 0.26,
            Size::Large => 0.42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Row-major cell index on the 3×3 grid.
    pub cell: usize,
    /// Centre in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels: radius, half side, or half base.
    pub r: f64,
}

impl Object {
    /// Whether pixel `(x, y)` belongs to the shape: the centre of the
    /// `cell × cell` raster block containing it must lie inside the outline.
    pub fn covers(&self, x: usize, y: usize, cell: usize) -> bool {
        let centre = |v: usize| (v / cell * cell) as f64 + cell as f64 / 2.0;
        let dx = centre(x) - self.cx;
        let dy = centre(y) - self.cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            // Apex at the top, base at the bottom; half-width grows linearly
            // from 0 at the apex to r at the base.
            Shape::Triangle => dy >= -self.r && dy <= self.r && dx.abs() <= (dy + self.r) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `<color> <shape>`
    ColorShape,
    /// `<size> <color> <shape>`
    SizeColorShape,
    /// `<shape> on the <position>`
    ShapePosition,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::ColorShape, Template::SizeColorShape, Template::ShapePosition];

    pub fn render(self, o: &Object) -> String {
        match self {
            Template::ColorShape => format!("{} {}", o.color.word(), o.shape.word()),
            Template::SizeColorShape => format!("{} {} {}", o.size.word(), o.color.word(), o.shape.word()),
            Template::ShapePosition => format!("{} on the {}", o.shape.word(), POSITIONS[o.cell]),
        }
    }

    /// Symbolic predicate: does `o` satisfy the expression built from `target`?
    pub fn matches(self, target: &Object, o: &Object) -> bool {
        match self {
            Template::ColorShape => o.color == target.color && o.shape == target.shape,
            Template::SizeColorShape => {
                o.size == target.size && o.color == target.color && o.shape == target.shape
            }
            Template::ShapePosition => o.shape == target.shape && o.cell == target.cell,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<Object>,
    pub target: usize,
    pub template: Template,
}

impl SceneSpec {
    pub fn distractors(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn referred(&self) -> &Object {
        &self.objects[self.target]
    }

    pub fn text(&self) -> String {
        self.template.render(self.referred())
    }

    /// Indices of the objects satisfying the expression.
    pub fn resolve(&self) -> Vec<usize> {
        let t = self.referred();
        (0..self.objects.len()).filter(|&i| self.template.matches(t, &self.objects[i])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Input(format!("unknown split {s:?}; expected train or val"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Side length; images are square.
    pub size: usize,
    /// Row-major RGB bytes.
    pub rgb: Vec<u8>,
    pub text: String,
    pub tokens: Vec<u32>,
    /// Row-major 0/1 mask at full resolution.
    pub gt: Vec<u8>,
    pub scene: SceneSpec,
}

impl Sample {
    /// Image as `[H, W, 3]` with values in `[0, 1]`.
    pub fn image<T: Scalar>(&self) -> Tensor<T> {
        let d = self.rgb.iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
        Tensor::new(&[self.size, self.size, 3], d).expect("image buffer matches its size")
    }

    /// Ground truth at `1/GT_FACTOR` resolution as 0/1 values.
    pub fn gt_lowres<T: Scalar>(&self) -> Vec<T> {
        downsample_gt(&self.gt, self.size, self.size)
            .expect("image size is a multiple of the block")
            .into_iter()
            .map(|v| T::lit(v as f64))
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed; distinct splits never share a stream.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(seed ^ split.tag()) ^ index as u64)
}

fn place(rng: &mut ChaCha8Rng, shape: Shape, color: Color, size: Size, cell: usize, image: usize) -> Object {
    let side = image as f64 / GRID_SIDE as f64;
    let r = size.extent() * side;
    let slack = (side / 2.0 - r - 1.0).max(0.0);
    let (row, col) = (cell / GRID_SIDE, cell % GRID_SIDE);
    let cx = (col as f64 + 0.5) * side + rng.gen_range(-slack..=slack);
    let cy = (row as f64 + 0.5) * side + rng.gen_range(-slack..=slack);
    Object { shape, color, size, cell, cx, cy, r }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    *xs.choose(rng).expect("non-empty choice")
}

/// Draws one unambiguous scene from its own seed.
pub fn scene(seed: u64, cfg: &SynthConfig, image: usize) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [Size::Small, Size::Large];
    let count = rng.gen_range(cfg.min_distractors..=cfg.max_distractors);
    let mut cells: Vec<usize> = (0..GRID_CELLS).collect();
    cells.shuffle(&mut rng);
    let (shape, color, size) = (pick(&mut rng, &Shape::ALL), pick(&mut rng, &Color::ALL), pick(&mut rng, &sizes));
    let t = place(&mut rng, shape, color, size, cells[0], image);
    let mut objects = vec![t];
    for &cell in &cells[1..=count] {
        let (shape, color) = if rng.gen_bool(0.5) {
            (t.shape, pick(&mut rng, &Color::ALL))
        } else {
            (pick(&mut rng, &Shape::ALL), t.color)
        };
        let size = pick(&mut rng, &sizes);
        objects.push(place(&mut rng, shape, color, size, cell, image));
    }
    let target = rng.gen_range(0..objects.len());
    objects.swap(0, target);
    let unique: Vec<Template> = Template::ALL
        .into_iter()
        .filter(|tpl| objects.iter().filter(|o| tpl.matches(&t, o)).count() == 1)
        .collect();
    // The position template always resolves: cells are distinct.
    let template = pick(&mut rng, &unique);
    Ok(SceneSpec { seed, objects, target, template })
}

/// Rasterises the scene on `cell`-pixel blocks: `(rgb, target mask)`.
pub fn render(spec: &SceneSpec, image: usize, cell: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rgb = Vec::with_capacity(image * image * 3);
    let mut gt = vec![0u8; image * image];
    for y in 0..image {
        for x in 0..image {
            let hit = spec.objects.iter().position(|o| o.covers(x, y, cell));
            let c = hit.map_or(BACKGROUND, |i| spec.objects[i].color.rgb());
            rgb.extend_from_slice(&c);
            if hit == Some(spec.target) {
                gt[y * image + x] = 1;
            }
        }
    }
    (rgb, gt)
}

pub fn sample(cfg: &SynthConfig, image: usize, max_len: usize, split: Split, index: usize) -> Result<Sample> {
    let spec = scene(sample_seed(cfg.seed, split, index), cfg, image)?;
    let (rgb, gt) = render(&spec, image, cfg.raster_cell);
    let text = spec.text();
    let tokens = Vocab::builtin().encode(&text, max_len)?;
    Ok(Sample { id: format!("{}-{index:06}", split.name()), size: image, rgb, text, tokens, gt, scene: spec })
}

/// `count` samples of `split`; sample `i` depends only on the seed, the
/// split and `i`.
pub fn generate(cfg: &SynthConfig, image: usize, max_len: usize, split: Split, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if image == 0 || image % GT_FACTOR != 0 {
        return Err(Error::Config(format!("image size {image} is not a multiple of {GT_FACTOR}")));
    }
    (0..count).into_par_iter().map(|i| sample(cfg, image, max_len, split, i)).collect()
}

/// Block mean over `GT_FACTOR × GT_FACTOR` windows, then `≥ 0.5 → 1`.
pub fn downsample_gt(mask: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let f = GT_FACTOR;
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid("downsample_gt", format!("{h}x{w} is not divisible by {f}")));
    }
    if mask.len() != h * w {
        return Err(Error::shape("downsample_gt", &[mask.len()], &[h, w]));
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0u8; ho * wo];
    for by in 0..ho {
        for bx in 0..wo {
            let mut on = 0;
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    on += (mask[y * w + x] != 0) as usize;
                }
            }
            out[by * wo + bx] = (2 * on >= f * f) as u8;
        }
    }
    Ok(out)
}
