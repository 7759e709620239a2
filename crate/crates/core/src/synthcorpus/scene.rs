//! Single-scene construction.
//!
//! Geometry rules, all in inclusive box coordinates on an 8-pixel grid:
//!
//! * `above`/`below`/`left_of`/`right_of`: the boxes overlap by at least 8
//!   pixels across the relation axis and are separated by at least 8 pixels
//!   along it.
//! * `touching`: the boxes are exactly adjacent along one axis (gap zero)
//!   and overlap by at least 8 pixels across it.
//! * `inside`: the first box lies strictly inside the second with at least
//!   8 pixels of margin; containers are squares or circles.
//!
//! These regimes are mutually exclusive, and an optional distractor object
//! is placed diagonally clear of both captioned objects (both axis gaps at
//! least 8), so exactly one object pair satisfies exactly one relation. The
//! caption names that pair: for symmetric-template relations the
//! lexicographically smaller (color, shape) pair comes first; for `inside`
//! the contained object comes first. Scene in, caption out is therefore a
//! function, which is what makes exact-match accuracy attainable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::BoundingBox;
use crate::pixmap::Image;

/// Color names with their 8-bit palette values. Values are chosen so no
/// channel triple is a gray (the background is always gray), making every
/// shape pixel recoverable from the stored image.
pub const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const COLOR_VALUES: [[u8; 3]; 4] = [
    [204, 38, 38],
    [38, 178, 51],
    [51, 76, 216],
    [229, 216, 51],
];

pub const SHAPE_NOUNS: [&str; 3] = ["square", "circle", "triangle"];

/// Relation vocabulary, alphabetical.
pub const RELATION_LEXICON: [&str; 6] = [
    "above",
    "below",
    "inside",
    "left_of",
    "right_of",
    "touching",
];

/// Object side lengths for relation pairs; multiples of the 8-pixel grid.
const PAIR_SIZES: [usize; 2] = [16, 24];
/// Contained-object side length.
const INNER_SIZE: usize = 16;
/// Container side length.
pub const CONTAINER_SIZE: usize = 40;
/// Distractor side length.
const DISTRACTOR_SIZE: usize = 16;
/// Grid every object coordinate snaps to. Equal to the encoder patch size,
/// so ideal attention covers object boxes exactly.
pub const GRID: usize = 8;
/// Gap along the relation axis for directional pairs; two grid cells, so a
/// directional pair never reads as touching at patch resolution.
const AXIS_GAP: usize = 16;
/// Minimum cross-axis overlap for directional and touching pairs. Two grid
/// cells cap the cross-axis offset below the along-axis gap, so the pair
/// always reads as one axis.
const MIN_OVERLAP: usize = 16;
/// Margin kept inside containers and around distractors; one grid cell.
const MIN_SEP: usize = 8;
/// Background gray level and peak noise, both in 8-bit steps.
const BG_LEVEL: i32 = 128;
const BG_NOISE: i32 = 13;

const SCENE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Canvas side length in pixels; must be a multiple of the grid.
    pub canvas: usize,
    /// Probability of adding a third, uncaptioned object.
    pub distractor_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 64,
            distractor_prob: 0.3,
        }
    }
}

/// One annotated word instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub word: String,
    /// Zero-based position of the word in the caption.
    pub pos: usize,
    pub bbox: BoundingBox,
}

/// A generated scene: the rendered image, its canonical caption, boxes for
/// the captioned nouns, and the relation words the caption uses.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Image,
    pub caption: Vec<String>,
    pub truth: Vec<TruthBox>,
    pub relations: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    fn noun(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn from_index(i: usize) -> Self {
        [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle][i]
    }
}

#[derive(Clone, Copy, Debug)]
struct Obj {
    color: usize,
    kind: ShapeKind,
    size: usize,
    x: usize,
    y: usize,
}

impl Obj {
    fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.x, self.y, self.x + self.size - 1, self.y + self.size - 1)
    }

    /// Caption ordering key.
    fn name_key(&self) -> (String, String) {
        (
            COLOR_NAMES[self.color].to_string(),
            self.kind.noun().to_string(),
        )
    }
}

fn overlap_1d(a1: usize, a2: usize, b1: usize, b2: usize) -> usize {
    let lo = a1.max(b1);
    let hi = a2.min(b2);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

fn gap_1d(a1: usize, a2: usize, b1: usize, b2: usize) -> Option<usize> {
    if a2 < b1 {
        Some(b1 - a2 - 1)
    } else if b2 < a1 {
        Some(a1 - b2 - 1)
    } else {
        None
    }
}

/// Random multiple of the grid in `[0, max_start]`.
fn grid_pos(rng: &mut ChaCha8Rng, max_start: usize) -> usize {
    let slots = max_start / GRID + 1;
    rng.gen_range(0..slots) * GRID
}

fn place_separated(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    s_first: usize,
    s_second: usize,
) -> Option<(usize, usize, usize, usize)> {
    // Separation axis is constructive; the overlap axis is rejection
    // sampled. Coordinates are (along, across) and the caller orients them.
    let span = s_first + AXIS_GAP + s_second;
    if span > canvas {
        return None;
    }
    let a_first = grid_pos(rng, canvas - span);
    let lo = a_first + s_first + AXIS_GAP;
    let a_second = lo + grid_pos(rng, canvas - lo - s_second);
    for _ in 0..16 {
        let b_first = grid_pos(rng, canvas - s_first);
        let b_second = grid_pos(rng, canvas - s_second);
        let ov = overlap_1d(
            b_first,
            b_first + s_first - 1,
            b_second,
            b_second + s_second - 1,
        );
        if ov >= MIN_OVERLAP {
            return Some((a_first, b_first, a_second, b_second));
        }
    }
    None
}

fn place_touching(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    s_first: usize,
    s_second: usize,
) -> Option<(usize, usize, usize, usize)> {
    // First object left of (or above) the second, exactly adjacent; which
    // one is which the caller decides by coin flip.
    let span = s_first + s_second;
    if span > canvas {
        return None;
    }
    let a_first = grid_pos(rng, canvas - span);
    let a_second = a_first + s_first;
    for _ in 0..16 {
        let b_first = grid_pos(rng, canvas - s_first);
        let b_second = grid_pos(rng, canvas - s_second);
        let ov = overlap_1d(
            b_first,
            b_first + s_first - 1,
            b_second,
            b_second + s_second - 1,
        );
        if ov >= MIN_OVERLAP {
            return Some((a_first, b_first, a_second, b_second));
        }
    }
    None
}

/// True when the distractor stands in no lexicon relation to the object.
/// Every lexicon relation needs axis overlap or containment, so zero
/// overlap on both axes rules them all out; one full grid cell of gap on
/// top of that rules out corner contact.
fn relation_free(d: &Obj, o: &Obj) -> bool {
    let db = d.bbox();
    let ob = o.bbox();
    let gx = gap_1d(db.x1, db.x2, ob.x1, ob.x2);
    let gy = gap_1d(db.y1, db.y2, ob.y1, ob.y2);
    matches!((gx, gy), (Some(x), Some(y)) if x >= MIN_SEP || y >= MIN_SEP)
}

/// Builds one scene. The same spec and seed always produce byte-identical
/// output.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneSample> {
    assert!(
        spec.canvas % GRID == 0 && spec.canvas >= CONTAINER_SIZE + 2 * GRID,
        "canvas {} incompatible with the placement grid",
        spec.canvas
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SCENE_ATTEMPTS {
        if let Some(sample) = try_scene(spec, &mut rng, seed) {
            return Ok(sample);
        }
    }
    Err(Error::InfeasiblePlacement {
        attempts: SCENE_ATTEMPTS,
        seed,
    })
}

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng, seed: u64) -> Option<SceneSample> {
    let canvas = spec.canvas;
    let relation = RELATION_LEXICON[rng.gen_range(0..RELATION_LEXICON.len())];

    // Colors are distinct, so the (color, shape) ordering key never ties.
    let color_a = rng.gen_range(0..COLOR_NAMES.len());
    let mut color_b = rng.gen_range(0..COLOR_NAMES.len() - 1);
    if color_b >= color_a {
        color_b += 1;
    }

    let (first, second) = if relation == "inside" {
        let inner_kind = ShapeKind::from_index(rng.gen_range(0..3));
        // Containers are hollow-looking only in the sense that the inner
        // object paints over them; triangles leave too little interior.
        let container_kind = if rng.gen_bool(0.5) {
            ShapeKind::Square
        } else {
            ShapeKind::Circle
        };
        let cx = grid_pos(rng, canvas - CONTAINER_SIZE);
        let cy = grid_pos(rng, canvas - CONTAINER_SIZE);
        // Offsets keep the inner box strictly inside even a circular
        // container: the farthest corner stays short of the radius.
        let offsets = [GRID, 2 * GRID];
        let ox = offsets[rng.gen_range(0..2)];
        let oy = offsets[rng.gen_range(0..2)];
        let inner = Obj {
            color: color_a,
            kind: inner_kind,
            size: INNER_SIZE,
            x: cx + ox,
            y: cy + oy,
        };
        let container = Obj {
            color: color_b,
            kind: container_kind,
            size: CONTAINER_SIZE,
            x: cx,
            y: cy,
        };
        (inner, container)
    } else {
        let kind_a = ShapeKind::from_index(rng.gen_range(0..3));
        let kind_b = ShapeKind::from_index(rng.gen_range(0..3));
        let size_a = PAIR_SIZES[rng.gen_range(0..PAIR_SIZES.len())];
        let size_b = PAIR_SIZES[rng.gen_range(0..PAIR_SIZES.len())];
        let mut first = Obj {
            color: color_a,
            kind: kind_a,
            size: size_a,
            x: 0,
            y: 0,
        };
        let mut second = Obj {
            color: color_b,
            kind: kind_b,
            size: size_b,
            x: 0,
            y: 0,
        };
        if second.name_key() < first.name_key() {
            std::mem::swap(&mut first, &mut second);
        }
        match relation {
            "above" => {
                let (y1, x1, y2, x2) = place_separated(rng, canvas, first.size, second.size)?;
                (first.x, first.y, second.x, second.y) = (x1, y1, x2, y2);
            }
            "below" => {
                let (y2, x2, y1, x1) = place_separated(rng, canvas, second.size, first.size)?;
                (first.x, first.y, second.x, second.y) = (x1, y1, x2, y2);
            }
            "left_of" => {
                let (x1, y1, x2, y2) = place_separated(rng, canvas, first.size, second.size)?;
                (first.x, first.y, second.x, second.y) = (x1, y1, x2, y2);
            }
            "right_of" => {
                let (x2, y2, x1, y1) = place_separated(rng, canvas, second.size, first.size)?;
                (first.x, first.y, second.x, second.y) = (x1, y1, x2, y2);
            }
            "touching" => {
                let horizontal = rng.gen_bool(0.5);
                let first_leads = rng.gen_bool(0.5);
                let (sa, sb) = if first_leads {
                    (first.size, second.size)
                } else {
                    (second.size, first.size)
                };
                let (a_lead, b_lead, a_trail, b_trail) = place_touching(rng, canvas, sa, sb)?;
                let (lead, trail): (&mut Obj, &mut Obj) = if first_leads {
                    (&mut first, &mut second)
                } else {
                    (&mut second, &mut first)
                };
                if horizontal {
                    (lead.x, lead.y) = (a_lead, b_lead);
                    (trail.x, trail.y) = (a_trail, b_trail);
                } else {
                    (lead.y, lead.x) = (a_lead, b_lead);
                    (trail.y, trail.x) = (a_trail, b_trail);
                }
            }
            _ => unreachable!("unknown relation {relation}"),
        }
        (first, second)
    };

    // Optional distractor: unused color, unused shape kind, standing in no
    // lexicon relation to either captioned object. The admissible positions
    // are enumerated outright; when none exist the scene goes out without
    // one.
    let mut distractor = None;
    if rng.gen_bool(spec.distractor_prob) {
        let free_colors: Vec<usize> = (0..COLOR_NAMES.len())
            .filter(|&c| c != first.color && c != second.color)
            .collect();
        let free_kinds: Vec<ShapeKind> = (0..3)
            .map(ShapeKind::from_index)
            .filter(|&k| k != first.kind && k != second.kind)
            .collect();
        if !free_kinds.is_empty() {
            let color = free_colors[rng.gen_range(0..free_colors.len())];
            let kind = free_kinds[rng.gen_range(0..free_kinds.len())];
            let mut spots = Vec::new();
            for y in (0..=canvas - DISTRACTOR_SIZE).step_by(GRID) {
                for x in (0..=canvas - DISTRACTOR_SIZE).step_by(GRID) {
                    let d = Obj {
                        color,
                        kind,
                        size: DISTRACTOR_SIZE,
                        x,
                        y,
                    };
                    if relation_free(&d, &first) && relation_free(&d, &second) {
                        spots.push(d);
                    }
                }
            }
            if !spots.is_empty() {
                distractor = Some(spots[rng.gen_range(0..spots.len())]);
            }
        }
    }

    let caption = vec![
        "a".to_string(),
        COLOR_NAMES[first.color].to_string(),
        first.kind.noun().to_string(),
        relation.to_string(),
        "a".to_string(),
        COLOR_NAMES[second.color].to_string(),
        second.kind.noun().to_string(),
    ];

    // Paint back to front: distractor, container/second object, first
    // object. Ownership tags give each object its visible-pixel box.
    let mut owner = vec![0u8; canvas * canvas];
    let mut image = Image::new(canvas, canvas);
    if let Some(d) = &distractor {
        paint(&mut image, &mut owner, canvas, d, 1);
    }
    paint(&mut image, &mut owner, canvas, &second, 2);
    paint(&mut image, &mut owner, canvas, &first, 3);
    for y in 0..canvas {
        for x in 0..canvas {
            // Noise is drawn for every background pixel in row-major order,
            // so the raster is a pure function of the draw sequence.
            if owner[y * canvas + x] == 0 {
                let level = (BG_LEVEL + rng.gen_range(-BG_NOISE..=BG_NOISE)) as u8;
                image.set(y, x, [level as f32 / 255.0; 3]);
            }
        }
    }

    let first_box = visible_box(&owner, canvas, 3)?;
    let second_box = visible_box(&owner, canvas, 2)?;
    // Shape nouns sit at fixed template positions: caption index 2 names
    // the first object, index 6 the second.
    let truth = vec![
        TruthBox {
            word: first.kind.noun().to_string(),
            pos: 2,
            bbox: first_box,
        },
        TruthBox {
            word: second.kind.noun().to_string(),
            pos: 6,
            bbox: second_box,
        },
    ];

    Some(SceneSample {
        image,
        caption,
        truth,
        relations: vec![relation.to_string()],
        seed,
    })
}

fn visible_box(owner: &[u8], canvas: usize, tag: u8) -> Option<BoundingBox> {
    let cells: Vec<usize> = (0..owner.len()).filter(|&i| owner[i] == tag).collect();
    if cells.is_empty() {
        return None;
    }
    crate::grounding::tight_box(&cells, canvas).ok()
}

fn paint(image: &mut Image, owner: &mut [u8], canvas: usize, obj: &Obj, tag: u8) {
    let [r, g, b] = COLOR_VALUES[obj.color];
    let rgb = [r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0];
    let s = obj.size as f32;
    for dy in 0..obj.size {
        for dx in 0..obj.size {
            let covered = match obj.kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    // Pixel-center test against a disk inscribed in the box;
                    // every border row and column keeps at least one pixel,
                    // so the visible box spans the full size.
                    let cx = dx as f32 + 0.5 - s / 2.0;
                    let cy = dy as f32 + 0.5 - s / 2.0;
                    cx * cx + cy * cy <= (s / 2.0) * (s / 2.0)
                }
                ShapeKind::Triangle => {
                    // Apex on the top row, full-width base on the bottom
                    // row. Row width grows from one grid step so the top
                    // row keeps pixels even when the center falls between
                    // pixel columns.
                    let center = (s - 1.0) / 2.0;
                    (dx as f32 - center).abs() <= (dy as f32 + 1.0) * 0.5 + 0.01
                }
            };
            if covered {
                let (y, x) = (obj.y + dy, obj.x + dx);
                image.set(y, x, rgb);
                owner[y * canvas + x] = tag;
            }
        }
    }
}
