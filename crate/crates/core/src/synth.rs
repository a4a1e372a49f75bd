//! Synthetic benchmark fixtures for the mock backend.
//!
//! Two suites:
//!
//! * [`hr_suite`]: 2688x2688 canvases tiled with 336-pixel cells in four
//!   colours arranged so that no two siblings in the patch tree look alike
//!   (nothing merges). Each canvas holds three 12x12 objects in signature
//!   colours; downsampling the whole canvas to 336 blends them away, while
//!   the leaf crop containing an object shows it intact.
//! * [`quadrant_suite`]: 1344x1344 canvases with four uniform quadrants whose
//!   colours sit at cosine distances of about 0.13 and 0.25, so the number of
//!   merged quadrants, and with it the number of model calls, steps down as θ
//!   crosses 0.1, 0.2 and 0.3.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::Rgb;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backend::{MockObject, MockScene};
use crate::eval::{letter, to_jsonl, BenchmarkSample, Category};
use crate::geometry::Region;
use crate::raster::{encode_png, Raster};

pub const HR_SIDE: u32 = 2688;
pub const CELL: u32 = 336;
pub const OBJECT_SIDE: u32 = 12;
pub const TARGET_BOX: u32 = 320;
pub const QUADRANT_SIDE: u32 = 1344;

const PALETTE: [[u8; 3]; 4] = [[200, 0, 0], [0, 200, 0], [0, 0, 200], [120, 120, 120]];
const QUADRANT_COLORS: [[u8; 3]; 4] = [[200, 0, 0], [173, 100, 0], [0, 0, 200], [0, 132, 150]];

const NAMES: &[&str] = &[
    "hydrant",
    "kite",
    "umbrella",
    "clock",
    "vase",
    "backpack",
    "suitcase",
    "balloon",
    "lantern",
    "helmet",
    "teapot",
    "skateboard",
];
const COLOR_WORDS: &[&str] = &["red", "green", "blue", "yellow", "purple", "orange", "white", "black", "pink", "brown"];

/// One synthetic benchmark item: the sample, what the mock can see, and how
/// to paint the canvas.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub sample: BenchmarkSample,
    pub scene: MockScene,
    background: Background,
}

#[derive(Debug, Clone)]
enum Background {
    /// Cell colour index is `perm[(q1 + q2 + q3) % 4]` over the quadrant
    /// digits of the cell's path from the root.
    Cells {
        perm: [usize; 4],
    },
    Quadrants,
}

impl SynthCase {
    pub fn render(&self) -> Raster {
        let mut img = match &self.background {
            Background::Cells { perm } => Raster::from_fn(self.scene.width, self.scene.height, |x, y| {
                let (cx, cy) = (x / CELL, y / CELL);
                let digit = |level: u32| ((cx >> level) & 1) + 2 * ((cy >> level) & 1);
                let idx = (digit(2) + digit(1) + digit(0)) as usize % 4;
                Rgb(PALETTE[perm[idx]])
            }),
            Background::Quadrants => {
                let half = self.scene.width / 2;
                Raster::from_fn(self.scene.width, self.scene.height, |x, y| {
                    Rgb(QUADRANT_COLORS[(y >= half) as usize * 2 + (x >= half) as usize])
                })
            }
        };
        self.scene.paint(&mut img);
        img
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64)
}

/// Signature colour `k` of a suite; red is always 255, which no background
/// colour reaches.
fn signature(suite: u8, k: usize) -> [u8; 3] {
    [255, suite * 64 + (k / 250) as u8, (k % 250) as u8 + 1]
}

fn question_sample(rng: &mut ChaCha8Rng, id: String, target: &MockObject, bbox: Region) -> BenchmarkSample {
    let mut options: Vec<String> = COLOR_WORDS
        .iter()
        .filter(|c| **c != target.attribute)
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .choose_multiple(rng, 3)
        .cloned()
        .collect();
    let gold = rng.gen_range(0..=options.len());
    options.insert(gold, target.attribute.clone());
    BenchmarkSample {
        id: id.clone(),
        image: PathBuf::from(format!("images/{id}.png")),
        question: format!("What is the color of the {}?", target.name),
        options,
        answer: letter(gold).to_string(),
        category: Category::Attribute,
        target_objects: Some(vec![target.name.clone()]),
        target_bbox: Some(bbox),
    }
}

/// A `TARGET_BOX`-sided square centred on `object`, kept inside `cell`.
fn target_box(object: &Region, cell: &Region) -> Region {
    let side = TARGET_BOX.min(cell.w).min(cell.h);
    let centre = |o: u32, len: u32, c: u32, clen: u32| {
        let want = (o + len / 2).saturating_sub(side / 2);
        want.clamp(c, c + clen - side)
    };
    let x = centre(object.x, object.w, cell.x, cell.w);
    let y = centre(object.y, object.h, cell.y, cell.h);
    Region::new(x, y, side, side).expect("positive side")
}

pub fn hr_case(seed: u64, index: usize) -> SynthCase {
    let mut rng = case_rng(seed, index);
    let mut perm = [0, 1, 2, 3];
    perm.shuffle(&mut rng);
    let cells_per_side = HR_SIDE / CELL;
    let mut cells: Vec<u32> = (0..cells_per_side * cells_per_side).collect();
    cells.shuffle(&mut rng);
    let names: Vec<&str> = NAMES.choose_multiple(&mut rng, 3).copied().collect();

    let mut objects = Vec::new();
    let mut target_cell = None;
    for (j, name) in names.iter().enumerate() {
        let cell_idx = cells[j];
        let cell =
            Region::new((cell_idx % cells_per_side) * CELL, (cell_idx / cells_per_side) * CELL, CELL, CELL).unwrap();
        let x = cell.x + rng.gen_range(OBJECT_SIDE..CELL - 2 * OBJECT_SIDE);
        let y = cell.y + rng.gen_range(OBJECT_SIDE..CELL - 2 * OBJECT_SIDE);
        objects.push(MockObject {
            name: name.to_string(),
            attribute: COLOR_WORDS.choose(&mut rng).unwrap().to_string(),
            color: signature(0, index * 3 + j),
            region: Region::new(x, y, OBJECT_SIDE, OBJECT_SIDE).unwrap(),
        });
        if j == 0 {
            target_cell = Some(cell);
        }
    }
    let id = format!("hr-{index:03}");
    let bbox = target_box(&objects[0].region, &target_cell.unwrap());
    let sample = question_sample(&mut rng, id.clone(), &objects[0], bbox);
    SynthCase {
        sample,
        scene: MockScene { image_id: id, width: HR_SIDE, height: HR_SIDE, objects },
        background: Background::Cells { perm },
    }
}

pub fn hr_suite(seed: u64, count: usize) -> Vec<SynthCase> {
    (0..count).map(|i| hr_case(seed, i)).collect()
}

pub fn quadrant_case(seed: u64, index: usize) -> SynthCase {
    let mut rng = case_rng(seed ^ 0x5157, index);
    let name = *NAMES.choose(&mut rng).unwrap();
    let quadrant = rng.gen_range(0..4u32);
    let half = QUADRANT_SIDE / 2;
    let (qx, qy) = ((quadrant % 2) * half, (quadrant / 2) * half);
    let cell = Region::new(qx + rng.gen_range(0..2) * CELL, qy + rng.gen_range(0..2) * CELL, CELL, CELL).unwrap();
    let x = cell.x + rng.gen_range(OBJECT_SIDE..CELL - 2 * OBJECT_SIDE);
    let y = cell.y + rng.gen_range(OBJECT_SIDE..CELL - 2 * OBJECT_SIDE);
    let object = MockObject {
        name: name.to_string(),
        attribute: COLOR_WORDS.choose(&mut rng).unwrap().to_string(),
        color: signature(1, index),
        region: Region::new(x, y, OBJECT_SIDE, OBJECT_SIDE).unwrap(),
    };
    let id = format!("quad-{index:03}");
    let sample = question_sample(&mut rng, id.clone(), &object, target_box(&object.region, &cell));
    SynthCase {
        sample,
        scene: MockScene { image_id: id, width: QUADRANT_SIDE, height: QUADRANT_SIDE, objects: vec![object] },
        background: Background::Quadrants,
    }
}

pub fn quadrant_suite(seed: u64, count: usize) -> Vec<SynthCase> {
    (0..count).map(|i| quadrant_case(seed, i)).collect()
}

pub fn scenes(cases: &[SynthCase]) -> Vec<MockScene> {
    cases.iter().map(|c| c.scene.clone()).collect()
}

/// Writes `images/<id>.png`, `dataset.jsonl` and `scenes.json` under `dir`
/// and returns the dataset path.
pub fn write_suite(cases: &[SynthCase], dir: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    cases.par_iter().try_for_each(|case| fs::write(dir.join(&case.sample.image), encode_png(&case.render())))?;
    let samples: Vec<BenchmarkSample> = cases.iter().map(|c| c.sample.clone()).collect();
    let dataset = dir.join("dataset.jsonl");
    fs::write(&dataset, to_jsonl(&samples))?;
    let scenes = serde_json::to_string_pretty(&scenes(cases)).map_err(io::Error::other)?;
    fs::write(dir.join("scenes.json"), scenes)?;
    Ok(dataset)
}
