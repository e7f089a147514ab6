//! Procedural content and style images.
//!
//! The content family is simple scenes: two to four solid geometric shapes
//! (discs, rectangles, triangles) over a plain background. The style family
//! is global texture: stripes, checkerboards, noise grain, or stippling,
//! each drawn in a 3-color palette chosen from a fixed table, so every
//! style pixel equals one of its palette entries exactly. All colors are
//! 8-bit values stored as `k/255`, which keeps PNG round trips bit-exact.
//! Generation is deterministic: every image has its own stream cipher RNG
//! seeded from (dataset seed, split, index).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imageio::save_image;
use crate::model::IMAGE_SIZE;
use crate::tensor::Tensor;

/// Dataset recipe; the same spec always generates the same bytes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProceduralSpec {
    pub seed: u64,
    pub content_train: usize,
    pub content_val: usize,
    pub style_train: usize,
    pub style_val: usize,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        ProceduralSpec {
            seed: 0,
            content_train: 256,
            content_val: 8,
            style_train: 256,
            style_val: 8,
        }
    }
}

/// Generated splits, `[3,64,64]` tensors in [0,1].
pub struct Dataset {
    pub content_train: Vec<Tensor>,
    pub content_val: Vec<Tensor>,
    pub style_train: Vec<Tensor>,
    pub style_val: Vec<Tensor>,
}

/// Split listing written next to the PNG files.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub resolution: usize,
    pub content_train: Vec<String>,
    pub content_val: Vec<String>,
    pub style_train: Vec<String>,
    pub style_val: Vec<String>,
}

type Color = [u8; 3];

const BACKGROUNDS: [Color; 5] = [
    [224, 224, 224],
    [240, 230, 200],
    [210, 225, 240],
    [235, 215, 230],
    [221, 235, 214],
];

const SHAPE_COLORS: [Color; 8] = [
    [200, 40, 40],
    [40, 120, 200],
    [40, 160, 80],
    [230, 160, 30],
    [130, 60, 180],
    [30, 30, 30],
    [200, 60, 140],
    [60, 170, 170],
];

/// 3-color palettes for the style family.
pub const STYLE_PALETTES: [[Color; 3]; 8] = [
    [[180, 30, 40], [240, 200, 60], [40, 40, 60]],
    [[30, 90, 160], [220, 230, 240], [150, 190, 220]],
    [[40, 120, 60], [200, 220, 150], [90, 60, 30]],
    [[240, 140, 50], [120, 40, 100], [250, 230, 200]],
    [[20, 20, 30], [230, 80, 90], [230, 230, 230]],
    [[100, 180, 170], [240, 110, 80], [250, 240, 220]],
    [[60, 40, 140], [250, 200, 40], [200, 60, 90]],
    [[130, 130, 120], [220, 210, 190], [50, 60, 50]],
];

/// One decorrelating scramble so nearby (seed, split, index) tuples give
/// unrelated streams.
fn image_rng(seed: u64, split: u64, index: u64) -> ChaCha12Rng {
    let mut z = seed ^ split.wrapping_shl(40) ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

/// Flat [0,1] canvas addressed as (x, y, color).
struct Canvas {
    px: Vec<Color>,
}

impl Canvas {
    fn filled(color: Color) -> Self {
        Canvas {
            px: vec![color; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    fn set(&mut self, x: usize, y: usize, color: Color) {
        self.px[y * IMAGE_SIZE + x] = color;
    }

    fn into_tensor(self) -> Tensor {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = vec![0.0f32; 3 * n];
        for (i, c) in self.px.iter().enumerate() {
            for ch in 0..3 {
                data[ch * n + i] = c[ch] as f32 / 255.0;
            }
        }
        Tensor::from_raw(vec![3, IMAGE_SIZE, IMAGE_SIZE], data)
    }
}

fn disc(canvas: &mut Canvas, cx: i32, cy: i32, r: i32, color: Color) {
    for y in (cy - r).max(0)..(cy + r + 1).min(IMAGE_SIZE as i32) {
        for x in (cx - r).max(0)..(cx + r + 1).min(IMAGE_SIZE as i32) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                canvas.set(x as usize, y as usize, color);
            }
        }
    }
}

fn rect(canvas: &mut Canvas, x0: usize, y0: usize, x1: usize, y1: usize, color: Color) {
    for y in y0..y1.min(IMAGE_SIZE) {
        for x in x0..x1.min(IMAGE_SIZE) {
            canvas.set(x, y, color);
        }
    }
}

fn triangle(canvas: &mut Canvas, v: [(i32, i32); 3], color: Color) {
    let cross = |o: (i32, i32), a: (i32, i32), b: (i32, i32)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let xs = v.iter().map(|p| p.0);
    let ys = v.iter().map(|p| p.1);
    let (x0, x1) = (xs.clone().min().unwrap().max(0), xs.max().unwrap().min(63));
    let (y0, y1) = (ys.clone().min().unwrap().max(0), ys.max().unwrap().min(63));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x, y);
            let d0 = cross(v[0], v[1], p);
            let d1 = cross(v[1], v[2], p);
            let d2 = cross(v[2], v[0], p);
            let has_neg = d0 < 0 || d1 < 0 || d2 < 0;
            let has_pos = d0 > 0 || d1 > 0 || d2 > 0;
            if !(has_neg && has_pos) {
                canvas.set(x as usize, y as usize, color);
            }
        }
    }
}

fn content_image(rng: &mut ChaCha12Rng) -> Tensor {
    let bg = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
    let mut canvas = Canvas::filled(bg);
    let shapes = rng.gen_range(2..=4);
    for _ in 0..shapes {
        let color = SHAPE_COLORS[rng.gen_range(0..SHAPE_COLORS.len())];
        match rng.gen_range(0..3) {
            0 => {
                let r = rng.gen_range(5..=15);
                let cx = rng.gen_range(r..IMAGE_SIZE as i32 - r);
                let cy = rng.gen_range(r..IMAGE_SIZE as i32 - r);
                disc(&mut canvas, cx, cy, r, color);
            }
            1 => {
                let w = rng.gen_range(10..=28);
                let h = rng.gen_range(10..=28);
                let x0 = rng.gen_range(0..IMAGE_SIZE - w);
                let y0 = rng.gen_range(0..IMAGE_SIZE - h);
                rect(&mut canvas, x0, y0, x0 + w, y0 + h, color);
            }
            _ => {
                // Re-draw until the triangle is visibly non-degenerate.
                loop {
                    let v: [(i32, i32); 3] = [
                        (rng.gen_range(2..62), rng.gen_range(2..62)),
                        (rng.gen_range(2..62), rng.gen_range(2..62)),
                        (rng.gen_range(2..62), rng.gen_range(2..62)),
                    ];
                    let area2 = ((v[1].0 - v[0].0) * (v[2].1 - v[0].1)
                        - (v[1].1 - v[0].1) * (v[2].0 - v[0].0))
                        .abs();
                    if area2 >= 160 {
                        triangle(&mut canvas, v, color);
                        break;
                    }
                }
            }
        }
    }
    canvas.into_tensor()
}

fn style_image(rng: &mut ChaCha12Rng) -> (Tensor, [Color; 3]) {
    let palette = STYLE_PALETTES[rng.gen_range(0..STYLE_PALETTES.len())];
    let mut canvas = Canvas::filled(palette[0]);
    match rng.gen_range(0..4) {
        0 => {
            // Stripes along one of four directions.
            let (a, b) = [(1i64, 0i64), (0, 1), (1, 1), (1, -1)][rng.gen_range(0..4)];
            let period = *[4i64, 6, 8, 12, 16].get(rng.gen_range(0..5)).unwrap();
            let offset = rng.gen_range(0..period);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let band = (a * x as i64 + b * y as i64 + offset).div_euclid(period);
                    canvas.set(x, y, palette[band.rem_euclid(3) as usize]);
                }
            }
        }
        1 => {
            // Three-color checkerboard.
            let cell = *[4usize, 8, 16].get(rng.gen_range(0..3)).unwrap();
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    canvas.set(x, y, palette[(x / cell + y / cell) % 3]);
                }
            }
        }
        2 => {
            // Noise grain: independent palette draw per pixel.
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    canvas.set(x, y, palette[rng.gen_range(0..3)]);
                }
            }
        }
        _ => {
            // Stippling: dots of the two accent colors over the base.
            let dots = rng.gen_range(80..=200);
            for _ in 0..dots {
                let color = palette[rng.gen_range(1..3)];
                let r = rng.gen_range(1..=2);
                let cx = rng.gen_range(0..IMAGE_SIZE as i32);
                let cy = rng.gen_range(0..IMAGE_SIZE as i32);
                disc(&mut canvas, cx, cy, r, color);
            }
        }
    }
    (canvas.into_tensor(), palette)
}

const SPLIT_CONTENT_TRAIN: u64 = 0;
const SPLIT_CONTENT_VAL: u64 = 1;
const SPLIT_STYLE_TRAIN: u64 = 2;
const SPLIT_STYLE_VAL: u64 = 3;

/// Generates every split in memory, deterministically for a given
/// `ProceduralSpec`.
pub fn generate_dataset(spec: &ProceduralSpec) -> Dataset {
    let content = |split, n| {
        (0..n as u64)
            .map(|i| content_image(&mut image_rng(spec.seed, split, i)))
            .collect::<Vec<_>>()
    };
    let style = |split, n| {
        (0..n as u64)
            .map(|i| style_image(&mut image_rng(spec.seed, split, i)).0)
            .collect::<Vec<_>>()
    };
    Dataset {
        content_train: content(SPLIT_CONTENT_TRAIN, spec.content_train),
        content_val: content(SPLIT_CONTENT_VAL, spec.content_val),
        style_train: style(SPLIT_STYLE_TRAIN, spec.style_train),
        style_val: style(SPLIT_STYLE_VAL, spec.style_val),
    }
}

/// Writes the dataset as PNG files plus a `manifest.json` split listing:
/// `content/{train,val}/NNN.png` and `style/{train,val}/NNN.png`.
pub fn write_dataset(
    dataset: &Dataset,
    spec: &ProceduralSpec,
    dir: &Path,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        seed: spec.seed,
        resolution: IMAGE_SIZE,
        content_train: Vec::new(),
        content_val: Vec::new(),
        style_train: Vec::new(),
        style_val: Vec::new(),
    };
    let splits: [(&str, &[Tensor], &mut Vec<String>); 4] = [
        (
            "content/train",
            &dataset.content_train,
            &mut manifest.content_train,
        ),
        (
            "content/val",
            &dataset.content_val,
            &mut manifest.content_val,
        ),
        (
            "style/train",
            &dataset.style_train,
            &mut manifest.style_train,
        ),
        ("style/val", &dataset.style_val, &mut manifest.style_val),
    ];
    for (sub, images, names) in splits {
        let split_dir = dir.join(sub);
        fs::create_dir_all(&split_dir)?;
        for (i, img) in images.iter().enumerate() {
            let rel = format!("{sub}/{i:03}.png");
            save_image(&dir.join(&rel), img)?;
            names.push(rel);
        }
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
