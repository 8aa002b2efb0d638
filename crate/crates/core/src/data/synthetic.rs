//! Synthetic stand-in for the Omniglot image tree.
//!
//! Writes `images_background/` and `images_evaluation/` with the standard
//! alphabet names and character counts, 20 `105 x 105` PNGs per character.
//! Every character is a fixed set of pen strokes (cubic Bezier curves,
//! partly shared within an alphabet); every drawer renders it with its own
//! affine jitter, control-point noise and pen width. The output is fully
//! determined by the seed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::omniglot::{BACKGROUND_ALPHABETS, EVALUATION_ALPHABETS, EXAMPLES_PER_CLASS, RAW_SIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub background: Vec<(String, usize)>,
    pub evaluation: Vec<(String, usize)>,
    pub examples_per_class: usize,
}

impl FixtureSpec {
    /// The full standard layout: 964 training and 659 test characters.
    pub fn standard(seed: u64) -> Self {
        let own = |t: &[(&str, usize)]| t.iter().map(|(a, n)| (a.to_string(), *n)).collect();
        FixtureSpec {
            seed,
            background: own(&BACKGROUND_ALPHABETS),
            evaluation: own(&EVALUATION_ALPHABETS),
            examples_per_class: EXAMPLES_PER_CLASS,
        }
    }

    /// The standard alphabets with at most `max_chars` characters each.
    pub fn truncated(seed: u64, max_chars: usize) -> Self {
        let mut s = Self::standard(seed);
        for (_, n) in s.background.iter_mut().chain(s.evaluation.iter_mut()) {
            *n = (*n).min(max_chars);
        }
        s
    }
}

type Point = (f64, f64);

#[derive(Clone, Debug)]
struct Stroke([Point; 4]);

#[derive(Clone, Debug)]
struct Glyph {
    strokes: Vec<Stroke>,
    width: f64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parts.iter().fold(0u64, |acc, &p| mix(acc ^ p)))
}

fn random_stroke(rng: &mut ChaCha8Rng) -> Stroke {
    let lo = 24.0;
    let hi = RAW_SIDE as f64 - 24.0;
    let start = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let len = rng.random_range(18.0..48.0);
    let angle = rng.random_range(0.0..2.0 * PI);
    let end = (
        (start.0 + len * angle.cos()).clamp(lo - 8.0, hi + 8.0),
        (start.1 + len * angle.sin()).clamp(lo - 8.0, hi + 8.0),
    );
    let bend = |rng: &mut ChaCha8Rng, t: f64| {
        (
            start.0 + t * (end.0 - start.0) + rng.random_range(-16.0..16.0),
            start.1 + t * (end.1 - start.1) + rng.random_range(-16.0..16.0),
        )
    };
    let c1 = bend(rng, 1.0 / 3.0);
    let c2 = bend(rng, 2.0 / 3.0);
    Stroke([start, c1, c2, end])
}

fn shifted(s: &Stroke, dx: f64, dy: f64) -> Stroke {
    Stroke(s.0.map(|(x, y)| (x + dx, y + dy)))
}

fn alphabet_glyphs(seed: u64, split: u64, alphabet: usize, n: usize) -> Vec<Glyph> {
    let mut rng = rng_for(&[seed, split, alphabet as u64]);
    let primitives: Vec<Stroke> = (0..5).map(|_| random_stroke(&mut rng)).collect();
    let width = rng.random_range(2.5..4.0);
    (0..n)
        .map(|c| {
            let mut rng = rng_for(&[seed, split, alphabet as u64, c as u64 + 1]);
            let count = rng.random_range(1..=4);
            let strokes = (0..count)
                .map(|_| {
                    if rng.random_bool(0.7) {
                        let p = &primitives[rng.random_range(0..primitives.len())];
                        shifted(p, rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))
                    } else {
                        random_stroke(&mut rng)
                    }
                })
                .collect();
            Glyph { strokes, width }
        })
        .collect()
}

fn bezier(s: &Stroke, t: f64) -> Point {
    let u = 1.0 - t;
    let [a, b, c, d] = s.0;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    (
        w[0] * a.0 + w[1] * b.0 + w[2] * c.0 + w[3] * d.0,
        w[0] * a.1 + w[1] * b.1 + w[2] * c.1 + w[3] * d.1,
    )
}

fn stamp(canvas: &mut [u8], (cx, cy): Point, r: f64) {
    let n = RAW_SIDE as i64;
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(n - 1) {
        for x in x0.max(0)..=x1.min(n - 1) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                canvas[(y * n + x) as usize] = 0;
            }
        }
    }
}

/// One drawer's rendition of a glyph: dark strokes on a white page.
fn render(glyph: &Glyph, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let angle = rng.random_range(-12.0f64..12.0).to_radians();
    let scale = rng.random_range(0.85..1.15);
    let shear = rng.random_range(-0.15..0.15);
    let (tx, ty) = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
    let width = glyph.width * rng.random_range(0.8..1.25);
    let noise = Normal::new(0.0, 5.0).expect("valid std");
    let c = RAW_SIDE as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let warp = |(x, y): Point| {
        let (x, y) = (x - c, y - c);
        let x = x + shear * y;
        let (x, y) = (scale * (cos * x - sin * y), scale * (sin * x + cos * y));
        (x + c + tx, y + c + ty)
    };

    let mut canvas = vec![255u8; RAW_SIDE * RAW_SIDE];
    for stroke in &glyph.strokes {
        let jittered = Stroke(stroke.0.map(|(x, y)| warp((x + noise.sample(rng), y + noise.sample(rng)))));
        let [a, b, c2, d] = jittered.0;
        let hull = [(a, b), (b, c2), (c2, d)].iter().map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).sum::<f64>();
        let steps = (hull / 0.5).ceil().max(2.0) as usize;
        for i in 0..=steps {
            stamp(&mut canvas, bezier(&jittered, i as f64 / steps as f64), width / 2.0);
        }
    }
    canvas
}

/// Counts written by [`write_fixture`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixtureSummary {
    pub train_classes: usize,
    pub test_classes: usize,
    pub images: usize,
}

/// Writes the fixture tree under `root`, which is created if missing.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<FixtureSummary> {
    let mut summary = FixtureSummary { train_classes: 0, test_classes: 0, images: 0 };
    for (split, (dir, alphabets)) in
        [("images_background", &spec.background), ("images_evaluation", &spec.evaluation)].into_iter().enumerate()
    {
        let mut global = 0usize;
        for (a, (alphabet, n_chars)) in alphabets.iter().enumerate() {
            for (c, glyph) in alphabet_glyphs(spec.seed, split as u64, a, *n_chars).iter().enumerate() {
                global += 1;
                let char_dir = root.join(dir).join(alphabet).join(format!("character{:02}", c + 1));
                fs::create_dir_all(&char_dir).map_err(|e| Error::io(&char_dir, e))?;
                for drawer in 0..spec.examples_per_class {
                    let mut rng = rng_for(&[spec.seed, split as u64, a as u64, c as u64 + 1, drawer as u64 + 1000]);
                    let pixels = render(glyph, &mut rng);
                    let path = char_dir.join(format!("{global:04}_{:02}.png", drawer + 1));
                    image::GrayImage::from_raw(RAW_SIDE as u32, RAW_SIDE as u32, pixels)
                        .expect("buffer matches dimensions")
                        .save(&path)
                        .map_err(|e| Error::Image { path: path.clone(), source: e })?;
                    summary.images += 1;
                }
                if split == 0 {
                    summary.train_classes += 1;
                } else {
                    summary.test_classes += 1;
                }
            }
        }
    }
    Ok(summary)
}
