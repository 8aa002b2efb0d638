use serde::{Deserialize, Serialize};

use crate::encoder::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    /// Unique across both splits: `alphabet/character@rotation`.
    pub id: String,
    pub alphabet: String,
    pub character: String,
    /// Degrees counter-clockwise: 0, 90, 180 or 270.
    pub rotation: u16,
}

impl ClassInfo {
    pub fn new(alphabet: &str, character: &str, rotation: u16) -> Self {
        ClassInfo {
            id: format!("{alphabet}/{character}@{rotation}"),
            alphabet: alphabet.to_string(),
            character: character.to_string(),
            rotation,
        }
    }
}

/// Anything episodes can be drawn from: a grid of classes by examples.
pub trait ImageSource {
    fn n_classes(&self) -> usize;
    fn examples_per_class(&self) -> usize;
    /// The `IMAGE_PIXELS` values of one preprocessed image.
    fn image(&self, class: usize, example: usize) -> &[f32];

    fn n_images(&self) -> usize {
        self.n_classes() * self.examples_per_class()
    }
}

/// Preprocessed `28 x 28 x 1` images grouped by class.
///
/// Images are stored contiguously, class-major: example `e` of class `c`
/// is image `c * examples_per_class + e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub augmented: bool,
    pub examples_per_class: usize,
    pub classes: Vec<ClassInfo>,
    pub pixels: Vec<f32>,
    /// Per image, the size it was down-sampled to, if damaged.
    pub damage: Vec<Option<u32>>,
}

impl Dataset {
    pub fn new(
        split: Split,
        examples_per_class: usize,
        classes: Vec<ClassInfo>,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let n = classes.len() * examples_per_class;
        if pixels.len() != n * IMAGE_PIXELS {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {n} images of {IMAGE_PIXELS} pixels", pixels.len()),
            ));
        }
        Ok(Dataset { split, augmented: false, examples_per_class, classes, pixels, damage: vec![None; n] })
    }

    pub fn image_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.pixels[index * IMAGE_PIXELS..(index + 1) * IMAGE_PIXELS]
    }

    /// Adds the 90, 180 and 270 degree rotations of every class as new
    /// classes, placed right after their source class.
    pub fn augment_rotations(&self) -> Result<Dataset> {
        if self.augmented || self.classes.iter().any(|c| c.rotation != 0) {
            return Err(Error::Contract("dataset is already rotation-augmented".into()));
        }
        let epc = self.examples_per_class;
        let mut classes = Vec::with_capacity(self.classes.len() * 4);
        let mut pixels = Vec::with_capacity(self.pixels.len() * 4);
        let mut damage = Vec::with_capacity(self.damage.len() * 4);
        for (c, info) in self.classes.iter().enumerate() {
            for quarter in 0..4u16 {
                classes.push(ClassInfo::new(&info.alphabet, &info.character, quarter * 90));
                for e in 0..epc {
                    let mut img = self.image(c, e).to_vec();
                    for _ in 0..quarter {
                        img = rotate90(&img);
                    }
                    pixels.extend_from_slice(&img);
                    damage.push(self.damage[c * epc + e]);
                }
            }
        }
        Ok(Dataset { split: self.split, augmented: true, examples_per_class: epc, classes, pixels, damage })
    }

    /// Copy restricted to the given classes, in the given order.
    pub fn subset(&self, classes: &[usize]) -> Result<Dataset> {
        let epc = self.examples_per_class;
        let mut out_classes = Vec::with_capacity(classes.len());
        let mut pixels = Vec::with_capacity(classes.len() * epc * IMAGE_PIXELS);
        let mut damage = Vec::with_capacity(classes.len() * epc);
        for &c in classes {
            let info = self
                .classes
                .get(c)
                .ok_or_else(|| Error::Index(format!("class {c} out of range for {}", self.classes.len())))?;
            out_classes.push(info.clone());
            let start = c * epc;
            pixels.extend_from_slice(&self.pixels[start * IMAGE_PIXELS..(start + epc) * IMAGE_PIXELS]);
            damage.extend_from_slice(&self.damage[start..start + epc]);
        }
        Ok(Dataset {
            split: self.split,
            augmented: self.augmented,
            examples_per_class: epc,
            classes: out_classes,
            pixels,
            damage,
        })
    }

    pub fn n_base_classes(&self) -> usize {
        self.classes.iter().filter(|c| c.rotation == 0).count()
    }
}

impl ImageSource for Dataset {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn examples_per_class(&self) -> usize {
        self.examples_per_class
    }

    fn image(&self, class: usize, example: usize) -> &[f32] {
        let i = class * self.examples_per_class + example;
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }
}

/// Rotates a square `28 x 28` image by 90 degrees counter-clockwise.
pub fn rotate90(img: &[f32]) -> Vec<f32> {
    let n = IMAGE_SIDE;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = img[x * n + (n - 1 - y)];
        }
    }
    out
}
