//! Deliberate down-sampling of a fraction of the training images.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::IMAGE_SIDE;
use crate::error::{Error, Result};

use super::dataset::{Dataset, ImageSource};
use super::preprocess::{area_resize, nearest_resize, subtract_mean};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageRule {
    pub fraction: f64,
    pub target_size: usize,
}

/// Rules active for epochs `start_epoch..end_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamagePhase {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub rules: Vec<DamageRule>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageSchedule {
    pub phases: Vec<DamagePhase>,
}

impl DamageSchedule {
    /// The regime used for the best model: 220 clean epochs, then three
    /// damage phases of 100, 20 and 10 epochs.
    pub fn reference() -> Self {
        let rule = |fraction, target_size| DamageRule { fraction, target_size };
        DamageSchedule {
            phases: vec![
                DamagePhase {
                    start_epoch: 220,
                    end_epoch: 320,
                    rules: vec![rule(0.015, 24), rule(0.01, 20), rule(0.005, 16)],
                },
                DamagePhase { start_epoch: 320, end_epoch: 340, rules: vec![rule(0.015, 23), rule(0.01, 17)] },
                DamagePhase { start_epoch: 340, end_epoch: 350, rules: vec![rule(0.01, 23)] },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (i, p) in self.phases.iter().enumerate() {
            if p.start_epoch >= p.end_epoch {
                problems.push(format!("phase {i}: start_epoch {} >= end_epoch {}", p.start_epoch, p.end_epoch));
            }
            let total: f64 = p.rules.iter().map(|r| r.fraction).sum();
            if total > 1.0 + 1e-12 {
                problems.push(format!("phase {i}: fractions sum to {total} > 1"));
            }
            for r in &p.rules {
                if !(0.0..=1.0).contains(&r.fraction) {
                    problems.push(format!("phase {i}: fraction {} outside [0, 1]", r.fraction));
                }
                if r.target_size == 0 || r.target_size >= IMAGE_SIDE {
                    problems.push(format!("phase {i}: target_size {} must be in 1..{IMAGE_SIDE}", r.target_size));
                }
            }
            for (j, q) in self.phases.iter().enumerate().skip(i + 1) {
                if p.start_epoch < q.end_epoch && q.start_epoch < p.end_epoch {
                    problems.push(format!("phases {i} and {j} overlap"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Index of the phase covering `epoch`, if any.
    pub fn active_phase(&self, epoch: usize) -> Option<usize> {
        self.phases.iter().position(|p| p.start_epoch <= epoch && epoch < p.end_epoch)
    }
}

/// Number of images a fraction selects; fractions are floored.
pub fn damage_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Down-samples a `28 x 28` image to `target x target` by area averaging,
/// blows it back up with nearest-neighbour sampling and re-centres it.
pub fn damage_image(img: &[f32], target: usize) -> Vec<f32> {
    let small = area_resize(img, IMAGE_SIDE, IMAGE_SIDE, target, target);
    let mut out = nearest_resize(&small, target, IMAGE_SIDE);
    subtract_mean(&mut out);
    out
}

/// A dataset with some images replaced by damaged copies. The underlying
/// dataset is shared, not copied.
#[derive(Clone, Debug)]
pub struct DamagedView<'a> {
    pub base: &'a Dataset,
    overrides: HashMap<usize, Vec<f32>>,
    /// `(image index, target size)` for every damaged image, in selection order.
    pub ledger: Vec<(usize, usize)>,
}

impl<'a> DamagedView<'a> {
    pub fn clean(base: &'a Dataset) -> Self {
        DamagedView { base, overrides: HashMap::new(), ledger: Vec::new() }
    }

    pub fn n_damaged(&self) -> usize {
        self.ledger.len()
    }

    /// Copies the view into a standalone dataset with the damage recorded.
    pub fn materialize(&self) -> Dataset {
        let mut out = self.base.clone();
        for &(i, t) in &self.ledger {
            out.image_mut(i).copy_from_slice(&self.overrides[&i]);
            out.damage[i] = Some(t as u32);
        }
        out
    }
}

impl ImageSource for DamagedView<'_> {
    fn n_classes(&self) -> usize {
        self.base.n_classes()
    }

    fn examples_per_class(&self) -> usize {
        self.base.examples_per_class
    }

    fn image(&self, class: usize, example: usize) -> &[f32] {
        let i = class * self.base.examples_per_class + example;
        match self.overrides.get(&i) {
            Some(img) => img,
            None => self.base.image(class, example),
        }
    }
}

/// Damages images according to one phase's rules. The selection is a
/// seeded shuffle of all images, so it is fixed for the phase and the
/// rules never pick the same image twice.
pub fn apply_damage<'a>(base: &'a Dataset, rules: &[DamageRule], seed: u64) -> Result<DamagedView<'a>> {
    let total: f64 = rules.iter().map(|r| r.fraction).sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Config(format!("damage fractions sum to {total} > 1")));
    }
    let n = base.n_images();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut view = DamagedView::clean(base);
    let mut next = 0;
    for rule in rules {
        if rule.target_size == 0 || rule.target_size >= IMAGE_SIDE {
            return Err(Error::Config(format!("target_size {} must be in 1..{IMAGE_SIDE}", rule.target_size)));
        }
        let count = damage_count(rule.fraction, n);
        for &i in &order[next..next + count] {
            let epc = base.examples_per_class;
            let img = damage_image(base.image(i / epc, i % epc), rule.target_size);
            view.overrides.insert(i, img);
            view.ledger.push((i, rule.target_size));
        }
        next += count;
    }
    Ok(view)
}
