//! Class-conditional stroke images.
//!
//! Every class owns a prototype built from a few blurred line strokes. A sample
//! is its class prototype, shifted by a few pixels, rescaled in contrast, with
//! additive Gaussian pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Images are `side x side`, single channel.
    pub side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub strokes_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    /// Maximum translation in pixels along each axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            side: 12,
            train_per_class: 40,
            test_per_class: 40,
            strokes_per_class: 3,
            noise: 0.35,
            max_shift: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::config("synthetic data needs between 2 and 65535 classes"));
        }
        if !(4..=16).contains(&self.side) {
            return Err(Error::config("synthetic image side must be in [4, 16]"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.strokes_per_class == 0 {
            return Err(Error::config("synthetic counts must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || 2 * self.max_shift >= self.side {
            return Err(Error::config("invalid synthetic noise or shift"));
        }
        Ok(())
    }

    fn prototype(&self, class: usize) -> Vec<f32> {
        let side = self.side as f32;
        let mut rng = rng::stream(self.seed, "synthetic-prototype", class as u64);
        let mut img = vec![0.0f32; self.side * self.side];
        for _ in 0..self.strokes_per_class {
            let cx = rng.gen_range(0.2 * side..0.8 * side);
            let cy = rng.gen_range(0.2 * side..0.8 * side);
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let half = rng.gen_range(0.15 * side..0.3 * side);
            let (dx, dy) = (angle.cos(), angle.sin());
            for y in 0..self.side {
                for x in 0..self.side {
                    let (px, py) = (x as f32 - cx, y as f32 - cy);
                    let t = (px * dx + py * dy).clamp(-half, half);
                    let (ex, ey) = (px - t * dx, py - t * dy);
                    let v = (-(ex * ex + ey * ey) / (2.0 * 0.6 * 0.6)).exp();
                    let p = &mut img[y * self.side + x];
                    *p = p.max(v);
                }
            }
        }
        img
    }

    /// Generates the train and test splits.
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        self.validate()?;
        let prototypes: Vec<Vec<f32>> = (0..self.num_classes).map(|k| self.prototype(k)).collect();
        let make = |split: Split, per_class: usize| -> Result<LabeledDataset> {
            let tag = match split {
                Split::Train => "synthetic-train",
                Split::Test => "synthetic-test",
            };
            let mut rng = rng::stream(self.seed, tag, 0);
            let noise = Normal::new(0.0f32, self.noise.max(f32::MIN_POSITIVE)).expect("finite noise");
            let shift = self.max_shift as i64;
            let mut features = Vec::with_capacity(per_class * self.num_classes * self.side * self.side);
            let mut labels = Vec::with_capacity(per_class * self.num_classes);
            // interleave classes so any prefix is roughly balanced
            for _ in 0..per_class {
                for (class, proto) in prototypes.iter().enumerate() {
                    let sx = rng.gen_range(-shift..=shift);
                    let sy = rng.gen_range(-shift..=shift);
                    let contrast = rng.gen_range(0.7f32..1.3);
                    for y in 0..self.side as i64 {
                        for x in 0..self.side as i64 {
                            let (ux, uy) = (x - sx, y - sy);
                            let base = if (0..self.side as i64).contains(&ux) && (0..self.side as i64).contains(&uy) {
                                proto[(uy as usize) * self.side + ux as usize]
                            } else {
                                0.0
                            };
                            let n = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            features.push(contrast * base + n);
                        }
                    }
                    labels.push(class);
                }
            }
            LabeledDataset::new(self.num_classes, vec![1, self.side, self.side], features, labels, split)
        };
        Ok((make(Split::Train, self.train_per_class)?, make(Split::Test, self.test_per_class)?))
    }
}
