//! Synthetic gesture videos: a static torso with one or two hand sprites
//! moving along a class-specific trajectory.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionPreset {
    /// Slow strokes with jittery speed and small positional wobble.
    A,
    /// Fast strokes near the centre of the frame.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// `[T, H, W]`.
    pub resolution: [usize; 3],
    pub channels: usize,
    pub sprite_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Relative per-sample speed jitter.
    pub speed_jitter: f64,
    pub preset: MotionPreset,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn preset_a(n_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            n_classes,
            samples_per_class,
            resolution: [16, 32, 32],
            channels: 3,
            sprite_size: 4,
            noise: 0.0,
            speed_jitter: 0.2,
            preset: MotionPreset::A,
            seed,
        }
    }

    pub fn preset_b(n_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            speed_jitter: 0.1,
            preset: MotionPreset::B,
            ..Self::preset_a(n_classes, samples_per_class, seed)
        }
    }

    pub fn frame_len(&self) -> usize {
        self.resolution[1] * self.resolution[2] * self.channels
    }

    pub fn video_len(&self) -> usize {
        self.resolution[0] * self.frame_len()
    }

    fn validate(&self) -> Result<()> {
        let [t, h, w] = self.resolution;
        if self.n_classes == 0 || self.samples_per_class == 0 || t == 0 {
            return Err(Error::Spec("dataset needs classes, samples and frames".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Spec(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.sprite_size == 0 || self.sprite_size * 4 > h.min(w) {
            return Err(Error::Spec(format!("sprite size {} does not fit a {h}x{w} frame", self.sprite_size)));
        }
        if !(0.0..1.0).contains(&self.speed_jitter) || self.noise < 0.0 {
            return Err(Error::Spec("speed jitter must lie in [0, 1) and noise be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    /// Row-major `[T, H, W, C]` in `[-0.5, 0.5]`.
    pub video: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Sprite centre in normalised coordinates `(x, y)` at progress `s`.
fn trajectory(class: usize, s: f64, preset: MotionPreset) -> (f64, f64) {
    // strokes run back and forth once progress passes 1
    let s = if s.rem_euclid(2.0) <= 1.0 { s.rem_euclid(2.0) } else { 2.0 - s.rem_euclid(2.0) };
    let family = class % 3;
    let variant = (class / 3) as f64;
    let (cx, cy, scale) = match preset {
        MotionPreset::A => (0.5, 0.5, 1.0),
        MotionPreset::B => (0.5, 0.5, 0.6),
    };
    let a0 = 0.9 * variant + 0.3 * family as f64;
    let dir = if (class / 3).is_multiple_of(2) { 1.0 } else { -1.0 };
    match family {
        0 => {
            let r = scale * (0.2 + 0.04 * (variant % 3.0));
            let a = a0 + dir * PI * s;
            (cx + r * a.cos(), cy + r * a.sin())
        }
        1 => {
            let amp = scale * (0.12 + 0.03 * (variant % 2.0));
            let x0 = cx - scale * 0.28 * a0.cos().signum();
            let x = x0 + scale * 0.56 * s * a0.cos().signum();
            let teeth = 2.0 + (variant % 2.0);
            let phase = (s * teeth).fract();
            let tri = if phase < 0.5 { 4.0 * phase - 1.0 } else { 3.0 - 4.0 * phase };
            (x, cy - 0.1 * scale * dir + amp * tri)
        }
        _ => {
            let r = scale * (0.15 + 0.05 * (variant % 2.0));
            let a = a0 + dir * 2.0 * PI * s;
            (cx + r * a.cos(), cy - 0.05 + r * a.sin())
        }
    }
}

fn hands(class: usize) -> usize {
    1 + (class / 2) % 2
}

fn hand_color(class: usize, hand: usize) -> [f64; 3] {
    let base = [[0.95, 0.8, 0.6], [0.9, 0.6, 0.45]][hand % 2];
    let tint = 0.1 * ((class % 4) as f64) / 3.0;
    [base[0], base[1] - tint, base[2] + tint]
}

/// Top-left pixel of a sprite centred at normalised `(x, y)`.
fn sprite_origin(pos: (f64, f64), spec: &DatasetSpec) -> Result<(usize, usize)> {
    let [_, h, w] = spec.resolution;
    let s = spec.sprite_size as f64;
    let px = (pos.0 * w as f64 - s / 2.0).round();
    let py = (pos.1 * h as f64 - s / 2.0).round();
    if px < 0.0 || py < 0.0 || px + s > w as f64 || py + s > h as f64 {
        return Err(Error::Spec(format!("sprite at ({px}, {py}) leaves the {h}x{w} frame")));
    }
    Ok((px as usize, py as usize))
}

fn render_sample(spec: &DatasetSpec, label: usize, id: usize) -> Result<Sample> {
    let [t, h, w] = spec.resolution;
    let c = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id as u64 + 1)));
    let speed = match spec.preset {
        MotionPreset::A => 1.0,
        MotionPreset::B => 1.8,
    } * (1.0 + rng.random_range(-spec.speed_jitter..=spec.speed_jitter));
    let wobble = match spec.preset {
        MotionPreset::A => 0.012,
        MotionPreset::B => 0.0,
    };
    let mut frame_bg = vec![0.15f64; h * w * 3];
    // torso: a centred rectangle in the lower half
    let (tx0, tx1) = (w * 3 / 10, w * 7 / 10);
    let (ty0, ty1) = (h * 9 / 20, h);
    for y in ty0..ty1 {
        for x in tx0..tx1 {
            frame_bg[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[0.35, 0.4, 0.55]);
        }
    }
    let noise = rand_distr::Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let mut video = Vec::with_capacity(spec.video_len());
    let denom = (t.max(2) - 1) as f64;
    for f in 0..t {
        let mut frame = frame_bg.clone();
        let progress = speed * f as f64 / denom;
        for hand in 0..hands(label) {
            let mut pos = trajectory(label, progress, spec.preset);
            if hand == 1 {
                pos.0 = 1.0 - pos.0;
            }
            if f > 0 && wobble > 0.0 {
                pos.0 += rng.random_range(-wobble..=wobble);
                pos.1 += rng.random_range(-wobble..=wobble);
            }
            let (px, py) = sprite_origin(pos, spec)?;
            let col = hand_color(label, hand);
            for y in py..py + spec.sprite_size {
                for x in px..px + spec.sprite_size {
                    frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&col);
                }
            }
        }
        for px in frame.chunks(3) {
            let vals: &[f64] = if c == 3 { px } else { &px[..1] };
            for &v in vals {
                let n = if spec.noise > 0.0 { rng.sample(noise) } else { 0.0 };
                video.push(((v - 0.5) + n).clamp(-0.5, 0.5) as f32);
            }
        }
    }
    Ok(Sample { id, label, video })
}

/// Deterministic dataset: same spec (including seed) gives identical bytes.
/// Samples are ordered class-major.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_classes * spec.samples_per_class;
    let samples = (0..n)
        .into_par_iter()
        .map(|id| render_sample(spec, id / spec.samples_per_class, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B, T, H, W, C]` batch of the given sample positions.
    pub fn batch<F: Float>(&self, positions: &[usize]) -> Result<Tensor<F>> {
        let [t, h, w] = self.spec.resolution;
        let mut data = Vec::with_capacity(positions.len() * self.spec.video_len());
        for &p in positions {
            let s = self.samples.get(p).ok_or(Error::Index {
                op: "dataset batch",
                index: p,
                size: self.samples.len(),
            })?;
            data.extend(s.video.iter().map(|&v| F::of(v as f64)));
        }
        Tensor::new(data, &[positions.len(), t, h, w, self.spec.channels])
    }

    pub fn labels(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.samples[p].label).collect()
    }

    /// Frame 0 of a sample as `[H, W, C]`.
    pub fn first_frame(&self, position: usize) -> &[f32] {
        &self.samples[position].video[..self.spec.frame_len()]
    }

    pub fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: positions.iter().map(|&p| self.samples[p].clone()).collect(),
        }
    }
}

/// Stratified split: per class, `round(fraction · n)` samples (at least one
/// on each side) go to the training part.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Spec(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.spec.n_classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == class).collect();
        if members.len() < 2 {
            return Err(Error::Spec(format!("class {class} has fewer than 2 samples")));
        }
        members.shuffle(&mut rng);
        let n_train = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        let (a, b) = members.split_at(n_train);
        train.extend_from_slice(a);
        test.extend_from_slice(b);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// One sample per class for the first `n_classes` classes of `spec`.
pub fn memorization_set(n_classes: usize, seed: u64) -> Result<Dataset> {
    generate_dataset(&DatasetSpec::preset_a(n_classes, 1, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let spec = DatasetSpec::preset_a(4, 2, 9);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.iter().all(|s| s.video.iter().all(|v| (-0.5..=0.5).contains(v))));
        assert_eq!(a.samples[0].video.len(), 16 * 32 * 32 * 3);
    }

    #[test]
    fn first_frame_is_canonical_per_class() {
        for spec in [DatasetSpec::preset_a(6, 3, 1), DatasetSpec::preset_b(6, 3, 1)] {
            let d = generate_dataset(&spec).unwrap();
            for class in 0..6 {
                let first = d.first_frame(class * 3);
                for j in 1..3 {
                    assert_eq!(first, d.first_frame(class * 3 + j));
                }
            }
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = generate_dataset(&DatasetSpec {
            resolution: [2, 16, 16],
            ..DatasetSpec::preset_a(3, 20, 5)
        })
        .unwrap();
        let (tr, te) = split(&d, 0.5, 3).unwrap();
        for c in 0..3 {
            assert_eq!(tr.samples.iter().filter(|s| s.label == c).count(), 10);
            assert_eq!(te.samples.iter().filter(|s| s.label == c).count(), 10);
        }
        let mut ids: Vec<usize> = tr.samples.iter().chain(&te.samples).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
        let (tr2, _) = split(&d, 0.5, 3).unwrap();
        assert_eq!(tr.samples, tr2.samples);
        let single = generate_dataset(&DatasetSpec::preset_a(2, 1, 0)).unwrap();
        assert!(split(&single, 0.5, 0).is_err());
    }

    #[test]
    fn oversized_sprite_is_rejected() {
        let mut spec = DatasetSpec::preset_a(2, 1, 0);
        spec.sprite_size = 12;
        assert!(matches!(generate_dataset(&spec), Err(Error::Spec(_))));
    }
}
