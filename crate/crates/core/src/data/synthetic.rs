//! Generator for a stand-in corpus in the CIFAR-10 binary layout.
//!
//! Every class gets a smooth colour template; each image is its class
//! template under a random circular shift, a random brightness offset and
//! per-pixel Gaussian noise, quantized to bytes. Labels are exactly
//! balanced within every file. Useful for exercising the full pipeline
//! where the real dataset cannot be fetched.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_batch_file, CifarRecord, NUM_CLASSES, PIXELS, PLANE, RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub records_per_file: usize,
    /// Template contrast in pixel units.
    pub amplitude: f64,
    /// Per-pixel noise standard deviation in pixel units.
    pub noise: f64,
    /// Maximum circular shift in pixels along each axis.
    pub max_shift: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 3407, records_per_file: RECORDS_PER_FILE, amplitude: 55.0, noise: 45.0, max_shift: 3 }
    }
}

fn templates(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..NUM_CLASSES)
        .map(|_| {
            let mut t = vec![0.0; PIXELS];
            for _ in 0..3 {
                let fx = rng.random_range(1..=3) as f64;
                let fy = rng.random_range(1..=3) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let colour: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                for (c, &w) in colour.iter().enumerate() {
                    for y in 0..32 {
                        for x in 0..32 {
                            let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / 32.0 + phase;
                            t[c * PLANE + y * 32 + x] += w * arg.cos();
                        }
                    }
                }
            }
            let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            t.iter_mut().for_each(|v| *v /= peak);
            t
        })
        .collect()
}

fn render(template: &[f64], spec: &SyntheticSpec, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
    let dx = rng.random_range(-spec.max_shift..=spec.max_shift);
    let dy = rng.random_range(-spec.max_shift..=spec.max_shift);
    let brightness = rng.random_range(-25.0..25.0);
    let mut pixels = vec![0u8; PIXELS];
    for c in 0..3 {
        for y in 0..32i64 {
            for x in 0..32i64 {
                let sy = (y + dy).rem_euclid(32) as usize;
                let sx = (x + dx).rem_euclid(32) as usize;
                let v = 128.0 + brightness + spec.amplitude * template[c * PLANE + sy * 32 + sx] + noise.sample(rng);
                pixels[c * PLANE + y as usize * 32 + x as usize] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    pixels
}

/// Records of one file with balanced labels in shuffled order.
fn file_records(templates: &[Vec<f64>], spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<CifarRecord> {
    let noise = Normal::new(0.0, spec.noise).expect("non-negative noise");
    let mut labels: Vec<u8> = (0..spec.records_per_file).map(|i| (i % NUM_CLASSES) as u8).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|label| CifarRecord { label, pixels: render(&templates[label as usize], spec, rng, &noise) })
        .collect()
}

/// Writes `data_batch_1..5.bin` and `test_batch.bin` into `dir`.
pub fn write_synthetic_cifar(dir: &Path, spec: &SyntheticSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = templates(&mut rng);
    for name in TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)) {
        write_batch_file(&dir.join(name), &file_records(&templates, spec, &mut rng))?;
    }
    Ok(())
}
