//! Synthetic 27-class texture dataset. Each class is a combination of three
//! factors: hue (3 base colors), stripe orientation (3), and checker flavor
//! (3), so class = 9*hue + 3*stripe + checker. Samples are generated on the
//! fly from a seed and an index, which keeps splits reproducible without
//! storing pixels.

use crate::tensor::Tensor;
use crate::train::BatchSource;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 27;
pub const STRIPE_PERIOD: usize = 16;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { side: 64, noise_sigma: 0.05, seed: 0 }
    }
}

/// splitmix64, used to derive one independent stream per sample.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index as u64))
}

const HUES: [[f64; 3]; 3] = [[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8]];

/// Deterministically render the image for (spec, index, class).
/// Layout is [side, side, 3] row major, values roughly in [0, 1].
pub fn render(spec: &SyntheticSpec, index: usize, class: usize) -> Vec<f64> {
    assert!(class < NUM_CLASSES);
    let hue = class / 9;
    let stripe = (class / 3) % 3;
    let checker = class % 3;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let base = HUES[hue];
    // random phases keep the factors from being a fixed pixel template
    let stripe_phase = rng.gen_range(0..STRIPE_PERIOD);
    let checker_period = 2 + checker; // 2, 3 or 4 pixels
    let checker_phase_y = rng.gen_range(0..checker_period);
    let checker_phase_x = rng.gen_range(0..checker_period);
    let checker_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let s = spec.side;
    let mut img = vec![0.0; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            // stripe orientations: horizontal, vertical, diagonal
            let coord = match stripe {
                0 => y,
                1 => x,
                _ => y + x,
            };
            let stripe_on = ((coord + stripe_phase) / (STRIPE_PERIOD / 2)) % 2 == 0;
            let stripe_v = if stripe_on { 0.15 } else { -0.15 };
            let cy = (y + checker_phase_y) / checker_period;
            let cx = (x + checker_phase_x) / checker_period;
            let check_v = checker_sign * if (cy + cx) % 2 == 0 { 0.1 } else { -0.1 };
            for ch in 0..3 {
                let noise = rng.gen_range(-1.0..1.0) * spec.noise_sigma;
                img[(y * s + x) * 3 + ch] = (base[ch] + stripe_v + check_v + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// A fixed-length synthetic split. Labels are assigned up front (stratified
/// round-robin or seeded-uniform); pixels are rendered lazily per batch.
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub labels: Vec<usize>,
    /// Offset added to the per-sample index so different splits of the same
    /// seed never share render streams.
    pub index_base: usize,
}

impl SyntheticDataset {
    /// Round-robin over the 27 classes: sizes divisible by 27 are exactly
    /// balanced.
    pub fn stratified(spec: SyntheticSpec, len: usize, index_base: usize) -> SyntheticDataset {
        let labels = (0..len).map(|i| i % NUM_CLASSES).collect();
        SyntheticDataset { spec, labels, index_base }
    }

    /// Classes drawn uniformly at random from the dataset seed.
    pub fn uniform(spec: SyntheticSpec, len: usize, index_base: usize) -> SyntheticDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xdead_beef);
        let labels = (0..len).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        SyntheticDataset { spec, labels, index_base }
    }

    pub fn render_at(&self, i: usize) -> Vec<f64> {
        render(&self.spec, self.index_base + i, self.labels[i])
    }
}

impl BatchSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.spec.side;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.render_at(i));
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(&[indices.len(), s, s, 3], data), labels)
    }
}
