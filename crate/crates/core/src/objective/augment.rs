use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::synth::CameraStyles;

/// `k` augmented copies of a raw feature captured at `camera`.
///
/// Each copy is re-rendered in the style of another camera (distinct
/// cameras while they last) and perturbed by Gaussian noise with expected
/// norm `strength`. With a single camera only the noise is applied.
pub fn augment(
    x: &[f64],
    camera: usize,
    k: usize,
    strength: f64,
    seed: u64,
    styles: &CameraStyles,
) -> Vec<Vec<f64>> {
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut others: Vec<usize> = (0..styles.len()).filter(|&c| c != camera).collect();
    others.shuffle(&mut rng);
    let noise_scale = strength / (x.len() as f64).sqrt();
    (0..k)
        .map(|j| {
            let mut y = match others.get(j % others.len().max(1)) {
                Some(&to) => styles.transfer(x, camera, to),
                None => x.to_vec(),
            };
            if noise_scale > 0.0 {
                for v in &mut y {
                    *v += rng.sample::<f64, _>(StandardNormal) * noise_scale;
                }
            }
            y
        })
        .collect()
}
