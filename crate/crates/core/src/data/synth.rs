//! Synthetic faces whose action units are driven by the expression class.
//!
//! Each sample draws an expression, derives its AU vector from that
//! expression's prototype (bit flips at `label_noise`, then each AU switched on
//! independently at its base rate), and renders a small image where every
//! active AU stamps a fixed signed texture into its own cell of a 4×3 grid,
//! plus Gaussian pixel noise. Labels are then hidden according to the
//! expression-only / AU-only / both fractions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, AuVector, ImageRef, RawImage};
use crate::error::{Error, Result};
use crate::nn::{NUM_AUS, NUM_EXPRESSIONS};

/// Characteristic AU pattern per expression class, in the class order
/// neutral, anger, disgust, fear, happiness, sadness, surprise.
///
/// Rows are at Hamming distance >= 6 from each other (>= 5 from neutral) so
/// the expression stays recoverable from a noisy AU vector.
pub const DEFAULT_PROTOTYPES: [AuVector; NUM_EXPRESSIONS] = [
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1],
    [1, 1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 0],
    [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1],
    [0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 0],
    [1, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 0],
    [0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 1],
];

pub const DEFAULT_AU_BASE_RATES: [f64; NUM_AUS] = [
    0.05, 0.03, 0.04, 0.02, 0.03, 0.05, 0.02, 0.04, 0.03, 0.02, 0.05, 0.03,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub au_base_rates: [f64; NUM_AUS],
    pub emotion_prototypes: [AuVector; NUM_EXPRESSIONS],
    /// Relative frequency of each expression class; uniform by default.
    pub emotion_weights: [f64; NUM_EXPRESSIONS],
    pub label_noise: f64,
    pub frac_expr_only: f64,
    pub frac_au_only: f64,
    pub frac_both: f64,
    pub image_size: usize,
    /// Magnitude, in pixel units, of each AU's stamped texture.
    pub patch_amplitude: f64,
    /// Standard deviation, in pixel units, of the additive Gaussian noise.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 4000,
            seed: 0,
            au_base_rates: DEFAULT_AU_BASE_RATES,
            emotion_prototypes: DEFAULT_PROTOTYPES,
            emotion_weights: [1.0; NUM_EXPRESSIONS],
            label_noise: 0.05,
            frac_expr_only: 0.1,
            frac_au_only: 0.7,
            frac_both: 0.2,
            image_size: 16,
            patch_amplitude: 15.0,
            pixel_noise: 80.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.frac_expr_only, self.frac_au_only, self.frac_both];
        if fr.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("label fractions must be >= 0, got {fr:?}")));
        }
        let total: f64 = fr.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "label fractions sum to {total}, which exceeds 1"
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0, 1), got {}",
                self.label_noise
            )));
        }
        if self.au_base_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("AU base rates must be in [0, 1)".into()));
        }
        if self.emotion_prototypes.iter().flatten().any(|&b| b > 1) {
            return Err(Error::Config("emotion prototypes must be binary".into()));
        }
        if self.emotion_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.emotion_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("emotion weights must be >= 0 with a positive sum".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if self.pixel_noise < 0.0 || self.patch_amplitude < 0.0 {
            return Err(Error::Config("noise and amplitude must be nonnegative".into()));
        }
        Ok(())
    }

    /// Exact number of expression-only, AU-only and fully labeled samples.
    pub fn label_counts(&self) -> (usize, usize, usize) {
        let n = self.n_samples as f64;
        let e = (self.frac_expr_only * n).round() as usize;
        let a = ((self.frac_au_only * n).round() as usize).min(self.n_samples - e);
        let b = ((self.frac_both * n).round() as usize).min(self.n_samples - e - a);
        (e, a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<RawImage>,
    /// Ground-truth expression and AU vector of every sample, before masking.
    pub truth: Vec<(u8, AuVector)>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Signed texture of one AU: (pixel offset into HWC buffer, ±1).
fn au_stamp(au: usize, size: usize) -> Vec<(usize, f64)> {
    let (cols, rows) = (4, 3);
    let cell_w = size / cols;
    let cell_h = size / rows;
    let (x0, y0) = ((au % cols) * cell_w, (au / cols) * cell_h);
    let mut stamp = Vec::with_capacity(cell_w * cell_h * 3);
    for y in y0..y0 + cell_h {
        for x in x0..x0 + cell_w {
            for c in 0..3 {
                let key = ((au as u64) << 48) ^ ((y as u64) << 32) ^ ((x as u64) << 16) ^ c as u64;
                let sign = if splitmix64(key) & 1 == 0 { 1.0 } else { -1.0 };
                stamp.push(((y * size + x) * 3 + c, sign));
            }
        }
    }
    stamp
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let size = cfg.image_size;
    let stamps: Vec<_> = (0..NUM_AUS).map(|j| au_stamp(j, size)).collect();
    let emotion_dist = WeightedIndex::new(cfg.emotion_weights)
        .map_err(|e| Error::Config(format!("emotion weights: {e}")))?;
    let pixel_dist = Normal::new(0.0, cfg.pixel_noise)
        .map_err(|e| Error::Config(format!("pixel noise: {e}")))?;

    // Stream 0 draws samples, stream 1 draws the label mask, so the samples
    // themselves do not depend on the labeling fractions.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let mut truth = Vec::with_capacity(cfg.n_samples);
    let mut images = Vec::with_capacity(cfg.n_samples);
    let mut canvas = vec![0.0f64; size * size * 3];
    for _ in 0..cfg.n_samples {
        let emotion = emotion_dist.sample(&mut rng);
        let mut aus = cfg.emotion_prototypes[emotion];
        for (bit, &base) in aus.iter_mut().zip(&cfg.au_base_rates) {
            if rng.random::<f64>() < cfg.label_noise {
                *bit ^= 1;
            }
            if rng.random::<f64>() < base {
                *bit = 1;
            }
        }
        canvas.fill(128.0);
        for (j, stamp) in stamps.iter().enumerate() {
            if aus[j] == 1 {
                for &(off, sign) in stamp {
                    canvas[off] += sign * cfg.patch_amplitude;
                }
            }
        }
        let pixels = canvas
            .iter()
            .map(|&v| (v + pixel_dist.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
            .collect();
        images.push(RawImage {
            height: size,
            width: size,
            pixels,
        });
        truth.push((emotion as u8, aus));
    }

    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut mask_rng);
    let (ne, na, nb) = cfg.label_counts();
    let mut keep = vec![(false, false); cfg.n_samples];
    for (rank, &i) in order.iter().enumerate() {
        keep[i] = if rank < ne {
            (true, false)
        } else if rank < ne + na {
            (false, true)
        } else if rank < ne + na + nb {
            (true, true)
        } else {
            (false, false)
        };
    }
    let records = truth
        .iter()
        .zip(&keep)
        .enumerate()
        .map(|(i, (&(e, a), &(ke, ka)))| {
            AnnotationRecord::new(ImageRef::Packed(i), ke.then_some(e), ka.then_some(a))
        })
        .collect();
    Ok(SynthOutput {
        records,
        images,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition;

    fn hamming(a: &AuVector, b: &AuVector) -> usize {
        a.iter().zip(b).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn prototypes_are_well_separated() {
        for i in 0..NUM_EXPRESSIONS {
            for j in i + 1..NUM_EXPRESSIONS {
                let min = if i == 0 { 5 } else { 6 };
                assert!(hamming(&DEFAULT_PROTOTYPES[i], &DEFAULT_PROTOTYPES[j]) >= min);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            n_samples: 50,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(synth_generate(&other).unwrap().images, synth_generate(&cfg).unwrap().images);
    }

    #[test]
    fn noiseless_labels_equal_prototypes() {
        let cfg = SynthConfig {
            n_samples: 200,
            label_noise: 0.0,
            au_base_rates: [0.0; NUM_AUS],
            frac_expr_only: 0.0,
            frac_au_only: 0.0,
            frac_both: 1.0,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        for r in &out.records {
            let e = r.expr.unwrap() as usize;
            assert_eq!(r.aus.unwrap(), DEFAULT_PROTOTYPES[e]);
        }
    }

    #[test]
    fn label_counts_are_exact() {
        let cfg = SynthConfig {
            n_samples: 4000,
            seed: 1,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        let p = partition(&out.records);
        assert_eq!(
            (p.expr_only.len(), p.au_only.len(), p.both.len(), p.excluded.len()),
            (400, 2800, 800, 0)
        );
    }

    #[test]
    fn samples_do_not_depend_on_fractions() {
        let a = SynthConfig {
            n_samples: 30,
            ..Default::default()
        };
        let b = SynthConfig {
            frac_expr_only: 0.0,
            frac_au_only: 0.0,
            frac_both: 1.0,
            ..a.clone()
        };
        let (oa, ob) = (synth_generate(&a).unwrap(), synth_generate(&b).unwrap());
        assert_eq!(oa.images, ob.images);
        assert_eq!(oa.truth, ob.truth);
    }

    #[test]
    fn fractions_over_one_rejected() {
        let cfg = SynthConfig {
            frac_expr_only: 0.5,
            frac_au_only: 0.5,
            frac_both: 0.2,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn skewed_marginals_follow_weights() {
        let cfg = SynthConfig {
            n_samples: 5000,
            emotion_weights: [70.0, 15.0, 5.0, 4.0, 3.0, 2.0, 1.0],
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        let neutral = out.truth.iter().filter(|t| t.0 == 0).count() as f64 / 5000.0;
        assert!((neutral - 0.7).abs() < 0.03, "{neutral}");
    }
}
