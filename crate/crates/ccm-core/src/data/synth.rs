//! Procedural paired datasets: a low-light degradation task and a fixed
//! cross-modality mapping. Every sample is a pure function of
//! `(seed, index)`, so generation order and parallelism cannot change the
//! data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::seeds::stream_seed;
use crate::tensor::Tensor;

use super::PairedSample;

const STREAM_LOWLIGHT: u64 = 0x10;
const STREAM_MODALITY: u64 = 0x11;

/// Degradation ranges for the low-light task, sampled per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowlightParams {
    pub gamma: (f64, f64),
    pub gain: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for LowlightParams {
    fn default() -> Self {
        LowlightParams {
            gamma: (2.0, 5.0),
            gain: (0.1, 0.4),
            noise_sigma: (0.01, 0.05),
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Procedural well-exposed RGB image in `[0, 1]`: a random linear gradient
/// with a few anti-aliased circles and rectangles, compressed to
/// `[0.15, 0.95]` so every image keeps a healthy exposure.
fn base_image<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let mut img = vec![0.0f64; 3 * size * size];
    let c0: [f64; 3] = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
    let c1: [f64; 3] = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let lo = dx.min(0.0) + dy.min(0.0);
    let hi = dx.max(0.0) + dy.max(0.0);
    let span = (hi - lo).max(1e-9);
    let denom = (size - 1).max(1) as f64;
    for i in 0..size {
        for j in 0..size {
            let proj = dx * (j as f64 / denom) + dy * (i as f64 / denom);
            let t = (proj - lo) / span;
            for ch in 0..3 {
                img[ch * size * size + i * size + j] = c0[ch] + t * (c1[ch] - c0[ch]);
            }
        }
    }

    let shapes = rng.gen_range(2..=4);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
        let circle = rng.gen_bool(0.5);
        if circle {
            let cx = rng.gen_range(0.2..0.8) * size as f64;
            let cy = rng.gen_range(0.2..0.8) * size as f64;
            let radius = rng.gen_range(0.1..0.3) * size as f64;
            for i in 0..size {
                for j in 0..size {
                    let d = ((j as f64 - cx).powi(2) + (i as f64 - cy).powi(2)).sqrt();
                    let cov = clamp01(radius - d + 0.5);
                    if cov > 0.0 {
                        for ch in 0..3 {
                            let p = &mut img[ch * size * size + i * size + j];
                            *p += 0.85 * cov * (color[ch] - *p);
                        }
                    }
                }
            }
        } else {
            let x0 = rng.gen_range(0.05..0.6) * size as f64;
            let y0 = rng.gen_range(0.05..0.6) * size as f64;
            let x1 = x0 + rng.gen_range(0.2..0.4) * size as f64;
            let y1 = y0 + rng.gen_range(0.2..0.4) * size as f64;
            for i in 0..size {
                for j in 0..size {
                    let dxr = (j as f64 - x0).min(x1 - j as f64);
                    let dyr = (i as f64 - y0).min(y1 - i as f64);
                    let cov = clamp01(dxr.min(dyr) + 0.5);
                    if cov > 0.0 {
                        for ch in 0..3 {
                            let p = &mut img[ch * size * size + i * size + j];
                            *p += 0.85 * cov * (color[ch] - *p);
                        }
                    }
                }
            }
        }
    }

    for p in &mut img {
        *p = 0.15 + 0.8 * clamp01(*p);
    }
    img
}

fn to_signed(x01: &[f64]) -> Vec<f32> {
    x01.iter().map(|&x| (2.0 * x - 1.0) as f32).collect()
}

pub fn synth_lowlight(seed: u64, count: usize, size: usize) -> Result<Vec<PairedSample>> {
    synth_lowlight_with(seed, count, size, &LowlightParams::default())
}

/// Low-light pairs: the target `r` is a procedural well-exposed image, the
/// condition `v` is `clip(gain * r^gamma + noise)` in `[0, 1]` space with
/// per-image gamma, gain and noise level, then both map to `[-1, 1]`.
pub fn synth_lowlight_with(
    seed: u64,
    count: usize,
    size: usize,
    params: &LowlightParams,
) -> Result<Vec<PairedSample>> {
    validate_args(count, size)?;
    let params = *params;
    let samples = parallel::map_range(count, Parallelism::Rayon, move |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_LOWLIGHT, idx as u64));
        let r01 = base_image(&mut rng, size);
        let gamma = sample_range(&mut rng, params.gamma);
        let gain = sample_range(&mut rng, params.gain);
        let sigma = sample_range(&mut rng, params.noise_sigma);
        let identity = gamma == 1.0 && gain == 1.0 && sigma == 0.0;
        let v01: Vec<f64> = if identity {
            r01.clone()
        } else {
            r01.iter()
                .map(|&x| {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                    clamp01(gain * x.powf(gamma) + noise)
                })
                .collect()
        };
        let v = Tensor::from_vec(vec![3, size, size], to_signed(&v01))?;
        let r = Tensor::from_vec(vec![3, size, size], to_signed(&r01))?;
        PairedSample::new(v, r, format!("lowlight-{seed}-{idx:05}"))
    });
    samples.into_iter().collect()
}

/// Luminance with the usual video weights, in `[0, 1]` given `[0, 1]` RGB.
pub fn luma01(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// The fixed cross-modal mapping: a luma-driven heat-map with a monotone
/// first channel, a mid-band second and an inverted third.
pub fn modality_transform(v01: &[f64], size: usize) -> Vec<f64> {
    let hw = size * size;
    let mut out = vec![0.0f64; 3 * hw];
    for i in 0..hw {
        let l = luma01(v01[i], v01[hw + i], v01[2 * hw + i]);
        out[i] = l.powf(0.8);
        out[hw + i] = 0.9 * 4.0 * l * (1.0 - l);
        out[2 * hw + i] = (1.0 - l).powf(1.5);
    }
    out
}

/// Cross-modality pairs: `v` is a procedural visible image and `r` is a
/// deterministic nonlinear channel mix of it, so equal conditions always map
/// to equal targets.
pub fn synth_modality(seed: u64, count: usize, size: usize) -> Result<Vec<PairedSample>> {
    validate_args(count, size)?;
    let samples = parallel::map_range(count, Parallelism::Rayon, move |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_MODALITY, idx as u64));
        let v01 = base_image(&mut rng, size);
        let r01 = modality_transform(&v01, size);
        let v = Tensor::from_vec(vec![3, size, size], to_signed(&v01))?;
        let r = Tensor::from_vec(vec![3, size, size], to_signed(&r01))?;
        PairedSample::new(v, r, format!("modality-{seed}-{idx:05}"))
    });
    samples.into_iter().collect()
}

fn validate_args(count: usize, size: usize) -> Result<()> {
    if count < 1 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "size must be >= 8, got {size}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(t: &Tensor<f32>) -> f64 {
        t.data().iter().map(|&x| x as f64).sum::<f64>() / t.numel() as f64
    }

    #[test]
    fn lowlight_condition_is_darker_for_every_pair() {
        let data = synth_lowlight(17, 100, 16).unwrap();
        for pair in &data {
            assert!(
                mean(&pair.v) < mean(&pair.r),
                "{}: v mean {} !< r mean {}",
                pair.id,
                mean(&pair.v),
                mean(&pair.r)
            );
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = synth_lowlight(3, 5, 8).unwrap();
        let b = synth_lowlight(3, 5, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.v.data(), y.v.data());
            assert_eq!(x.r.data(), y.r.data());
            assert_eq!(x.id, y.id);
        }
        let c = synth_lowlight(4, 5, 8).unwrap();
        assert_ne!(a[0].v.data(), c[0].v.data());
    }

    #[test]
    fn identity_degradation_gives_v_equal_r() {
        let params = LowlightParams {
            gamma: (1.0, 1.0),
            gain: (1.0, 1.0),
            noise_sigma: (0.0, 0.0),
        };
        let data = synth_lowlight_with(5, 4, 8, &params).unwrap();
        for pair in &data {
            assert_eq!(pair.v.data(), pair.r.data());
        }
    }

    #[test]
    fn modality_is_a_function_of_v() {
        let data = synth_modality(9, 4, 8).unwrap();
        for pair in &data {
            let v01: Vec<f64> = pair.v.data().iter().map(|&x| (x as f64 + 1.0) / 2.0).collect();
            let r01 = modality_transform(&v01, 8);
            for (&have, want) in pair.r.data().iter().zip(to_signed(&r01)) {
                assert!((have - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn modality_luma_correlates_with_first_channel() {
        let data = synth_modality(21, 50, 16).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for pair in &data {
            let hw = 16 * 16;
            let v = pair.v.data();
            let r = pair.r.data();
            for i in 0..hw {
                let l = luma01(
                    (v[i] as f64 + 1.0) / 2.0,
                    (v[hw + i] as f64 + 1.0) / 2.0,
                    (v[2 * hw + i] as f64 + 1.0) / 2.0,
                );
                xs.push(l);
                ys.push((r[i] as f64 + 1.0) / 2.0);
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (&x, &y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr > 0.9, "per-pixel correlation {corr} <= 0.9");
    }

    #[test]
    fn degenerate_args_are_rejected() {
        assert!(synth_lowlight(0, 0, 16).is_err());
        assert!(synth_lowlight(0, 1, 4).is_err());
        assert!(synth_modality(0, 0, 16).is_err());
    }
}
