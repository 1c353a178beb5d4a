//! Full-reference image quality metrics: PSNR and Gaussian-windowed SSIM,
//! plus dataset-level evaluation of a trained model.

use crate::consistency::ConsistencyModel;
use crate::data::{center_crop_pair, crop_pair_at, resize_bilinear, PairedSample};
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::sampling::{sample_single_step, SampleRequest};
use crate::seeds::stream_seed;
use crate::tensor::{Element, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Peak signal-to-noise ratio in dB: `10 * log10(max_val^2 / MSE)`.
/// Identical images return positive infinity.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "psnr: max_val must be positive, got {max_val}"
        )));
    }
    let mut sq = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        sq += d * d;
    }
    let mse = sq / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrayMode {
    /// Convert RGB to luminance with weights 0.299 / 0.587 / 0.114 and run
    /// SSIM on the single plane. Non-RGB inputs average their channels.
    #[default]
    Luma,
    /// Per-channel SSIM, averaged.
    PerChannelMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    /// Dynamic range of the inputs (1.0 for `[0, 1]` images).
    pub data_range: f64,
    pub gray: GrayMode,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            data_range: 1.0,
            gray: GrayMode::Luma,
        }
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

fn to_planes<T: Element>(t: &Tensor<T>, gray: GrayMode) -> Vec<Vec<f64>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let data = t.data();
    match gray {
        GrayMode::Luma => {
            let mut plane = vec![0.0f64; hw];
            if c == 3 {
                for i in 0..hw {
                    plane[i] = 0.299 * data[i].to_f64()
                        + 0.587 * data[hw + i].to_f64()
                        + 0.114 * data[2 * hw + i].to_f64();
                }
            } else {
                for i in 0..hw {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += data[ch * hw + i].to_f64();
                    }
                    plane[i] = acc / c as f64;
                }
            }
            vec![plane]
        }
        GrayMode::PerChannelMean => (0..c)
            .map(|ch| data[ch * hw..(ch + 1) * hw].iter().map(|&v| v.to_f64()).collect())
            .collect(),
    }
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, window: &[f64], data_range: f64) -> f64 {
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (y0 + i) * w + x0;
                let wrow = &window[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW];
                for j in 0..SSIM_WINDOW {
                    let wa = wrow[j];
                    let av = a[row + j];
                    let bv = b[row + j];
                    mu_a += wa * av;
                    mu_b += wa * bv;
                    aa += wa * av * av;
                    bb += wa * bv * bv;
                    ab += wa * av * bv;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean structural similarity over all valid 11x11 Gaussian windows
/// (sigma 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, opts: &SsimOptions) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.shape().len() != 3 {
        return Err(Error::shape(
            "ssim",
            format!("need [C,H,W], got {:?}", a.shape()),
        ));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if !(opts.data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ssim: data_range must be positive, got {}",
            opts.data_range
        )));
    }
    let window = gaussian_window();
    let pa = to_planes(a, opts.gray);
    let pb = to_planes(b, opts.gray);
    let mut total = 0.0;
    for (qa, qb) in pa.iter().zip(&pb) {
        total += ssim_plane(qa, qb, h, w, &window, opts.data_range);
    }
    Ok(total / pa.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ItemMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus their arithmetic means.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mode: String,
    pub items: Vec<ItemMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn from_items(mode: String, items: Vec<ItemMetrics>) -> Self {
        let count = items.len();
        let mean_psnr_db = items.iter().map(|i| i.psnr_db).sum::<f64>() / count.max(1) as f64;
        let mean_ssim = items.iter().map(|i| i.ssim).sum::<f64>() / count.max(1) as f64;
        MetricReport {
            mode,
            items,
            mean_psnr_db,
            mean_ssim,
            count,
        }
    }

    /// Tab-separated rows with a header; the aggregate line comes last.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# mode={}\n", self.mode));
        out.push_str("id\tpsnr_db\tssim\n");
        for item in &self.items {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", item.id, item.psnr_db, item.ssim));
        }
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\n",
            self.mean_psnr_db, self.mean_ssim
        ));
        out
    }
}

/// Evaluation protocol: metrics on an aligned random crop, or on the full
/// image resized square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Crop { size: usize },
    FullResize { size: usize },
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Crop { size } => format!("crop:{size}"),
            EvalMode::FullResize { size } => format!("full-resize:{size}"),
        }
    }
}

const STREAM_EVAL_CROP: u64 = 0x20;
const STREAM_EVAL_SAMPLE: u64 = 0x21;

/// Sample one output per condition (seeded per item id, so dataset order
/// does not matter) and score both metrics against the ground truth on the
/// `[0, 1]` scale.
pub fn evaluate(
    dataset: &[PairedSample],
    model: &ConsistencyModel<f32>,
    mode: EvalMode,
    seed: u64,
    par: Parallelism,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluate: empty dataset".into()));
    }
    let results: Vec<Result<ItemMetrics>> = parallel::map_indexed(dataset, par, |_, pair| {
        let id_hash = crate::checkpoint::fnv1a64(pair.id.as_bytes());
        let prepared = match mode {
            EvalMode::Crop { size } => {
                let (h, w) = (pair.height(), pair.width());
                if size > h || size > w {
                    center_crop_pair(pair, size.min(h).min(w))?
                } else {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_EVAL_CROP, id_hash));
                    let top = rng.gen_range(0..=h - size);
                    let left = rng.gen_range(0..=w - size);
                    crop_pair_at(pair, top, left, size)?
                }
            }
            EvalMode::FullResize { size } => PairedSample::new(
                resize_bilinear(&pair.v, size, size)?.clamp(-1.0, 1.0),
                resize_bilinear(&pair.r, size, size)?.clamp(-1.0, 1.0),
                pair.id.clone(),
            )?,
        };
        let req = SampleRequest {
            v: &prepared.v,
            seed: stream_seed(seed, STREAM_EVAL_SAMPLE, id_hash),
            clamp: true,
        };
        let generated = sample_single_step(model, &req)?;
        let gen01 = generated.map(|x| (x + 1.0) * 0.5);
        let ref01 = prepared.r.map(|x| (x + 1.0) * 0.5);
        Ok(ItemMetrics {
            id: pair.id.clone(),
            psnr_db: psnr(&gen01, &ref01, 1.0)?,
            ssim: ssim(&gen01, &ref01, &SsimOptions::default())?,
        })
    });
    let items = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_items(mode.label(), items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn img(seed: u64, c: usize, hw: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f64>::randn(&[c, hw, hw], &mut rng).map(|x| (x * 0.2 + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn psnr_identical_images_is_infinite() {
        let a = img(1, 3, 12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let a = Tensor::<f64>::full(&[1, 8, 8], 0.5);
        let b = Tensor::<f64>::full(&[1, 8, 8], 0.6);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p} != 20.0");
    }

    #[test]
    fn psnr_is_symmetric_and_validates() {
        let a = img(2, 3, 12);
        let b = img(3, 3, 12);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = img(4, 1, 12);
        assert!(psnr(&a, &c, 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_self_similarity_is_exactly_one() {
        let a = img(5, 3, 16);
        assert_eq!(ssim(&a, &a, &SsimOptions::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negated_zero_mean_image_is_negative() {
        // Alternating pattern: zero mean under every window, so the
        // luminance term stays near one while the structure term flips sign.
        let data: Vec<f64> = (0..16 * 16)
            .map(|i| {
                let (y, x) = (i / 16, i % 16);
                if (x + y) % 2 == 0 {
                    0.5
                } else {
                    -0.5
                }
            })
            .collect();
        let a = Tensor::<f64>::from_vec(vec![1, 16, 16], data).unwrap();
        let b = a.map(|x| -x);
        let v = ssim(&a, &b, &SsimOptions::default()).unwrap();
        assert!(v < 0.0, "ssim of negated image should be negative, got {v}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(7, 1, 8);
        assert!(ssim(&a, &a, &SsimOptions::default()).is_err());
    }

    #[test]
    fn ssim_symmetry() {
        let a = img(8, 3, 14);
        let b = img(9, 3, 14);
        let opts = SsimOptions::default();
        let ab = ssim(&a, &b, &opts).unwrap();
        let ba = ssim(&b, &a, &opts).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn psnr_is_scale_invariant(seed in 0u64..100, kappa in 0.1f64..10.0) {
            let a = img(seed, 1, 12);
            let b = img(seed + 1000, 1, 12);
            let base = psnr(&a, &b, 1.0).unwrap();
            let scaled = psnr(&a.map(|x| x * kappa), &b.map(|x| x * kappa), kappa).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
