//! Paired datasets: synthetic generators, paired-folder ingestion, and the
//! crop / resize pipeline. Images are `[C, H, W]` tensors in `[-1, 1]`.

mod synth;

pub use synth::{synth_lowlight, synth_lowlight_with, synth_modality, LowlightParams};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::stream_seed;
use crate::tensor::Tensor;

/// Condition image `v` and target image `r`, pixel-aligned, in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub v: Tensor<f32>,
    pub r: Tensor<f32>,
    pub id: String,
}

impl PairedSample {
    pub fn new(v: Tensor<f32>, r: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        if v.shape() != r.shape() {
            return Err(Error::Dataset(format!(
                "condition {:?} and target {:?} must share a shape",
                v.shape(),
                r.shape()
            )));
        }
        if v.shape().len() != 3 {
            return Err(Error::Dataset(format!(
                "paired images must be [C,H,W], got {:?}",
                v.shape()
            )));
        }
        for (name, t) in [("v", &v), ("r", &r)] {
            if t.data().iter().any(|&x| !(-1.0..=1.0).contains(&x)) {
                return Err(Error::Dataset(format!(
                    "{name} has values outside [-1, 1]"
                )));
            }
        }
        Ok(PairedSample {
            v,
            r,
            id: id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.r.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.r.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    Random,
    Center,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CropSpec {
    pub mode: CropMode,
    /// Window size; ignored for `CropMode::None`.
    pub size: usize,
    /// When set, bilinear-resize the (possibly cropped) pair to this square
    /// extent.
    pub resize_to: Option<usize>,
}

fn crop_tensor(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(top + size <= h && left + size <= w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            let start = ch * h * w + (top + i) * w + left;
            out.extend_from_slice(&src[start..start + size]);
        }
    }
    Tensor::from_vec(vec![c, size, size], out).expect("crop shape")
}

/// Crop both images of a pair with the same window, preserving alignment.
pub fn crop_pair_at(pair: &PairedSample, top: usize, left: usize, size: usize) -> Result<PairedSample> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::Dataset(format!(
            "crop window {size} at ({top}, {left}) exceeds image {h}x{w}"
        )));
    }
    PairedSample::new(
        crop_tensor(&pair.v, top, left, size),
        crop_tensor(&pair.r, top, left, size),
        pair.id.clone(),
    )
}

/// Random aligned crop; offsets are drawn from `rng` within
/// `[0, H-size] x [0, W-size]`.
pub fn random_crop_pair<R: Rng>(pair: &PairedSample, size: usize, rng: &mut R) -> Result<PairedSample> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Dataset(format!(
            "crop size {size} exceeds image {h}x{w}"
        )));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    crop_pair_at(pair, top, left, size)
}

pub fn center_crop_pair(pair: &PairedSample, size: usize) -> Result<PairedSample> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Dataset(format!(
            "crop size {size} exceeds image {h}x{w}"
        )));
    }
    crop_pair_at(pair, (h - size) / 2, (w - size) / 2, size)
}

/// Bilinear resample with half-pixel centers. Resizing to the identical
/// extents copies the input exactly.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    if t.shape().len() != 3 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("need [C,H,W], got {:?}", t.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = (fy - y0 as f64) as f32;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = (fx - x0 as f64) as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], out)
}

fn resize_pair(pair: &PairedSample, size: usize) -> Result<PairedSample> {
    PairedSample::new(
        resize_bilinear(&pair.v, size, size)?.clamp(-1.0, 1.0),
        resize_bilinear(&pair.r, size, size)?.clamp(-1.0, 1.0),
        pair.id.clone(),
    )
}

/// Apply a crop spec; the RNG is only consulted for `CropMode::Random`.
pub fn apply_crop_spec<R: Rng>(pair: &PairedSample, spec: &CropSpec, rng: &mut R) -> Result<PairedSample> {
    let cropped = match spec.mode {
        CropMode::Random => random_crop_pair(pair, spec.size, rng)?,
        CropMode::Center => center_crop_pair(pair, spec.size)?,
        CropMode::None => pair.clone(),
    };
    match spec.resize_to {
        Some(size) => resize_pair(&cropped, size),
        None => Ok(cropped),
    }
}

/// Decode an image file to `[C, H, W]` in `[-1, 1]` (8-bit value `x` maps to
/// `x / 127.5 - 1`). RGB and grayscale PNG / PNM are accepted; grayscale
/// decodes to one channel.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let (data, c, h, w) = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            (g.into_raw(), 1usize, h as usize, w as usize)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            (rgb.into_raw(), 3usize, h as usize, w as usize)
        }
    };
    // Interleaved -> planar, normalized.
    let mut out = vec![0.0f32; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + i] = data[i * c + ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Encode `[C, H, W]` in `[-1, 1]` to an 8-bit PNG (C must be 1 or 3).
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    if t.shape().len() != 3 {
        return Err(Error::shape(
            "save_image",
            format!("need [C,H,W], got {:?}", t.shape()),
        ));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let to_u8 = |x: f32| -> u8 { (((x + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8 };
    let src = t.data();
    match c {
        1 => {
            let buf: Vec<u8> = src.iter().map(|&x| to_u8(x)).collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)?;
        }
        3 => {
            let mut buf = vec![0u8; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    buf[i * 3 + ch] = to_u8(src[ch * h * w + i]);
                }
            }
            let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)?;
        }
        other => {
            return Err(Error::shape(
                "save_image",
                format!("can only encode 1- or 3-channel images, got {other}"),
            ))
        }
    }
    Ok(())
}

/// Outcome of a paired-folder scan: the pairs that loaded plus every file
/// skipped with the reason.
#[derive(Debug)]
pub struct FolderReport {
    pub samples: Vec<PairedSample>,
    pub skipped: Vec<(PathBuf, String)>,
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pair files from two directories by identical filename stem, decode, and
/// run each pair through the crop spec. Stems present in only one directory
/// are ignored; undecodable files are skipped and reported.
pub fn load_paired_folder(
    dir_v: &Path,
    dir_r: &Path,
    spec: &CropSpec,
    seed: u64,
) -> Result<FolderReport> {
    for d in [dir_v, dir_r] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", d.display())));
        }
    }
    let v_stems = stems(dir_v)?;
    let r_stems = stems(dir_r)?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (idx, (stem, v_path)) in v_stems.iter().enumerate() {
        let Some(r_path) = r_stems.get(stem) else {
            continue;
        };
        let v = match load_image(v_path) {
            Ok(v) => v,
            Err(e) => {
                skipped.push((v_path.clone(), e.to_string()));
                continue;
            }
        };
        let r = match load_image(r_path) {
            Ok(r) => r,
            Err(e) => {
                skipped.push((r_path.clone(), e.to_string()));
                continue;
            }
        };
        let pair = match PairedSample::new(v, r, stem.clone()) {
            Ok(p) => p,
            Err(e) => {
                skipped.push((v_path.clone(), e.to_string()));
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xC209, idx as u64));
        match apply_crop_spec(&pair, spec, &mut rng) {
            Ok(p) => samples.push(p),
            Err(e) => skipped.push((v_path.clone(), e.to_string())),
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no pairs: {} and {} share no loadable stems",
            dir_v.display(),
            dir_r.display()
        )));
    }
    Ok(FolderReport { samples, skipped })
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub v_path: String,
    pub r_path: String,
    pub shape: Vec<usize>,
}

/// Tab-separated dataset manifest: id, condition path, target path, shape.
pub fn write_manifest<W: Write>(w: &mut W, entries: &[ManifestEntry]) -> Result<()> {
    writeln!(w, "id\tv\tr\tshape")?;
    for e in entries {
        let shape = e
            .shape
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(w, "{}\t{}\t{}\t{}", e.id, e.v_path, e.r_path, shape)?;
    }
    Ok(())
}
