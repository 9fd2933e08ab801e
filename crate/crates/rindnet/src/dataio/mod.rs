//! Dataset I/O for the four-type edge benchmark.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/
//!   images/<id>.jpg|png                  RGB input images
//!   labels/reflectance/<id>.png          0/255 binary masks, one per type
//!   labels/illumination/<id>.png
//!   labels/normal/<id>.png
//!   labels/depth/<id>.png
//!   train.lst, test.lst                  one id per line, UTF-8, LF
//! ```
//!
//! Predictions are exchanged as 16-bit single-channel PNGs where a pixel
//! stores `round(y * 65535)`.

pub mod synth;

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Edge type order used everywhere: planes 0..4 of label arrays, prediction
/// suffixes, report rows.
pub const EDGE_TYPES: [&str; 4] = ["reflectance", "illumination", "normal", "depth"];

/// Channel tagging a pixel that belongs to no edge type.
pub const BACKGROUND: usize = 0;

/// Sentinel marking a pixel-channel excluded from attention supervision.
pub const IGNORE: u8 = 255;

/// One image with its four binary edge label planes.
///
/// `labels` entries are 0/1 and a pixel may carry several positive planes.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]`, RGB in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[4, H, W]` in type order (r, i, n, d).
    pub labels: Array3<u8>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn new(id: impl Into<String>, image: Array3<f32>, labels: Array3<u8>) -> Result<Self> {
        if image.shape()[0] != 3 || labels.shape()[0] != 4 {
            return Err(Error::Data(format!(
                "sample channel layout must be [3,H,W] + [4,H,W], got {:?} + {:?}",
                image.shape(),
                labels.shape()
            )));
        }
        if image.shape()[1..] != labels.shape()[1..] {
            return Err(Error::Data(format!(
                "image {:?} and labels {:?} disagree on H/W",
                image.shape(),
                labels.shape()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Data("label planes must be binary".into()));
        }
        Ok(ImageSample {
            id: id.into(),
            image,
            labels,
        })
    }
}

/// Five-channel per-pixel attention supervision (b, r, i, n, d); values are
/// 0, 1 or [`IGNORE`].
#[derive(Debug, Clone)]
pub struct AttentionTarget {
    pub target: Array3<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn list_file(&self) -> &'static str {
        match self {
            SplitRole::Train => "train.lst",
            SplitRole::Test => "test.lst",
        }
    }
}

/// An ordered list of sample ids resolved against a dataset root.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub role: SplitRole,
}

fn image_path(root: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["jpg", "png"] {
        let p = root.join("images").join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("missing image file images/{id}.{{jpg,png}}")))
}

fn label_path(root: &Path, ty: &str, id: &str) -> PathBuf {
    root.join("labels").join(ty).join(format!("{id}.png"))
}

/// Read `<role>.lst` and verify every id resolves to an image plus all four
/// label planes. Order is preserved; an empty list file is a valid empty
/// split.
pub fn load_split(root: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let list = root.join(role.list_file());
    let text = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let mut ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let id = line.trim_end_matches('\r');
        if id.is_empty() {
            continue;
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!(
                "{}:{}: malformed id `{id}` (contains whitespace)",
                list.display(),
                lineno + 1
            )));
        }
        ids.push(id.to_string());
    }
    for id in &ids {
        image_path(root, id)?;
        for ty in EDGE_TYPES {
            let p = label_path(root, ty, id);
            if !p.exists() {
                return Err(Error::Data(format!(
                    "sample `{id}`: missing label plane labels/{ty}/{id}.png"
                )));
            }
        }
    }
    Ok(DatasetSplit {
        root: root.to_path_buf(),
        ids,
        role,
    })
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keep only the first `n` ids (developer-scale runs).
    pub fn limit(&mut self, n: usize) {
        self.ids.truncate(n);
    }

    pub fn load_sample(&self, id: &str) -> Result<ImageSample> {
        let img_path = image_path(&self.root, id)?;
        let img = image::open(&img_path).map_err(|e| Error::image(&img_path, e))?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut image = Array3::<f32>::zeros((3, h, w));
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                image[[c, y as usize, x as usize]] = f32::from(p.0[c]) / 255.0;
            }
        }
        let paths: Vec<PathBuf> = EDGE_TYPES
            .iter()
            .map(|ty| label_path(&self.root, ty, id))
            .collect();
        let labels = decode_labels(&paths)?;
        if labels.shape()[1] != h || labels.shape()[2] != w {
            return Err(Error::Data(format!(
                "sample `{id}`: image is {h}x{w} but labels are {}x{}",
                labels.shape()[1],
                labels.shape()[2]
            )));
        }
        ImageSample::new(id, image, labels)
    }
}

/// Decode the four 0/255 mask files into a `[4, H, W]` binary array.
/// Any pixel value outside {0, 255} is an error; no silent thresholding.
pub fn decode_labels(paths: &[PathBuf]) -> Result<Array3<u8>> {
    if paths.len() != 4 {
        return Err(Error::Data(format!(
            "expected 4 label planes, got {}",
            paths.len()
        )));
    }
    let mut planes: Vec<Array2<u8>> = Vec::with_capacity(4);
    for path in paths {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let gray = match img {
            DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Data(format!(
                    "{}: mask must be single-channel 8-bit, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut plane = Array2::<u8>::zeros((h, w));
        for (x, y, p) in gray.enumerate_pixels() {
            plane[[y as usize, x as usize]] = match p.0[0] {
                0 => 0,
                255 => 1,
                v => {
                    return Err(Error::Data(format!(
                        "{}: pixel value {v} at ({x},{y}) is not in {{0, 255}}",
                        path.display()
                    )))
                }
            };
        }
        if let Some(first) = planes.first() {
            if first.dim() != plane.dim() {
                return Err(Error::Data(format!(
                    "{}: plane size {:?} differs from first plane {:?}",
                    path.display(),
                    plane.dim(),
                    first.dim()
                )));
            }
        }
        planes.push(plane);
    }
    let (h, w) = planes[0].dim();
    let mut out = Array3::<u8>::zeros((4, h, w));
    for (k, plane) in planes.iter().enumerate() {
        out.slice_mut(s![k, .., ..]).assign(plane);
    }
    Ok(out)
}

/// Write a 0/255 binary mask PNG (the label-plane file format).
pub fn encode_mask(plane: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = plane.dim();
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0[0] = if plane[[y as usize, x as usize]] != 0 {
            255
        } else {
            0
        };
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Per-pixel attention supervision from the edge labels:
/// exactly one positive plane -> that edge channel is 1;
/// no positive plane -> background channel is 1;
/// two or more positive planes -> all five channels are [`IGNORE`].
pub fn derive_attention_target(labels: &Array3<u8>) -> AttentionTarget {
    let (_, h, w) = labels.dim();
    let mut target = Array3::<u8>::zeros((5, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut count = 0u8;
            for k in 0..4 {
                count += labels[[k, y, x]];
            }
            match count {
                0 => target[[BACKGROUND, y, x]] = 1,
                1 => {
                    for k in 0..4 {
                        target[[1 + k, y, x]] = labels[[k, y, x]];
                    }
                }
                _ => {
                    for c in 0..5 {
                        target[[c, y, x]] = IGNORE;
                    }
                }
            }
        }
    }
    AttentionTarget { target }
}

/// Two-channel (background, edge) attention target for the generic-edge
/// variant; the edge plane is the union of all four types, so no pixel is
/// multi-labeled and nothing is ignored.
pub fn derive_generic_attention_target(labels: &Array3<u8>) -> Array3<u8> {
    let (_, h, w) = labels.dim();
    let mut target = Array3::<u8>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let edge = (0..4).any(|k| labels[[k, y, x]] != 0);
            target[[usize::from(edge), y, x]] = 1;
        }
    }
    target
}

/// Union of the four label planes as one binary map.
pub fn generic_labels(labels: &Array3<u8>) -> Array2<u8> {
    let (_, h, w) = labels.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = u8::from((0..4).any(|k| labels[[k, y, x]] != 0));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::R0,
        Rotation::R90,
        Rotation::R180,
        Rotation::R270,
    ];

    pub fn degrees(&self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            _ => Err(Error::Config(format!(
                "rotation angle must be one of 0/90/180/270, got {deg}"
            ))),
        }
    }
}

fn rotate_planes<T: Copy + Default>(a: &Array3<T>, rot: Rotation) -> Array3<T> {
    let (c, h, w) = a.dim();
    match rot {
        Rotation::R0 => a.clone(),
        Rotation::R90 => {
            // counter-clockwise: (r, c) -> (W-1-c, r), output is W x H
            let mut out = Array3::<T>::default((c, w, h));
            for k in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        out[[k, w - 1 - q, r]] = a[[k, r, q]];
                    }
                }
            }
            out
        }
        Rotation::R180 => {
            let mut out = Array3::<T>::default((c, h, w));
            for k in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        out[[k, h - 1 - r, w - 1 - q]] = a[[k, r, q]];
                    }
                }
            }
            out
        }
        Rotation::R270 => {
            let mut out = Array3::<T>::default((c, w, h));
            for k in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        out[[k, q, h - 1 - r]] = a[[k, r, q]];
                    }
                }
            }
            out
        }
    }
}

/// Rotate image and all label planes together, counter-clockwise.
pub fn augment_rotate(sample: &ImageSample, rot: Rotation) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        image: rotate_planes(&sample.image, rot),
        labels: rotate_planes(&sample.labels, rot),
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // mirror without repeating the border pixel; degenerates to clamp for n == 1
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Mirror-pad the trailing two axes up to at least `min_h` x `min_w`
/// (identity when already large enough).
pub fn pad_reflect<T: Copy + Default>(a: &Array3<T>, min_h: usize, min_w: usize) -> Array3<T> {
    let (c, h, w) = a.dim();
    if h >= min_h && w >= min_w {
        return a.clone();
    }
    let nh = h.max(min_h);
    let nw = w.max(min_w);
    let mut out = Array3::<T>::default((c, nh, nw));
    for k in 0..c {
        for r in 0..nh {
            let sr = reflect_index(r as isize, h);
            for q in 0..nw {
                let sq = reflect_index(q as isize, w);
                out[[k, r, q]] = a[[k, sr, sq]];
            }
        }
    }
    out
}

/// Crop image and labels with one shared offset drawn uniformly from the
/// valid range. Inputs smaller than `size` are reflect-padded first.
pub fn augment_crop(sample: &ImageSample, size: usize, rng: &mut impl Rng) -> ImageSample {
    let image = pad_reflect(&sample.image, size, size);
    let labels = pad_reflect(&sample.labels, size, size);
    let (_, h, w) = image.dim();
    let oy = rng.random_range(0..=h - size);
    let ox = rng.random_range(0..=w - size);
    ImageSample {
        id: sample.id.clone(),
        image: image.slice(s![.., oy..oy + size, ox..ox + size]).to_owned(),
        labels: labels.slice(s![.., oy..oy + size, ox..ox + size]).to_owned(),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut state: u64) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Deterministic per-sample RNG stream derived from (global seed, sample id,
/// epoch) so augmentation is reproducible regardless of loader scheduling.
pub fn sample_rng(seed: u64, sample_id: &str, epoch: usize) -> ChaCha8Rng {
    let mut state = fnv1a(&seed.to_le_bytes(), FNV_OFFSET);
    state = fnv1a(sample_id.as_bytes(), state);
    state = fnv1a(&(epoch as u64).to_le_bytes(), state);
    ChaCha8Rng::seed_from_u64(state)
}

/// Write a probability map as a 16-bit PNG, value = `round(y * 65535)`.
pub fn encode_prediction(map: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = map[[y as usize, x as usize]];
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Numeric(format!(
                "prediction value {v} at ({x},{y}) outside [0,1]"
            )));
        }
        p.0[0] = (v * 65535.0).round() as u16;
    }
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Inverse of [`encode_prediction`], exact within 1/65535.
pub fn decode_prediction(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Data(format!(
                "{}: prediction must be 16-bit single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Array2::<f32>::zeros((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = f32::from(p.0[0]) / 65535.0;
    }
    Ok(out)
}
