//! Synthetic desk-scale scenes with known edges of all four types.
//!
//! Each scene composes, on a smooth shaded background:
//! a bright occluder rectangle (depth edges on its silhouette), a color
//! change on flat geometry (reflectance edge), a shading crease where two
//! slopes meet (normal edge) and a cast-shadow boundary (illumination edge).
//! Ground-truth lines are one pixel wide and mutually disjoint.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{encode_mask, ImageSample, EDGE_TYPES};
use crate::error::{Error, Result};

fn put_rgb(image: &mut Array3<f32>, y: usize, x: usize, rgb: [f32; 3]) {
    for c in 0..3 {
        image[[c, y, x]] = rgb[c].clamp(0.0, 1.0);
    }
}

/// Build one scene. Positions jitter deterministically with `seed` so
/// different ids yield different geometry.
pub fn make_sample(id: &str, size: usize, seed: u64) -> ImageSample {
    assert!(size >= 48, "synthetic scenes need at least 48x48 pixels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size;
    let j = |rng: &mut ChaCha8Rng, span: usize| -> isize {
        rng.random_range(-(span as i64)..=span as i64) as isize
    };

    let mut image = Array3::<f32>::zeros((3, s, s));
    let mut labels = Array3::<u8>::zeros((4, s, s));

    // smooth background
    let tint = rng.random_range(-0.05..0.05f32);
    for y in 0..s {
        for x in 0..s {
            let base = 0.55 + 0.10 * (x as f32 / s as f32) + tint;
            put_rgb(&mut image, y, x, [base, base * 0.98, base * 0.95]);
        }
    }

    let q = s / 16; // layout unit

    // depth: occluder rectangle in the upper-left, silhouette labeled
    let r0 = (2 * q).saturating_add_signed(j(&mut rng, 1));
    let r1 = r0 + 4 * q;
    let c0 = (2 * q).saturating_add_signed(j(&mut rng, 1));
    let c1 = c0 + 5 * q;
    for y in r0..=r1 {
        for x in c0..=c1 {
            put_rgb(&mut image, y, x, [0.92, 0.42, 0.28]);
        }
    }
    for x in c0..=c1 {
        labels[[3, r0, x]] = 1;
        labels[[3, r1, x]] = 1;
    }
    for y in r0..=r1 {
        labels[[3, y, c0]] = 1;
        labels[[3, y, c1]] = 1;
    }

    // reflectance: color change on flat background, upper-right vertical line
    let xr = (11 * q).saturating_add_signed(j(&mut rng, 1));
    let re_rows = (q, 6 * q);
    for y in re_rows.0..=re_rows.1 {
        for x in xr..s {
            let base = 0.50 + 0.10 * (x as f32 / s as f32);
            put_rgb(&mut image, y, x, [0.30 * base / 0.5, 0.75, 0.78]);
        }
        labels[[0, y, xr]] = 1;
    }

    // normal: two shading slopes meeting in a crease, lower-left band
    let xn = (4 * q).saturating_add_signed(j(&mut rng, 1));
    let ne_rows = (8 * q, 12 * q);
    let half = 3 * q;
    for y in ne_rows.0..=ne_rows.1 {
        for x in xn.saturating_sub(half)..(xn + half).min(s - 1) {
            let d = (x as isize - xn as isize).unsigned_abs() as f32;
            let shade = 0.85 - 0.45 * d / half as f32;
            put_rgb(&mut image, y, x, [shade, shade, shade * 0.96]);
        }
        labels[[1 + 1, y, xn]] = 1; // plane 2 = normal
    }

    // illumination: cast shadow over the bottom rows
    let yi = (14 * q).saturating_add_signed(j(&mut rng, 1)).min(s - 2);
    for y in yi..s {
        for x in 0..s {
            for c in 0..3 {
                image[[c, y, x]] *= 0.45;
            }
        }
    }
    for x in 0..s {
        labels[[1, yi, x]] = 1;
    }

    ImageSample::new(id, image, labels).expect("synthetic sample is well-formed")
}

/// Write a complete toy dataset (images, label planes, list files).
pub fn write_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    for ty in EDGE_TYPES {
        std::fs::create_dir_all(root.join("labels").join(ty)).map_err(|e| Error::io(root, e))?;
    }
    let mut all_ids = Vec::new();
    let mut train_lines = String::new();
    let mut test_lines = String::new();
    for i in 0..n_train + n_test {
        let id = format!("scene{i:03}");
        let sample = make_sample(&id, size, seed.wrapping_add(i as u64));
        let (h, w) = (sample.height(), sample.width());
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in rgb.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = (sample.image[[c, y as usize, x as usize]] * 255.0).round() as u8;
            }
        }
        let img_path = root.join("images").join(format!("{id}.png"));
        rgb.save(&img_path).map_err(|e| Error::image(&img_path, e))?;
        for (k, ty) in EDGE_TYPES.iter().enumerate() {
            let plane: Array2<u8> = sample.labels.index_axis(ndarray::Axis(0), k).to_owned();
            encode_mask(&plane, &root.join("labels").join(ty).join(format!("{id}.png")))?;
        }
        if i < n_train {
            train_lines.push_str(&id);
            train_lines.push('\n');
        } else {
            test_lines.push_str(&id);
            test_lines.push('\n');
        }
        all_ids.push(id);
    }
    std::fs::write(root.join("train.lst"), train_lines)
        .map_err(|e| Error::io(root.join("train.lst"), e))?;
    std::fs::write(root.join("test.lst"), test_lines)
        .map_err(|e| Error::io(root.join("test.lst"), e))?;
    Ok(all_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{derive_attention_target, load_split, SplitRole, IGNORE};

    #[test]
    fn scenes_have_all_four_types_and_no_overlap() {
        let s = make_sample("a", 64, 3);
        for k in 0..4 {
            let count: usize = s
                .labels
                .index_axis(ndarray::Axis(0), k)
                .iter()
                .map(|&v| v as usize)
                .sum();
            assert!(count > 0, "type {k} has no edge pixels");
        }
        let t = derive_attention_target(&s.labels);
        assert!(
            t.target.iter().all(|&v| v != IGNORE),
            "toy scenes should not contain multi-label pixels"
        );
    }

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 2, 1, 64, 11).unwrap();
        let split = load_split(dir.path(), SplitRole::Train).unwrap();
        assert_eq!(split.ids, vec!["scene000", "scene001"]);
        let sample = split.load_sample("scene000").unwrap();
        assert_eq!(sample.image.dim(), (3, 64, 64));
        let test = load_split(dir.path(), SplitRole::Test).unwrap();
        assert_eq!(test.ids, vec!["scene002"]);
    }
}
