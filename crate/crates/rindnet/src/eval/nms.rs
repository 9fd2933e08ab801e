//! Orientation-based non-maximum suppression for edge probability maps.
//!
//! The local edge normal is estimated from second derivatives of a
//! triangle-smoothed copy of the map; a pixel survives when its smoothed
//! response is no smaller (up to a 1% tie margin) than the bilinear samples
//! one pixel away on both sides along the normal. Surviving pixels keep
//! their original values, so thinning never adds positives and never alters
//! retained values; border pixels are compared against clamped samples and
//! kept on the same terms as interior ones.

use ndarray::Array2;

/// Smoothing radius used for orientation estimation and the suppression
/// comparisons.
pub const SMOOTH_RADIUS: usize = 4;

/// Margin multiplier: a pixel is suppressed only when a neighbor beats it by
/// more than 1%, so exact plateaus do not erase each other without evidence.
const TIE_MARGIN: f32 = 1.01;

/// Separable triangle filter of radius `r` with mirrored borders.
pub fn conv_tri(map: &Array2<f32>, r: usize) -> Array2<f32> {
    if r == 0 {
        return map.clone();
    }
    let (h, w) = map.dim();
    let norm = ((r + 1) * (r + 1)) as f32;
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        j as usize
    };
    let mut horiz = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=(r as isize) {
                let weight = (r as isize + 1 - d.abs()) as f32;
                acc += weight * map[[y, reflect(x as isize + d, w)]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -(r as isize)..=(r as isize) {
                let weight = (r as isize + 1 - d.abs()) as f32;
                acc += weight * horiz[[reflect(y as isize + d, h), x]];
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

/// Central differences along (columns, rows); one-sided at the borders.
fn gradient2(m: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = m.dim();
    let mut gx = Array2::<f32>::zeros((h, w));
    let mut gy = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            gx[[y, x]] = if w == 1 {
                0.0
            } else if x == 0 {
                m[[y, 1]] - m[[y, 0]]
            } else if x == w - 1 {
                m[[y, w - 1]] - m[[y, w - 2]]
            } else {
                (m[[y, x + 1]] - m[[y, x - 1]]) / 2.0
            };
            gy[[y, x]] = if h == 1 {
                0.0
            } else if y == 0 {
                m[[1, x]] - m[[0, x]]
            } else if y == h - 1 {
                m[[h - 1, x]] - m[[h - 2, x]]
            } else {
                (m[[y + 1, x]] - m[[y - 1, x]]) / 2.0
            };
        }
    }
    (gx, gy)
}

fn bilinear(m: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = m.dim();
    let xc = x.clamp(0.0, (w - 1) as f32);
    let yc = y.clamp(0.0, (h - 1) as f32);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    m[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
        + m[[y0, x1]] * fx * (1.0 - fy)
        + m[[y1, x0]] * (1.0 - fx) * fy
        + m[[y1, x1]] * fx * fy
}

fn sgn(v: f32) -> f32 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Thin an edge probability map (values in [0, 1]).
pub fn nms_thin(map: &Array2<f32>) -> Array2<f32> {
    let (h, w) = map.dim();
    let smoothed = conv_tri(map, SMOOTH_RADIUS);
    let (ox, oy) = gradient2(&smoothed);
    let (oxx, _) = gradient2(&ox);
    let (oxy, oyy) = gradient2(&oy);

    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = map[[y, x]];
            if v <= 0.0 {
                continue;
            }
            let mut theta =
                (oyy[[y, x]] * sgn(-oxy[[y, x]]) / (oxx[[y, x]] + 1e-5)).atan();
            if theta < 0.0 {
                theta += std::f32::consts::PI;
            }
            let (dx, dy) = (theta.cos(), theta.sin());
            let here = smoothed[[y, x]] * TIE_MARGIN;
            let mut keep = true;
            for dir in [-1.0f32, 1.0] {
                let sample = bilinear(&smoothed, y as f32 + dir * dy, x as f32 + dir * dx);
                if here < sample {
                    keep = false;
                    break;
                }
            }
            if keep {
                out[[y, x]] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positives(m: &Array2<f32>) -> usize {
        m.iter().filter(|&&v| v > 0.0).count()
    }

    #[test]
    fn isolated_pixel_is_retained() {
        let mut m = Array2::<f32>::zeros((9, 9));
        m[[4, 4]] = 0.8;
        let t = nms_thin(&m);
        assert_eq!(t[[4, 4]], 0.8);
        assert_eq!(positives(&t), 1);
    }

    #[test]
    fn all_zero_map_stays_zero() {
        let m = Array2::<f32>::zeros((7, 7));
        let t = nms_thin(&m);
        assert_eq!(positives(&t), 0);
    }

    #[test]
    fn constant_ridge_with_decaying_flanks_thins_to_one_pixel_line() {
        // 9x9: vertical ridge of value 1.0 over columns 3..=5, flanks
        // ramping down on both sides
        let profile = [0.0f32, 0.25, 0.5, 1.0, 1.0, 1.0, 0.5, 0.25, 0.0];
        let mut m = Array2::<f32>::zeros((9, 9));
        for y in 0..9 {
            for x in 0..9 {
                m[[y, x]] = profile[x];
            }
        }
        let t = nms_thin(&m);
        for y in 0..9 {
            let row: Vec<usize> = (0..9).filter(|&x| t[[y, x]] > 0.0).collect();
            assert_eq!(row, vec![4], "row {y} not thinned to the center column");
            assert_eq!(t[[y, 4]], 1.0, "retained value must equal the input");
        }
    }

    #[test]
    fn horizontal_ridge_thins_too() {
        let profile = [0.0f32, 0.2, 0.6, 1.0, 0.6, 0.2, 0.0];
        let mut m = Array2::<f32>::zeros((7, 9));
        for y in 0..7 {
            for x in 0..9 {
                m[[y, x]] = profile[y];
            }
        }
        let t = nms_thin(&m);
        for x in 0..9 {
            let col: Vec<usize> = (0..7).filter(|&y| t[[y, x]] > 0.0).collect();
            assert_eq!(col, vec![3], "column {x}");
        }
    }

    #[test]
    fn thinning_is_conservative_on_random_maps() {
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u32 << 24) as f32
        };
        for _ in 0..100 {
            let m = Array2::<f32>::from_shape_fn((12, 12), |_| {
                let v = next();
                if v < 0.4 {
                    0.0
                } else {
                    v.min(1.0)
                }
            });
            let t = nms_thin(&m);
            assert!(positives(&t) <= positives(&m));
            for ((y, x), &v) in t.indexed_iter() {
                if v > 0.0 {
                    assert_eq!(v, m[[y, x]], "retained value changed at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn conv_tri_preserves_mass_of_interior_impulse() {
        let mut m = Array2::<f32>::zeros((15, 15));
        m[[7, 7]] = 1.0;
        let s = conv_tri(&m, 4);
        let total: f32 = s.iter().sum();
        assert!((total - 1.0).abs() < 1e-5, "total {total}");
        assert!(s[[7, 7]] > s[[7, 8]]);
        assert!(s[[7, 8]] > s[[7, 11]]);
    }
}
