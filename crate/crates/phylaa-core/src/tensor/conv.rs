//! im2col / col2im helpers backing the conv2d graph op.

/// Unfolds one [C, H, W] image into columns [C*KH*KW, H*W] with zero padding
/// `pad` on each side (stride 1).
pub fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let out_len = h * w;
    debug_assert_eq!(cols.len(), c * kh * kw * out_len);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                row += 1;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let base = oy * w;
                    if iy < 0 || iy >= h as isize {
                        dst[base..base + w].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        dst[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into the image.
pub fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    dst: &mut [f64],
) {
    let out_len = h * w;
    debug_assert_eq!(cols.len(), c * kh * kw * out_len);
    debug_assert_eq!(dst.len(), c * h * w);
    let mut row = 0usize;
    for ci in 0..c {
        let plane_base = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * out_len..(row + 1) * out_len];
                row += 1;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[plane_base + iy * w + ix as usize] += src[oy * w + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_center_tap_is_identity() {
        // 3x3 kernel, pad 1: row index c*9 + 4 is the untouched center tap.
        let (c, h, w) = (2, 4, 5);
        let src: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col(&src, c, h, w, 3, 3, 1, &mut cols);
        for ci in 0..c {
            let row = ci * 9 + 4;
            let got = &cols[row * h * w..(row + 1) * h * w];
            assert_eq!(got, &src[ci * h * w..(ci + 1) * h * w]);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w, k, pad) = (2, 3, 3, 3, 1);
        let n_cols = c * k * k * h * w;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..n_cols).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n_cols];
        im2col(&x, c, h, w, k, k, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xt = vec![0.0; c * h * w];
        col2im_acc(&y, c, h, w, k, k, pad, &mut xt);
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
    }
}
