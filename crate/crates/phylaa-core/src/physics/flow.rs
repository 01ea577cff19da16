//! Dense optical flow by polynomial expansion (Farnebäck).
//!
//! Each frame is approximated locally by a quadratic polynomial fitted under
//! a Gaussian applicability window; displacements follow from the difference
//! of the linear coefficients, aggregated over a smoothing window and
//! refined iteratively. Single pyramid level: toy clips are 32-64 px and the
//! planted motions are sub-pixel to a few pixels.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-pixel displacement between consecutive frames, [T-1, H, W, 2] with
/// components (vx, vy) in pixels/frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub v: Tensor,
}

/// Fixed solver parameters; adequate at toy resolution.
const POLY_N: usize = 5; // polynomial neighborhood (odd)
const POLY_SIGMA: f64 = 1.1; // applicability Gaussian
const AGG_WIN: usize = 9; // displacement aggregation window (odd)
const AGG_SIGMA: f64 = 1.5;
const ITERATIONS: usize = 3;

/// Quadratic expansion coefficients per pixel: f ~ x'Ax + b'x + c with
/// A = [[axx, axy], [axy, ayy]], b = (bx, by).
struct PolyExpansion {
    axx: Vec<f64>,
    ayy: Vec<f64>,
    axy: Vec<f64>,
    bx: Vec<f64>,
    by: Vec<f64>,
    h: usize,
    w: usize,
}

/// Dense flow between every consecutive pair of frames.
///
/// `frames` is [T, H, W, 3] in [0, 1]; errors when T < 2.
pub fn dense_flow(frames: &Tensor) -> Result<FlowField> {
    if frames.ndim() != 4 || frames.shape[3] != 3 {
        return Err(Error::Dimension(format!(
            "dense_flow wants [T,H,W,3], got {:?}",
            frames.shape
        )));
    }
    let t = frames.shape[0];
    if t < 2 {
        return Err(Error::Input(format!("dense_flow needs at least 2 frames, got {t}")));
    }
    let (h, w) = (frames.shape[1], frames.shape[2]);
    let grays: Vec<Vec<f64>> = (0..t).map(|f| gray_frame(frames, f)).collect();
    let expansions: Vec<PolyExpansion> = grays.iter().map(|g| poly_expand(g, h, w)).collect();

    let mut v = vec![0.0; (t - 1) * h * w * 2];
    for f in 0..t - 1 {
        let flow = displacement(&expansions[f], &expansions[f + 1], h, w);
        v[f * h * w * 2..(f + 1) * h * w * 2].copy_from_slice(&flow);
    }
    Ok(FlowField { v: Tensor::from_vec(vec![t - 1, h, w, 2], v)? })
}

/// Rec. 601 luma of one frame.
fn gray_frame(frames: &Tensor, f: usize) -> Vec<f64> {
    let (h, w) = (frames.shape[1], frames.shape[2]);
    let base = f * h * w * 3;
    (0..h * w)
        .map(|i| {
            let p = base + i * 3;
            0.299 * frames.data[p] + 0.587 * frames.data[p + 1] + 0.114 * frames.data[p + 2]
        })
        .collect()
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted least-squares quadratic fit per pixel over a POLY_N window with
/// replicated borders. The Gram matrix is constant across pixels, so only
/// the six basis correlations vary.
fn poly_expand(img: &[f64], h: usize, w: usize) -> PolyExpansion {
    let half = (POLY_N / 2) as isize;
    let g1 = gaussian_kernel(POLY_N, POLY_SIGMA);

    // Gram matrix over basis [1, x, y, x^2, y^2, xy] with weights w(u,v).
    let mut gram = [[0.0f64; 6]; 6];
    for (vi, &wv) in g1.iter().enumerate() {
        let vy = vi as isize - half;
        for (ui, &wu) in g1.iter().enumerate() {
            let ux = ui as isize - half;
            let wgt = wu * wv;
            let basis = basis_at(ux as f64, vy as f64);
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += wgt * basis[i] * basis[j];
                }
            }
        }
    }
    let ginv = invert6(&gram);

    let mut out = PolyExpansion {
        axx: vec![0.0; h * w],
        ayy: vec![0.0; h * w],
        axy: vec![0.0; h * w],
        bx: vec![0.0; h * w],
        by: vec![0.0; h * w],
        h,
        w,
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = [0.0f64; 6];
            for (vi, &wv) in g1.iter().enumerate() {
                let vy = vi as isize - half;
                let sy = (y + vy).clamp(0, h as isize - 1) as usize;
                for (ui, &wu) in g1.iter().enumerate() {
                    let ux = ui as isize - half;
                    let sx = (x + ux).clamp(0, w as isize - 1) as usize;
                    let wgt = wu * wv;
                    let val = img[sy * w + sx];
                    let basis = basis_at(ux as f64, vy as f64);
                    for i in 0..6 {
                        m[i] += wgt * val * basis[i];
                    }
                }
            }
            let mut c = [0.0f64; 6];
            for i in 0..6 {
                for j in 0..6 {
                    c[i] += ginv[i][j] * m[j];
                }
            }
            let idx = y as usize * w + x as usize;
            out.bx[idx] = c[1];
            out.by[idx] = c[2];
            out.axx[idx] = c[3];
            out.ayy[idx] = c[4];
            out.axy[idx] = c[5] * 0.5;
        }
    }
    out
}

#[inline]
fn basis_at(x: f64, y: f64) -> [f64; 6] {
    [1.0, x, y, x * x, y * y, x * y]
}

/// Iterative displacement estimation between two expansions.
fn displacement(e1: &PolyExpansion, e2: &PolyExpansion, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0f64; h * w];
    let mut dy = vec![0.0f64; h * w];
    let agg = gaussian_kernel(AGG_WIN, AGG_SIGMA);
    let half = (AGG_WIN / 2) as isize;

    for _ in 0..ITERATIONS {
        // Per-pixel normal equations G d = hvec, then Gaussian-smoothed.
        let mut g11 = vec![0.0f64; h * w];
        let mut g12 = vec![0.0f64; h * w];
        let mut g22 = vec![0.0f64; h * w];
        let mut h1 = vec![0.0f64; h * w];
        let mut h2 = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let tx = (x as f64 + dx[i]).round().clamp(0.0, (w - 1) as f64) as usize;
                let ty = (y as f64 + dy[i]).round().clamp(0.0, (h - 1) as f64) as usize;
                let j = ty * w + tx;
                let a11 = 0.5 * (e1.axx[i] + e2.axx[j]);
                let a12 = 0.5 * (e1.axy[i] + e2.axy[j]);
                let a22 = 0.5 * (e1.ayy[i] + e2.ayy[j]);
                let db_x = -0.5 * (e2.bx[j] - e1.bx[i]) + a11 * dx[i] + a12 * dy[i];
                let db_y = -0.5 * (e2.by[j] - e1.by[i]) + a12 * dx[i] + a22 * dy[i];
                g11[i] = a11 * a11 + a12 * a12;
                g12[i] = a11 * a12 + a12 * a22;
                g22[i] = a12 * a12 + a22 * a22;
                h1[i] = a11 * db_x + a12 * db_y;
                h2[i] = a12 * db_x + a22 * db_y;
            }
        }
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = [0.0f64; 5];
                for (vi, &wv) in agg.iter().enumerate() {
                    let sy = (y + vi as isize - half).clamp(0, h as isize - 1) as usize;
                    for (ui, &wu) in agg.iter().enumerate() {
                        let sx = (x + ui as isize - half).clamp(0, w as isize - 1) as usize;
                        let wgt = wu * wv;
                        let j = sy * w + sx;
                        s[0] += wgt * g11[j];
                        s[1] += wgt * g12[j];
                        s[2] += wgt * g22[j];
                        s[3] += wgt * h1[j];
                        s[4] += wgt * h2[j];
                    }
                }
                let det = s[0] * s[2] - s[1] * s[1];
                let i = y as usize * w + x as usize;
                if det.abs() < 1e-12 {
                    dx[i] = 0.0;
                    dy[i] = 0.0;
                } else {
                    dx[i] = (s[2] * s[3] - s[1] * s[4]) / det;
                    dy[i] = (-s[1] * s[3] + s[0] * s[4]) / det;
                }
            }
        }
    }

    let mut out = vec![0.0; h * w * 2];
    for i in 0..h * w {
        out[i * 2] = dx[i];
        out[i * 2 + 1] = dy[i];
    }
    out
}

/// Gauss-Jordan inverse of the 6x6 Gram matrix.
fn invert6(m: &[[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = *m;
    let mut inv = [[0.0f64; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let mut pivot = col;
        for r in col + 1..6 {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        debug_assert!(p.abs() > 1e-14, "singular Gram matrix");
        for j in 0..6 {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..6 {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..6 {
                a[r][j] -= f * a[col][j];
                inv[r][j] -= f * inv[col][j];
            }
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture on a (h, w+pad) canvas.
    fn texture(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Two box-blur passes for a correlation length of a few pixels.
        let mut a = raw;
        for _ in 0..2 {
            let mut b = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                            let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                            acc += a[sy * w + sx];
                            cnt += 1.0;
                        }
                    }
                    b[y * w + x] = acc / cnt;
                }
            }
            a = b;
        }
        a
    }

    fn frames_from_grays(grays: &[Vec<f64>], h: usize, w: usize) -> Tensor {
        let t = grays.len();
        let mut data = vec![0.0; t * h * w * 3];
        for (f, g) in grays.iter().enumerate() {
            for i in 0..h * w {
                for c in 0..3 {
                    data[(f * h * w + i) * 3 + c] = g[i];
                }
            }
        }
        Tensor::from_vec(vec![t, h, w, 3], data).unwrap()
    }

    #[test]
    fn needs_two_frames() {
        let frames = Tensor::zeros(&[1, 8, 8, 3]);
        assert!(matches!(dense_flow(&frames), Err(Error::Input(_))));
    }

    #[test]
    fn static_pair_has_negligible_flow() {
        let (h, w) = (32, 32);
        let tex = texture(h, w, 5);
        let frames = frames_from_grays(&[tex.clone(), tex], h, w);
        let flow = dense_flow(&frames).unwrap();
        for &v in &flow.v.data {
            assert!(v.abs() < 1e-3, "static flow component {v}");
        }
    }

    #[test]
    fn one_pixel_translation_is_recovered() {
        let (h, w) = (32, 32);
        let wide = texture(h, w + 1, 9);
        // frame2(x) = frame1(x-1): content moves by +1 px in x. Sample both
        // frames from one wide canvas so there is no boundary invention.
        let f1: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| wide[y * (w + 1) + x + 1])
            .collect();
        let f2: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| wide[y * (w + 1) + x])
            .collect();
        let frames = frames_from_grays(&[f1, f2], h, w);
        let flow = dense_flow(&frames).unwrap();
        let mut vxs = Vec::new();
        let mut vys = Vec::new();
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                vxs.push(flow.v.data[(y * w + x) * 2]);
                vys.push(flow.v.data[(y * w + x) * 2 + 1]);
            }
        }
        vxs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med_vx = vxs[vxs.len() / 2];
        let med_vy = vys[vys.len() / 2];
        assert!((0.8..=1.2).contains(&med_vx), "median vx {med_vx}");
        assert!((-0.2..=0.2).contains(&med_vy), "median vy {med_vy}");
    }

    #[test]
    fn forward_backward_consistency() {
        let (h, w) = (32, 32);
        let wide = texture(h + 2, w + 2, 21);
        let sample = |oy: usize, ox: usize| -> Vec<f64> {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| wide[(y + oy) * (w + 2) + x + ox])
                .collect()
        };
        let f1 = sample(0, 0);
        let f2 = sample(1, 1);
        let fwd = dense_flow(&frames_from_grays(&[f1.clone(), f2.clone()], h, w)).unwrap();
        let bwd = dense_flow(&frames_from_grays(&[f2, f1], h, w)).unwrap();
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                let i = (y * w + x) * 2;
                acc += (fwd.v.data[i] + bwd.v.data[i]).abs();
                acc += (fwd.v.data[i + 1] + bwd.v.data[i + 1]).abs();
                n += 2.0;
            }
        }
        let mad = acc / n;
        assert!(mad < 0.3, "forward-backward mean abs difference {mad}");
    }

    #[test]
    fn translation_equivariance_at_desk_tolerance() {
        let (h, w) = (32, 32);
        let wide = texture(h + 8, w + 8, 33);
        let sample = |oy: usize, ox: usize| -> Vec<f64> {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| wide[(y + oy) * (w + 8) + x + ox])
                .collect()
        };
        // Same underlying motion (-1, 0) observed through two windows offset
        // by an integer (2, 3): interior flow must agree.
        let fa = dense_flow(&frames_from_grays(&[sample(0, 0), sample(0, 1)], h, w)).unwrap();
        let fb = dense_flow(&frames_from_grays(&[sample(2, 3), sample(2, 4)], h, w)).unwrap();
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                let i = (y * w + x) * 2;
                acc += (fa.v.data[i] - fb.v.data[i]).abs();
                acc += (fa.v.data[i + 1] - fb.v.data[i + 1]).abs();
                n += 2.0;
            }
        }
        let mad = acc / n;
        assert!(mad < 0.3, "translation equivariance mean abs difference {mad}");
    }
}
