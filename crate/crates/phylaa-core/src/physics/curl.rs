//! Squared-curl maps from flow fields.

use super::flow::FlowField;
use crate::tensor::{minmax_project, Tensor};
use crate::Result;

/// Squared curl (dvy/dx - dvx/dy)^2 per pixel, central differences in the
/// interior and one-sided stencils at the borders. No projection; used by
/// the analytic oracles.
pub fn curl_raw(flow: &FlowField) -> Result<Tensor> {
    let shape = &flow.v.shape;
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; t * h * w];
    for f in 0..t {
        let base = f * h * w * 2;
        let vx = |y: usize, x: usize| flow.v.data[base + (y * w + x) * 2];
        let vy = |y: usize, x: usize| flow.v.data[base + (y * w + x) * 2 + 1];
        for y in 0..h {
            for x in 0..w {
                let dvy_dx = if w < 2 {
                    0.0
                } else if x == 0 {
                    vy(y, 1) - vy(y, 0)
                } else if x == w - 1 {
                    vy(y, w - 1) - vy(y, w - 2)
                } else {
                    0.5 * (vy(y, x + 1) - vy(y, x - 1))
                };
                let dvx_dy = if h < 2 {
                    0.0
                } else if y == 0 {
                    vx(1, x) - vx(0, x)
                } else if y == h - 1 {
                    vx(h - 1, x) - vx(h - 2, x)
                } else {
                    0.5 * (vx(y + 1, x) - vx(y - 1, x))
                };
                let c = dvy_dx - dvx_dy;
                out[f * h * w + y * w + x] = c * c;
            }
        }
    }
    Tensor::from_vec(vec![t, 1, h, w], out)
}

/// Curl conditioner: squared curl projected to [0, 1] per clip, with the
/// last map replicated so the output covers all T frames, [T, 1, H, W].
pub fn curl_map(flow: &FlowField) -> Result<Tensor> {
    let raw = curl_raw(flow)?;
    let proj = minmax_project(&raw);
    let (tm1, h, w) = (proj.shape[0], proj.shape[2], proj.shape[3]);
    let mut data = proj.data;
    // Replicate the final frame's map to pad T-1 back to T.
    let last = data[(tm1 - 1) * h * w..tm1 * h * w].to_vec();
    data.extend_from_slice(&last);
    Tensor::from_vec(vec![tm1 + 1, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(t: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> FlowField {
        let mut v = vec![0.0; t * h * w * 2];
        for fr in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let (vx, vy) = f(y, x);
                    v[fr * h * w * 2 + (y * w + x) * 2] = vx;
                    v[fr * h * w * 2 + (y * w + x) * 2 + 1] = vy;
                }
            }
        }
        FlowField { v: Tensor::from_vec(vec![t, h, w, 2], v).unwrap() }
    }

    #[test]
    fn constant_field_has_zero_curl() {
        let flow = field(2, 16, 16, |_, _| (3.0, -1.0));
        let raw = curl_raw(&flow).unwrap();
        for &c in &raw.data {
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn rigid_rotation_curl_is_four_omega_squared() {
        // v = omega * (-y, x) about the center: curl = 2*omega everywhere,
        // squared curl = 4*omega^2. Central differences are exact on linear
        // fields, so interior error is pure rounding.
        let omega = 0.5;
        let (h, w) = (16, 16);
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let flow = field(1, h, w, |y, x| {
            let ry = y as f64 - cy;
            let rx = x as f64 - cx;
            (-omega * ry, omega * rx)
        });
        let raw = curl_raw(&flow).unwrap();
        let want = 4.0 * omega * omega;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let got = raw.data[y * w + x];
                assert!((got - want).abs() < 1e-9, "curl {got} vs {want}");
            }
        }
    }

    #[test]
    fn shear_field_has_unit_squared_curl() {
        // v = (y, 0): dvx/dy = 1, dvy/dx = 0 -> squared curl 1.
        let flow = field(1, 12, 12, |y, _| (y as f64, 0.0));
        let raw = curl_raw(&flow).unwrap();
        for y in 1..11 {
            for x in 1..11 {
                assert!((raw.data[y * 12 + x] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_pads_to_full_length_and_projects() {
        let flow = field(3, 8, 8, |y, x| ((y * x) as f64 * 0.01, (y + x) as f64 * 0.02));
        let map = curl_map(&flow).unwrap();
        assert_eq!(map.shape, vec![4, 1, 8, 8]);
        let (lo, hi) = map.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        // Last two frames identical by construction.
        assert_eq!(map.data[2 * 64..3 * 64], map.data[3 * 64..4 * 64]);
    }
}
