//! Convolution inner loops. Row-slice formulation so the stride-1 case
//! vectorizes.

use super::ConvShape;

/// Output index range `[lo, hi)` along one axis for kernel tap `k`, and the
/// signed input offset, for padding 1.
#[inline]
fn tap_range(k: usize, n_in: usize, n_out: usize, stride: usize) -> (usize, usize) {
    // input index = o * stride + k - 1 must lie in [0, n_in)
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let mut hi = n_out;
    while hi > lo && (hi - 1) * stride + k > n_in {
        hi -= 1;
    }
    (lo, hi)
}

pub(super) fn conv3x3_forward(x: &[f64], w: &[f64], b: &[f64], s: &ConvShape) -> Vec<f64> {
    let (h, wd, st) = (s.height, s.width, s.stride);
    let (oh, ow) = (s.out_height(), s.out_width());
    let mut out = vec![0.0; s.out_channels * oh * ow];
    for co in 0..s.out_channels {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_plane.fill(b[co]);
        for ci in 0..s.in_channels {
            let in_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            let wk = &w[(co * s.in_channels + ci) * 9..(co * s.in_channels + ci + 1) * 9];
            for ky in 0..3 {
                let (ylo, yhi) = tap_range(ky, h, oh, st);
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    let (xlo, xhi) = tap_range(kx, wd, ow, st);
                    for oy in ylo..yhi {
                        let iy = oy * st + ky - 1;
                        let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                        let irow = &in_plane[iy * wd..(iy + 1) * wd];
                        if st == 1 {
                            let src = &irow[xlo + kx - 1..xhi + kx - 1];
                            for (o, i) in orow[xlo..xhi].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * st + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` for the upstream gradient `g`.
pub(super) fn conv3x3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    s: &ConvShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, st) = (s.height, s.width, s.stride);
    let (oh, ow) = (s.out_height(), s.out_width());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; s.out_channels];
    for co in 0..s.out_channels {
        let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
        db[co] = g_plane.iter().sum();
        for ci in 0..s.in_channels {
            let in_plane = &x[ci * h * wd..(ci + 1) * h * wd];
            let dx_plane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            let base = (co * s.in_channels + ci) * 9;
            for ky in 0..3 {
                let (ylo, yhi) = tap_range(ky, h, oh, st);
                for kx in 0..3 {
                    let wv = w[base + ky * 3 + kx];
                    let (xlo, xhi) = tap_range(kx, wd, ow, st);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * st + ky - 1;
                        let grow = &g_plane[oy * ow..(oy + 1) * ow];
                        let irow = &in_plane[iy * wd..(iy + 1) * wd];
                        let drow = &mut dx_plane[iy * wd..(iy + 1) * wd];
                        if st == 1 {
                            let off = kx + xlo - 1;
                            let n = xhi - xlo;
                            for ((gv, iv), dv) in grow[xlo..xhi]
                                .iter()
                                .zip(&irow[off..off + n])
                                .zip(&mut drow[off..off + n])
                            {
                                acc += gv * iv;
                                *dv += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = ox * st + kx - 1;
                                acc += grow[ox] * irow[ix];
                                drow[ix] += wv * grow[ox];
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}
