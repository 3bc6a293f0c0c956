//! Forward and backward numeric kernels. Every reduction runs in a fixed order.

use super::{Tensor, TensorError};

/// Dot product with four interleaved accumulators, combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (ca, cb) in a[..n].chunks_exact(4).zip(b[..n].chunks_exact(4)) {
        s0 += ca[0] * cb[0];
        s1 += ca[1] * cb[1];
        s2 += ca[2] * cb[2];
        s3 += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[n..].iter().zip(&b[n..]) {
        tail += x * y;
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(super) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// For output row `oy` and kernel row `ky`, the input row, if inside.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy + ky;
        (iy >= self.pad_h && iy - self.pad_h < self.h).then(|| iy - self.pad_h)
    }

    /// Output column range whose input column lies inside for kernel column `kx`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_w.saturating_sub(kx);
        let hi = (self.w + self.pad_w).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

pub(super) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
    let x = input.data();
    let wt = weight.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * out_plane..][..out_plane];
            o.fill(bias.data()[co]);
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                let wk = &wt[(co * g.cin + ci) * ksz..][..ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let ix_lo = lo + kx - g.pad_w;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            axpy(
                                &mut o[oy * g.ow + lo..oy * g.ow + hi],
                                &xin[iy * g.w + ix_lo..iy * g.w + ix_lo + (hi - lo)],
                                wv,
                            );
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.batch, g.cout, g.oh, g.ow],
        data: out,
    }
}

pub(super) fn conv2d_grad_input(grad_out: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let mut gin = vec![0.0; g.batch * g.cin * g.h * g.w];
    let go = grad_out.data();
    let wt = weight.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for ci in 0..g.cin {
            let gi = &mut gin[(b * g.cin + ci) * in_plane..][..in_plane];
            for co in 0..g.cout {
                let gop = &go[(b * g.cout + co) * out_plane..][..out_plane];
                let wk = &wt[(co * g.cin + ci) * ksz..][..ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let ix_lo = lo + kx - g.pad_w;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            axpy(
                                &mut gi[iy * g.w + ix_lo..iy * g.w + ix_lo + (hi - lo)],
                                &gop[oy * g.ow + lo..oy * g.ow + hi],
                                wv,
                            );
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.batch, g.cin, g.h, g.w],
        data: gin,
    }
}

pub(super) fn conv2d_grad_weight(grad_out: &Tensor, input: &Tensor, g: &ConvGeom) -> (Tensor, Tensor) {
    let ksz = g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * g.cin * ksz];
    let mut gb = vec![0.0; g.cout];
    let go = grad_out.data();
    let x = input.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gop = &go[(b * g.cout + co) * out_plane..][..out_plane];
            gb[co] += gop.iter().sum::<f64>();
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let ix_lo = lo + kx - g.pad_w;
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            acc += dot(
                                &gop[oy * g.ow + lo..oy * g.ow + hi],
                                &xin[iy * g.w + ix_lo..iy * g.w + ix_lo + (hi - lo)],
                            );
                        }
                        gw[(co * g.cin + ci) * ksz + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: vec![g.cout, g.cin, g.kh, g.kw],
            data: gw,
        },
        Tensor {
            shape: vec![g.cout],
            data: gb,
        },
    )
}

/// `[batch, in] x [out, in]^T + bias[out]`.
pub(super) fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (batch, n_in) = (input.shape[0], input.shape[1]);
    let n_out = weight.shape[0];
    let mut out = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let row = &input.data[b * n_in..][..n_in];
        for o in 0..n_out {
            out.push(bias.data[o] + dot(&weight.data[o * n_in..][..n_in], row));
        }
    }
    Tensor {
        shape: vec![batch, n_out],
        data: out,
    }
}

pub(super) fn affine_grad_input(grad_out: &Tensor, weight: &Tensor) -> Tensor {
    let (batch, n_out) = (grad_out.shape[0], grad_out.shape[1]);
    let n_in = weight.shape[1];
    let mut gin = vec![0.0; batch * n_in];
    for b in 0..batch {
        let gi = &mut gin[b * n_in..][..n_in];
        for o in 0..n_out {
            axpy(gi, &weight.data[o * n_in..][..n_in], grad_out.data[b * n_out + o]);
        }
    }
    Tensor {
        shape: vec![batch, n_in],
        data: gin,
    }
}

pub(super) fn affine_grad_params(grad_out: &Tensor, input: &Tensor) -> (Tensor, Tensor) {
    let (batch, n_out) = (grad_out.shape[0], grad_out.shape[1]);
    let n_in = input.shape[1];
    let mut gw = vec![0.0; n_out * n_in];
    let mut gb = vec![0.0; n_out];
    for b in 0..batch {
        let row = &input.data[b * n_in..][..n_in];
        for o in 0..n_out {
            let k = grad_out.data[b * n_out + o];
            gb[o] += k;
            axpy(&mut gw[o * n_in..][..n_in], row, k);
        }
    }
    (
        Tensor {
            shape: vec![n_out, n_in],
            data: gw,
        },
        Tensor {
            shape: vec![n_out],
            data: gb,
        },
    )
}

/// Non-overlapping 2x2 mean pooling over the last two axes; a trailing odd
/// row or column is dropped.
pub(super) fn avgpool2_forward(input: &Tensor) -> Tensor {
    let n = input.shape.len();
    let (h, w) = (input.shape[n - 2], input.shape[n - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes: usize = input.shape[..n - 2].iter().product();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let x = &input.data[p * h * w..][..h * w];
        for oy in 0..oh {
            let r0 = &x[2 * oy * w..][..w];
            let r1 = &x[(2 * oy + 1) * w..][..w];
            for ox in 0..ow {
                out.push(0.25 * ((r0[2 * ox] + r0[2 * ox + 1]) + (r1[2 * ox] + r1[2 * ox + 1])));
            }
        }
    }
    let mut shape = input.shape.clone();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor { shape, data: out }
}

pub(super) fn avgpool2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let n = in_shape.len();
    let (h, w) = (in_shape[n - 2], in_shape[n - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes: usize = in_shape[..n - 2].iter().product();
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out.data[p * oh * ow..][..oh * ow];
        let gi = &mut gin[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = 0.25 * go[oy * ow + ox];
                gi[2 * oy * w + 2 * ox] = v;
                gi[2 * oy * w + 2 * ox + 1] = v;
                gi[(2 * oy + 1) * w + 2 * ox] = v;
                gi[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: gin,
    }
}

fn last_axis(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    if t.shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: "expected [rows, cols]".into(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

pub(super) fn softmax_last(x: &Tensor) -> Result<Tensor, TensorError> {
    let (rows, cols) = last_axis(x, "softmax")?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &x.data[r * cols..][..cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(super) fn log_softmax_last(x: &Tensor) -> Result<Tensor, TensorError> {
    let (rows, cols) = last_axis(x, "log_softmax")?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &x.data[r * cols..][..cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - m - lse));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(super) fn check_soft_targets(teacher: &Tensor, log_probs: &Tensor) -> Result<(), TensorError> {
    let (rows, cols) = last_axis(log_probs, "soft_cross_entropy")?;
    teacher.expect_same_shape(log_probs, "soft_cross_entropy")?;
    for r in 0..rows {
        let sum: f64 = teacher.data[r * cols..][..cols].iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TensorError::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

pub(super) fn soft_cross_entropy_value(teacher: &Tensor, log_probs: &Tensor) -> f64 {
    let batch = teacher.shape[0] as f64;
    let mut acc = 0.0;
    for (t, l) in teacher.data.iter().zip(&log_probs.data) {
        if *t != 0.0 {
            acc += t * l;
        }
    }
    -acc / batch
}
