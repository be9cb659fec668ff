//! 3D convolution and its transpose, lowered to GEMM through im2col.

use rayon::prelude::*;

use super::float::gemm;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding per (time, height, width) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    pub fn unit() -> Self {
        Self::new([1; 3], [0; 3])
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv3d_out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 {
        return None;
    }
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// `(n - 1)·s + k - 2p`, the inverse of [`conv3d_out_len`] for exact strides.
pub fn conv_transpose3d_out_len(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || n == 0 {
        return None;
    }
    ((n - 1) * s + k).checked_sub(2 * p).filter(|&v| v > 0)
}

/// Geometry of one im2col lowering: a `[c, dims]` volume read by a kernel
/// producing `out` positions.
#[derive(Debug, Clone, Copy)]
struct ColGeom {
    c: usize,
    dims: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl ColGeom {
    fn rows(&self) -> usize {
        self.c * self.k.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.out.iter().product()
    }

    fn volume(&self) -> usize {
        self.c * self.dims.iter().product::<usize>()
    }

    /// Visits every output row `(column offset, input offset of the first
    /// valid column, valid range of w_out)` for kernel `row`; rows whose time
    /// or height tap falls in the padding report `None`.
    #[inline]
    fn for_row(&self, row: usize, mut f: impl FnMut(usize, Option<(usize, usize, usize)>)) {
        let [kt, kh, kw] = self.k;
        let d = row % kw;
        let b = (row / kw) % kh;
        let a = (row / (kw * kh)) % kt;
        let c = row / (kw * kh * kt);
        let [t_in, h_in, w_in] = self.dims;
        let [t_out, h_out, w_out] = self.out;
        let (sw, pw) = (self.stride[2], self.pad[2]);
        // valid wo satisfy 0 <= wo*sw + d - pw < w_in
        let wo_lo = if d >= pw { 0 } else { (pw - d).div_ceil(sw) };
        let wo_hi = if w_in + pw > d { ((w_in + pw - d - 1) / sw + 1).min(w_out) } else { 0 };
        let base_c = c * t_in * h_in * w_in;
        for to in 0..t_out {
            let ti = (to * self.stride[0] + a) as isize - self.pad[0] as isize;
            let t_ok = ti >= 0 && (ti as usize) < t_in;
            for ho in 0..h_out {
                let hi = (ho * self.stride[1] + b) as isize - self.pad[1] as isize;
                let col_base = (to * h_out + ho) * w_out;
                if t_ok && hi >= 0 && (hi as usize) < h_in && wo_lo < wo_hi {
                    let src = base_c + ((ti as usize) * h_in + hi as usize) * w_in + wo_lo * sw + d - pw;
                    f(col_base, Some((src, wo_lo, wo_hi)));
                } else {
                    f(col_base, None);
                }
            }
        }
    }

    fn im2col<F: Float>(&self, x: &[F], col: &mut [F]) {
        let p = self.positions();
        let w_out = self.out[2];
        let sw = self.stride[2];
        for (row, dst) in col.chunks_mut(p).enumerate().take(self.rows()) {
            self.for_row(row, |base, span| {
                let line = &mut dst[base..base + w_out];
                match span {
                    None => line.fill(F::zero()),
                    Some((src, lo, hi)) => {
                        line[..lo].fill(F::zero());
                        line[hi..].fill(F::zero());
                        let n = hi - lo;
                        if sw == 1 {
                            line[lo..hi].copy_from_slice(&x[src..src + n]);
                        } else {
                            for (o, v) in line[lo..hi].iter_mut().zip(x[src..].iter().step_by(sw)) {
                                *o = *v;
                            }
                        }
                    }
                }
            });
        }
    }

    fn col2im<F: Float>(&self, col: &[F], x: &mut [F]) {
        let p = self.positions();
        let sw = self.stride[2];
        for (row, src_row) in col.chunks(p).enumerate().take(self.rows()) {
            self.for_row(row, |base, span| {
                if let Some((dst, lo, hi)) = span {
                    let line = &src_row[base + lo..base + hi];
                    if sw == 1 {
                        for (o, v) in x[dst..dst + line.len()].iter_mut().zip(line) {
                            *o += *v;
                        }
                    } else {
                        for (o, v) in x[dst..].iter_mut().step_by(sw).zip(line) {
                            *o += *v;
                        }
                    }
                }
            });
        }
    }
}

fn check_5d<F: Float>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 5]> {
    t.shape().try_into().map_err(|_| Error::Dim {
        op,
        axis: t.rank(),
        expected: 5,
        got: t.rank(),
    })
}

fn check_bias<F: Float>(op: &'static str, bias: Option<&Tensor<F>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::Dim {
                op,
                axis: 0,
                expected: channels,
                got: b.numel(),
            });
        }
    }
    Ok(())
}

impl<F: Float> Tensor<F> {
    /// `input [B, C, T, H, W]`, `kernel [C', C, kt, kh, kw]`, optional bias `[C']`.
    pub fn conv3d(&self, kernel: &Tensor<F>, bias: Option<&Tensor<F>>, geom: Conv3dGeometry) -> Result<Tensor<F>> {
        const OP: &str = "conv3d";
        let [b, c, t, h, w] = check_5d(OP, self)?;
        let [co, ci, kt, kh, kw] = check_5d(OP, kernel)?;
        if ci != c {
            return Err(Error::Dim {
                op: OP,
                axis: 1,
                expected: ci,
                got: c,
            });
        }
        check_bias(OP, bias, co)?;
        let dims = [t, h, w];
        let k = [kt, kh, kw];
        let mut out_dims = [0; 3];
        for ax in 0..3 {
            out_dims[ax] = conv3d_out_len(dims[ax], k[ax], geom.stride[ax], geom.padding[ax]).ok_or(Error::Dim {
                op: OP,
                axis: ax + 2,
                expected: k[ax],
                got: dims[ax] + 2 * geom.padding[ax],
            })?;
        }
        let g = ColGeom {
            c,
            dims,
            k,
            stride: geom.stride,
            pad: geom.padding,
            out: out_dims,
        };
        let (rows, pos, vol) = (g.rows(), g.positions(), g.volume());
        let xd = self.data_rc();
        let kd = kernel.data_rc();
        let bd = bias.map(|b| b.data_rc());
        let mut out = vec![F::zero(); b * co * pos];
        let (xs, ks, bs): (&[F], &[F], Option<&[F]>) = (&xd, &kd, bd.as_ref().map(|v| v.as_slice()));
        out.par_chunks_mut(co * pos).enumerate().for_each(|(bi, ob)| {
            let mut col = vec![F::zero(); rows * pos];
            g.im2col(&xs[bi * vol..(bi + 1) * vol], &mut col);
            gemm(co, rows, pos, ks, false, &col, false, F::zero(), ob);
            if let Some(bd) = bs {
                for (oc, chunk) in ob.chunks_mut(pos).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        });
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let flags = (self.requires_grad(), kernel.requires_grad(), bias.is_some_and(|b| b.requires_grad()));
        let has_bias = bias.is_some();
        Tensor::from_op(OP, out, vec![b, co, out_dims[0], out_dims[1], out_dims[2]], parents, move |gout| {
            let dx = flags.0.then(|| {
                let mut dx = vec![F::zero(); b * vol];
                let ks: &[F] = &kd;
                dx.par_chunks_mut(vol).enumerate().for_each(|(bi, dxb)| {
                    let mut dcol = vec![F::zero(); rows * pos];
                    gemm(rows, co, pos, ks, true, &gout[bi * co * pos..], false, F::zero(), &mut dcol);
                    g.col2im(&dcol, dxb);
                });
                dx
            });
            let dk = flags.1.then(|| {
                let mut dk = vec![F::zero(); co * rows];
                let mut col = vec![F::zero(); rows * pos];
                for bi in 0..b {
                    g.im2col(&xd[bi * vol..(bi + 1) * vol], &mut col);
                    let beta = if bi == 0 { F::zero() } else { F::one() };
                    gemm(co, pos, rows, &gout[bi * co * pos..], false, &col, true, beta, &mut dk);
                }
                dk
            });
            let mut grads = vec![dx, dk];
            if has_bias {
                grads.push(flags.2.then(|| channel_sums(gout, b, co, pos)));
            }
            grads
        })
    }

    /// Transposed convolution. `input [B, C_in, T, H, W]`,
    /// `kernel [C_in, C_out, kt, kh, kw]`, optional bias `[C_out]`; the output
    /// extent per axis is `(n - 1)·s + k - 2p`.
    pub fn conv_transpose3d(&self, kernel: &Tensor<F>, bias: Option<&Tensor<F>>, geom: Conv3dGeometry) -> Result<Tensor<F>> {
        const OP: &str = "conv_transpose3d";
        let [b, ci, t, h, w] = check_5d(OP, self)?;
        let [kci, co, kt, kh, kw] = check_5d(OP, kernel)?;
        if kci != ci {
            return Err(Error::Dim {
                op: OP,
                axis: 1,
                expected: kci,
                got: ci,
            });
        }
        check_bias(OP, bias, co)?;
        let in_dims = [t, h, w];
        let k = [kt, kh, kw];
        let mut out_dims = [0; 3];
        for ax in 0..3 {
            out_dims[ax] =
                conv_transpose3d_out_len(in_dims[ax], k[ax], geom.stride[ax], geom.padding[ax]).ok_or(Error::Dim {
                    op: OP,
                    axis: ax + 2,
                    expected: k[ax],
                    got: in_dims[ax],
                })?;
        }
        // The transposed conv is the adjoint of a conv reading `out_dims`.
        let g = ColGeom {
            c: co,
            dims: out_dims,
            k,
            stride: geom.stride,
            pad: geom.padding,
            out: in_dims,
        };
        let (rows, pos, vol) = (g.rows(), g.positions(), g.volume());
        let xd = self.data_rc();
        let kd = kernel.data_rc();
        let bd = bias.map(|b| b.data_rc());
        let mut out = vec![F::zero(); b * vol];
        let (xs, ks, bs): (&[F], &[F], Option<&[F]>) = (&xd, &kd, bd.as_ref().map(|v| v.as_slice()));
        out.par_chunks_mut(vol).enumerate().for_each(|(bi, ob)| {
            let mut col = vec![F::zero(); rows * pos];
            gemm(rows, ci, pos, ks, true, &xs[bi * ci * pos..], false, F::zero(), &mut col);
            g.col2im(&col, ob);
            if let Some(bd) = bs {
                let per = vol / co;
                for (oc, chunk) in ob.chunks_mut(per).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        });
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let flags = (self.requires_grad(), kernel.requires_grad(), bias.is_some_and(|b| b.requires_grad()));
        let has_bias = bias.is_some();
        Tensor::from_op(OP, out, vec![b, co, out_dims[0], out_dims[1], out_dims[2]], parents, move |gout| {
            let dx = flags.0.then(|| {
                let mut dx = vec![F::zero(); b * ci * pos];
                let ks: &[F] = &kd;
                dx.par_chunks_mut(ci * pos).enumerate().for_each(|(bi, dxb)| {
                    let mut col = vec![F::zero(); rows * pos];
                    g.im2col(&gout[bi * vol..(bi + 1) * vol], &mut col);
                    gemm(ci, rows, pos, ks, false, &col, false, F::zero(), dxb);
                });
                dx
            });
            let dk = flags.1.then(|| {
                let mut dk = vec![F::zero(); ci * rows];
                let mut col = vec![F::zero(); rows * pos];
                for bi in 0..b {
                    g.im2col(&gout[bi * vol..(bi + 1) * vol], &mut col);
                    let beta = if bi == 0 { F::zero() } else { F::one() };
                    gemm(ci, pos, rows, &xd[bi * ci * pos..], false, &col, true, beta, &mut dk);
                }
                dk
            });
            let mut grads = vec![dx, dk];
            if has_bias {
                grads.push(flags.2.then(|| channel_sums(gout, b, co, vol / co)));
            }
            grads
        })
    }
}

fn channel_sums<F: Float>(g: &[F], b: usize, c: usize, per: usize) -> Vec<F> {
    let mut out = vec![F::zero(); c];
    for bi in 0..b {
        for (ch, o) in out.iter_mut().enumerate() {
            let s = (bi * c + ch) * per;
            *o += g[s..s + per].iter().copied().sum::<F>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct six-nested-loop convolution.
    fn naive_conv3d(x: &Tensor<f64>, k: &Tensor<f64>, s: [usize; 3], p: [usize; 3]) -> Vec<f64> {
        let [b, c, t, h, w] = <[usize; 5]>::try_from(x.shape()).unwrap();
        let [co, _, kt, kh, kw] = <[usize; 5]>::try_from(k.shape()).unwrap();
        let to = (t + 2 * p[0] - kt) / s[0] + 1;
        let ho = (h + 2 * p[1] - kh) / s[1] + 1;
        let wo = (w + 2 * p[2] - kw) / s[2] + 1;
        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![0.0; b * co * to * ho * wo];
        for bi in 0..b {
            for oc in 0..co {
                for a in 0..to {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for ic in 0..c {
                                for da in 0..kt {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            let ti = (a * s[0] + da) as isize - p[0] as isize;
                                            let hi = (i * s[1] + di) as isize - p[1] as isize;
                                            let wi = (j * s[2] + dj) as isize - p[2] as isize;
                                            if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= w as isize {
                                                continue;
                                            }
                                            let xv = xd[(((bi * c + ic) * t + ti as usize) * h + hi as usize) * w + wi as usize];
                                            let kv = kd[(((oc * c + ic) * kt + da) * kh + di) * kw + dj];
                                            acc += xv * kv;
                                        }
                                    }
                                }
                            }
                            out[(((bi * co + oc) * to + a) * ho + i) * wo + j] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter-accumulate definition of the transposed convolution.
    fn naive_conv_transpose3d(x: &Tensor<f64>, k: &Tensor<f64>, s: [usize; 3], p: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
        let [b, ci, t, h, w] = <[usize; 5]>::try_from(x.shape()).unwrap();
        let [_, co, kt, kh, kw] = <[usize; 5]>::try_from(k.shape()).unwrap();
        let od = [(t - 1) * s[0] + kt - 2 * p[0], (h - 1) * s[1] + kh - 2 * p[1], (w - 1) * s[2] + kw - 2 * p[2]];
        let mut out = vec![0.0; b * co * od[0] * od[1] * od[2]];
        let (xd, kd) = (x.data(), k.data());
        for bi in 0..b {
            for ic in 0..ci {
                for a in 0..t {
                    for i in 0..h {
                        for j in 0..w {
                            let xv = xd[(((bi * ci + ic) * t + a) * h + i) * w + j];
                            for oc in 0..co {
                                for da in 0..kt {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            let ta = (a * s[0] + da) as isize - p[0] as isize;
                                            let ti = (i * s[1] + di) as isize - p[1] as isize;
                                            let tj = (j * s[2] + dj) as isize - p[2] as isize;
                                            if ta < 0 || ti < 0 || tj < 0 || ta >= od[0] as isize || ti >= od[1] as isize || tj >= od[2] as isize {
                                                continue;
                                            }
                                            let kv = kd[(((ic * co + oc) * kt + da) * kh + di) * kw + dj];
                                            out[(((bi * co + oc) * od[0] + ta as usize) * od[1] + ti as usize) * od[2] + tj as usize] += xv * kv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, od)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 1, 3, 4, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1, 1]);
        assert_eq!(x.conv3d(&k, None, Conv3dGeometry::unit()).unwrap().to_vec(), x.to_vec());
        assert_eq!(x.conv_transpose3d(&k, None, Conv3dGeometry::unit()).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_strided() {
        let x = Tensor::<f64>::ones(&[1, 2, 4, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 2, 2, 2, 2]);
        let y = x.conv3d(&k, None, Conv3dGeometry::new([2; 3], [0; 3])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 16.0));
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[2, 3, 2, 3, 3], 1.0, &mut rng);
        for (s, p) in [([1, 1, 1], [0, 0, 0]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 1], [0, 1, 2])] {
            let y = x.conv3d(&k, None, Conv3dGeometry::new(s, p)).unwrap();
            let oracle = naive_conv3d(&x, &k, s, p);
            assert!(max_abs_diff(y.data(), &oracle) < 1e-10, "stride {s:?} pad {p:?}");
        }
    }

    #[test]
    fn transpose_matches_scatter_oracle_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 8, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 2, 4, 4, 4], 1.0, &mut rng);
        let geom = Conv3dGeometry::new([2; 3], [1; 3]);
        let y = x.conv_transpose3d(&k, None, geom).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 16, 16]);
        let (oracle, od) = naive_conv_transpose3d(&x, &k, [2; 3], [1; 3]);
        assert_eq!(od, [8, 16, 16]);
        assert!(max_abs_diff(y.data(), &oracle) < 1e-10);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let k = Tensor::<f64>::ones(&[2, 1, 1, 1, 1]);
        let b = Tensor::<f64>::from_f64(&[1.0, -2.0], &[2]).unwrap();
        let y = x.conv3d(&k, Some(&b), Conv3dGeometry::unit()).unwrap();
        assert_eq!(&y.data()[..8], &[1.0; 8]);
        assert_eq!(&y.data()[8..], &[-2.0; 8]);
    }

    #[test]
    fn mismatched_channels_report_axis() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        let k = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        assert!(matches!(x.conv3d(&k, None, Conv3dGeometry::unit()), Err(Error::Dim { axis: 1, .. })));
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(x.conv3d(&k, None, Conv3dGeometry::unit()), Err(Error::Dim { axis: 2, .. })));
    }

    #[test]
    fn out_len_algebra_inverts() {
        for n in [2, 4, 8, 16, 32] {
            let down = conv3d_out_len(n, 4, 2, 1).unwrap();
            assert_eq!(down, n / 2);
            assert_eq!(conv_transpose3d_out_len(down, 4, 2, 1), Some(n));
            assert_eq!(conv_transpose3d_out_len(n, 3, 1, 1), Some(n));
        }
    }
}
