//! Raw compute kernels shared by tape forward and backward passes.
//!
//! conv2d and conv_transpose2d are exact adjoints of each other, so the
//! backward of one reuses the forward kernel of the other:
//!   - d(conv2d)/dx   = scatter (the conv_transpose forward)
//!   - d(convT2d)/dx  = gather  (the conv2d forward)
//! Weight gradients for both are the `weight_grad` correlation kernel.

use super::Scalar;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// Output spatial size of a stride-`s`, pad-`p`, kernel-`k` convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// Output spatial size of the transposed convolution.
pub fn convt_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input - 1) * stride + k).checked_sub(2 * pad)
}

/// Cross-correlation: x[B,C,H,W] * w[F,C,k,k] (+ bias[F]) -> out[B,F,H',W'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad).unwrap();
    let ow = conv_out_dim(wd, k, stride, pad).unwrap();
    let mut out = vec![T::zero(); b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            let obase = (bi * f + fi) * oh * ow;
            if let Some(bias) = bias {
                let bv = bias[fi];
                for o in &mut out[obase..obase + oh * ow] {
                    *o = bv;
                }
            }
            for ci in 0..c {
                let xbase = (bi * c + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((fi * c + ci) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        accumulate_corr(
                            &x[xbase..xbase + h * wd],
                            &mut out[obase..obase + oh * ow],
                            wv,
                            h,
                            wd,
                            oh,
                            ow,
                            ky,
                            kx,
                            stride,
                            pad,
                        );
                    }
                }
            }
        }
    }
    out
}

/// out[oy,ox] += wv * x[oy*s+ky-p, ox*s+kx-p] over the valid range.
#[allow(clippy::too_many_arguments)]
fn accumulate_corr<T: Scalar>(
    x: &[T],
    out: &mut [T],
    wv: T,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let xrow = iy as usize * w;
        let orow = oy * ow;
        for ox in 0..ow {
            let ix = (ox * stride + kx) as isize - pad as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            out[orow + ox] = out[orow + ox] + wv * x[xrow + ix as usize];
        }
    }
}

/// Scatter (transposed convolution): x[B,Cin,H,W] * w[Cin,Cout,k,k] (+ bias[Cout])
/// -> out[B,Cout,(H-1)s-2p+k, ...]. Also the dx of conv2d when fed dout and the
/// conv weights (with Cin=F, Cout=C).
#[allow(clippy::too_many_arguments)]
pub fn convt2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = convt_out_dim(h, k, stride, pad).unwrap();
    let ow = convt_out_dim(wd, k, stride, pad).unwrap();
    let mut out = vec![T::zero(); b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            if let Some(bias) = bias {
                let bv = bias[co];
                for o in &mut out[obase..obase + oh * ow] {
                    *o = bv;
                }
            }
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((ci * cout + co) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        // out[iy*s+ky-p, ix*s+kx-p] += wv * x[iy, ix]
                        for iy in 0..h {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let orow = obase + oy as usize * ow;
                            let xrow = xbase + iy * wd;
                            for ix in 0..wd {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[orow + ox as usize] = out[orow + ox as usize] + wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// dw[F,C,k,k] for conv2d: correlation of dout[B,F,OH,OW] against x[B,C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_dw<T: Scalar>(
    dout: &[T],
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad).unwrap();
    let ow = conv_out_dim(wd, k, stride, pad).unwrap();
    let mut dw = vec![T::zero(); f * c * k * k];
    for bi in 0..b {
        for fi in 0..f {
            let obase = (bi * f + fi) * oh * ow;
            for ci in 0..c {
                let xbase = (bi * c + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let orow = obase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc + dout[orow + ox] * x[xrow + ix as usize];
                            }
                        }
                        let wi = ((fi * c + ci) * k + ky) * k + kx;
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
    dw
}

/// dw[Cin,Cout,k,k] for conv_transpose2d: dout is [B,Cout,OH,OW], x is [B,Cin,H,W].
#[allow(clippy::too_many_arguments)]
pub fn convt2d_dw<T: Scalar>(
    dout: &[T],
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = convt_out_dim(h, k, stride, pad).unwrap();
    let ow = convt_out_dim(wd, k, stride, pad).unwrap();
    let mut dw = vec![T::zero(); cin * cout * k * k];
    for bi in 0..b {
        for ci in 0..cin {
            let xbase = (bi * cin + ci) * h * wd;
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for iy in 0..h {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let orow = obase + oy as usize * ow;
                            let xrow = xbase + iy * wd;
                            for ix in 0..wd {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                acc = acc + dout[orow + ox as usize] * x[xrow + ix];
                            }
                        }
                        let wi = ((ci * cout + co) * k + ky) * k + kx;
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
    dw
}

/// Per-output-channel sum of dout over batch and space (bias gradient).
pub fn channel_sums<T: Scalar>(dout: &[T], b: usize, f: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); f];
    for bi in 0..b {
        for fi in 0..f {
            let base = (bi * f + fi) * spatial;
            let mut acc = T::zero();
            for &g in &dout[base..base + spatial] {
                acc = acc + g;
            }
            db[fi] = db[fi] + acc;
        }
    }
    db
}

/// Separable k x k box average, stride 1, no padding: [B,C,H,W] -> [B,C,H-k+1,W-k+1].
pub fn avg_pool_fwd<T: Scalar>(x: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let planes = b * c;
    // horizontal pass: [h, w] -> [h, ow]
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &xp[y * w..(y + 1) * w];
            let mut s = T::zero();
            for &v in &row[..k] {
                s = s + v;
            }
            tmp[y * ow] = s;
            for x0 in 1..ow {
                s = s + row[x0 + k - 1] - row[x0 - 1];
                tmp[y * ow + x0] = s;
            }
        }
        // vertical pass
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for x0 in 0..ow {
            let mut s = T::zero();
            for y in 0..k {
                s = s + tmp[y * ow + x0];
            }
            op[x0] = s * inv;
            for y0 in 1..oh {
                s = s + tmp[(y0 + k - 1) * ow + x0] - tmp[(y0 - 1) * ow + x0];
                op[y0 * ow + x0] = s * inv;
            }
        }
    }
    out
}

/// Backward of the box average: spread each output grad over its window.
pub fn avg_pool_bwd<T: Scalar>(dout: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let planes = b * c;
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dop = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dop[oy * ow + ox] * inv;
                if g == T::zero() {
                    continue;
                }
                for ky in 0..k {
                    let row = (oy + ky) * w + ox;
                    for kx in 0..k {
                        dxp[row + kx] = dxp[row + kx] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear sampling of src[B,C,H,W] at coords[B,2,Hc,Wc] (channel 0 = u/x,
/// channel 1 = v/y, in pixel units). Out-of-bounds taps read as zero. The
/// sub-cell is the half-open cell [floor(u), floor(u)+1).
pub fn bilinear_fwd<T: Scalar>(
    src: &[T],
    coords: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    hc: usize,
    wc: usize,
) -> Vec<T> {
    let n = hc * wc;
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        let ubase = bi * 2 * n;
        let vbase = ubase + n;
        for i in 0..n {
            let u = coords[ubase + i].to_f64();
            let v = coords[vbase + i].to_f64();
            if !u.is_finite() || !v.is_finite() {
                continue;
            }
            let x0 = u.floor();
            let y0 = v.floor();
            let fx = T::from_f64(u - x0);
            let fy = T::from_f64(v - y0);
            let x0 = x0 as i64;
            let y0 = y0 as i64;
            let one = T::one();
            for ci in 0..c {
                let sp = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let tap = |yy: i64, xx: i64| -> T {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        T::zero()
                    } else {
                        sp[yy as usize * w + xx as usize]
                    }
                };
                let v00 = tap(y0, x0);
                let v01 = tap(y0, x0 + 1);
                let v10 = tap(y0 + 1, x0);
                let v11 = tap(y0 + 1, x0 + 1);
                let top = v00 * (one - fx) + v01 * fx;
                let bot = v10 * (one - fx) + v11 * fx;
                out[(bi * c + ci) * n + i] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

/// Backward of bilinear sampling: gradients w.r.t. src and coords.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_bwd<T: Scalar>(
    dout: &[T],
    src: &[T],
    coords: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    hc: usize,
    wc: usize,
) -> (Vec<T>, Vec<T>) {
    let n = hc * wc;
    let mut dsrc = vec![T::zero(); b * c * h * w];
    let mut dcoords = vec![T::zero(); b * 2 * n];
    for bi in 0..b {
        let ubase = bi * 2 * n;
        let vbase = ubase + n;
        for i in 0..n {
            let u = coords[ubase + i].to_f64();
            let v = coords[vbase + i].to_f64();
            if !u.is_finite() || !v.is_finite() {
                continue;
            }
            let x0f = u.floor();
            let y0f = v.floor();
            let fx = T::from_f64(u - x0f);
            let fy = T::from_f64(v - y0f);
            let x0 = x0f as i64;
            let y0 = y0f as i64;
            let one = T::one();
            let mut du = T::zero();
            let mut dv = T::zero();
            for ci in 0..c {
                let g = dout[(bi * c + ci) * n + i];
                if g == T::zero() {
                    continue;
                }
                let plane = (bi * c + ci) * h * w;
                let sp = &src[plane..plane + h * w];
                let tap = |yy: i64, xx: i64| -> T {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        T::zero()
                    } else {
                        sp[yy as usize * w + xx as usize]
                    }
                };
                let v00 = tap(y0, x0);
                let v01 = tap(y0, x0 + 1);
                let v10 = tap(y0 + 1, x0);
                let v11 = tap(y0 + 1, x0 + 1);
                // d/dsrc: bilinear weights
                let mut scatter = |yy: i64, xx: i64, wgt: T| {
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        let idx = plane + yy as usize * w + xx as usize;
                        dsrc[idx] = dsrc[idx] + g * wgt;
                    }
                };
                scatter(y0, x0, (one - fx) * (one - fy));
                scatter(y0, x0 + 1, fx * (one - fy));
                scatter(y0 + 1, x0, (one - fx) * fy);
                scatter(y0 + 1, x0 + 1, fx * fy);
                // d/dcoords: spatial derivative of the interpolant
                du = du + g * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                dv = dv + g * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
            }
            dcoords[ubase + i] = du;
            dcoords[vbase + i] = dv;
        }
    }
    (dsrc, dcoords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 3x3 kernel with center 1: output equals input under pad 1.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d_fwd(&x, &w, None, 1, 1, 3, 3, 1, 3, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_stride2() {
        // 4x4 ones, 2x2 ones kernel, stride 2 -> 2x2 of fours.
        let x = vec![1.0f64; 16];
        let w = vec![1.0f64; 4];
        let y = conv2d_fwd(&x, &w, None, 1, 1, 4, 4, 1, 2, 2, 0);
        assert_eq!(y, vec![4.0; 4]);
    }

    #[test]
    fn convt_output_shape() {
        // 2x2 input, stride 2, k 2, pad 0 -> 4x4.
        assert_eq!(convt_out_dim(2, 2, 2, 0), Some(4));
        let x = vec![1.0f64; 4];
        let w = vec![1.0f64; 4];
        let y = convt2d_fwd(&x, &w, None, 1, 1, 2, 2, 1, 2, 2, 0);
        assert_eq!(y.len(), 16);
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_and_convt_are_adjoint() {
        // <conv(x), y> == <x, convT(y)> for random-ish x, y, same weights.
        let (b, c, h, w, f, k, s, p) = (1usize, 2usize, 5usize, 6usize, 3usize, 3usize, 2usize, 1usize);
        let oh = conv_out_dim(h, k, s, p).unwrap();
        let ow = conv_out_dim(w, k, s, p).unwrap();
        let x: Vec<f64> = (0..b * c * h * w).map(|i| ((i * 37 + 11) % 17) as f64 * 0.1 - 0.8).collect();
        let wt: Vec<f64> = (0..f * c * k * k).map(|i| ((i * 53 + 7) % 13) as f64 * 0.05 - 0.3).collect();
        let y: Vec<f64> = (0..b * f * oh * ow).map(|i| ((i * 29 + 3) % 19) as f64 * 0.1 - 0.9).collect();
        let cx = conv2d_fwd(&x, &wt, None, b, c, h, w, f, k, s, p);
        let cty = convt2d_fwd(&y, &wt, None, b, f, oh, ow, c, k, s, p);
        assert_eq!(cty.len(), x.len());
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&cty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn avg_pool_constant() {
        let x = vec![7.0f64; 2 * 8 * 9];
        let y = avg_pool_fwd(&x, 1, 2, 8, 9, 3);
        assert_eq!(y.len(), 2 * 6 * 7);
        assert!(y.iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_identity_grid() {
        let (h, w) = (4, 5);
        let src: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let mut coords = vec![0.0f64; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                coords[y * w + x] = x as f64;
                coords[h * w + y * w + x] = y as f64;
            }
        }
        let out = bilinear_fwd(&src, &coords, 1, 1, h, w, h, w);
        assert_eq!(out, src);
    }
}
