//! Grouped 2-D convolution lowered to im2col + GEMM.
//!
//! Each (sample, group) pair is one matrix product of the group's weights
//! with that sample's columns `[Cin/g * K * K, Ho * Wo]`, written straight
//! into the output. Pointwise stride-1 convolutions use the input as the
//! column matrix. The backward pass rebuilds columns from the saved input.

use super::{numel, record_macs, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn plane(&self) -> usize {
        self.ho * self.wo
    }
    fn rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[ow_lo, ow_hi)` whose input column `ow * s + kj - p` is in range.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if g.w + p > kj { ((g.w + p - kj - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Columns `[Cin/g * K * K, Ho * Wo]` of one sample's channel group
/// `x: [Cin/g, H, W]`. Every entry is written.
fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_in = g.h * g.w;
    let plane = g.plane();
    for c in 0..g.cin_g() {
        let src = &x[c * plane_in..(c + 1) * plane_in];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    let drow = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kj - p;
                        drow[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (ow, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[(lo + ow) * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns into `dx: [Cin/g, H, W]`.
fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_in = g.h * g.w;
    let plane = g.plane();
    for c in 0..g.cin_g() {
        let dst = &mut dx[c * plane_in..(c + 1) * plane_in];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let srow = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in lo..hi {
                        let iw = ow * s + kj - p;
                        drow[iw] = drow[iw] + srow[ow];
                    }
                }
            }
        }
    }
}

/// `input: [N, Cin, H, W]`, `weight: [Cout, Cin/groups, K, K]`, `bias: [Cout]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(Error::dim(OP, "input rank", format!("expected [N,C,H,W], got {xs:?}")));
    }
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::dim(OP, "weight rank", format!("expected [Cout,Cin/g,K,K], got {ws:?}")));
    }
    if stride == 0 || groups == 0 {
        return Err(Error::invalid(OP, "stride and groups must be positive"));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    if k % 2 == 0 {
        return Err(Error::dim(OP, "kernel", format!("kernel size must be odd, got {k}")));
    }
    if cin % groups != 0 {
        return Err(Error::dim(OP, 1, format!("input channels {cin} not divisible by groups {groups}")));
    }
    if cout % groups != 0 {
        return Err(Error::dim(OP, 0, format!("output channels {cout} not divisible by groups {groups}")));
    }
    if ws[1] != cin / groups {
        return Err(Error::dim(OP, 1, format!("weight expects {} channels per group, input has {}", ws[1], cin / groups)));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::dim(OP, 2, format!("kernel {k} larger than padded input {h}x{w}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(OP, "bias", format!("expected [{cout}], got {:?}", b.shape())));
        }
    }
    let g = Geometry {
        n,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad: padding,
        groups,
        ho: (h + 2 * padding - k) / stride + 1,
        wo: (w + 2 * padding - k) / stride + 1,
    };
    record_macs((g.rows() * g.cout * g.n * g.plane()) as u64);

    let out_shape = vec![n, cout, g.ho, g.wo];
    let mut out = vec![T::zero(); numel(&out_shape)];
    let direct = g.is_pointwise();
    {
        let xd = input.data();
        let wd = weight.data();
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); g.rows() * g.plane()] };
        let (in_len, out_len, w_len) = (g.cin_g() * h * w, g.cout_g() * g.plane(), g.cout_g() * g.rows());
        for b in 0..n {
            for grp in 0..groups {
                let xs = &xd[(b * groups + grp) * in_len..][..in_len];
                let src: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                let dst = &mut out[(b * groups + grp) * out_len..][..out_len];
                T::gemm(g.cout_g(), g.rows(), g.plane(), &wd[grp * w_len..][..w_len], false, src, false, dst, T::zero());
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for (i, chunk) in out.chunks_mut(g.plane()).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (xc, wc) = (input.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        out,
        out_shape,
        OP,
        inputs,
        Box::new(move |gout| {
            let xd = xc.data();
            let wd = wc.data();
            let mut dx = vec![T::zero(); xc.numel()];
            let mut dw = vec![T::zero(); wc.numel()];
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); g.rows() * g.plane()] };
            let mut dcols = cols.clone();
            let (in_len, out_len, w_len) = (g.cin_g() * g.h * g.w, g.cout_g() * g.plane(), g.cout_g() * g.rows());
            for b in 0..g.n {
                for grp in 0..g.groups {
                    let at = (b * g.groups + grp) * in_len;
                    let xs = &xd[at..at + in_len];
                    let gg = &gout[(b * g.groups + grp) * out_len..][..out_len];
                    let wg = &wd[grp * w_len..][..w_len];
                    let src: &[T] = if direct {
                        xs
                    } else {
                        im2col(xs, &g, &mut cols);
                        &cols
                    };
                    // dW_g += G * cols^T
                    T::gemm(g.cout_g(), g.plane(), g.rows(), gg, false, src, true, &mut dw[grp * w_len..][..w_len], T::one());
                    // dcols = W_g^T * G
                    if direct {
                        T::gemm(g.rows(), g.cout_g(), g.plane(), wg, true, gg, false, &mut dx[at..at + in_len], T::zero());
                    } else {
                        T::gemm(g.rows(), g.cout_g(), g.plane(), wg, true, gg, false, &mut dcols, T::zero());
                        col2im(&dcols, &g, &mut dx[at..at + in_len]);
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![T::zero(); g.cout];
                for (i, chunk) in gout.chunks(g.plane()).enumerate() {
                    db[i % g.cout] = db[i % g.cout] + chunk.iter().copied().sum();
                }
                grads.push(Some(db));
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec()[4], 9.0);
        assert_eq!(y.to_vec()[0], 4.0);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::zeros(&[2, 4, 9, 7]);
        let w = Tensor::<f64>::zeros(&[6, 2, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 5, 4]);
    }

    #[test]
    fn zero_group_weight_zeroes_group_outputs() {
        let x = Tensor::<f64>::from_f64(&(0..2 * 4 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), &[2, 4, 5, 5]).unwrap();
        let mut wv: Vec<f64> = (0..4 * 2 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        wv[2 * 18..].iter_mut().for_each(|v| *v = 0.0);
        let w = Tensor::from_vec(wv, &[4, 2, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 1, 1, 2).unwrap();
        let d = y.to_vec();
        for b in 0..2 {
            for c in 2..4 {
                assert!(d[(b * 4 + c) * 25..(b * 4 + c + 1) * 25].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        match conv2d(&x, &w, None, 1, 1, 2) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "1"),
            other => panic!("unexpected {other:?}"),
        }
        let w = Tensor::<f64>::zeros(&[4, 3, 2, 2]);
        assert!(conv2d(&x, &w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn counts_macs() {
        let x = Tensor::<f64>::zeros(&[2, 4, 6, 6]);
        let w = Tensor::<f64>::zeros(&[8, 2, 3, 3]);
        let counter = crate::tensor::MacCounter::start();
        conv2d(&x, &w, None, 1, 1, 2).unwrap();
        // K^2 * (Cin/g) * Cout * Ho * Wo per frame
        assert_eq!(counter.count(), 2 * 9 * 2 * 8 * 36);
    }

    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize, groups: usize) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let [cout, cg, k, _] = ws;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let og = cout / groups;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for oc in 0..cout {
                let grp = oc / og;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cg {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let ic = grp * cg + c;
                                    acc += x[((b * cin + ic) * h + iy as usize) * wd + ix as usize] * w[((oc * cg + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * cout + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::RngState::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn matches_sliding_window_loops() {
        for (groups, k, stride, pad, h) in [(1, 3, 1, 1, 8), (2, 3, 1, 1, 8), (2, 1, 1, 0, 8), (1, 3, 2, 1, 7), (2, 1, 2, 0, 8), (1, 5, 2, 2, 9)] {
            let xs = [2, 4, h, h];
            let ws = [6, 4 / groups, k, k];
            let x = random(xs.iter().product(), 1);
            let w = random(ws.iter().product(), 2);
            let y = conv2d(&Tensor::from_vec(x.clone(), &xs).unwrap(), &Tensor::from_vec(w.clone(), &ws).unwrap(), None, stride, pad, groups).unwrap();
            let want = naive(&x, xs, &w, ws, stride, pad, groups);
            let diff = y.to_vec().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "groups {groups} k {k} stride {stride}: {diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::check_gradients;
        for (groups, k, stride, pad) in [(1, 3, 1, 1), (2, 3, 2, 1), (2, 1, 1, 0), (1, 1, 2, 0)] {
            let x = Tensor::param(random(2 * 4 * 5 * 5, 3), &[2, 4, 5, 5]).unwrap();
            let w = Tensor::param(random(6 * (4 / groups) * k * k, 4), &[6, 4 / groups, k, k]).unwrap();
            let b = Tensor::param(random(6, 5), &[6]).unwrap();
            let probe = Tensor::from_vec(random(2 * 6 * 25, 6), &[2, 6, 5, 5]).unwrap();
            let loss = || {
                let y = conv2d(&x, &w, Some(&b), stride, pad, groups)?;
                let p = probe.narrow(2, 0, y.shape()[2])?.narrow(3, 0, y.shape()[3])?;
                Ok(crate::tensor::mul(&y, &p)?.sum())
            };
            let r = check_gradients(&[x.clone(), w.clone(), b.clone()], loss, 1e-3).unwrap();
            assert!(r.max_rel_err < 1e-4, "groups {groups} k {k} stride {stride}: {r:?}");
        }
    }
}
