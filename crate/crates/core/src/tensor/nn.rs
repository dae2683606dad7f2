//! Neural-network operators: normalization, pooling, resampling, dense
//! layers, softmax and row selection.

use super::{numel, record_macs, Element, Tensor};
use crate::error::{Error, Result};

fn expect_rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, "rank", format!("expected [N,C,H,W], got {:?}", t.shape()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T: Element> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel normalization over `(N, H, W)` followed by `gamma * x + beta`.
pub fn batchnorm2d<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    const OP: &str = "batchnorm2d";
    let (n, c, h, w) = expect_rank4(OP, input)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(OP, 1, format!("affine params must be [{c}]")));
    }
    if stats.eps <= 0.0 {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let plane = h * w;
    let m = n * plane;
    if mode == NormMode::Train && m < 2 {
        return Err(Error::InsufficientStatistics { op: OP, count: m });
    }
    let eps = T::from_f64_lossy(stats.eps);
    let xd = input.data();
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum();
                }
                let mu = s / T::from_usize(m).unwrap();
                let mut v = T::zero();
                for b in 0..n {
                    for &x in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        v = v + (x - mu) * (x - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / T::from_usize(m).unwrap();
            }
            let mom = T::from_f64_lossy(stats.momentum);
            let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
            stats.running_mean.update_data(|rm| {
                rm.iter_mut().zip(&mean).for_each(|(r, &b)| *r = (T::one() - mom) * *r + mom * b)
            });
            stats.running_var.update_data(|rv| {
                rv.iter_mut().zip(&var).for_each(|(r, &b)| *r = (T::one() - mom) * *r + mom * b * unbias)
            });
            (mean, var)
        }
        NormMode::Eval => (stats.running_mean.to_vec(), stats.running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gd = gamma.to_vec();
    let bd = beta.to_vec();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for ((o, xh), &x) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xd[r]) {
                *xh = (x - mean[ch]) * inv_std[ch];
                *o = gd[ch] * *xh + bd[ch];
            }
        }
    }
    drop(xd);
    let gc = gamma.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, c, h, w],
        OP,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gd = gc.data();
            let mut dx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mf = T::from_usize(m).unwrap();
            for ch in 0..c {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for b in 0..n {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        sg = sg + gv;
                        sgx = sgx + gv * xh;
                    }
                }
                dgamma[ch] = sgx;
                dbeta[ch] = sg;
                let scale = gd[ch] * inv_std[ch];
                for b in 0..n {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for ((d, &gv), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                        *d = match mode {
                            NormMode::Train => scale * (gv - sg / mf - xh * sgx / mf),
                            NormMode::Eval => scale * gv,
                        };
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    ))
}

fn pool_geometry(op: &'static str, h: usize, w: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(op, "kernel and stride must be positive"));
    }
    if kernel > h || kernel > w {
        return Err(Error::dim(op, 2, format!("kernel {kernel} exceeds spatial extent {h}x{w}")));
    }
    Ok(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

pub fn avg_pool2d<T: Element>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    const OP: &str = "avg_pool2d";
    let (n, c, h, w) = expect_rank4(OP, input)?;
    let (ho, wo) = pool_geometry(OP, h, w, kernel, stride)?;
    let area = T::from_usize(kernel * kernel).unwrap();
    let mut out = vec![T::zero(); n * c * ho * wo];
    {
        let xd = input.data();
        for (p, chunk) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for i in 0..kernel {
                        for j in 0..kernel {
                            s = s + src[(oh * stride + i) * w + ow * stride + j];
                        }
                    }
                    chunk[oh * wo + ow] = s / area;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, ho, wo],
        OP,
        vec![input.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for (p, gch) in g.chunks(ho * wo).enumerate() {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = gch[oh * wo + ow] / area;
                        for i in 0..kernel {
                            for j in 0..kernel {
                                let idx = (oh * stride + i) * w + ow * stride + j;
                                dst[idx] = dst[idx] + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

pub fn max_pool2d<T: Element>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    const OP: &str = "max_pool2d";
    let (n, c, h, w) = expect_rank4(OP, input)?;
    let (ho, wo) = pool_geometry(OP, h, w, kernel, stride)?;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    {
        let xd = input.data();
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = (oh * stride) * w + ow * stride;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let idx = (oh * stride + i) * w + ow * stride + j;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out[p * ho * wo + oh * wo + ow] = src[best];
                    arg[p * ho * wo + oh * wo + ow] = p * h * w + best;
                }
            }
        }
    }
    super::record_branches(arg.iter().map(|&a| a as u64));
    let total = n * c * h * w;
    Ok(Tensor::from_op(
        out,
        vec![n, c, ho, wo],
        OP,
        vec![input.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); total];
            for (&a, &gv) in arg.iter().zip(g) {
                dx[a] = dx[a] + gv;
            }
            vec![Some(dx)]
        }),
    ))
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, _, _) = expect_rank4("global_avg_pool", input)?;
    input.mean_to(&[n, c, 1, 1])
}

/// Replicates every pixel into a `factor x factor` block.
pub fn nearest_upsample<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "nearest_upsample";
    let (n, c, h, w) = expect_rank4(OP, input)?;
    if factor == 0 {
        return Err(Error::invalid(OP, "factor must be at least 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    {
        let xd = input.data();
        for p in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out[p * ho * wo + oh * wo + ow] = xd[p * h * w + (oh / factor) * w + ow / factor];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, ho, wo],
        OP,
        vec![input.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let idx = p * h * w + (oh / factor) * w + ow / factor;
                        dx[idx] = dx[idx] + g[p * ho * wo + oh * wo + ow];
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// `x: [N, in]`, `weight: [out, in]`, `bias: [out]` -> `[N, out]`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let (rows, fin) = match *x.shape() {
        [r, f] => (r, f),
        _ => return Err(Error::dim(OP, "rank", format!("expected [N, in], got {:?}", x.shape()))),
    };
    let fout = match *weight.shape() {
        [o, i] if i == fin => o,
        _ => return Err(Error::dim(OP, 1, format!("weight {:?} incompatible with input {:?}", weight.shape(), x.shape()))),
    };
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::dim(OP, "bias", format!("expected [{fout}], got {:?}", b.shape())));
        }
    }
    record_macs((rows * fin * fout) as u64);
    let mut out = vec![T::zero(); rows * fout];
    T::gemm(rows, fin, fout, &x.data(), false, &weight.data(), true, &mut out, T::zero());
    if let Some(b) = bias {
        let bd = b.data();
        out.chunks_mut(fout).for_each(|r| r.iter_mut().zip(bd.iter()).for_each(|(o, &bv)| *o = *o + bv));
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (xc, wc) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        out,
        vec![rows, fout],
        OP,
        inputs,
        Box::new(move |g| {
            let mut dx = vec![T::zero(); rows * fin];
            let mut dw = vec![T::zero(); fout * fin];
            T::gemm(rows, fout, fin, g, false, &wc.data(), false, &mut dx, T::zero());
            T::gemm(fout, rows, fin, g, true, &xc.data(), false, &mut dw, T::zero());
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![T::zero(); fout];
                g.chunks(fout).for_each(|r| db.iter_mut().zip(r).for_each(|(d, &v)| *d = *d + v));
                grads.push(Some(db));
            }
            grads
        }),
    ))
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::dim("softmax", axis, format!("axis out of range for shape {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(
        out,
        shape,
        "softmax",
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * saved[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` over rows.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "cross_entropy";
    let (rows, k) = match *logits.shape() {
        [r, k] => (r, k),
        _ => return Err(Error::dim(OP, "rank", format!("expected [B, K], got {:?}", logits.shape()))),
    };
    if labels.len() != rows {
        return Err(Error::dim(OP, 0, format!("{rows} rows vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { op: OP, index: bad, extent: k, detail: "label out of range" });
    }
    let probs = softmax(&logits.detach(), 1)?.to_vec();
    let loss: T = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs[r * k + l].max(T::min_positive_value()).ln())
        .sum::<T>()
        / T::from_usize(rows).unwrap();
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        OP,
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[0] / T::from_usize(rows).unwrap();
            let mut dx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * k + l] = dx[r * k + l] - T::one();
            }
            dx.iter_mut().for_each(|v| *v = *v * scale);
            vec![Some(dx)]
        }),
    ))
}

fn check_indices(op: &'static str, indices: &[usize], extent: usize) -> Result<()> {
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= extent {
            return Err(Error::Index { op, index: idx, extent, detail: "out of range" });
        }
        if i > 0 && indices[i - 1] >= idx {
            return Err(Error::Index { op, index: idx, extent, detail: "indices must be strictly increasing" });
        }
    }
    Ok(())
}

/// Selects rows (axis 0). An empty index list yields a zero-row tensor.
pub fn gather_rows<T: Element>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "gather_frames";
    let shape = x.shape().to_vec();
    check_indices(OP, indices, shape[0])?;
    let row = numel(&shape[1..]);
    let mut out = Vec::with_capacity(indices.len() * row);
    {
        let d = x.data();
        for &i in indices {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
    }
    let mut out_shape = shape.clone();
    out_shape[0] = indices.len();
    let idx = indices.to_vec();
    let total = x.numel();
    Ok(Tensor::from_op(
        out,
        out_shape,
        OP,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); total];
            for (k, &i) in idx.iter().enumerate() {
                dx[i * row..(i + 1) * row].copy_from_slice(&g[k * row..(k + 1) * row]);
            }
            vec![Some(dx)]
        }),
    ))
}

/// Inverse of [`gather_rows`]: writes rows at `indices`, zeros elsewhere.
pub fn scatter_rows<T: Element>(values: &Tensor<T>, indices: &[usize], rows: usize) -> Result<Tensor<T>> {
    const OP: &str = "scatter_frames";
    let shape = values.shape().to_vec();
    if shape[0] != indices.len() {
        return Err(Error::dim(OP, 0, format!("{} value rows vs {} indices", shape[0], indices.len())));
    }
    check_indices(OP, indices, rows)?;
    let row = numel(&shape[1..]);
    let mut out = vec![T::zero(); rows * row];
    {
        let d = values.data();
        for (k, &i) in indices.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&d[k * row..(k + 1) * row]);
        }
    }
    let mut out_shape = shape.clone();
    out_shape[0] = rows;
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        out,
        out_shape,
        OP,
        vec![values.clone()],
        Box::new(move |g| {
            let mut dv = Vec::with_capacity(idx.len() * row);
            for &i in &idx {
                dv.extend_from_slice(&g[i * row..(i + 1) * row]);
            }
            vec![Some(dv)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_largest() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().to_vec(), vec![4.0]);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5);
        assert!(avg_pool2d(&x, 2, 2).unwrap().to_vec().iter().all(|&v| v == 2.5));
        assert!(max_pool2d(&x, 3, 1).unwrap().to_vec().iter().all(|&v| v == 2.5));
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.shape(), &[2, 3, 1, 1]);
        assert!(g.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn pool_kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let x = Tensor::<f64>::param(vec![5.0], &[1, 1, 1, 1]).unwrap();
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0; 4]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        let z = Tensor::<f64>::from_f64(&[1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        assert_eq!(nearest_upsample(&z, 1).unwrap().to_vec(), z.to_vec());
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let x = Tensor::<f64>::from_f64(&[0.3, 0.3], &[1, 2]).unwrap();
        assert_eq!(softmax(&x, 1).unwrap().to_vec(), vec![0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln_k() {
        let x = Tensor::<f64>::zeros(&[3, 5]);
        let ce = cross_entropy(&x, &[0, 4, 2]).unwrap().item();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let s = BatchNormStats::new(2);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            batchnorm2d(&x, &g, &b, &s, NormMode::Train),
            Err(Error::InsufficientStatistics { .. })
        ));
    }

    #[test]
    fn batchnorm_eval_defaults_are_near_identity() {
        let x = Tensor::<f64>::from_f64(&[0.5, -1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let s = BatchNormStats::new(1);
        let y = batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &s, NormMode::Eval).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 23) as f64).sin() * 3.0 + 1.0).collect();
        let x = Tensor::<f64>::from_f64(&vals, &[2, 3, 4, 4]).unwrap();
        let s = BatchNormStats::new(3);
        let y = batchnorm2d(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &s, NormMode::Train).unwrap();
        let d = y.to_vec();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| d[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // running stats moved 10% toward the batch statistics
        assert!(s.running_mean.to_vec().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn gather_scatter_edge_cases() {
        let x = Tensor::<f64>::from_f64(&(0..12).map(f64::from).collect::<Vec<_>>(), &[3, 2, 1, 2]).unwrap();
        assert_eq!(gather_rows(&x, &[0, 1, 2]).unwrap().to_vec(), x.to_vec());
        let empty = gather_rows(&x, &[]).unwrap();
        let back = scatter_rows(&empty, &[], 3).unwrap();
        assert_eq!(back.shape(), &[3, 2, 1, 2]);
        assert!(back.to_vec().iter().all(|&v| v == 0.0));
        assert!(gather_rows(&x, &[1, 1]).is_err());
        assert!(gather_rows(&x, &[3]).is_err());
    }
}
