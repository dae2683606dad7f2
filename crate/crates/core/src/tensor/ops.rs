//! Elementwise, reduction and shape ops.
//!
//! Binary ops broadcast between operands of equal rank: every axis must
//! either match or be 1 on one side.

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Strides of `src` read against an `out`-shaped iteration (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    src.iter()
        .zip(out)
        .zip(s)
        .map(|((&a, &o), st)| if a == o { st } else { 0 })
        .collect()
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, "rank", format!("{a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, axis, format!("{x} vs {y} in {a:?} vs {b:?}"))),
        })
        .collect()
}

/// Merges adjacent axes that both operands traverse as one run.
fn coalesce(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut o, mut a, mut b) = (vec![out[0]], vec![sa[0]], vec![sb[0]]);
    for d in 1..out.len() {
        let k = o.len() - 1;
        if out[d] == 1 {
            continue;
        }
        if o[k] == 1 || (a[k] == sa[d] * out[d] && b[k] == sb[d] * out[d]) {
            o[k] *= out[d];
            a[k] = sa[d];
            b[k] = sb[d];
        } else {
            o.push(out[d]);
            a.push(sa[d]);
            b.push(sb[d]);
        }
    }
    (o, a, b)
}

/// Visits `(row_start, a_start, b_start, len, a_step, b_step)` for every
/// innermost run of `out`.
fn for_each_run(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        return f(0, 0, 0, 1, 0, 0);
    }
    let (out, sa, sb) = coalesce(out, sa, sb);
    let rank = out.len();
    let inner = out[rank - 1];
    let (sa_in, sb_in) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for outer in 0..n / inner {
        f(outer * inner, ia, ib, inner, sa_in, sb_in);
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Visits `(out_index, a_index, b_index)` for every element of `out`.
fn for_each2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    for_each_run(out, sa, sb, |o, ia, ib, len, sa_in, sb_in| {
        for j in 0..len {
            f(o + j, ia + j * sa_in, ib + j * sb_in);
        }
    });
}

/// Sums `src` (shaped `from`) down onto the broadcastable shape `to`.
pub(crate) fn reduce_to<T: Element>(src: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return src.to_vec();
    }
    let st = broadcast_strides(to, from);
    let mut out = vec![T::zero(); numel(to)];
    for_each2(from, &st, &st, |o, i, _| out[i] = out[i] + src[o]);
    out
}

/// Expands `src` (shaped `from`) to `to`.
pub(crate) fn expand_to<T: Element>(src: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return src.to_vec();
    }
    let sf = broadcast_strides(from, to);
    let mut out = vec![T::zero(); numel(to)];
    for_each2(to, &sf, &sf, |o, i, _| out[o] = src[i]);
    out
}

/// Adds `g[j] * factor(j)` into `dst[at + j * step]`; step 0 sums the run.
#[inline]
fn accumulate_run<T: Element>(dst: &mut [T], at: usize, step: usize, g: &[T], factor: impl Fn(usize) -> T) {
    if step == 0 {
        dst[at] = dst[at] + g.iter().enumerate().map(|(j, &v)| v * factor(j)).sum::<T>();
    } else if step == 1 {
        for (j, (d, &v)) in dst[at..at + g.len()].iter_mut().zip(g).enumerate() {
            *d = *d + v * factor(j);
        }
    } else {
        for (j, &v) in g.iter().enumerate() {
            dst[at + j * step] = dst[at + j * step] + v * factor(j);
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

fn binary<T: Element>(op: BinOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let f = |x: T, y: T| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
    };
    let out: Vec<T> = {
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(numel(&out_shape));
            for_each_run(&out_shape, &sa, &sb, |_, ia, ib, len, sta, stb| match (sta, stb) {
                (1, 1) => out.extend(ad[ia..ia + len].iter().zip(&bd[ib..ib + len]).map(|(&x, &y)| f(x, y))),
                (1, 0) => out.extend(ad[ia..ia + len].iter().map(|&x| f(x, bd[ib]))),
                (0, 1) => out.extend(bd[ib..ib + len].iter().map(|&y| f(ad[ia], y))),
                _ => out.extend((0..len).map(|j| f(ad[ia + j * sta], bd[ib + j * stb]))),
            });
            out
        }
    };
    let (ac, bc) = (a.clone(), b.clone());
    let shape_c = out_shape.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        name,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if ac.shape() == bc.shape() {
                return match op {
                    BinOp::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
                    BinOp::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
                    BinOp::Mul => {
                        let (ad, bd) = (ac.data(), bc.data());
                        vec![
                            Some(g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()),
                            Some(g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()),
                        ]
                    }
                };
            }
            let mut ga = vec![T::zero(); ac.numel()];
            let mut gb = vec![T::zero(); bc.numel()];
            let (ad, bd) = (ac.data(), bc.data());
            let sign = if matches!(op, BinOp::Sub) { -T::one() } else { T::one() };
            for_each_run(&shape_c, &sa, &sb, |o, ia, ib, len, sta, stb| {
                let gr = &g[o..o + len];
                match op {
                    BinOp::Add | BinOp::Sub => {
                        accumulate_run(&mut ga, ia, sta, gr, |_| T::one());
                        accumulate_run(&mut gb, ib, stb, gr, |_| sign);
                    }
                    BinOp::Mul => {
                        accumulate_run(&mut ga, ia, sta, gr, |j| bd[ib + j * stb]);
                        accumulate_run(&mut gb, ib, stb, gr, |j| ad[ia + j * sta]);
                    }
                }
            });
            drop((ad, bd));
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinOp::Add, a, b)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinOp::Sub, a, b)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinOp::Mul, a, b)
}

/// Forward value `hard`, gradient passed straight to `soft`.
pub fn straight_through<T: Element>(hard: &[T], soft: &Tensor<T>) -> Result<Tensor<T>> {
    if hard.len() != soft.numel() {
        return Err(Error::dim("straight_through", 0, format!("{} hard vs {} soft", hard.len(), soft.numel())));
    }
    Ok(Tensor::from_op(
        hard.to_vec(),
        soft.shape().to_vec(),
        "straight_through",
        vec![soft.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    ))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::dim("concat", axis, format!("axis out of range for rank {rank}")));
    }
    for p in parts {
        if p.shape().len() != rank
            || p.shape().iter().enumerate().any(|(d, &e)| d != axis && e != first.shape()[d])
        {
            return Err(Error::dim("concat", axis, format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    {
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (gd, &w) in guards.iter().zip(&widths) {
                out.extend_from_slice(&gd[o * w..(o + 1) * w]);
            }
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total / inner;
    Ok(Tensor::from_op(
        out,
        shape,
        "concat",
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

impl<T: Element> Tensor<T> {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |g| {
                let x = input.data();
                vec![Some(g.iter().zip(x.iter()).zip(&saved).map(|((&g, &x), &y)| g * df(x, y)).collect())]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64_lossy(s);
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64_lossy(c);
        self.unary("add_scalar", |x| x + c, |_, _| T::one())
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Tensor<T> {
        self.unary("one_minus", |x| T::one() - x, |_, _| -T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.trace_threshold(T::zero());
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    fn trace_threshold(&self, t: T) {
        if super::tracing_branches() {
            super::record_branches(self.data().iter().map(|&x| u64::from(x > t)));
        }
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor<T> {
        let f = T::from_f64_lossy(floor);
        self.trace_threshold(f);
        self.unary("clamp_min", move |x| x.max(f), move |x, _| if x > f { T::one() } else { T::zero() })
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], "sum", vec![self.clone()], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums onto a broadcastable shape of equal rank (keep-dims reduction).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let ok = broadcast_shape("sum_to", shape, self.shape()).map(|s| s == self.shape());
        if !matches!(ok, Ok(true)) {
            return Err(Error::dim("sum_to", "shape", format!("{:?} cannot reduce to {shape:?}", self.shape())));
        }
        let from = self.shape().to_vec();
        let to = shape.to_vec();
        let out = reduce_to(&self.data(), &from, &to);
        Ok(Tensor::from_op(
            out,
            to.clone(),
            "sum_to",
            vec![self.clone()],
            Box::new(move |g| vec![Some(expand_to(g, &to, &from))]),
        ))
    }

    pub fn mean_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let count = self.numel() / numel(shape).max(1);
        Ok(self.sum_to(shape)?.scale(1.0 / count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", "shape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", "axes", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![T::zero(); self.numel()];
        {
            let d = self.data();
            for_each2(&out_shape, &src_strides, &src_strides, |o, i, _| out[o] = d[i]);
        }
        let shape_c = out_shape.clone();
        let n = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gi = vec![T::zero(); n];
                for_each2(&shape_c, &src_strides, &src_strides, |o, i, _| gi[i] = g[o]);
                vec![Some(gi)]
            }),
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim("narrow", axis, format!("{start}+{len} out of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (full, part) = (shape[axis] * inner, len * inner);
        let mut out = Vec::with_capacity(outer * part);
        {
            let d = self.data();
            for o in 0..outer {
                out.extend_from_slice(&d[o * full + start * inner..o * full + start * inner + part]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gi = vec![T::zero(); n];
                for o in 0..outer {
                    gi[o * full + start * inner..o * full + start * inner + part]
                        .copy_from_slice(&g[o * part..(o + 1) * part]);
                }
                vec![Some(gi)]
            }),
        ))
    }
}
