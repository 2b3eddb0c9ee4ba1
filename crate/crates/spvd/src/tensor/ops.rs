//! Differentiable operations.
//!
//! Shape rules are strict: operands must match exactly, or the second
//! operand of an elementwise op may be a `1 x F` row vector (broadcast over
//! rows) or an `R x 1` column vector (broadcast over columns). Anything else
//! is a dimension error; silent coercion hides indexing bugs in the sparse
//! code paths.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
}

fn bcast_mode<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if a.shape().len() == 2 && b.shape().len() == 2 {
        if b.rows() == 1 && b.cols() == a.cols() {
            return Ok(Bcast::Row);
        }
        if b.rows() == a.rows() && b.cols() == 1 {
            return Ok(Bcast::Col);
        }
    }
    Err(Error::dim(format!(
        "shapes {:?} and {:?} are not broadcastable",
        a.shape(),
        b.shape()
    )))
}

fn bval<R: Real>(b: &[R], mode: Bcast, i: usize, cols: usize) -> R {
    match mode {
        Bcast::Same => b[i],
        Bcast::Row => b[i % cols],
        Bcast::Col => b[i / cols],
    }
}

/// Accumulate an output-shaped gradient into the (possibly broadcast) b side.
fn reduce_into<R: Real>(g: impl Iterator<Item = R>, mode: Bcast, cols: usize, out: &mut [R]) {
    match mode {
        Bcast::Same => {
            for (o, gi) in out.iter_mut().zip(g) {
                *o = *o + gi;
            }
        }
        Bcast::Row => {
            for (i, gi) in g.enumerate() {
                out[i % cols] = out[i % cols] + gi;
            }
        }
        Bcast::Col => {
            for (i, gi) in g.enumerate() {
                out[i / cols] = out[i / cols] + gi;
            }
        }
    }
}

pub fn add<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let mode = bcast_mode(a, b)?;
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bval(b.data(), mode, i, cols))
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (p, &gi) in pg.iter_mut().zip(g) {
                    *p = *p + gi;
                }
            });
            parents[1]
                .accumulate_grad(|pg| reduce_into(g.iter().copied(), mode, cols, pg));
        }),
        "add",
    )
}

pub fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let mode = bcast_mode(a, b)?;
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x - bval(b.data(), mode, i, cols))
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (p, &gi) in pg.iter_mut().zip(g) {
                    *p = *p + gi;
                }
            });
            parents[1].accumulate_grad(|pg| {
                reduce_into(g.iter().map(|&gi| -gi), mode, cols, pg)
            });
        }),
        "sub",
    )
}

pub fn mul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let mode = bcast_mode(a, b)?;
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * bval(b.data(), mode, i, cols))
        .collect();
    let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (i, (p, &gi)) in pg.iter_mut().zip(g).enumerate() {
                    *p = *p + gi * bval(&bd, mode, i, cols);
                }
            });
            parents[1].accumulate_grad(|pg| {
                reduce_into(
                    g.iter().zip(&ad).map(|(&gi, &ai)| gi * ai),
                    mode,
                    cols,
                    pg,
                )
            });
        }),
        "mul",
    )
}

/// `scale ⊙ x + shift` with the elementwise broadcast rules.
pub fn scale_shift<R: Real>(x: &Tensor<R>, scale: &Tensor<R>, shift: &Tensor<R>) -> Result<Tensor<R>> {
    add(&mul(x, scale)?, shift)
}

pub fn scale_const<R: Real>(a: &Tensor<R>, c: f64) -> Result<Tensor<R>> {
    let c = R::from_f64(c);
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (p, &gi) in pg.iter_mut().zip(g) {
                    *p = *p + gi * c;
                }
            })
        }),
        "scale_const",
    )
}

pub fn silu<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    let sig = |x: R| R::one() / (R::one() + (-x).exp());
    let data: Vec<R> = a.data().iter().map(|&x| x * sig(x)).collect();
    let ad = a.data().to_vec();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (i, (p, &gi)) in pg.iter_mut().zip(g).enumerate() {
                    let s = sig(ad[i]);
                    let d = s * (R::one() + ad[i] * (R::one() - s));
                    *p = *p + gi * d;
                }
            })
        }),
        "silu",
    )
}

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::dim(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
    let mut data = vec![R::zero(); m * n];
    {
        let (ad, bd) = (&ad, &bd);
        par::for_each_chunk(&mut data, n, |i, row| {
            let arow = &ad[i * k..(i + 1) * k];
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = R::zero();
                for (kk, &av) in arow.iter().enumerate() {
                    acc = acc + av * bd[kk * n + j];
                }
                *out = acc;
            }
        });
    }
    Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            // dA = G Bᵀ, dB = Aᵀ G
            parents[0].accumulate_grad(|pg| {
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = R::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * bd[kk * n + j];
                        }
                        pg[i * k + kk] = pg[i * k + kk] + acc;
                    }
                }
            });
            parents[1].accumulate_grad(|pg| {
                for kk in 0..k {
                    for j in 0..n {
                        let mut acc = R::zero();
                        for i in 0..m {
                            acc = acc + ad[i * k + kk] * g[i * n + j];
                        }
                        pg[kk * n + j] = pg[kk * n + j] + acc;
                    }
                }
            });
        }),
        "matmul",
    )
}

pub fn transpose<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape().len() != 2 {
        return Err(Error::dim("transpose requires a matrix"));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_op(
        vec![n, m],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for j in 0..n {
                    for i in 0..m {
                        pg[i * n + j] = pg[i * n + j] + g[j * m + i];
                    }
                }
            })
        }),
        "transpose",
    )
}

pub fn sum_all<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    let s = a.data().iter().copied().sum();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(|g, parents| {
            let gi = g[0];
            parents[0].accumulate_grad(|pg| {
                for p in pg.iter_mut() {
                    *p = *p + gi;
                }
            })
        }),
        "sum_all",
    )
}

pub fn mean_all<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    scale_const(&sum_all(a)?, 1.0 / a.len() as f64)
}

/// Mean squared error between same-shape tensors.
pub fn mse<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse requires identical shapes"));
    }
    let d = sub(a, b)?;
    mean_all(&mul(&d, &d)?)
}

pub fn gather_rows<R: Real>(a: &Tensor<R>, idx: &[usize]) -> Result<Tensor<R>> {
    if a.shape().len() != 2 {
        return Err(Error::dim("gather_rows requires a matrix"));
    }
    let (rows, cols) = (a.rows(), a.cols());
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::index(format!("row {bad} out of range {rows}")));
    }
    let mut data = vec![R::zero(); idx.len() * cols];
    {
        let ad = a.data();
        let idx_ref = &idx;
        par::for_each_chunk(&mut data, cols, |k, out| {
            out.copy_from_slice(&ad[idx_ref[k] * cols..(idx_ref[k] + 1) * cols]);
        });
    }
    let idx = idx.to_vec();
    Tensor::from_op(
        vec![idx.len(), cols],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..cols {
                        pg[r * cols + j] = pg[r * cols + j] + g[k * cols + j];
                    }
                }
            })
        }),
        "gather_rows",
    )
}

/// `a` with `src` rows accumulated at `idx`; differentiable in both inputs.
pub fn scatter_add<R: Real>(a: &Tensor<R>, idx: &[usize], src: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape().len() != 2 || src.shape().len() != 2 || a.cols() != src.cols() {
        return Err(Error::dim("scatter_add: incompatible shapes"));
    }
    if idx.len() != src.rows() {
        return Err(Error::dim("scatter_add: index count != source rows"));
    }
    let (rows, cols) = (a.rows(), a.cols());
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::index(format!("row {bad} out of range {rows}")));
    }
    let mut data = a.data().to_vec();
    for (k, &r) in idx.iter().enumerate() {
        for j in 0..cols {
            data[r * cols + j] = data[r * cols + j] + src.data()[k * cols + j];
        }
    }
    let idx = idx.to_vec();
    Tensor::from_op(
        vec![rows, cols],
        data,
        vec![a.clone(), src.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for (p, &gi) in pg.iter_mut().zip(g) {
                    *p = *p + gi;
                }
            });
            parents[1].accumulate_grad(|pg| {
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..cols {
                        pg[k * cols + j] = pg[k * cols + j] + g[r * cols + j];
                    }
                }
            });
        }),
        "scatter_add",
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SegmentMode {
    Sum,
    Mean,
    Max,
}

fn check_segment_ids(ids: &[usize], segments: usize) -> Result<()> {
    for w in ids.windows(2) {
        if w[1] < w[0] {
            return Err(Error::index("segment ids must be sorted non-decreasing"));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&s| s >= segments) {
        return Err(Error::index(format!(
            "segment id {bad} out of range {segments}"
        )));
    }
    Ok(())
}

/// Aggregate rows sharing a segment id. Empty segments yield zero rows.
pub fn segment_reduce<R: Real>(
    values: &Tensor<R>,
    ids: &[usize],
    segments: usize,
    mode: SegmentMode,
) -> Result<Tensor<R>> {
    if values.shape().len() != 2 || values.rows() != ids.len() {
        return Err(Error::dim("segment_reduce: ids must match rows"));
    }
    check_segment_ids(ids, segments)?;
    let cols = values.cols();
    let mut data = vec![R::zero(); segments * cols];
    let mut counts = vec![0usize; segments];
    // argmax row per output slot, for the max backward rule
    let mut argmax = vec![usize::MAX; segments * cols];
    for (r, &s) in ids.iter().enumerate() {
        counts[s] += 1;
        for j in 0..cols {
            let v = values.data()[r * cols + j];
            let slot = s * cols + j;
            match mode {
                SegmentMode::Sum | SegmentMode::Mean => data[slot] = data[slot] + v,
                SegmentMode::Max => {
                    if argmax[slot] == usize::MAX || v > data[slot] {
                        data[slot] = v;
                        argmax[slot] = r;
                    }
                }
            }
        }
    }
    if mode == SegmentMode::Mean {
        for s in 0..segments {
            if counts[s] > 0 {
                let inv = R::one() / R::from_usize(counts[s]);
                for j in 0..cols {
                    data[s * cols + j] = data[s * cols + j] * inv;
                }
            }
        }
    }
    let ids = ids.to_vec();
    Tensor::from_op(
        vec![segments, cols],
        data,
        vec![values.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| match mode {
                SegmentMode::Sum => {
                    for (r, &s) in ids.iter().enumerate() {
                        for j in 0..cols {
                            pg[r * cols + j] = pg[r * cols + j] + g[s * cols + j];
                        }
                    }
                }
                SegmentMode::Mean => {
                    for (r, &s) in ids.iter().enumerate() {
                        let inv = R::one() / R::from_usize(counts[s]);
                        for j in 0..cols {
                            pg[r * cols + j] = pg[r * cols + j] + g[s * cols + j] * inv;
                        }
                    }
                }
                SegmentMode::Max => {
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            let j = slot % cols;
                            pg[r * cols + j] = pg[r * cols + j] + g[slot];
                        }
                    }
                }
            })
        }),
        "segment_reduce",
    )
}

/// Contiguous segment spans `[start, end)` per segment id, empty ones included.
pub fn segment_spans(ids: &[usize], segments: usize) -> Result<Vec<(usize, usize)>> {
    check_segment_ids(ids, segments)?;
    let mut spans = vec![(0usize, 0usize); segments];
    let mut r = 0usize;
    for s in 0..segments {
        let start = r;
        while r < ids.len() && ids[r] == s {
            r += 1;
        }
        spans[s] = (start, r);
    }
    Ok(spans)
}

const NORM_EPS: f64 = 1e-5;

/// Group normalization with statistics per (sample, group) over that
/// sample's rows, followed by the `gamma`/`beta` affine.
pub fn group_norm<R: Real>(
    x: &Tensor<R>,
    groups: usize,
    sample_ids: &[usize],
    samples: usize,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
) -> Result<Tensor<R>> {
    let cols = x.cols();
    if x.shape().len() != 2 || x.rows() != sample_ids.len() {
        return Err(Error::dim("group_norm: ids must match rows"));
    }
    if groups == 0 || cols % groups != 0 {
        return Err(Error::config(format!(
            "group_norm: {cols} channels not divisible by {groups} groups"
        )));
    }
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::dim("group_norm: affine width mismatch"));
    }
    let spans = segment_spans(sample_ids, samples)?;
    let gsize = cols / groups;
    let eps = R::from_f64(NORM_EPS);

    let xd = x.data();
    let mut xhat = vec![R::zero(); xd.len()];
    // inverse std per (sample, group)
    let mut inv_std = vec![R::zero(); samples * groups];
    for (s, &(lo, hi)) in spans.iter().enumerate() {
        if lo == hi {
            continue;
        }
        for g in 0..groups {
            let c0 = g * gsize;
            let n = R::from_usize((hi - lo) * gsize);
            let mut mean = R::zero();
            for r in lo..hi {
                for j in c0..c0 + gsize {
                    mean = mean + xd[r * cols + j];
                }
            }
            mean = mean / n;
            let mut var = R::zero();
            for r in lo..hi {
                for j in c0..c0 + gsize {
                    let d = xd[r * cols + j] - mean;
                    var = var + d * d;
                }
            }
            var = var / n;
            let istd = R::one() / (var + eps).sqrt();
            inv_std[s * groups + g] = istd;
            for r in lo..hi {
                for j in c0..c0 + gsize {
                    xhat[r * cols + j] = (xd[r * cols + j] - mean) * istd;
                }
            }
        }
    }
    let gam = gamma.data().to_vec();
    let data: Vec<R> = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| gam[i % cols] * h + beta.data()[i % cols])
        .collect();

    let spans_c = spans.clone();
    let xhat_c = xhat.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents| {
            parents[1].accumulate_grad(|pg| {
                for (i, &gi) in g.iter().enumerate() {
                    pg[i % cols] = pg[i % cols] + gi * xhat_c[i];
                }
            });
            parents[2].accumulate_grad(|pg| {
                for (i, &gi) in g.iter().enumerate() {
                    pg[i % cols] = pg[i % cols] + gi;
                }
            });
            parents[0].accumulate_grad(|pg| {
                for (s, &(lo, hi)) in spans_c.iter().enumerate() {
                    if lo == hi {
                        continue;
                    }
                    for gr in 0..groups {
                        let c0 = gr * gsize;
                        let n = R::from_usize((hi - lo) * gsize);
                        let istd = inv_std[s * groups + gr];
                        let mut sum_dh = R::zero();
                        let mut sum_dh_xhat = R::zero();
                        for r in lo..hi {
                            for j in c0..c0 + gsize {
                                let dh = g[r * cols + j] * gam[j];
                                sum_dh = sum_dh + dh;
                                sum_dh_xhat = sum_dh_xhat + dh * xhat_c[r * cols + j];
                            }
                        }
                        let mean_dh = sum_dh / n;
                        let mean_dh_xhat = sum_dh_xhat / n;
                        for r in lo..hi {
                            for j in c0..c0 + gsize {
                                let dh = g[r * cols + j] * gam[j];
                                let dx =
                                    istd * (dh - mean_dh - xhat_c[r * cols + j] * mean_dh_xhat);
                                pg[r * cols + j] = pg[r * cols + j] + dx;
                            }
                        }
                    }
                }
            });
        }),
        "group_norm",
    )
}

pub fn softmax_rows<R: Real>(a: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape().len() != 2 {
        return Err(Error::dim("softmax_rows requires a matrix"));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![R::zero(); m * n];
    for i in 0..m {
        let row = &a.data()[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(row[0], R::max);
        let mut z = R::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            data[i * n + j] = e;
            z = z + e;
        }
        for j in 0..n {
            data[i * n + j] = data[i * n + j] / z;
        }
    }
    let sm = data.clone();
    Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for i in 0..m {
                    let mut dot = R::zero();
                    for j in 0..n {
                        dot = dot + g[i * n + j] * sm[i * n + j];
                    }
                    for j in 0..n {
                        pg[i * n + j] =
                            pg[i * n + j] + sm[i * n + j] * (g[i * n + j] - dot);
                    }
                }
            })
        }),
        "softmax_rows",
    )
}

pub fn slice_cols<R: Real>(a: &Tensor<R>, start: usize, end: usize) -> Result<Tensor<R>> {
    if a.shape().len() != 2 || end > a.cols() || start >= end {
        return Err(Error::dim("slice_cols: bad column range"));
    }
    let (m, n, w) = (a.rows(), a.cols(), end - start);
    let mut data = vec![R::zero(); m * w];
    for i in 0..m {
        data[i * w..(i + 1) * w].copy_from_slice(&a.data()[i * n + start..i * n + end]);
    }
    Tensor::from_op(
        vec![m, w],
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(|pg| {
                for i in 0..m {
                    for j in 0..w {
                        pg[i * n + start + j] = pg[i * n + start + j] + g[i * w + j];
                    }
                }
            })
        }),
        "slice_cols",
    )
}

pub fn concat_cols<R: Real>(parts: &[Tensor<R>]) -> Result<Tensor<R>> {
    if parts.is_empty() {
        return Err(Error::dim("concat_cols: no inputs"));
    }
    let m = parts[0].rows();
    if parts.iter().any(|p| p.shape().len() != 2 || p.rows() != m) {
        return Err(Error::dim("concat_cols: row mismatch"));
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![R::zero(); m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for i in 0..m {
            data[i * total + off..i * total + off + w]
                .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
        off += w;
    }
    Tensor::from_op(
        vec![m, total],
        data,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths) {
                p.accumulate_grad(|pg| {
                    for i in 0..m {
                        for j in 0..w {
                            pg[i * w + j] = pg[i * w + j] + g[i * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }),
        "concat_cols",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data, false).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());

        let a = t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t64(vec![2, 1], vec![1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![2, 2], vec![0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a: Tensor<f64> = Tensor::randn(vec![5, 4], &mut rng, false);
        let b: Tensor<f64> = Tensor::randn(vec![4, 3], &mut rng, false);
        let err_a = grad_check(|x| sum_all(&silu(&matmul(x, &b)?)?), &a, 1e-5).unwrap();
        let err_b = grad_check(|x| sum_all(&silu(&matmul(&a, x)?)?), &b, 1e-5).unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn scale_shift_identity_and_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let f: Tensor<f64> = Tensor::randn(vec![6, 4], &mut rng, false);
        let one = t64(vec![1, 4], vec![1.0; 4]);
        let zero = t64(vec![1, 4], vec![0.0; 4]);
        assert_eq!(scale_shift(&f, &one, &zero).unwrap().data(), f.data());

        let s: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let b: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let err = grad_check(|x| sum_all(&silu(&scale_shift(x, &s, &b)?)?), &f, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err_s = grad_check(|x| sum_all(&silu(&scale_shift(&f, x, &b)?)?), &s, 1e-5).unwrap();
        assert!(err_s < 1e-6, "{err_s}");
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let x = t64(vec![1], vec![0.0]);
        assert_eq!(silu(&x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn broadcast_rejects_bad_shapes() {
        let a = t64(vec![3, 4], vec![0.0; 12]);
        let b = t64(vec![2, 4], vec![0.0; 8]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn segment_reduce_hand_cases() {
        let v = t64(vec![3, 1], vec![1.0, 2.0, 3.0]);
        let out = segment_reduce(&v, &[0, 0, 1], 2, SegmentMode::Sum).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);

        // singleton segments: identity for every mode
        for mode in [SegmentMode::Sum, SegmentMode::Mean, SegmentMode::Max] {
            let out = segment_reduce(&v, &[0, 1, 2], 3, mode).unwrap();
            assert_eq!(out.data(), v.data());
        }
    }

    #[test]
    fn segment_reduce_rejects_unsorted_and_out_of_range() {
        let v = t64(vec![3, 1], vec![1.0, 2.0, 3.0]);
        assert!(segment_reduce(&v, &[1, 0, 1], 2, SegmentMode::Sum).is_err());
        assert!(segment_reduce(&v, &[0, 0, 5], 2, SegmentMode::Sum).is_err());
    }

    #[test]
    fn segment_mean_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let v: Tensor<f64> = Tensor::randn(vec![50, 8], &mut rng, false);
        let mut ids = Vec::new();
        let mut s = 0usize;
        for _ in 0..50 {
            if rng.gen_bool(0.3) && s < 9 {
                s += 1;
            }
            ids.push(s);
        }
        let segments = 10;
        let got = segment_reduce(&v, &ids, segments, SegmentMode::Mean).unwrap();
        // independent loop oracle
        let mut want = vec![0.0f64; segments * 8];
        let mut counts = vec![0usize; segments];
        for (r, &sid) in ids.iter().enumerate() {
            counts[sid] += 1;
            for j in 0..8 {
                want[sid * 8 + j] += v.data()[r * 8 + j];
            }
        }
        for sid in 0..segments {
            if counts[sid] > 0 {
                for j in 0..8 {
                    want[sid * 8 + j] /= counts[sid] as f64;
                }
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_mean_broadcast_back_preserves_means() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let v: Tensor<f64> = Tensor::randn(vec![12, 4], &mut rng, false);
        let ids = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3, 3, 3];
        let means = segment_reduce(&v, &ids, 4, SegmentMode::Mean).unwrap();
        let back = gather_rows(&means, &ids).unwrap();
        let means2 = segment_reduce(&back, &ids, 4, SegmentMode::Mean).unwrap();
        // summing k identical copies then dividing by k is exact up to one
        // rounding of the final k*m product
        for (a, b) in means.data().iter().zip(means2.data()) {
            assert!((a - b).abs() <= f64::EPSILON * a.abs());
        }
    }

    #[test]
    fn gather_scatter_hand_cases() {
        let t = t64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let all = gather_rows(&t, &[0, 1, 2]).unwrap();
        assert_eq!(all.data(), t.data());
        assert!(gather_rows(&t, &[3]).is_err());

        let z = Tensor::zeros(vec![2, 1]);
        let src = t64(vec![2, 1], vec![1.0, 2.0]);
        let out = scatter_add(&z, &[0, 0], &src).unwrap();
        assert_eq!(out.data(), &[3.0, 0.0]);
    }

    #[test]
    fn gather_scatter_round_trip_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let t: Tensor<f64> = Tensor::randn(vec![6, 3], &mut rng, false);
        let idx = [2usize, 0, 5, 2];
        let err = grad_check(
            |x| {
                let g = gather_rows(x, &idx)?;
                let z = Tensor::zeros(vec![6, 3]);
                let s = scatter_add(&z, &idx, &g)?;
                sum_all(&silu(&s)?)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn group_norm_constant_input_is_zero_before_affine() {
        let x = t64(vec![4, 4], vec![3.5; 16]);
        let gamma = t64(vec![1, 4], vec![1.0; 4]);
        let beta = t64(vec![1, 4], vec![0.0; 4]);
        let y = group_norm(&x, 2, &[0, 0, 1, 1], 2, &gamma, &beta).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_single_group_matches_global_stats() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x: Tensor<f64> = Tensor::randn(vec![5, 4], &mut rng, false);
        let gamma = t64(vec![1, 4], vec![1.0; 4]);
        let beta = t64(vec![1, 4], vec![0.0; 4]);
        let y = group_norm(&x, 1, &[0; 5], 1, &gamma, &beta).unwrap();
        let n = 20.0;
        let mean: f64 = x.data().iter().sum::<f64>() / n;
        let var: f64 = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (i, &v) in y.data().iter().enumerate() {
            let want = (x.data()[i] - mean) / (var + 1e-5).sqrt();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_is_per_sample() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let a: Tensor<f64> = Tensor::randn(vec![3, 4], &mut rng, false);
        let b: Tensor<f64> = Tensor::randn(vec![5, 4], &mut rng, false);
        let gamma: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let beta: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let joint_data: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let joint = t64(vec![8, 4], joint_data);
        let y_joint = group_norm(&joint, 2, &[0, 0, 0, 1, 1, 1, 1, 1], 2, &gamma, &beta).unwrap();
        let ya = group_norm(&a, 2, &[0; 3], 1, &gamma, &beta).unwrap();
        let yb = group_norm(&b, 2, &[0; 5], 1, &gamma, &beta).unwrap();
        let sep: Vec<f64> = ya.data().iter().chain(yb.data()).copied().collect();
        assert_eq!(y_joint.data(), &sep[..]);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = t64(vec![2, 3], vec![0.0; 6]);
        let g1 = t64(vec![1, 3], vec![1.0; 3]);
        assert!(group_norm(&x, 2, &[0, 0], 1, &g1, &g1).is_err());
    }

    #[test]
    fn group_norm_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let x: Tensor<f64> = Tensor::randn(vec![6, 4], &mut rng, false);
        let gamma: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let beta: Tensor<f64> = Tensor::randn(vec![1, 4], &mut rng, false);
        let ids = [0usize, 0, 0, 1, 1, 1];
        let err = grad_check(
            |x| sum_all(&silu(&group_norm(x, 2, &ids, 2, &gamma, &beta)?)?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err_g = grad_check(
            |g| sum_all(&silu(&group_norm(&x, 2, &ids, 2, g, &beta)?)?),
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(err_g < 1e-6, "{err_g}");
    }

    #[test]
    fn softmax_rows_normalizes_and_gradchecks() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x: Tensor<f64> = Tensor::randn(vec![4, 5], &mut rng, false);
        let s = softmax_rows(&x).unwrap();
        for i in 0..4 {
            let row: f64 = s.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        let w: Tensor<f64> = Tensor::randn(vec![4, 5], &mut rng, false);
        let err = grad_check(|x| sum_all(&mul(&softmax_rows(x)?, &w)?), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn slice_concat_cols_round_trip_and_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let x: Tensor<f64> = Tensor::randn(vec![3, 6], &mut rng, false);
        let a = slice_cols(&x, 0, 2).unwrap();
        let b = slice_cols(&x, 2, 6).unwrap();
        let back = concat_cols(&[a, b]).unwrap();
        assert_eq!(back.data(), x.data());

        let err = grad_check(
            |x| {
                let a = slice_cols(x, 0, 3)?;
                let b = slice_cols(x, 3, 6)?;
                sum_all(&silu(&concat_cols(&[b, a])?)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    // Every registered op passes grad_check on 3 distinct random shapes.
    #[test]
    fn all_ops_gradcheck_multiple_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for (m, n) in [(2usize, 4usize), (5, 8), (7, 2)] {
            let x: Tensor<f64> = Tensor::randn(vec![m, n], &mut rng, false);
            let y: Tensor<f64> = Tensor::randn(vec![m, n], &mut rng, false);
            let w: Tensor<f64> = Tensor::randn(vec![n, 3], &mut rng, false);
            let row: Tensor<f64> = Tensor::randn(vec![1, n], &mut rng, false);
            let col: Tensor<f64> = Tensor::randn(vec![m, 1], &mut rng, false);
            let ids: Vec<usize> = (0..m).map(|i| i / 2).collect();
            let segs = ids[m - 1] + 1;
            let checks: Vec<(&str, f64)> = vec![
                ("add", grad_check(|x| sum_all(&silu(&add(x, &y)?)?), &x, 1e-5).unwrap()),
                ("add_row", grad_check(|x| sum_all(&silu(&add(x, &row)?)?), &x, 1e-5).unwrap()),
                ("sub_col", grad_check(|x| sum_all(&silu(&sub(x, &col)?)?), &x, 1e-5).unwrap()),
                ("mul", grad_check(|x| sum_all(&silu(&mul(x, &y)?)?), &x, 1e-5).unwrap()),
                ("mul_b", grad_check(|b| sum_all(&silu(&mul(&x, b)?)?), &col, 1e-5).unwrap()),
                ("matmul", grad_check(|x| sum_all(&silu(&matmul(x, &w)?)?), &x, 1e-5).unwrap()),
                ("transpose", grad_check(|x| sum_all(&silu(&transpose(x)?)?), &x, 1e-5).unwrap()),
                ("mse", grad_check(|x| mse(x, &y), &x, 1e-5).unwrap()),
                (
                    "segsum",
                    grad_check(
                        |x| sum_all(&silu(&segment_reduce(x, &ids, segs, SegmentMode::Sum)?)?),
                        &x,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "segmean",
                    grad_check(
                        |x| sum_all(&silu(&segment_reduce(x, &ids, segs, SegmentMode::Mean)?)?),
                        &x,
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "{name} on {m}x{n}: {err}");
            }
        }
    }

    #[test]
    fn mul_grad_accumulates_when_input_used_twice() {
        let x = t64(vec![2, 2], vec![0.4, -0.3, 1.2, 0.8]);
        let err = grad_check(|x| sum_all(&mul(x, x)?), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backward_through_detach_stops() {
        let x = Tensor::from_vec(vec![2, 1], vec![1.0f64, 2.0], true).unwrap();
        let loss = sum_all(&x.detach()).unwrap();
        backward(&loss).unwrap();
        assert!(x.grad().is_none());
    }
}
