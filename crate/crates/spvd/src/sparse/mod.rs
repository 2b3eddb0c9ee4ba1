//! Sparse voxel tensors and the voxel branch primitives.
//!
//! A [`SparseGrid`] stores one feature row per active voxel, keyed by
//! integer `(batch, i, j, k)` coordinates at a given stride. Rows are sorted
//! lexicographically, so all rows of one batch sample are contiguous and
//! per-sample operations reduce to segment arithmetic. The coordinate index
//! is an exact map; nothing here hashes lossily.

pub mod conv;
pub mod voxelize;

pub use conv::{build_kernel_map, sparse_conv, KernelMap, KERNEL1_OFFSETS, KERNEL2_OFFSETS};
pub use voxelize::{build_point_map, devoxelize_trilinear, voxelize, Point2VoxelMap};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ops, Tensor};
use std::collections::HashMap;

/// Hash-indexed sparse voxel tensor.
pub struct SparseGrid<R: Real> {
    /// Active voxel coordinates `(batch, i, j, k)`, sorted lexicographically.
    pub coords: Vec<[i32; 4]>,
    /// Voxel edge length in units of the base grid.
    pub stride: u32,
    /// Base grid extent per axis (at stride 1).
    pub resolution: u32,
    /// One feature row per active voxel, aligned with `coords`.
    pub features: Tensor<R>,
    /// Number of samples in the batch.
    pub batch_size: usize,
    index: HashMap<[i32; 4], usize>,
}

impl<R: Real> SparseGrid<R> {
    pub fn new(
        coords: Vec<[i32; 4]>,
        stride: u32,
        resolution: u32,
        features: Tensor<R>,
        batch_size: usize,
    ) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::dim("feature rows must match coordinate count"));
        }
        let extent = (resolution / stride) as i32;
        let mut index = HashMap::with_capacity(coords.len());
        for (r, c) in coords.iter().enumerate() {
            if c[0] < 0 || c[0] as usize >= batch_size {
                return Err(Error::index(format!("batch index {} out of range", c[0])));
            }
            if c[1..].iter().any(|&v| v < 0 || v >= extent) {
                return Err(Error::index(format!("voxel coordinate {c:?} outside grid")));
            }
            if index.insert(*c, r).is_some() {
                return Err(Error::index(format!("duplicate voxel coordinate {c:?}")));
            }
        }
        for w in coords.windows(2) {
            if w[1] < w[0] {
                return Err(Error::index("voxel coordinates must be sorted"));
            }
        }
        Ok(SparseGrid {
            coords,
            stride,
            resolution,
            features,
            batch_size,
            index,
        })
    }

    /// Same coordinates, new feature rows.
    pub fn with_features(&self, features: Tensor<R>) -> Result<Self> {
        if features.rows() != self.coords.len() {
            return Err(Error::dim("feature rows must match coordinate count"));
        }
        Ok(SparseGrid {
            coords: self.coords.clone(),
            stride: self.stride,
            resolution: self.resolution,
            features,
            batch_size: self.batch_size,
            index: self.index.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row_of(&self, coord: &[i32; 4]) -> Option<usize> {
        self.index.get(coord).copied()
    }

    /// Batch index per row, usable directly as segment ids.
    pub fn batch_ids(&self) -> Vec<usize> {
        self.coords.iter().map(|c| c[0] as usize).collect()
    }

    /// Row span `[start, end)` of each batch sample.
    pub fn sample_spans(&self) -> Vec<(usize, usize)> {
        ops::segment_spans(&self.batch_ids(), self.batch_size).expect("sorted by construction")
    }
}

/// Apply a per-sample feature-wise affine: every voxel row of sample `b`
/// becomes `scale[b] ⊙ f + shift[b]`. Pure segment indexing, no search.
pub fn film_broadcast<R: Real>(
    grid: &SparseGrid<R>,
    scale: &Tensor<R>,
    shift: &Tensor<R>,
) -> Result<SparseGrid<R>> {
    if scale.rows() != grid.batch_size || shift.rows() != grid.batch_size {
        return Err(Error::dim(format!(
            "scale/shift rows {} do not match batch size {}",
            scale.rows(),
            grid.batch_size
        )));
    }
    if scale.cols() != grid.feature_dim() || shift.cols() != grid.feature_dim() {
        return Err(Error::dim("scale/shift width does not match features"));
    }
    let ids = grid.batch_ids();
    let s = ops::gather_rows(scale, &ids)?;
    let b = ops::gather_rows(shift, &ids)?;
    grid.with_features(ops::scale_shift(&grid.features, &s, &b)?)
}

/// Multi-head scaled dot-product self-attention over each sample's voxels,
/// with a residual connection. Samples never attend across one another.
pub fn sparse_attention<R: Real>(
    grid: &SparseGrid<R>,
    wq: &Tensor<R>,
    wk: &Tensor<R>,
    wv: &Tensor<R>,
    wo: &Tensor<R>,
    heads: usize,
) -> Result<SparseGrid<R>> {
    let f = grid.feature_dim();
    if heads == 0 || f % heads != 0 {
        return Err(Error::config(format!(
            "feature dim {f} not divisible by {heads} heads"
        )));
    }
    for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
        if w.rows() != f || w.cols() != f {
            return Err(Error::dim(format!("{name} must be {f}x{f}")));
        }
    }
    let dh = f / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut out = Tensor::zeros(vec![grid.len(), f]);
    for (lo, hi) in grid.sample_spans() {
        if lo == hi {
            continue;
        }
        let rows: Vec<usize> = (lo..hi).collect();
        let x = ops::gather_rows(&grid.features, &rows)?;
        let q = ops::matmul(&x, wq)?;
        let k = ops::matmul(&x, wk)?;
        let v = ops::matmul(&x, wv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = ops::slice_cols(&q, c0, c1)?;
            let kh = ops::slice_cols(&k, c0, c1)?;
            let vh = ops::slice_cols(&v, c0, c1)?;
            let scores = ops::scale_const(&ops::matmul(&qh, &ops::transpose(&kh)?)?, inv_sqrt)?;
            let attn = ops::softmax_rows(&scores)?;
            head_outs.push(ops::matmul(&attn, &vh)?);
        }
        let merged = ops::matmul(&ops::concat_cols(&head_outs)?, wo)?;
        out = ops::scatter_add(&out, &rows, &merged)?;
    }
    grid.with_features(ops::add(&grid.features, &out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grid_from(coords: Vec<[i32; 4]>, feats: Vec<f64>, f: usize, b: usize) -> SparseGrid<f64> {
        let t = Tensor::from_vec(vec![coords.len(), f], feats, false).unwrap();
        SparseGrid::new(coords, 1, 8, t, b).unwrap()
    }

    /// Random sorted grid with ragged per-sample voxel counts.
    pub(super) fn random_grid(
        rng: &mut ChaCha12Rng,
        batch: usize,
        f: usize,
        extent: i32,
    ) -> SparseGrid<f64> {
        let mut coords: Vec<[i32; 4]> = Vec::new();
        for b in 0..batch {
            let n = rng.gen_range(1..=6);
            for _ in 0..n {
                coords.push([
                    b as i32,
                    rng.gen_range(0..extent),
                    rng.gen_range(0..extent),
                    rng.gen_range(0..extent),
                ]);
            }
        }
        coords.sort();
        coords.dedup();
        let feats = Tensor::randn(vec![coords.len(), f], rng, false);
        SparseGrid::new(coords, 1, 8, feats, batch).unwrap()
    }

    #[test]
    fn grid_rejects_duplicates_and_unsorted() {
        let t: Tensor<f64> = Tensor::zeros(vec![2, 1]);
        assert!(SparseGrid::new(vec![[0, 1, 1, 1], [0, 1, 1, 1]], 1, 8, t.clone(), 1).is_err());
        assert!(SparseGrid::new(vec![[0, 2, 1, 1], [0, 1, 1, 1]], 1, 8, t, 1).is_err());
    }

    #[test]
    fn grid_index_is_exact_inverse() {
        let g = grid_from(vec![[0, 0, 0, 0], [0, 1, 2, 3], [1, 7, 7, 7]], vec![0.0; 3], 1, 2);
        for (r, c) in g.coords.iter().enumerate() {
            assert_eq!(g.row_of(c), Some(r));
        }
        assert_eq!(g.row_of(&[1, 0, 0, 0]), None);
    }

    #[test]
    fn film_identity_and_hand_case() {
        let g = grid_from(
            vec![[0, 0, 0, 0], [0, 1, 0, 0], [1, 2, 0, 0]],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            2,
            2,
        );
        let ones = Tensor::from_vec(vec![2, 2], vec![1.0; 4], false).unwrap();
        let zeros = Tensor::zeros(vec![2, 2]);
        let out = film_broadcast(&g, &ones, &zeros).unwrap();
        assert_eq!(out.features.data(), g.features.data());

        let scale = Tensor::from_vec(vec![2, 2], vec![2.0, 2.0, 3.0, 3.0], false).unwrap();
        let out = film_broadcast(&g, &scale, &zeros).unwrap();
        assert_eq!(out.features.data(), &[2.0, 4.0, 6.0, 8.0, 15.0, 18.0]);
    }

    #[test]
    fn film_rejects_batch_mismatch() {
        let g = grid_from(vec![[0, 0, 0, 0]], vec![1.0], 1, 1);
        let s = Tensor::zeros(vec![3, 1]);
        assert!(film_broadcast(&g, &s, &s).is_err());
    }

    #[test]
    fn film_matches_per_sample_loop_oracle_on_ragged_batches() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..20 {
            let g = random_grid(&mut rng, 5, 3, 8);
            let scale: Tensor<f64> = Tensor::randn(vec![5, 3], &mut rng, false);
            let shift: Tensor<f64> = Tensor::randn(vec![5, 3], &mut rng, false);
            let out = film_broadcast(&g, &scale, &shift).unwrap();
            for (r, c) in g.coords.iter().enumerate() {
                let b = c[0] as usize;
                for j in 0..3 {
                    let want = scale.data()[b * 3 + j] * g.features.data()[r * 3 + j]
                        + shift.data()[b * 3 + j];
                    assert_eq!(out.features.data()[r * 3 + j], want);
                }
            }
        }
    }

    #[test]
    fn attention_singleton_softmax() {
        let g = grid_from(vec![[0, 1, 1, 1]], vec![1.0, -2.0], 2, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let wq: Tensor<f64> = Tensor::randn(vec![2, 2], &mut rng, false);
        let wk: Tensor<f64> = Tensor::randn(vec![2, 2], &mut rng, false);
        let wv: Tensor<f64> = Tensor::randn(vec![2, 2], &mut rng, false);
        let wo: Tensor<f64> = Tensor::randn(vec![2, 2], &mut rng, false);
        let out = sparse_attention(&g, &wq, &wk, &wv, &wo, 1).unwrap();
        // softmax over one element is 1: out = x + (x Wv) Wo
        let xv = ops::matmul(&g.features, &wv).unwrap();
        let want = ops::add(&g.features, &ops::matmul(&xv, &wo).unwrap()).unwrap();
        for (a, b) in out.features.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_per_sample() {
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        for _ in 0..20 {
            let g = random_grid(&mut rng, 2, 4, 8);
            let wq: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
            let wk: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
            let wv: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
            let wo: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
            let joint = sparse_attention(&g, &wq, &wk, &wv, &wo, 2).unwrap();
            // run each sample in isolation
            for (b, (lo, hi)) in g.sample_spans().into_iter().enumerate() {
                if lo == hi {
                    continue;
                }
                let coords: Vec<[i32; 4]> =
                    g.coords[lo..hi].iter().map(|c| [0, c[1], c[2], c[3]]).collect();
                let rows: Vec<usize> = (lo..hi).collect();
                let feats = ops::gather_rows(&g.features, &rows).unwrap();
                let solo = SparseGrid::new(coords, 1, 8, feats, 1).unwrap();
                let solo_out = sparse_attention(&solo, &wq, &wk, &wv, &wo, 2).unwrap();
                for (i, r) in (lo..hi).enumerate() {
                    for j in 0..4 {
                        let a = joint.features.data()[r * 4 + j];
                        let s = solo_out.features.data()[i * 4 + j];
                        assert!((a - s).abs() < 1e-12, "sample {b} row {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let g = grid_from(vec![[0, 0, 0, 0]], vec![0.0; 3], 3, 1);
        let w = Tensor::zeros(vec![3, 3]);
        assert!(sparse_attention(&g, &w, &w, &w, &w, 2).is_err());
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let g = random_grid(&mut rng, 2, 4, 8);
        let wq: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
        let wk: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
        let wv: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
        let wo: Tensor<f64> = Tensor::randn(vec![4, 4], &mut rng, false);
        let err = crate::tensor::grad_check(
            |x| {
                let gg = g.with_features(x.clone())?;
                let out = sparse_attention(&gg, &wq, &wk, &wv, &wo, 2)?;
                ops::sum_all(&ops::silu(&out.features)?)
            },
            &g.features,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
