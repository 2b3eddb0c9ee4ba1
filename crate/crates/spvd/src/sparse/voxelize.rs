//! Point-to-voxel quantization and trilinear devoxelization.

use super::SparseGrid;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ops, Tensor};
use std::collections::BTreeMap;

/// Per-point voxel ownership and trilinear neighborhood.
pub struct Point2VoxelMap {
    /// Row of the voxel that owns each point.
    pub owner: Vec<usize>,
    /// Rows of the 8 trilinear neighbors; `None` where the neighbor voxel
    /// is inactive or outside the grid.
    pub neighbors: Vec<[Option<usize>; 8]>,
    /// Trilinear weights, aligned with `neighbors`. Weights of absent
    /// neighbors are not renormalized; those neighbors contribute zero.
    pub weights: Vec<[f64; 8]>,
}

fn quantize(p: f64, resolution: u32) -> i32 {
    let v = ((p + 1.0) / 2.0 * resolution as f64).floor() as i64;
    v.clamp(0, resolution as i64 - 1) as i32
}

/// Quantize normalized points into a sparse grid at stride 1. Colliding
/// points' features are averaged. Points outside `[-1,1]` are clamped into
/// range so noisy excursions stay represented.
pub fn voxelize<R: Real>(
    points: &Tensor<R>,
    batch_ids: &[usize],
    batch_size: usize,
    features: &Tensor<R>,
    resolution: u32,
) -> Result<(SparseGrid<R>, Point2VoxelMap)> {
    if resolution < 2 {
        return Err(Error::config("voxelize: resolution must be at least 2"));
    }
    if points.cols() != 3 || points.rows() != batch_ids.len() {
        return Err(Error::dim("voxelize: points must be P x 3 with one batch id each"));
    }
    if features.rows() != points.rows() {
        return Err(Error::dim("voxelize: features must align with points"));
    }
    let n = points.rows();
    // BTreeMap keeps coordinates sorted, which is the grid row order.
    let mut cells: BTreeMap<[i32; 4], usize> = BTreeMap::new();
    let mut point_coord = Vec::with_capacity(n);
    for p in 0..n {
        let b = batch_ids[p] as i32;
        let c = [
            b,
            quantize(points.data()[p * 3].to_f64(), resolution),
            quantize(points.data()[p * 3 + 1].to_f64(), resolution),
            quantize(points.data()[p * 3 + 2].to_f64(), resolution),
        ];
        point_coord.push(c);
        let next = cells.len();
        cells.entry(c).or_insert(next);
    }
    // Re-number rows by sorted coordinate order.
    let coords: Vec<[i32; 4]> = cells.keys().copied().collect();
    let row_of: BTreeMap<[i32; 4], usize> =
        coords.iter().enumerate().map(|(r, c)| (*c, r)).collect();
    let owner: Vec<usize> = point_coord.iter().map(|c| row_of[c]).collect();

    let mut counts = vec![0usize; coords.len()];
    for &r in &owner {
        counts[r] += 1;
    }
    let sums = ops::scatter_add(
        &Tensor::zeros(vec![coords.len(), features.cols()]),
        &owner,
        features,
    )?;
    let inv = Tensor::from_vec(
        vec![coords.len(), 1],
        counts.iter().map(|&c| R::from_f64(1.0 / c as f64)).collect(),
        false,
    )?;
    let mean = ops::mul(&sums, &inv)?;
    let grid = SparseGrid::new(coords, 1, resolution, mean, batch_size)?;
    let p2v = build_point_map(&grid, points, batch_ids)?;
    Ok((grid, p2v))
}

/// Build the trilinear point-to-voxel map against an existing grid.
pub fn build_point_map<R: Real>(
    grid: &SparseGrid<R>,
    points: &Tensor<R>,
    batch_ids: &[usize],
) -> Result<Point2VoxelMap> {
    if points.cols() != 3 || points.rows() != batch_ids.len() {
        return Err(Error::dim("point map: points must be P x 3 with one batch id each"));
    }
    let res = grid.resolution / grid.stride;
    let n = points.rows();
    let mut owner = Vec::with_capacity(n);
    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for p in 0..n {
        let b = batch_ids[p] as i32;
        let pos = [
            points.data()[p * 3].to_f64(),
            points.data()[p * 3 + 1].to_f64(),
            points.data()[p * 3 + 2].to_f64(),
        ];
        let own = [
            b,
            quantize(pos[0], res),
            quantize(pos[1], res),
            quantize(pos[2], res),
        ];
        let own_row = grid
            .row_of(&own)
            .ok_or_else(|| Error::index(format!("owning voxel {own:?} is not active")))?;
        owner.push(own_row);

        // Continuous voxel coordinate; voxel centers sit at integer values.
        let mut base = [0i32; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (pos[a] + 1.0) / 2.0 * res as f64 - 0.5;
            base[a] = u.floor() as i32;
            frac[a] = u - base[a] as f64;
        }
        let mut nb = [None; 8];
        let mut wt = [0f64; 8];
        for s in 0..8 {
            let d = [(s >> 2) & 1, (s >> 1) & 1, s & 1];
            let mut w = 1.0;
            let mut c = [b, 0, 0, 0];
            for a in 0..3 {
                w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                c[a + 1] = base[a] + d[a] as i32;
            }
            wt[s] = w;
            if c[1..].iter().all(|&v| v >= 0 && v < res as i32) {
                nb[s] = grid.row_of(&c);
            }
        }
        neighbors.push(nb);
        weights.push(wt);
    }
    Ok(Point2VoxelMap {
        owner,
        neighbors,
        weights,
    })
}

/// Interpolate voxel features back to points. Each point's feature is the
/// weighted sum over its present trilinear neighbors; absent neighbors
/// contribute zero. Differentiable with respect to the grid features.
pub fn devoxelize_trilinear<R: Real>(
    grid: &SparseGrid<R>,
    p2v: &Point2VoxelMap,
) -> Result<Tensor<R>> {
    let n = p2v.neighbors.len();
    let f = grid.feature_dim();
    let mut out = Tensor::zeros(vec![n, f]);
    for s in 0..8 {
        let mut rows = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut any = false;
        for p in 0..n {
            match p2v.neighbors[p][s] {
                Some(r) => {
                    if r >= grid.len() {
                        return Err(Error::index(format!(
                            "stale point map: row {r} out of range {}",
                            grid.len()
                        )));
                    }
                    rows.push(r);
                    w.push(R::from_f64(p2v.weights[p][s]));
                    any = true;
                }
                None => {
                    rows.push(0);
                    w.push(R::zero());
                }
            }
        }
        if !any {
            continue;
        }
        let gathered = ops::gather_rows(&grid.features, &rows)?;
        let wcol = Tensor::from_vec(vec![n, 1], w, false)?;
        out = ops::add(&out, &ops::mul(&gathered, &wcol)?)?;
    }
    Ok(out)
}
