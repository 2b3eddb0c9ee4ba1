//! Kernel maps and sparse convolution.
//!
//! A kernel map lists, per kernel offset, the (input_row, output_row) pairs
//! the convolution has to accumulate. Stride-1 convolutions are submanifold:
//! output coordinates equal input coordinates, so active sites never dilate
//! across the U-Net depth. Stride-2 down/up sampling uses a kernel-2 offset
//! set, which pairs every fine voxel with exactly one coarse parent.

use super::SparseGrid;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ops, Tensor};

/// 27 offsets of the 3x3x3 kernel, lexicographic.
pub const KERNEL1_OFFSETS: [[i32; 3]; 27] = {
    let mut out = [[0; 3]; 27];
    let mut s = 0;
    while s < 27 {
        out[s] = [(s / 9) as i32 - 1, (s / 3 % 3) as i32 - 1, (s % 3) as i32 - 1];
        s += 1;
    }
    out
};

/// 8 offsets of the 2x2x2 strided kernel, lexicographic.
pub const KERNEL2_OFFSETS: [[i32; 3]; 8] = {
    let mut out = [[0; 3]; 8];
    let mut s = 0;
    while s < 8 {
        out[s] = [(s / 4) as i32, (s / 2 % 2) as i32, (s % 2) as i32];
        s += 1;
    }
    out
};

/// Per-offset gather/scatter plan for one sparse convolution.
pub struct KernelMap {
    pub offsets: Vec<[i32; 3]>,
    /// `(input_row, output_row)` pairs per offset.
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub out_coords: Vec<[i32; 4]>,
    pub out_stride: u32,
}

impl KernelMap {
    pub fn kernel_volume(&self) -> usize {
        self.offsets.len()
    }
}

/// Build the kernel map for a convolution over `input`.
///
/// * `stride == 1`: submanifold 3x3x3 convolution, output coords = input coords.
/// * `stride == 2, !transpose`: 2x2x2 downsampling convolution; output coords
///   are the distinct halved input coords.
/// * `transpose`: 2x2x2 upsampling onto `out_coords`, which must be the
///   cached encoder coordinates at half the input stride.
pub fn build_kernel_map<R: Real>(
    input: &SparseGrid<R>,
    stride: u32,
    transpose: bool,
    out_coords: Option<&[[i32; 4]]>,
) -> Result<KernelMap> {
    match (stride, transpose) {
        (1, false) => {
            let out = input.coords.clone();
            let mut pairs = vec![Vec::new(); 27];
            for (s, d) in KERNEL1_OFFSETS.iter().enumerate() {
                for (o, c) in out.iter().enumerate() {
                    let probe = [c[0], c[1] + d[0], c[2] + d[1], c[3] + d[2]];
                    if let Some(i) = input.row_of(&probe) {
                        pairs[s].push((i, o));
                    }
                }
            }
            Ok(KernelMap {
                offsets: KERNEL1_OFFSETS.to_vec(),
                pairs,
                out_coords: out,
                out_stride: input.stride,
            })
        }
        (2, false) => {
            let mut out: Vec<[i32; 4]> = input
                .coords
                .iter()
                .map(|c| [c[0], c[1] >> 1, c[2] >> 1, c[3] >> 1])
                .collect();
            out.sort();
            out.dedup();
            let mut pairs = vec![Vec::new(); 8];
            for (s, d) in KERNEL2_OFFSETS.iter().enumerate() {
                for (o, c) in out.iter().enumerate() {
                    let probe = [c[0], 2 * c[1] + d[0], 2 * c[2] + d[1], 2 * c[3] + d[2]];
                    if let Some(i) = input.row_of(&probe) {
                        pairs[s].push((i, o));
                    }
                }
            }
            Ok(KernelMap {
                offsets: KERNEL2_OFFSETS.to_vec(),
                pairs,
                out_coords: out,
                out_stride: input.stride * 2,
            })
        }
        (2, true) => {
            let out = out_coords
                .ok_or_else(|| {
                    Error::contract("transpose convolution requires cached output coordinates")
                })?
                .to_vec();
            let mut pairs = vec![Vec::new(); 8];
            for (o, fc) in out.iter().enumerate() {
                let coarse = [fc[0], fc[1] >> 1, fc[2] >> 1, fc[3] >> 1];
                let d = [fc[1] - 2 * coarse[1], fc[2] - 2 * coarse[2], fc[3] - 2 * coarse[3]];
                let s = (d[0] * 4 + d[1] * 2 + d[2]) as usize;
                if let Some(i) = input.row_of(&coarse) {
                    pairs[s].push((i, o));
                }
            }
            Ok(KernelMap {
                offsets: KERNEL2_OFFSETS.to_vec(),
                pairs,
                out_coords: out,
                out_stride: input.stride / 2,
            })
        }
        _ => Err(Error::config(format!("unsupported stride {stride}"))),
    }
}

/// Sparse convolution: `out[o] = bias + Σ_δ Σ_{(i,o)} in[i] · W[δ]`.
///
/// `weights` is `(K · F_in) x F_out` with the `F_in x F_out` block of offset
/// `δ_k` at rows `k·F_in .. (k+1)·F_in`. Differentiable in weights, bias and
/// input features.
pub fn sparse_conv<R: Real>(
    input: &SparseGrid<R>,
    weights: &Tensor<R>,
    bias: &Tensor<R>,
    kmap: &KernelMap,
) -> Result<SparseGrid<R>> {
    let f_in = input.feature_dim();
    let k = kmap.kernel_volume();
    if weights.rows() != k * f_in {
        return Err(Error::dim(format!(
            "weights rows {} != kernel volume {k} x in dim {f_in}",
            weights.rows()
        )));
    }
    let f_out = weights.cols();
    if bias.len() != f_out {
        return Err(Error::dim("bias width mismatch"));
    }
    let n_out = kmap.out_coords.len();
    let mut acc = Tensor::zeros(vec![n_out, f_out]);
    for (s, pairs) in kmap.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let in_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let out_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let wk_rows: Vec<usize> = (s * f_in..(s + 1) * f_in).collect();
        let wk = ops::gather_rows(weights, &wk_rows)?;
        let gathered = ops::gather_rows(&input.features, &in_rows)?;
        let prod = ops::matmul(&gathered, &wk)?;
        acc = ops::scatter_add(&acc, &out_rows, &prod)?;
    }
    let bias_row = bias.reshape(vec![1, f_out])?;
    let out_feats = ops::add(&acc, &bias_row)?;
    SparseGrid::new(
        kmap.out_coords.clone(),
        kmap.out_stride,
        input.resolution,
        out_feats,
        input.batch_size,
    )
}
