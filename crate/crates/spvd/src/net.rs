//! The denoising network: a sparse voxel U-Net interleaved with a
//! shared-MLP point branch, conditioned on the timestep via feature-wise
//! affine modulation.
//!
//! The layer layout is a pure function of [`NetworkConfig`]; `plan` is the
//! single source of truth used both to materialize parameters and to count
//! them without allocating.

use crate::diffusion::{time_embedding, Denoiser};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::voxelize::{build_point_map, devoxelize_trilinear, voxelize, Point2VoxelMap};
use crate::sparse::conv::{build_kernel_map, sparse_conv};
use crate::sparse::{film_broadcast, sparse_attention, SparseGrid};
use crate::tensor::{ops, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Down,
    Up,
    None,
}

/// One encoder/decoder stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub feature_dim: usize,
    pub project_to_points: bool,
    pub resample: Resample,
    pub use_attention: bool,
}

impl BlockSpec {
    fn new(feature_dim: usize, project: bool, resample: Resample, attn: bool) -> Self {
        BlockSpec {
            feature_dim,
            project_to_points: project,
            resample,
            use_attention: attn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: String,
    pub stem: BlockSpec,
    pub down: Vec<BlockSpec>,
    pub mid: Option<BlockSpec>,
    pub up: Vec<BlockSpec>,
    pub base_resolution: u32,
    pub time_embed_dim: usize,
    /// 0 = unconditional.
    pub num_classes: usize,
    /// Widths grow at the residual block's first convolution when set;
    /// otherwise at the downsampling convolution.
    pub widen_at_first_conv: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down.len() != self.up.len() {
            return Err(Error::config(format!(
                "{} down blocks cannot pair with {} up blocks",
                self.down.len(),
                self.up.len()
            )));
        }
        if self.down.is_empty() {
            return Err(Error::config("network needs at least one down/up pair"));
        }
        if self.stem.resample != Resample::None {
            return Err(Error::config("stem must not resample"));
        }
        if let Some(m) = &self.mid {
            if m.resample != Resample::None {
                return Err(Error::config("mid block must not resample"));
            }
        }
        if self.down.iter().any(|b| b.resample != Resample::Down) {
            return Err(Error::config("encoder blocks must downsample"));
        }
        if self.up.iter().any(|b| b.resample != Resample::Up) {
            return Err(Error::config("decoder blocks must upsample"));
        }
        if !self.up.last().unwrap().project_to_points {
            return Err(Error::config(
                "final decoder block must project to points to produce output",
            ));
        }
        let depth = self.down.len() as u32;
        if self.base_resolution < (1 << depth) {
            return Err(Error::config(format!(
                "resolution {} too small for {} downsamplings",
                self.base_resolution, depth
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and >= 2"));
        }
        for b in std::iter::once(&self.stem)
            .chain(&self.down)
            .chain(&self.mid)
            .chain(&self.up)
        {
            if b.feature_dim == 0 {
                return Err(Error::config("feature dims must be positive"));
            }
        }
        Ok(())
    }

    /// Named presets: `spvd-tiny` (test scale) and the three full-scale
    /// configurations `spvd-s`, `spvd-m`, `spvd-l`.
    pub fn preset(name: &str) -> Result<NetworkConfig> {
        use Resample::{Down, None as NoRs, Up};
        let cfg = match name {
            "spvd-tiny" => NetworkConfig {
                preset: name.into(),
                stem: BlockSpec::new(16, false, NoRs, false),
                down: vec![
                    BlockSpec::new(16, true, Down, false),
                    BlockSpec::new(32, true, Down, false),
                ],
                mid: Some(BlockSpec::new(32, false, NoRs, true)),
                up: vec![
                    BlockSpec::new(32, true, Up, false),
                    BlockSpec::new(16, true, Up, false),
                ],
                base_resolution: 16,
                time_embed_dim: 32,
                num_classes: 0,
                widen_at_first_conv: true,
            },
            "spvd-s" => NetworkConfig {
                preset: name.into(),
                stem: BlockSpec::new(32, false, NoRs, false),
                down: vec![
                    BlockSpec::new(32, false, Down, false),
                    BlockSpec::new(64, false, Down, false),
                    BlockSpec::new(128, false, Down, false),
                    BlockSpec::new(256, false, Down, true),
                ],
                mid: Some(BlockSpec::new(256, false, NoRs, true)),
                up: vec![
                    BlockSpec::new(256, false, Up, true),
                    BlockSpec::new(128, false, Up, false),
                    BlockSpec::new(64, false, Up, false),
                    BlockSpec::new(32, true, Up, false),
                ],
                base_resolution: 32,
                time_embed_dim: 128,
                num_classes: 0,
                widen_at_first_conv: true,
            },
            "spvd-m" => NetworkConfig {
                preset: name.into(),
                stem: BlockSpec::new(32, true, NoRs, false),
                down: vec![
                    BlockSpec::new(64, false, Down, false),
                    BlockSpec::new(128, false, Down, false),
                    BlockSpec::new(192, false, Down, false),
                    BlockSpec::new(192, false, Down, true),
                    BlockSpec::new(256, true, Down, true),
                ],
                mid: Some(BlockSpec::new(256, false, NoRs, true)),
                up: vec![
                    BlockSpec::new(192, false, Up, true),
                    BlockSpec::new(192, true, Up, true),
                    BlockSpec::new(128, false, Up, false),
                    BlockSpec::new(64, false, Up, false),
                    BlockSpec::new(32, true, Up, false),
                ],
                base_resolution: 32,
                time_embed_dim: 128,
                num_classes: 0,
                widen_at_first_conv: false,
            },
            "spvd-l" => NetworkConfig {
                preset: name.into(),
                stem: BlockSpec::new(64, true, NoRs, false),
                down: vec![
                    BlockSpec::new(128, false, Down, false),
                    BlockSpec::new(192, false, Down, false),
                    BlockSpec::new(256, false, Down, false),
                    BlockSpec::new(384, false, Down, true),
                    BlockSpec::new(384, true, Down, true),
                ],
                mid: Some(BlockSpec::new(384, false, NoRs, true)),
                up: vec![
                    BlockSpec::new(384, false, Up, true),
                    BlockSpec::new(256, true, Up, true),
                    BlockSpec::new(192, false, Up, false),
                    BlockSpec::new(128, false, Up, false),
                    BlockSpec::new(64, true, Up, false),
                ],
                base_resolution: 32,
                time_embed_dim: 256,
                num_classes: 0,
                widen_at_first_conv: false,
            },
            other => return Err(Error::config(format!("unknown preset '{other}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Largest group count ≤ 8 that divides the channel width.
pub fn norm_groups(f: usize) -> usize {
    let mut g = f.min(8);
    while f % g != 0 {
        g -= 1;
    }
    g
}

/// Attention head count: up to 4 heads of at least 8 channels each.
pub fn attn_heads(f: usize) -> usize {
    let mut h = (f / 8).clamp(1, 4);
    while f % h != 0 {
        h -= 1;
    }
    h
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `N(0, 1/fan_in)`
    FanIn(usize),
    One,
    Zero,
}

struct ParamDef {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn def(defs: &mut Vec<ParamDef>, name: String, rows: usize, cols: usize, init: Init) {
    defs.push(ParamDef {
        name,
        rows,
        cols,
        init,
    });
}

fn def_conv(defs: &mut Vec<ParamDef>, prefix: &str, k: usize, a: usize, b: usize) {
    def(defs, format!("{prefix}.w"), k * a, b, Init::FanIn(k * a));
    def(defs, format!("{prefix}.b"), 1, b, Init::Zero);
}

fn def_norm(defs: &mut Vec<ParamDef>, prefix: &str, f: usize) {
    def(defs, format!("{prefix}.g"), 1, f, Init::One);
    def(defs, format!("{prefix}.b"), 1, f, Init::Zero);
}

fn def_res_block(defs: &mut Vec<ParamDef>, p: &str, a: usize, b: usize, d: usize, attn: bool) {
    def_conv(defs, &format!("{p}.conv1"), 27, a, b);
    def_norm(defs, &format!("{p}.norm1"), b);
    def(defs, format!("{p}.temb.w1"), d, d, Init::FanIn(d));
    def(defs, format!("{p}.temb.b1"), 1, d, Init::Zero);
    def(defs, format!("{p}.temb.w2"), d, 2 * b, Init::FanIn(d));
    def(defs, format!("{p}.temb.b2"), 1, 2 * b, Init::Zero);
    def_conv(defs, &format!("{p}.conv2"), 27, b, b);
    def_norm(defs, &format!("{p}.norm2"), b);
    if a != b {
        def(defs, format!("{p}.shortcut.w"), a, b, Init::FanIn(a));
    }
    if attn {
        for w in ["wq", "wk", "wv", "wo"] {
            def(defs, format!("{p}.attn.{w}"), b, b, Init::FanIn(b));
        }
    }
}

fn def_point_mlp(defs: &mut Vec<ParamDef>, p: &str, a: usize, b: usize) {
    let h = a.max(b);
    def(defs, format!("{p}.w1"), a, h, Init::FanIn(a));
    def(defs, format!("{p}.b1"), 1, h, Init::Zero);
    def(defs, format!("{p}.w2"), h, b, Init::FanIn(h));
    def(defs, format!("{p}.b2"), 1, b, Init::Zero);
}

/// The full, ordered layer plan for a config.
fn plan(cfg: &NetworkConfig) -> Result<Vec<ParamDef>> {
    cfg.validate()?;
    let mut defs = Vec::new();
    let d = cfg.time_embed_dim;
    def_conv(&mut defs, "stem.conv", 27, 3, cfg.stem.feature_dim);
    let mut vw = cfg.stem.feature_dim;
    let mut pw = 3usize;
    if cfg.stem.project_to_points {
        def_point_mlp(&mut defs, "stem.point", pw, vw);
        pw = vw;
    }
    let mut skip_widths = Vec::new();
    for (i, blk) in cfg.down.iter().enumerate() {
        let rb_out = if cfg.widen_at_first_conv {
            blk.feature_dim
        } else {
            vw
        };
        def_res_block(&mut defs, &format!("down{i}.res"), vw, rb_out, d, blk.use_attention);
        def_conv(&mut defs, &format!("down{i}.down"), 8, rb_out, blk.feature_dim);
        skip_widths.push(rb_out);
        vw = blk.feature_dim;
        if blk.project_to_points {
            def_point_mlp(&mut defs, &format!("down{i}.point"), pw, vw);
            pw = vw;
        }
    }
    if let Some(mid) = &cfg.mid {
        def_res_block(&mut defs, "mid.res", vw, vw, d, mid.use_attention);
    }
    let nd = cfg.down.len();
    for (j, blk) in cfg.up.iter().enumerate() {
        let s = skip_widths[nd - 1 - j];
        def_conv(&mut defs, &format!("up{j}.up"), 8, vw, blk.feature_dim);
        def_res_block(
            &mut defs,
            &format!("up{j}.res"),
            blk.feature_dim + s,
            blk.feature_dim,
            d,
            blk.use_attention,
        );
        vw = blk.feature_dim;
        if blk.project_to_points {
            def_point_mlp(&mut defs, &format!("up{j}.point"), pw, vw);
            pw = vw;
        }
    }
    if cfg.num_classes > 0 {
        def(&mut defs, "class.embed".into(), cfg.num_classes, d, Init::FanIn(d));
    }
    def(&mut defs, "head.w".into(), pw, 3, Init::Zero);
    def(&mut defs, "head.b".into(), 1, 3, Init::Zero);
    Ok(defs)
}

/// Exact scalar parameter count for a config, without allocating weights.
pub fn param_count_for(cfg: &NetworkConfig) -> Result<usize> {
    Ok(plan(cfg)?.iter().map(|d| d.rows * d.cols).sum())
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<R: Real> {
    entries: Vec<(String, Tensor<R>)>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<R>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.try_get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replace a parameter's tensor; shape must be unchanged.
    pub fn set(&mut self, name: &str, t: Tensor<R>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?;
        if t.shape() != self.entries[i].1.shape() {
            return Err(Error::dim(format!("parameter '{name}' shape changed")));
        }
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
pub struct Network<R: Real> {
    pub config: NetworkConfig,
    pub params: ParamStore<R>,
}

/// Materialize the layer plan with fan-in-scaled random weights; the output
/// head starts at zero so the untrained network predicts zero noise.
pub fn build_network<R: Real>(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Network<R>> {
    let mut params = ParamStore::new();
    for d in plan(cfg)? {
        let t = match d.init {
            Init::FanIn(fan) => {
                let scale = 1.0 / (fan as f64).sqrt();
                let raw = Tensor::<R>::randn(vec![d.rows, d.cols], rng, false);
                let data = raw.data().iter().map(|&v| v * R::from_f64(scale)).collect();
                Tensor::from_vec(vec![d.rows, d.cols], data, true)?
            }
            Init::One => Tensor::from_vec(
                vec![d.rows, d.cols],
                vec![R::one(); d.rows * d.cols],
                true,
            )?,
            Init::Zero => Tensor::from_vec(
                vec![d.rows, d.cols],
                vec![R::zero(); d.rows * d.cols],
                true,
            )?,
        };
        params.insert(&d.name, t)?;
    }
    Ok(Network {
        config: cfg.clone(),
        params,
    })
}

pub fn param_count<R: Real>(net: &Network<R>) -> usize {
    net.params.scalar_count()
}

fn ones_row<R: Real>(f: usize) -> Tensor<R> {
    Tensor::from_vec(vec![1, f], vec![R::one(); f], false).expect("static shape")
}

fn linear<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    ops::add(&ops::matmul(x, w)?, b)
}

/// conv → norm → silu → time-affine → conv → norm → silu → residual, with a
/// 1x1 shortcut when widths differ and optional self-attention at the end.
/// The time affine's scale is `1 + Δ`, so a zero time MLP is the identity.
pub fn res_conv_block<R: Real>(
    ps: &ParamStore<R>,
    prefix: &str,
    grid: &SparseGrid<R>,
    temb: &Tensor<R>,
    use_attention: bool,
) -> Result<SparseGrid<R>> {
    let g = |s: &str| ps.get(&format!("{prefix}.{s}"));
    if temb.rows() != grid.batch_size {
        return Err(Error::dim("time embedding rows must match batch size"));
    }
    let f_out = g("conv1.w")?.cols();
    let ids = grid.batch_ids();
    let groups = norm_groups(f_out);
    // stride-1 submanifold convs share one kernel map: coords are unchanged
    let kmap = build_kernel_map(grid, 1, false, None)?;

    let h = sparse_conv(grid, g("conv1.w")?, g("conv1.b")?, &kmap)?;
    let f1 = ops::silu(&ops::group_norm(
        &h.features,
        groups,
        &ids,
        grid.batch_size,
        g("norm1.g")?,
        g("norm1.b")?,
    )?)?;
    let h = h.with_features(f1)?;

    let t1 = ops::silu(&linear(temb, g("temb.w1")?, g("temb.b1")?)?)?;
    let sv = linear(&t1, g("temb.w2")?, g("temb.b2")?)?;
    let scale = ops::add(&ops::slice_cols(&sv, 0, f_out)?, &ones_row(f_out))?;
    let shift = ops::slice_cols(&sv, f_out, 2 * f_out)?;
    let h = film_broadcast(&h, &scale, &shift)?;

    let h2 = sparse_conv(&h, g("conv2.w")?, g("conv2.b")?, &kmap)?;
    let f2 = ops::silu(&ops::group_norm(
        &h2.features,
        groups,
        &ids,
        grid.batch_size,
        g("norm2.g")?,
        g("norm2.b")?,
    )?)?;

    let shortcut = match ps.try_get(&format!("{prefix}.shortcut.w")) {
        Some(w) => ops::matmul(&grid.features, w)?,
        None => {
            if grid.feature_dim() != f_out {
                return Err(Error::dim(format!(
                    "residual width {} -> {f_out} needs a shortcut",
                    grid.feature_dim()
                )));
            }
            grid.features.clone()
        }
    };
    let mut out = grid.with_features(ops::add(&f2, &shortcut)?)?;
    if use_attention {
        out = sparse_attention(
            &out,
            g("attn.wq")?,
            g("attn.wk")?,
            g("attn.wv")?,
            g("attn.wo")?,
            attn_heads(f_out),
        )?;
    }
    Ok(out)
}

/// Fuse the voxel branch into the point branch: the devoxelized grid
/// features are added to the MLP-refined point features, and the grid is
/// refilled by averaging the fused point features per voxel.
pub fn point_voxel_fuse<R: Real>(
    ps: &ParamStore<R>,
    prefix: &str,
    grid: &SparseGrid<R>,
    point_feats: &Tensor<R>,
    p2v: &Point2VoxelMap,
) -> Result<(SparseGrid<R>, Tensor<R>)> {
    let g = |s: &str| ps.get(&format!("{prefix}.{s}"));
    let dev = devoxelize_trilinear(grid, p2v)?;
    let h = ops::silu(&linear(point_feats, g("w1")?, g("b1")?)?)?;
    let refined = linear(&h, g("w2")?, g("b2")?)?;
    let fused = ops::add(&refined, &dev)?;
    // mean-pool fused features back into the active voxels
    let mut counts = vec![0usize; grid.len()];
    for &r in &p2v.owner {
        counts[r] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::contract("grid has voxels owning no points"));
    }
    let sums = ops::scatter_add(
        &Tensor::zeros(vec![grid.len(), fused.cols()]),
        &p2v.owner,
        &fused,
    )?;
    let inv = Tensor::from_vec(
        vec![grid.len(), 1],
        counts.iter().map(|&c| R::from_f64(1.0 / c as f64)).collect(),
        false,
    )?;
    let new_grid = grid.with_features(ops::mul(&sums, &inv)?)?;
    Ok((new_grid, fused))
}

/// Predict the noise in `x_t` (`(batch·n) x 3`). Deterministic given inputs
/// and weights; any `n >= 8` works with the same parameters.
pub fn network_forward<R: Real>(
    net: &Network<R>,
    x_t: &Tensor<R>,
    batch: usize,
    n: usize,
    t: &[usize],
    class_ids: Option<&[usize]>,
) -> Result<Tensor<R>> {
    let cfg = &net.config;
    let ps = &net.params;
    if batch == 0 || n < 8 {
        return Err(Error::contract(format!(
            "batch {batch} x points {n}: need batch >= 1 and >= 8 points"
        )));
    }
    if x_t.rows() != batch * n || x_t.cols() != 3 {
        return Err(Error::dim("input must be (batch * n) x 3"));
    }
    if t.len() != batch {
        return Err(Error::dim("one timestep per sample"));
    }

    // conditioning vector: sinusoidal timestep embedding (+ class embedding)
    let d = cfg.time_embed_dim;
    let mut tdata = Vec::with_capacity(batch * d);
    for &tb in t {
        tdata.extend_from_slice(time_embedding::<R>(tb, d)?.data());
    }
    let mut temb = Tensor::from_vec(vec![batch, d], tdata, false)?;
    if let Some(ids) = class_ids {
        if cfg.num_classes == 0 {
            return Err(Error::config("network built without class conditioning"));
        }
        if ids.len() != batch {
            return Err(Error::dim("one class id per sample"));
        }
        if let Some(&bad) = ids.iter().find(|&&c| c >= cfg.num_classes) {
            return Err(Error::index(format!(
                "class id {bad} >= {}",
                cfg.num_classes
            )));
        }
        temb = ops::add(&temb, &ops::gather_rows(ps.get("class.embed")?, ids)?)?;
    }

    let batch_ids: Vec<usize> = (0..batch * n).map(|r| r / n).collect();
    let (grid0, p2v0) = voxelize(x_t, &batch_ids, batch, x_t, cfg.base_resolution)?;
    let mut point_maps: HashMap<u32, Point2VoxelMap> = HashMap::new();
    point_maps.insert(1, p2v0);

    let kmap = build_kernel_map(&grid0, 1, false, None)?;
    let mut grid = sparse_conv(&grid0, ps.get("stem.conv.w")?, ps.get("stem.conv.b")?, &kmap)?;
    let mut point_feats = x_t.clone();

    let fuse = |grid: &SparseGrid<R>,
                    pf: &Tensor<R>,
                    prefix: &str,
                    maps: &mut HashMap<u32, Point2VoxelMap>|
     -> Result<(SparseGrid<R>, Tensor<R>)> {
        if !maps.contains_key(&grid.stride) {
            maps.insert(grid.stride, build_point_map(grid, x_t, &batch_ids)?);
        }
        point_voxel_fuse(ps, prefix, grid, pf, &maps[&grid.stride])
    };

    if cfg.stem.project_to_points {
        let (g, p) = fuse(&grid, &point_feats, "stem.point", &mut point_maps)?;
        grid = g;
        point_feats = p;
    }

    let mut skips: Vec<(Vec<[i32; 4]>, Tensor<R>)> = Vec::new();
    for (i, blk) in cfg.down.iter().enumerate() {
        grid = res_conv_block(ps, &format!("down{i}.res"), &grid, &temb, blk.use_attention)?;
        skips.push((grid.coords.clone(), grid.features.clone()));
        let km = build_kernel_map(&grid, 2, false, None)?;
        grid = sparse_conv(
            &grid,
            ps.get(&format!("down{i}.down.w"))?,
            ps.get(&format!("down{i}.down.b"))?,
            &km,
        )?;
        if blk.project_to_points {
            let (g, p) = fuse(&grid, &point_feats, &format!("down{i}.point"), &mut point_maps)?;
            grid = g;
            point_feats = p;
        }
    }

    if let Some(mid) = &cfg.mid {
        grid = res_conv_block(ps, "mid.res", &grid, &temb, mid.use_attention)?;
    }

    let nd = cfg.down.len();
    for (j, blk) in cfg.up.iter().enumerate() {
        let (coords, skip_feats) = &skips[nd - 1 - j];
        let km = build_kernel_map(&grid, 2, true, Some(coords))?;
        grid = sparse_conv(
            &grid,
            ps.get(&format!("up{j}.up.w"))?,
            ps.get(&format!("up{j}.up.b"))?,
            &km,
        )?;
        grid = grid.with_features(ops::concat_cols(&[grid.features.clone(), skip_feats.clone()])?)?;
        grid = res_conv_block(ps, &format!("up{j}.res"), &grid, &temb, blk.use_attention)?;
        if blk.project_to_points {
            let (g, p) = fuse(&grid, &point_feats, &format!("up{j}.point"), &mut point_maps)?;
            grid = g;
            point_feats = p;
        }
    }

    linear(&point_feats, ps.get("head.w")?, ps.get("head.b")?)
}

impl<R: Real> Denoiser<R> for Network<R> {
    fn denoise(
        &self,
        x_t: &Tensor<R>,
        batch: usize,
        points_per_sample: usize,
        t: &[usize],
        class_ids: Option<&[usize]>,
        _train: bool,
    ) -> Result<Tensor<R>> {
        network_forward(self, x_t, batch, points_per_sample, t, class_ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::grad_check;

    /// Smallest config that exercises every code path.
    fn micro() -> NetworkConfig {
        use Resample::{Down, None as NoRs, Up};
        NetworkConfig {
            preset: "micro".into(),
            stem: BlockSpec::new(4, false, NoRs, false),
            down: vec![
                BlockSpec::new(4, true, Down, false),
                BlockSpec::new(8, false, Down, false),
            ],
            mid: Some(BlockSpec::new(8, false, NoRs, true)),
            up: vec![
                BlockSpec::new(8, false, Up, false),
                BlockSpec::new(4, true, Up, false),
            ],
            base_resolution: 8,
            time_embed_dim: 4,
            num_classes: 0,
            widen_at_first_conv: true,
        }
    }

    fn cloud(seed: u64, rows: usize) -> Tensor<f64> {
        let mut rng = substream(seed, "cloud");
        let raw = Tensor::<f64>::randn(vec![rows, 3], &mut rng, false);
        // keep points inside the unit box
        let data = raw.data().iter().map(|v| (v * 0.4).tanh()).collect();
        Tensor::from_vec(vec![rows, 3], data, false).unwrap()
    }

    #[test]
    fn presets_validate_and_tiny_count_matches_hand_formula() {
        for name in ["spvd-tiny", "spvd-s", "spvd-m", "spvd-l"] {
            NetworkConfig::preset(name).unwrap();
        }
        let cfg = NetworkConfig::preset("spvd-tiny").unwrap();
        let mut rng = substream(1, "init");
        let net: Network<f64> = build_network(&cfg, &mut rng).unwrap();

        // hand-derived count for the tiny preset, layer by layer
        let d = 32usize; // time embedding width
        let res = |a: usize, b: usize, attn: bool| {
            27 * a * b + b            // conv1
                + 2 * b               // norm1
                + d * d + d           // time mlp layer 1
                + d * 2 * b + 2 * b   // time mlp layer 2
                + 27 * b * b + b      // conv2
                + 2 * b               // norm2
                + if a != b { a * b } else { 0 }
                + if attn { 4 * b * b } else { 0 }
        };
        let mlp = |a: usize, b: usize| {
            let h = a.max(b);
            a * h + h + h * b + b
        };
        let conv8 = |a: usize, b: usize| 8 * a * b + b;
        let want = (27 * 3 * 16 + 16)            // stem conv
            + res(16, 16, false) + conv8(16, 16) + mlp(3, 16)   // down0 (+fuse)
            + res(16, 32, false) + conv8(32, 32) + mlp(16, 32)  // down1 (+fuse)
            + res(32, 32, true)                                  // mid
            + conv8(32, 32) + res(32 + 32, 32, false) + mlp(32, 32) // up0 (+fuse)
            + conv8(32, 16) + res(16 + 16, 16, false) + mlp(32, 16) // up1 (+fuse)
            + 16 * 3 + 3; // head
        assert_eq!(param_count(&net), want);
        assert_eq!(param_count_for(&cfg).unwrap(), want);
    }

    #[test]
    fn full_preset_counts_are_plausible() {
        let s = param_count_for(&NetworkConfig::preset("spvd-s").unwrap()).unwrap();
        let m = param_count_for(&NetworkConfig::preset("spvd-m").unwrap()).unwrap();
        let l = param_count_for(&NetworkConfig::preset("spvd-l").unwrap()).unwrap();
        println!("param counts: s={s} m={m} l={l}");
        assert!(s < m && m < l);
        assert!((5_000_000..60_000_000).contains(&s), "{s}");
        assert!((200_000_000 > l) && (l > m), "{l}");
    }

    #[test]
    fn doubling_widths_roughly_quadruples_count() {
        let base = micro();
        let mut wide = micro();
        wide.stem.feature_dim *= 2;
        for b in wide.down.iter_mut().chain(&mut wide.up).chain(wide.mid.iter_mut()) {
            b.feature_dim *= 2;
        }
        let a = param_count_for(&base).unwrap() as f64;
        let b = param_count_for(&wide).unwrap() as f64;
        let ratio = b / a;
        assert!(ratio > 3.0 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn mismatched_pairing_rejected() {
        let mut cfg = micro();
        cfg.up.pop();
        assert!(matches!(plan(&cfg), Err(Error::Config(_))));
        let mut cfg = micro();
        cfg.up.last_mut().unwrap().project_to_points = false;
        assert!(plan(&cfg).is_err());
    }

    #[test]
    fn zero_init_head_predicts_zero_noise() {
        let cfg = micro();
        let mut rng = substream(2, "init");
        let net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        let x = cloud(2, 16);
        let out = network_forward(&net, &x, 2, 8, &[3, 7], None).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_contract_and_input_checks() {
        let cfg = NetworkConfig::preset("spvd-tiny").unwrap();
        let mut rng = substream(3, "init");
        let net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        for n in [256usize, 2048] {
            let x = cloud(3 + n as u64, n);
            let out = network_forward(&net, &x, 1, n, &[10], None).unwrap();
            assert_eq!(out.shape(), &[n, 3]);
        }
        let x = cloud(4, 8);
        assert!(network_forward(&net, &x, 0, 8, &[], None).is_err());
        assert!(network_forward(&net, &x, 2, 4, &[1, 1], None).is_err());
    }

    fn randomize_head(net: &mut Network<f64>, seed: u64) {
        let mut rng = substream(seed, "head");
        let pw = net.params.get("head.w").unwrap().rows();
        net.params
            .set("head.w", Tensor::randn(vec![pw, 3], &mut rng, true))
            .unwrap();
    }

    #[test]
    fn point_order_equivariance() {
        let cfg = micro();
        let mut rng = substream(5, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        randomize_head(&mut net, 5);
        let n = 12;
        let x = cloud(5, n);
        let out = network_forward(&net, &x, 1, n, &[4], None).unwrap();
        // rotate the point order
        let perm: Vec<usize> = (0..n).map(|i| (i + 5) % n).collect();
        let xp = ops::gather_rows(&x, &perm).unwrap();
        let outp = network_forward(&net, &xp, 1, n, &[4], None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                let a = outp.data()[i * 3 + j];
                let b = out.data()[p * 3 + j];
                assert!((a - b).abs() < 1e-5, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_independence_is_exact() {
        let cfg = micro();
        let mut rng = substream(6, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        randomize_head(&mut net, 6);
        let a = cloud(61, 8);
        let b = cloud(62, 8);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let ab = Tensor::from_vec(vec![16, 3], data, false).unwrap();
        let solo = network_forward(&net, &a, 1, 8, &[9], None).unwrap();
        let joint = network_forward(&net, &ab, 2, 8, &[9, 3], None).unwrap();
        assert_eq!(&joint.data()[..24], solo.data());
        // duplicated sample -> identical outputs for both copies
        let mut dd = a.data().to_vec();
        dd.extend_from_slice(a.data());
        let aa = Tensor::from_vec(vec![16, 3], dd, false).unwrap();
        let out = network_forward(&net, &aa, 2, 8, &[9, 9], None).unwrap();
        assert_eq!(&out.data()[..24], &out.data()[24..]);
    }

    #[test]
    fn film_makes_output_depend_on_t() {
        let cfg = micro();
        let mut rng = substream(7, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        randomize_head(&mut net, 7);
        let x = cloud(7, 8);
        let o1 = network_forward(&net, &x, 1, 8, &[1], None).unwrap();
        let o2 = network_forward(&net, &x, 1, 8, &[90], None).unwrap();
        assert_ne!(o1.data(), o2.data());
    }

    #[test]
    fn class_conditioning_changes_output_and_is_validated() {
        let mut cfg = micro();
        cfg.num_classes = 3;
        let mut rng = substream(8, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        randomize_head(&mut net, 8);
        let x = cloud(8, 8);
        let o0 = network_forward(&net, &x, 1, 8, &[5], Some(&[0])).unwrap();
        let o1 = network_forward(&net, &x, 1, 8, &[5], Some(&[2])).unwrap();
        assert_ne!(o0.data(), o1.data());
        assert!(network_forward(&net, &x, 1, 8, &[5], Some(&[3])).is_err());
    }

    #[test]
    fn res_block_with_zero_second_conv_is_identity() {
        let cfg = micro();
        let mut rng = substream(9, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        // zero the residual path: second conv and the time MLP output
        for name in ["mid.res.conv2.w", "mid.res.conv2.b", "mid.res.temb.w2", "mid.res.temb.b2"] {
            let t = net.params.get(name).unwrap();
            let z = Tensor::from_vec(t.shape().to_vec(), vec![0.0; t.len()], true).unwrap();
            net.params.set(name, z).unwrap();
        }
        let x = cloud(9, 8);
        let ids = vec![0usize; 8];
        let mut frng = substream(9, "feat");
        let feats = Tensor::randn(vec![8, 8], &mut frng, false);
        let (grid, _) = voxelize(&x, &ids, 1, &feats, 8).unwrap();
        let temb = Tensor::randn(vec![1, 4], &mut frng, false);
        let out = res_conv_block(&net.params, "mid.res", &grid, &temb, false).unwrap();
        for (a, b) in out.features.data().iter().zip(grid.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_branch_ablations() {
        let cfg = micro();
        let mut rng = substream(10, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        let x = cloud(10, 8);
        let ids = vec![0usize; 8];
        let mut frng = substream(10, "feat");
        let pf = Tensor::randn(vec![8, 3], &mut frng, false);
        let feats = Tensor::randn(vec![8, 4], &mut frng, false);
        let (grid, p2v) = voxelize(&x, &ids, 1, &feats, 8).unwrap();

        // zero voxel features -> fused output is the point MLP path alone
        let zgrid = grid.with_features(Tensor::zeros(vec![grid.len(), 4])).unwrap();
        let (_, fused) = point_voxel_fuse(&net.params, "down0.point", &zgrid, &pf, &p2v).unwrap();
        let g = |s: &str| net.params.get(&format!("down0.point.{s}")).unwrap();
        let h = ops::silu(&linear(&pf, g("w1"), g("b1")).unwrap()).unwrap();
        let want = linear(&h, g("w2"), g("b2")).unwrap();
        assert_eq!(fused.data(), want.data());

        // zero point MLP -> fused output is the devoxelized voxel path alone
        for name in ["down0.point.w1", "down0.point.b1", "down0.point.w2", "down0.point.b2"] {
            let t = net.params.get(name).unwrap();
            let z = Tensor::from_vec(t.shape().to_vec(), vec![0.0; t.len()], true).unwrap();
            net.params.set(name, z).unwrap();
        }
        let (_, fused) = point_voxel_fuse(&net.params, "down0.point", &grid, &pf, &p2v).unwrap();
        let dev = devoxelize_trilinear(&grid, &p2v).unwrap();
        assert_eq!(fused.data(), dev.data());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = micro();
        let mut rng = substream(11, "init");
        let mut net: Network<f64> = build_network(&cfg, &mut rng).unwrap();
        randomize_head(&mut net, 11);
        let x = cloud(11, 8);
        let mut trng = substream(11, "target");
        let target = Tensor::randn(vec![8, 3], &mut trng, false);
        // > 100 scalars across layers at every depth
        for name in [
            "stem.conv.b",
            "down0.res.temb.w2",
            "down1.down.b",
            "mid.res.attn.wq",
            "mid.res.norm1.g",
            "up0.res.shortcut.w",
            "up1.point.b2",
            "head.w",
        ] {
            let err = grad_check(
                |p| {
                    let mut n2 = net.clone();
                    n2.params.set(name, p.clone())?;
                    let out = network_forward(&n2, &x, 1, 8, &[6], None)?;
                    ops::mse(&out, &target)
                },
                net.params.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
