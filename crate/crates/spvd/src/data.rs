//! Point-cloud file formats, synthetic datasets with part labels,
//! normalization, task masks, and checkpoint persistence.

use crate::diffusion::{SampleMask, ScheduleConfig};
use crate::error::{Error, Result};
use crate::net::{param_count_for, Network, NetworkConfig, ParamStore};
use crate::real::Real;
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct PointCloud<R: Real> {
    pub name: String,
    pub class_id: usize,
    /// `N x 3`, normalized into `[-1, 1]^3` for dataset shapes.
    pub points: Tensor<R>,
    /// Per-point part labels, present for shapes that support masking tasks.
    pub part_ids: Option<Vec<usize>>,
    /// Inverse transform: original = normalized * scale + center.
    pub center: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset<R: Real> {
    pub shapes: Vec<PointCloud<R>>,
    pub kind: String,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// XYZ / PLY

/// One whitespace-separated `x y z` triple per line; blank lines allowed.
pub fn load_xyz<R: Real>(path: &Path) -> Result<PointCloud<R>> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                format!("{}:{}", path.display(), lineno + 1),
                format!("expected 3 coordinates, got {}", fields.len()),
            ));
        }
        for f in fields {
            let v: f32 = f.parse().map_err(|_| {
                Error::parse(
                    format!("{}:{}", path.display(), lineno + 1),
                    format!("not a number: '{f}'"),
                )
            })?;
            data.push(R::from_f32(v));
        }
    }
    if data.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no points".to_string()));
    }
    let n = data.len() / 3;
    Ok(PointCloud {
        name: path.display().to_string(),
        class_id: 0,
        points: Tensor::from_vec(vec![n, 3], data, false)?,
        part_ids: None,
        center: [0.0; 3],
        scale: 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn ply_type_size(t: &str) -> Option<usize> {
    match t {
        "char" | "uchar" | "int8" | "uint8" => Some(1),
        "short" | "ushort" | "int16" | "uint16" => Some(2),
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => Some(4),
        "double" | "float64" => Some(8),
        _ => None,
    }
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    /// (type, name) for each vertex property, in declared order.
    vertex_props: Vec<(String, String)>,
    /// counts of any further elements (faces etc.), in order after vertices.
    trailing_elements: Vec<(String, usize, Vec<(String, String, Option<(String, String)>)>)>,
    header_len: usize,
}

fn parse_ply_header(bytes: &[u8], path: &Path) -> Result<PlyHeader> {
    let err = |line: usize, msg: String| Error::parse(format!("{}:{}", path.display(), line), msg);
    let mut pos = 0usize;
    let mut lineno = 0usize;
    let mut lines = Vec::new();
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| err(lineno + 1, "unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| err(lineno + 1, "non-utf8 header".into()))?
            .trim_end_matches('\r')
            .to_string();
        pos = end + 1;
        lineno += 1;
        let done = line == "end_header";
        lines.push((lineno, line));
        if done {
            break;
        }
    }
    let mut it = lines.iter();
    match it.next() {
        Some((_, l)) if l == "ply" => {}
        Some((n, l)) => return Err(err(*n, format!("expected 'ply', got '{l}'"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut format = None;
    let mut elements: Vec<(String, usize, Vec<(String, String, Option<(String, String)>)>)> =
        Vec::new();
    for (n, line) in it {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.first().copied() {
            Some("comment") | None => {}
            Some("format") => {
                format = Some(match f.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(err(*n, format!("unsupported format {other:?}")))
                    }
                });
            }
            Some("element") => {
                if f.len() != 3 {
                    return Err(err(*n, "malformed element line".into()));
                }
                let count: usize = f[2]
                    .parse()
                    .map_err(|_| err(*n, format!("bad element count '{}'", f[2])))?;
                elements.push((f[1].to_string(), count, Vec::new()));
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(*n, "property before any element".into()))?;
                if f.get(1).copied() == Some("list") {
                    if f.len() != 5 {
                        return Err(err(*n, "malformed list property".into()));
                    }
                    el.2.push((
                        "list".into(),
                        f[4].to_string(),
                        Some((f[2].to_string(), f[3].to_string())),
                    ));
                } else {
                    if f.len() != 3 {
                        return Err(err(*n, "malformed property line".into()));
                    }
                    el.2.push((f[1].to_string(), f[2].to_string(), None));
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(err(*n, format!("unknown header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| err(lineno, "missing format line".into()))?;
    let vi = elements
        .iter()
        .position(|(name, _, _)| name == "vertex")
        .ok_or_else(|| err(lineno, "no vertex element".into()))?;
    if vi != 0 {
        return Err(err(lineno, "vertex element must come first".into()));
    }
    let (_, vertex_count, props) = elements.remove(0);
    let vertex_props: Vec<(String, String)> = props
        .iter()
        .map(|(t, name, list)| {
            if list.is_some() {
                Err(err(lineno, "list property on vertex element".into()))
            } else {
                Ok((t.clone(), name.clone()))
            }
        })
        .collect::<Result<_>>()?;
    Ok(PlyHeader {
        format,
        vertex_count,
        vertex_props,
        trailing_elements: elements,
        header_len: pos,
    })
}

/// PLY subset: ascii or binary little-endian, `element vertex` first with
/// float `x y z` (extra scalar properties ignored); any trailing elements
/// (faces) are skipped.
pub fn load_ply<R: Real>(path: &Path) -> Result<PointCloud<R>> {
    let bytes = fs::read(path)?;
    let h = parse_ply_header(&bytes, path)?;
    let loc = || path.display().to_string();
    let mut xyz_idx = [usize::MAX; 3];
    for (i, (t, name)) in h.vertex_props.iter().enumerate() {
        if let Some(axis) = ["x", "y", "z"].iter().position(|a| a == name) {
            if t != "float" && t != "float32" {
                return Err(Error::parse(
                    loc(),
                    format!("vertex property '{name}' must be float, got {t}"),
                ));
            }
            xyz_idx[axis] = i;
        }
    }
    if xyz_idx.contains(&usize::MAX) {
        return Err(Error::parse(loc(), "vertex element missing x/y/z".to_string()));
    }
    // an integer "part" property carries per-point part labels
    let part_idx = h.vertex_props.iter().position(|(_, name)| name == "part");
    let mut parts: Vec<usize> = Vec::new();
    let mut data = vec![R::zero(); h.vertex_count * 3];
    match h.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[h.header_len..])
                .map_err(|_| Error::parse(loc(), "non-utf8 body".to_string()))?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for v in 0..h.vertex_count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::parse(loc(), format!("truncated at vertex {v}")))?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != h.vertex_props.len() {
                    return Err(Error::parse(
                        loc(),
                        format!("vertex {v}: expected {} fields", h.vertex_props.len()),
                    ));
                }
                for a in 0..3 {
                    let raw = fields[xyz_idx[a]];
                    let val: f32 = raw
                        .parse()
                        .map_err(|_| Error::parse(loc(), format!("vertex {v}: bad value '{raw}'")))?;
                    data[v * 3 + a] = R::from_f32(val);
                }
                if let Some(pi) = part_idx {
                    let raw = fields[pi];
                    let p: usize = raw.parse().map_err(|_| {
                        Error::parse(loc(), format!("vertex {v}: bad part label '{raw}'"))
                    })?;
                    parts.push(p);
                }
            }
            // trailing ascii elements (faces) are ignored
        }
        PlyFormat::BinaryLittleEndian => {
            let sizes: Vec<usize> = h
                .vertex_props
                .iter()
                .map(|(t, name)| {
                    ply_type_size(t).ok_or_else(|| {
                        Error::parse(loc(), format!("unsupported property type {t} for '{name}'"))
                    })
                })
                .collect::<Result<_>>()?;
            let stride: usize = sizes.iter().sum();
            let body = &bytes[h.header_len..];
            if body.len() < stride * h.vertex_count {
                return Err(Error::parse(
                    loc(),
                    format!(
                        "truncated payload: need {} bytes, have {}",
                        stride * h.vertex_count,
                        body.len()
                    ),
                ));
            }
            let mut offsets = vec![0usize; sizes.len()];
            let mut acc = 0;
            for (i, s) in sizes.iter().enumerate() {
                offsets[i] = acc;
                acc += s;
            }
            for v in 0..h.vertex_count {
                for a in 0..3 {
                    let off = v * stride + offsets[xyz_idx[a]];
                    let raw: [u8; 4] = body[off..off + 4].try_into().unwrap();
                    data[v * 3 + a] = R::from_f32(f32::from_le_bytes(raw));
                }
                if let Some(pi) = part_idx {
                    let off = v * stride + offsets[pi];
                    let (t, _) = &h.vertex_props[pi];
                    let p = match t.as_str() {
                        "uchar" | "uint8" => body[off] as usize,
                        "ushort" | "uint16" => {
                            u16::from_le_bytes(body[off..off + 2].try_into().unwrap()) as usize
                        }
                        "uint" | "uint32" | "int" | "int32" => {
                            u32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as usize
                        }
                        other => {
                            return Err(Error::parse(
                                loc(),
                                format!("part labels must be an integer type, got {other}"),
                            ))
                        }
                    };
                    parts.push(p);
                }
            }
            // trailing binary elements (faces) are ignored
        }
    }
    let _ = &h.trailing_elements;
    Ok(PointCloud {
        name: loc(),
        class_id: 0,
        points: Tensor::from_vec(vec![h.vertex_count, 3], data, false)?,
        part_ids: part_idx.map(|_| parts),
        center: [0.0; 3],
        scale: 1.0,
    })
}

/// Write vertices only, as float x/y/z.
pub fn save_ply<R: Real>(cloud: &Tensor<R>, path: &Path, format: PlyFormat) -> Result<()> {
    save_ply_labeled(cloud, None, path, format)
}

/// Like [`save_ply`], with an optional per-point integer `part` property.
pub fn save_ply_labeled<R: Real>(
    cloud: &Tensor<R>,
    part_ids: Option<&[usize]>,
    path: &Path,
    format: PlyFormat,
) -> Result<()> {
    if cloud.cols() != 3 {
        return Err(Error::dim("cloud must be N x 3"));
    }
    let n = cloud.rows();
    if let Some(p) = part_ids {
        if p.len() != n {
            return Err(Error::dim("one part label per point"));
        }
    }
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let part_prop = if part_ids.is_some() {
        "property uint part\n"
    } else {
        ""
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\n{part_prop}end_header\n"
    )?;
    match format {
        PlyFormat::Ascii => {
            for i in 0..n {
                // {:?} prints the shortest representation that round-trips
                write!(
                    out,
                    "{:?} {:?} {:?}",
                    Real::to_f32(cloud.data()[i * 3]),
                    Real::to_f32(cloud.data()[i * 3 + 1]),
                    Real::to_f32(cloud.data()[i * 3 + 2])
                )?;
                if let Some(p) = part_ids {
                    write!(out, " {}", p[i])?;
                }
                out.push(b'\n');
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..n {
                for a in 0..3 {
                    out.extend_from_slice(&Real::to_f32(cloud.data()[i * 3 + a]).to_le_bytes());
                }
                if let Some(p) = part_ids {
                    out.extend_from_slice(&(p[i] as u32).to_le_bytes());
                }
            }
        }
    }
    atomic_write(path, &out)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    PerShapeUnitBox,
    PerShapeUnitSphere,
}

/// Map a shape into `[-1,1]^3`: unit-box mode centers the bounding box and
/// divides by the max half-extent; unit-sphere mode centers the centroid
/// and divides by the max radius. Returns the inverse transform.
pub fn normalize<R: Real>(
    cloud: &Tensor<R>,
    mode: NormalizeMode,
) -> Result<(Tensor<R>, [f64; 3], f64)> {
    if cloud.cols() != 3 || cloud.rows() == 0 {
        return Err(Error::contract("normalize: cloud must be non-empty N x 3"));
    }
    let n = cloud.rows();
    let get = |i: usize, a: usize| cloud.data()[i * 3 + a].to_f64();
    let center: [f64; 3];
    let scale: f64;
    match mode {
        NormalizeMode::PerShapeUnitBox => {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for i in 0..n {
                for a in 0..3 {
                    lo[a] = lo[a].min(get(i, a));
                    hi[a] = hi[a].max(get(i, a));
                }
            }
            center = [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2.0);
            scale = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max);
        }
        NormalizeMode::PerShapeUnitSphere => {
            let mut c = [0.0; 3];
            for i in 0..n {
                for a in 0..3 {
                    c[a] += get(i, a);
                }
            }
            center = c.map(|v| v / n as f64);
            scale = (0..n)
                .map(|i| {
                    (0..3)
                        .map(|a| (get(i, a) - center[a]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
        }
    }
    if scale <= 0.0 {
        return Err(Error::contract("normalize: degenerate zero-extent cloud"));
    }
    let data = (0..n * 3)
        .map(|k| R::from_f64((cloud.data()[k].to_f64() - center[k % 3]) / scale))
        .collect();
    Ok((Tensor::from_vec(vec![n, 3], data, false)?, center, scale))
}

// ---------------------------------------------------------------------------
// Synthetic shapes

fn unit(rng: &mut ChaCha12Rng) -> f64 {
    rng.gen::<f64>()
}

/// Uniform point on a unit sphere.
fn sphere_point(rng: &mut ChaCha12Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if r > 1e-9 {
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}

/// Uniform point on the surface of an axis-aligned box, area-weighted.
fn box_surface_point(half: [f64; 3], rng: &mut ChaCha12Rng) -> [f64; 3] {
    let areas = [
        half[1] * half[2], // +-x faces
        half[0] * half[2],
        half[0] * half[1],
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = unit(rng) * total;
    let mut axis = 2;
    for (a, &ar) in areas.iter().enumerate() {
        if pick < ar {
            axis = a;
            break;
        }
        pick -= ar;
    }
    let sign = if unit(rng) < 0.5 { -1.0 } else { 1.0 };
    let mut p = [0.0; 3];
    p[axis] = sign * half[axis];
    for a in 0..3 {
        if a != axis {
            p[a] = (unit(rng) * 2.0 - 1.0) * half[a];
        }
    }
    p
}

fn place(points: &mut Vec<f64>, labels: &mut Vec<usize>, label: usize, p: [f64; 3], at: [f64; 3]) {
    points.extend_from_slice(&[p[0] + at[0], p[1] + at[1], p[2] + at[2]]);
    labels.push(label);
}

/// Legged furniture generator shared by chair and table shapes.
/// `parts`: (label, half-extents, center, point budget) per part.
#[allow(clippy::type_complexity)]
fn boxes_shape(
    parts: &[(usize, [f64; 3], [f64; 3], usize)],
    rng: &mut ChaCha12Rng,
) -> (Vec<f64>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for &(label, half, at, count) in parts {
        for _ in 0..count {
            place(&mut pts, &mut labels, label, box_surface_point(half, rng), at);
        }
    }
    (pts, labels)
}

/// Split `n` points into fractions, remainder to the first part.
fn budget(n: usize, fracs: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = fracs.iter().map(|f| (n as f64 * f) as usize).collect();
    let used: usize = out.iter().sum();
    out[0] += n - used;
    out
}

/// Deterministic synthetic dataset. `chairoid` and `tableoid` carry
/// per-point part labels; every part holds at least 5% of the points.
pub fn synth_dataset<R: Real>(
    kind: &str,
    n_shapes: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset<R>> {
    if n_points < 64 {
        return Err(Error::contract(format!(
            "need at least 64 points per shape, got {n_points}"
        )));
    }
    let class_id = match kind {
        "sphere" => 0,
        "box" => 1,
        "cylinder" => 2,
        "chairoid" => 3,
        "tableoid" => 4,
        other => return Err(Error::config(format!("unknown shape kind '{other}'"))),
    };
    let mut shapes = Vec::with_capacity(n_shapes);
    for s in 0..n_shapes {
        let mut rng = substream(seed, &format!("synth-{kind}-{s}"));
        let (raw, part_ids): (Vec<f64>, Option<Vec<usize>>) = match kind {
            "sphere" => {
                let mut pts = Vec::with_capacity(n_points * 3);
                for _ in 0..n_points {
                    pts.extend_from_slice(&sphere_point(&mut rng));
                }
                (pts, None)
            }
            "box" => {
                let half = [
                    0.5 + unit(&mut rng),
                    0.5 + unit(&mut rng),
                    0.5 + unit(&mut rng),
                ];
                let mut pts = Vec::with_capacity(n_points * 3);
                for _ in 0..n_points {
                    pts.extend_from_slice(&box_surface_point(half, &mut rng));
                }
                (pts, None)
            }
            "cylinder" => {
                let r = 0.4 + 0.6 * unit(&mut rng);
                let h = 0.6 + unit(&mut rng);
                let side_area = 2.0 * std::f64::consts::PI * r * 2.0 * h;
                let cap_area = 2.0 * std::f64::consts::PI * r * r;
                let p_side = side_area / (side_area + cap_area);
                let mut pts = Vec::with_capacity(n_points * 3);
                for _ in 0..n_points {
                    let theta = unit(&mut rng) * std::f64::consts::TAU;
                    if unit(&mut rng) < p_side {
                        pts.extend_from_slice(&[
                            r * theta.cos(),
                            (unit(&mut rng) * 2.0 - 1.0) * h,
                            r * theta.sin(),
                        ]);
                    } else {
                        let rr = r * unit(&mut rng).sqrt();
                        let y = if unit(&mut rng) < 0.5 { -h } else { h };
                        pts.extend_from_slice(&[rr * theta.cos(), y, rr * theta.sin()]);
                    }
                }
                (pts, None)
            }
            "chairoid" => {
                // parts: 0 seat, 1 back, 2..=5 legs
                let w = 0.8 + 0.4 * unit(&mut rng); // half-width
                let d = 0.8 + 0.4 * unit(&mut rng); // half-depth
                let leg_h = 0.8 + 0.4 * unit(&mut rng);
                let back_h = 0.8 + 0.4 * unit(&mut rng);
                let t = 0.08; // slab half-thickness
                let counts = budget(n_points, &[0.30, 0.25, 0.1125, 0.1125, 0.1125, 0.1125]);
                let mut parts = vec![
                    (0, [w, t, d], [0.0, 0.0, 0.0], counts[0]),
                    (1, [w, back_h, t], [0.0, back_h + t, -d + t], counts[1]),
                ];
                for (i, (sx, sz)) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                    .iter()
                    .enumerate()
                {
                    parts.push((
                        2 + i,
                        [t, leg_h, t],
                        [sx * (w - t), -leg_h - t, sz * (d - t)],
                        counts[2 + i],
                    ));
                }
                let (pts, labels) = boxes_shape(&parts, &mut rng);
                (pts, Some(labels))
            }
            "tableoid" => {
                // parts: 0 top, 1..=4 legs
                let w = 1.0 + 0.5 * unit(&mut rng);
                let d = 0.8 + 0.5 * unit(&mut rng);
                let leg_h = 0.9 + 0.4 * unit(&mut rng);
                let t = 0.08;
                let counts = budget(n_points, &[0.40, 0.15, 0.15, 0.15, 0.15]);
                let mut parts = vec![(0, [w, t, d], [0.0, 0.0, 0.0], counts[0])];
                for (i, (sx, sz)) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                    .iter()
                    .enumerate()
                {
                    parts.push((
                        1 + i,
                        [t, leg_h, t],
                        [sx * (w - t), -leg_h - t, sz * (d - t)],
                        counts[1 + i],
                    ));
                }
                let (pts, labels) = boxes_shape(&parts, &mut rng);
                (pts, Some(labels))
            }
            _ => unreachable!(),
        };
        let n = raw.len() / 3;
        let t = Tensor::<R>::from_vec(vec![n, 3], raw.iter().map(|&v| R::from_f64(v)).collect(), false)?;
        let (normed, center, scale) = normalize(&t, NormalizeMode::PerShapeUnitBox)?;
        shapes.push(PointCloud {
            name: format!("{kind}-{s}"),
            class_id,
            points: normed,
            part_ids,
            center,
            scale,
        });
    }
    Ok(Dataset {
        shapes,
        kind: kind.to_string(),
        seed,
    })
}

// ---------------------------------------------------------------------------
// Task masks

/// Fraction below which a part is merged into the largest part.
pub const PART_MERGE_FRACTION: f64 = 0.02;

/// Pick `k ~ U[1, m]` distinct parts and mark their points FREE; everything
/// else stays KNOWN. Undersized parts are merged into the largest part
/// before selection.
pub fn sample_part_mask(
    part_ids: &[usize],
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SampleMask> {
    let n = part_ids.len();
    if n == 0 {
        return Err(Error::contract("empty shape"));
    }
    let max_id = *part_ids.iter().max().unwrap();
    let mut counts = vec![0usize; max_id + 1];
    for &p in part_ids {
        counts[p] += 1;
    }
    let largest = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
    let threshold = (n as f64 * PART_MERGE_FRACTION).ceil() as usize;
    let relabel: Vec<usize> = (0..counts.len())
        .map(|p| if counts[p] > 0 && counts[p] < threshold { largest } else { p })
        .collect();
    let merged: Vec<usize> = part_ids.iter().map(|&p| relabel[p]).collect();
    let mut parts: Vec<usize> = merged.clone();
    parts.sort_unstable();
    parts.dedup();
    if parts.len() <= 1 {
        return Err(Error::contract("shape has a single part after merging"));
    }
    if m >= parts.len() {
        return Err(Error::contract(format!(
            "m = {m} must be below the part count {}",
            parts.len()
        )));
    }
    if m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    let k = rng.gen_range(1..=m);
    // Fisher-Yates prefix for k distinct parts
    let mut pool = parts.clone();
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let chosen: Vec<usize> = pool[..k].to_vec();
    let free: Vec<bool> = merged.iter().map(|p| chosen.contains(p)).collect();
    SampleMask::new(free, 1, n)
}

/// Uniform subset of `k` input points plus `n_out - k` empty FREE slots:
/// the layout for density upsampling. Rows `0..k` of the returned cloud are
/// the KNOWN points.
pub fn random_subset<R: Real>(
    cloud: &Tensor<R>,
    k: usize,
    n_out: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor<R>, SampleMask)> {
    if cloud.cols() != 3 {
        return Err(Error::dim("cloud must be N x 3"));
    }
    let n = cloud.rows();
    if k == 0 || k > n {
        return Err(Error::contract(format!("subset size {k} outside [1, {n}]")));
    }
    if k >= n_out {
        return Err(Error::contract(format!(
            "subset {k} must be below the output size {n_out}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut data = vec![R::zero(); n_out * 3];
    for (row, &src) in idx[..k].iter().enumerate() {
        data[row * 3..row * 3 + 3].copy_from_slice(&cloud.data()[src * 3..src * 3 + 3]);
    }
    let mut free = vec![true; n_out];
    for f in free.iter_mut().take(k) {
        *f = false;
    }
    Ok((
        Tensor::from_vec(vec![n_out, 3], data, false)?,
        SampleMask::new(free, 1, n_out)?,
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPVD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// element offset into the f32 payload
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    schedule: ScheduleConfig,
    step: usize,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// Binary layout: `"SPVD"`, u32 version, u64 JSON header length, header,
/// then the parameters as little-endian f32. Written atomically.
pub fn save_checkpoint<R: Real>(
    net: &Network<R>,
    schedule: &ScheduleConfig,
    step: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in net.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        network: net.config.clone(),
        schedule: schedule.clone(),
        step,
        seed,
        params: entries,
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + hjson.len() + offset * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for (_, t) in net.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&Real::to_f32(*v).to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

#[derive(Debug)]
pub struct LoadedCheckpoint<R: Real> {
    pub network: Network<R>,
    pub schedule: ScheduleConfig,
    pub step: usize,
    pub seed: u64,
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<LoadedCheckpoint<R>> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::checkpoint("file too short"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::checkpoint("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| Error::checkpoint(format!("bad header: {e}")))?;
    header
        .network
        .validate()
        .map_err(|e| Error::checkpoint(format!("invalid network config: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let total: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    if total != param_count_for(&header.network).map_err(|e| Error::checkpoint(e.to_string()))? {
        return Err(Error::checkpoint("parameter list does not match config"));
    }
    if payload.len() != total * 4 {
        return Err(Error::checkpoint(format!(
            "payload is {} bytes, header expects {}",
            payload.len(),
            total * 4
        )));
    }
    let mut expect_offset = 0usize;
    let mut params = ParamStore::new();
    for e in &header.params {
        if e.offset != expect_offset {
            return Err(Error::checkpoint(format!(
                "parameter '{}' offset {} does not match layout {expect_offset}",
                e.name, e.offset
            )));
        }
        let count = e.rows * e.cols;
        let data: Vec<R> = (0..count)
            .map(|i| {
                let b = (e.offset + i) * 4;
                R::from_f32(f32::from_le_bytes(payload[b..b + 4].try_into().unwrap()))
            })
            .collect();
        params.insert(&e.name, Tensor::from_vec(vec![e.rows, e.cols], data, true)?)?;
        expect_offset += count;
    }
    Ok(LoadedCheckpoint {
        network: Network {
            config: header.network,
            params,
        },
        schedule: header.schedule,
        step: header.step,
        seed: header.seed,
    })
}
