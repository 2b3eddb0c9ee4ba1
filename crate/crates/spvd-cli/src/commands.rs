//! Command implementations. Errors carry the process exit code:
//! 2 for usage/config problems, 3 for runtime/data problems.

use crate::config::RunConfig;
use serde::Serialize;
use spvd::data::{
    load_checkpoint, load_ply, load_xyz, normalize, save_checkpoint, save_ply, save_ply_labeled,
    sample_part_mask, synth_dataset, NormalizeMode, PlyFormat, PointCloud,
};
use spvd::diffusion::{sample, SampleMask, SampleRule, ScheduleConfig};
use spvd::error::Error;
use spvd::metrics::{eval_report_runs, report_table, MetricReport};
use spvd::net::{build_network, param_count, Network};
use spvd::real::Real;
use spvd::rng::substream;
use spvd::tensor::Tensor;
use spvd::train::train_loop;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }
    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), CliError>;

fn parse_rule(s: &str) -> Result<SampleRule, CliError> {
    match s {
        "ddpm" => Ok(SampleRule::Ddpm),
        "ddim" => Ok(SampleRule::Ddim),
        other => Err(CliError::usage(format!(
            "unknown sampling rule '{other}' (expected ddpm or ddim)"
        ))),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(CliError::from)
}

fn load_cloud<R: Real>(path: &Path) -> Result<PointCloud<R>, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let cloud = match ext {
        "ply" => load_ply(path),
        "xyz" => load_xyz(path),
        other => {
            return Err(CliError::data(format!(
                "unsupported cloud format '.{other}' for {}",
                path.display()
            )))
        }
    };
    cloud.map_err(|e| CliError::data(e.to_string()))
}

fn load_cloud_dir<R: Real>(dir: &Path) -> Result<Vec<PointCloud<R>>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ply") | Some("xyz")
            )
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| load_cloud(p)).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text)
        .map_err(|e| CliError::data(format!("write {}: {e}", path.display())))?;
    Ok(())
}

/// Training shapes in model space plus per-shape class ids.
fn prepare_dataset(
    cfg: &RunConfig,
) -> Result<(Vec<Tensor<f32>>, Vec<usize>), CliError> {
    let clouds: Vec<PointCloud<f32>> = match &cfg.data.path {
        Some(dir) => load_cloud_dir(dir)?,
        None => {
            let kind = cfg
                .data
                .kind
                .as_deref()
                .ok_or_else(|| CliError::usage("data: either kind or path is required"))?;
            synth_dataset(kind, cfg.data.n_shapes, cfg.data.n_points, cfg.train.seed)
                .map_err(CliError::from)?
                .shapes
        }
    };
    if clouds.is_empty() {
        return Err(CliError::data("dataset is empty"));
    }
    let mut shapes = Vec::with_capacity(clouds.len());
    let mut classes = Vec::with_capacity(clouds.len());
    for c in &clouds {
        let (t, _, _) = normalize(&c.points, cfg.data.normalization).map_err(CliError::from)?;
        shapes.push(t);
        classes.push(c.class_id);
    }
    Ok((shapes, classes))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    save_every: Option<usize>,
    resume: Option<&Path>,
) -> CmdResult {
    let mut rc = read_config(config)?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = save_every {
        rc.train.save_every = Some(s);
    }
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("create {}: {e}", out.display())))?;

    let (shapes, classes) = prepare_dataset(&rc)?;
    let (mut net, sched_cfg, start_step): (Network<f32>, ScheduleConfig, usize) = match resume {
        Some(ckpt) => {
            let loaded = load_checkpoint::<f32>(ckpt)?;
            (loaded.network, loaded.schedule, loaded.step)
        }
        None => {
            let net_cfg = rc.model.resolve()?;
            let mut rng = substream(rc.train.seed, "init");
            (build_network(&net_cfg, &mut rng)?, rc.schedule.clone(), 0)
        }
    };
    let sched = sched_cfg.build()?;
    write_json(&out.join("resolved_config.json"), &rc)?;

    let class_ids: Option<Vec<usize>> = (net.config.num_classes > 0).then(|| classes.clone());
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("loss.csv"))
        .map_err(|e| CliError::data(format!("open loss log: {e}")))?;
    if start_step == 0 {
        writeln!(csv, "step,loss,lr").map_err(|e| CliError::data(e.to_string()))?;
    }
    let ckpt_path = out.join("checkpoint.bin");
    let save_every = rc.train.save_every;
    let sched_for_ckpt = sched_cfg.clone();
    let seed = rc.train.seed;
    train_loop(
        &mut net,
        &shapes,
        class_ids.as_deref(),
        &sched,
        &rc.train.to_train_config(),
        start_step,
        |log, net_now| {
            writeln!(csv, "{},{},{}", log.step, log.loss, log.lr)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            if let Some(every) = save_every {
                let done = log.step + 1;
                if every > 0 && done % every == 0 {
                    save_checkpoint(
                        net_now,
                        &sched_for_ckpt,
                        done,
                        seed,
                        &out.join(format!("checkpoint-step{done:06}.bin")),
                    )?;
                }
            }
            Ok(())
        },
    )?;
    save_checkpoint(&net, &sched_cfg, start_step + rc.train.steps, seed, &ckpt_path)?;
    println!(
        "trained {} steps ({} parameters), checkpoint at {}",
        rc.train.steps,
        param_count(&net),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleManifest {
    seed: u64,
    rule: String,
    steps: usize,
    count: usize,
    n_points: usize,
    elapsed_seconds: f64,
    files: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    checkpoint: &Path,
    out: &Path,
    rule: &str,
    steps: Option<usize>,
    count: usize,
    n_points: usize,
    seed: u64,
) -> CmdResult {
    if count == 0 {
        return Err(CliError::usage("count must be positive"));
    }
    let rule_enum = parse_rule(rule)?;
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let sched = loaded.schedule.build()?;
    let steps = steps.unwrap_or(match rule_enum {
        SampleRule::Ddpm => sched.t_max,
        SampleRule::Ddim => sched.t_max.min(50),
    });
    if steps > sched.t_max {
        return Err(CliError::usage(format!(
            "steps {steps} exceeds the schedule length {}",
            sched.t_max
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("create {}: {e}", out.display())))?;
    let classes: Option<Vec<usize>> = (loaded.network.config.num_classes > 0)
        .then(|| (0..count).map(|i| i % loaded.network.config.num_classes).collect());
    let started = Instant::now();
    let mut rng = substream(seed, "sample");
    let x = sample(
        &loaded.network,
        count,
        n_points,
        &sched,
        rule_enum,
        steps,
        classes.as_deref(),
        None,
        &mut rng,
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let rows = &x.data()[i * n_points * 3..(i + 1) * n_points * 3];
        let cloud = Tensor::from_vec(vec![n_points, 3], rows.to_vec(), false)?;
        let name = format!("sample_{i:03}.ply");
        save_ply(&cloud, &out.join(&name), PlyFormat::BinaryLittleEndian)?;
        files.push(name);
    }
    write_json(
        &out.join("manifest.json"),
        &SampleManifest {
            seed,
            rule: rule.to_string(),
            steps,
            count,
            n_points,
            elapsed_seconds: elapsed,
            files,
        },
    )?;
    println!("wrote {count} clouds to {} in {elapsed:.2}s", out.display());
    Ok(())
}

fn parse_normalization(s: &str) -> Result<NormalizeMode, CliError> {
    match s {
        "unit_box" => Ok(NormalizeMode::PerShapeUnitBox),
        "unit_sphere" => Ok(NormalizeMode::PerShapeUnitSphere),
        other => Err(CliError::usage(format!(
            "unknown normalization '{other}' (expected unit_box or unit_sphere)"
        ))),
    }
}

/// Masked sampling shared by completion and super-resolution: `known` holds
/// the full layout (KNOWN rows already filled, FREE rows ignored) in raw
/// input coordinates. Returns the output cloud with KNOWN rows copied from
/// `known` verbatim and FREE rows generated, mapped back to raw coordinates.
#[allow(clippy::too_many_arguments)]
fn masked_sample(
    net: &Network<f32>,
    sched_cfg: &ScheduleConfig,
    known_raw: &Tensor<f32>,
    mask: &SampleMask,
    normalization: NormalizeMode,
    rule: SampleRule,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>, CliError> {
    let sched = sched_cfg.build()?;
    if steps > sched.t_max {
        return Err(CliError::usage(format!(
            "steps {steps} exceeds the schedule length {}",
            sched.t_max
        )));
    }
    let n = known_raw.rows();
    // normalization statistics from the KNOWN rows only: FREE rows hold
    // placeholders, not data
    let known_rows = mask.known_rows();
    let mut known_pts = Vec::with_capacity(known_rows.len() * 3);
    for &r in &known_rows {
        known_pts.extend_from_slice(&known_raw.data()[r * 3..r * 3 + 3]);
    }
    let known_only: Tensor<f32> = Tensor::from_vec(vec![known_rows.len(), 3], known_pts, false)?;
    let (_, center, scale) = normalize(&known_only, normalization)?;
    let mut norm_data = Vec::with_capacity(n * 3);
    for i in 0..n {
        for a in 0..3 {
            norm_data
                .push(((known_raw.data()[i * 3 + a] as f64 - center[a]) / scale) as f32);
        }
    }
    let x_known = Tensor::from_vec(vec![n, 3], norm_data, false)?;
    let classes: Option<Vec<usize>> = (net.config.num_classes > 0).then(|| vec![0]);
    let mut rng = substream(seed, "task");
    let x = sample(
        net,
        1,
        n,
        &sched,
        rule,
        steps,
        classes.as_deref(),
        Some((&x_known, mask)),
        &mut rng,
    )?;
    // KNOWN rows byte-for-byte from the input; FREE rows back to raw coords
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        for a in 0..3 {
            if mask.free[i] {
                out.push((x.data()[i * 3 + a] as f64 * scale + center[a]) as f32);
            } else {
                out.push(known_raw.data()[i * 3 + a]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, 3], out, false)?)
}

#[derive(Serialize)]
struct TaskManifest {
    task: String,
    input: String,
    seed: u64,
    rule: String,
    steps: usize,
    n_points: usize,
    elapsed_seconds: f64,
    file: String,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_complete(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    m: usize,
    rule: &str,
    steps: Option<usize>,
    normalization: &str,
    seed: u64,
) -> CmdResult {
    let rule_enum = parse_rule(rule)?;
    let norm = parse_normalization(normalization)?;
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let cloud: PointCloud<f32> = load_cloud(input)?;
    let parts = cloud
        .part_ids
        .as_ref()
        .ok_or_else(|| CliError::usage("completion needs part labels on the input cloud"))?;
    if m == 0 {
        return Err(CliError::usage("m must be positive"));
    }
    let mut mask_rng = substream(seed, "mask");
    let mask = sample_part_mask(parts, m, &mut mask_rng)?;
    let steps = steps.unwrap_or(loaded.schedule.t_max.min(50));
    let started = Instant::now();
    let result = masked_sample(
        &loaded.network,
        &loaded.schedule,
        &cloud.points,
        &mask,
        norm,
        rule_enum,
        steps,
        seed,
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("create {}: {e}", out.display())))?;
    let file = "completed.ply";
    save_ply_labeled(&result, Some(parts), &out.join(file), PlyFormat::BinaryLittleEndian)?;
    write_json(
        &out.join("manifest.json"),
        &TaskManifest {
            task: "completion".into(),
            input: input.display().to_string(),
            seed,
            rule: rule.to_string(),
            steps,
            n_points: result.rows(),
            elapsed_seconds: elapsed,
            file: file.into(),
        },
    )?;
    println!(
        "completed {} of {} points in {elapsed:.2}s -> {}",
        mask.free_rows().len(),
        result.rows(),
        out.join(file).display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_superres(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    n_out: usize,
    rule: &str,
    steps: Option<usize>,
    normalization: &str,
    seed: u64,
) -> CmdResult {
    let rule_enum = parse_rule(rule)?;
    let norm = parse_normalization(normalization)?;
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let cloud: PointCloud<f32> = load_cloud(input)?;
    let k_in = cloud.points.rows();
    if n_out <= k_in {
        return Err(CliError::usage(format!(
            "n_out {n_out} must exceed the {k_in} input points"
        )));
    }
    // first k_in rows KNOWN = input, the rest FREE
    let mut data = cloud.points.data().to_vec();
    data.resize(n_out * 3, 0.0);
    let known_raw: Tensor<f32> = Tensor::from_vec(vec![n_out, 3], data, false)?;
    let free: Vec<bool> = (0..n_out).map(|i| i >= k_in).collect();
    let mask = SampleMask::new(free, 1, n_out)?;
    let steps = steps.unwrap_or(loaded.schedule.t_max.min(50));
    let started = Instant::now();
    let result = masked_sample(
        &loaded.network,
        &loaded.schedule,
        &known_raw,
        &mask,
        norm,
        rule_enum,
        steps,
        seed,
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("create {}: {e}", out.display())))?;
    let file = "superres.ply";
    save_ply(&result, &out.join(file), PlyFormat::BinaryLittleEndian)?;
    write_json(
        &out.join("manifest.json"),
        &TaskManifest {
            task: "superres".into(),
            input: input.display().to_string(),
            seed,
            rule: rule.to_string(),
            steps,
            n_points: n_out,
            elapsed_seconds: elapsed,
            file: file.into(),
        },
    )?;
    println!("upsampled {k_in} -> {n_out} points in {elapsed:.2}s");
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    runs: Vec<MetricReport>,
    best_index: usize,
    best: MetricReport,
}

pub fn cmd_eval(
    gen_dir: &Path,
    ref_dir: &Path,
    runs: usize,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let gen: Vec<PointCloud<f64>> = load_cloud_dir(gen_dir)?;
    let rf: Vec<PointCloud<f64>> = load_cloud_dir(ref_dir)?;
    if gen.len() < 2 || rf.len() < 2 {
        return Err(CliError::usage(format!(
            "need at least 2 clouds per directory, got {} and {}",
            gen.len(),
            rf.len()
        )));
    }
    let gen_t: Vec<Tensor<f64>> = gen.into_iter().map(|c| c.points).collect();
    let rf_t: Vec<Tensor<f64>> = rf.into_iter().map(|c| c.points).collect();
    let (entries, best_index) = eval_report_runs(&gen_t, &rf_t, runs, seed)?;
    let best = entries[best_index].clone();
    print!("{}", report_table(&best));
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| gen_dir.join("metrics.json"));
    write_json(
        &out_path,
        &EvalOutput {
            runs: entries,
            best_index,
            best,
        },
    )?;
    println!("report written to {}", out_path.display());
    Ok(())
}

pub fn cmd_inspect(config: Option<&Path>, checkpoint: Option<&Path>) -> CmdResult {
    match (config, checkpoint) {
        (Some(cfg_path), None) => {
            let rc = read_config(cfg_path)?;
            let net_cfg = rc.model.resolve()?;
            rc.schedule.build()?;
            let params = spvd::net::param_count_for(&net_cfg)?;
            let doc = serde_json::json!({
                "config": rc,
                "network": net_cfg,
                "param_count": params,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("plain data"));
            Ok(())
        }
        (None, Some(ckpt_path)) => {
            let loaded = load_checkpoint::<f32>(ckpt_path)?;
            let doc = serde_json::json!({
                "network": loaded.network.config,
                "schedule": loaded.schedule,
                "step": loaded.step,
                "seed": loaded.seed,
                "param_count": param_count(&loaded.network),
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("plain data"));
            Ok(())
        }
        _ => Err(CliError::usage(
            "inspect needs exactly one of --config or --checkpoint",
        )),
    }
}
