//! Noise schedule, forward process, training loss and samplers.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, with the convention
//! `alpha_bar(0) = 1` used by the deterministic sampler's terminal step.
//! Schedule arrays are kept in f64 regardless of the training precision.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ops, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which reverse-process variance to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaVariant {
    /// `σ_t = √β_t`
    SqrtBeta,
    /// `σ_t² = ((1 − ᾱ_{t−1}) / (1 − ᾱ_t)) · β_t`, the posterior variance;
    /// the default, it performs slightly better in practice.
    Posterior,
}

/// Serializable description of a linear β schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_variant")]
    pub variant: SigmaVariant,
}

fn default_t_max() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_variant() -> SigmaVariant {
    SigmaVariant::Posterior
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            variant: SigmaVariant::Posterior,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.t_max, self.beta_start, self.beta_end, self.variant)
    }
}

/// Precomputed β, α, ᾱ and σ sequences for `T` timesteps.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub variant: SigmaVariant,
}

impl NoiseSchedule {
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
    /// `σ_t`, with `σ_1 = 0` at sampling time.
    pub fn sigma_t(&self, t: usize) -> f64 {
        if t == 1 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }
}

/// Linearly spaced β schedule with derived α, ᾱ and σ arrays.
pub fn make_linear_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    variant: SigmaVariant,
) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::config("schedule needs at least 2 timesteps"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma: Vec<f64> = (0..t_max)
        .map(|i| match variant {
            SigmaVariant::SqrtBeta => beta[i].sqrt(),
            SigmaVariant::Posterior => {
                let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (((1.0 - ab_prev) / (1.0 - alpha_bar[i])) * beta[i]).sqrt()
            }
        })
        .collect();
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
        variant,
    })
}

/// Per-point KNOWN/FREE labels for completion and super-resolution.
///
/// KNOWN points are clamped to the input throughout sampling; FREE points
/// are generated. Every sample must keep at least one FREE point.
#[derive(Clone, Debug)]
pub struct SampleMask {
    pub free: Vec<bool>,
    pub batch: usize,
    pub points_per_sample: usize,
}

impl SampleMask {
    pub fn new(free: Vec<bool>, batch: usize, points_per_sample: usize) -> Result<Self> {
        if free.len() != batch * points_per_sample {
            return Err(Error::dim("mask length must be batch * points"));
        }
        for b in 0..batch {
            let span = &free[b * points_per_sample..(b + 1) * points_per_sample];
            if !span.iter().any(|&f| f) {
                return Err(Error::contract(format!(
                    "sample {b} has zero FREE points"
                )));
            }
        }
        Ok(SampleMask {
            free,
            batch,
            points_per_sample,
        })
    }

    pub fn all_free(batch: usize, points_per_sample: usize) -> Self {
        SampleMask {
            free: vec![true; batch * points_per_sample],
            batch,
            points_per_sample,
        }
    }

    pub fn free_rows(&self) -> Vec<usize> {
        self.free
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn known_rows(&self) -> Vec<usize> {
        self.free
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (!f).then_some(i))
            .collect()
    }
}

/// The denoising network interface: predict the noise in `x_t`.
///
/// `x_t` is `(batch * n) x 3` row-major; `t` holds one timestep per sample.
pub trait Denoiser<R: Real> {
    fn denoise(
        &self,
        x_t: &Tensor<R>,
        batch: usize,
        points_per_sample: usize,
        t: &[usize],
        class_ids: Option<&[usize]>,
        train: bool,
    ) -> Result<Tensor<R>>;
}

fn check_t(t: &[usize], t_max: usize) -> Result<()> {
    if let Some(&bad) = t.iter().find(|&&v| v < 1 || v > t_max) {
        return Err(Error::contract(format!("timestep {bad} outside [1, {t_max}]")));
    }
    Ok(())
}

/// Closed-form forward process `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`, with each
/// sample noised at its own timestep.
pub fn forward_sample<R: Real>(
    x0: &Tensor<R>,
    batch: usize,
    n: usize,
    t: &[usize],
    eps: &Tensor<R>,
    sched: &NoiseSchedule,
) -> Result<Tensor<R>> {
    if t.len() != batch || x0.rows() != batch * n || x0.shape() != eps.shape() {
        return Err(Error::dim("forward_sample: shape mismatch"));
    }
    check_t(t, sched.t_max)?;
    let rows = batch * n;
    let mut a = Vec::with_capacity(rows);
    let mut b = Vec::with_capacity(rows);
    for r in 0..rows {
        let ab = sched.alpha_bar_t(t[r / n]);
        a.push(R::from_f64(ab.sqrt()));
        b.push(R::from_f64((1.0 - ab).sqrt()));
    }
    let a = Tensor::from_vec(vec![rows, 1], a, false)?;
    let b = Tensor::from_vec(vec![rows, 1], b, false)?;
    ops::add(&ops::mul(x0, &a)?, &ops::mul(eps, &b)?)
}

/// Draw per-sample timesteps and noise, run the denoiser, and return the
/// simplified objective `‖ε − ε_θ(x_t, t)‖²` (mean over noised coordinates).
///
/// With a mask, KNOWN points keep their clean coordinates and are excluded
/// from the loss.
pub fn training_loss<R: Real>(
    net: &dyn Denoiser<R>,
    x0: &Tensor<R>,
    batch: usize,
    n: usize,
    class_ids: Option<&[usize]>,
    mask: Option<&SampleMask>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<R>> {
    let t: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=sched.t_max)).collect();
    training_loss_at(net, x0, batch, n, &t, class_ids, mask, sched, rng)
}

/// [`training_loss`] with caller-chosen timesteps.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_at<R: Real>(
    net: &dyn Denoiser<R>,
    x0: &Tensor<R>,
    batch: usize,
    n: usize,
    t: &[usize],
    class_ids: Option<&[usize]>,
    mask: Option<&SampleMask>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<R>> {
    if let Some(m) = mask {
        if m.batch != batch || m.points_per_sample != n {
            return Err(Error::dim("mask does not match batch layout"));
        }
    }
    let eps = Tensor::randn(vec![batch * n, 3], rng, false);
    let x_t_full = forward_sample(x0, batch, n, t, &eps, sched)?;
    let (x_t, free_rows) = match mask {
        None => (x_t_full, None),
        Some(m) => {
            // KNOWN points stay clean; only FREE points are noisified
            let mut data = x0.data().to_vec();
            for (r, &f) in m.free.iter().enumerate() {
                if f {
                    data[r * 3..r * 3 + 3].copy_from_slice(&x_t_full.data()[r * 3..r * 3 + 3]);
                }
            }
            (
                Tensor::from_vec(vec![batch * n, 3], data, false)?,
                Some(m.free_rows()),
            )
        }
    };
    let eps_hat = net.denoise(&x_t, batch, n, t, class_ids, true)?;
    if eps_hat.shape() != eps.shape() {
        return Err(Error::dim("denoiser changed the point shape"));
    }
    match free_rows {
        None => ops::mse(&eps_hat, &eps),
        Some(rows) => ops::mse(
            &ops::gather_rows(&eps_hat, &rows)?,
            &ops::gather_rows(&eps, &rows)?,
        ),
    }
}

/// One DDPM reverse step. `rng = None` forces `z = 0`; at `t = 1` the noise
/// term is always dropped.
pub fn ddpm_step<R: Real>(
    net: &dyn Denoiser<R>,
    x_t: &Tensor<R>,
    batch: usize,
    n: usize,
    t: usize,
    sched: &NoiseSchedule,
    rng: Option<&mut ChaCha12Rng>,
    class_ids: Option<&[usize]>,
) -> Result<Tensor<R>> {
    check_t(&[t], sched.t_max)?;
    let ts = vec![t; batch];
    let eps_hat = net.denoise(x_t, batch, n, &ts, class_ids, false)?;
    let a = sched.alpha_t(t);
    let ab = sched.alpha_bar_t(t);
    let sigma = sched.sigma_t(t);
    let c1 = 1.0 / a.sqrt();
    let c2 = (1.0 - a) / (1.0 - ab).sqrt();
    let mut data = Vec::with_capacity(x_t.len());
    match rng {
        Some(rng) if t > 1 => {
            for i in 0..x_t.len() {
                let z: f64 = rng.sample(StandardNormal);
                let v = c1 * (x_t.data()[i].to_f64() - c2 * eps_hat.data()[i].to_f64())
                    + sigma * z;
                data.push(R::from_f64(v));
            }
        }
        _ => {
            for i in 0..x_t.len() {
                let v = c1 * (x_t.data()[i].to_f64() - c2 * eps_hat.data()[i].to_f64());
                data.push(R::from_f64(v));
            }
        }
    }
    Tensor::from_vec(x_t.shape().to_vec(), data, false)
}

/// One deterministic DDIM step from `t` to `t_prev` (`t_prev = 0` emits the
/// predicted clean sample via the `ᾱ_0 = 1` convention).
pub fn ddim_step<R: Real>(
    net: &dyn Denoiser<R>,
    x_t: &Tensor<R>,
    batch: usize,
    n: usize,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    class_ids: Option<&[usize]>,
) -> Result<Tensor<R>> {
    check_t(&[t], sched.t_max)?;
    if t_prev >= t {
        return Err(Error::contract(format!(
            "ddim step must be descending, got {t} -> {t_prev}"
        )));
    }
    let ts = vec![t; batch];
    let eps_hat = net.denoise(x_t, batch, n, &ts, class_ids, false)?;
    let ab_t = sched.alpha_bar_t(t);
    let ab_p = sched.alpha_bar_t(t_prev);
    let mut data = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let e = eps_hat.data()[i].to_f64();
        let x0_pred = (x_t.data()[i].to_f64() - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt();
        data.push(R::from_f64(ab_p.sqrt() * x0_pred + (1.0 - ab_p).sqrt() * e));
    }
    Tensor::from_vec(x_t.shape().to_vec(), data, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRule {
    Ddpm,
    Ddim,
}

/// Evenly spaced descending DDIM timesteps including `T` and `1`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > t_max {
        return Err(Error::config(format!("steps {steps} > T {t_max}")));
    }
    if steps == 0 {
        return Err(Error::config("steps must be positive"));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let f = 1.0 + (t_max - 1) as f64 * i as f64 / (steps - 1) as f64;
            f.round() as usize
        })
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Generate `batch` clouds of `n` points. With `known`, FREE points start as
/// pure noise and KNOWN points are re-clamped to their inputs after every
/// step, so the output matches the input exactly at KNOWN positions.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Real>(
    net: &dyn Denoiser<R>,
    batch: usize,
    n: usize,
    sched: &NoiseSchedule,
    rule: SampleRule,
    steps: usize,
    class_ids: Option<&[usize]>,
    known: Option<(&Tensor<R>, &SampleMask)>,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<R>> {
    if steps > sched.t_max {
        return Err(Error::config(format!(
            "steps {steps} > schedule length {}",
            sched.t_max
        )));
    }
    if let Some((pts, m)) = known {
        if m.batch != batch || m.points_per_sample != n || pts.rows() != batch * n {
            return Err(Error::dim("known points do not match batch layout"));
        }
    }
    let clamp_known = |x: &Tensor<R>| -> Result<Tensor<R>> {
        match known {
            None => Ok(x.clone()),
            Some((pts, m)) => {
                let mut data = x.data().to_vec();
                for (r, &f) in m.free.iter().enumerate() {
                    if !f {
                        data[r * 3..r * 3 + 3].copy_from_slice(&pts.data()[r * 3..r * 3 + 3]);
                    }
                }
                Tensor::from_vec(x.shape().to_vec(), data, false)
            }
        }
    };

    let mut x = clamp_known(&Tensor::randn(vec![batch * n, 3], rng, false))?;
    match rule {
        SampleRule::Ddpm => {
            if steps != sched.t_max {
                return Err(Error::config("ddpm sampling visits every timestep"));
            }
            for t in (1..=sched.t_max).rev() {
                x = ddpm_step(net, &x, batch, n, t, sched, Some(rng), class_ids)?;
                x = clamp_known(&x)?;
            }
        }
        SampleRule::Ddim => {
            let ts = ddim_timesteps(sched.t_max, steps)?;
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                x = ddim_step(net, &x, batch, n, t, t_prev, sched, class_ids)?;
                x = clamp_known(&x)?;
            }
        }
    }
    Ok(x)
}

/// Sinusoidal timestep embedding: interleaved `[sin, cos]` pairs at
/// geometrically spaced frequencies. Deterministic and injective over
/// `t ∈ [1, T]` for any reasonable width.
pub fn time_embedding<R: Real>(t: usize, dim: usize) -> Result<Tensor<R>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::config("time embedding dim must be even and >= 2"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data.push(R::from_f64(arg.sin()));
        data.push(R::from_f64(arg.cos()));
    }
    Tensor::from_vec(vec![1, dim], data, false)
}
