//! Optimizer and training loop.

use crate::diffusion::{training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::net::{Network, ParamStore};
use crate::real::Real;
use crate::rng::substream;
use crate::tensor::{backward, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Adam with decoupled f64 moment buffers, so the update math is identical
/// whether the parameters are stored in f32 or f64.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new<R: Real>(params: &ParamStore<R>) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a gradient are treated as zero-gradient.
    pub fn step<R: Real>(&mut self, params: &mut ParamStore<R>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names = params.names();
        for (i, name) in names.iter().enumerate() {
            let tensor = params.get(name)?.clone();
            let grad = tensor.grad();
            let g = |k: usize| match &grad {
                Some(g) => g[k].to_f64(),
                None => 0.0,
            };
            let mut data = Vec::with_capacity(tensor.len());
            for k in 0..tensor.len() {
                let gk = g(k);
                self.m[i][k] = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * gk;
                self.v[i][k] = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * gk * gk;
                let mhat = self.m[i][k] / bc1;
                let vhat = self.v[i][k] / bc2;
                let step = lr * mhat / (vhat.sqrt() + self.eps);
                data.push(R::from_f64(tensor.data()[k].to_f64() - step));
            }
            params.set(name, Tensor::from_vec(tensor.shape().to_vec(), data, true)?)?;
        }
        Ok(())
    }
}

/// One-cycle policy: linear warmup over the first 10% of steps from
/// `peak/100` to `peak`, then cosine decay back down to `peak/100`.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    let floor = peak / 100.0;
    if total <= 1 {
        return peak;
    }
    let warmup = ((total as f64) * 0.1).ceil().max(1.0) as usize;
    if step < warmup {
        floor + (peak - floor) * step as f64 / warmup as f64
    } else {
        let p = (step - warmup) as f64 / (total - warmup) as f64;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub one_cycle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr_peak: 1e-3,
            one_cycle: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Run `cfg.steps` optimization steps starting at `start_step` (so resumed
/// runs keep their step numbering). All shapes must share one point count.
/// `on_step` receives one log entry per step plus the network's current
/// state, which lets callers checkpoint mid-run.
pub fn train_loop<R: Real>(
    net: &mut Network<R>,
    shapes: &[Tensor<R>],
    class_ids: Option<&[usize]>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    start_step: usize,
    mut on_step: impl FnMut(StepLog, &Network<R>) -> Result<()>,
) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::contract("training needs at least one shape"));
    }
    let n = shapes[0].rows();
    if shapes.iter().any(|s| s.rows() != n || s.cols() != 3) {
        return Err(Error::contract("all training shapes must be N x 3 with equal N"));
    }
    if let Some(ids) = class_ids {
        if ids.len() != shapes.len() {
            return Err(Error::dim("one class id per shape"));
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let total = start_step + cfg.steps;
    let mut opt = Adam::new(&net.params);
    for step in start_step..total {
        let mut brng = substream(cfg.seed, &format!("batch-{step}"));
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| brng.gen_range(0..shapes.len()))
            .collect();
        let mut data = Vec::with_capacity(cfg.batch_size * n * 3);
        for &p in &picks {
            data.extend_from_slice(shapes[p].data());
        }
        let x0 = Tensor::from_vec(vec![cfg.batch_size * n, 3], data, false)?;
        let batch_classes: Option<Vec<usize>> =
            class_ids.map(|ids| picks.iter().map(|&p| ids[p]).collect());

        net.params.zero_grad();
        let mut nrng = substream(cfg.seed, &format!("noise-{step}"));
        let loss = training_loss(
            net,
            &x0,
            cfg.batch_size,
            n,
            batch_classes.as_deref(),
            None,
            sched,
            &mut nrng,
        )?;
        backward(&loss)?;
        let lr = if cfg.one_cycle {
            one_cycle_lr(step, total, cfg.lr_peak)
        } else {
            cfg.lr_peak
        };
        opt.step(&mut net.params, lr)?;
        on_step(
            StepLog {
                step,
                loss: loss.item().to_f64(),
                lr,
            },
            net,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetworkConfig};
    use crate::tensor::ops;

    /// Adam on a convex quadratic reaches the minimum.
    #[test]
    fn adam_minimizes_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store
            .insert(
                "x",
                Tensor::from_vec(vec![1, 2], vec![3.0, -2.0], true).unwrap(),
            )
            .unwrap();
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            store.zero_grad();
            let x = store.get("x").unwrap();
            let loss = ops::mse(x, &Tensor::from_vec(vec![1, 2], vec![1.0, 0.5], false).unwrap())
                .unwrap();
            backward(&loss).unwrap();
            opt.step(&mut store, 1e-2).unwrap();
        }
        let x = store.get("x").unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-4);
        assert!((x.data()[1] - 0.5).abs() < 1e-4);
    }

    /// First-step magnitude is lr regardless of gradient scale.
    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store
            .insert("x", Tensor::from_vec(vec![1, 1], vec![10.0], true).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store);
        store.zero_grad();
        let loss = ops::mean_all(&ops::scale_const(store.get("x").unwrap(), 1000.0).unwrap()).unwrap();
        backward(&loss).unwrap();
        opt.step(&mut store, 0.1).unwrap();
        let moved = 10.0 - store.get("x").unwrap().data()[0];
        assert!((moved - 0.1).abs() < 1e-6, "{moved}");
    }

    #[test]
    fn one_cycle_shape() {
        let total = 1000;
        let peak = 1e-3;
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, peak)).collect();
        // warmup rises to the peak at 10% of the run
        assert!(lrs[0] < peak / 50.0);
        let max = lrs.iter().cloned().fold(0.0, f64::max);
        assert!((max - peak).abs() < 1e-12);
        assert_eq!(lrs.iter().position(|&l| l == max).unwrap(), 100);
        // monotone decay after the peak, ending at the floor
        assert!(lrs.windows(2).skip(100).all(|w| w[1] <= w[0] + 1e-15));
        assert!((lrs[total - 1] - peak / 100.0) / peak < 0.02);
    }

    fn micro_cfg() -> NetworkConfig {
        let mut cfg = NetworkConfig::preset("spvd-tiny").unwrap();
        cfg.base_resolution = 8;
        cfg
    }

    #[test]
    fn short_training_run_decreases_loss_and_is_deterministic() {
        let sched = crate::diffusion::ScheduleConfig {
            t_max: 50,
            ..Default::default()
        }
        .build()
        .unwrap();
        let shapes: Vec<Tensor<f32>> = crate::data::synth_dataset::<f32>("sphere", 4, 64, 1)
            .unwrap()
            .shapes
            .into_iter()
            .map(|s| s.points)
            .collect();
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 2,
            lr_peak: 2e-3,
            one_cycle: true,
            seed: 5,
        };
        let run = || {
            let mut rng = substream(5, "init");
            let mut net: Network<f32> = build_network(&micro_cfg(), &mut rng).unwrap();
            let mut logs = Vec::new();
            train_loop(&mut net, &shapes, None, &sched, &cfg, 0, |l, _| {
                logs.push(l);
                Ok(())
            })
            .unwrap();
            (net, logs)
        };
        let (net_a, logs) = run();
        assert_eq!(logs.len(), 30);
        assert_eq!(logs[0].step, 0);
        // zero-init head puts the first loss near 1
        assert!((logs[0].loss - 1.0).abs() < 0.3, "{}", logs[0].loss);
        let head: f64 = logs[..5].iter().map(|l| l.loss).sum::<f64>() / 5.0;
        let tail: f64 = logs[25..].iter().map(|l| l.loss).sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
        // bitwise reproducible
        let (net_b, logs_b) = run();
        assert_eq!(
            logs.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>(),
            logs_b.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>()
        );
        for (name, t) in net_a.params.iter() {
            assert_eq!(t.data(), net_b.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn resume_continues_step_numbering() {
        let sched = crate::diffusion::ScheduleConfig {
            t_max: 20,
            ..Default::default()
        }
        .build()
        .unwrap();
        let shapes: Vec<Tensor<f32>> = crate::data::synth_dataset::<f32>("box", 2, 64, 2)
            .unwrap()
            .shapes
            .into_iter()
            .map(|s| s.points)
            .collect();
        let mut rng = substream(6, "init");
        let mut net: Network<f32> = build_network(&micro_cfg(), &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 1,
            lr_peak: 1e-3,
            one_cycle: false,
            seed: 6,
        };
        let mut steps = Vec::new();
        train_loop(&mut net, &shapes, None, &sched, &cfg, 10, |l, _| {
            steps.push(l.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, vec![10, 11, 12]);
    }
}
