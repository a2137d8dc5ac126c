//! Adam training loop with multi-resolution compressed-grid sampling.
//!
//! Each step draws one compressed grid uniformly from the configured menu
//! (so a single parameter set learns every compute point), assembles a
//! random batch, runs forward/backward on one tape and applies Adam with
//! linear warmup followed by cosine decay.
//!
//! All randomness derives from `config.seed` through fixed stream tags, so
//! a run is reproducible end to end; the grid stream is independent of the
//! batch stream, which is what makes the drawn-grid transcript a pure
//! function of (seed, steps).

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::model::{forward, loss, predict, ModelParams};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

const GRID_STREAM: u64 = 0x6772_6964; // "grid"
const BATCH_STREAM: u64 = 0x6261_7463; // "batc"

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Warmup then cosine decay to zero. `step` is 0-based.
pub fn lr_at(settings: &TrainSettings, step: usize) -> f64 {
    let warmup = ((settings.steps as f64 * settings.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        settings.lr * (step + 1) as f64 / warmup as f64
    } else {
        let span = (settings.steps.saturating_sub(warmup)).max(1) as f64;
        let t = (step - warmup) as f64 / span;
        settings.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First/second moment accumulators, aligned with
/// [`ModelParams::named_tensors`] order.
pub struct AdamState<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> =
            params.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub acc_p: f64,
    pub acc_l: f64,
    pub acc_avg: f64,
    pub grid: (usize, usize),
}

/// One optimizer step over a batch of (image, label) pairs at a fixed grid.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    settings: &TrainSettings,
    state: &mut AdamState<T>,
    batch: &[(Tensor<T>, usize)],
    grid: (usize, usize),
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut total: Option<crate::tensor::Var> = None;
    let (mut hit_p, mut hit_l, mut hit_avg) = (0usize, 0usize, 0usize);
    let mut lookup_head_live = false;
    for (image, label) in batch {
        let img = tape.leaf(image.clone(), false);
        let out = forward(&mut tape, img, &bound, config, grid)?;
        let l = loss(&mut tape, &out, *label, config)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        let lp = tape.value(out.logits_p).clone();
        let ll = out.logits_l.map(|v| tape.value(v).clone());
        if predict(&lp, None) == *label {
            hit_p += 1;
        }
        if let Some(ll) = &ll {
            lookup_head_live = true;
            if predict(ll, None) == *label {
                hit_l += 1;
            }
        }
        if predict(&lp, ll.as_ref()) == *label {
            hit_avg += 1;
        }
    }
    let total = total.expect("nonempty batch");
    let mean_loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(mean_loss).data()[0].to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss diverged at step {}: {loss_value}", state.step)));
    }
    tape.backward(mean_loss)?;

    let lr = lr_at(settings, state.step);
    state.step += 1;
    let bias1 = 1.0 - settings.beta1.powi(state.step as i32);
    let bias2 = 1.0 - settings.beta2.powi(state.step as i32);
    let vars = bound.param_vars();
    let mut slots = params.named_tensors_mut();
    debug_assert_eq!(vars.len(), slots.len());
    for (idx, var) in vars.iter().enumerate() {
        let Some(grad) = tape.grad(*var) else { continue };
        let g = grad.data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = slots[idx].1.data_mut();
        let b1 = T::from_f64(settings.beta1);
        let nb1 = T::from_f64(1.0 - settings.beta1);
        let b2 = T::from_f64(settings.beta2);
        let nb2 = T::from_f64(1.0 - settings.beta2);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + nb1 * g[i];
            v[i] = b2 * v[i] + nb2 * g[i] * g[i];
        }
        if lr != 0.0 {
            let step_t = T::from_f64(lr);
            let inv_b1 = T::from_f64(1.0 / bias1);
            let inv_b2 = T::from_f64(1.0 / bias2);
            let eps = T::from_f64(settings.eps);
            for i in 0..g.len() {
                let mhat = m[i] * inv_b1;
                let vhat = v[i] * inv_b2;
                p[i] = p[i] - step_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    let b = batch.len() as f64;
    Ok(StepMetrics {
        step: state.step - 1,
        loss: loss_value,
        acc_p: hit_p as f64 / b,
        acc_l: if lookup_head_live { hit_l as f64 / b } else { 0.0 },
        acc_avg: hit_avg as f64 / b,
        grid,
    })
}

fn stream(seed: u64, tag: u64) -> SplitMix64 {
    SplitMix64::new(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// The compressed grids a run with this seed will draw, step by step.
pub fn draw_grid_sequence(config: &ModelConfig, steps: usize) -> Vec<(usize, usize)> {
    let mut rng = stream(config.seed, GRID_STREAM);
    (0..steps)
        .map(|_| {
            let g = config.compressed_grids[rng.below(config.compressed_grids.len())];
            (g[0], g[1])
        })
        .collect()
}

/// Full training run; `on_step` observes every step's metrics.
pub fn train_loop<T: Real>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    settings: &TrainSettings,
    data: &Dataset,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<AdamState<T>> {
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    if data.classes != config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config wants {}",
            data.classes, config.num_classes
        )));
    }
    let expect = config.image_shape();
    if [data.height, data.width, data.channels] != expect {
        return Err(Error::Config(format!(
            "dataset images {}x{}x{}, config wants {}x{}x{}",
            data.height, data.width, data.channels, expect[0], expect[1], expect[2]
        )));
    }
    let mut state = AdamState::new(params);
    let mut grid_rng = stream(config.seed, GRID_STREAM);
    let mut batch_rng = stream(config.seed, BATCH_STREAM);
    for step in 0..settings.steps {
        let g = config.compressed_grids[grid_rng.below(config.compressed_grids.len())];
        let batch: Vec<(Tensor<T>, usize)> = (0..settings.batch_size)
            .map(|_| {
                let i = batch_rng.below(data.len());
                (data.image_tensor::<T>(i), data.labels[i] as usize)
            })
            .collect();
        let metrics = train_step(params, config, settings, &mut state, &batch, (g[0], g[1]))?;
        debug_assert_eq!(metrics.step, step);
        on_step(&metrics);
    }
    Ok(state)
}

/// Accuracy of each head (and their average) over a dataset at one grid.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    data: &Dataset,
    grid: (usize, usize),
) -> Result<(f64, f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let (mut hit_p, mut hit_l, mut hit_avg) = (0usize, 0usize, 0usize);
    let mut lookup_head_live = false;
    for i in 0..data.len() {
        let mut tape = Tape::new();
        let img = tape.leaf(data.image_tensor::<T>(i), false);
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, img, &bound, config, grid)?;
        let label = data.labels[i] as usize;
        let lp = tape.value(out.logits_p).clone();
        let ll = out.logits_l.map(|v| tape.value(v).clone());
        if predict(&lp, None) == label {
            hit_p += 1;
        }
        if let Some(ll) = &ll {
            lookup_head_live = true;
            if predict(ll, None) == label {
                hit_l += 1;
            }
        }
        if predict(&lp, ll.as_ref()) == label {
            hit_avg += 1;
        }
    }
    let n = data.len() as f64;
    Ok((
        hit_p as f64 / n,
        if lookup_head_live { hit_l as f64 / n } else { 0.0 },
        hit_avg as f64 / n,
    ))
}
