//! Noise schedule, forward noising, pose-mask guided loss, and DDIM.

mod codec;
mod optim;
mod train;

pub use codec::LatentCodec;
pub use optim::Adam;
pub use train::{train_step, TrainBatchItem, TrainStepOptions, TrainStepStats};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{no_grad, Tensor};

/// Forward-process schedule: per-step betas and their cumulative
/// alpha-bar products, with `alpha_bar(0) = 1`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta ramp over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            betas.push(beta);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Desk-scale default: 200 steps, betas from 1e-3 to 0.05.
    pub fn default_desk() -> Self {
        Self::linear(200, 1e-3, 0.05).expect("valid default schedule")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `(1 - beta)` through step `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Strictly decreasing sampler step list, uniformly spaced over
    /// `[1, t_max]` and ending near the start of the chain.
    pub fn sampler_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!(
                "sampler steps {steps} outside [1, {t_max}]"
            )));
        }
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = ((t_max * (steps - i)) as f64 / steps as f64).round() as usize;
            let t = t.max(1);
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        Ok(out)
    }
}

/// `z_t = sqrt(abar) z0 + sqrt(1 - abar) eps` for an explicit alpha-bar.
pub fn noise_with(alpha_bar: f64, z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid("noise_with", format!("alpha_bar = {alpha_bar}")));
    }
    z0.scale(alpha_bar.sqrt())?
        .add(&eps.scale((1.0 - alpha_bar).sqrt())?)
}

/// Forward noising at schedule step `t` (1-based).
pub fn forward_noising(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::invalid(
            "forward_noising",
            format!("t = {t} outside [1, {}]", sched.t_max()),
        ));
    }
    noise_with(sched.alpha_bar(t), z0, eps)
}

/// Pose-mask guided squared error:
/// `|(eps - eps_hat) . (1 - m)|^2 + alpha |(eps - eps_hat) . m|^2`.
///
/// `mask` is binary, either at the full prediction shape or at `[h, w]`
/// to be broadcast across channels. Computed as a single weighted pass,
/// so at `alpha = 1` it is bitwise equal to the plain squared error taken
/// in the same summation order.
pub fn pose_masked_loss(
    eps: &Tensor,
    eps_hat: &Tensor,
    mask: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "pose_masked_loss",
            format!("{:?} vs {:?}", eps.shape(), eps_hat.shape()),
        ));
    }
    let weights = loss_weights(eps.shape(), mask, alpha)?;
    let diff = eps.sub(eps_hat)?;
    diff.mul(&diff)?.mul(&weights)?.sum_all()
}

/// Expand a binary mask into per-element loss weights `(1 - m) + alpha m`.
fn loss_weights(shape: &[usize], mask: &Tensor, alpha: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mask_vals = mask.to_vec();
    for (i, &v) in mask_vals.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::invalid(
                "pose_masked_loss",
                format!("mask entry {i} = {v} is not binary"),
            ));
        }
    }
    let weight_of = |m: f64| if m == 1.0 { alpha } else { 1.0 };
    let data = if mask.shape() == shape {
        mask_vals.iter().map(|&m| weight_of(m)).collect::<Vec<_>>()
    } else if shape.len() == 3 && mask.shape() == &shape[1..] {
        // Broadcast a [h, w] mask across channels.
        let mut out = Vec::with_capacity(n);
        for _ in 0..shape[0] {
            out.extend(mask_vals.iter().map(|&m| weight_of(m)));
        }
        out
    } else {
        return Err(Error::shape(
            "pose_masked_loss",
            format!("mask {:?} vs prediction {shape:?}", mask.shape()),
        ));
    };
    debug_assert_eq!(data.len(), n);
    Tensor::from_vec(data, shape)
}

/// Deterministic DDIM sampling (eta = 0).
///
/// Starts from `x ~ N(0, I)` and iterates
/// `x0_hat = (x - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)` followed by
/// `x = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps_hat` over the
/// step list. Runs without gradient recording.
pub fn ddim_sample(
    model: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
    shape: &[usize],
    sched: &DiffusionSchedule,
    steps: usize,
    rng: &mut SeedRng,
) -> Result<Tensor> {
    let ts = sched.sampler_steps(steps)?;
    let mut x = Tensor::randn(shape, rng);
    no_grad(|| -> Result<Tensor> {
        for (i, &t) in ts.iter().enumerate() {
            let eps_hat = model(&x, t)?;
            if eps_hat.shape() != shape {
                return Err(Error::shape(
                    "ddim_sample",
                    format!("model output {:?} vs {:?}", eps_hat.shape(), shape),
                ));
            }
            eps_hat.check_finite("ddim_sample")?;
            let abar_t = sched.alpha_bar(t);
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let abar_prev = sched.alpha_bar(t_prev);
            let x0_hat = x
                .sub(&eps_hat.scale((1.0 - abar_t).sqrt())?)?
                .scale(1.0 / abar_t.sqrt())?;
            x = x0_hat
                .scale(abar_prev.sqrt())?
                .add(&eps_hat.scale((1.0 - abar_prev).sqrt())?)?;
            x.check_finite("ddim_sample")?;
        }
        Ok(x)
    })
}

#[cfg(test)]
mod tests;
