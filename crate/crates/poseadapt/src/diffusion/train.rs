//! One adapter training step against a frozen host.

use super::{forward_noising, pose_masked_loss, Adam, DiffusionSchedule};
use crate::adapter::{denoise_with_control, ControlBranch, HostDenoiser, PoseAdapter};
use crate::error::{Error, Result};
use crate::pose::PoseMaskPyramid;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// One training pair, already encoded to the latent space.
pub struct TrainBatchItem {
    /// Clean target latent `z_0`.
    pub z0: Tensor,
    /// Rendered conditioning pose image.
    pub pose_image: Tensor,
    /// Mask pyramid for the configured kernel schedule.
    pub pyramid: PoseMaskPyramid,
    /// Style label (the null label is substituted by dropout).
    pub style: usize,
}

#[derive(Debug, Clone)]
pub struct TrainStepOptions {
    /// Pose-mask guidance strength for the masked loss term.
    pub alpha: f64,
    /// Feed pyramid masks to the attention blocks.
    pub mask_in_pmsa: bool,
    /// Weight the loss by the finest pyramid mask.
    pub mask_in_loss: bool,
    /// Probability of replacing the style label with the null label.
    pub style_dropout: f64,
}

impl Default for TrainStepOptions {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            mask_in_pmsa: true,
            mask_in_loss: true,
            style_dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStepStats {
    pub loss: f64,
    /// Fraction of the total loss contributed by the mask-weighted term.
    pub masked_share: f64,
}

fn mask_tensor(pyramid: &PoseMaskPyramid) -> Tensor {
    let m = pyramid.finest();
    let data: Vec<f64> = m.data.iter().map(|&b| b as f64).collect();
    Tensor::from_vec(data, &[m.height, m.width]).expect("mask shape")
}

/// Run one gradient step on the adapter and control-branch parameters.
///
/// Per batch item: draw `t` uniformly, noise the latent, update it through
/// the adapter, and predict the noise with the frozen host plus control
/// residuals. The loss is the pose-mask guided squared error averaged over
/// the batch. A non-finite loss aborts with diagnostics before any update.
pub fn train_step(
    batch: &[TrainBatchItem],
    adapter: &PoseAdapter,
    control: &ControlBranch,
    host: &HostDenoiser,
    sched: &DiffusionSchedule,
    opts: &TrainStepOptions,
    optimizer: &mut Adam,
    rng: &mut SeedRng,
) -> Result<TrainStepStats> {
    if !host.frozen() {
        return Err(Error::HostNotFrozen);
    }
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let null_style = host.config.null_style();

    let mut total: Option<Tensor> = None;
    let mut masked_sum = 0.0;
    let mut plain_sum = 0.0;
    for item in batch {
        let t = 1 + rng.below(sched.t_max());
        let eps = Tensor::randn(item.z0.shape(), rng);
        let z_t = forward_noising(&item.z0, t, &eps, sched)?;
        let style = if rng.uniform() < opts.style_dropout {
            null_style
        } else {
            item.style
        };
        let pyramid = opts.mask_in_pmsa.then_some(&item.pyramid);
        let z_prime = adapter.forward(&z_t, &item.pose_image, pyramid, rng, true)?;
        let eps_hat = denoise_with_control(host, control, &z_t, t, style, &z_prime)?;

        let mask = mask_tensor(&item.pyramid);
        let (loss, alpha) = if opts.mask_in_loss {
            (
                pose_masked_loss(&eps, &eps_hat, &mask, opts.alpha)?,
                opts.alpha,
            )
        } else {
            (pose_masked_loss(&eps, &eps_hat, &mask, 1.0)?, 1.0)
        };

        // Share of the loss carried by the masked term, for the metrics
        // stream; computed outside the graph.
        let (m_part, p_part) = masked_split(&eps, &eps_hat, &mask, alpha);
        masked_sum += m_part;
        plain_sum += p_part;

        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    let loss = total.expect("nonempty batch").scale(1.0 / batch.len() as f64)?;
    let loss_val = loss.item();
    if !loss_val.is_finite() {
        return Err(Error::non_finite(
            "train_step",
            format!(
                "loss = {loss_val} over batch of {} (masked term {masked_sum}, plain term {plain_sum})",
                batch.len()
            ),
        ));
    }
    loss.backward()?;
    optimizer.step();
    let denom = masked_sum + plain_sum;
    Ok(TrainStepStats {
        loss: loss_val,
        masked_share: if denom > 0.0 { masked_sum / denom } else { 0.0 },
    })
}

fn masked_split(eps: &Tensor, eps_hat: &Tensor, mask: &Tensor, alpha: f64) -> (f64, f64) {
    let a = eps.to_vec();
    let b = eps_hat.to_vec();
    let m = mask.to_vec();
    let hw = m.len();
    let mut masked = 0.0;
    let mut plain = 0.0;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        let d = (x - y) * (x - y);
        if m[i % hw] == 1.0 {
            masked += alpha * d;
        } else {
            plain += d;
        }
    }
    (masked, plain)
}
