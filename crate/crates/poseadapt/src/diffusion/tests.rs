use super::*;
use crate::adapter::{AdapterConfig, ControlBranch, HostConfig, HostDenoiser, PoseAdapter};
use crate::pmsa::PmsaConfig;
use crate::pose::{render_skeleton, Keypoint, PoseMaskPyramid, PoseSkeleton, NUM_KEYPOINTS};
use crate::tensor::grad_check::grad_check;

fn rng(seed: u64) -> SeedRng {
    SeedRng::new(seed)
}

#[test]
fn schedule_invariants_hold() {
    let s = DiffusionSchedule::default_desk();
    assert_eq!(s.t_max(), 200);
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=s.t_max() {
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not decreasing at {t}");
    }
    assert!(DiffusionSchedule::linear(10, 0.5, 0.2).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
}

#[test]
fn sampler_steps_are_strictly_decreasing_and_uniform() {
    let s = DiffusionSchedule::default_desk();
    let ts = s.sampler_steps(50).unwrap();
    assert_eq!(ts.len(), 50);
    assert_eq!(ts[0], 200);
    for w in ts.windows(2) {
        assert_eq!(w[0] - w[1], 4, "50 steps over 200 must be spaced by 4");
    }
    assert!(s.sampler_steps(0).is_err());
    assert!(s.sampler_steps(201).is_err());
}

#[test]
fn noising_identities() {
    let mut r = rng(1);
    let z0 = Tensor::randn(&[2, 3], &mut r);
    let eps = Tensor::randn(&[2, 3], &mut r);
    // alpha_bar = 1 keeps the signal; alpha_bar = 0 keeps only the noise.
    assert_eq!(noise_with(1.0, &z0, &eps).unwrap().to_vec(), z0.to_vec());
    assert_eq!(noise_with(0.0, &z0, &eps).unwrap().to_vec(), eps.to_vec());
}

#[test]
fn noising_scalar_reference_value() {
    // alpha_bar = 0.25, z0 = 1, eps = 0.5:
    // 0.5 * 1 + sqrt(0.75) * 0.5 = 0.9330127018922193
    let z0 = Tensor::scalar(1.0);
    let eps = Tensor::scalar(0.5);
    let z = noise_with(0.25, &z0, &eps).unwrap().item();
    assert!((z - 0.9330127018922193).abs() < 1e-12);
    assert!((z - 0.93301).abs() < 1e-5);
}

#[test]
fn noising_rejects_out_of_range_t() {
    let s = DiffusionSchedule::default_desk();
    let z0 = Tensor::scalar(0.0);
    let eps = Tensor::scalar(0.0);
    assert!(forward_noising(&z0, 0, &eps, &s).is_err());
    assert!(forward_noising(&z0, 201, &eps, &s).is_err());
    assert!(forward_noising(&z0, 200, &eps, &s).is_ok());
}

#[test]
fn noising_statistics_match_theory() {
    // Scalar draws at a few t: the sample mean approaches
    // sqrt(abar) z0 and the sample variance approaches 1 - abar.
    let s = DiffusionSchedule::default_desk();
    let z0_val = 0.8;
    let z0 = Tensor::scalar(z0_val);
    let n = 100_000;
    let mut r = rng(7);
    for &t in &[1usize, 100, 200] {
        let abar = s.alpha_bar(t);
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = Tensor::scalar(r.normal());
            vals.push(forward_noising(&z0, t, &eps, &s).unwrap().item());
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sigma2 = 1.0 - abar;
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - abar.sqrt() * z0_val).abs() < 3.0 * se_mean,
            "t={t}: mean {mean} vs {}",
            abar.sqrt() * z0_val
        );
        assert!(
            (var - sigma2).abs() < 3.0 * se_var,
            "t={t}: var {var} vs {sigma2}"
        );
    }
}

#[test]
fn loss_partition_identity_is_exact() {
    let mut r = rng(2);
    for _ in 0..50 {
        let eps = Tensor::randn(&[3, 4, 4], &mut r);
        let eps_hat = Tensor::randn(&[3, 4, 4], &mut r);
        let mask_bits: Vec<f64> = (0..48).map(|_| f64::from(r.uniform() < 0.5)).collect();
        let mask = Tensor::from_vec(mask_bits, &[3, 4, 4]).unwrap();
        let masked = pose_masked_loss(&eps, &eps_hat, &mask, 1.0).unwrap().item();
        // Plain squared error in the same summation order.
        let plain: f64 = eps
            .to_vec()
            .iter()
            .zip(eps_hat.to_vec())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_eq!(masked.to_bits(), plain.to_bits(), "partition identity must be exact");
    }
}

#[test]
fn loss_all_ones_mask_scales_by_alpha() {
    let mut r = rng(3);
    let eps = Tensor::randn(&[2, 4], &mut r);
    let eps_hat = Tensor::randn(&[2, 4], &mut r);
    let ones = Tensor::full(&[2, 4], 1.0);
    for alpha in [1.0, 2.0, 5.0, 10.0] {
        let got = pose_masked_loss(&eps, &eps_hat, &ones, alpha).unwrap().item();
        let mse: f64 = eps
            .to_vec()
            .iter()
            .zip(eps_hat.to_vec())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((got - alpha * mse).abs() <= 1e-12 * mse.abs().max(1.0));
    }
}

#[test]
fn loss_matches_elementwise_oracle_at_alpha_five() {
    let mut r = rng(4);
    let eps = Tensor::randn(&[1, 4, 4], &mut r);
    let eps_hat = Tensor::randn(&[1, 4, 4], &mut r);
    let bits: Vec<f64> = (0..16).map(|_| f64::from(r.uniform() < 0.4)).collect();
    let mask = Tensor::from_vec(bits.clone(), &[4, 4]).unwrap();
    let got = pose_masked_loss(&eps, &eps_hat, &mask, 5.0).unwrap().item();
    // Elementwise oracle: sum (1 - m) d^2 + alpha * sum m d^2.
    let a = eps.to_vec();
    let b = eps_hat.to_vec();
    let mut unmasked = 0.0;
    let mut masked = 0.0;
    for i in 0..16 {
        let d = (a[i] - b[i]) * (a[i] - b[i]);
        if bits[i] == 1.0 {
            masked += d;
        } else {
            unmasked += d;
        }
    }
    let want = unmasked + 5.0 * masked;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn loss_is_strictly_monotone_in_alpha() {
    let mut r = rng(5);
    let eps = Tensor::randn(&[2, 4, 4], &mut r);
    let eps_hat = Tensor::randn(&[2, 4, 4], &mut r);
    let mut bits = vec![0.0; 16];
    bits[3] = 1.0;
    bits[11] = 1.0;
    let mask = Tensor::from_vec(bits, &[4, 4]).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for alpha in [1.0, 2.0, 5.0, 10.0] {
        let v = pose_masked_loss(&eps, &eps_hat, &mask, alpha).unwrap().item();
        assert!(v > prev);
        prev = v;
    }
}

#[test]
fn loss_rejects_non_binary_masks() {
    let eps = Tensor::zeros(&[2, 2]);
    let bad = Tensor::from_vec(vec![0.0, 0.5, 1.0, 0.0], &[2, 2]).unwrap();
    assert!(pose_masked_loss(&eps, &eps, &bad, 2.0).is_err());
}

#[test]
fn loss_broadcasts_spatial_mask_across_channels() {
    let mut r = rng(6);
    let eps = Tensor::randn(&[3, 2, 2], &mut r);
    let eps_hat = Tensor::randn(&[3, 2, 2], &mut r);
    let bits = vec![1.0, 0.0, 0.0, 1.0];
    let spatial = Tensor::from_vec(bits.clone(), &[2, 2]).unwrap();
    let mut full_bits = Vec::new();
    for _ in 0..3 {
        full_bits.extend(&bits);
    }
    let full = Tensor::from_vec(full_bits, &[3, 2, 2]).unwrap();
    let a = pose_masked_loss(&eps, &eps_hat, &spatial, 3.0).unwrap().item();
    let b = pose_masked_loss(&eps, &eps_hat, &full, 3.0).unwrap().item();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn ddim_zero_model_matches_closed_form() {
    // With eps_hat = 0 the update telescopes: the output is the initial
    // noise divided by sqrt(alpha_bar(t_first)).
    let s = DiffusionSchedule::default_desk();
    for steps in [1usize, 7, 50] {
        let mut r = rng(100 + steps as u64);
        let out = ddim_sample(
            &mut |_, _| Ok(Tensor::zeros(&[2, 3, 3])),
            &[2, 3, 3],
            &s,
            steps,
            &mut r,
        )
        .unwrap();
        let mut r2 = rng(100 + steps as u64);
        let x_init = Tensor::randn(&[2, 3, 3], &mut r2);
        let t_first = s.sampler_steps(steps).unwrap()[0];
        let want = x_init.scale(1.0 / s.alpha_bar(t_first).sqrt()).unwrap();
        for (a, b) in out.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-9, "steps {steps}: {a} vs {b}");
        }
    }
}

#[test]
fn ddim_single_step_is_x0_formula() {
    let s = DiffusionSchedule::default_desk();
    let c = 0.3;
    let mut r = rng(8);
    let out = ddim_sample(
        &mut |x, _| x.scale(c),
        &[4],
        &s,
        1,
        &mut r,
    )
    .unwrap();
    let mut r2 = rng(8);
    let x = Tensor::randn(&[4], &mut r2);
    let abar = s.alpha_bar(200);
    // x0_hat = (x - sqrt(1-abar) * c x) / sqrt(abar)
    let want = x
        .sub(&x.scale(c * (1.0 - abar).sqrt()).unwrap())
        .unwrap()
        .scale(1.0 / abar.sqrt())
        .unwrap();
    for (a, b) in out.to_vec().iter().zip(want.to_vec()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ddim_full_chain_matches_analytic_recurrence_for_linear_model() {
    // eps_hat = c * x_t is linear, so every step multiplies x by a known
    // scalar; the whole trajectory has a closed form.
    let s = DiffusionSchedule::default_desk();
    let c = -0.17;
    let steps = s.t_max();
    let mut r = rng(9);
    let out = ddim_sample(&mut |x, _| x.scale(c), &[8], &s, steps, &mut r).unwrap();

    let mut r2 = rng(9);
    let x = Tensor::randn(&[8], &mut r2);
    let ts = s.sampler_steps(steps).unwrap();
    let mut factor = 1.0;
    for (i, &t) in ts.iter().enumerate() {
        let abar_t = s.alpha_bar(t);
        let abar_p = s.alpha_bar(ts.get(i + 1).copied().unwrap_or(0));
        factor *= (abar_p / abar_t).sqrt() * (1.0 - c * (1.0 - abar_t).sqrt())
            + c * (1.0 - abar_p).sqrt();
    }
    for (a, b) in out.to_vec().iter().zip(x.to_vec()) {
        assert!((a - b * factor).abs() < 1e-8);
    }
}

#[test]
fn ddim_same_seed_is_bit_identical() {
    let s = DiffusionSchedule::default_desk();
    let run = || {
        let mut r = rng(77);
        ddim_sample(&mut |x, _| x.scale(0.1), &[3, 4, 4], &s, 20, &mut r)
            .unwrap()
            .to_vec()
    };
    let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn ddim_surfaces_non_finite_models() {
    let s = DiffusionSchedule::default_desk();
    let mut r = rng(10);
    let out = ddim_sample(
        &mut |x, _| Ok(Tensor::full(x.shape(), f64::NAN)),
        &[2],
        &s,
        5,
        &mut r,
    );
    assert!(matches!(out, Err(Error::NonFinite { .. })));
}

// Small end-to-end fixtures for the training-step tests.

fn tiny_setup() -> (
    HostDenoiser,
    ControlBranch,
    PoseAdapter,
    DiffusionSchedule,
    TrainBatchItem,
) {
    let mut r = rng(40);
    let host_cfg = HostConfig {
        latent_channels: 2,
        latent_size: 8,
        base_width: 4,
        sin_dim: 8,
        embed_dim: 8,
        num_styles: 3,
    };
    let mut host = HostDenoiser::new(host_cfg, &mut r).unwrap();
    // A nonzero output head so gradients reach the adapter from step one.
    host.params()
        .iter()
        .find(|p| p.shape() == [2, 4, 3, 3])
        .unwrap()
        .with_data_mut(|d| {
            let mut rr = SeedRng::new(41);
            for v in d.iter_mut() {
                *v = 0.2 * rr.normal();
            }
        });
    host.freeze();
    let control = ControlBranch::from_host(&host);
    let adapter_cfg = AdapterConfig {
        pmsa: PmsaConfig {
            depth: 2,
            patch: 2,
            embed_dim: 8,
            heads: 1,
            ..Default::default()
        },
        sigma: 2.0,
        kernels: vec![5, 3],
        alpha: 5.0,
        encoder_widths: [2, 3, 4, 4, 4, 4],
    };
    let adapter = PoseAdapter::new(adapter_cfg, 2, 8, 8, &mut r).unwrap();
    let sched = DiffusionSchedule::linear(50, 2e-3, 0.1).unwrap();

    let sk = skeleton_64();
    let img = render_skeleton(&sk, 0.05, 1).unwrap();
    let pyramid = PoseMaskPyramid::build(&img, 8, 8, 2.0, &[5, 3], 2).unwrap();
    let item = TrainBatchItem {
        z0: Tensor::randn(&[2, 8, 8], &mut r),
        pose_image: img.to_tensor(),
        pyramid,
        style: 1,
    };
    (host, control, adapter, sched, item)
}

fn skeleton_64() -> PoseSkeleton {
    let mut kps = [Keypoint {
        x: 32.0,
        y: 32.0,
        score: 1.0,
    }; NUM_KEYPOINTS];
    for (i, kp) in kps.iter_mut().enumerate() {
        let ang = i as f64;
        kp.x = 32.0 + 14.0 * (ang * 0.7).cos();
        kp.y = 32.0 + 14.0 * (ang * 1.1).sin();
    }
    PoseSkeleton::new(vec![kps], (64, 64)).unwrap()
}

#[test]
fn zero_learning_rate_keeps_all_weights() {
    let (host, control, adapter, sched, item) = tiny_setup();
    let mut params = adapter.params();
    params.extend(control.params());
    let before: Vec<Vec<u64>> = params
        .iter()
        .map(|p| p.to_vec().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut opt = Adam::new(params.clone(), 0.0).unwrap();
    let mut r = rng(50);
    for _ in 0..3 {
        train_step(
            &[item_clone(&item)],
            &adapter,
            &control,
            &host,
            &sched,
            &TrainStepOptions::default(),
            &mut opt,
            &mut r,
        )
        .unwrap();
    }
    let after: Vec<Vec<u64>> = params
        .iter()
        .map(|p| p.to_vec().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

fn item_clone(item: &TrainBatchItem) -> TrainBatchItem {
    TrainBatchItem {
        z0: item.z0.clone(),
        pose_image: item.pose_image.clone(),
        pyramid: item.pyramid.clone(),
        style: item.style,
    }
}

#[test]
fn single_sample_overfit_descends() {
    // One fully fixed training point: reseeding the step rng pins the
    // timestep, the noise draw and the style decision, so every step
    // optimizes the same objective and its loss must fall monotonically
    // apart from short plateaus.
    let (host, control, adapter, sched, item) = tiny_setup();
    let mut params = adapter.params();
    params.extend(control.params());
    let mut opt = Adam::new(params, 2e-3).unwrap();

    let mut losses = Vec::with_capacity(200);
    for _ in 0..200 {
        let mut step_rng = rng(51);
        let stats = train_step(
            &[item_clone(&item)],
            &adapter,
            &control,
            &host,
            &sched,
            &TrainStepOptions {
                style_dropout: 0.0,
                ..Default::default()
            },
            &mut opt,
            &mut step_rng,
        )
        .unwrap();
        losses.push(stats.loss);
    }
    let initial = losses[0];
    let last = *losses.last().unwrap();
    assert!(last < 0.5 * initial, "no real progress: {initial} -> {last}");

    let mut best = f64::INFINITY;
    let mut since_improvement = 0usize;
    let mut worst_gap = 0usize;
    for &l in &losses {
        if l < best {
            best = l;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            worst_gap = worst_gap.max(since_improvement);
        }
    }
    assert!(worst_gap <= 10, "stalled for {worst_gap} steps");
}

fn mask_tensor_for(item: &TrainBatchItem) -> Tensor {
    let m = item.pyramid.finest();
    Tensor::from_vec(
        m.data.iter().map(|&b| b as f64).collect(),
        &[m.height, m.width],
    )
    .unwrap()
}

#[test]
fn loss_gradients_reach_adapter_weights() {
    let (host, control, adapter, sched, item) = tiny_setup();
    let _ = control;
    let mut r = rng(53);
    let t = 20;
    let eps = Tensor::randn(item.z0.shape(), &mut r);
    let z_t = forward_noising(&item.z0, t, &eps, &sched).unwrap();
    let mask = mask_tensor_for(&item);
    let control = ControlBranch::from_host(&host);
    // Nonzero taps so the control path contributes too.
    for tap in [&control.tap_skip1, &control.tap_skip2, &control.tap_bottleneck] {
        let mut rr = rng(54);
        tap.weight.with_data_mut(|d| {
            for v in d.iter_mut() {
                *v = 0.2 * rr.normal();
            }
        });
    }
    let mut params = adapter.params();
    params.extend(control.params());
    let err = grad_check(
        || {
            let z_p = adapter.forward(&z_t, &item.pose_image, Some(&item.pyramid), &mut rng(0), false)?;
            let eps_hat = crate::adapter::denoise_with_control(&host, &control, &z_t, t, 1, &z_p)?;
            pose_masked_loss(&eps, &eps_hat, &mask, 5.0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn unfrozen_host_is_rejected() {
    let (host, control, adapter, sched, item) = tiny_setup();
    let _ = host;
    let mut r = rng(55);
    let mut fresh = HostDenoiser::new(
        HostConfig {
            latent_channels: 2,
            latent_size: 8,
            base_width: 4,
            sin_dim: 8,
            embed_dim: 8,
            num_styles: 3,
        },
        &mut r,
    )
    .unwrap();
    let mut opt = Adam::new(adapter.params(), 1e-3).unwrap();
    let err = train_step(
        &[item_clone(&item)],
        &adapter,
        &control,
        &fresh,
        &sched,
        &TrainStepOptions::default(),
        &mut opt,
        &mut r,
    );
    assert!(matches!(err, Err(Error::HostNotFrozen)));
    fresh.freeze();
    assert!(train_step(
        &[item_clone(&item)],
        &adapter,
        &ControlBranch::from_host(&fresh),
        &fresh,
        &sched,
        &TrainStepOptions::default(),
        &mut opt,
        &mut r,
    )
    .is_ok());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (host, control, adapter, sched, item) = tiny_setup();
    let huge = Tensor::from_vec(vec![1e200; 128], &[2, 8, 8]).unwrap();
    let bad = TrainBatchItem {
        z0: huge,
        pose_image: item.pose_image.clone(),
        pyramid: item.pyramid.clone(),
        style: 0,
    };
    let mut params = adapter.params();
    params.extend(control.params());
    let mut opt = Adam::new(params, 1e-3).unwrap();
    let mut r = rng(56);
    let err = train_step(
        &[bad],
        &adapter,
        &control,
        &host,
        &sched,
        &TrainStepOptions::default(),
        &mut opt,
        &mut r,
    );
    assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
}
