//! The frozen host denoiser and its trainable control branch.
//!
//! The host is a small U-shaped noise predictor over the latent with two
//! spatial resolutions, additive skip connections, sinusoidal timestep
//! features and a learned style-label embedding. The control branch is a
//! trainable copy of the host encoder fed with the adapter-updated latent;
//! its features re-enter the frozen decoder through zero-initialized 1x1
//! convolutions at the bottleneck and every skip level.

use super::{freeze_tensor, ConvLayer};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Channel width at full latent resolution; doubled after downsampling.
    pub base_width: usize,
    /// Sinusoidal timestep feature dimension (even).
    pub sin_dim: usize,
    /// Conditioning embedding width shared by timestep and style.
    pub embed_dim: usize,
    /// Number of style labels; one extra row serves as the null label.
    pub num_styles: usize,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            latent_size: 16,
            base_width: 16,
            sin_dim: 16,
            embed_dim: 32,
            num_styles: 8,
        }
    }
}

impl HostConfig {
    pub fn null_style(&self) -> usize {
        self.num_styles
    }
}

/// Sinusoidal features of an integer timestep.
fn sin_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out.push((t as f64 * freq).sin());
        out.push((t as f64 * freq).cos());
    }
    Tensor::from_vec(out, &[1, dim]).expect("sin feature shape")
}

/// Linear projection of the conditioning embedding to a per-channel bias.
#[derive(Debug)]
struct CondProj {
    weight: Tensor,
    bias: Tensor,
}

impl CondProj {
    fn new(embed_dim: usize, channels: usize, rng: &mut SeedRng) -> Self {
        Self {
            weight: Tensor::randn_param(&[embed_dim, channels], 1.0 / (embed_dim as f64).sqrt(), rng),
            bias: Tensor::zeros_param(&[channels]),
        }
    }

    fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let channels = self.bias.shape()[0];
        emb.matmul(&self.weight)?
            .reshape(&[channels])?
            .add(&self.bias)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    fn map_params(&mut self, f: &dyn Fn(&Tensor) -> Tensor) {
        self.weight = f(&self.weight);
        self.bias = f(&self.bias);
    }

    fn copy_trainable(&self) -> Self {
        Self {
            weight: Tensor::param(self.weight.to_vec(), self.weight.shape()).expect("shape"),
            bias: Tensor::param(self.bias.to_vec(), self.bias.shape()).expect("shape"),
        }
    }
}

/// Encoder-half weights shared structurally by the host and its control
/// branch copy.
#[derive(Debug)]
struct EncoderHalf {
    enc1: ConvLayer,
    enc1b: ConvLayer,
    down: ConvLayer,
    enc2b: ConvLayer,
    bott: ConvLayer,
    cond_enc1: CondProj,
    cond_enc2: CondProj,
    cond_bott: CondProj,
}

impl EncoderHalf {
    fn new(cfg: &HostConfig, rng: &mut SeedRng) -> Self {
        let (c, w) = (cfg.latent_channels, cfg.base_width);
        Self {
            enc1: ConvLayer::new(c, w, 3, 1, rng),
            enc1b: ConvLayer::new(w, w, 3, 1, rng),
            down: ConvLayer::new(w, 2 * w, 3, 2, rng),
            enc2b: ConvLayer::new(2 * w, 2 * w, 3, 1, rng),
            bott: ConvLayer::new(2 * w, 2 * w, 3, 1, rng),
            cond_enc1: CondProj::new(cfg.embed_dim, w, rng),
            cond_enc2: CondProj::new(cfg.embed_dim, 2 * w, rng),
            cond_bott: CondProj::new(cfg.embed_dim, 2 * w, rng),
        }
    }

    /// Returns `(skip1, skip2, bottleneck)` features.
    fn forward(&self, z: &Tensor, emb: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let h1 = self
            .enc1
            .forward(z)?
            .add_chan_broadcast(&self.cond_enc1.forward(emb)?)?
            .silu()?;
        let skip1 = self.enc1b.forward(&h1)?.silu()?;
        let h2 = self
            .down
            .forward(&skip1)?
            .add_chan_broadcast(&self.cond_enc2.forward(emb)?)?
            .silu()?;
        let skip2 = self.enc2b.forward(&h2)?.silu()?;
        let hb = self
            .bott
            .forward(&skip2)?
            .add_chan_broadcast(&self.cond_bott.forward(emb)?)?
            .silu()?;
        Ok((skip1, skip2, hb))
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.extend(self.enc1.named_params(&format!("{prefix}.enc1")));
        out.extend(self.enc1b.named_params(&format!("{prefix}.enc1b")));
        out.extend(self.down.named_params(&format!("{prefix}.down")));
        out.extend(self.enc2b.named_params(&format!("{prefix}.enc2b")));
        out.extend(self.bott.named_params(&format!("{prefix}.bott")));
        out.extend(self.cond_enc1.named_params(&format!("{prefix}.cond_enc1")));
        out.extend(self.cond_enc2.named_params(&format!("{prefix}.cond_enc2")));
        out.extend(self.cond_bott.named_params(&format!("{prefix}.cond_bott")));
        out
    }

    fn map_params(&mut self, f: &dyn Fn(&Tensor) -> Tensor) {
        self.enc1.map_params(f);
        self.enc1b.map_params(f);
        self.down.map_params(f);
        self.enc2b.map_params(f);
        self.bott.map_params(f);
        self.cond_enc1.map_params(f);
        self.cond_enc2.map_params(f);
        self.cond_bott.map_params(f);
    }

    fn copy_trainable(&self) -> Self {
        let copy_conv = |c: &ConvLayer| ConvLayer {
            weight: Tensor::param(c.weight.to_vec(), c.weight.shape()).expect("shape"),
            bias: Tensor::param(c.bias.to_vec(), c.bias.shape()).expect("shape"),
            stride: c.stride,
            pad: c.pad,
        };
        Self {
            enc1: copy_conv(&self.enc1),
            enc1b: copy_conv(&self.enc1b),
            down: copy_conv(&self.down),
            enc2b: copy_conv(&self.enc2b),
            bott: copy_conv(&self.bott),
            cond_enc1: self.cond_enc1.copy_trainable(),
            cond_enc2: self.cond_enc2.copy_trainable(),
            cond_bott: self.cond_bott.copy_trainable(),
        }
    }
}

/// The small U-shaped noise predictor.
#[derive(Debug)]
pub struct HostDenoiser {
    pub config: HostConfig,
    frozen: bool,
    encoder: EncoderHalf,
    dec2: ConvLayer,
    up: ConvLayer,
    dec1b: ConvLayer,
    out: ConvLayer,
    cond_dec2: CondProj,
    cond_dec1: CondProj,
    time_weight: Tensor,
    time_bias: Tensor,
    style_table: Tensor,
}

impl HostDenoiser {
    pub fn new(config: HostConfig, rng: &mut SeedRng) -> Result<Self> {
        if config.sin_dim % 2 != 0 {
            return Err(Error::Config("sin_dim must be even".into()));
        }
        let (c, w) = (config.latent_channels, config.base_width);
        let encoder = EncoderHalf::new(&config, rng);
        let mut out = ConvLayer::new(w, c, 3, 1, rng);
        // Zero-initialized output head: the untrained predictor starts at
        // zero noise, which keeps early training steps well-scaled.
        out.weight.with_data_mut(|d| d.fill(0.0));
        Ok(Self {
            encoder,
            dec2: ConvLayer::new(2 * w, 2 * w, 3, 1, rng),
            up: ConvLayer::new(2 * w, w, 3, 1, rng),
            dec1b: ConvLayer::new(w, w, 3, 1, rng),
            out,
            cond_dec2: CondProj::new(config.embed_dim, 2 * w, rng),
            cond_dec1: CondProj::new(config.embed_dim, w, rng),
            time_weight: Tensor::randn_param(
                &[config.sin_dim, config.embed_dim],
                1.0 / (config.sin_dim as f64).sqrt(),
                rng,
            ),
            time_bias: Tensor::zeros_param(&[config.embed_dim]),
            style_table: Tensor::randn_param(&[config.num_styles + 1, config.embed_dim], 0.1, rng),
            config,
            frozen: false,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Conditioning embedding for `(t, style)`, shape `[1, embed_dim]`.
    pub fn cond_embedding(&self, t: usize, style: usize) -> Result<Tensor> {
        if style > self.config.num_styles {
            return Err(Error::invalid(
                "cond_embedding",
                format!("style {style} out of range"),
            ));
        }
        let feats = sin_features(t, self.config.sin_dim);
        let temb = feats
            .matmul(&self.time_weight)?
            .add_row_broadcast(&self.time_bias)?
            .silu()?;
        let style_emb = self
            .style_table
            .embed_row(style)?
            .reshape(&[1, self.config.embed_dim])?;
        temb.add(&style_emb)
    }

    /// Noise prediction with a precomputed conditioning embedding.
    pub fn forward_with(
        &self,
        z_t: &Tensor,
        emb: &Tensor,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        let (mut skip1, mut skip2, mut hb) = self.encoder.forward(z_t, emb)?;
        if let Some(ctrl) = control {
            skip1 = skip1.add(&ctrl.skip1)?;
            skip2 = skip2.add(&ctrl.skip2)?;
            hb = hb.add(&ctrl.bottleneck)?;
        }
        let d2 = self
            .dec2
            .forward(&hb.add(&skip2)?)?
            .add_chan_broadcast(&self.cond_dec2.forward(emb)?)?
            .silu()?;
        let d1 = self.up.forward(&d2.upsample_nearest2()?)?.silu()?;
        let d1 = self
            .dec1b
            .forward(&d1.add(&skip1)?)?
            .add_chan_broadcast(&self.cond_dec1.forward(emb)?)?
            .silu()?;
        self.out.forward(&d1)
    }

    /// Noise prediction `eps(z_t, t, style)` without control.
    pub fn forward(&self, z_t: &Tensor, t: usize, style: usize) -> Result<Tensor> {
        let emb = self.cond_embedding(t, style)?;
        self.forward_with(z_t, &emb, None)
    }

    /// Convert every parameter into a constant: gradients no longer reach
    /// the host, and the optimizer never sees it.
    pub fn freeze(&mut self) {
        self.map_params(&freeze_tensor);
        self.frozen = true;
    }

    fn map_params(&mut self, f: &dyn Fn(&Tensor) -> Tensor) {
        self.encoder.map_params(f);
        self.dec2.map_params(f);
        self.up.map_params(f);
        self.dec1b.map_params(f);
        self.out.map_params(f);
        self.cond_dec2.map_params(f);
        self.cond_dec1.map_params(f);
        self.time_weight = f(&self.time_weight);
        self.time_bias = f(&self.time_bias);
        self.style_table = f(&self.style_table);
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params(&format!("{prefix}.encoder"));
        out.extend(self.dec2.named_params(&format!("{prefix}.dec2")));
        out.extend(self.up.named_params(&format!("{prefix}.up")));
        out.extend(self.dec1b.named_params(&format!("{prefix}.dec1b")));
        out.extend(self.out.named_params(&format!("{prefix}.out")));
        out.extend(self.cond_dec2.named_params(&format!("{prefix}.cond_dec2")));
        out.extend(self.cond_dec1.named_params(&format!("{prefix}.cond_dec1")));
        out.push((format!("{prefix}.time_weight"), self.time_weight.clone()));
        out.push((format!("{prefix}.time_bias"), self.time_bias.clone()));
        out.push((format!("{prefix}.style_table"), self.style_table.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params("host").into_iter().map(|(_, t)| t).collect()
    }

    /// CRC-32 digest of the serialized weights; recorded at freeze time
    /// and re-checked by later pipeline stages.
    pub fn weights_digest(&self) -> u32 {
        super::checkpoint::digest(&self.named_params("host"))
    }
}

/// Residual features injected into the frozen decoder.
#[derive(Debug)]
pub struct ControlResiduals {
    pub skip1: Tensor,
    pub skip2: Tensor,
    pub bottleneck: Tensor,
}

/// Trainable copy of the host encoder plus zero-initialized taps.
#[derive(Debug)]
pub struct ControlBranch {
    encoder: EncoderHalf,
    pub tap_skip1: ConvLayer,
    pub tap_skip2: ConvLayer,
    pub tap_bottleneck: ConvLayer,
}

impl ControlBranch {
    /// Clone the host encoder weights into fresh trainable parameters and
    /// attach zero taps: the branch starts as an exact no-op.
    pub fn from_host(host: &HostDenoiser) -> Self {
        let w = host.config.base_width;
        Self {
            encoder: host.encoder.copy_trainable(),
            tap_skip1: ConvLayer::zero_conv(w, w),
            tap_skip2: ConvLayer::zero_conv(2 * w, 2 * w),
            tap_bottleneck: ConvLayer::zero_conv(2 * w, 2 * w),
        }
    }

    pub fn forward(&self, z_prime: &Tensor, emb: &Tensor) -> Result<ControlResiduals> {
        let (s1, s2, hb) = self.encoder.forward(z_prime, emb)?;
        Ok(ControlResiduals {
            skip1: self.tap_skip1.forward(&s1)?,
            skip2: self.tap_skip2.forward(&s2)?,
            bottleneck: self.tap_bottleneck.forward(&hb)?,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params(&format!("{prefix}.encoder"));
        out.extend(self.tap_skip1.named_params(&format!("{prefix}.tap_skip1")));
        out.extend(self.tap_skip2.named_params(&format!("{prefix}.tap_skip2")));
        out.extend(
            self.tap_bottleneck
                .named_params(&format!("{prefix}.tap_bottleneck")),
        );
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params("control")
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }
}

/// Full conditioned noise prediction: the frozen host runs on `z_t`, the
/// control branch runs on the adapter-updated `z'_t`, and the control
/// residuals are added at the decoder skips.
pub fn denoise_with_control(
    host: &HostDenoiser,
    control: &ControlBranch,
    z_t: &Tensor,
    t: usize,
    style: usize,
    z_prime: &Tensor,
) -> Result<Tensor> {
    let emb = host.cond_embedding(t, style)?;
    let residuals = control.forward(z_prime, &emb)?;
    host.forward_with(z_t, &emb, Some(&residuals))
}
