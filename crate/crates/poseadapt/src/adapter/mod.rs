//! The pose adapter and its zero-initialized injection into a frozen host.
//!
//! The adapter updates the latent with two additive terms: the masked
//! self-attention ViT output (through a zero-initialized projection) and
//! the pose-encoder features. Both terms vanish at initialization, so a
//! freshly attached adapter leaves the host's behavior bit-identical; all
//! conditioning influence is learned.

pub mod checkpoint;
mod host;

pub use host::{denoise_with_control, ControlBranch, ControlResiduals, HostConfig, HostDenoiser};

use crate::error::{Error, Result};
use crate::pmsa::{PmsaConfig, PmsaStack};
use crate::pose::PoseMaskPyramid;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// A square convolution layer with bias.
#[derive(Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut SeedRng) -> Self {
        let std = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self {
            weight: Tensor::randn_param(&[c_out, c_in, k, k], std, rng),
            bias: Tensor::zeros_param(&[c_out]),
            stride,
            pad: k / 2,
        }
    }

    /// Zero-initialized 1x1 convolution: an exact no-op contribution until
    /// trained away from zero.
    pub fn zero_conv(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros_param(&[c_out, c_in, 1, 1]),
            bias: Tensor::zeros_param(&[c_out]),
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    pub(crate) fn map_params(&mut self, f: &dyn Fn(&Tensor) -> Tensor) {
        self.weight = f(&self.weight);
        self.bias = f(&self.bias);
    }
}

/// Replace a parameter with a constant copy (no gradient tracking).
pub(crate) fn freeze_tensor(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.to_vec(), t.shape()).expect("same shape")
}

/// Adapter hyperparameters.
#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub pmsa: PmsaConfig,
    /// Gaussian std for mask dilation.
    pub sigma: f64,
    /// Kernel schedule, one per PMSA block, coarsest first.
    pub kernels: Vec<usize>,
    /// Pose-mask guidance strength in the training loss.
    pub alpha: f64,
    /// Channel widths of the six pose-encoder stages.
    pub encoder_widths: [usize; 6],
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            pmsa: PmsaConfig::default(),
            sigma: 3.0,
            kernels: vec![23, 13],
            alpha: 5.0,
            encoder_widths: [4, 8, 12, 12, 12, 12],
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != self.pmsa.depth {
            return Err(Error::Config(format!(
                "kernel schedule length {} != PMSA depth {}",
                self.kernels.len(),
                self.pmsa.depth
            )));
        }
        if self.kernels.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::Config("kernel lengths must be odd".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.alpha < 1.0 {
            return Err(Error::Config("alpha must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pose encoder: six strided convolutions with SiLU, shrinking the pose
/// image by a factor of 8, capped by a zero-initialized 1x1 convolution.
/// Output is exactly zero for every input at initialization.
#[derive(Debug)]
pub struct PoseEncoder {
    pub convs: Vec<ConvLayer>,
    pub zero_out: ConvLayer,
}

/// Strides of the six encoder stages (cumulative spatial factor 8).
const ENCODER_STRIDES: [usize; 6] = [2, 2, 2, 1, 1, 1];

impl PoseEncoder {
    pub fn new(widths: &[usize; 6], out_channels: usize, rng: &mut SeedRng) -> Self {
        let mut convs = Vec::with_capacity(6);
        let mut c_in = 3;
        for (&w, &s) in widths.iter().zip(&ENCODER_STRIDES) {
            convs.push(ConvLayer::new(c_in, w, 3, s, rng));
            c_in = w;
        }
        Self {
            convs,
            zero_out: ConvLayer::zero_conv(c_in, out_channels),
        }
    }

    /// `[3, 8s, 8s] -> [f, s, s]`.
    pub fn forward(&self, pose_image: &Tensor) -> Result<Tensor> {
        let mut h = pose_image.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        self.zero_out.forward(&h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(c.named_params(&format!("{prefix}.conv{i}")));
        }
        out.extend(self.zero_out.named_params(&format!("{prefix}.zero_out")));
        out
    }
}

/// The trainable adapter: PMSA ViT plus pose encoder, fused additively
/// into the latent.
#[derive(Debug)]
pub struct PoseAdapter {
    pub config: AdapterConfig,
    pub pmsa: PmsaStack,
    pub encoder: PoseEncoder,
    /// Zero-initialized projection on the ViT output; keeps the latent
    /// update exactly zero at initialization.
    pub fuse_zero: ConvLayer,
}

impl PoseAdapter {
    pub fn new(
        config: AdapterConfig,
        latent_channels: usize,
        latent_h: usize,
        latent_w: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        config.validate()?;
        let pmsa = PmsaStack::new(
            config.pmsa.clone(),
            latent_channels,
            latent_channels,
            latent_h,
            latent_w,
            rng,
        )?;
        let encoder = PoseEncoder::new(&config.encoder_widths, latent_channels, rng);
        Ok(Self {
            config,
            pmsa,
            encoder,
            fuse_zero: ConvLayer::zero_conv(latent_channels, latent_channels),
        })
    }

    /// The latent update term: ViT output through the zero projection,
    /// plus the pose-encoder features.
    pub fn update_term(
        &self,
        z_t: &Tensor,
        pose_image: &Tensor,
        pyramid: Option<&PoseMaskPyramid>,
        rng: &mut SeedRng,
        training: bool,
    ) -> Result<Tensor> {
        let vit = self.pmsa.forward(z_t, pyramid, rng, training)?;
        let vit = self.fuse_zero.forward(&vit)?;
        let pose_feat = self.encoder.forward(pose_image)?;
        vit.add(&pose_feat)
    }

    /// `z'_t = z_t + update`. `pyramid = None` disables the attention
    /// masks (unmasked ViT); the pose-encoder path always sees the image.
    pub fn forward(
        &self,
        z_t: &Tensor,
        pose_image: &Tensor,
        pyramid: Option<&PoseMaskPyramid>,
        rng: &mut SeedRng,
        training: bool,
    ) -> Result<Tensor> {
        let update = self.update_term(z_t, pose_image, pyramid, rng, training)?;
        z_t.add(&update)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.pmsa.named_params(&format!("{prefix}.pmsa"));
        out.extend(self.encoder.named_params(&format!("{prefix}.encoder")));
        out.extend(self.fuse_zero.named_params(&format!("{prefix}.fuse_zero")));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params("adapter")
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }
}
