//! Pose-masked self-attention (PMSA).
//!
//! A stack of pre-norm ViT blocks over patch tokens of the latent. Each
//! block receives an additive `L x L` attention bias built from the patch
//! labels of one pyramid mask: entries are `0` wherever the query *or* the
//! key patch contains pose, and [`MASK_NEG`] otherwise, so non-pose tokens
//! cannot attend to each other. Blocks are paired with masks coarsest
//! first, which narrows the allowed key set as depth increases.

use crate::error::{Error, Result};
use crate::pose::PoseMaskPyramid;
use crate::rng::SeedRng;
use crate::tensor::{Tensor, MASK_NEG};

/// How patch labels expand into the attention bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Zero both the rows and the columns of pose patches. Pose queries
    /// attend everywhere; non-pose queries attend only to pose keys.
    #[default]
    RowsAndCols,
    /// Zero only the columns of pose patches, so *every* query attends
    /// only to pose keys. Matches a stricter reading of the mask's intent;
    /// kept behind a config flag for comparison.
    ColsOnly,
}

/// Additive attention bias over `{0, MASK_NEG}`.
#[derive(Debug, Clone)]
pub struct AttnMask {
    bias: Tensor,
    len: usize,
    /// Set when the patch mask was empty and the mask fell back to
    /// unmasked attention instead of producing an undefined softmax.
    pub degenerate: bool,
}

impl AttnMask {
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unmasked attention bias (all zeros), not flagged as degenerate.
    pub fn open(len: usize) -> AttnMask {
        AttnMask {
            bias: Tensor::zeros(&[len, len]),
            len,
            degenerate: false,
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.bias.with_data(|b| b[i * self.len + j])
    }
}

/// Expand patch labels into the attention bias.
///
/// Starts from an all-`MASK_NEG` matrix and zeroes the row and column of
/// every pose patch. An all-zero patch mask would leave every row fully
/// masked, so it falls back to unmasked attention with the `degenerate`
/// flag raised; empty poses occur in practice and must not abort a run.
pub fn build_attn_mask(patch_mask: &[u8]) -> AttnMask {
    build_attn_mask_mode(patch_mask, MaskMode::RowsAndCols)
}

pub fn build_attn_mask_mode(patch_mask: &[u8], mode: MaskMode) -> AttnMask {
    let l = patch_mask.len();
    assert!(l >= 1, "patch mask must be nonempty");
    if patch_mask.iter().all(|&b| b == 0) {
        return AttnMask {
            bias: Tensor::zeros(&[l, l]),
            len: l,
            degenerate: true,
        };
    }
    let mut bias = vec![MASK_NEG; l * l];
    for (i, &b) in patch_mask.iter().enumerate() {
        if b == 1 {
            for j in 0..l {
                bias[j * l + i] = 0.0; // column i
                if mode == MaskMode::RowsAndCols {
                    bias[i * l + j] = 0.0; // row i
                }
            }
        }
    }
    AttnMask {
        bias: Tensor::from_vec(bias, &[l, l]).expect("bias shape"),
        len: l,
        degenerate: false,
    }
}

/// One ViT block: masked self-attention plus a feed-forward unit, both
/// behind pre-norm residual connections.
#[derive(Debug)]
pub struct PmsaBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_shift: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_shift: Tensor,
    pub ff1: Tensor,
    pub ff1_bias: Tensor,
    pub ff2: Tensor,
    pub ff2_bias: Tensor,
    pub heads: usize,
    pub dropout: f64,
}

const NORM_EPS: f64 = 1e-5;

impl PmsaBlock {
    pub fn new(dim: usize, heads: usize, dropout: f64, rng: &mut SeedRng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(
                "pmsa_block",
                format!("{heads} heads do not divide dim {dim}"),
            ));
        }
        let hidden = 4 * dim;
        let std_in = 1.0 / (dim as f64).sqrt();
        let std_hidden = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_q: Tensor::randn_param(&[dim, dim], std_in, rng),
            w_k: Tensor::randn_param(&[dim, dim], std_in, rng),
            w_v: Tensor::randn_param(&[dim, dim], std_in, rng),
            norm1_gain: Tensor::param(vec![1.0; dim], &[dim])?,
            norm1_shift: Tensor::zeros_param(&[dim]),
            norm2_gain: Tensor::param(vec![1.0; dim], &[dim])?,
            norm2_shift: Tensor::zeros_param(&[dim]),
            ff1: Tensor::randn_param(&[dim, hidden], std_in, rng),
            ff1_bias: Tensor::zeros_param(&[hidden]),
            ff2: Tensor::randn_param(&[hidden, dim], std_hidden, rng),
            ff2_bias: Tensor::zeros_param(&[dim]),
            heads,
            dropout,
        })
    }

    fn head_dim(&self) -> usize {
        let [_, d] = self.w_q.shape() else { unreachable!() };
        d / self.heads
    }

    /// `softmax(Q K^T / sqrt(f_q) + bias) V` with per-head projections.
    ///
    /// Given at least one pose patch, a non-pose query row places weight
    /// exactly zero on every non-pose key; each weight row sums to one.
    pub fn masked_attention(&self, tokens: &Tensor, mask: &AttnMask) -> Result<Tensor> {
        Ok(self.attention_inner(tokens, mask)?.0)
    }

    fn attention_inner(&self, tokens: &Tensor, mask: &AttnMask) -> Result<(Tensor, Vec<Tensor>)> {
        let q = tokens.matmul(&self.w_q)?;
        let k = tokens.matmul(&self.w_k)?;
        let v = tokens.matmul(&self.w_v)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = q.slice_cols(hd * dh, dh)?;
            let kh = k.slice_cols(hd * dh, dh)?;
            let vh = v.slice_cols(hd * dh, dh)?;
            let scores = qh.matmul(&kh.transpose2()?)?.scale(scale)?;
            let attn = scores.softmax_rows(Some(mask.bias()))?;
            ctx.push(attn.matmul(&vh)?);
            weights.push(attn);
        }
        Ok((Tensor::concat_cols(&ctx)?, weights))
    }

    fn feed_forward(&self, x: &Tensor, rng: &mut SeedRng, training: bool) -> Result<Tensor> {
        x.matmul(&self.ff1)?
            .add_row_broadcast(&self.ff1_bias)?
            .relu()?
            .dropout(self.dropout, rng, training)?
            .matmul(&self.ff2)?
            .add_row_broadcast(&self.ff2_bias)?
            .dropout(self.dropout, rng, training)
    }

    /// Full block with pre-norm residual wiring.
    pub fn forward(
        &self,
        tokens: &Tensor,
        mask: &AttnMask,
        rng: &mut SeedRng,
        training: bool,
        residual: bool,
    ) -> Result<Tensor> {
        let normed = tokens.layer_norm(&self.norm1_gain, &self.norm1_shift, NORM_EPS)?;
        let attn = self.masked_attention(&normed, mask)?;
        let x = if residual { tokens.add(&attn)? } else { attn };
        let normed = x.layer_norm(&self.norm2_gain, &self.norm2_shift, NORM_EPS)?;
        let ff = self.feed_forward(&normed, rng, training)?;
        if residual {
            x.add(&ff)
        } else {
            Ok(ff)
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("norm1_gain", &self.norm1_gain),
            ("norm1_shift", &self.norm1_shift),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_shift", &self.norm2_shift),
            ("ff1", &self.ff1),
            ("ff1_bias", &self.ff1_bias),
            ("ff2", &self.ff2),
            ("ff2_bias", &self.ff2_bias),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
    }
}

/// Configuration of the PMSA stack.
#[derive(Debug, Clone)]
pub struct PmsaConfig {
    /// Number of blocks; must equal the mask schedule length when masks
    /// are supplied.
    pub depth: usize,
    /// Patch size over the latent grid.
    pub patch: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Residual connections around attention and feed-forward units.
    pub residual: bool,
    /// Columns-only mask expansion (see [`MaskMode::ColsOnly`]).
    pub strict_caption: bool,
}

impl Default for PmsaConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            patch: 2,
            embed_dim: 32,
            heads: 1,
            dropout: 0.0,
            residual: true,
            strict_caption: false,
        }
    }
}

impl PmsaConfig {
    pub fn mask_mode(&self) -> MaskMode {
        if self.strict_caption {
            MaskMode::ColsOnly
        } else {
            MaskMode::RowsAndCols
        }
    }
}

/// Patch-embedded ViT over the latent with one attention mask per block.
#[derive(Debug)]
pub struct PmsaStack {
    pub config: PmsaConfig,
    pub channels_in: usize,
    pub channels_out: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub patch_embed: Tensor,
    pub patch_embed_bias: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<PmsaBlock>,
    pub unembed: Tensor,
    pub unembed_bias: Tensor,
}

impl PmsaStack {
    pub fn new(
        config: PmsaConfig,
        channels_in: usize,
        channels_out: usize,
        latent_h: usize,
        latent_w: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let p = config.patch;
        if p == 0 || latent_h % p != 0 || latent_w % p != 0 {
            return Err(Error::invalid(
                "pmsa_stack",
                format!("patch {p} does not divide latent {latent_h}x{latent_w}"),
            ));
        }
        if config.depth == 0 {
            return Err(Error::invalid("pmsa_stack", "zero depth"));
        }
        let tokens = (latent_h / p) * (latent_w / p);
        let in_f = channels_in * p * p;
        let out_f = channels_out * p * p;
        let d = config.embed_dim;
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(PmsaBlock::new(d, config.heads, config.dropout, rng)?);
        }
        Ok(Self {
            channels_in,
            channels_out,
            latent_h,
            latent_w,
            patch_embed: Tensor::randn_param(&[in_f, d], 1.0 / (in_f as f64).sqrt(), rng),
            patch_embed_bias: Tensor::zeros_param(&[d]),
            pos_embed: Tensor::randn_param(&[tokens, d], 0.02, rng),
            blocks,
            unembed: Tensor::randn_param(&[d, out_f], 1.0 / (d as f64).sqrt(), rng),
            unembed_bias: Tensor::zeros_param(&[out_f]),
            config,
        })
    }

    pub fn num_tokens(&self) -> usize {
        (self.latent_h / self.config.patch) * (self.latent_w / self.config.patch)
    }

    /// Attention masks for a pyramid under this stack's mask mode, one per
    /// block, coarsest first.
    pub fn masks_for(&self, pyramid: &PoseMaskPyramid) -> Result<Vec<AttnMask>> {
        if pyramid.depth() != self.config.depth {
            return Err(Error::invalid(
                "pmsa_stack",
                format!(
                    "mask schedule length {} != stack depth {}",
                    pyramid.depth(),
                    self.config.depth
                ),
            ));
        }
        let mode = self.config.mask_mode();
        pyramid
            .patch_masks
            .iter()
            .map(|pm| {
                if pm.len() != self.num_tokens() {
                    return Err(Error::shape(
                        "pmsa_stack",
                        format!(
                            "patch mask {} bits vs {} tokens",
                            pm.len(),
                            self.num_tokens()
                        ),
                    ));
                }
                Ok(build_attn_mask_mode(pm, mode))
            })
            .collect()
    }

    /// Coarse-to-fine forward: patch-embed the latent, run every block
    /// with its mask, and reassemble the feature map. `pyramid = None`
    /// runs the whole chain unmasked.
    pub fn forward(
        &self,
        z: &Tensor,
        pyramid: Option<&PoseMaskPyramid>,
        rng: &mut SeedRng,
        training: bool,
    ) -> Result<Tensor> {
        let masks = match pyramid {
            Some(p) => self.masks_for(p)?,
            None => vec![AttnMask::open(self.num_tokens()); self.config.depth],
        };
        self.forward_with_masks(z, &masks, rng, training)
    }

    pub fn forward_with_masks(
        &self,
        z: &Tensor,
        masks: &[AttnMask],
        rng: &mut SeedRng,
        training: bool,
    ) -> Result<Tensor> {
        if masks.len() != self.config.depth {
            return Err(Error::invalid(
                "pmsa_stack",
                format!("{} masks for depth {}", masks.len(), self.config.depth),
            ));
        }
        let mut tokens = z
            .patchify(self.config.patch)?
            .matmul(&self.patch_embed)?
            .add_row_broadcast(&self.patch_embed_bias)?
            .add(&self.pos_embed)?;
        for (block, mask) in self.blocks.iter().zip(masks) {
            tokens = block.forward(&tokens, mask, rng, training, self.config.residual)?;
        }
        tokens
            .matmul(&self.unembed)?
            .add_row_broadcast(&self.unembed_bias)?
            .unpatchify(
                self.channels_out,
                self.latent_h,
                self.latent_w,
                self.config.patch,
            )
    }

    /// Per-block, per-head attention weight matrices for diagnostics.
    /// Rows always sum to one.
    pub fn attention_maps(
        &self,
        z: &Tensor,
        pyramid: Option<&PoseMaskPyramid>,
    ) -> Result<Vec<Vec<Tensor>>> {
        let masks = match pyramid {
            Some(p) => self.masks_for(p)?,
            None => vec![AttnMask::open(self.num_tokens()); self.config.depth],
        };
        let mut rng = SeedRng::new(0); // dropout is inactive outside training
        let mut tokens = z
            .patchify(self.config.patch)?
            .matmul(&self.patch_embed)?
            .add_row_broadcast(&self.patch_embed_bias)?
            .add(&self.pos_embed)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for (block, mask) in self.blocks.iter().zip(&masks) {
            let normed = tokens.layer_norm(&block.norm1_gain, &block.norm1_shift, NORM_EPS)?;
            let (_, weights) = block.attention_inner(&normed, mask)?;
            maps.push(weights);
            tokens = block.forward(&tokens, mask, &mut rng, false, self.config.residual)?;
        }
        Ok(maps)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.patch_embed"), self.patch_embed.clone()),
            (
                format!("{prefix}.patch_embed_bias"),
                self.patch_embed_bias.clone(),
            ),
            (format!("{prefix}.pos_embed"), self.pos_embed.clone()),
            (format!("{prefix}.unembed"), self.unembed.clone()),
            (format!("{prefix}.unembed_bias"), self.unembed_bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("{prefix}.block{i}")));
        }
        out
    }
}
