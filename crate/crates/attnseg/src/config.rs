use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn d_image_size() -> usize {
    64
}
fn d_patch_size() -> usize {
    8
}
fn d_num_classes() -> usize {
    3
}
fn d_embed_dim() -> usize {
    64
}
fn d_num_layers() -> usize {
    4
}
fn d_num_heads() -> usize {
    4
}
fn d_mlp_ratio() -> f64 {
    4.0
}
/// True for finite, strictly positive values; NaN and infinities fail.
fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}
/// True for finite, non-negative values; NaN and infinities fail.
fn non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

/// Classification head layout. Single variant today; the enum keeps the
/// config format forward compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    PerClassLinear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub use_reg_token: bool,
    pub head_mode: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: d_image_size(),
            patch_size: d_patch_size(),
            num_classes: d_num_classes(),
            embed_dim: d_embed_dim(),
            num_layers: d_num_layers(),
            num_heads: d_num_heads(),
            mlp_ratio: d_mlp_ratio(),
            use_reg_token: true,
            head_mode: HeadMode::PerClassLinear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if !positive(self.mlp_ratio) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Full sequence length: class tokens, then patches, then the register
    /// token if enabled.
    pub fn seq_len(&self) -> usize {
        self.num_classes + self.num_patches() + usize::from(self.use_reg_token)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened patch length (patch_size^2 * channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Column range of the patch tokens inside the sequence.
    pub fn patch_range(&self) -> std::ops::Range<usize> {
        self.num_classes..self.num_classes + self.num_patches()
    }
}

fn d_beta() -> f64 {
    2.0 / 3.0
}
fn d_gamma() -> f64 {
    -0.1
}
fn d_zeta() -> f64 {
    1.1
}
fn d_log_alpha_init() -> f64 {
    2.0
}
fn d_prune_threshold() -> f64 {
    0.05
}

/// Stretched hard-concrete gate distribution constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub log_alpha_init: f64,
    pub prune_threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            beta: d_beta(),
            gamma: d_gamma(),
            zeta: d_zeta(),
            log_alpha_init: d_log_alpha_init(),
            prune_threshold: d_prune_threshold(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !positive(self.beta) {
            return Err(Error::Config("gate beta must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma < 0.0)
            || !(self.zeta.is_finite() && self.zeta > 1.0)
        {
            return Err(Error::Config(
                "gate stretch requires gamma < 0 and zeta > 1 so both endpoints are reachable"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Config("prune_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn d_epochs() -> usize {
    20
}
fn d_batch_size() -> usize {
    32
}
fn d_lr() -> f64 {
    3e-4
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_mask_ratio() -> f64 {
    0.5
}
fn d_lambda() -> f64 {
    0.01
}
fn d_val_fraction() -> f64 {
    0.1
}
fn d_gate_lr_mult() -> f64 {
    50.0
}
fn d_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of masking each class token whose class is absent from the
    /// image labels. Label tokens are never masked.
    pub mask_ratio: f64,
    /// Keep masked class logits in the classification loss (their embedding
    /// is zeroed, so the logit degrades to the head bias).
    pub masked_in_loss: bool,
    /// Weight of the expected-L0 gate penalty in the total loss.
    pub lambda: f64,
    /// Learning-rate multiplier for the gate logits. Gate logits must travel
    /// several units to saturate a gate while weights move by thousandths, so
    /// a shared step size leaves the sparsity penalty inert.
    pub gate_lr_mult: f64,
    pub seed: u64,
    /// Fraction of the training set held out for validation when no separate
    /// validation dataset is given. The tail of the dataset is used.
    pub val_fraction: f64,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
    /// Threshold on sigmoid(logit) above which a class counts as predicted.
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch_size(),
            lr: d_lr(),
            weight_decay: d_weight_decay(),
            mask_ratio: d_mask_ratio(),
            masked_in_loss: true,
            lambda: d_lambda(),
            gate_lr_mult: d_gate_lr_mult(),
            seed: 0,
            val_fraction: d_val_fraction(),
            eval_every: d_eval_every(),
            decision_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !positive(self.lr) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1]".into()));
        }
        if !non_negative(self.lambda) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !positive(self.gate_lr_mult) {
            return Err(Error::Config("gate_lr_mult must be positive and finite".into()));
        }
        if !non_negative(self.weight_decay) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.decision_threshold) {
            return Err(Error::Config("decision_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Unassigned pixels are filled from neighboring assignments.
    #[default]
    Fill,
    /// Unassigned pixels keep a dedicated background value.
    BackgroundClass,
}

fn d_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoMaskConfig {
    /// Binarization threshold applied to min-max normalized attention.
    pub tau: f64,
    /// Encoder layer whose attention is used; None means the final layer.
    pub attn_layer: Option<usize>,
    pub upsample: Upsample,
    pub background_mode: BackgroundMode,
}

impl Default for PseudoMaskConfig {
    fn default() -> Self {
        PseudoMaskConfig {
            tau: d_tau(),
            attn_layer: None,
            upsample: Upsample::Nearest,
            background_mode: BackgroundMode::Fill,
        }
    }
}

impl PseudoMaskConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("tau must lie in [0, 1]".into()));
        }
        if let Some(layer) = self.attn_layer {
            if layer >= num_layers {
                return Err(Error::Config(format!(
                    "attn_layer {} out of range for {} layers",
                    layer, num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Top-level configuration for a training run, as written by the CLI into
/// config.resolved.json.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub gates: GateConfig,
    pub train: TrainConfig,
    pub pseudo_mask: PseudoMaskConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gates.validate()?;
        self.train.validate()?;
        self.pseudo_mask.validate(self.model.num_layers)?;
        Ok(())
    }
}

fn d_num_images() -> usize {
    200
}
fn d_min_shapes() -> usize {
    1
}
fn d_max_shapes() -> usize {
    3
}
fn d_min_area_fraction() -> f64 {
    0.05
}
fn d_noise_std() -> f64 {
    0.05
}

/// Configuration for the synthetic shapes dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Every label must keep at least this fraction of the image area visible
    /// after occlusion; the generator retries layouts until this holds.
    pub min_area_fraction: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_images: d_num_images(),
            num_classes: d_num_classes(),
            image_size: d_image_size(),
            seed: 0,
            min_shapes: d_min_shapes(),
            max_shapes: d_max_shapes(),
            min_area_fraction: d_min_area_fraction(),
            noise_std: d_noise_std(),
        }
    }
}

/// Shape classes available to the generator; class c in a dataset renders as
/// kind c with a class-specific hue.
pub const NUM_SHAPE_KINDS: usize = 6;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Input("num_images must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > NUM_SHAPE_KINDS {
            return Err(Error::Input(format!(
                "num_classes must lie in 1..={NUM_SHAPE_KINDS} (one shape kind per class), got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Input("image_size must be at least 16".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Input("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.max_shapes > self.num_classes {
            return Err(Error::Input(
                "max_shapes cannot exceed num_classes (classes are distinct per image)".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.min_area_fraction) {
            return Err(Error::Input("min_area_fraction must lie in [0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return Err(Error::Input("noise_std must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
