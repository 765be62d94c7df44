use ndarray::{Array1, Array2};
use rand::Rng;

use crate::config::ModelConfig;
use crate::real::Real;

/// Parameter group, used to decide which tensors receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// 2D projection matrices; the only group that is weight-decayed.
    Weight,
    Bias,
    /// Learned token and positional embeddings.
    Token,
    /// Layer-norm scales and shifts.
    Norm,
    /// Gate logits.
    GateLogit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    /// (embed_dim, 3 * embed_dim), columns ordered [query | key | value],
    /// each split into per-head blocks of head_dim columns.
    pub qkv_w: Array2<F>,
    pub qkv_b: Array1<F>,
    /// Output projection applied to the gated head concatenation.
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
    pub fc1_w: Array2<F>,
    pub fc1_b: Array1<F>,
    pub fc2_w: Array2<F>,
    pub fc2_b: Array1<F>,
}

/// All learnable tensors of the encoder. The same struct doubles as the
/// gradient container so traversal order is shared by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<F> {
    /// (patch_dim, embed_dim) patch projection; intentionally bias-free, the
    /// positional embedding absorbs any offset.
    pub patch_proj: Array2<F>,
    /// (num_patches, embed_dim), added to patch tokens only.
    pub pos_embed: Array2<F>,
    /// (num_classes, embed_dim), one learned [CLS] token per class.
    pub cls_tokens: Array2<F>,
    /// Optional register token appended after the patch tokens.
    pub reg_token: Option<Array1<F>>,
    pub layers: Vec<LayerParams<F>>,
    /// (num_classes, embed_dim); row c scores only class c's token.
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

/// Draws from N(0, std^2) truncated to [-2 std, 2 std] by rejection.
fn truncated_normal<F: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> F {
    loop {
        let v = F::standard_normal(rng);
        if v.as_f64().abs() <= 2.0 {
            return v * F::of(std);
        }
    }
}

fn init_matrix<F: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || truncated_normal(rng, std))
}

pub const INIT_STD: f64 = 0.02;

impl<F: Real> VitParams<F> {
    /// Truncated-normal initialization (std 0.02) for projections and tokens,
    /// zeros for biases and shifts, ones for norm scales.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_scale: Array1::ones(d),
                ln1_shift: Array1::zeros(d),
                qkv_w: init_matrix(rng, d, 3 * d, INIT_STD),
                qkv_b: Array1::zeros(3 * d),
                proj_w: init_matrix(rng, d, d, INIT_STD),
                proj_b: Array1::zeros(d),
                ln2_scale: Array1::ones(d),
                ln2_shift: Array1::zeros(d),
                fc1_w: init_matrix(rng, d, cfg.mlp_dim(), INIT_STD),
                fc1_b: Array1::zeros(cfg.mlp_dim()),
                fc2_w: init_matrix(rng, cfg.mlp_dim(), d, INIT_STD),
                fc2_b: Array1::zeros(d),
            })
            .collect();
        VitParams {
            patch_proj: init_matrix(rng, cfg.patch_dim(), d, INIT_STD),
            pos_embed: init_matrix(rng, cfg.num_patches(), d, INIT_STD),
            cls_tokens: init_matrix(rng, cfg.num_classes, d, INIT_STD),
            reg_token: cfg
                .use_reg_token
                .then(|| Array1::from_shape_simple_fn(d, || truncated_normal(rng, INIT_STD))),
            layers,
            head_w: init_matrix(rng, cfg.num_classes, d, INIT_STD),
            head_b: Array1::zeros(cfg.num_classes),
        }
    }

    /// Zero tensors with the same shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        VitParams {
            patch_proj: Array2::zeros(self.patch_proj.raw_dim()),
            pos_embed: Array2::zeros(self.pos_embed.raw_dim()),
            cls_tokens: Array2::zeros(self.cls_tokens.raw_dim()),
            reg_token: self.reg_token.as_ref().map(|t| Array1::zeros(t.raw_dim())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_scale: Array1::zeros(l.ln1_scale.raw_dim()),
                    ln1_shift: Array1::zeros(l.ln1_shift.raw_dim()),
                    qkv_w: Array2::zeros(l.qkv_w.raw_dim()),
                    qkv_b: Array1::zeros(l.qkv_b.raw_dim()),
                    proj_w: Array2::zeros(l.proj_w.raw_dim()),
                    proj_b: Array1::zeros(l.proj_b.raw_dim()),
                    ln2_scale: Array1::zeros(l.ln2_scale.raw_dim()),
                    ln2_shift: Array1::zeros(l.ln2_shift.raw_dim()),
                    fc1_w: Array2::zeros(l.fc1_w.raw_dim()),
                    fc1_b: Array1::zeros(l.fc1_b.raw_dim()),
                    fc2_w: Array2::zeros(l.fc2_w.raw_dim()),
                    fc2_b: Array1::zeros(l.fc2_b.raw_dim()),
                })
                .collect(),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.raw_dim()),
        }
    }

    /// Canonical traversal of all tensors as flat slices. Optimizer state,
    /// checkpoints and finite-difference checks all rely on this order being
    /// stable.
    pub fn fields(&self) -> Vec<(ParamGroup, &[F])> {
        use ParamGroup::*;
        let mut v: Vec<(ParamGroup, &[F])> = Vec::new();
        v.push((Weight, self.patch_proj.as_slice().unwrap()));
        v.push((Token, self.pos_embed.as_slice().unwrap()));
        v.push((Token, self.cls_tokens.as_slice().unwrap()));
        if let Some(reg) = &self.reg_token {
            v.push((Token, reg.as_slice().unwrap()));
        }
        for l in &self.layers {
            v.push((Norm, l.ln1_scale.as_slice().unwrap()));
            v.push((Norm, l.ln1_shift.as_slice().unwrap()));
            v.push((Weight, l.qkv_w.as_slice().unwrap()));
            v.push((Bias, l.qkv_b.as_slice().unwrap()));
            v.push((Weight, l.proj_w.as_slice().unwrap()));
            v.push((Bias, l.proj_b.as_slice().unwrap()));
            v.push((Norm, l.ln2_scale.as_slice().unwrap()));
            v.push((Norm, l.ln2_shift.as_slice().unwrap()));
            v.push((Weight, l.fc1_w.as_slice().unwrap()));
            v.push((Bias, l.fc1_b.as_slice().unwrap()));
            v.push((Weight, l.fc2_w.as_slice().unwrap()));
            v.push((Bias, l.fc2_b.as_slice().unwrap()));
        }
        v.push((Weight, self.head_w.as_slice().unwrap()));
        v.push((Bias, self.head_b.as_slice().unwrap()));
        v
    }

    /// Mutable variant of [`fields`](Self::fields); must visit the same
    /// tensors in the same order.
    pub fn fields_mut(&mut self) -> Vec<(ParamGroup, &mut [F])> {
        use ParamGroup::*;
        let mut v: Vec<(ParamGroup, &mut [F])> = Vec::new();
        v.push((Weight, self.patch_proj.as_slice_mut().unwrap()));
        v.push((Token, self.pos_embed.as_slice_mut().unwrap()));
        v.push((Token, self.cls_tokens.as_slice_mut().unwrap()));
        if let Some(reg) = &mut self.reg_token {
            v.push((Token, reg.as_slice_mut().unwrap()));
        }
        for l in &mut self.layers {
            v.push((Norm, l.ln1_scale.as_slice_mut().unwrap()));
            v.push((Norm, l.ln1_shift.as_slice_mut().unwrap()));
            v.push((Weight, l.qkv_w.as_slice_mut().unwrap()));
            v.push((Bias, l.qkv_b.as_slice_mut().unwrap()));
            v.push((Weight, l.proj_w.as_slice_mut().unwrap()));
            v.push((Bias, l.proj_b.as_slice_mut().unwrap()));
            v.push((Norm, l.ln2_scale.as_slice_mut().unwrap()));
            v.push((Norm, l.ln2_shift.as_slice_mut().unwrap()));
            v.push((Weight, l.fc1_w.as_slice_mut().unwrap()));
            v.push((Bias, l.fc1_b.as_slice_mut().unwrap()));
            v.push((Weight, l.fc2_w.as_slice_mut().unwrap()));
            v.push((Bias, l.fc2_b.as_slice_mut().unwrap()));
        }
        v.push((Weight, self.head_w.as_slice_mut().unwrap()));
        v.push((Bias, self.head_b.as_slice_mut().unwrap()));
        v
    }

    pub fn num_params(&self) -> usize {
        self.fields().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, s) in self.fields() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Writes a flat vector (in [`flatten`](Self::flatten) order) back into
    /// the tensors. Lengths must match exactly.
    pub fn assign_flat(&mut self, flat: &[F]) {
        let mut offset = 0;
        for (_, s) in self.fields_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// In-place scaled accumulation: self += other * scale.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let mut dst = self.fields_mut();
        let src = other.fields();
        assert_eq!(dst.len(), src.len());
        for ((_, d), (_, s)) in dst.iter_mut().zip(src.iter()) {
            assert_eq!(d.len(), s.len());
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                *dv += *sv * scale;
            }
        }
    }
}
