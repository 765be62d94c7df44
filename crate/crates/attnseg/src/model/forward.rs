use ndarray::{s, Array1, Array2, Array3};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::{apply_output_mask, MaskVector};
use crate::model::params::VitParams;
use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

/// sqrt(2 / pi), the tanh-GELU constant.
const GELU_K: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

pub fn gelu<F: Real>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

/// d gelu / dx for the tanh approximation.
pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    let dt = (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x);
    half * (F::one() + t) + half * x * dt
}

pub(crate) struct LnCache<F> {
    /// Normalized activations before scale/shift, (T, D).
    pub xhat: Array2<F>,
    /// Per-row 1 / sqrt(var + eps).
    pub inv_std: Array1<F>,
    /// Output after scale/shift, kept for downstream weight gradients.
    pub out: Array2<F>,
}

/// Row-wise layer norm with learned scale and shift.
pub(crate) fn layer_norm<F: Real>(
    x: &Array2<F>,
    scale: &Array1<F>,
    shift: &Array1<F>,
) -> LnCache<F> {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) / d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let out = &xhat * &scale.view().insert_axis(ndarray::Axis(0)) + shift;
    LnCache { xhat, inv_std, out }
}

/// In-place numerically stable softmax over the rows of a square score
/// matrix.
pub(crate) fn softmax_rows<F: Real>(scores: &mut Array2<F>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) struct LayerCache<F> {
    pub ln1: LnCache<F>,
    /// (T, 3D) concatenated query/key/value activations.
    pub qkv: Array2<F>,
    /// (H, T, T) post-softmax attention.
    pub attn: Array3<F>,
    /// (H, T, head_dim) per-head context before gating.
    pub head_out: Array3<F>,
    /// (T, D) gated concatenation fed to the output projection.
    pub gated: Array2<F>,
    pub ln2: LnCache<F>,
    /// (T, mlp_dim) pre-activation of the first MLP linear.
    pub fc1_pre: Array2<F>,
    pub gelu_out: Array2<F>,
}

pub(crate) struct ForwardCache<F> {
    /// (num_patches, patch_dim) row-major flattened patches.
    pub flat_patches: Array2<F>,
    pub layers: Vec<LayerCache<F>>,
    /// Final sequence, (T, D); no trailing layer norm is applied.
    pub final_seq: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// One logit per class from the per-class linear head.
    pub logits: Array1<F>,
    /// Class-token embeddings after output masking, (num_classes, embed_dim).
    pub cls_embeddings: Array2<F>,
    /// Per-layer (num_heads, T, T) attention maps.
    pub attention: Vec<Array3<F>>,
    pub reg_embedding: Option<Array1<F>>,
}

/// Flattens image patches in row-major patch order; within a patch, pixels
/// are row-major with interleaved channels.
pub(crate) fn flatten_patches<F: Real>(image: &Array3<F>, cfg: &ModelConfig) -> Result<Array2<F>> {
    let (h, w, ch) = image.dim();
    if h != cfg.image_size || w != cfg.image_size || ch != 3 {
        return Err(Error::Input(format!(
            "image shape ({h}, {w}, {ch}) does not match configured ({size}, {size}, 3)",
            size = cfg.image_size
        )));
    }
    let g = cfg.grid_size();
    let p = cfg.patch_size;
    let mut flat = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for gy in 0..g {
        for gx in 0..g {
            let row = gy * g + gx;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        flat[(row, (py * p + px) * 3 + c)] = image[(gy * p + py, gx * p + px, c)];
                    }
                }
            }
        }
    }
    Ok(flat)
}

/// Projects flattened patches and adds positional embeddings. The projection
/// carries no bias; the positional table absorbs any constant offset.
pub(crate) fn embed_patches<F: Real>(flat: &Array2<F>, params: &VitParams<F>) -> Array2<F> {
    flat.dot(&params.patch_proj) + &params.pos_embed
}

/// Assembles the token sequence: class tokens, patch tokens, then the
/// register token if present.
pub(crate) fn build_sequence<F: Real>(patch_tokens: &Array2<F>, params: &VitParams<F>) -> Array2<F> {
    let c = params.cls_tokens.nrows();
    let n = patch_tokens.nrows();
    let d = patch_tokens.ncols();
    let t = c + n + usize::from(params.reg_token.is_some());
    let mut seq = Array2::zeros((t, d));
    seq.slice_mut(s![..c, ..]).assign(&params.cls_tokens);
    seq.slice_mut(s![c..c + n, ..]).assign(patch_tokens);
    if let Some(reg) = &params.reg_token {
        seq.row_mut(t - 1).assign(reg);
    }
    seq
}

/// One pre-norm encoder block with per-head gated attention:
/// x <- x + Proj(concat_h(g_h * Attn_h(LN(x)))); x <- x + MLP(LN(x)).
pub(crate) fn layer_forward<F: Real>(
    x: Array2<F>,
    layer: &crate::model::params::LayerParams<F>,
    gates: &[F],
    cfg: &ModelConfig,
) -> (Array2<F>, LayerCache<F>) {
    let t = x.nrows();
    let d = cfg.embed_dim;
    let hn = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = F::one() / F::of(dh as f64).sqrt();

    let ln1 = layer_norm(&x, &layer.ln1_scale, &layer.ln1_shift);
    let qkv = ln1.out.dot(&layer.qkv_w) + &layer.qkv_b;

    let mut attn = Array3::zeros((hn, t, t));
    let mut head_out = Array3::zeros((hn, t, dh));
    let mut gated = Array2::zeros((t, d));
    for (h, &gate) in gates.iter().enumerate() {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows(&mut scores);
        let ctx = scores.dot(&v);
        gated
            .slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&(&ctx * gate));
        attn.slice_mut(s![h, .., ..]).assign(&scores);
        head_out.slice_mut(s![h, .., ..]).assign(&ctx);
    }

    let msa = gated.dot(&layer.proj_w) + &layer.proj_b;
    let x_mid = &x + &msa;

    let ln2 = layer_norm(&x_mid, &layer.ln2_scale, &layer.ln2_shift);
    let fc1_pre = ln2.out.dot(&layer.fc1_w) + &layer.fc1_b;
    let gelu_out = fc1_pre.mapv(gelu);
    let mlp = gelu_out.dot(&layer.fc2_w) + &layer.fc2_b;
    let x_out = &x_mid + &mlp;

    (x_out, LayerCache { ln1, qkv, attn, head_out, gated, ln2, fc1_pre, gelu_out })
}

/// Full forward pass keeping every intermediate needed for backprop.
/// `gates` is (num_layers, num_heads); the mask zeroes class-token output
/// embeddings before the head, so a masked class contributes only its bias.
pub(crate) fn forward_cached<F: Real>(
    image: &Array3<F>,
    params: &VitParams<F>,
    gates: &Array2<F>,
    mask: &MaskVector,
    cfg: &ModelConfig,
) -> Result<(Array1<F>, Array2<F>, ForwardCache<F>)> {
    debug_assert_eq!(gates.dim(), (cfg.num_layers, cfg.num_heads));
    debug_assert_eq!(mask.len(), cfg.num_classes);
    let flat = flatten_patches(image, cfg)?;
    let patch_tokens = embed_patches(&flat, params);
    let mut x = build_sequence(&patch_tokens, params);

    let mut layer_caches = Vec::with_capacity(cfg.num_layers);
    for (layer, gate_row) in params.layers.iter().zip(gates.rows()) {
        let gate_row = gate_row.as_slice().expect("gate rows are contiguous");
        let (x_next, cache) = layer_forward(x, layer, gate_row, cfg);
        x = x_next;
        layer_caches.push(cache);
    }

    let mut cls = x.slice(s![..cfg.num_classes, ..]).to_owned();
    apply_output_mask(&mut cls, mask);
    let logits = Array1::from_shape_fn(cfg.num_classes, |c| {
        cls.row(c).dot(&params.head_w.row(c)) + params.head_b[c]
    });

    let cache = ForwardCache { flat_patches: flat, layers: layer_caches, final_seq: x };
    Ok((logits, cls, cache))
}

/// Forward pass for inference and inspection; returns logits, masked class
/// embeddings, all attention maps and the register embedding.
pub fn encoder_forward<F: Real>(
    image: &Array3<F>,
    params: &VitParams<F>,
    gates: &Array2<F>,
    mask: &MaskVector,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<F>> {
    let (logits, cls_embeddings, cache) = forward_cached(image, params, gates, mask, cfg)?;
    let reg_embedding = params
        .reg_token
        .as_ref()
        .map(|_| cache.final_seq.row(cache.final_seq.nrows() - 1).to_owned());
    let attention = cache.layers.into_iter().map(|l| l.attn).collect();
    Ok(ForwardOutput { logits, cls_embeddings, attention, reg_embedding })
}
