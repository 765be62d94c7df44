use ndarray::{s, Array1, Array2, Axis};

use crate::config::ModelConfig;
use crate::masking::MaskVector;
use crate::model::forward::{gelu_grad, ForwardCache, LnCache};
use crate::model::params::{LayerParams, VitParams};
use crate::real::Real;

/// Layer-norm backward for biased variance:
/// dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), applied
/// per row, plus reductions for the scale and shift gradients.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    scale: &Array1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let d = F::of(dy.ncols() as f64);
    let dscale = (dy * &cache.xhat).sum_axis(Axis(0));
    let dshift = dy.sum_axis(Axis(0));
    let mut dx = dy * &scale.view().insert_axis(Axis(0));
    for (mut row, (xhat_row, &inv)) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows().into_iter().zip(cache.inv_std.iter()))
    {
        let m1 = row.sum() / d;
        let m2 = row
            .iter()
            .zip(xhat_row.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            / d;
        for (v, &xh) in row.iter_mut().zip(xhat_row.iter()) {
            *v = inv * (*v - m1 - xh * m2);
        }
    }
    (dx, dscale, dshift)
}

/// Softmax backward over rows: dS = A * (dA - rowsum(dA * A)).
fn softmax_backward_rows<F: Real>(da: &Array2<F>, a: &Array2<F>) -> Array2<F> {
    let inner = (da * a).sum_axis(Axis(1));
    let mut ds = da.clone();
    for (mut row, (&dot, a_row)) in ds
        .rows_mut()
        .into_iter()
        .zip(inner.iter().zip(a.rows()))
    {
        for (v, &av) in row.iter_mut().zip(a_row.iter()) {
            *v = av * (*v - dot);
        }
    }
    ds
}

fn layer_backward<F: Real>(
    dx_out: Array2<F>,
    layer: &LayerParams<F>,
    cache: &crate::model::forward::LayerCache<F>,
    gates: &[F],
    grads: &mut LayerParams<F>,
    dgates: &mut [F],
    cfg: &ModelConfig,
) -> Array2<F> {
    let d = cfg.embed_dim;
    let hn = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = F::one() / F::of(dh as f64).sqrt();

    // x_out = x_mid + MLP(LN2(x_mid)); the residual passes dx_out through.
    let dmlp = &dx_out;
    let dgelu_out = dmlp.dot(&layer.fc2_w.t());
    grads.fc2_w += &cache.gelu_out.t().dot(dmlp);
    grads.fc2_b += &dmlp.sum_axis(Axis(0));
    let mut dfc1_pre = dgelu_out;
    ndarray::Zip::from(&mut dfc1_pre)
        .and(&cache.fc1_pre)
        .for_each(|g, &x| *g *= gelu_grad(x));
    grads.fc1_w += &cache.ln2.out.t().dot(&dfc1_pre);
    grads.fc1_b += &dfc1_pre.sum_axis(Axis(0));
    let dln2_out = dfc1_pre.dot(&layer.fc1_w.t());
    let (dx_ln2, dln2_scale, dln2_shift) = layer_norm_backward(&dln2_out, &cache.ln2, &layer.ln2_scale);
    grads.ln2_scale += &dln2_scale;
    grads.ln2_shift += &dln2_shift;
    let dx_mid = dx_out + dx_ln2;

    // x_mid = x_in + Proj(gated); the residual passes dx_mid through.
    let dmsa = &dx_mid;
    grads.proj_w += &cache.gated.t().dot(dmsa);
    grads.proj_b += &dmsa.sum_axis(Axis(0));
    let dgated = dmsa.dot(&layer.proj_w.t());

    let t = dx_mid.nrows();
    let mut dqkv = Array2::zeros((t, 3 * d));
    for h in 0..hn {
        let dgated_h = dgated.slice(s![.., h * dh..(h + 1) * dh]);
        let ctx = cache.head_out.slice(s![h, .., ..]);
        dgates[h] += ndarray::Zip::from(&dgated_h)
                .and(&ctx)
                .fold(F::zero(), |acc, &a, &b| acc + a * b);
        let dctx = dgated_h.to_owned() * gates[h];

        let a = cache.attn.slice(s![h, .., ..]).to_owned();
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);

        let da = dctx.dot(&v.t());
        let dv = a.t().dot(&dctx);
        let mut ds = softmax_backward_rows(&da, &a);
        ds.mapv_inplace(|x| x * scale);
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);

        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
        dqkv
            .slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&dv);
    }

    grads.qkv_w += &cache.ln1.out.t().dot(&dqkv);
    grads.qkv_b += &dqkv.sum_axis(Axis(0));
    let dln1_out = dqkv.dot(&layer.qkv_w.t());
    let (dx_ln1, dln1_scale, dln1_shift) = layer_norm_backward(&dln1_out, &cache.ln1, &layer.ln1_scale);
    grads.ln1_scale += &dln1_scale;
    grads.ln1_shift += &dln1_shift;

    dx_mid + dx_ln1
}

/// Backpropagates a loss gradient on the logits through the whole encoder.
/// Returns parameter gradients and the gradient w.r.t. each head gate.
pub(crate) fn backward<F: Real>(
    params: &VitParams<F>,
    cache: &ForwardCache<F>,
    gates: &Array2<F>,
    mask: &MaskVector,
    dlogits: &Array1<F>,
    cfg: &ModelConfig,
) -> (VitParams<F>, Array2<F>) {
    let c = cfg.num_classes;
    let t = cache.final_seq.nrows();
    let mut grads = params.zeros_like();
    let mut dgates = Array2::zeros((cfg.num_layers, cfg.num_heads));

    // Per-class head: logit_c = dot(cls_c, w_c) + b_c on the masked
    // embedding; a masked class blocks both the token gradient and the
    // weight gradient (its embedding is exactly zero).
    let mut dx = Array2::zeros((t, cfg.embed_dim));
    for cls in 0..c {
        grads.head_b[cls] = dlogits[cls];
        if mask.is_masked(cls) {
            continue;
        }
        let emb = cache.final_seq.row(cls);
        grads
            .head_w
            .row_mut(cls)
            .assign(&(&emb * dlogits[cls]));
        dx.row_mut(cls).assign(&(&params.head_w.row(cls) * dlogits[cls]));
    }

    for (layer_idx, (layer, layer_cache)) in params
        .layers
        .iter()
        .zip(cache.layers.iter())
        .enumerate()
        .rev()
    {
        let gate_row = gates.row(layer_idx);
        let gate_row = gate_row.as_slice().expect("gate rows are contiguous");
        let dgate_row = dgates.row_mut(layer_idx).into_slice().expect("contiguous");
        dx = layer_backward(
            dx,
            layer,
            layer_cache,
            gate_row,
            &mut grads.layers[layer_idx],
            dgate_row,
            cfg,
        );
    }

    grads.cls_tokens.assign(&dx.slice(s![..c, ..]));
    let dpatch = dx.slice(s![c..c + cfg.num_patches(), ..]);
    grads.pos_embed.assign(&dpatch);
    grads.patch_proj = cache.flat_patches.t().dot(&dpatch);
    if let Some(dreg) = &mut grads.reg_token {
        dreg.assign(&dx.row(t - 1));
    }

    (grads, dgates)
}
