//! Hand-written reverse pass through heads, encoder layers and embeddings.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{
    classification_sum_grad, classifier_head_forward, forward, gelu_grad, mlm_head_forward, mlm_loss_sum_grad,
    EncoderLayerParams, LayerActivations, LayerNormCache, ModelParams, ParamGroup, Scalar,
};
use crate::sequence::{LabeledBatch, MaskedBatch, TokenBatch};

/// The set of parameter groups a stage may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamScope(Vec<ParamGroup>);

impl ParamScope {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        ParamScope(groups.into_iter().collect())
    }

    pub fn all() -> Self {
        Self::new([
            ParamGroup::Embedding,
            ParamGroup::Encoder,
            ParamGroup::MlmHead,
            ParamGroup::Classifier,
        ])
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        self.0.contains(&group)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.0
    }

    fn reaches_encoder(&self) -> bool {
        self.contains(ParamGroup::Encoder) || self.contains(ParamGroup::Embedding)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainingBatch<'a> {
    Masked(&'a MaskedBatch),
    Labeled(&'a LabeledBatch),
}

impl TrainingBatch<'_> {
    pub fn inputs(&self) -> &TokenBatch {
        match self {
            TrainingBatch::Masked(b) => &b.inputs,
            TrainingBatch::Labeled(b) => &b.inputs,
        }
    }

    /// Number of terms the mean loss averages over.
    pub fn loss_terms(&self) -> usize {
        match self {
            TrainingBatch::Masked(b) => b.selected_count() * b.inputs.features,
            TrainingBatch::Labeled(b) => b.inputs.attention.iter().filter(|&&a| a).count(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Mean loss of the batch.
    pub loss: T,
    pub grads: ModelParams<T>,
}

/// Loss and exact gradients of the batch's mean loss. Tensors outside
/// `scope` receive zero gradient.
pub fn backward<T: Scalar>(params: &ModelParams<T>, batch: TrainingBatch<'_>, scope: &ParamScope) -> Result<Gradients<T>> {
    let terms = batch.loss_terms();
    if terms == 0 {
        if let TrainingBatch::Labeled(_) = batch {
            return Err(Error::Precondition("no non-PAD positions to score".into()));
        }
        return Ok(Gradients {
            loss: T::zero(),
            grads: params.zeros_like(),
        });
    }
    let scale = T::one() / T::from_usize(terms).unwrap();
    let mut grads = params.zeros_like();
    let sum = accumulate_gradients(params, batch, scope, scale, &mut grads)?;
    Ok(Gradients {
        loss: sum * scale,
        grads,
    })
}

/// Adds `scale · ∇(summed loss)` of `batch` into `grads` and returns the
/// summed loss. Used directly for micro-batching a large batch.
pub fn accumulate_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: TrainingBatch<'_>,
    scope: &ParamScope,
    scale: T,
    grads: &mut ModelParams<T>,
) -> Result<T> {
    let act = forward(params, batch.inputs())?;
    let hidden = act.hidden();
    let need_hidden = scope.reaches_encoder();
    let mut d_hidden: Array2<T> = Array2::zeros(hidden.raw_dim());

    let loss_sum = match batch {
        TrainingBatch::Masked(mb) => {
            let logits = mlm_head_forward(params, hidden);
            let (sum, d_logits) = mlm_loss_sum_grad(&logits, &mb.targets, &mb.selection, scale)?;
            for (f, dl) in d_logits.iter().enumerate() {
                if scope.contains(ParamGroup::MlmHead) {
                    grads.mlm_weights[f] += &hidden.t().dot(dl);
                    grads.mlm_biases[f] += &dl.sum_axis(Axis(0));
                }
                if need_hidden {
                    d_hidden += &dl.dot(&params.mlm_weights[f].t());
                }
            }
            sum
        }
        TrainingBatch::Labeled(lb) => {
            let out = classifier_head_forward(params, hidden);
            let (sum, dl) = classification_sum_grad(&out.logits, &lb.labels, &lb.inputs.attention, scale);
            if scope.contains(ParamGroup::Classifier) {
                grads.classifier_weight += &hidden.t().dot(&dl);
                grads.classifier_bias += &dl.sum_axis(Axis(0));
            }
            if need_hidden {
                d_hidden = dl.dot(&params.classifier_weight.t());
            }
            sum
        }
    };

    if need_hidden {
        let cfg = &params.config;
        let mut d_x = d_hidden;
        let mut layer_grads: Vec<EncoderLayerParams<T>> = Vec::with_capacity(params.layers.len());
        for (lp, la) in params.layers.iter().zip(&act.layers).rev() {
            let mut g = zero_layer_like(lp);
            d_x = layer_backward(
                lp,
                la,
                d_x,
                act.batch_size,
                act.seq_len,
                cfg.head_count,
                &mut g,
            );
            layer_grads.push(g);
        }
        layer_grads.reverse();
        if scope.contains(ParamGroup::Encoder) {
            for (dst, src) in grads.layers.iter_mut().zip(layer_grads) {
                add_layer(dst, &src);
            }
        }
        if scope.contains(ParamGroup::Embedding) {
            let d = cfg.per_feature_dim;
            let inputs = batch.inputs();
            for (pos, row) in d_x.axis_iter(Axis(0)).enumerate() {
                for (f, &token) in inputs.flow(pos).iter().enumerate() {
                    let mut dst = grads.embeddings[f].row_mut(token as usize);
                    dst += &row.slice(s![f * d..(f + 1) * d]);
                }
            }
        }
    }

    for t in grads.tensors() {
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFault(format!("gradient of {}", t.name)));
        }
    }
    if !loss_sum.is_finite() {
        return Err(Error::NumericalFault("loss".into()));
    }
    Ok(loss_sum)
}

fn zero_layer_like<T: Scalar>(lp: &EncoderLayerParams<T>) -> EncoderLayerParams<T> {
    EncoderLayerParams {
        query: Array2::zeros(lp.query.raw_dim()),
        key: Array2::zeros(lp.key.raw_dim()),
        value: Array2::zeros(lp.value.raw_dim()),
        output: Array2::zeros(lp.output.raw_dim()),
        attn_norm_gain: Array1::zeros(lp.attn_norm_gain.raw_dim()),
        attn_norm_bias: Array1::zeros(lp.attn_norm_bias.raw_dim()),
        ffn_in: Array2::zeros(lp.ffn_in.raw_dim()),
        ffn_in_bias: Array1::zeros(lp.ffn_in_bias.raw_dim()),
        ffn_out: Array2::zeros(lp.ffn_out.raw_dim()),
        ffn_out_bias: Array1::zeros(lp.ffn_out_bias.raw_dim()),
        ffn_norm_gain: Array1::zeros(lp.ffn_norm_gain.raw_dim()),
        ffn_norm_bias: Array1::zeros(lp.ffn_norm_bias.raw_dim()),
    }
}

fn add_layer<T: Scalar>(dst: &mut EncoderLayerParams<T>, src: &EncoderLayerParams<T>) {
    dst.query += &src.query;
    dst.key += &src.key;
    dst.value += &src.value;
    dst.output += &src.output;
    dst.attn_norm_gain += &src.attn_norm_gain;
    dst.attn_norm_bias += &src.attn_norm_bias;
    dst.ffn_in += &src.ffn_in;
    dst.ffn_in_bias += &src.ffn_in_bias;
    dst.ffn_out += &src.ffn_out;
    dst.ffn_out_bias += &src.ffn_out_bias;
    dst.ffn_norm_gain += &src.ffn_norm_gain;
    dst.ffn_norm_bias += &src.ffn_norm_bias;
}

fn layer_norm_backward<T: Scalar>(
    d_out: &Array2<T>,
    cache: &LayerNormCache<T>,
    gain: &Array1<T>,
    d_gain: &mut Array1<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    *d_gain += &(d_out * &cache.normalized).sum_axis(Axis(0));
    *d_bias += &d_out.sum_axis(Axis(0));
    let width = T::from_usize(d_out.ncols()).unwrap();
    let mut d_in = d_out * gain;
    for ((mut row, xhat), &inv_std) in d_in
        .axis_iter_mut(Axis(0))
        .zip(cache.normalized.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.iter().copied().sum::<T>() / width;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / width;
        for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
            *v = inv_std * (*v - mean_d - xh * mean_dx);
        }
    }
    d_in
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Scalar>(
    lp: &EncoderLayerParams<T>,
    la: &LayerActivations<T>,
    d_out: Array2<T>,
    batch_size: usize,
    seq_len: usize,
    heads: usize,
    g: &mut EncoderLayerParams<T>,
) -> Array2<T> {
    let d_res2 = layer_norm_backward(&d_out, &la.ffn_norm, &lp.ffn_norm_gain, &mut g.ffn_norm_gain, &mut g.ffn_norm_bias);

    g.ffn_out += &la.ffn_act.t().dot(&d_res2);
    g.ffn_out_bias += &d_res2.sum_axis(Axis(0));
    let d_act = d_res2.dot(&lp.ffn_out.t());
    let d_pre = d_act * &la.ffn_pre.mapv(gelu_grad);
    g.ffn_in += &la.attn_out.t().dot(&d_pre);
    g.ffn_in_bias += &d_pre.sum_axis(Axis(0));
    let d_attn_out = d_res2 + &d_pre.dot(&lp.ffn_in.t());

    let d_res1 = layer_norm_backward(
        &d_attn_out,
        &la.attn_norm,
        &lp.attn_norm_gain,
        &mut g.attn_norm_gain,
        &mut g.attn_norm_bias,
    );
    g.output += &la.context.t().dot(&d_res1);
    let d_context = d_res1.dot(&lp.output.t());

    let model_dim = lp.query.ncols();
    let dh = model_dim / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let n = d_context.nrows();
    let mut d_query = Array2::zeros((n, model_dim));
    let mut d_key = Array2::zeros((n, model_dim));
    let mut d_value = Array2::zeros((n, model_dim));
    for b in 0..batch_size {
        let rows = b * seq_len..(b + 1) * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let weights = &la.attention[b * heads + h];
            let d_ctx = d_context.slice(s![rows.clone(), cols.clone()]);
            let v = la.value.slice(s![rows.clone(), cols.clone()]);
            let q = la.query.slice(s![rows.clone(), cols.clone()]);
            let k = la.key.slice(s![rows.clone(), cols.clone()]);

            let d_weights = d_ctx.dot(&v.t());
            d_value
                .slice_mut(s![rows.clone(), cols.clone()])
                .assign(&weights.t().dot(&d_ctx));

            let mut d_scores = d_weights;
            for (mut d_row, w_row) in d_scores.axis_iter_mut(Axis(0)).zip(weights.axis_iter(Axis(0))) {
                let dot = d_row.iter().zip(w_row.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv, &wv) in d_row.iter_mut().zip(w_row.iter()) {
                    *dv = wv * (*dv - dot) * scale;
                }
            }
            d_query
                .slice_mut(s![rows.clone(), cols.clone()])
                .assign(&d_scores.dot(&k));
            d_key.slice_mut(s![rows.clone(), cols]).assign(&d_scores.t().dot(&q));
        }
    }

    g.query += &la.input.t().dot(&d_query);
    g.key += &la.input.t().dot(&d_key);
    g.value += &la.input.t().dot(&d_value);
    d_res1 + &d_query.dot(&lp.query.t()) + &d_key.dot(&lp.key.t()) + &d_value.dot(&lp.value.t())
}
