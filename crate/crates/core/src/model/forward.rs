use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::{ModelParams, Scalar, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::ingest::BinaryLabel;
use crate::sequence::TokenBatch;

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// `(x - mean) / std` per row.
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Intermediate tensors of one encoder layer, kept for the backward pass.
/// All row-major matrices have one row per (sequence, position).
#[derive(Debug, Clone)]
pub struct LayerActivations<T> {
    pub input: Array2<T>,
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
    /// `L × L` attention weights per (sequence, head), indexed `b * heads + h`.
    pub attention: Vec<Array2<T>>,
    pub context: Array2<T>,
    pub attn_norm: LayerNormCache<T>,
    pub attn_out: Array2<T>,
    pub ffn_pre: Array2<T>,
    pub ffn_act: Array2<T>,
    pub ffn_norm: LayerNormCache<T>,
    pub output: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardActivations<T> {
    pub batch_size: usize,
    pub seq_len: usize,
    pub attention_mask: Vec<bool>,
    /// Concatenated per-feature embeddings, `(B·L) × D`.
    pub embedded: Array2<T>,
    pub layers: Vec<LayerActivations<T>>,
}

impl<T: Scalar> ForwardActivations<T> {
    /// Encoder output, `(B·L) × D`.
    pub fn hidden(&self) -> &Array2<T> {
        self.layers.last().map_or(&self.embedded, |l| &l.output)
    }
}

/// Looks up each feature token and concatenates the per-feature vectors in
/// feature order. No positional signal is added.
pub fn embed_flows<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<Array2<T>> {
    let cfg = &params.config;
    let f_count = cfg.feature_count();
    let d = cfg.per_feature_dim;
    if batch.features != f_count {
        return Err(Error::Index(format!(
            "batch has {} tokens per flow, model expects {f_count}",
            batch.features
        )));
    }
    let n = batch.positions();
    let mut out = Array2::zeros((n, f_count * d));
    for (pos, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (f, &token) in batch.flow(pos).iter().enumerate() {
            let table = &params.embeddings[f];
            let t = token as usize;
            if t >= table.nrows() {
                return Err(Error::Index(format!(
                    "token {t} at position {pos} exceeds feature {f} vocabulary of {}",
                    table.nrows()
                )));
            }
            row.slice_mut(s![f * d..(f + 1) * d]).assign(&table.row(t));
        }
    }
    Ok(out)
}

/// Row-wise softmax over keys whose mask entry is true; masked keys get 0.
pub(crate) fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, key_mask: &[bool]) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let mut max = T::neg_infinity();
        for (v, &ok) in row.iter().zip(key_mask) {
            if ok && *v > max {
                max = *v;
            }
        }
        if max == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (v, &ok) in row.iter_mut().zip(key_mask) {
            if ok {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let width = T::from_usize(x.ncols()).unwrap();
    let eps = T::lit(LAYER_NORM_EPS);
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / width;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
        let s = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv = s;
    }
    let y = &normalized * gain + bias;
    (y, LayerNormCache { normalized, inv_std })
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn check_finite<T: Scalar>(a: &Array2<T>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFault(what.to_string()))
    }
}

/// Post-norm encoder stack over already-embedded flows.
pub fn encoder_forward<T: Scalar>(
    params: &ModelParams<T>,
    embedded: Array2<T>,
    batch_size: usize,
    attention_mask: &[bool],
) -> Result<ForwardActivations<T>> {
    let cfg = &params.config;
    let n = embedded.nrows();
    if batch_size == 0 || n % batch_size != 0 || attention_mask.len() != n || embedded.ncols() != cfg.model_dim() {
        return Err(Error::Precondition(format!(
            "inconsistent encoder input: {} rows × {} cols, batch {batch_size}, mask {}",
            n,
            embedded.ncols(),
            attention_mask.len()
        )));
    }
    let seq_len = n / batch_size;
    let heads = cfg.head_count;
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut layers = Vec::with_capacity(params.layers.len());
    let mut x = embedded.clone();
    for (li, lp) in params.layers.iter().enumerate() {
        let query = x.dot(&lp.query);
        let key = x.dot(&lp.key);
        let value = x.dot(&lp.value);
        let mut context = Array2::zeros((n, cfg.model_dim()));
        let mut attention = Vec::with_capacity(batch_size * heads);
        for b in 0..batch_size {
            let rows = b * seq_len..(b + 1) * seq_len;
            let key_mask = &attention_mask[rows.clone()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let q = query.slice(s![rows.clone(), cols.clone()]);
                let k = key.slice(s![rows.clone(), cols.clone()]);
                let v = value.slice(s![rows.clone(), cols.clone()]);
                let mut weights = q.dot(&k.t());
                weights *= scale;
                masked_softmax_rows(&mut weights, key_mask);
                context.slice_mut(s![rows.clone(), cols]).assign(&weights.dot(&v));
                attention.push(weights);
            }
        }
        let residual = &x + &context.dot(&lp.output);
        let (attn_out, attn_norm) = layer_norm(&residual, &lp.attn_norm_gain, &lp.attn_norm_bias);
        let ffn_pre = attn_out.dot(&lp.ffn_in) + &lp.ffn_in_bias;
        let ffn_act = ffn_pre.mapv(gelu);
        let residual = &attn_out + &(ffn_act.dot(&lp.ffn_out) + &lp.ffn_out_bias);
        let (output, ffn_norm) = layer_norm(&residual, &lp.ffn_norm_gain, &lp.ffn_norm_bias);
        check_finite(&output, &format!("encoder layer {li}"))?;

        let input = std::mem::replace(&mut x, output.clone());
        layers.push(LayerActivations {
            input,
            query,
            key,
            value,
            attention,
            context,
            attn_norm,
            attn_out,
            ffn_pre,
            ffn_act,
            ffn_norm,
            output,
        });
    }
    Ok(ForwardActivations {
        batch_size,
        seq_len,
        attention_mask: attention_mask.to_vec(),
        embedded,
        layers,
    })
}

/// Embedding plus encoder for a token batch.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<ForwardActivations<T>> {
    let embedded = embed_flows(params, batch)?;
    encoder_forward(params, embedded, batch.batch_size, &batch.attention)
}

/// Per-feature logits over real tokens, one `(B·L) × real_f` matrix per feature.
pub fn mlm_head_forward<T: Scalar>(params: &ModelParams<T>, hidden: &Array2<T>) -> Vec<Array2<T>> {
    params
        .mlm_weights
        .iter()
        .zip(&params.mlm_biases)
        .map(|(w, b)| hidden.dot(w) + b)
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput<T> {
    /// `(B·L) × 2`, column 0 benign, column 1 malicious.
    pub logits: Array2<T>,
    pub probabilities: Array2<T>,
}

impl<T: Scalar> ClassifierOutput<T> {
    pub fn predictions(&self) -> Vec<BinaryLabel> {
        self.probabilities.axis_iter(Axis(0)).map(|r| predict_label(r)).collect()
    }
}

/// Linear map to two classes followed by softmax, per position.
pub fn classifier_head_forward<T: Scalar>(params: &ModelParams<T>, hidden: &Array2<T>) -> ClassifierOutput<T> {
    let logits = hidden.dot(&params.classifier_weight) + &params.classifier_bias;
    let mut probabilities = logits.clone();
    Zip::from(probabilities.rows_mut()).for_each(|mut row| {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    });
    ClassifierOutput { logits, probabilities }
}

/// Higher-probability class; ties go to malicious.
pub fn predict_label<T: Scalar>(probabilities: ArrayView1<'_, T>) -> BinaryLabel {
    if probabilities[1] >= probabilities[0] {
        BinaryLabel::Malicious
    } else {
        BinaryLabel::Benign
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::{FeatureProfile, Vocabulary};
    use crate::model::{init_params, ModelConfig};
    use ndarray::array;

    fn setup(d: usize) -> (Vocabulary, ModelParams<f64>) {
        let vocab = Vocabulary::new(FeatureProfile::Full);
        let cfg = ModelConfig::for_vocab(&vocab, d, 1, 1);
        let p = init_params::<f64>(&cfg, 42).unwrap();
        (vocab, p)
    }

    fn batch(vocab: &Vocabulary, flows: &[[u16; 7]], real: usize) -> TokenBatch {
        let mut tokens = Vec::new();
        for (i, f) in flows.iter().enumerate() {
            if i < real {
                tokens.extend_from_slice(f);
            } else {
                tokens.extend(vocab.pad_flow().tokens.iter());
            }
        }
        TokenBatch {
            batch_size: 1,
            seq_len: flows.len(),
            features: 7,
            tokens,
            attention: (0..flows.len()).map(|i| i < real).collect(),
        }
    }

    #[test]
    fn embedding_has_no_position_signal() {
        let (vocab, p) = setup(3);
        let flow = [9, 0, 0, 6, 7, 12, 27];
        let e = embed_flows(&p, &batch(&vocab, &[flow, [1; 7], flow], 3)).unwrap();
        assert_eq!(e.shape(), &[3, 21]);
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn flags_token_touches_last_slice_only() {
        let (vocab, p) = setup(4);
        let a = embed_flows(&p, &batch(&vocab, &[[9, 0, 0, 6, 7, 12, 27]], 1)).unwrap();
        let b = embed_flows(&p, &batch(&vocab, &[[9, 0, 0, 6, 7, 12, 28]], 1)).unwrap();
        let d = 4;
        assert_eq!(a.slice(s![0, ..6 * d]), b.slice(s![0, ..6 * d]));
        assert!(a.slice(s![0, 6 * d..]).iter().zip(b.slice(s![0, 6 * d..])).all(|(x, y)| x != y));
    }

    #[test]
    fn out_of_range_token() {
        let (vocab, p) = setup(2);
        let mut b = batch(&vocab, &[[0; 7]], 1);
        b.tokens[0] = 14;
        assert!(matches!(embed_flows(&p, &b), Err(Error::Index(_))));
    }

    #[test]
    fn single_flow_attends_to_itself() {
        let (vocab, p) = setup(2);
        let act = forward(&p, &batch(&vocab, &[[3, 1, 2, 3, 4, 5, 6]], 1)).unwrap();
        assert_eq!(act.layers[0].attention[0], array![[1.0]]);
    }

    #[test]
    fn pad_keys_get_no_weight() {
        let (vocab, p) = setup(2);
        let flows = [[3, 1, 2, 3, 4, 5, 6]; 5];
        let act = forward(&p, &batch(&vocab, &flows, 1)).unwrap();
        let w = &act.layers[0].attention[0];
        for row in w.rows() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().skip(1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_mask_oracle() {
        let mut s = array![[1.0, 2.0, 3.0], [0.0, 0.0, 100.0]];
        masked_softmax_rows(&mut s, &[true, true, false]);
        let e = (1.0f64).exp();
        assert!((s[[0, 0]] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert_eq!(s[[0, 2]], 0.0);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-12);
        let mut none = array![[1.0, 2.0]];
        masked_softmax_rows(&mut none, &[false, false]);
        assert_eq!(none, array![[0.0, 0.0]]);
    }

    #[test]
    fn head_shapes_and_bias_at_origin() {
        let (vocab, mut p) = setup(2);
        let flows = [[1, 1, 1, 1, 1, 1, 1]; 4];
        let act = forward(&p, &batch(&vocab, &flows, 4)).unwrap();
        let logits = mlm_head_forward(&p, act.hidden());
        assert_eq!(logits[0].shape(), &[4, 12]);
        assert_eq!(logits[6].shape(), &[4, 64]);

        p.mlm_biases[0].fill(0.25);
        let zero = Array2::<f64>::zeros((3, 14));
        let at_origin = mlm_head_forward(&p, &zero);
        assert!(at_origin[0].iter().all(|&v| v == 0.25));

        let out = classifier_head_forward(&p, act.hidden());
        assert_eq!(out.probabilities.shape(), &[4, 2]);
        for row in out.probabilities.rows() {
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tie_goes_to_malicious() {
        let (_, mut p) = setup(2);
        p.classifier_weight.fill(0.0);
        let out = classifier_head_forward(&p, &Array2::<f64>::ones((1, 14)));
        assert_eq!(out.probabilities.row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(out.predictions(), vec![BinaryLabel::Malicious]);
    }

    #[test]
    fn gelu_reference_values() {
        // 0.5·x·(1 + erf(x/√2)) at x = 1: Φ(1) = 0.8413447460685429
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
        let h = 1e-6;
        for x in [-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 11.0]];
        let (y, cache) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(cache.inv_std.len(), 2);
    }
}
