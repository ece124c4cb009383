use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Scalar, INIT_STD};
use crate::error::Result;

/// Which part of the model a tensor belongs to; training stages freeze or
/// train whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    MlmHead,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
    pub output: Array2<T>,
    pub attn_norm_gain: Array1<T>,
    pub attn_norm_bias: Array1<T>,
    pub ffn_in: Array2<T>,
    pub ffn_in_bias: Array1<T>,
    pub ffn_out: Array2<T>,
    pub ffn_out_bias: Array1<T>,
    pub ffn_norm_gain: Array1<T>,
    pub ffn_norm_bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// One `vocab_f × d` table per feature.
    pub embeddings: Vec<Array2<T>>,
    pub layers: Vec<EncoderLayerParams<T>>,
    /// One `D × real_f` projection per feature.
    pub mlm_weights: Vec<Array2<T>>,
    pub mlm_biases: Vec<Array1<T>>,
    /// `D × 2`.
    pub classifier_weight: Array2<T>,
    pub classifier_bias: Array1<T>,
}

pub struct TensorRef<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.per_feature_dim;
        let model = config.model_dim();
        let ffn = config.ffn_dim;
        ModelParams {
            config: config.clone(),
            embeddings: config.vocab_sizes.iter().map(|&v| Array2::zeros((v, d))).collect(),
            layers: (0..config.layer_count)
                .map(|_| EncoderLayerParams {
                    query: Array2::zeros((model, model)),
                    key: Array2::zeros((model, model)),
                    value: Array2::zeros((model, model)),
                    output: Array2::zeros((model, model)),
                    attn_norm_gain: Array1::zeros(model),
                    attn_norm_bias: Array1::zeros(model),
                    ffn_in: Array2::zeros((model, ffn)),
                    ffn_in_bias: Array1::zeros(ffn),
                    ffn_out: Array2::zeros((ffn, model)),
                    ffn_out_bias: Array1::zeros(model),
                    ffn_norm_gain: Array1::zeros(model),
                    ffn_norm_bias: Array1::zeros(model),
                })
                .collect(),
            mlm_weights: config.real_sizes.iter().map(|&r| Array2::zeros((model, r))).collect(),
            mlm_biases: config.real_sizes.iter().map(|&r| Array1::zeros(r)).collect(),
            classifier_weight: Array2::zeros((model, config.class_count)),
            classifier_bias: Array1::zeros(config.class_count),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// All tensors in a fixed order (embeddings, encoder layers, MLM heads,
    /// classifier).
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (f, e) in self.embeddings.iter().enumerate() {
            out.push(tensor_ref(format!("embedding.{f}"), ParamGroup::Embedding, e));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let g = ParamGroup::Encoder;
            out.push(tensor_ref(format!("encoder.{i}.query"), g, &l.query));
            out.push(tensor_ref(format!("encoder.{i}.key"), g, &l.key));
            out.push(tensor_ref(format!("encoder.{i}.value"), g, &l.value));
            out.push(tensor_ref(format!("encoder.{i}.output"), g, &l.output));
            out.push(tensor_ref(format!("encoder.{i}.attn_norm.gain"), g, &l.attn_norm_gain));
            out.push(tensor_ref(format!("encoder.{i}.attn_norm.bias"), g, &l.attn_norm_bias));
            out.push(tensor_ref(format!("encoder.{i}.ffn_in.weight"), g, &l.ffn_in));
            out.push(tensor_ref(format!("encoder.{i}.ffn_in.bias"), g, &l.ffn_in_bias));
            out.push(tensor_ref(format!("encoder.{i}.ffn_out.weight"), g, &l.ffn_out));
            out.push(tensor_ref(format!("encoder.{i}.ffn_out.bias"), g, &l.ffn_out_bias));
            out.push(tensor_ref(format!("encoder.{i}.ffn_norm.gain"), g, &l.ffn_norm_gain));
            out.push(tensor_ref(format!("encoder.{i}.ffn_norm.bias"), g, &l.ffn_norm_bias));
        }
        for (f, (w, b)) in self.mlm_weights.iter().zip(&self.mlm_biases).enumerate() {
            out.push(tensor_ref(format!("mlm.{f}.weight"), ParamGroup::MlmHead, w));
            out.push(tensor_ref(format!("mlm.{f}.bias"), ParamGroup::MlmHead, b));
        }
        out.push(tensor_ref("classifier.weight".into(), ParamGroup::Classifier, &self.classifier_weight));
        out.push(tensor_ref("classifier.bias".into(), ParamGroup::Classifier, &self.classifier_bias));
        out
    }

    /// Mutable view of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        for (f, e) in self.embeddings.iter_mut().enumerate() {
            out.push(tensor_mut(format!("embedding.{f}"), ParamGroup::Embedding, e));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let g = ParamGroup::Encoder;
            out.push(tensor_mut(format!("encoder.{i}.query"), g, &mut l.query));
            out.push(tensor_mut(format!("encoder.{i}.key"), g, &mut l.key));
            out.push(tensor_mut(format!("encoder.{i}.value"), g, &mut l.value));
            out.push(tensor_mut(format!("encoder.{i}.output"), g, &mut l.output));
            out.push(tensor_mut(format!("encoder.{i}.attn_norm.gain"), g, &mut l.attn_norm_gain));
            out.push(tensor_mut(format!("encoder.{i}.attn_norm.bias"), g, &mut l.attn_norm_bias));
            out.push(tensor_mut(format!("encoder.{i}.ffn_in.weight"), g, &mut l.ffn_in));
            out.push(tensor_mut(format!("encoder.{i}.ffn_in.bias"), g, &mut l.ffn_in_bias));
            out.push(tensor_mut(format!("encoder.{i}.ffn_out.weight"), g, &mut l.ffn_out));
            out.push(tensor_mut(format!("encoder.{i}.ffn_out.bias"), g, &mut l.ffn_out_bias));
            out.push(tensor_mut(format!("encoder.{i}.ffn_norm.gain"), g, &mut l.ffn_norm_gain));
            out.push(tensor_mut(format!("encoder.{i}.ffn_norm.bias"), g, &mut l.ffn_norm_bias));
        }
        for (f, (w, b)) in self.mlm_weights.iter_mut().zip(self.mlm_biases.iter_mut()).enumerate() {
            out.push(tensor_mut(format!("mlm.{f}.weight"), ParamGroup::MlmHead, w));
            out.push(tensor_mut(format!("mlm.{f}.bias"), ParamGroup::MlmHead, b));
        }
        out.push(tensor_mut("classifier.weight".into(), ParamGroup::Classifier, &mut self.classifier_weight));
        out.push(tensor_mut("classifier.bias".into(), ParamGroup::Classifier, &mut self.classifier_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (s, d) in src.data.iter().zip(dst.data.iter_mut()) {
                *d = U::from(*s).expect("finite cast");
            }
        }
        out
    }

    /// Re-draws the classifier head (weights N(0, 0.02) truncated, bias 0).
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fill_truncated_normal(&mut self.classifier_weight, &mut rng);
        self.classifier_bias.fill(T::zero());
    }
}

fn tensor_ref<'a, T, D: ndarray::Dimension>(
    name: String,
    group: ParamGroup,
    a: &'a ndarray::Array<T, D>,
) -> TensorRef<'a, T> {
    TensorRef {
        name,
        group,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

fn tensor_mut<'a, T, D: ndarray::Dimension>(
    name: String,
    group: ParamGroup,
    a: &'a mut ndarray::Array<T, D>,
) -> TensorMut<'a, T> {
    let shape = a.shape().to_vec();
    TensorMut {
        name,
        group,
        shape,
        data: a.as_slice_mut().expect("standard layout"),
    }
}

/// Standard normal truncated to ±2σ, rescaled so the truncated distribution
/// has standard deviation [`INIT_STD`].
fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    // std of N(0,1) conditioned on |x| <= 2
    const TRUNCATED_STD: f64 = 0.879_625_661_034_239_8;
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * INIT_STD / TRUNCATED_STD;
        }
    }
}

fn fill_truncated_normal<T: Scalar, D: ndarray::Dimension, R: Rng>(a: &mut ndarray::Array<T, D>, rng: &mut R) {
    for v in a.iter_mut() {
        *v = T::lit(truncated_normal(rng));
    }
}

/// Weights from a truncated normal (std 0.02), biases zero, layer-norm gains one.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<T>::zeros(config);
    for e in &mut p.embeddings {
        fill_truncated_normal(e, &mut rng);
    }
    for l in &mut p.layers {
        fill_truncated_normal(&mut l.query, &mut rng);
        fill_truncated_normal(&mut l.key, &mut rng);
        fill_truncated_normal(&mut l.value, &mut rng);
        fill_truncated_normal(&mut l.output, &mut rng);
        fill_truncated_normal(&mut l.ffn_in, &mut rng);
        fill_truncated_normal(&mut l.ffn_out, &mut rng);
        l.attn_norm_gain.fill(T::one());
        l.ffn_norm_gain.fill(T::one());
    }
    for w in &mut p.mlm_weights {
        fill_truncated_normal(w, &mut rng);
    }
    fill_truncated_normal(&mut p.classifier_weight, &mut rng);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::{FeatureProfile, Vocabulary};

    fn config(d: usize) -> ModelConfig {
        ModelConfig::for_vocab(&Vocabulary::new(FeatureProfile::Full), d, 1, 1)
    }

    #[test]
    fn init_is_deterministic() {
        let c = config(4);
        let a = init_params::<f32>(&c, 5).unwrap();
        let b = init_params::<f32>(&c, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(&c, 6).unwrap());
    }

    #[test]
    fn init_conventions() {
        let p = init_params::<f32>(&config(4), 1).unwrap();
        assert!(p.layers[0].attn_norm_gain.iter().all(|&g| g == 1.0));
        assert!(p.layers[0].ffn_norm_gain.iter().all(|&g| g == 1.0));
        assert!(p.layers[0].ffn_in_bias.iter().all(|&b| b == 0.0));
        assert!(p.mlm_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let bound = 2.0 * INIT_STD / 0.879_625_661_034_239_8 + 1e-6;
        assert!(p.layers[0].query.iter().all(|&w| (w as f64).abs() <= bound));
    }

    #[test]
    fn init_std_on_768_square() {
        let mut c = config(4);
        // 6 features × 128 = 768
        c.vocab_sizes.truncate(6);
        c.real_sizes.truncate(6);
        c.per_feature_dim = 128;
        c.ffn_dim = 8;
        let p = init_params::<f32>(&c, 3).unwrap();
        let w = &p.layers[0].query;
        assert_eq!(w.shape(), &[768, 768]);
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.018..=0.022).contains(&std), "std {std}");
    }

    #[test]
    fn tensor_enumeration_is_complete_and_ordered() {
        let c = config(2);
        let mut p = init_params::<f64>(&c, 2).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|t| t.name).collect();
        assert_eq!(names, names_mut);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 7 + 12 + 14 + 2);
        let count: usize = p.tensors().iter().map(|t| t.data.len()).sum();
        assert_eq!(count, p.parameter_count());
        let back: ModelParams<f64> = p.cast::<f32>().cast();
        assert!(back.tensors().iter().zip(p.tensors()).all(|(a, b)| a.shape == b.shape));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = config(3);
        c.head_count = 2;
        assert!(init_params::<f32>(&c, 0).is_err());
    }
}
