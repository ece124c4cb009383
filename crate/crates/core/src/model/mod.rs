//! Per-feature embeddings, a post-norm transformer encoder without
//! positional encoding, and the two output heads.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for verification.

mod forward;
mod loss;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::discretizer::Vocabulary;
use crate::error::{Error, Result};

pub use forward::{
    classifier_head_forward, embed_flows, encoder_forward, forward, mlm_head_forward, predict_label,
    ClassifierOutput, ForwardActivations, LayerActivations, LayerNormCache,
};
pub use loss::{
    classification_loss, classification_loss_from_logits, mlm_loss, mlm_loss_with_grad, MlmLoss,
};
pub(crate) use forward::gelu_grad;
pub(crate) use loss::{classification_sum_grad, mlm_loss_sum_grad};
pub use params::{init_params, EncoderLayerParams, ModelParams, ParamGroup, TensorMut, TensorRef};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the scalar type")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-feature token-space size including MASK and PAD.
    pub vocab_sizes: Vec<usize>,
    /// Per-feature count of real tokens (MLM prediction targets).
    pub real_sizes: Vec<usize>,
    pub per_feature_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub class_count: usize,
}

impl ModelConfig {
    /// Config for a vocabulary; `ffn_dim` defaults to four times the model width.
    pub fn for_vocab(vocab: &Vocabulary, per_feature_dim: usize, layer_count: usize, head_count: usize) -> Self {
        let model_dim = vocab.feature_count() * per_feature_dim;
        ModelConfig {
            vocab_sizes: vocab.total_sizes(),
            real_sizes: vocab.real_sizes(),
            per_feature_dim,
            layer_count,
            head_count,
            ffn_dim: 4 * model_dim,
            class_count: 2,
        }
    }

    pub fn feature_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn model_dim(&self) -> usize {
        self.feature_count() * self.per_feature_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.head_count
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_count() == 0 || self.real_sizes.len() != self.feature_count() {
            return fail(format!(
                "vocab_sizes ({}) and real_sizes ({}) must be non-empty and equal length",
                self.vocab_sizes.len(),
                self.real_sizes.len()
            ));
        }
        if self
            .vocab_sizes
            .iter()
            .zip(&self.real_sizes)
            .any(|(&v, &r)| r == 0 || v != r + 2)
        {
            return fail("each feature needs real tokens plus MASK and PAD".into());
        }
        if self.per_feature_dim == 0 || self.layer_count == 0 || self.head_count == 0 || self.ffn_dim == 0 {
            return fail(format!("dimensions must be positive: {self:?}"));
        }
        if self.model_dim() % self.head_count != 0 {
            return fail(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim(),
                self.head_count
            ));
        }
        if self.class_count != 2 {
            return fail(format!("binary task needs 2 classes, got {}", self.class_count));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::FeatureProfile;

    #[test]
    fn config_dims() {
        let vocab = Vocabulary::new(FeatureProfile::Full);
        let c = ModelConfig::for_vocab(&vocab, 128, 1, 1);
        assert_eq!(c.model_dim(), 896);
        assert_eq!(c.ffn_dim, 3584);
        c.validate().unwrap();
        let six = Vocabulary::new(FeatureProfile::SixFeature {
            dropped: crate::discretizer::Feature::SrcPt,
        });
        assert_eq!(ModelConfig::for_vocab(&six, 128, 1, 1).model_dim(), 768);
        let desk = ModelConfig::for_vocab(&vocab, 16, 1, 1);
        assert_eq!(desk.model_dim(), 112);

        let mut bad = c.clone();
        bad.head_count = 5;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.real_sizes[0] += 1;
        assert!(bad.validate().is_err());
    }
}
