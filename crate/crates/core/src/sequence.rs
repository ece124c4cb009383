//! Flow sequences ("sentences"), masked-flow corruption and batching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretizer::{DiscretizedFlow, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::ingest::BinaryLabel;

/// A fixed-length window of consecutive flows. Trailing positions past the
/// end of the stream are PAD flows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    pub flows: Vec<DiscretizedFlow>,
    /// One label per non-PAD flow; `None` for unlabeled (pretraining) streams.
    pub labels: Option<Vec<BinaryLabel>>,
    pub pad_count: usize,
}

impl FlowSequence {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.flows.len() - self.pad_count
    }

    pub fn real_flows(&self) -> &[DiscretizedFlow] {
        &self.flows[..self.real_len()]
    }
}

/// Splits an ordered flow stream into consecutive windows of `seq_len`,
/// padding the last one.
pub fn chunk_sequences(
    flows: &[DiscretizedFlow],
    labels: Option<&[BinaryLabel]>,
    seq_len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<FlowSequence>> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if let Some(labels) = labels {
        if labels.len() != flows.len() {
            return Err(Error::Precondition(format!(
                "{} labels for {} flows",
                labels.len(),
                flows.len()
            )));
        }
    }
    let pad = vocab.pad_flow();
    Ok(flows
        .chunks(seq_len)
        .enumerate()
        .map(|(i, chunk)| {
            let pad_count = seq_len - chunk.len();
            let mut seq_flows = chunk.to_vec();
            seq_flows.resize(seq_len, pad.clone());
            FlowSequence {
                flows: seq_flows,
                labels: labels.map(|l| l[i * seq_len..i * seq_len + chunk.len()].to_vec()),
                pad_count,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_probability: f64,
    pub replace_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_probability: 0.15,
            replace_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            seed: 0,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            self.mask_probability,
            self.replace_fraction,
            self.random_fraction,
            self.keep_fraction,
        ];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("masking probabilities must lie in [0, 1]: {self:?}")));
        }
        let total = self.replace_fraction + self.random_fraction + self.keep_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replace + random + keep fractions must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// One sequence after MLM corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub inputs: Vec<DiscretizedFlow>,
    /// Original flow at each selected position.
    pub targets: Vec<Option<DiscretizedFlow>>,
    pub selection: Vec<bool>,
    pub attention: Vec<bool>,
}

/// Whole-flow masking: a selected flow has all of its feature tokens
/// replaced by MASK, by random real tokens, or left unchanged.
///
/// The random stream is derived from `(policy.seed, stream_index)` only.
pub fn apply_mlm_mask(
    seq: &FlowSequence,
    policy: &MaskingPolicy,
    vocab: &Vocabulary,
    stream_index: u64,
) -> Result<MaskedSequence> {
    policy.validate()?;
    if seq.is_empty() {
        return Err(Error::Precondition("cannot mask an empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(stream_index);

    let real = seq.real_len();
    let mut inputs = seq.flows.clone();
    let mut targets = vec![None; seq.len()];
    let mut selection = vec![false; seq.len()];
    let attention: Vec<bool> = (0..seq.len()).map(|i| i < real).collect();

    for pos in 0..real {
        if rng.gen::<f64>() >= policy.mask_probability {
            continue;
        }
        selection[pos] = true;
        targets[pos] = Some(seq.flows[pos].clone());
        let mode = rng.gen::<f64>();
        if mode < policy.replace_fraction {
            inputs[pos] = vocab.mask_flow();
        } else if mode < policy.replace_fraction + policy.random_fraction {
            for (f, t) in inputs[pos].tokens.iter_mut().enumerate() {
                *t = rng.gen_range(0..vocab.real_tokens(f)) as TokenId;
            }
        }
    }
    Ok(MaskedSequence {
        inputs,
        targets,
        selection,
        attention,
    })
}

/// Token ids laid out `[batch][position][feature]`, with a per-position
/// attention flag (false on PAD).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub features: usize,
    pub tokens: Vec<TokenId>,
    pub attention: Vec<bool>,
}

impl TokenBatch {
    pub fn positions(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn flow(&self, position: usize) -> &[TokenId] {
        &self.tokens[position * self.features..(position + 1) * self.features]
    }

    pub fn from_sequences(seqs: &[&FlowSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Precondition("empty batch".into()))?;
        let seq_len = first.len();
        let features = first.flows.first().map_or(0, |f| f.len());
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len * features);
        let mut attention = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if s.len() != seq_len {
                return Err(Error::Precondition("sequences in a batch must share one length".into()));
            }
            for (i, flow) in s.flows.iter().enumerate() {
                tokens.extend_from_slice(&flow.tokens);
                attention.push(i < s.real_len());
            }
        }
        Ok(TokenBatch {
            batch_size: seqs.len(),
            seq_len,
            features,
            tokens,
            attention,
        })
    }
}

/// Corrupted inputs plus the original tokens at selected positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: TokenBatch,
    /// Original tokens, laid out like `inputs.tokens`; meaningful only where
    /// `selection` is set.
    pub targets: Vec<TokenId>,
    pub selection: Vec<bool>,
}

impl MaskedBatch {
    pub fn from_masked(items: &[MaskedSequence]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Precondition("empty batch".into()))?;
        let seq_len = first.inputs.len();
        let features = first.inputs[0].len();
        let n = items.len() * seq_len;
        let mut tokens = Vec::with_capacity(n * features);
        let mut targets = Vec::with_capacity(n * features);
        let mut selection = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        for item in items {
            for pos in 0..seq_len {
                tokens.extend_from_slice(&item.inputs[pos].tokens);
                match &item.targets[pos] {
                    Some(t) => targets.extend_from_slice(&t.tokens),
                    None => targets.extend_from_slice(&item.inputs[pos].tokens),
                }
                selection.push(item.selection[pos]);
                attention.push(item.attention[pos]);
            }
        }
        Ok(MaskedBatch {
            inputs: TokenBatch {
                batch_size: items.len(),
                seq_len,
                features,
                tokens,
                attention,
            },
            targets,
            selection,
        })
    }

    pub fn selected_count(&self) -> usize {
        self.selection.iter().filter(|&&s| s).count()
    }
}

/// Inputs plus one class label per position (ignored on PAD).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: TokenBatch,
    pub labels: Vec<BinaryLabel>,
}

impl LabeledBatch {
    pub fn from_sequences(seqs: &[&FlowSequence]) -> Result<Self> {
        let inputs = TokenBatch::from_sequences(seqs)?;
        let mut labels = Vec::with_capacity(inputs.positions());
        for s in seqs {
            let seq_labels = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Precondition("sequence carries no labels".into()))?;
            labels.extend_from_slice(seq_labels);
            labels.extend(std::iter::repeat(BinaryLabel::Benign).take(s.pad_count));
        }
        Ok(LabeledBatch { inputs, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    Sequential,
    /// Whole sequences permuted with the given seed.
    Shuffled(u64),
}

/// Groups sequences into batches of at most `batch_size`. Shuffling only
/// permutes whole sequences.
pub fn make_batches(
    seqs: &[FlowSequence],
    batch_size: usize,
    order: BatchOrder,
) -> Result<impl Iterator<Item = Vec<&FlowSequence>> + '_> {
    let order = batch_indices(seqs.len(), batch_size, order)?;
    Ok(order
        .into_iter()
        .map(move |ids| ids.into_iter().map(|i| &seqs[i]).collect()))
}

/// Sequence indices of each batch; the index form of [`make_batches`].
pub fn batch_indices(count: usize, batch_size: usize, order: BatchOrder) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    if let BatchOrder::Shuffled(seed) = order {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(ids.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
