//! Gradients, Adam, the staged training schedule and checkpoint files.

mod adam;
mod backward;
mod checkpoint;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::discretizer::Vocabulary;
use crate::error::{Error, Result};
use crate::ingest::BinaryLabel;
use crate::model::{ModelParams, ParamGroup, Scalar};
use crate::sequence::{
    apply_mlm_mask, batch_indices, BatchOrder, FlowSequence, LabeledBatch, MaskedBatch, MaskingPolicy,
};

pub use adam::{AdamConfig, OptimizerState};
pub use backward::{accumulate_gradients, backward, Gradients, ParamScope, TrainingBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, vocab_manifest_path, CheckpointManifest, StageRecord, TensorEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    /// MLM loss; embeddings, encoder and MLM heads train.
    MlmPretrain,
    /// Classification loss; only the classifier head trains.
    HeadOnly,
    /// Classification loss; embeddings, encoder and classifier train.
    Joint,
}

impl StageKind {
    pub fn scope(self) -> ParamScope {
        use ParamGroup::*;
        match self {
            StageKind::MlmPretrain => ParamScope::new([Embedding, Encoder, MlmHead]),
            StageKind::HeadOnly => ParamScope::new([Classifier]),
            StageKind::Joint => ParamScope::new([Embedding, Encoder, Classifier]),
        }
    }

    pub fn default_name(self) -> &'static str {
        match self {
            StageKind::MlmPretrain => "mlm-pretrain",
            StageKind::HeadOnly => "head-only",
            StageKind::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub iterations: usize,
    pub kind: StageKind,
}

impl Stage {
    pub fn new(kind: StageKind, iterations: usize) -> Self {
        Stage {
            name: kind.default_name().to_string(),
            iterations,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::with_counts(400, 1100, 400)
    }
}

impl TrainSchedule {
    pub fn with_counts(mlm: usize, head_only: usize, joint: usize) -> Self {
        TrainSchedule {
            stages: vec![
                Stage::new(StageKind::MlmPretrain, mlm),
                Stage::new(StageKind::HeadOnly, head_only),
                Stage::new(StageKind::Joint, joint),
            ],
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn stage(&self, kind: StageKind) -> Result<&Stage> {
        self.stages
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| Error::Config(format!("schedule has no {} stage", kind.default_name())))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.stages.iter().find(|s| s.iterations == 0) {
            return Err(Error::Config(format!("stage {} has zero iterations", s.name)));
        }
        for kind in [StageKind::MlmPretrain, StageKind::HeadOnly, StageKind::Joint] {
            self.stage(kind)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Sequences per iteration.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub order: BatchOrder,
    /// Sequences per gradient pass; an iteration's gradient is the exact sum
    /// over its micro-batches, so this only bounds memory.
    pub micro_batch: Option<usize>,
    /// Seed for the classifier re-initialization at fine-tune start.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 512,
            adam: AdamConfig::default(),
            order: BatchOrder::Sequential,
            micro_batch: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    /// Iteration index within its stage.
    pub iteration: usize,
    pub stage: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn stage_losses(&self, stage: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.records.extend(other.records);
    }

    pub fn last_loss(&self, stage: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.stage == stage).map(|r| r.loss)
    }

    /// One tab-separated `iteration stage loss` record per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{}\t{:e}", r.iteration, r.stage, r.loss)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: format!("loss trace: {m}"),
            };
            let mut parts = line.split('\t');
            let (Some(it), Some(stage), Some(loss), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected 3 fields"));
            };
            records.push(LossRecord {
                iteration: it.parse().map_err(|_| bad("iteration"))?,
                stage: stage.to_string(),
                loss: f64::from_str(loss).map_err(|_| bad("loss"))?,
            });
        }
        Ok(LossTrace { records })
    }
}

impl fmt::Display for LossTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

/// Sequence indices of each iteration: batches cycle through the data in
/// epochs, reshuffled per epoch when the order is shuffled.
pub fn iteration_batches(count: usize, iterations: usize, opts: &TrainOptions) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(iterations);
    let mut epoch = 0u64;
    while out.len() < iterations {
        let order = match opts.order {
            BatchOrder::Sequential => BatchOrder::Sequential,
            BatchOrder::Shuffled(seed) => BatchOrder::Shuffled(seed.wrapping_add(epoch)),
        };
        out.extend(batch_indices(count, opts.batch_size, order)?);
        epoch += 1;
    }
    out.truncate(iterations);
    Ok(out)
}

fn chunk_len(opts: &TrainOptions, n: usize) -> usize {
    opts.micro_batch.unwrap_or(n).clamp(1, n.max(1))
}

/// One Adam step on the summed gradient of an iteration's micro-batches.
fn step_on<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut OptimizerState<T>,
    scope: &ParamScope,
    batches: &[TrainingBatch<'_>],
    terms: usize,
) -> Result<f64> {
    let scale = T::one() / T::from_usize(terms.max(1)).unwrap();
    let mut grads = params.zeros_like();
    let mut sum = T::zero();
    for b in batches {
        sum += accumulate_gradients(params, *b, scope, scale, &mut grads)?;
    }
    state.step(params, &grads, scope)?;
    Ok((sum * scale).to_f64().unwrap())
}

/// Masked-language-model pretraining on benign-only sequences.
pub fn pretrain_mlm<T: Scalar>(
    params: &mut ModelParams<T>,
    stream: &[FlowSequence],
    stage: &Stage,
    policy: &MaskingPolicy,
    vocab: &Vocabulary,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    if stream.iter().all(|s| s.real_len() == 0) {
        return Err(Error::Precondition("pretraining stream is empty".into()));
    }
    if stream
        .iter()
        .filter_map(|s| s.labels.as_ref())
        .any(|l| l.contains(&BinaryLabel::Malicious))
    {
        return Err(Error::Precondition("pretraining stream contains malicious flows".into()));
    }
    policy.validate()?;
    let scope = stage.kind.scope();
    let mut state = OptimizerState::new(params, opts.adam)?;
    let mut trace = LossTrace::default();
    for (it, idx) in iteration_batches(stream.len(), stage.iterations, opts)?.into_iter().enumerate() {
        let masked = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| apply_mlm_mask(&stream[i], policy, vocab, (it * opts.batch_size + slot) as u64))
            .collect::<Result<Vec<_>>>()?;
        let chunks = masked
            .chunks(chunk_len(opts, masked.len()))
            .map(MaskedBatch::from_masked)
            .collect::<Result<Vec<_>>>()?;
        let terms: usize = chunks.iter().map(|c| c.selected_count() * c.inputs.features).sum();
        let batches: Vec<_> = chunks.iter().map(TrainingBatch::Masked).collect();
        let loss = step_on(params, &mut state, &scope, &batches, terms)?;
        debug!("{} iteration {it}: loss {loss:.5}", stage.name);
        trace.records.push(LossRecord {
            iteration: it,
            stage: stage.name.clone(),
            loss,
        });
    }
    Ok(trace)
}

/// Runs one classification stage with a fresh optimizer state.
pub fn run_classification_stage<T: Scalar>(
    params: &mut ModelParams<T>,
    sequences: &[FlowSequence],
    stage: &Stage,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    if stage.kind == StageKind::MlmPretrain {
        return Err(Error::Config(format!("stage {} is not a classification stage", stage.name)));
    }
    if sequences.iter().any(|s| s.labels.is_none()) {
        return Err(Error::Precondition("fine-tuning needs labeled sequences".into()));
    }
    if sequences.iter().all(|s| s.real_len() == 0) {
        return Err(Error::Precondition("fine-tuning set is empty".into()));
    }
    let scope = stage.kind.scope();
    let mut state = OptimizerState::new(params, opts.adam)?;
    let mut trace = LossTrace::default();
    for (it, idx) in iteration_batches(sequences.len(), stage.iterations, opts)?.into_iter().enumerate() {
        let refs: Vec<&FlowSequence> = idx.iter().map(|&i| &sequences[i]).collect();
        let chunks = refs
            .chunks(chunk_len(opts, refs.len()))
            .map(LabeledBatch::from_sequences)
            .collect::<Result<Vec<_>>>()?;
        let batches: Vec<_> = chunks.iter().map(TrainingBatch::Labeled).collect();
        let terms: usize = batches.iter().map(|b| b.loss_terms()).sum();
        if terms == 0 {
            return Err(Error::Precondition(format!("{} iteration {it} has no real flows", stage.name)));
        }
        let loss = step_on(params, &mut state, &scope, &batches, terms)?;
        debug!("{} iteration {it}: loss {loss:.5}", stage.name);
        trace.records.push(LossRecord {
            iteration: it,
            stage: stage.name.clone(),
            loss,
        });
    }
    Ok(trace)
}

/// Re-initializes the classifier, then runs the head-only and joint stages.
pub fn finetune_staged<T: Scalar>(
    params: &mut ModelParams<T>,
    sequences: &[FlowSequence],
    schedule: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    let head_only = schedule.stage(StageKind::HeadOnly)?.clone();
    let joint = schedule.stage(StageKind::Joint)?.clone();
    params.reset_classifier(opts.seed);
    let mut trace = run_classification_stage(params, sequences, &head_only, opts)?;
    trace.extend(run_classification_stage(params, sequences, &joint, opts)?);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::{DiscretizedFlow, FeatureProfile};
    use crate::model::{init_params, ModelConfig};
    use crate::sequence::chunk_sequences;

    fn toy(n: usize, malicious_every: usize) -> (Vocabulary, Vec<FlowSequence>) {
        let vocab = Vocabulary::new(FeatureProfile::Full);
        // two recurring patterns so both losses have something to learn
        let flows: Vec<DiscretizedFlow> = (0..n)
            .map(|i| DiscretizedFlow {
                tokens: if malicious_every > 0 && i % malicious_every == 0 {
                    [9u16, 1, 7, 3, 0, 1, 2].into_iter().collect()
                } else {
                    [(i % 3) as u16, 0, 7, 2, 3, 5, 24].into_iter().collect()
                },
            })
            .collect();
        let labels: Vec<BinaryLabel> = (0..n)
            .map(|i| {
                if malicious_every > 0 && i % malicious_every == 0 {
                    BinaryLabel::Malicious
                } else {
                    BinaryLabel::Benign
                }
            })
            .collect();
        let seqs = chunk_sequences(&flows, Some(&labels), 8, &vocab).unwrap();
        (vocab, seqs)
    }

    fn small_params(vocab: &Vocabulary) -> ModelParams<f32> {
        init_params(&ModelConfig::for_vocab(vocab, 4, 1, 1), 1).unwrap()
    }

    fn opts(batch: usize) -> TrainOptions {
        TrainOptions {
            batch_size: batch,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainOptions::default()
        }
    }

    #[test]
    fn default_schedule_counts() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        let counts: Vec<usize> = s.stages.iter().map(|st| st.iterations).collect();
        assert_eq!(counts, [400, 1100, 400]);
        // the per-stage counts sum to 1900; the stated 2000 total cannot also hold
        assert_eq!(s.total_iterations(), 1900);
        assert_eq!(s.stage(StageKind::HeadOnly).unwrap().iterations, 1100);
        assert_eq!(s.stage(StageKind::MlmPretrain).unwrap().name, "mlm-pretrain");
        let mut bad = s.clone();
        bad.stages[1].iterations = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_stage_is_config_error() {
        let (_, seqs) = toy(64, 4);
        let vocab = Vocabulary::new(FeatureProfile::Full);
        let mut p = small_params(&vocab);
        let mut schedule = TrainSchedule::with_counts(1, 1, 1);
        schedule.stages.retain(|s| s.kind != StageKind::Joint);
        assert!(matches!(
            finetune_staged(&mut p, &seqs, &schedule, &opts(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretraining_rejects_empty_and_malicious_streams() {
        let (vocab, seqs) = toy(64, 4);
        let mut p = small_params(&vocab);
        let stage = Stage::new(StageKind::MlmPretrain, 1);
        let policy = MaskingPolicy::default();
        assert!(matches!(
            pretrain_mlm(&mut p, &[], &stage, &policy, &vocab, &opts(2)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            pretrain_mlm(&mut p, &seqs, &stage, &policy, &vocab, &opts(2)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn stages_respect_scope_bitwise() {
        let (vocab, benign) = toy(256, 0);
        let (_, labeled) = toy(256, 4);
        let mut p = small_params(&vocab);
        let init = p.clone();
        let policy = MaskingPolicy {
            seed: 3,
            ..MaskingPolicy::default()
        };
        let o = opts(4);
        let trace = pretrain_mlm(&mut p, &benign, &Stage::new(StageKind::MlmPretrain, 5), &policy, &vocab, &o).unwrap();
        assert_eq!(trace.records.len(), 5);
        assert_eq!(p.classifier_weight, init.classifier_weight);
        assert_ne!(p.layers, init.layers);
        let pretrained = p.clone();

        p.reset_classifier(o.seed);
        run_classification_stage(&mut p, &labeled, &Stage::new(StageKind::HeadOnly, 5), &o).unwrap();
        assert_eq!(p.layers, pretrained.layers);
        assert_eq!(p.embeddings, pretrained.embeddings);
        assert_eq!(p.mlm_weights, pretrained.mlm_weights);

        run_classification_stage(&mut p, &labeled, &Stage::new(StageKind::Joint, 5), &o).unwrap();
        assert_ne!(p.layers, pretrained.layers);
        assert_eq!(p.mlm_weights, pretrained.mlm_weights);
        assert_eq!(p.mlm_biases, pretrained.mlm_biases);
    }

    #[test]
    fn training_is_deterministic_and_micro_batching_is_exact() {
        let (vocab, labeled) = toy(256, 4);
        let run = |micro: Option<usize>| {
            let mut p = small_params(&vocab).cast::<f64>();
            let o = TrainOptions {
                micro_batch: micro,
                order: BatchOrder::Shuffled(5),
                ..opts(8)
            };
            let t = finetune_staged(&mut p, &labeled, &TrainSchedule::with_counts(1, 3, 3), &o).unwrap();
            (p, t)
        };
        let (a, ta) = run(None);
        let (b, tb) = run(None);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = run(Some(3));
        let max_diff = a
            .tensors()
            .iter()
            .zip(c.tensors())
            .flat_map(|(x, y)| x.data.iter().zip(y.data).map(|(u, v)| (u - v).abs()))
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "{max_diff}");
    }

    #[test]
    fn mlm_loss_decreases_on_repetitive_stream() {
        let (vocab, benign) = toy(1024, 0);
        let mut p = small_params(&vocab);
        let policy = MaskingPolicy {
            seed: 1,
            ..MaskingPolicy::default()
        };
        let trace =
            pretrain_mlm(&mut p, &benign, &Stage::new(StageKind::MlmPretrain, 60), &policy, &vocab, &opts(16)).unwrap();
        let l = trace.stage_losses("mlm-pretrain");
        let early: f64 = l[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = l[50..60].iter().sum::<f64>() / 10.0;
        assert!(late < early, "{early} -> {late}");
    }

    #[test]
    fn small_step_lowers_the_loss() {
        let (vocab, labeled) = toy(512, 3);
        let p0 = small_params(&vocab).cast::<f64>();
        let scope = StageKind::Joint.scope();
        let mut violations = 0;
        for b in 0..20 {
            let refs: Vec<_> = labeled[b * 3..b * 3 + 3].iter().collect();
            let batch = LabeledBatch::from_sequences(&refs).unwrap();
            let tb = TrainingBatch::Labeled(&batch);
            let mut p = p0.clone();
            let mut state = OptimizerState::new(&p, AdamConfig::default()).unwrap();
            let g = backward(&p, tb, &scope).unwrap();
            state.step(&mut p, &g.grads, &scope).unwrap();
            let after = backward(&p, tb, &scope).unwrap().loss;
            if after >= g.loss {
                violations += 1;
            }
        }
        assert!(violations <= 2, "{violations}");
    }

    #[test]
    fn loss_trace_round_trip() {
        let trace = LossTrace {
            records: vec![
                LossRecord {
                    iteration: 0,
                    stage: "mlm-pretrain".into(),
                    loss: 2.5,
                },
                LossRecord {
                    iteration: 1,
                    stage: "joint".into(),
                    loss: 0.125,
                },
            ],
        };
        let text = trace.to_string();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(LossTrace::read_from(text.as_bytes()).unwrap(), trace);
        assert!(LossTrace::read_from("1\tx".as_bytes()).is_err());
    }

    #[test]
    fn paper_profile_batch_covers_65536_flows() {
        let (vocab, _) = toy(8, 0);
        let flows: Vec<DiscretizedFlow> = (0..512 * 128).map(|_| vocab.mask_flow()).collect();
        let seqs = chunk_sequences(&flows, None, 128, &vocab).unwrap();
        let idx = iteration_batches(seqs.len(), 1, &TrainOptions::default()).unwrap();
        let covered: usize = idx[0].iter().map(|&i| seqs[i].real_len()).sum();
        assert_eq!(covered, 65536);
    }
}
