//! End-to-end stages shared by the command line and the integration tests:
//! ingest, pretrain, fine-tune, evaluate, predict, and the paper-profile dry
//! run. File handling stays with the caller.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::artifact::read_required;
use crate::config::{Profile, RunSettings};
use crate::discretizer::Vocabulary;
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate_dataset, predict_flows, BaselineOptions, ContextFreeBaseline, Evaluation, FlowPredictions,
    MetricsReport, TrainingRegime,
};
use crate::flowset::TokenizedDataset;
use crate::ingest::{parse_cidds_csv, BinaryLabel, FlowDataset, IngestStats};
use crate::model::{init_params, ModelParams};
use crate::trainer::{
    finetune_staged, iteration_batches, pretrain_mlm, run_classification_stage, CheckpointManifest, LossTrace,
    Stage, StageKind, StageRecord, TrainOptions,
};

/// Record counts per class as they appear in the source files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    /// Keyed by attack type for attack records, by class label otherwise.
    pub classes: BTreeMap<String, usize>,
    pub benign: usize,
    pub malicious: usize,
    pub stats: IngestStats,
}

impl IngestSummary {
    pub fn from_dataset(data: &FlowDataset) -> Self {
        let mut classes = BTreeMap::new();
        for r in &data.records {
            let name = match (&r.record.attack_type, r.label) {
                (Some(t), BinaryLabel::Malicious) if r.record.label != "suspicious" => t.clone(),
                _ => r.record.label.clone(),
            };
            *classes.entry(name).or_default() += 1;
        }
        let (benign, malicious) = data.label_counts();
        IngestSummary {
            classes,
            benign,
            malicious,
            stats: data.stats,
        }
    }

    pub fn total(&self) -> usize {
        self.benign + self.malicious
    }

    /// Class / record-count table followed by the binary split.
    pub fn render(&self) -> String {
        let width = self.classes.keys().map(String::len).max().unwrap_or(0).max(9);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>12}", "Class", "Records").unwrap();
        for (name, n) in &self.classes {
            writeln!(out, "{name:<width$}  {n:>12}").unwrap();
        }
        writeln!(out, "{:-<w$}", "", w = width + 14).unwrap();
        writeln!(out, "{:<width$}  {:>12}", "benign", self.benign).unwrap();
        writeln!(out, "{:<width$}  {:>12}", "malicious", self.malicious).unwrap();
        writeln!(out, "{:<width$}  {:>12}", "total", self.total()).unwrap();
        if self.stats.skipped > 0 {
            writeln!(out, "{:<width$}  {:>12}", "skipped", self.stats.skipped).unwrap();
        }
        out
    }
}

/// Parses and concatenates CIDDS CSV files in the order given.
pub fn read_csvs(paths: &[PathBuf], strict: bool) -> Result<FlowDataset> {
    if paths.is_empty() {
        return Err(Error::Config("no input files".into()));
    }
    let parts = paths
        .iter()
        .map(|p| parse_cidds_csv(p, strict))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowDataset::concat(parts))
}

pub fn source_name(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
        .collect::<Vec<_>>()
        .join("+")
}

/// Sibling file carrying the vocabulary manifest of a flow cache.
pub fn flowset_vocab_path(flowset: &Path) -> PathBuf {
    crate::trainer::vocab_manifest_path(flowset)
}

/// Hex SHA-256 of a file, used to identify checkpoints in reports.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_required(path)?)))
}

/// Keeps all malicious flows and an order-preserving uniform sample of as
/// many benign flows.
pub fn balance_tokenized(data: &TokenizedDataset, seed: u64) -> Result<TokenizedDataset> {
    let (benign, malicious) = data.label_counts();
    if benign < malicious {
        return Err(Error::Precondition(format!(
            "cannot balance: {benign} benign < {malicious} malicious flows"
        )));
    }
    let mut keep_benign = vec![false; benign];
    for i in index::sample(&mut ChaCha8Rng::seed_from_u64(seed), benign, malicious) {
        keep_benign[i] = true;
    }
    let mut keep = Vec::with_capacity(data.len());
    let mut seen = 0;
    for &l in &data.labels {
        keep.push(match l {
            BinaryLabel::Malicious => true,
            BinaryLabel::Benign => {
                seen += 1;
                keep_benign[seen - 1]
            }
        });
    }
    Ok(data.select(|i| keep[i]))
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub manifest: CheckpointManifest,
    pub trace: LossTrace,
}

fn stage_record(stage: &Stage, trace: &LossTrace) -> StageRecord {
    StageRecord {
        name: stage.name.clone(),
        kind: stage.kind,
        iterations: stage.iterations,
        final_loss: trace.last_loss(&stage.name),
    }
}

/// Initializes a model and pretrains it on the benign flows of `data`.
pub fn pretrain(settings: &RunSettings, data: &TokenizedDataset) -> Result<TrainedModel> {
    data.check_vocabulary(&settings.vocab)?;
    let benign = data.benign_only();
    if benign.is_empty() {
        return Err(Error::Precondition(format!("{} holds no benign flows to pretrain on", data.source)));
    }
    let stream = benign.sequences(settings.seq_len, &settings.vocab, true)?;
    let mut params = init_params::<f32>(&settings.model, settings.seeds.init)?;
    let stage = settings.schedule.stage(StageKind::MlmPretrain)?;
    let trace = pretrain_mlm(&mut params, &stream, stage, &settings.masking, &settings.vocab, &settings.train)?;
    let mut manifest = CheckpointManifest::new(&settings.model, &settings.vocab);
    for (role, seed) in settings.seeds.named() {
        manifest.record_seed(role, seed);
    }
    manifest.stages.push(stage_record(stage, &trace));
    Ok(TrainedModel {
        params,
        manifest,
        trace,
    })
}

/// Fine-tunes a pretrained model on labeled flows under the configured regime.
pub fn finetune(settings: &RunSettings, pretrained: TrainedModel, data: &TokenizedDataset) -> Result<TrainedModel> {
    data.check_vocabulary(&settings.vocab)?;
    pretrained.manifest.check_vocabulary(&settings.vocab)?;
    if pretrained.manifest.config != settings.model {
        return Err(Error::Incompatible(
            "pretrained checkpoint was built with a different model configuration".into(),
        ));
    }
    let train = match settings.regime {
        TrainingRegime::Full => data.clone(),
        TrainingRegime::Balanced => balance_tokenized(data, settings.seeds.balance)?,
    };
    let seqs = train.sequences(settings.seq_len, &settings.vocab, true)?;
    let TrainedModel {
        mut params,
        mut manifest,
        mut trace,
    } = pretrained;
    let tuned = finetune_staged(&mut params, &seqs, &settings.schedule, &settings.train)?;
    for kind in [StageKind::HeadOnly, StageKind::Joint] {
        manifest.stages.push(stage_record(settings.schedule.stage(kind)?, &tuned));
    }
    manifest.record_seed("classifier", settings.train.seed);
    trace.extend(tuned);
    Ok(TrainedModel { params, manifest, trace })
}

pub fn evaluate(
    settings: &RunSettings,
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    data: &TokenizedDataset,
    checkpoint_id: &str,
) -> Result<Evaluation> {
    evaluate_dataset(params, vocab, data, settings.test_seq_len, checkpoint_id)
}

/// Trains the single-flow baseline on `train` and reports it on `test`.
pub fn baseline_report(vocab: &Vocabulary, train: &TokenizedDataset, test: &TokenizedDataset) -> Result<MetricsReport> {
    train.check_vocabulary(vocab)?;
    let model = ContextFreeBaseline::train(vocab, &train.flows, &train.labels, &BaselineOptions::default())?;
    let mut ev = model.evaluate(vocab, test)?;
    ev.report.checkpoint = format!("trained on {} ({})", train.source, train.digest());
    Ok(ev.report)
}

/// Per-flow predictions for raw records, in input order.
pub fn predict_records(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    data: &FlowDataset,
    seq_len: usize,
) -> Result<FlowPredictions> {
    let flows = data
        .records
        .iter()
        .map(|r| vocab.discretize_flow(&r.record))
        .collect::<Result<Vec<_>>>()?;
    predict_flows(params, vocab, &flows, seq_len)
}

pub fn render_predictions(p: &FlowPredictions) -> String {
    let mut out = String::from("index\tlabel\tp_malicious\n");
    for (i, (l, q)) in p.labels.iter().zip(&p.malicious_probability).enumerate() {
        writeln!(out, "{i}\t{l}\t{q:.6}").unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryRunStage {
    pub name: String,
    pub configured_iterations: usize,
    /// Sequences in the first full iteration batch.
    pub batch_sequences: usize,
    /// Sequences actually pushed through forward and backward.
    pub probed_sequences: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryRunReport {
    pub profile: Profile,
    pub subsample_flows: usize,
    pub benign_sequences: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub stages: Vec<DryRunStage>,
    pub parameters: usize,
    pub learning_rate: f64,
    pub seq_len: usize,
    pub test_seq_len: usize,
}

impl DryRunReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "profile            {:?}", self.profile).unwrap();
        writeln!(out, "parameters         {}", self.parameters).unwrap();
        writeln!(out, "learning rate      {:e}", self.learning_rate).unwrap();
        writeln!(out, "window (train/test) {}/{}", self.seq_len, self.test_seq_len).unwrap();
        writeln!(out, "subsample flows    {}", self.subsample_flows).unwrap();
        writeln!(
            out,
            "sequences          {} benign, {} labeled, {} test",
            self.benign_sequences, self.train_sequences, self.test_sequences
        )
        .unwrap();
        for s in &self.stages {
            writeln!(
                out,
                "stage {:<13} {:>5} iterations, batch {} sequences, probed {} -> loss {:.5}",
                s.name, s.configured_iterations, s.batch_sequences, s.probed_sequences, s.loss
            )
            .unwrap();
        }
        out
    }
}

/// Checks that the resolved paper profile still has its fixed settings.
pub fn check_paper_settings(settings: &RunSettings) -> Result<()> {
    let d = Profile::Paper.defaults();
    let counts: Vec<usize> = settings.schedule.stages.iter().map(|s| s.iterations).collect();
    let mut wrong = Vec::new();
    if counts != [d.stages.0, d.stages.1, d.stages.2] {
        wrong.push(format!("stages {counts:?}"));
    }
    if settings.train.adam.learning_rate != d.learning_rate {
        wrong.push(format!("learning rate {}", settings.train.adam.learning_rate));
    }
    if settings.seq_len != d.seq_len || settings.test_seq_len != d.test_seq_len {
        wrong.push(format!("windows {}/{}", settings.seq_len, settings.test_seq_len));
    }
    if settings.train.batch_size != d.batch_size {
        wrong.push(format!("batch size {}", settings.train.batch_size));
    }
    if settings.model.per_feature_dim != d.per_feature_dim
        || settings.model.layer_count != d.layers
        || settings.model.head_count != d.heads
    {
        wrong.push("model dimensions".into());
    }
    if wrong.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("paper profile was overridden: {}", wrong.join(", "))))
    }
}

/// Validates the schedule and data plumbing on a contiguous prefix holding
/// `fraction` of the flows: sequences are built at both window sizes, every
/// stage runs one optimizer step on a probe micro-batch at full model size,
/// and one test window is scored.
pub fn dry_run(settings: &RunSettings, data: &FlowDataset, fraction: f64) -> Result<DryRunReport> {
    if settings.profile == Profile::Paper {
        check_paper_settings(settings)?;
    }
    settings.schedule.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let take = ((data.len() as f64 * fraction).ceil() as usize).min(data.len());
    let prefix = FlowDataset::new(data.records[..take].to_vec(), data.provenance.clone());
    let tokens = TokenizedDataset::from_dataset(&settings.vocab, &prefix, "dry-run subsample")?;
    let benign = tokens.benign_only().sequences(settings.seq_len, &settings.vocab, true)?;
    let labeled = tokens.sequences(settings.seq_len, &settings.vocab, true)?;
    let test = tokens.sequences(settings.test_seq_len, &settings.vocab, true)?;
    if benign.is_empty() || labeled.is_empty() {
        return Err(Error::Precondition("subsample holds no benign flows".into()));
    }

    let probe = settings.train.micro_batch.unwrap_or(settings.train.batch_size).min(2).max(1);
    let probe_opts = TrainOptions {
        batch_size: probe,
        micro_batch: None,
        ..settings.train.clone()
    };
    let mut params = init_params::<f32>(&settings.model, settings.seeds.init)?;
    let mut stages = Vec::new();
    for stage in &settings.schedule.stages {
        let pool = if stage.kind == StageKind::MlmPretrain { benign.len() } else { labeled.len() };
        let first = iteration_batches(pool, 1, &settings.train)?;
        let one = Stage {
            iterations: 1,
            ..stage.clone()
        };
        let trace = match stage.kind {
            StageKind::MlmPretrain => {
                pretrain_mlm(&mut params, &benign, &one, &settings.masking, &settings.vocab, &probe_opts)?
            }
            _ => run_classification_stage(&mut params, &labeled, &one, &probe_opts)?,
        };
        stages.push(DryRunStage {
            name: stage.name.clone(),
            configured_iterations: stage.iterations,
            batch_sequences: first[0].len(),
            probed_sequences: probe.min(pool),
            loss: trace.last_loss(&stage.name).unwrap_or(f64::NAN),
        });
    }
    let window = settings.test_seq_len.min(tokens.len());
    predict_flows(&params, &settings.vocab, &tokens.flows[..window], settings.test_seq_len)?;
    Ok(DryRunReport {
        profile: settings.profile,
        subsample_flows: take,
        benign_sequences: benign.len(),
        train_sequences: labeled.len(),
        test_sequences: test.len(),
        stages,
        parameters: params.parameter_count(),
        learning_rate: settings.train.adam.learning_rate,
        seq_len: settings.seq_len,
        test_seq_len: settings.test_seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synthgen::{generate_corpus, SynthConfig};

    fn corpus(n: usize) -> FlowDataset {
        generate_corpus(&SynthConfig {
            total_flows: n,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn tiny_settings() -> RunSettings {
        let mut cfg = RunConfig::default();
        cfg.model.per_feature_dim = Some(2);
        cfg.schedule.mlm_pretrain = Some(3);
        cfg.schedule.head_only = Some(3);
        cfg.schedule.joint = Some(3);
        cfg.training.batch_size = Some(4);
        cfg.training.seq_len = Some(16);
        cfg.training.test_seq_len = Some(32);
        cfg.resolve().unwrap()
    }

    #[test]
    fn summary_counts_classes() {
        let data = corpus(2000);
        let s = IngestSummary::from_dataset(&data);
        assert_eq!(s.total(), 2000);
        assert_eq!(s.classes.values().sum::<usize>(), 2000);
        assert_eq!(s.classes["normal"], s.benign);
        let text = s.render();
        assert!(text.contains("portScan") && text.contains("total"), "{text}");
    }

    #[test]
    fn balanced_regime_matches_class_counts() {
        let v = Vocabulary::new(crate::discretizer::FeatureProfile::Full);
        let mut data = corpus(3000);
        data.records.truncate(2500);
        let t = TokenizedDataset::from_dataset(&v, &data, "c").unwrap();
        let b = balance_tokenized(&t, 4).unwrap();
        let (benign, malicious) = b.label_counts();
        assert_eq!(benign, malicious);
        assert_eq!(malicious, t.label_counts().1);
        assert_eq!(balance_tokenized(&t, 4).unwrap(), b);
    }

    #[test]
    fn pretrain_then_finetune_records_stages_and_seeds() {
        let s = tiny_settings();
        let data = TokenizedDataset::from_dataset(&s.vocab, &corpus(1500), "c").unwrap();
        let pre = pretrain(&s, &data).unwrap();
        assert_eq!(pre.manifest.stages.len(), 1);
        let tuned = finetune(&s, pre, &data).unwrap();
        let names: Vec<&str> = tuned.manifest.stages.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["mlm-pretrain", "head-only", "joint"]);
        assert_eq!(tuned.manifest.seed("init"), Some(s.seeds.init));
        assert_eq!(tuned.trace.records.len(), 9);
        let ev = evaluate(&s, &tuned.params, &s.vocab, &data, "t").unwrap();
        assert_eq!(ev.report.flows, 1500);
        let mut other = s.clone();
        other.model.per_feature_dim = 3;
        let pre = pretrain(&s, &data).unwrap();
        assert!(matches!(finetune(&other, pre, &data), Err(Error::Incompatible(_))));
    }

    #[test]
    fn dry_run_rejects_modified_paper_profile() {
        let mut cfg = RunConfig {
            profile: Profile::Paper,
            ..RunConfig::default()
        };
        cfg.schedule.joint = Some(401);
        let s = cfg.resolve().unwrap();
        let err = dry_run(&s, &corpus(500), 0.01).unwrap_err();
        assert!(err.to_string().contains("stages"), "{err}");
    }

    #[test]
    fn dry_run_small_profile() {
        let s = tiny_settings();
        let r = dry_run(&s, &corpus(4000), 0.1).unwrap();
        assert_eq!(r.subsample_flows, 400);
        assert_eq!(r.stages.len(), 3);
        assert!(r.stages.iter().all(|st| st.loss.is_finite()));
        assert_eq!(r.test_sequences, 400usize.div_ceil(32));
    }
}
