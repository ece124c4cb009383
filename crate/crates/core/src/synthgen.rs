//! Synthetic CIDDS-schema corpora in which some flows are identical at the
//! token level across classes and only their neighbourhood tells them apart.
//!
//! Two disjoint regions of token space are used. Probe-like flows (one or two
//! packets, small byte counts) form every attack template and every ambiguous
//! template; multi-packet sessions form the benign background. An ambiguous
//! template appears both in malicious bursts and as isolated benign singletons,
//! with equal flow counts per template, so its token tuple carries no label
//! information on its own. Isolated singletons never share a window of
//! `isolation_gap` consecutive flows with another flow of their template.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::discretizer::{DiscretizedFlow, FeatureProfile, Vocabulary};
use crate::error::{Error, Result};
use crate::ingest::{parse_flags, write_cidds, BinaryLabel, FlowDataset, FlowEndpoints, LabeledFlow, RawFlowRecord};

pub const SYNTH_MAGIC: &str = "FSNIDS-SYNTH v1";
const MAX_PORT: i64 = 65_535;
const EPHEMERAL_MIN: i64 = 1024;
/// Port-bin upper bounds above the ephemeral minimum.
const PORT_BIN_EDGES: [i64; 4] = [500, 40_000, 60_000, MAX_PORT];
const SERVICE_PORTS: [u16; 15] = [21, 22, 23, 25, 53, 80, 110, 111, 135, 139, 143, 443, 445, 993, 995];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    AttackBurst,
    IsolatedService,
    BackgroundNoise,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::AttackBurst => "attack-burst",
            PatternKind::IsolatedService => "isolated-service",
            PatternKind::BackgroundNoise => "background-noise",
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attack-burst" => Ok(PatternKind::AttackBurst),
            "isolated-service" => Ok(PatternKind::IsolatedService),
            "background-noise" => Ok(PatternKind::BackgroundNoise),
            other => Err(Error::Parse {
                line: 0,
                message: format!("unknown pattern kind {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortSide {
    Src,
    Dst,
}

/// A pattern and the prototype its flows are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub template_id: usize,
    pub kind: PatternKind,
    /// Inclusive burst-length range; (1, 1) for single-flow patterns.
    pub burst_length: (usize, usize),
    pub port_rotation: bool,
    pub feature_template: RawFlowRecord,
    pub label: BinaryLabel,
    /// Side carrying the ephemeral port and its inclusive value range.
    pub ephemeral: Option<(PortSide, u16, u16)>,
}

impl PatternSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PatternKind::AttackBurst => self.label == BinaryLabel::Malicious && self.burst_length.0 >= 3,
            PatternKind::IsolatedService => self.label == BinaryLabel::Benign,
            PatternKind::BackgroundNoise => self.label == BinaryLabel::Benign,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent pattern {:?} / {}", self.kind, self.label)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternMix {
    /// Share of non-ambiguous flows emitted as attack bursts.
    pub attack_burst: f64,
    /// Share of non-ambiguous flows emitted as benign background.
    pub background: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        PatternMix {
            attack_burst: 0.5,
            background: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    /// Added to every port ≥ 1024.
    pub port_offset: i64,
    /// Multiplies byte counts.
    pub byte_scale: f64,
}

impl DomainParams {
    pub fn identity() -> Self {
        DomainParams {
            port_offset: 0,
            byte_scale: 1.0,
        }
    }
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            port_offset: 3000,
            byte_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub total_flows: usize,
    /// Share of flows drawn from templates used by both classes.
    pub ambiguous_fraction: f64,
    pub mix: PatternMix,
    pub seed: u64,
    /// The shift the corpus is built to survive: ephemeral port ranges are
    /// chosen so this shift keeps every burst inside a single port bin.
    pub domain: DomainParams,
    pub burst_length: (usize, usize),
    pub ambiguous_templates: usize,
    pub attack_templates: usize,
    pub isolation_gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            total_flows: 100_000,
            ambiguous_fraction: 0.5,
            mix: PatternMix::default(),
            seed: 0,
            domain: DomainParams::default(),
            burst_length: (3, 8),
            ambiguous_templates: 64,
            attack_templates: 64,
            isolation_gap: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_flows == 0 {
            return fail("total_flows must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return fail(format!("ambiguous_fraction {} outside [0, 1]", self.ambiguous_fraction));
        }
        let PatternMix { attack_burst, background } = self.mix;
        if attack_burst < 0.0 || background < 0.0 || (attack_burst + background - 1.0).abs() > 1e-9 {
            return fail(format!("pattern mix weights must be non-negative and sum to 1: {:?}", self.mix));
        }
        if self.ambiguous_fraction > 0.0 && attack_burst == 0.0 {
            return fail("ambiguous flows need attack bursts, but the attack_burst weight is 0".into());
        }
        let (lo, hi) = self.burst_length;
        if lo < 3 || hi < lo || hi + 1 < 2 * lo {
            return fail(format!("burst_length {:?} must satisfy 3 <= min and 2*min - 1 <= max", self.burst_length));
        }
        if self.ambiguous_templates == 0 || self.attack_templates == 0 || self.isolation_gap == 0 {
            return fail("template counts and isolation_gap must be positive".into());
        }
        if !self.domain.byte_scale.is_finite() {
            return fail("byte_scale must be finite".into());
        }
        Ok(())
    }
}

/// Generation-time identity of one flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub kind: PatternKind,
    pub label: BinaryLabel,
    pub ambiguous: bool,
    /// Instance id shared by the flows of one burst; unique for singletons.
    pub pattern_id: usize,
    /// Template id for burst and isolated flows, none for background.
    pub template_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynthStats {
    pub ambiguous_flows: usize,
    pub bursts: usize,
    /// Placements that had to break the isolation gap.
    pub spacing_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dataset: FlowDataset,
    pub truth: Vec<GroundTruth>,
    pub patterns: Vec<PatternSpec>,
    pub stats: SynthStats,
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<RawFlowRecord> {
        self.dataset.records.iter().map(|r| r.record.clone()).collect()
    }

    pub fn ambiguous_mask(&self) -> Vec<bool> {
        self.truth.iter().map(|t| t.ambiguous).collect()
    }

    /// Lengths of every burst instance, sorted.
    pub fn burst_lengths(&self) -> Vec<usize> {
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        for t in self.truth.iter().filter(|t| t.kind == PatternKind::AttackBurst) {
            *counts.entry(t.pattern_id).or_default() += 1;
        }
        let mut v: Vec<usize> = counts.into_values().collect();
        v.sort_unstable();
        v
    }

    /// Flows `range` with their ground truth; pattern specs are shared.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SynthCorpus {
        let truth = self.truth[range.clone()].to_vec();
        let mut dataset = FlowDataset::new(self.dataset.records[range.clone()].to_vec(), self.dataset.provenance.clone());
        dataset.provenance.push(format!("flows {}..{}", range.start, range.end));
        dataset.stats.rows = dataset.len();
        let bursts = truth
            .iter()
            .enumerate()
            .filter(|(i, t)| t.kind == PatternKind::AttackBurst && (*i == 0 || truth[i - 1].pattern_id != t.pattern_id))
            .count();
        SynthCorpus {
            stats: SynthStats {
                ambiguous_flows: truth.iter().filter(|t| t.ambiguous).count(),
                bursts,
                spacing_violations: self.stats.spacing_violations,
            },
            dataset,
            truth,
            patterns: self.patterns.clone(),
        }
    }

    /// Writes the CSV and its `<csv>.truth` sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut csv = Vec::new();
        write_cidds(&mut csv, &self.records())?;
        let mut truth = Vec::new();
        write_truth(&mut truth, &self.truth)?;
        write_atomic(csv_path, &csv)?;
        write_atomic(&truth_path(csv_path), &truth)
    }
}

pub fn truth_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".truth");
    csv_path.with_file_name(name)
}

pub fn write_truth<W: Write>(mut w: W, truth: &[GroundTruth]) -> Result<()> {
    writeln!(w, "{SYNTH_MAGIC}")?;
    writeln!(w, "index\tkind\tlabel\tambiguous\tpattern_id\ttemplate_id")?;
    for (i, t) in truth.iter().enumerate() {
        let template = t.template_id.map_or("-".to_string(), |v| v.to_string());
        writeln!(
            w,
            "{i}\t{}\t{}\t{}\t{}\t{template}",
            t.kind, t.label, t.ambiguous as u8, t.pattern_id
        )?;
    }
    Ok(())
}

pub fn read_truth<R: BufRead>(r: R) -> Result<Vec<GroundTruth>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != SYNTH_MAGIC {
        return Err(Error::Corruption(format!("ground-truth file must start with {SYNTH_MAGIC:?}")));
    }
    lines.next().transpose()?;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let bad = |m: &str| Error::Parse {
            line: n + 3,
            message: format!("ground truth: {m}"),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        if f[0].parse::<usize>().ok() != Some(out.len()) {
            return Err(bad("indices must be consecutive from 0"));
        }
        out.push(GroundTruth {
            kind: f[1].parse()?,
            label: f[2].parse()?,
            ambiguous: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("ambiguous flag")),
            },
            pattern_id: f[4].parse().map_err(|_| bad("pattern_id"))?,
            template_id: match f[5] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad("template_id"))?),
            },
        });
    }
    Ok(out)
}

fn flags(text: &str) -> crate::ingest::TcpFlags {
    parse_flags(text).expect("valid flag literal")
}

/// Integer port ranges inside one ephemeral port bin that stay inside it
/// after adding `offset`.
fn shift_safe_ranges(offset: i64) -> Vec<(u16, u16)> {
    let mut out = Vec::new();
    for w in PORT_BIN_EDGES.windows(2) {
        let (bin_lo, bin_hi) = (w[0] + 1, w[1]);
        let lo = bin_lo.max(EPHEMERAL_MIN).max(bin_lo - offset).max(EPHEMERAL_MIN - offset);
        let hi = bin_hi.min(bin_hi - offset).min(MAX_PORT - offset);
        // wide enough to rotate through a burst
        if hi - lo >= 256 {
            out.push((lo as u16, hi as u16));
        }
    }
    out
}

fn endpoints(index: usize, malicious: bool, rng: &mut ChaCha8Rng) -> FlowEndpoints {
    let ms = index as u64 * 7;
    let first_seen = format!(
        "2017-03-15 {:02}:{:02}:{:02}.{:03}",
        (ms / 3_600_000) % 24,
        (ms / 60_000) % 60,
        (ms / 1000) % 60,
        ms % 1000
    );
    let peer = if malicious {
        format!("192.168.220.{}", rng.gen_range(2..250))
    } else {
        format!("192.168.200.{}", rng.gen_range(2..250))
    };
    FlowEndpoints {
        first_seen: Some(first_seen),
        src_ip: Some(peer),
        dst_ip: Some(format!("192.168.100.{}", rng.gen_range(2..250))),
    }
}

fn base_record(proto: &str, packets: u64, bytes: u64, duration: f64, flag_text: &str) -> RawFlowRecord {
    RawFlowRecord {
        duration,
        proto: proto.to_string(),
        src_pt: 0.0,
        dst_pt: 0.0,
        packets,
        bytes,
        flags: flags(flag_text),
        label: "normal".into(),
        attack_type: None,
        endpoints: FlowEndpoints::default(),
    }
}

/// A probe-like prototype: one or two packets, small byte count.
fn probe_template(rng: &mut ChaCha8Rng, ranges: &[(u16, u16)]) -> (RawFlowRecord, Option<(PortSide, u16, u16)>) {
    let roll: f64 = rng.gen();
    let packets = if rng.gen_bool(0.7) { 1 } else { 2 };
    let duration = if packets == 1 {
        0.0
    } else {
        rng.gen_range(1..=4) as f64 / 1000.0
    };
    if roll < 0.1 {
        let mut r = base_record("ICMP", packets, packets * rng.gen_range(28..=84), duration, "......");
        r.dst_pt = *[0.0, 3.3, 8.0, 11.0].choose(rng).unwrap();
        return (r, None);
    }
    let (proto, flag_text, per_packet) = if roll < 0.3 {
        ("UDP", "......", rng.gen_range(29..=75))
    } else {
        let f = *["....S.", ".A.R..", "...R..", ".A..S.", "....SF"].choose(rng).unwrap();
        ("TCP", f, *[40u64, 44, 46, 54, 58, 60].choose(rng).unwrap())
    };
    let mut r = base_record(proto, packets, packets * per_packet, duration, flag_text);
    let service = *SERVICE_PORTS.choose(rng).unwrap() as f64;
    let (lo, hi) = *ranges.choose(rng).unwrap();
    let side = if rng.gen_bool(0.5) { PortSide::Src } else { PortSide::Dst };
    match side {
        PortSide::Src => r.dst_pt = service,
        PortSide::Dst => r.src_pt = service,
    }
    (r, Some((side, lo, hi)))
}

/// A benign multi-packet session, drawn fresh for every background flow.
fn background_flow(rng: &mut ChaCha8Rng) -> RawFlowRecord {
    let packets: u64 = if rng.gen_bool(0.8) {
        rng.gen_range(3..=20)
    } else {
        rng.gen_range(21..=400)
    };
    let tcp = rng.gen_bool(0.75);
    let bytes = packets * rng.gen_range(60..=1400);
    let duration = (rng.gen_range(0.001f64..30.0) * 1000.0).round() / 1000.0;
    let flag_text = if tcp {
        *[".AP.SF", ".AP.S.", ".AP...", ".A..SF", ".A...."].choose(rng).unwrap()
    } else {
        "......"
    };
    let mut r = base_record(if tcp { "TCP" } else { "UDP" }, packets, bytes, duration, flag_text);
    let service = *SERVICE_PORTS.choose(rng).unwrap() as f64;
    let ephemeral = rng.gen_range(EPHEMERAL_MIN..=MAX_PORT) as f64;
    if rng.gen_bool(0.5) {
        (r.src_pt, r.dst_pt) = (ephemeral, service);
    } else {
        (r.src_pt, r.dst_pt) = (service, ephemeral);
    }
    r
}

fn set_ephemeral(r: &mut RawFlowRecord, eph: Option<(PortSide, u16, u16)>, port: u16) {
    match eph {
        Some((PortSide::Src, _, _)) => r.src_pt = port as f64,
        Some((PortSide::Dst, _, _)) => r.dst_pt = port as f64,
        None => {}
    }
}

/// Splits `total` into lengths within `[lo, hi]`.
fn split_bursts(total: usize, (lo, hi): (usize, usize), rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if total > 0 && total < lo {
        return Err(Error::Config(format!("{total} flows cannot form a burst of at least {lo}")));
    }
    let mut out = Vec::new();
    let mut rest = total;
    while rest > 0 {
        let mut k = rng.gen_range(lo..=hi);
        if rest < k + lo {
            k = if rest <= hi { rest } else { rest - lo };
        }
        out.push(k);
        rest -= k;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Burst { pattern: usize, len: usize },
    Isolated { pattern: usize },
    Background,
}

impl Event {
    fn pattern(&self, background: usize) -> usize {
        match *self {
            Event::Burst { pattern, .. } | Event::Isolated { pattern } => pattern,
            Event::Background => background,
        }
    }

    fn len(&self) -> usize {
        match *self {
            Event::Burst { len, .. } => len,
            _ => 1,
        }
    }

    fn isolated(&self) -> bool {
        matches!(self, Event::Isolated { .. })
    }
}

/// Orders events so that no isolated flow has another flow of its template
/// within `gap` positions. Greedy placement defers events that do not fit
/// yet; whatever is still stuck at the end is inserted at an earlier event
/// boundary, which only lengthens existing distances. Returns the order and
/// the number of events that could not be placed anywhere legally.
fn arrange(events: Vec<Event>, gap: usize, template_of: &[Option<usize>], rng: &mut ChaCha8Rng) -> (Vec<Event>, usize) {
    let background = template_of.len() - 1;
    let template = |e: &Event| template_of[e.pattern(background)];
    let templates = template_of.iter().flatten().max().map_or(0, |&t| t + 1);
    let mut last_any: Vec<Option<usize>> = vec![None; templates];
    let mut last_isolated: Vec<Option<usize>> = vec![None; templates];
    let far = |last: Option<usize>, pos: usize| last.map_or(true, |p| pos - p >= gap);

    let mut pending: VecDeque<Event> = events.into();
    let mut order = Vec::with_capacity(pending.len());
    let mut stuck = Vec::new();
    let mut pos = 0usize;
    while !pending.is_empty() {
        let fits = |e: &Event| match template(e) {
            None => true,
            Some(t) if e.isolated() => far(last_any[t], pos),
            Some(t) => far(last_isolated[t], pos),
        };
        let Some(i) = pending.iter().position(fits) else {
            stuck.push(pending.pop_front().unwrap());
            continue;
        };
        let e = pending.remove(i).unwrap();
        pos += e.len();
        if let Some(t) = template(&e) {
            last_any[t] = Some(pos - 1);
            if e.isolated() {
                last_isolated[t] = Some(pos - 1);
            }
        }
        order.push(e);
    }

    let mut violations = 0;
    for e in stuck {
        let t = template(&e).expect("only templated events get stuck");
        let mut starts = Vec::with_capacity(order.len() + 1);
        let mut p = 0;
        for o in &order {
            starts.push(p);
            p += o.len();
        }
        starts.push(p);
        let related: Vec<usize> = (0..order.len())
            .filter(|&j| template(&order[j]) == Some(t) && (e.isolated() || order[j].isolated()))
            .collect();
        let legal: Vec<usize> = (0..=order.len())
            .filter(|&b| {
                let p = starts[b];
                related.iter().all(|&j| {
                    if j < b {
                        p - (starts[j] + order[j].len() - 1) >= gap
                    } else {
                        starts[j] + 1 >= p + gap
                    }
                })
            })
            .collect();
        let b = match legal.choose(rng) {
            Some(&b) => b,
            None => {
                violations += 1;
                order.len()
            }
        };
        order.insert(b, e);
    }
    (order, violations)
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = Vocabulary::new(FeatureProfile::Full);
    let ranges = shift_safe_ranges(config.domain.port_offset);
    if ranges.is_empty() {
        return Err(Error::Config(format!(
            "port offset {} leaves no ephemeral range that stays within one bin",
            config.domain.port_offset
        )));
    }

    // templates: ambiguous ids first, then attack-only ids
    let template_count = config.ambiguous_templates + config.attack_templates;
    let mut seen: HashSet<DiscretizedFlow> = HashSet::new();
    let mut templates = Vec::with_capacity(template_count);
    let mut attempts = 0;
    while templates.len() < template_count {
        attempts += 1;
        if attempts > 1000 * template_count {
            return Err(Error::Config(format!(
                "cannot draw {template_count} distinct probe templates"
            )));
        }
        let (proto, eph) = probe_template(&mut rng, &ranges);
        let mut probe = proto.clone();
        if let Some((_, lo, _)) = eph {
            set_ephemeral(&mut probe, eph, lo);
        }
        if seen.insert(vocab.discretize_flow(&probe)?) {
            templates.push((proto, eph));
        }
    }

    let mut patterns = Vec::new();
    let mut template_of = Vec::new();
    for (id, (proto, eph)) in templates.iter().enumerate() {
        let ambiguous = id < config.ambiguous_templates;
        let mut attack = proto.clone();
        attack.label = "attacker".into();
        attack.attack_type = Some(if attack.proto == "ICMP" { "pingScan" } else { "portScan" }.into());
        patterns.push(PatternSpec {
            template_id: id,
            kind: PatternKind::AttackBurst,
            burst_length: config.burst_length,
            port_rotation: eph.is_some(),
            feature_template: attack,
            label: BinaryLabel::Malicious,
            ephemeral: *eph,
        });
        template_of.push(ambiguous.then_some(id));
        if ambiguous {
            patterns.push(PatternSpec {
                template_id: id,
                kind: PatternKind::IsolatedService,
                burst_length: (1, 1),
                port_rotation: false,
                feature_template: proto.clone(),
                label: BinaryLabel::Benign,
                ephemeral: *eph,
            });
            template_of.push(Some(id));
        }
    }
    let background_pattern = patterns.len();
    patterns.push(PatternSpec {
        template_id: template_count,
        kind: PatternKind::BackgroundNoise,
        burst_length: (1, 1),
        port_rotation: false,
        feature_template: background_flow(&mut ChaCha8Rng::seed_from_u64(config.seed)),
        label: BinaryLabel::Benign,
        ephemeral: None,
    });
    template_of.push(None);
    for p in &patterns {
        p.validate()?;
    }
    let burst_pattern = |t: usize| {
        patterns
            .iter()
            .position(|p| p.template_id == t && p.kind == PatternKind::AttackBurst)
            .unwrap()
    };

    let half_ambiguous = (config.total_flows as f64 * config.ambiguous_fraction / 2.0).round() as usize;
    let rest = config.total_flows - 2 * half_ambiguous;
    let attack_flows = (rest as f64 * config.mix.attack_burst).round() as usize;
    let background_flows = rest - attack_flows;

    let mut events = Vec::new();
    let mut isolated_per_template = vec![0usize; config.ambiguous_templates];
    for len in split_bursts(half_ambiguous, config.burst_length, &mut rng)? {
        let t = rng.gen_range(0..config.ambiguous_templates);
        isolated_per_template[t] += len;
        events.push(Event::Burst {
            pattern: burst_pattern(t),
            len,
        });
    }
    for (t, &n) in isolated_per_template.iter().enumerate() {
        let pattern = burst_pattern(t) + 1;
        events.extend(std::iter::repeat(Event::Isolated { pattern }).take(n));
    }
    for len in split_bursts(attack_flows, config.burst_length, &mut rng)? {
        let t = config.ambiguous_templates + rng.gen_range(0..config.attack_templates);
        events.push(Event::Burst {
            pattern: burst_pattern(t),
            len,
        });
    }
    events.extend(std::iter::repeat(Event::Background).take(background_flows));
    events.shuffle(&mut rng);

    let (order, spacing_violations) = arrange(events, config.isolation_gap, &template_of, &mut rng);
    let mut records = Vec::with_capacity(config.total_flows);
    let mut truth = Vec::with_capacity(config.total_flows);
    let mut stats = SynthStats {
        ambiguous_flows: 2 * half_ambiguous,
        spacing_violations,
        ..SynthStats::default()
    };
    for (instance, event) in order.into_iter().enumerate() {
        let (pattern, len) = match event {
            Event::Burst { pattern, len } => (pattern, len),
            Event::Isolated { pattern } => (pattern, 1),
            Event::Background => (background_pattern, 1),
        };
        let spec = &patterns[pattern];
        let ambiguous = template_of[pattern].is_some();
        let start_port = spec.ephemeral.map(|(_, lo, hi)| {
            let span = (hi - lo) as usize + 1;
            lo + rng.gen_range(0..span.saturating_sub(len).max(1)) as u16
        });
        for k in 0..len {
            let mut record = match spec.kind {
                PatternKind::BackgroundNoise => background_flow(&mut rng),
                _ => spec.feature_template.clone(),
            };
            if let Some(start) = start_port {
                // bursts step through consecutive ports; singletons land anywhere in range
                set_ephemeral(&mut record, spec.ephemeral, start + k as u16);
            }
            record.endpoints = endpoints(records.len(), spec.label == BinaryLabel::Malicious, &mut rng);
            truth.push(GroundTruth {
                kind: spec.kind,
                label: spec.label,
                ambiguous,
                pattern_id: instance,
                template_id: (spec.kind != PatternKind::BackgroundNoise).then_some(spec.template_id),
            });
            records.push(LabeledFlow {
                record,
                label: spec.label,
            });
        }
        if spec.kind == PatternKind::AttackBurst {
            stats.bursts += 1;
        }
    }
    if stats.spacing_violations > 0 {
        warn!(
            "{} placements broke the isolation gap of {}; raise ambiguous_templates",
            stats.spacing_violations, config.isolation_gap
        );
    }
    let mut dataset = FlowDataset::new(records, vec![format!("synthgen seed {}", config.seed)]);
    dataset.stats.rows = dataset.len();
    Ok(SynthCorpus {
        dataset,
        truth,
        patterns,
        stats,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShiftStats {
    /// Values that fell outside their domain and were clamped.
    pub clamped: usize,
    /// Flows whose token tuple changed under the full vocabulary.
    pub flows_rebinned: usize,
}

fn shift_port(port: f64, offset: i64, clamped: &mut usize) -> f64 {
    if port < EPHEMERAL_MIN as f64 || port.fract() != 0.0 {
        return port;
    }
    let shifted = port as i64 + offset;
    if !(0..=MAX_PORT).contains(&shifted) {
        *clamped += 1;
    }
    shifted.clamp(0, MAX_PORT) as f64
}

/// Moves ephemeral ports by `port_offset` and scales byte counts. Order,
/// labels, ground truth and everything else are untouched.
pub fn shift_domain(corpus: &SynthCorpus, params: &DomainParams) -> Result<(SynthCorpus, ShiftStats)> {
    if !params.byte_scale.is_finite() {
        return Err(Error::Config("byte_scale must be finite".into()));
    }
    let vocab = Vocabulary::new(FeatureProfile::Full);
    let mut out = corpus.clone();
    let mut stats = ShiftStats::default();
    for flow in &mut out.dataset.records {
        let before = vocab.discretize_flow(&flow.record)?;
        let r = &mut flow.record;
        r.src_pt = shift_port(r.src_pt, params.port_offset, &mut stats.clamped);
        r.dst_pt = shift_port(r.dst_pt, params.port_offset, &mut stats.clamped);
        let bytes = (r.bytes as f64 * params.byte_scale).round();
        if bytes < 0.0 {
            stats.clamped += 1;
        }
        r.bytes = bytes.max(0.0) as u64;
        if vocab.discretize_flow(r)? != before {
            stats.flows_rebinned += 1;
        }
    }
    out.dataset.provenance.push(format!(
        "shifted: ports +{} bytes x{}",
        params.port_offset, params.byte_scale
    ));
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::Feature;
    use crate::evaluator::{BaselineOptions, ContextFreeBaseline};
    use std::collections::HashMap;

    fn small(seed: u64, ambiguous: f64) -> SynthConfig {
        SynthConfig {
            total_flows: 8000,
            ambiguous_fraction: ambiguous,
            seed,
            ..SynthConfig::default()
        }
    }

    fn tokens(c: &SynthCorpus) -> Vec<DiscretizedFlow> {
        let v = Vocabulary::new(FeatureProfile::Full);
        c.dataset.records.iter().map(|r| v.discretize_flow(&r.record).unwrap()).collect()
    }

    #[test]
    fn counts_and_labels_follow_the_config() {
        let c = generate_corpus(&small(1, 0.5)).unwrap();
        assert_eq!(c.dataset.len(), 8000);
        assert_eq!(c.stats.ambiguous_flows, 4000);
        assert_eq!(c.ambiguous_mask().iter().filter(|&&a| a).count(), 4000);
        assert_eq!(c.dataset.label_counts(), (4000, 4000));
        assert_eq!(c.stats.spacing_violations, 0);
        for (t, r) in c.truth.iter().zip(&c.dataset.records) {
            assert_eq!(t.label, r.label);
            assert_eq!(crate::ingest::map_label_binary(&r.record.label), r.label);
            let expected = match t.kind {
                PatternKind::AttackBurst => BinaryLabel::Malicious,
                _ => BinaryLabel::Benign,
            };
            assert_eq!(t.label, expected);
        }
    }

    #[test]
    fn ambiguous_tuples_split_evenly_and_stay_disjoint() {
        let c = generate_corpus(&small(2, 0.5)).unwrap();
        let toks = tokens(&c);
        let mut per_tuple: HashMap<&DiscretizedFlow, (usize, usize, bool)> = HashMap::new();
        for ((tok, t), flow) in toks.iter().zip(&c.truth).zip(&c.dataset.records) {
            let e = per_tuple.entry(tok).or_default();
            match flow.label {
                BinaryLabel::Benign => e.0 += 1,
                BinaryLabel::Malicious => e.1 += 1,
            }
            e.2 |= t.ambiguous;
        }
        for &(b, m, ambiguous) in per_tuple.values() {
            if ambiguous {
                assert_eq!(b, m);
            } else {
                assert!(b == 0 || m == 0, "non-ambiguous tuple used by both classes");
            }
        }
    }

    #[test]
    fn bursts_are_contiguous_and_isolated_flows_are_alone() {
        let cfg = small(3, 0.5);
        let c = generate_corpus(&cfg).unwrap();
        let toks = tokens(&c);
        for (i, t) in c.truth.iter().enumerate() {
            if t.kind == PatternKind::IsolatedService {
                let lo = i.saturating_sub(cfg.isolation_gap - 1);
                let hi = (i + cfg.isolation_gap).min(c.truth.len());
                let same = (lo..hi).filter(|&j| toks[j] == toks[i]).count();
                assert_eq!(same, 1, "isolated flow {i} has a twin within the gap");
            }
        }
        let mut i = 0;
        while i < c.truth.len() {
            let t = &c.truth[i];
            let mut j = i;
            while j < c.truth.len() && c.truth[j].pattern_id == t.pattern_id {
                assert_eq!(toks[j], toks[i]);
                j += 1;
            }
            if t.kind == PatternKind::AttackBurst {
                assert!((3..=8).contains(&(j - i)));
            } else {
                assert_eq!(j - i, 1);
            }
            i = j;
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_corpus(&small(7, 0.3)).unwrap();
        let b = generate_corpus(&small(7, 0.3)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(8, 0.3)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn infeasible_mixes_are_rejected() {
        let mut cfg = small(0, 1.0);
        cfg.mix = PatternMix {
            attack_burst: 0.0,
            background: 1.0,
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = small(0, 0.5);
        cfg.mix.attack_burst = 0.7;
        assert!(generate_corpus(&cfg).is_err());
        let mut cfg = small(0, 0.5);
        cfg.burst_length = (2, 5);
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn baseline_separates_unambiguous_corpus() {
        let c = generate_corpus(&small(4, 0.0)).unwrap();
        let v = Vocabulary::new(FeatureProfile::Full);
        let toks = tokens(&c);
        let labels = c.dataset.labels();
        let m = ContextFreeBaseline::train(&v, &toks, &labels, &BaselineOptions::default()).unwrap();
        let acc = toks.iter().zip(&labels).filter(|(f, &l)| m.predict(f) == l).count() as f64 / toks.len() as f64;
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn fully_ambiguous_corpus_keeps_baseline_at_chance() {
        let v = Vocabulary::new(FeatureProfile::Full);
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut cfg = small(seed, 1.0);
            cfg.total_flows = 4000;
            let c = generate_corpus(&cfg).unwrap();
            assert_eq!(c.dataset.label_counts(), (2000, 2000));
            let toks = tokens(&c);
            let labels = c.dataset.labels();
            let m = ContextFreeBaseline::train(&v, &toks, &labels, &BaselineOptions::default()).unwrap();
            let acc = toks.iter().zip(&labels).filter(|(f, &l)| m.predict(f) == l).count() as f64 / 4000.0;
            accs.push(acc);
        }
        let sigma = (0.25f64 / 4000.0).sqrt();
        assert!(accs.iter().all(|&a| a <= 0.5 + 3.0 * sigma), "{accs:?}");
    }

    #[test]
    fn slices_keep_truth_aligned() {
        let c = generate_corpus(&small(11, 0.5)).unwrap();
        let (a, b) = (c.slice(0..6000), c.slice(6000..8000));
        assert_eq!(a.dataset.len() + b.dataset.len(), 8000);
        assert_eq!(b.truth[..], c.truth[6000..]);
        assert_eq!(b.dataset.records[..], c.dataset.records[6000..]);
        assert_eq!(a.stats.ambiguous_flows + b.stats.ambiguous_flows, c.stats.ambiguous_flows);
    }

    #[test]
    fn zero_shift_is_identity() {
        let c = generate_corpus(&small(5, 0.5)).unwrap();
        let (s, stats) = shift_domain(&c, &DomainParams::identity()).unwrap();
        assert_eq!(s.records(), c.records());
        assert_eq!(stats, ShiftStats::default());
    }

    #[test]
    fn shift_preserves_structure_and_moves_bins() {
        let c = generate_corpus(&small(6, 0.5)).unwrap();
        let (s, stats) = shift_domain(&c, &DomainParams::default()).unwrap();
        assert_eq!(s.truth, c.truth);
        assert_eq!(s.dataset.labels(), c.dataset.labels());
        assert_eq!(s.burst_lengths(), c.burst_lengths());
        assert!(stats.flows_rebinned > c.dataset.len() / 2, "{stats:?}");
        // every burst still shares one token tuple
        let toks = tokens(&s);
        for w in s.truth.windows(2).enumerate().filter(|(_, w)| w[0].pattern_id == w[1].pattern_id) {
            assert_eq!(toks[w.0], toks[w.0 + 1]);
        }
    }

    #[test]
    fn byte_scale_example_bins() {
        let v = Vocabulary::new(FeatureProfile::Full);
        let bytes = v.specs().iter().position(|s| s.feature == Feature::Bytes).unwrap();
        let spec = &v.specs()[bytes];
        assert_eq!(spec.discretize_value(300.0).unwrap(), 7);
        assert_eq!(spec.discretize_value(1200.0).unwrap(), 12);
    }

    #[test]
    fn negative_shift_clamps_and_counts() {
        let c = generate_corpus(&small(9, 0.2)).unwrap();
        let (s, stats) = shift_domain(
            &c,
            &DomainParams {
                port_offset: -70_000,
                byte_scale: -1.0,
            },
        )
        .unwrap();
        assert!(stats.clamped > 0);
        assert!(s.dataset.records.iter().all(|r| r.record.src_pt >= 0.0 && r.record.dst_pt >= 0.0));
        assert!(s.dataset.records.iter().all(|r| r.record.bytes == 0));
    }

    #[test]
    fn csv_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(10, 0.5);
        cfg.total_flows = 500;
        let c = generate_corpus(&cfg).unwrap();
        let path = dir.path().join("corpus.csv");
        c.write(&path).unwrap();
        let back = crate::ingest::parse_cidds_csv(&path, true).unwrap();
        assert_eq!(back.labels(), c.dataset.labels());
        let v = Vocabulary::new(FeatureProfile::Full);
        for (a, b) in back.records.iter().zip(&c.dataset.records) {
            assert_eq!(v.discretize_flow(&a.record).unwrap(), v.discretize_flow(&b.record).unwrap());
        }
        let truth = read_truth(std::io::BufReader::new(std::fs::File::open(truth_path(&path)).unwrap())).unwrap();
        assert_eq!(truth, c.truth);
    }
}
