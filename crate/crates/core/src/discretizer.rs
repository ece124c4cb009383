//! Per-feature binning of flow records into token indices.
//!
//! Thresholds follow the fixed bin table used for CIDDS (inclusive upper
//! bounds). Each feature owns its own token space: ids `0..real` are real
//! bins, `real` is MASK and `real + 1` is PAD.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::ingest::RawFlowRecord;

pub const VOCAB_HEADER: &str = "FSNIDS-VOCAB v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    Duration,
    Proto,
    SrcPt,
    DstPt,
    Packets,
    Bytes,
    Flags,
}

impl Feature {
    /// Column order of the CIDDS export, which is also the token order.
    pub const ALL: [Feature; 7] = [
        Feature::Duration,
        Feature::Proto,
        Feature::SrcPt,
        Feature::DstPt,
        Feature::Packets,
        Feature::Bytes,
        Feature::Flags,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Duration => "Duration",
            Feature::Proto => "Proto",
            Feature::SrcPt => "Src Pt",
            Feature::DstPt => "Dst Pt",
            Feature::Packets => "Packets",
            Feature::Bytes => "Bytes",
            Feature::Flags => "Flags",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace() && *c != '-' && *c != '_').collect();
        Feature::ALL
            .into_iter()
            .find(|f| f.name().replace(' ', "").eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::Config(format!("unknown feature {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BinKind {
    /// Ascending inclusive upper bounds, the last one `+inf`.
    Numeric { upper_bounds: Vec<f64> },
    /// Named categories plus one trailing out-of-vocabulary bucket.
    Categorical { categories: Vec<String> },
    /// The 64 combinations of the six TCP flag bits.
    FlagSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub feature: Feature,
    pub kind: BinKind,
}

impl BinSpec {
    pub fn numeric(feature: Feature, upper_bounds: Vec<f64>) -> Result<Self> {
        if upper_bounds.is_empty() {
            return Err(Error::Config(format!("{feature}: no bins")));
        }
        if upper_bounds.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Config(format!("{feature}: upper bounds must be strictly ascending")));
        }
        if *upper_bounds.last().unwrap() != f64::INFINITY {
            return Err(Error::Config(format!("{feature}: last upper bound must be +inf")));
        }
        Ok(BinSpec {
            feature,
            kind: BinKind::Numeric { upper_bounds },
        })
    }

    pub fn categorical(feature: Feature, categories: Vec<String>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Config(format!("{feature}: empty category list")));
        }
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(Error::Config(format!("{feature}: duplicate category {c:?}")));
            }
        }
        Ok(BinSpec {
            feature,
            kind: BinKind::Categorical { categories },
        })
    }

    /// Number of real (non-special) tokens.
    pub fn real_tokens(&self) -> usize {
        match &self.kind {
            BinKind::Numeric { upper_bounds } => upper_bounds.len(),
            BinKind::Categorical { categories } => categories.len() + 1,
            BinKind::FlagSet => 64,
        }
    }

    /// Bin of a numeric value: the smallest `i` with `value <= upper_bounds[i]`.
    pub fn discretize_value(&self, value: f64) -> Result<usize> {
        match &self.kind {
            BinKind::Numeric { upper_bounds } => {
                if value.is_nan() || value < 0.0 {
                    return Err(Error::Domain(format!(
                        "{}: value {value} is not a non-negative number",
                        self.feature
                    )));
                }
                Ok(upper_bounds.partition_point(|&upper| upper < value))
            }
            BinKind::FlagSet => {
                if value.fract() != 0.0 || !(0.0..64.0).contains(&value) {
                    return Err(Error::Domain(format!("{}: {value} is not a 6-bit flag value", self.feature)));
                }
                Ok(value as usize)
            }
            BinKind::Categorical { .. } => Err(Error::Domain(format!(
                "{} is categorical; use discretize_category",
                self.feature
            ))),
        }
    }

    /// Index of a category name, or the OOV bucket for anything unlisted.
    pub fn discretize_category(&self, name: &str) -> Result<usize> {
        match &self.kind {
            BinKind::Categorical { categories } => {
                let name = name.trim();
                Ok(categories.iter().position(|c| c == name).unwrap_or(categories.len()))
            }
            _ => Err(Error::Domain(format!("{} is not categorical", self.feature))),
        }
    }
}

/// Bin table for all seven CIDDS features.
pub fn build_default_bins() -> Vec<BinSpec> {
    let inf = f64::INFINITY;
    let ports = vec![50.0, 60.0, 100.0, 400.0, 500.0, 40000.0, 60000.0, inf];
    vec![
        BinSpec::numeric(
            Feature::Duration,
            vec![0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.01, 0.04, 1.0, 10.0, 100.0, inf],
        )
        .unwrap(),
        BinSpec::categorical(
            Feature::Proto,
            ["TCP", "UDP", "GRE", "ICMP", "IGMP"].map(String::from).to_vec(),
        )
        .unwrap(),
        BinSpec::numeric(Feature::SrcPt, ports.clone()).unwrap(),
        BinSpec::numeric(Feature::DstPt, ports).unwrap(),
        BinSpec::numeric(Feature::Packets, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 10.0, 20.0, inf]).unwrap(),
        BinSpec::numeric(
            Feature::Bytes,
            vec![
                50.0, 60.0, 70.0, 90.0, 100.0, 110.0, 200.0, 300.0, 400.0, 500.0, 700.0, 1000.0, 5000.0, inf,
            ],
        )
        .unwrap(),
        BinSpec {
            feature: Feature::Flags,
            kind: BinKind::FlagSet,
        },
    ]
}

/// Which features feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureProfile {
    /// All seven binned features.
    Full,
    /// Six features (768 = 6 × 128 at paper-profile widths); one feature dropped.
    SixFeature { dropped: Feature },
}

impl FeatureProfile {
    pub fn id(&self) -> String {
        match self {
            FeatureProfile::Full => "full7".to_string(),
            FeatureProfile::SixFeature { dropped } => {
                format!("six-drop-{}", dropped.name().replace(' ', "").to_lowercase())
            }
        }
    }

    pub fn parse_id(id: &str) -> Result<Self> {
        if id == "full7" {
            return Ok(FeatureProfile::Full);
        }
        if let Some(rest) = id.strip_prefix("six-drop-") {
            return Ok(FeatureProfile::SixFeature { dropped: rest.parse()? });
        }
        Err(Error::Config(format!("unknown feature profile {id:?}")))
    }

    pub fn features(&self) -> Vec<Feature> {
        match self {
            FeatureProfile::Full => Feature::ALL.to_vec(),
            FeatureProfile::SixFeature { dropped } => {
                Feature::ALL.into_iter().filter(|f| f != dropped).collect()
            }
        }
    }
}

impl fmt::Display for FeatureProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

pub type TokenId = u16;

/// A flow as one token per active feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiscretizedFlow {
    pub tokens: SmallVec<[TokenId; 8]>,
}

impl DiscretizedFlow {
    pub fn new(tokens: impl IntoIterator<Item = TokenId>) -> Self {
        DiscretizedFlow {
            tokens: tokens.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Active bin specs in token order, with MASK/PAD ids per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    profile: FeatureProfile,
    specs: Vec<BinSpec>,
}

impl Vocabulary {
    pub fn new(profile: FeatureProfile) -> Self {
        let features = profile.features();
        let specs = build_default_bins()
            .into_iter()
            .filter(|s| features.contains(&s.feature))
            .collect();
        Vocabulary { profile, specs }
    }

    pub fn with_specs(profile: FeatureProfile, specs: Vec<BinSpec>) -> Result<Self> {
        let expected = profile.features();
        let got: Vec<Feature> = specs.iter().map(|s| s.feature).collect();
        if expected != got {
            return Err(Error::Config(format!(
                "profile {profile} expects features {expected:?}, got {got:?}"
            )));
        }
        Ok(Vocabulary { profile, specs })
    }

    pub fn profile(&self) -> FeatureProfile {
        self.profile
    }

    pub fn specs(&self) -> &[BinSpec] {
        &self.specs
    }

    pub fn feature_count(&self) -> usize {
        self.specs.len()
    }

    pub fn real_tokens(&self, feature: usize) -> usize {
        self.specs[feature].real_tokens()
    }

    pub fn mask_id(&self, feature: usize) -> TokenId {
        self.real_tokens(feature) as TokenId
    }

    pub fn pad_id(&self, feature: usize) -> TokenId {
        self.real_tokens(feature) as TokenId + 1
    }

    /// Total token-space size (real + MASK + PAD).
    pub fn total_tokens(&self, feature: usize) -> usize {
        self.real_tokens(feature) + 2
    }

    pub fn real_sizes(&self) -> Vec<usize> {
        (0..self.feature_count()).map(|f| self.real_tokens(f)).collect()
    }

    pub fn total_sizes(&self) -> Vec<usize> {
        (0..self.feature_count()).map(|f| self.total_tokens(f)).collect()
    }

    pub fn pad_flow(&self) -> DiscretizedFlow {
        DiscretizedFlow::new((0..self.feature_count()).map(|f| self.pad_id(f)))
    }

    pub fn mask_flow(&self) -> DiscretizedFlow {
        DiscretizedFlow::new((0..self.feature_count()).map(|f| self.mask_id(f)))
    }

    pub fn is_pad(&self, flow: &DiscretizedFlow) -> bool {
        flow.tokens
            .iter()
            .enumerate()
            .all(|(f, &t)| t == self.pad_id(f))
    }

    pub fn discretize_flow(&self, record: &RawFlowRecord) -> Result<DiscretizedFlow> {
        let mut tokens = SmallVec::new();
        for spec in &self.specs {
            let token = match spec.feature {
                Feature::Duration => spec.discretize_value(record.duration)?,
                Feature::Proto => spec.discretize_category(&record.proto)?,
                Feature::SrcPt => spec.discretize_value(record.src_pt)?,
                Feature::DstPt => spec.discretize_value(record.dst_pt)?,
                Feature::Packets => spec.discretize_value(record.packets as f64)?,
                Feature::Bytes => spec.discretize_value(record.bytes as f64)?,
                Feature::Flags => record.flags.bits() as usize,
            };
            tokens.push(token as TokenId);
        }
        Ok(DiscretizedFlow { tokens })
    }

    /// Checks every token is within its feature's full token space.
    pub fn check_flow(&self, flow: &DiscretizedFlow) -> Result<()> {
        if flow.len() != self.feature_count() {
            return Err(Error::Index(format!(
                "flow has {} tokens, vocabulary has {} features",
                flow.len(),
                self.feature_count()
            )));
        }
        for (f, &t) in flow.tokens.iter().enumerate() {
            if t as usize >= self.total_tokens(f) {
                return Err(Error::Index(format!(
                    "token {t} out of range for feature {} (size {})",
                    self.specs[f].feature,
                    self.total_tokens(f)
                )));
            }
        }
        Ok(())
    }

    /// Key-value manifest text; stable so its digest identifies the binning.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{VOCAB_HEADER}").unwrap();
        writeln!(out, "profile = {}", self.profile.id()).unwrap();
        let names: Vec<&str> = self.specs.iter().map(|s| s.feature.name()).collect();
        writeln!(out, "features = {}", names.join(",")).unwrap();
        for (i, spec) in self.specs.iter().enumerate() {
            writeln!(out, "feature.{i}.name = {}", spec.feature.name()).unwrap();
            match &spec.kind {
                BinKind::Numeric { upper_bounds } => {
                    let bounds: Vec<String> = upper_bounds.iter().map(|b| format_bound(*b)).collect();
                    writeln!(out, "feature.{i}.kind = numeric").unwrap();
                    writeln!(out, "feature.{i}.upper_bounds = {}", bounds.join(",")).unwrap();
                }
                BinKind::Categorical { categories } => {
                    writeln!(out, "feature.{i}.kind = categorical").unwrap();
                    writeln!(out, "feature.{i}.categories = {}", categories.join(",")).unwrap();
                }
                BinKind::FlagSet => writeln!(out, "feature.{i}.kind = flags").unwrap(),
            }
            writeln!(out, "feature.{i}.real_tokens = {}", self.real_tokens(i)).unwrap();
            writeln!(out, "feature.{i}.mask_id = {}", self.mask_id(i)).unwrap();
            writeln!(out, "feature.{i}.pad_id = {}", self.pad_id(i)).unwrap();
        }
        out
    }

    /// Hex SHA-256 of [`Vocabulary::manifest`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(VOCAB_HEADER) {
            return Err(Error::Corruption(format!("vocabulary manifest must start with {VOCAB_HEADER:?}")));
        }
        let mut entries = std::collections::BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corruption(format!("bad manifest line {line:?}")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            entries
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Corruption(format!("manifest missing key {k:?}")))
        };
        let profile = FeatureProfile::parse_id(&get("profile")?)?;
        let count = get("features")?.split(',').count();
        let mut specs = Vec::with_capacity(count);
        for i in 0..count {
            let feature: Feature = get(&format!("feature.{i}.name"))?.parse()?;
            let spec = match get(&format!("feature.{i}.kind"))?.as_str() {
                "numeric" => {
                    let bounds = get(&format!("feature.{i}.upper_bounds"))?
                        .split(',')
                        .map(parse_bound)
                        .collect::<Result<Vec<f64>>>()?;
                    BinSpec::numeric(feature, bounds)?
                }
                "categorical" => BinSpec::categorical(
                    feature,
                    get(&format!("feature.{i}.categories"))?
                        .split(',')
                        .map(String::from)
                        .collect(),
                )?,
                "flags" => BinSpec {
                    feature,
                    kind: BinKind::FlagSet,
                },
                other => return Err(Error::Corruption(format!("unknown bin kind {other:?}"))),
            };
            specs.push(spec);
        }
        let vocab = Vocabulary::with_specs(profile, specs)?;
        if vocab.manifest() != normalize_manifest(text) {
            return Err(Error::Corruption("vocabulary manifest is not in canonical form".into()));
        }
        Ok(vocab)
    }
}

fn normalize_manifest(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match line.split_once('=') {
            Some((k, v)) => writeln!(out, "{} = {}", k.trim(), v.trim()).unwrap(),
            None => writeln!(out, "{}", line.trim()).unwrap(),
        }
    }
    out
}

fn format_bound(b: f64) -> String {
    if b.is_infinite() {
        "inf".to_string()
    } else {
        format!("{b}")
    }
}

fn parse_bound(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        t => t
            .parse()
            .map_err(|_| Error::Corruption(format!("bad bin bound {t:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_flags, FlowEndpoints};

    fn record(duration: f64, proto: &str, src: f64, dst: f64, packets: u64, bytes: u64, flags: &str) -> RawFlowRecord {
        RawFlowRecord {
            duration,
            proto: proto.into(),
            src_pt: src,
            dst_pt: dst,
            packets,
            bytes,
            flags: parse_flags(flags).unwrap(),
            label: "normal".into(),
            attack_type: None,
            endpoints: FlowEndpoints::default(),
        }
    }

    #[test]
    fn default_bin_table() {
        let bins = build_default_bins();
        let sizes: Vec<usize> = bins.iter().map(|b| b.real_tokens()).collect();
        assert_eq!(sizes, vec![12, 6, 8, 8, 9, 14, 64]);
        assert_eq!(
            bins[0].kind,
            BinKind::Numeric {
                upper_bounds: vec![0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.01, 0.04, 1.0, 10.0, 100.0, f64::INFINITY]
            }
        );
        assert_eq!(bins[2].kind, bins[3].kind);
    }

    #[test]
    fn inclusive_upper_bounds() {
        let bins = build_default_bins();
        let duration = &bins[0];
        assert_eq!(duration.discretize_value(0.0).unwrap(), 0);
        assert_eq!(duration.discretize_value(0.001).unwrap(), 0);
        assert_eq!(duration.discretize_value(0.0011).unwrap(), 1);
        assert_eq!(duration.discretize_value(9.588).unwrap(), 9);
        assert_eq!(duration.discretize_value(1e9).unwrap(), 11);
        assert_eq!(bins[4].discretize_value(19.0).unwrap(), 7);
        assert_eq!(bins[5].discretize_value(3185.0).unwrap(), 12);
        assert!(matches!(duration.discretize_value(-1.0), Err(Error::Domain(_))));
        assert!(duration.discretize_value(f64::NAN).is_err());
    }

    #[test]
    fn table_flow_tokens() {
        let vocab = Vocabulary::new(FeatureProfile::Full);
        let flow = vocab
            .discretize_flow(&record(9.588, "TCP", 22.0, 47695.0, 19, 3185, ".AP.SF"))
            .unwrap();
        assert_eq!(flow.tokens.as_slice(), &[9, 0, 0, 6, 7, 12, 27]);
        let zero = vocab.discretize_flow(&record(0.0, "TCP", 0.0, 0.0, 0, 0, "......")).unwrap();
        assert_eq!(zero.tokens.as_slice(), &[0; 7]);
        let esp = vocab.discretize_flow(&record(0.0, "ESP", 0.0, 0.0, 0, 0, "......")).unwrap();
        assert_eq!(esp.tokens[1], 5);
        let icmp = vocab.discretize_flow(&record(0.0, "ICMP ", 0.0, 3.3, 1, 57, "......")).unwrap();
        assert_eq!(icmp.tokens.as_slice(), &[0, 3, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn special_ids_follow_real_tokens() {
        let vocab = Vocabulary::new(FeatureProfile::Full);
        for f in 0..vocab.feature_count() {
            assert_eq!(vocab.mask_id(f) as usize, vocab.real_tokens(f));
            assert_eq!(vocab.pad_id(f), vocab.mask_id(f) + 1);
        }
        assert!(vocab.is_pad(&vocab.pad_flow()));
        assert!(vocab.check_flow(&vocab.pad_flow()).is_ok());
        let mut bad = vocab.pad_flow();
        bad.tokens[6] = 66;
        assert!(matches!(vocab.check_flow(&bad), Err(Error::Index(_))));
    }

    #[test]
    fn six_feature_profile() {
        let profile = FeatureProfile::SixFeature { dropped: Feature::SrcPt };
        let vocab = Vocabulary::new(profile);
        assert_eq!(vocab.feature_count(), 6);
        assert_eq!(FeatureProfile::parse_id(&profile.id()).unwrap(), profile);
        let flow = vocab
            .discretize_flow(&record(9.588, "TCP", 22.0, 47695.0, 19, 3185, ".AP.SF"))
            .unwrap();
        assert_eq!(flow.tokens.as_slice(), &[9, 0, 6, 7, 12, 27]);
    }

    #[test]
    fn manifest_roundtrip_and_digest() {
        for profile in [FeatureProfile::Full, FeatureProfile::SixFeature { dropped: Feature::Bytes }] {
            let vocab = Vocabulary::new(profile);
            let back = Vocabulary::from_manifest(&vocab.manifest()).unwrap();
            assert_eq!(back, vocab);
            assert_eq!(back.digest(), vocab.digest());
        }
        assert_ne!(
            Vocabulary::new(FeatureProfile::Full).digest(),
            Vocabulary::new(FeatureProfile::SixFeature { dropped: Feature::SrcPt }).digest()
        );
    }

    #[test]
    fn bin_spec_validation() {
        assert!(BinSpec::numeric(Feature::Bytes, vec![1.0, 1.0, f64::INFINITY]).is_err());
        assert!(BinSpec::numeric(Feature::Bytes, vec![1.0, 2.0]).is_err());
        assert!(BinSpec::categorical(Feature::Proto, vec![]).is_err());
        assert!(BinSpec::categorical(Feature::Proto, vec!["A".into(), "A".into()]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn numeric_bins_are_monotone_and_tight(a in 0.0f64..1e7, b in 0.0f64..1e7) {
                for spec in build_default_bins() {
                    let BinKind::Numeric { upper_bounds } = &spec.kind else { continue };
                    let (lo, hi) = (a.min(b), a.max(b));
                    let (i, j) = (spec.discretize_value(lo).unwrap(), spec.discretize_value(hi).unwrap());
                    prop_assert!(i <= j);
                    prop_assert!(lo <= upper_bounds[i]);
                    prop_assert!(i == 0 || lo > upper_bounds[i - 1]);
                }
            }

            #[test]
            fn every_flow_token_is_a_real_token(ports in (0u16.., 0u16..), packets in 0u64..1_000_000, bytes in 0u64..1_000_000_000, bits in 0u8..64) {
                let vocab = Vocabulary::new(FeatureProfile::Full);
                let mut r = record(0.5, "TCP", ports.0 as f64, ports.1 as f64, packets, bytes, "......");
                r.flags = crate::ingest::TcpFlags::from_bits(bits).unwrap();
                let flow = vocab.discretize_flow(&r).unwrap();
                for (f, &t) in flow.tokens.iter().enumerate() {
                    prop_assert!((t as usize) < vocab.real_tokens(f));
                }
            }
        }
    }
}
