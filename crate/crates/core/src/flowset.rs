//! Discretized, labeled flows in file order, and their binary cache format:
//!
//! ```text
//! FSNIDS-FLOWSET v1\n
//! key = value lines (profile, vocab_digest, source, features, flows)\n
//! \n
//! per flow: F little-endian u16 tokens, one label byte (0 benign, 1 malicious)
//! SHA-256 of every preceding byte
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::artifact::{read_required, write_atomic};
use crate::discretizer::{DiscretizedFlow, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::ingest::{BinaryLabel, FlowDataset};
use crate::sequence::{chunk_sequences, FlowSequence};

pub const FLOWSET_MAGIC: &str = "FSNIDS-FLOWSET v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDataset {
    pub profile: String,
    pub vocab_digest: String,
    pub source: String,
    pub flows: Vec<DiscretizedFlow>,
    pub labels: Vec<BinaryLabel>,
}

impl TokenizedDataset {
    pub fn from_dataset(vocab: &Vocabulary, data: &FlowDataset, source: &str) -> Result<Self> {
        let flows = data
            .records
            .iter()
            .map(|r| vocab.discretize_flow(&r.record))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenizedDataset {
            profile: vocab.profile().id(),
            vocab_digest: vocab.digest(),
            source: source.to_string(),
            flows,
            labels: data.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// (benign, malicious)
    pub fn label_counts(&self) -> (usize, usize) {
        let malicious = self.labels.iter().filter(|&&l| l == BinaryLabel::Malicious).count();
        (self.labels.len() - malicious, malicious)
    }

    /// Order-preserving subset.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let (flows, labels) = self
            .flows
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, (f, l))| (f.clone(), *l))
            .unzip();
        TokenizedDataset {
            flows,
            labels,
            ..self.clone_header()
        }
    }

    pub fn benign_only(&self) -> Self {
        self.select(|i| self.labels[i] == BinaryLabel::Benign)
    }

    fn clone_header(&self) -> Self {
        TokenizedDataset {
            profile: self.profile.clone(),
            vocab_digest: self.vocab_digest.clone(),
            source: self.source.clone(),
            flows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_digest != vocab.digest() {
            return Err(Error::Incompatible(format!(
                "dataset was discretized with vocabulary {} ({}), model uses {} ({})",
                self.vocab_digest,
                self.profile,
                vocab.digest(),
                vocab.profile().id()
            )));
        }
        Ok(())
    }

    /// Consecutive windows of `seq_len` flows, labeled when `with_labels`.
    pub fn sequences(&self, seq_len: usize, vocab: &Vocabulary, with_labels: bool) -> Result<Vec<FlowSequence>> {
        self.check_vocabulary(vocab)?;
        let labels = with_labels.then_some(self.labels.as_slice());
        chunk_sequences(&self.flows, labels, seq_len, vocab)
    }

    pub fn encode(&self) -> Vec<u8> {
        let features = self.flows.first().map_or(0, DiscretizedFlow::len);
        let mut header = String::new();
        writeln!(header, "{FLOWSET_MAGIC}").unwrap();
        writeln!(header, "profile = {}", self.profile).unwrap();
        writeln!(header, "vocab_digest = {}", self.vocab_digest).unwrap();
        writeln!(header, "source = {}", self.source.replace('\n', " ")).unwrap();
        writeln!(header, "features = {features}").unwrap();
        writeln!(header, "flows = {}", self.flows.len()).unwrap();
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(self.flows.len() * (2 * features + 1) + 32);
        for (flow, label) in self.flows.iter().zip(&self.labels) {
            for t in &flow.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.push(label.index() as u8);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corruption(format!("flow cache: {m}"));
        if bytes.len() < 32 {
            return Err(corrupt("truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let end = body
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| corrupt("missing header terminator"))?;
        let header = std::str::from_utf8(&body[..end]).map_err(|_| corrupt("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(FLOWSET_MAGIC) {
            return Err(corrupt("missing FSNIDS-FLOWSET v1 header"));
        }
        let mut out = TokenizedDataset {
            profile: String::new(),
            vocab_digest: String::new(),
            source: String::new(),
            flows: Vec::new(),
            labels: Vec::new(),
        };
        let (mut features, mut count) = (None, None);
        for line in lines {
            let (k, v) = line.split_once(" = ").ok_or_else(|| corrupt("bad header line"))?;
            match k {
                "profile" => out.profile = v.to_string(),
                "vocab_digest" => out.vocab_digest = v.to_string(),
                "source" => out.source = v.to_string(),
                "features" => features = v.parse::<usize>().ok(),
                "flows" => count = v.parse::<usize>().ok(),
                _ => return Err(corrupt(&format!("unknown header key {k}"))),
            }
        }
        let (Some(features), Some(count)) = (features, count) else {
            return Err(corrupt("header lacks features/flows"));
        };
        let payload = &body[end + 2..];
        let stride = 2 * features + 1;
        if payload.len() != stride * count {
            return Err(corrupt("payload length disagrees with header"));
        }
        out.flows.reserve(count);
        out.labels.reserve(count);
        for rec in payload.chunks_exact(stride) {
            out.flows.push(DiscretizedFlow::new(
                rec[..2 * features]
                    .chunks_exact(2)
                    .map(|c| TokenId::from_le_bytes([c[0], c[1]])),
            ));
            out.labels.push(match rec[2 * features] {
                0 => BinaryLabel::Benign,
                1 => BinaryLabel::Malicious,
                b => return Err(corrupt(&format!("label byte {b}"))),
            });
        }
        Ok(out)
    }

    /// Hex SHA-256 of the encoded form.
    pub fn digest(&self) -> String {
        let bytes = self.encode();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_required(path)?)
    }
}
