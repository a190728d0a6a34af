//! Per-variable inference: query every occurrence under every window size,
//! turn matches into raw scores, rank, normalize, and emit or abstain.
//!
//! Each matched context contributes
//! `0.5 + 0.5 · (n / n_max)^exponent · 1 / distinct_labels` to the score of
//! every label in that query's top-k. A candidate's raw score is the sum of
//! its contributions and `M` counts them, so the score never exceeds `M`.
//! Confidence rescales the score between `M / 2` (every context at its
//! minimum) and `M`.

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationMap, Threshold};
use crate::corpus::{AnnotatedFunction, Bitness, TypeLibrary};
use crate::lexer::{tokenize, TokenStream};
use crate::ngramdb::{site_key, DatabaseEnsemble, Vocabulary, DEFAULT_K};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EngineError {
    #[error("function is {function}-bit but the ensemble was built for {ensemble}-bit code")]
    BitnessMismatch { function: Bitness, ensemble: Bitness },
    #[error("expected a {expected} ensemble, got {found}")]
    VocabularyMismatch {
        expected: Vocabulary,
        found: Vocabulary,
    },
    #[error("invalid scoring configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub k: usize,
    pub weight_exponent: f64,
    pub struct_priority: bool,
    pub struct_priority_margin: f64,
    pub min_contexts: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            k: DEFAULT_K,
            weight_exponent: 1.0,
            struct_priority: true,
            struct_priority_margin: 0.05,
            min_contexts: 1,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(EngineError::InvalidConfig("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.struct_priority_margin) {
            return Err(EngineError::InvalidConfig(format!(
                "struct priority margin {} outside [0, 1)",
                self.struct_priority_margin
            )));
        }
        if !self.weight_exponent.is_finite() || self.weight_exponent < 0.0 {
            return Err(EngineError::InvalidConfig(format!(
                "weight exponent {} must be finite and non-negative",
                self.weight_exponent
            )));
        }
        Ok(())
    }
}

/// Score of one matched context, in [0.5, 1.0].
pub fn context_contribution(n: usize, n_max: usize, distinct_label_count: usize, exponent: f64) -> f64 {
    let weight = (n as f64 / n_max as f64).powf(exponent);
    0.5 + 0.5 * weight * (1.0 / distinct_label_count as f64)
}

/// `(s* − M/2) / (M − M/2)` when the guards hold, else 0; clamped to [0, 1].
pub fn normalize_confidence(s_star: f64, m: usize) -> f64 {
    let m = m as f64;
    let baseline = 0.5 * m;
    if m > 0.0 && m > baseline && s_star > baseline {
        ((s_star - baseline) / (m - baseline)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextMatch {
    /// token index of the occurrence
    pub occurrence: usize,
    pub n: usize,
    pub count: u32,
    pub distinct_label_count: usize,
    pub in_top_k: bool,
}

/// Matches per label, in the order they were collected (occurrence, then n).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchEvidence {
    pub n_max: usize,
    pub per_label: Vec<(u32, Vec<ContextMatch>)>,
}

impl MatchEvidence {
    pub fn new(n_max: usize) -> Self {
        MatchEvidence {
            n_max,
            per_label: Vec::new(),
        }
    }

    pub fn push(&mut self, label: u32, m: ContextMatch) {
        match self.per_label.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(m),
            None => self.per_label.push((label, vec![m])),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_label.is_empty()
    }
}

/// Names and frequency priors for label ids.
pub trait LabelInfo {
    fn label_name(&self, id: u32) -> &str;
    fn label_frequency(&self, id: u32) -> u64;
}

impl LabelInfo for DatabaseEnsemble {
    fn label_name(&self, id: u32) -> &str {
        DatabaseEnsemble::label_name(self, id)
    }

    fn label_frequency(&self, id: u32) -> u64 {
        self.global_frequency(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub label_id: u32,
    pub label: String,
    pub raw_score: f64,
    pub global_frequency: u64,
    pub contributions: Vec<f64>,
}

impl Candidate {
    /// M for this candidate.
    pub fn matched_contexts(&self) -> usize {
        self.contributions.len()
    }
}

/// Raw score per candidate, ranked by score, then global frequency, then name.
pub fn score_candidates(
    evidence: &MatchEvidence,
    config: &ScoringConfig,
    labels: &impl LabelInfo,
) -> Vec<Candidate> {
    let mut ranked: Vec<Candidate> = evidence
        .per_label
        .iter()
        .map(|(label, matches)| {
            let contributions: Vec<f64> = matches
                .iter()
                .filter(|m| m.in_top_k)
                .map(|m| {
                    context_contribution(
                        m.n,
                        evidence.n_max,
                        m.distinct_label_count,
                        config.weight_exponent,
                    )
                })
                .collect();
            Candidate {
                label_id: *label,
                label: labels.label_name(*label).to_string(),
                raw_score: contributions.iter().sum(),
                global_frequency: labels.label_frequency(*label),
                contributions,
            }
        })
        .filter(|c| !c.contributions.is_empty())
        .collect();
    ranked.sort_by(|a, b| {
        b.raw_score
            .total_cmp(&a.raw_score)
            .then(b.global_frequency.cmp(&a.global_frequency))
            .then_with(|| a.label.cmp(&b.label))
    });
    ranked
}

/// Promotes the best struct-like candidate to the top when the leader is not
/// struct-like and the struct scores within `(1 − margin)` of it.
pub fn apply_struct_priority(
    mut ranked: Vec<Candidate>,
    is_struct: impl Fn(&Candidate) -> bool,
    margin: f64,
) -> Vec<Candidate> {
    let Some(top) = ranked.first() else {
        return ranked;
    };
    if is_struct(top) {
        return ranked;
    }
    let bar = (1.0 - margin) * top.raw_score;
    if let Some(i) = ranked
        .iter()
        .position(|c| is_struct(c) && c.raw_score >= bar)
    {
        let promoted = ranked.remove(i);
        ranked.insert(0, promoted);
    }
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub label: String,
    pub raw_score: f64,
}

/// Inference result for one variable or call site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub binary_id: String,
    #[serde(with = "hex_address")]
    pub address: u64,
    pub identifier: String,
    /// token index, set for call-site predictions
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub label: Option<String>,
    pub raw_score: f64,
    /// M of the chosen candidate
    #[serde(default)]
    pub contexts: usize,
    /// normalized confidence
    pub confidence: f64,
    pub calibrated: Option<f64>,
    pub abstained: bool,
    pub candidates: Vec<RankedLabel>,
}

impl Prediction {
    /// Calibrated probability when available, otherwise the normalized
    /// confidence.
    pub fn effective_confidence(&self) -> f64 {
        self.calibrated.unwrap_or(self.confidence)
    }

    /// Best candidate regardless of abstention.
    pub fn best_label(&self) -> Option<&str> {
        self.candidates.first().map(|c| c.label.as_str())
    }
}

mod hex_address {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(addr: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{addr:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        crate::corpus::parse_address(&text)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid address `{text}`")))
    }
}

/// Borrowed view of a function to run inference on.
#[derive(Debug, Clone, Copy)]
pub struct FunctionRef<'a> {
    pub binary_id: &'a str,
    pub address: u64,
    pub bitness: Bitness,
    pub code: &'a str,
}

impl<'a> From<&'a AnnotatedFunction> for FunctionRef<'a> {
    fn from(f: &'a AnnotatedFunction) -> Self {
        FunctionRef {
            binary_id: &f.binary_id,
            address: f.address,
            bitness: f.bitness,
            code: &f.code,
        }
    }
}

/// Inference over one ensemble. Cheap to construct; holds only borrows and
/// is `Sync`, so one engine can serve many threads.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    ensemble: &'a DatabaseEnsemble,
    types: Option<&'a TypeLibrary>,
    config: ScoringConfig,
    threshold: Threshold,
    calibration: Option<&'a CalibrationMap>,
}

impl<'a> Engine<'a> {
    pub fn new(ensemble: &'a DatabaseEnsemble, config: ScoringConfig) -> Result<Self> {
        config.validate()?;
        Ok(Engine {
            ensemble,
            types: None,
            config,
            threshold: Threshold::None,
            calibration: None,
        })
    }

    /// Type library used to recognise struct-like candidates.
    pub fn with_types(mut self, types: &'a TypeLibrary) -> Self {
        self.types = Some(types);
        self
    }

    pub fn with_threshold(mut self, threshold: Threshold) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_calibration(mut self, map: Option<&'a CalibrationMap>) -> Self {
        self.calibration = map;
        self
    }

    pub fn ensemble(&self) -> &DatabaseEnsemble {
        self.ensemble
    }

    pub fn config(&self) -> &ScoringConfig {
        &self.config
    }

    fn check(&self, f: &FunctionRef<'_>, vocabulary: Vocabulary) -> Result<()> {
        if self.ensemble.vocabulary() != vocabulary {
            return Err(EngineError::VocabularyMismatch {
                expected: vocabulary,
                found: self.ensemble.vocabulary(),
            });
        }
        if f.bitness != self.ensemble.bitness() {
            return Err(EngineError::BitnessMismatch {
                function: f.bitness,
                ensemble: self.ensemble.bitness(),
            });
        }
        Ok(())
    }

    /// Queries every database for every position and records top-k matches.
    pub fn collect_evidence(&self, stream: &TokenStream, positions: &[usize]) -> MatchEvidence {
        let vocabulary = self.ensemble.vocabulary();
        let mut evidence = MatchEvidence::new(self.ensemble.n_max());
        for &pos in positions {
            for db in self.ensemble.databases() {
                let Some(key) = site_key(stream, pos, db.n(), vocabulary) else {
                    continue;
                };
                let q = db.query(key, self.config.k);
                for &(label, count) in &q.candidates {
                    evidence.push(
                        label,
                        ContextMatch {
                            occurrence: pos,
                            n: db.n(),
                            count,
                            distinct_label_count: q.distinct_label_count,
                            in_top_k: true,
                        },
                    );
                }
            }
        }
        evidence
    }

    fn is_struct(&self, bitness: Bitness, c: &Candidate) -> bool {
        self.types
            .and_then(|t| t.get(&c.label, bitness))
            .is_some_and(|t| t.kind.is_struct_like())
    }

    fn predict(
        &self,
        f: &FunctionRef<'_>,
        stream: &TokenStream,
        identifier: &str,
        positions: &[usize],
        position: Option<usize>,
    ) -> Prediction {
        let evidence = self.collect_evidence(stream, positions);
        let mut ranked = score_candidates(&evidence, &self.config, self.ensemble);
        if self.config.struct_priority && self.ensemble.vocabulary() == Vocabulary::Types {
            ranked = apply_struct_priority(
                ranked,
                |c| self.is_struct(f.bitness, c),
                self.config.struct_priority_margin,
            );
        }
        let mut p = Prediction {
            binary_id: f.binary_id.to_string(),
            address: f.address,
            identifier: identifier.to_string(),
            position,
            label: None,
            raw_score: 0.0,
            contexts: 0,
            confidence: 0.0,
            calibrated: None,
            abstained: true,
            candidates: ranked
                .iter()
                .take(self.config.k)
                .map(|c| RankedLabel {
                    label: c.label.clone(),
                    raw_score: c.raw_score,
                })
                .collect(),
        };
        let Some(chosen) = ranked.first() else {
            return p;
        };
        p.raw_score = chosen.raw_score;
        p.contexts = chosen.matched_contexts();
        p.confidence = normalize_confidence(chosen.raw_score, p.contexts);
        p.calibrated = self.calibration.map(|m| m.apply(p.confidence));
        p.abstained = p.contexts < self.config.min_contexts
            || !self.threshold.keeps(p.effective_confidence());
        if !p.abstained {
            p.label = Some(chosen.label.clone());
        }
        p
    }

    /// Type prediction for every occurrence of `identifier` in the function.
    pub fn infer_variable(&self, f: FunctionRef<'_>, identifier: &str) -> Result<Prediction> {
        self.check(&f, Vocabulary::Types)?;
        let stream = tokenize(f.code);
        Ok(self.predict(&f, &stream, identifier, stream.occurrences(identifier), None))
    }

    /// One prediction per non-callee identifier, in first-occurrence order.
    pub fn infer_function(&self, f: FunctionRef<'_>) -> Result<Vec<Prediction>> {
        self.check(&f, Vocabulary::Types)?;
        let stream = tokenize(f.code);
        let callees = stream.callees();
        Ok(stream
            .identifiers()
            .iter()
            .filter(|id| !callees.contains(&id.as_str()))
            .map(|id| self.predict(&f, &stream, id, stream.occurrences(id), None))
            .collect())
    }

    /// Predictions for the given identifiers only (e.g. the annotated ones).
    pub fn infer_identifiers<'s>(
        &self,
        f: FunctionRef<'_>,
        identifiers: impl IntoIterator<Item = &'s str>,
    ) -> Result<Vec<Prediction>> {
        self.check(&f, Vocabulary::Types)?;
        let stream = tokenize(f.code);
        Ok(identifiers
            .into_iter()
            .map(|id| self.predict(&f, &stream, id, stream.occurrences(id), None))
            .collect())
    }

    /// One signature prediction per call occurrence, in source order.
    pub fn infer_call_sites(&self, f: FunctionRef<'_>) -> Result<Vec<Prediction>> {
        self.check(&f, Vocabulary::Signatures)?;
        let stream = tokenize(f.code);
        let mut sites: Vec<(usize, &str)> = Vec::new();
        for callee in stream.callees() {
            for &pos in stream.occurrences(callee) {
                if stream.is_call_occurrence(pos) {
                    sites.push((pos, callee));
                }
            }
        }
        sites.sort_unstable();
        Ok(sites
            .into_iter()
            .map(|(pos, callee)| self.predict(&f, &stream, callee, &[pos], Some(pos)))
            .collect())
    }
}
