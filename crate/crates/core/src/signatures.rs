//! Function-signature recovery: call sites are scored like variables over the
//! signature vocabulary, then merged into one prediction per callee.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibrate::Threshold;
use crate::corpus::{AnnotatedFunction, Bitness, Corpus, Split};
use crate::engine::{Engine, EngineError, FunctionRef, Prediction};
use crate::lexer::tokenize;
use crate::ngramdb::{build_ensemble, BuildReport, DatabaseEnsemble, DbError, Vocabulary};

/// Builds a signature-vocabulary ensemble from the train split's call
/// annotations.
pub fn build_signature_database(
    corpus: &Corpus,
    portfolio: &[usize],
    bitness: Bitness,
    shards: usize,
) -> Result<(DatabaseEnsemble, BuildReport), DbError> {
    let has_calls = corpus
        .split(Split::Train)
        .any(|f| f.bitness == bitness && !f.calls.is_empty());
    if !has_calls {
        return Err(DbError::EmptyCorpus(bitness));
    }
    build_ensemble(corpus, portfolio, bitness, Vocabulary::Signatures, shards)
}

/// Callee identity: its address when known, else the callee token text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CalleeId {
    Address(u64),
    Name(String),
}

impl CalleeId {
    pub fn resolve(f: &AnnotatedFunction, callee: &str) -> Self {
        match f.callee_address(callee) {
            Some(addr) => CalleeId::Address(addr),
            None => CalleeId::Name(callee.to_string()),
        }
    }
}

impl fmt::Display for CalleeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalleeId::Address(a) => write!(f, "{a:#x}"),
            CalleeId::Name(n) => f.write_str(n),
        }
    }
}

impl Serialize for CalleeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalleeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        if text.starts_with("0x") {
            if let Some(addr) = crate::corpus::parse_address(&text) {
                return Ok(CalleeId::Address(addr));
            }
        }
        Ok(CalleeId::Name(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSitePrediction {
    pub callee: CalleeId,
    #[serde(flatten)]
    pub prediction: Prediction,
}

impl CallSitePrediction {
    pub fn token_index(&self) -> usize {
        self.prediction.position.unwrap_or_default()
    }
}

/// One prediction per call occurrence, in source order.
pub fn infer_call_sites(
    engine: &Engine<'_>,
    f: &AnnotatedFunction,
) -> Result<Vec<CallSitePrediction>, EngineError> {
    Ok(engine
        .infer_call_sites(FunctionRef::from(f))?
        .into_iter()
        .map(|p| CallSitePrediction {
            callee: CalleeId::resolve(f, &p.identifier),
            prediction: p,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureVote {
    pub signature: String,
    pub weight: f64,
    pub contexts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionPrediction {
    pub binary_id: String,
    pub callee: CalleeId,
    pub signature: String,
    pub weight: f64,
    /// surviving sites that chose `signature`
    pub contexts: usize,
    /// all surviving sites for this callee
    pub sites: usize,
    pub votes: Vec<SignatureVote>,
}

/// Merges call-site predictions into one signature per callee and binary.
/// Sites that abstained or fall at or below `tau` are dropped; each
/// signature's weight is the sum of its sites' confidences times their
/// number. Output is sorted by binary, then callee.
pub fn aggregate_by_address(sites: &[CallSitePrediction], tau: Threshold) -> Vec<FunctionPrediction> {
    let mut groups: BTreeMap<(&str, &CalleeId), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for site in sites {
        let p = &site.prediction;
        let Some(label) = p.label.as_deref() else {
            continue;
        };
        if p.abstained || !tau.keeps(p.effective_confidence()) {
            continue;
        }
        groups
            .entry((p.binary_id.as_str(), &site.callee))
            .or_default()
            .entry(label)
            .or_default()
            .push(p.effective_confidence());
    }

    groups
        .into_iter()
        .filter_map(|((binary_id, callee), by_sig)| {
            let mut votes: Vec<SignatureVote> = by_sig
                .into_iter()
                .map(|(sig, mut confs)| {
                    confs.sort_by(f64::total_cmp);
                    let total: f64 = confs.iter().sum();
                    SignatureVote {
                        signature: sig.to_string(),
                        weight: total * confs.len() as f64,
                        contexts: confs.len(),
                    }
                })
                .collect();
            votes.sort_by(|a, b| {
                b.weight
                    .total_cmp(&a.weight)
                    .then(b.contexts.cmp(&a.contexts))
                    .then_with(|| a.signature.cmp(&b.signature))
            });
            let best = votes.first()?.clone();
            Some(FunctionPrediction {
                binary_id: binary_id.to_string(),
                callee: callee.clone(),
                signature: best.signature,
                weight: best.weight,
                contexts: best.contexts,
                sites: votes.iter().map(|v| v.contexts).sum(),
                votes,
            })
        })
        .collect()
}

/// Ground-truth signature per (binary, callee), from call annotations.
pub type CalleeTruth = BTreeMap<(String, CalleeId), String>;

/// Collects call annotations of `split` keyed like the aggregated output.
/// The first annotation seen for a callee wins.
pub fn callee_truth(corpus: &Corpus, split: Split) -> CalleeTruth {
    let mut truth = CalleeTruth::new();
    for f in corpus.split(split) {
        let stream = tokenize(&f.code);
        for (callee, sig) in &f.calls {
            let called = stream
                .occurrences(callee)
                .iter()
                .any(|&p| stream.is_call_occurrence(p));
            if called {
                truth
                    .entry((f.binary_id.clone(), CalleeId::resolve(f, callee)))
                    .or_insert_with(|| sig.clone());
            }
        }
    }
    truth
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub ground_truth: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl TriageMetrics {
    pub fn from_counts(tp: usize, fp: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, ground_truth);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        TriageMetrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: ground_truth.saturating_sub(tp),
            ground_truth,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageReport {
    pub prefix: String,
    pub listed: Vec<FunctionPrediction>,
    pub metrics: Option<TriageMetrics>,
}

/// Lists predictions whose signature starts with `prefix`, heaviest first.
/// With ground truth, a listed callee is a true positive when its predicted
/// signature equals the true one; recall is over all callees whose true
/// signature has the prefix.
pub fn triage_report(
    predictions: &[FunctionPrediction],
    prefix: &str,
    truth: Option<&CalleeTruth>,
) -> TriageReport {
    let mut listed: Vec<FunctionPrediction> = predictions
        .iter()
        .filter(|p| p.signature.starts_with(prefix))
        .cloned()
        .collect();
    listed.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.binary_id.cmp(&b.binary_id))
            .then_with(|| a.callee.cmp(&b.callee))
    });
    let metrics = truth.map(|truth| {
        let tp = listed
            .iter()
            .filter(|p| {
                truth
                    .get(&(p.binary_id.clone(), p.callee.clone()))
                    .is_some_and(|t| *t == p.signature)
            })
            .count();
        let positives = truth.values().filter(|s| s.starts_with(prefix)).count();
        TriageMetrics::from_counts(tp, listed.len() - tp, positives)
    });
    TriageReport {
        prefix: prefix.to_string(),
        listed,
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn site(callee: CalleeId, label: Option<&str>, conf: f64) -> CallSitePrediction {
        CallSitePrediction {
            callee,
            prediction: Prediction {
                binary_id: "bin".into(),
                address: 0x1000,
                identifier: "f".into(),
                position: Some(0),
                label: label.map(String::from),
                raw_score: 0.0,
                contexts: 1,
                confidence: conf,
                calibrated: None,
                abstained: label.is_none(),
                candidates: Vec::new(),
            },
        }
    }

    fn aaa() -> CalleeId {
        CalleeId::Address(0xaaa)
    }

    #[test]
    fn three_site_aggregation() {
        let sites = vec![
            site(aaa(), Some("sigA"), 0.9),
            site(aaa(), Some("sigC"), 0.4),
            site(aaa(), Some("sigA"), 0.8),
        ];
        let out = aggregate_by_address(&sites, Threshold::At(0.5));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].callee, aaa());
        assert_eq!(out[0].signature, "sigA");
        assert_eq!(out[0].contexts, 2);
        assert_eq!(out[0].sites, 2);
        assert!((out[0].weight - (0.9 + 0.8) * 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_site_weight_is_its_confidence() {
        let out = aggregate_by_address(&[site(aaa(), Some("sigA"), 0.7)], Threshold::None);
        assert_eq!(out[0].weight, 0.7);
    }

    #[test]
    fn tie_goes_to_name() {
        let sites = vec![site(aaa(), Some("sigB"), 0.6), site(aaa(), Some("sigA"), 0.6)];
        let out = aggregate_by_address(&sites, Threshold::None);
        assert_eq!(out[0].signature, "sigA");
    }

    #[test]
    fn tie_on_weight_goes_to_more_contexts() {
        let sites = vec![
            site(aaa(), Some("sigA"), 0.8),
            site(aaa(), Some("sigB"), 0.2),
            site(aaa(), Some("sigB"), 0.2),
        ];
        let out = aggregate_by_address(&sites, Threshold::None);
        assert_eq!(out[0].votes[0].weight, out[0].votes[1].weight);
        assert_eq!(out[0].signature, "sigB");
        assert_eq!(out[0].contexts, 2);
    }

    #[test]
    fn callees_without_survivors_are_dropped() {
        let sites = vec![site(aaa(), None, 0.0), site(CalleeId::Name("memcpy".into()), Some("sigM"), 0.3)];
        assert!(aggregate_by_address(&sites, Threshold::At(0.5)).is_empty());
    }

    #[test]
    fn callee_id_text_roundtrip() {
        for id in [aaa(), CalleeId::Name("memcpy".into())] {
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(serde_json::from_str::<CalleeId>(&json).unwrap(), id);
        }
        assert_eq!(serde_json::to_string(&aaa()).unwrap(), "\"0xaaa\"");
    }

    fn fp(callee: &str, sig: &str, weight: f64) -> FunctionPrediction {
        FunctionPrediction {
            binary_id: "bin".into(),
            callee: CalleeId::Name(callee.into()),
            signature: sig.into(),
            weight,
            contexts: 1,
            sites: 1,
            votes: Vec::new(),
        }
    }

    #[test]
    fn triage_lists_prefix_only() {
        let preds = vec![fp("a", "HAL_UART_Init", 1.0), fp("b", "memcpy", 2.0)];
        let r = triage_report(&preds, "HAL_", None);
        assert_eq!(r.listed.len(), 1);
        assert!(r.metrics.is_none());
        assert!(triage_report(&[], "HAL_", None).listed.is_empty());
    }

    #[test]
    fn triage_recall_counts() {
        let m = TriageMetrics::from_counts(126, 83, 286);
        assert!((m.recall.unwrap() - 0.440_559_440_559_440_5).abs() < 1e-15);
        assert!((m.recall.unwrap() - 0.4406).abs() < 5e-5);
        assert!((m.precision.unwrap() - 126.0 / 209.0).abs() < 1e-15);
        assert_eq!(m.false_negatives, 160);
    }

    #[test]
    fn triage_with_truth() {
        let preds = vec![
            fp("a", "HAL_UART_Init", 3.0),
            fp("b", "HAL_GPIO_Init", 2.0),
            fp("c", "memcpy", 1.0),
        ];
        let mut truth = CalleeTruth::new();
        truth.insert(("bin".into(), CalleeId::Name("a".into())), "HAL_UART_Init".into());
        truth.insert(("bin".into(), CalleeId::Name("b".into())), "HAL_Delay".into());
        truth.insert(("bin".into(), CalleeId::Name("d".into())), "HAL_Tick".into());
        truth.insert(("bin".into(), CalleeId::Name("c".into())), "memcpy".into());
        let m = triage_report(&preds, "HAL_", Some(&truth)).metrics.unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.ground_truth), (1, 1, 3));
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0 / 3.0));
    }

    fn arb_sites() -> impl Strategy<Value = Vec<CallSitePrediction>> {
        prop::collection::vec(
            (0u64..3, prop::option::of(0usize..3), 0.0f64..1.0),
            0..16,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(c, l, conf)| {
                    let label = l.map(|i| ["sigA", "sigB", "sigC"][i]);
                    site(CalleeId::Address(c), label, conf)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(sites in arb_sites(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = sites.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                aggregate_by_address(&sites, Threshold::At(0.3)),
                aggregate_by_address(&shuffled, Threshold::At(0.3))
            );
        }

        #[test]
        fn raising_tau_never_adds_callees(sites in arb_sites(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let low: Vec<_> = aggregate_by_address(&sites, Threshold::At(lo)).into_iter().map(|p| p.callee).collect();
            let high: Vec<_> = aggregate_by_address(&sites, Threshold::At(hi)).into_iter().map(|p| p.callee).collect();
            prop_assert!(high.iter().all(|c| low.contains(c)));
        }

        #[test]
        fn reaggregation_is_idempotent(sites in arb_sites()) {
            for fpred in aggregate_by_address(&sites, Threshold::None) {
                let survivors: Vec<_> = sites
                    .iter()
                    .filter(|s| s.callee == fpred.callee && !s.prediction.abstained)
                    .cloned()
                    .collect();
                let again = aggregate_by_address(&survivors, Threshold::None);
                prop_assert_eq!(again.len(), 1);
                prop_assert_eq!(&again[0].signature, &fpred.signature);
            }
        }
    }
}
