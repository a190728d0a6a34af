//! Isotonic calibration of confidence scores and threshold filtering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::engine::Prediction;

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("cannot fit a calibration map without any pairs")]
    Empty,
    #[error("invalid calibration map: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported calibration format version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub score: f64,
    pub correct: bool,
}

impl CalibrationPair {
    pub fn new(score: f64, correct: bool) -> Self {
        CalibrationPair { score, correct }
    }
}

/// Non-decreasing step function. Each breakpoint opens a left-closed
/// interval `[threshold, next threshold)` mapped to its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    breakpoints: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    format_version: u32,
    breakpoints: Vec<(f64, f64)>,
}

impl CalibrationMap {
    pub fn from_breakpoints(breakpoints: Vec<(f64, f64)>) -> Result<Self, CalibrationError> {
        if breakpoints.is_empty() {
            return Err(CalibrationError::Invalid("no breakpoints".into()));
        }
        for (t, v) in &breakpoints {
            if !t.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(CalibrationError::Invalid(format!("breakpoint ({t}, {v})")));
            }
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CalibrationError::Invalid(
                    "thresholds must strictly increase".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(CalibrationError::Invalid("values must not decrease".into()));
            }
        }
        Ok(CalibrationMap { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn apply(&self, score: f64) -> f64 {
        apply_calibration(self, score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CalibrationFile {
            format_version: CALIBRATION_FORMAT_VERSION,
            breakpoints: self.breakpoints.clone(),
        })
        .expect("calibration map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let f: CalibrationFile = serde_json::from_str(text)?;
        if f.format_version != CALIBRATION_FORMAT_VERSION {
            return Err(CalibrationError::Version(f.format_version));
        }
        Self::from_breakpoints(f.breakpoints)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Pool-adjacent-violators fit: the least-squares non-decreasing step
/// function of score → P(correct).
pub fn fit_isotonic(pairs: &[CalibrationPair]) -> Result<CalibrationMap, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut sorted: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| (p.score, if p.correct { 1.0 } else { 0.0 }))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for (score, y) in sorted {
        match groups.last_mut() {
            Some(last) if last.0 == score => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => groups.push((score, y, 1.0)),
        }
    }

    // (lowest score, sum of outcomes, weight)
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(groups.len());
    for g in groups {
        blocks.push(g);
        // sums are integral, so cross-multiplied comparisons are exact
        while blocks.len() >= 2 {
            let b = blocks[blocks.len() - 1];
            let a = blocks[blocks.len() - 2];
            if a.1 * b.2 <= b.1 * a.2 {
                break;
            }
            blocks.pop();
            let a = blocks.last_mut().expect("two blocks");
            a.1 += b.1;
            a.2 += b.2;
        }
    }
    Ok(CalibrationMap {
        breakpoints: blocks.into_iter().map(|(s, sum, w)| (s, sum / w)).collect(),
    })
}

pub fn apply_calibration(map: &CalibrationMap, score: f64) -> f64 {
    let idx = map.breakpoints.partition_point(|&(t, _)| t <= score);
    map.breakpoints[idx.saturating_sub(1)].1
}

/// Confidence threshold τ. `None` keeps every non-abstained prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    #[default]
    None,
    At(f64),
}

impl Threshold {
    /// Strict `>` except at τ ≥ 1.0, where `≥` keeps the top bucket.
    pub fn keeps(self, confidence: f64) -> bool {
        match self {
            Threshold::None => true,
            Threshold::At(t) if t >= 1.0 => confidence >= t,
            Threshold::At(t) => confidence > t,
        }
    }

    /// Grid used for coverage–risk tables, loosest first.
    pub fn default_grid() -> [Threshold; 4] {
        [
            Threshold::None,
            Threshold::At(0.40),
            Threshold::At(0.65),
            Threshold::At(0.90),
        ]
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::None => f.write_str("none"),
            Threshold::At(t) => write!(f, "{t:.2}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Threshold::None);
        }
        let t: f64 = s.parse().map_err(|_| format!("invalid threshold `{s}`"))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(format!("threshold {t} outside [0, 1]"));
        }
        Ok(Threshold::At(t))
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::None => s.serialize_none(),
            Threshold::At(t) => s.serialize_f64(*t),
        }
    }
}

/// Non-abstained predictions whose confidence passes τ.
pub fn threshold_filter(predictions: &[Prediction], tau: Threshold) -> Vec<&Prediction> {
    predictions
        .iter()
        .filter(|p| !p.abstained && tau.keeps(p.effective_confidence()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PairCollection {
    pub pairs: usize,
    pub abstained: usize,
    /// predictions whose function or identifier has no ground truth
    pub skipped: usize,
}

/// One pair per non-abstained prediction with ground truth, scored by the
/// uncalibrated confidence. Call-site predictions are checked against call
/// annotations.
pub fn collect_calibration_pairs(
    predictions: &[Prediction],
    corpus: &Corpus,
) -> (Vec<CalibrationPair>, PairCollection) {
    let index = corpus.index();
    let mut report = PairCollection::default();
    let mut pairs = Vec::new();
    for p in predictions {
        if p.abstained {
            report.abstained += 1;
            continue;
        }
        let truth = index
            .get(&(p.binary_id.as_str(), p.address))
            .and_then(|f| match p.position {
                Some(_) => f.calls.get(&p.identifier),
                None => f.vars.get(&p.identifier),
            });
        match (truth, &p.label) {
            (Some(truth), Some(label)) => pairs.push(CalibrationPair::new(p.confidence, truth == label)),
            _ => report.skipped += 1,
        }
    }
    report.pairs = pairs.len();
    (pairs, report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_score: f64,
    pub accuracy: f64,
}

/// Mean score against observed accuracy in equal-width score bins; empty
/// bins are omitted.
pub fn reliability_table(pairs: &[CalibrationPair], bins: usize) -> Vec<ReliabilityBin> {
    let bins = bins.max(1);
    let mut acc = vec![(0usize, 0.0f64, 0usize); bins];
    for p in pairs {
        let b = ((p.score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        acc[b].0 += 1;
        acc[b].1 += p.score;
        acc[b].2 += p.correct as usize;
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(i, (n, s, c))| ReliabilityBin {
            lower: i as f64 / bins as f64,
            upper: (i + 1) as f64 / bins as f64,
            count: n,
            mean_score: s / n as f64,
            accuracy: c as f64 / n as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(xs: &[(f64, bool)]) -> Vec<CalibrationPair> {
        xs.iter().map(|&(s, c)| CalibrationPair::new(s, c)).collect()
    }

    #[test]
    fn already_monotone_input() {
        let m = fit_isotonic(&pairs(&[(0.2, false), (0.4, true), (0.6, true)])).unwrap();
        assert_eq!(m.breakpoints(), &[(0.2, 0.0), (0.4, 1.0), (0.6, 1.0)]);
        assert_eq!(m.apply(0.5), 1.0);
    }

    #[test]
    fn violators_are_pooled() {
        let m = fit_isotonic(&pairs(&[(0.2, true), (0.8, false)])).unwrap();
        assert_eq!(m.breakpoints(), &[(0.2, 0.5)]);
        assert_eq!(m.apply(0.2), 0.5);
        assert_eq!(m.apply(0.8), 0.5);
    }

    #[test]
    fn all_correct_is_constant_one() {
        let m = fit_isotonic(&pairs(&[(0.1, true), (0.5, true), (0.9, true)])).unwrap();
        for s in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(m.apply(s), 1.0);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(fit_isotonic(&[]), Err(CalibrationError::Empty)));
    }

    #[test]
    fn equal_scores_share_a_block() {
        let m = fit_isotonic(&pairs(&[(0.5, true), (0.5, false), (0.9, true)])).unwrap();
        assert_eq!(m.breakpoints(), &[(0.5, 0.5), (0.9, 1.0)]);
    }

    #[test]
    fn apply_clamps_and_is_left_closed() {
        let m = CalibrationMap::from_breakpoints(vec![(0.2, 0.1), (0.5, 0.6)]).unwrap();
        assert_eq!(m.apply(0.0), 0.1);
        assert_eq!(m.apply(0.5), 0.6);
        assert_eq!(m.apply(0.4999), 0.1);
        assert_eq!(m.apply(7.0), 0.6);
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(CalibrationMap::from_breakpoints(vec![]).is_err());
        assert!(CalibrationMap::from_breakpoints(vec![(0.5, 0.9), (0.6, 0.1)]).is_err());
        assert!(CalibrationMap::from_breakpoints(vec![(0.5, 0.1), (0.5, 0.2)]).is_err());
        assert!(CalibrationMap::from_breakpoints(vec![(0.5, 1.5)]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let m = fit_isotonic(&pairs(&[(0.1, false), (0.3, true), (0.35, false), (0.9, true)]))
            .unwrap();
        assert_eq!(CalibrationMap::from_json(&m.to_json()).unwrap(), m);
        let bad = m.to_json().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(
            CalibrationMap::from_json(&bad),
            Err(CalibrationError::Version(9))
        ));
    }

    #[test]
    fn threshold_semantics() {
        assert!(Threshold::None.keeps(0.0));
        assert!(!Threshold::At(0.0).keeps(0.0));
        assert!(Threshold::At(0.4).keeps(0.5));
        assert!(!Threshold::At(0.5).keeps(0.5));
        assert!(Threshold::At(1.0).keeps(1.0));
        assert!(!Threshold::At(1.0).keeps(0.999));
        assert_eq!("none".parse::<Threshold>().unwrap(), Threshold::None);
        assert_eq!("0.65".parse::<Threshold>().unwrap(), Threshold::At(0.65));
        assert!("1.5".parse::<Threshold>().is_err());
    }

    #[test]
    fn reliability_bins() {
        let p = pairs(&[(0.05, false), (0.95, true), (0.91, false)]);
        let t = reliability_table(&p, 10);
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].count, 2);
        assert_eq!(t[1].accuracy, 0.5);
    }

    #[test]
    fn equal_scores_share_a_value() {
        let ps = [
            CalibrationPair::new(0.2, true),
            CalibrationPair::new(0.5, false),
            CalibrationPair::new(0.5, true),
        ];
        let m = fit_isotonic(&ps).unwrap();
        assert_eq!(m.breakpoints(), &[(0.2, 2.0 / 3.0)]);
    }

    proptest! {
        #[test]
        fn fitted_maps_are_monotone(
            raw in prop::collection::vec((0u32..20, any::<bool>()), 1..60),
            probes in prop::collection::vec(0.0f64..1.0, 1..20),
        ) {
            let ps: Vec<_> = raw.iter().map(|&(s, c)| CalibrationPair::new(s as f64 / 19.0, c)).collect();
            let m = fit_isotonic(&ps).unwrap();
            for w in m.breakpoints().windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
                prop_assert!(w[0].0 < w[1].0);
            }
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            for w in probes.windows(2) {
                prop_assert!(m.apply(w[0]) <= m.apply(w[1]));
            }
        }
    }
}
