//! Evaluation: accuracy, selective coverage/risk, struct identification and
//! layout recovery.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::calibrate::Threshold;
use crate::corpus::{Corpus, Split, TypeLabel};
use crate::engine::Prediction;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no evaluation records")]
    Empty,
}

/// A prediction joined with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prediction: Prediction,
    pub truth: TypeLabel,
    /// resolved definition of the predicted label, when it has one
    pub predicted_type: Option<TypeLabel>,
    /// the function's normalized stream occurs in the train split
    pub in_train: bool,
    pub opt_level: Option<String>,
}

impl EvalRecord {
    pub fn kept(&self, tau: Threshold) -> bool {
        !self.prediction.abstained && tau.keeps(self.prediction.effective_confidence())
    }

    pub fn is_correct(&self) -> bool {
        !self.prediction.abstained && self.prediction.label.as_deref() == Some(self.truth.name.as_str())
    }

    pub fn truth_is_struct(&self) -> bool {
        self.truth.kind.is_struct_like()
    }

    pub fn predicted_struct(&self) -> bool {
        !self.prediction.abstained
            && self
                .predicted_type
                .as_ref()
                .is_some_and(|t| t.kind.is_struct_like())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct JoinReport {
    pub records: usize,
    /// predictions for identifiers without a type annotation
    pub unannotated: usize,
    /// predictions for functions absent from the corpus
    pub unknown_function: usize,
    /// annotated variables of predicted functions that had no prediction
    pub missing_predictions: usize,
}

/// Joins variable predictions with the corpus annotations. Annotated
/// variables of a predicted function that received no prediction are added
/// as abstentions so they count against accuracy.
pub fn build_eval_records(predictions: &[Prediction], corpus: &Corpus) -> (Vec<EvalRecord>, JoinReport) {
    let index = corpus.index();
    let train = corpus.stream_hashes(Split::Train);
    let mut in_train_cache: HashMap<(String, u64), bool> = HashMap::new();
    let mut seen: HashSet<(&str, u64, &str)> = HashSet::new();
    let mut report = JoinReport::default();
    let mut records = Vec::new();

    let mut push = |p: Prediction, f: &crate::corpus::AnnotatedFunction, records: &mut Vec<EvalRecord>| {
        let truth_name = &f.vars[&p.identifier];
        let Some(truth) = corpus.types.get(truth_name, f.bitness).cloned() else {
            return;
        };
        let predicted_type = p
            .label
            .as_deref()
            .and_then(|l| corpus.types.get(l, f.bitness))
            .cloned();
        let in_train = *in_train_cache
            .entry((f.binary_id.clone(), f.address))
            .or_insert_with(|| train.contains(&f.tokens().stream_hash()));
        records.push(EvalRecord {
            prediction: p,
            truth,
            predicted_type,
            in_train,
            opt_level: f.opt_level.clone(),
        });
    };

    let mut functions = Vec::new();
    let mut function_set = HashSet::new();
    for p in predictions {
        if p.position.is_some() {
            continue;
        }
        let Some(&f) = index.get(&(p.binary_id.as_str(), p.address)) else {
            report.unknown_function += 1;
            continue;
        };
        if !f.vars.contains_key(&p.identifier) {
            report.unannotated += 1;
            continue;
        }
        if !seen.insert((f.binary_id.as_str(), f.address, p.identifier.as_str())) {
            continue;
        }
        if function_set.insert((f.binary_id.as_str(), f.address)) {
            functions.push((f.binary_id.as_str(), f.address));
        }
        push(p.clone(), f, &mut records);
    }
    for (binary_id, address) in functions {
        let f = index[&(binary_id, address)];
        for ident in f.vars.keys() {
            if seen.contains(&(binary_id, address, ident.as_str())) {
                continue;
            }
            report.missing_predictions += 1;
            let p = Prediction {
                binary_id: binary_id.to_string(),
                address,
                identifier: ident.clone(),
                position: None,
                label: None,
                raw_score: 0.0,
                contexts: 0,
                confidence: 0.0,
                calibrated: None,
                abstained: true,
                candidates: Vec::new(),
            };
            push(p, f, &mut records);
        }
    }
    report.records = records.len();
    (records, report)
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub total: usize,
    pub correct: usize,
    pub overall: f64,
    pub in_train_total: usize,
    pub in_train: Option<f64>,
    pub out_of_train_total: usize,
    pub out_of_train: Option<f64>,
}

/// Exact-name accuracy; abstentions count as wrong.
pub fn overall_accuracy(records: &[EvalRecord]) -> Result<AccuracyReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = [[0usize; 2]; 2];
    for r in records {
        c[r.in_train as usize][r.is_correct() as usize] += 1;
    }
    let (out_n, in_n) = (c[0][0] + c[0][1], c[1][0] + c[1][1]);
    let correct = c[0][1] + c[1][1];
    Ok(AccuracyReport {
        total: records.len(),
        correct,
        overall: correct as f64 / records.len() as f64,
        in_train_total: in_n,
        in_train: ratio(c[1][1], in_n),
        out_of_train_total: out_n,
        out_of_train: ratio(c[0][1], out_n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectiveReport {
    pub tau: Threshold,
    pub total: usize,
    pub kept: usize,
    pub correct: usize,
    pub coverage: f64,
    pub sel_acc: Option<f64>,
    pub var_risk: Option<f64>,
    pub struct_kept: usize,
    pub struct_correct: usize,
    pub struct_risk: Option<f64>,
}

/// Coverage and risk at τ. Risks are `None` when nothing is kept.
pub fn selective_metrics(records: &[EvalRecord], tau: Threshold) -> SelectiveReport {
    let (mut kept, mut correct, mut s_kept, mut s_correct) = (0, 0, 0, 0);
    for r in records.iter().filter(|r| r.kept(tau)) {
        kept += 1;
        let ok = r.is_correct();
        correct += ok as usize;
        if r.truth_is_struct() {
            s_kept += 1;
            s_correct += ok as usize;
        }
    }
    let risk = |k: usize, c: usize| (k > 0).then(|| (k - c) as f64 / k as f64);
    SelectiveReport {
        tau,
        total: records.len(),
        kept,
        correct,
        coverage: if records.is_empty() { 0.0 } else { kept as f64 / records.len() as f64 },
        sel_acc: ratio(correct, kept),
        var_risk: risk(kept, correct),
        struct_kept: s_kept,
        struct_correct: s_correct,
        struct_risk: risk(s_kept, s_correct),
    }
}

pub fn coverage_risk_curve(records: &[EvalRecord], grid: &[Threshold]) -> Vec<SelectiveReport> {
    grid.iter().map(|&t| selective_metrics(records, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructIdentification {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Struct vs non-struct classification, where struct means struct or
/// pointer-to-struct on both sides. An abstention on a struct is a miss.
pub fn struct_identification(records: &[EvalRecord]) -> StructIdentification {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in records {
        match (r.predicted_struct(), r.truth_is_struct()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    StructIdentification {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroStruct {
    pub per_binary: BTreeMap<String, StructIdentification>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Struct identification per binary, averaged over binaries where defined.
pub fn struct_identification_macro(records: &[EvalRecord]) -> MacroStruct {
    let per_binary: BTreeMap<String, StructIdentification> =
        group_by(records, |r| r.prediction.binary_id.clone())
            .into_iter()
            .map(|(b, rs)| (b, struct_identification(&rs)))
            .collect();
    MacroStruct {
        precision: mean_defined(per_binary.values().map(|s| s.precision)),
        recall: mean_defined(per_binary.values().map(|s| s.recall)),
        f1: mean_defined(per_binary.values().map(|s| s.f1)),
        per_binary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub full_match: bool,
}

/// Compares two layouts as sets of (offset, width). A predicted field is a
/// hit only when the ground truth has the same offset with the same width.
pub fn compare_layouts(predicted: &[(u64, u64)], truth: &[(u64, u64)]) -> LayoutScore {
    let p: HashSet<(u64, u64)> = predicted.iter().copied().collect();
    let t: HashSet<(u64, u64)> = truth.iter().copied().collect();
    let tp = p.intersection(&t).count();
    let fp = p.len() - tp;
    let fn_ = t.len() - tp;
    let both_empty = p.is_empty() && t.is_empty();
    let part = |miss: usize| match tp + miss {
        0 if both_empty => 1.0,
        0 => 0.0,
        d => tp as f64 / d as f64,
    };
    let (precision, recall) = (part(fp), part(fn_));
    LayoutScore {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f1: harmonic(Some(precision), Some(recall)).unwrap_or(0.0),
        full_match: p == t,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariableLayout {
    pub binary_id: String,
    pub address: u64,
    pub identifier: String,
    pub predicted: String,
    pub truth: String,
    pub score: LayoutScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutReport {
    pub variables: usize,
    /// struct/struct pairs where either side has no layout
    pub skipped: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub full_match_accuracy: Option<f64>,
    pub per_variable: Vec<VariableLayout>,
}

/// Field-level layout recovery over variables whose ground truth and
/// prediction are both struct-like. Pointer-to-struct labels carry their
/// pointee's layout. Scores are per variable, then macro-averaged.
pub fn layout_recovery(records: &[EvalRecord]) -> LayoutReport {
    let mut per_variable = Vec::new();
    let mut skipped = 0;
    for r in records {
        if !(r.truth_is_struct() && r.predicted_struct()) {
            continue;
        }
        let pred = r.predicted_type.as_ref().expect("predicted_struct implies a type");
        let (Some(pl), Some(tl)) = (&pred.layout, &r.truth.layout) else {
            skipped += 1;
            continue;
        };
        per_variable.push(VariableLayout {
            binary_id: r.prediction.binary_id.clone(),
            address: r.prediction.address,
            identifier: r.prediction.identifier.clone(),
            predicted: pred.name.clone(),
            truth: r.truth.name.clone(),
            score: compare_layouts(&pl.offset_widths(), &tl.offset_widths()),
        });
    }
    let n = per_variable.len();
    LayoutReport {
        variables: n,
        skipped,
        precision: mean_defined(per_variable.iter().map(|v| Some(v.score.precision))),
        recall: mean_defined(per_variable.iter().map(|v| Some(v.score.recall))),
        f1: mean_defined(per_variable.iter().map(|v| Some(v.score.f1))),
        full_match_accuracy: ratio(per_variable.iter().filter(|v| v.score.full_match).count(), n),
        per_variable,
    }
}

/// Groups records by a key, keeping record order within each group.
pub fn group_by<K: Ord>(records: &[EvalRecord], key: impl Fn(&EvalRecord) -> K) -> BTreeMap<K, Vec<EvalRecord>> {
    let mut out: BTreeMap<K, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        out.entry(key(r)).or_default().push(r.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub accuracy: AccuracyReport,
    pub struct_identification: StructIdentification,
    pub layout_precision: Option<f64>,
    pub layout_recall: Option<f64>,
    pub layout_f1: Option<f64>,
    pub full_match_accuracy: Option<f64>,
}

fn summarize(records: &[EvalRecord]) -> Option<GroupSummary> {
    let layout = layout_recovery(records);
    Some(GroupSummary {
        accuracy: overall_accuracy(records).ok()?,
        struct_identification: struct_identification(records),
        layout_precision: layout.precision,
        layout_recall: layout.recall,
        layout_f1: layout.f1,
        full_match_accuracy: layout.full_match_accuracy,
    })
}

/// Per optimization-level breakdown; functions without a tag go under
/// `unknown`.
pub fn by_opt_level(records: &[EvalRecord]) -> BTreeMap<String, GroupSummary> {
    group_by(records, |r| r.opt_level.clone().unwrap_or_else(|| "unknown".into()))
        .into_iter()
        .filter_map(|(k, rs)| Some((k, summarize(&rs)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    pub coverage_risk: Vec<SelectiveReport>,
    pub struct_identification: StructIdentification,
    pub struct_macro: MacroStruct,
    pub layout: LayoutReport,
    pub by_opt_level: BTreeMap<String, GroupSummary>,
}

pub fn evaluate(records: &[EvalRecord], grid: &[Threshold]) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        accuracy: overall_accuracy(records)?,
        coverage_risk: coverage_risk_curve(records, grid),
        struct_identification: struct_identification(records),
        struct_macro: struct_identification_macro(records),
        layout: layout_recovery(records),
        by_opt_level: by_opt_level(records),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

/// Coverage–risk table as CSV; undefined risks are left empty.
pub fn coverage_risk_csv(rows: &[SelectiveReport]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("tau,coverage,kept,correct,sel_acc,var_risk,struct_kept,struct_risk\n");
    for r in rows {
        let tau = match r.tau {
            Threshold::None => "none".to_string(),
            Threshold::At(t) => t.to_string(),
        };
        let _ = writeln!(
            out,
            "{tau},{},{},{},{},{},{},{}",
            r.coverage,
            r.kept,
            r.correct,
            cell(r.sel_acc),
            cell(r.var_risk),
            r.struct_kept,
            cell(r.struct_risk)
        );
    }
    out
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let a = &self.accuracy;
        let mut out = String::new();
        let _ = writeln!(out, "accuracy");
        let _ = writeln!(out, "  {:<14} {:>8} {:>10}", "subset", "records", "accuracy");
        let _ = writeln!(out, "  {:<14} {:>8} {:>10}", "overall", a.total, fmt_pct(Some(a.overall)));
        let _ = writeln!(out, "  {:<14} {:>8} {:>10}", "in-train", a.in_train_total, fmt_pct(a.in_train));
        let _ = writeln!(out, "  {:<14} {:>8} {:>10}", "out-of-train", a.out_of_train_total, fmt_pct(a.out_of_train));

        let _ = writeln!(out, "\ncoverage-risk");
        let _ = writeln!(
            out,
            "  {:<6} {:>9} {:>7} {:>9} {:>9} {:>11}",
            "tau", "coverage", "kept", "sel-acc", "var-risk", "struct-risk"
        );
        for r in &self.coverage_risk {
            let _ = writeln!(
                out,
                "  {:<6} {:>9} {:>7} {:>9} {:>9} {:>11}",
                r.tau.to_string(),
                fmt_pct(Some(r.coverage)),
                r.kept,
                fmt_opt(r.sel_acc),
                fmt_opt(r.var_risk),
                fmt_opt(r.struct_risk)
            );
        }

        let s = &self.struct_identification;
        let m = &self.struct_macro;
        let _ = writeln!(out, "\nstruct identification");
        let _ = writeln!(out, "  {:<8} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1");
        let _ = writeln!(out, "  {:<8} {:>9} {:>9} {:>9}", "micro", fmt_opt(s.precision), fmt_opt(s.recall), fmt_opt(s.f1));
        let _ = writeln!(out, "  {:<8} {:>9} {:>9} {:>9}", "macro", fmt_opt(m.precision), fmt_opt(m.recall), fmt_opt(m.f1));

        let l = &self.layout;
        let _ = writeln!(out, "\nlayout recovery ({} variables, {} skipped)", l.variables, l.skipped);
        let _ = writeln!(
            out,
            "  precision {}  recall {}  f1 {}  full match {}",
            fmt_opt(l.precision),
            fmt_opt(l.recall),
            fmt_opt(l.f1),
            fmt_pct(l.full_match_accuracy)
        );

        if !self.by_opt_level.is_empty() {
            let _ = writeln!(out, "\nby optimization level");
            let _ = writeln!(
                out,
                "  {:<8} {:>8} {:>10} {:>9} {:>9} {:>10}",
                "opt", "records", "accuracy", "struct-f1", "layout-f1", "full-match"
            );
            for (k, g) in &self.by_opt_level {
                let _ = writeln!(
                    out,
                    "  {:<8} {:>8} {:>10} {:>9} {:>9} {:>10}",
                    k,
                    g.accuracy.total,
                    fmt_pct(Some(g.accuracy.overall)),
                    fmt_opt(g.struct_identification.f1),
                    fmt_opt(g.layout_f1),
                    fmt_pct(g.full_match_accuracy)
                );
            }
        }
        out
    }
}
