#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use ngtype_core::corpus::{AnnotatedFunction, Bitness, Corpus, SignatureLibrary, Split, TypeLibrary};
use ngtype_core::lexer::{tokenize, variable_window};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TYPES_JSON: &str = r#"{
  "int": {"kind": "primitive", "total_width": 4},
  "unsigned int": {"kind": "primitive", "total_width": 4},
  "char *": {"kind": "pointer", "total_width": 8},
  "long": {"kind": "primitive", "total_width": 8},
  "Node": {"kind": "struct", "total_width": 16, "fields": [
      {"name": "next", "offset": 0, "width": 8, "type": "Node *"},
      {"name": "value", "offset": 8, "width": 4, "type": "int"}]},
  "Node *": {"kind": "pointer_to_struct", "total_width": 16, "fields": [
      {"name": "next", "offset": 0, "width": 8, "type": "Node *"},
      {"name": "value", "offset": 8, "width": 4, "type": "int"}]},
  "Pair": {"kind": "struct", "total_width": 8, "fields": [
      {"name": "a", "offset": 0, "width": 4, "type": "int"},
      {"name": "b", "offset": 4, "width": 4, "type": "int"}]},
  "Blob": {"kind": "union", "total_width": 8, "fields": [
      {"name": "i", "offset": 0, "width": 4, "type": "int"}]}
}"#;

pub const SIGS_JSON: &str = r#"{
  "sigA": {"params": [{"name": "a", "type": "int"}], "return": "int"},
  "sigB": {"params": [], "return": "void"},
  "sigC": {"params": [{"name": "p", "type": "char *"}], "return": "long"},
  "sigD": {"params": [{"name": "p", "type": "char *"}], "return": "int"},
  "HAL_UART_Init": {"params": [{"name": "h", "type": "Node *"}], "return": "int"}
}"#;

pub fn types() -> TypeLibrary {
    TypeLibrary::from_json_str(TYPES_JSON).unwrap()
}

pub fn signatures() -> SignatureLibrary {
    SignatureLibrary::from_json_str(SIGS_JSON).unwrap()
}

pub const TYPE_NAMES: [&str; 7] = ["int", "unsigned int", "char *", "long", "Node", "Node *", "Pair"];

pub fn func(
    binary_id: &str,
    address: u64,
    code: &str,
    vars: &[(&str, &str)],
    calls: &[(&str, &str)],
    split: Split,
) -> AnnotatedFunction {
    AnnotatedFunction {
        binary_id: binary_id.to_string(),
        address,
        bitness: Bitness::B64,
        code: code.to_string(),
        vars: vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        calls: calls.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        callee_addrs: BTreeMap::new(),
        split,
        opt_level: None,
    }
}

pub fn corpus(functions: Vec<AnnotatedFunction>) -> Corpus {
    Corpus::new(functions, types(), signatures()).unwrap()
}

const VARS: [&str; 6] = ["v0", "v1", "v2", "v3", "v4", "v5"];
const CALLEES: [&str; 3] = ["f0", "f1", "f2"];

fn statement(rng: &mut ChaCha8Rng) -> String {
    let v = |rng: &mut ChaCha8Rng| *VARS.choose(rng).unwrap();
    match rng.gen_range(0..7) {
        0 => format!("{} = {} + {} ;", v(rng), v(rng), rng.gen_range(0..3)),
        1 => format!("{} = * {} ;", v(rng), v(rng)),
        2 => format!("{} -> next = {} ;", v(rng), v(rng)),
        3 => format!("if ( {} < {} ) {{ {} ++ ; }}", v(rng), v(rng), v(rng)),
        4 => format!("{} ( {} , {} ) ;", CALLEES.choose(rng).unwrap(), v(rng), v(rng)),
        5 => format!("return {} ;", v(rng)),
        _ => format!("{} . a = \"s\" ;", v(rng)),
    }
}

/// Random small-vocabulary functions with planted annotations: every
/// identifier that occurs gets a type, biased towards a per-name favourite
/// so contexts carry some signal. About a third go to the test split.
pub fn random_corpus(seed: u64, functions: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let favourite: HashMap<&str, &str> = VARS
        .iter()
        .map(|v| (*v, *TYPE_NAMES.choose(&mut rng).unwrap()))
        .collect();
    let mut out = Vec::new();
    for i in 0..functions {
        let stmts = rng.gen_range(1..6);
        let code: Vec<String> = (0..stmts).map(|_| statement(&mut rng)).collect();
        let code = code.join(" ");
        let stream = tokenize(&code);
        let mut vars = BTreeMap::new();
        for v in VARS {
            if stream.contains_identifier(v) {
                let ty = if rng.gen_bool(0.7) {
                    favourite[v]
                } else {
                    *TYPE_NAMES.choose(&mut rng).unwrap()
                };
                vars.insert(v.to_string(), ty.to_string());
            }
        }
        let split = if rng.gen_bool(0.33) { Split::Test } else { Split::Train };
        out.push(AnnotatedFunction {
            binary_id: format!("bin{}", i % 3),
            address: 0x1000 + i as u64 * 0x10,
            bitness: Bitness::B64,
            code,
            vars,
            calls: BTreeMap::new(),
            callee_addrs: BTreeMap::new(),
            split,
            opt_level: Some(["O0", "O2"][i % 2].to_string()),
        });
    }
    corpus(out)
}

/// Straightforward scorer over materialized windows, keyed by token text
/// rather than by hash.
pub mod reference {
    use super::*;

    pub struct RefPrediction {
        pub ranked: Vec<(String, f64)>,
        pub m: usize,
        pub c_norm: f64,
    }

    pub struct RefModel {
        portfolio: Vec<usize>,
        tables: Vec<HashMap<Vec<String>, BTreeMap<String, u64>>>,
        freq: BTreeMap<String, u64>,
        types: TypeLibrary,
    }

    fn window_text(stream: &ngtype_core::lexer::TokenStream, pos: usize, n: usize) -> Vec<String> {
        let w = variable_window(stream, pos, n);
        w.left.iter().chain(w.right.iter()).cloned().collect()
    }

    impl RefModel {
        pub fn train(corpus: &Corpus, portfolio: &[usize]) -> Self {
            let mut tables = vec![HashMap::new(); portfolio.len()];
            let mut freq = BTreeMap::new();
            for f in corpus.functions.iter().filter(|f| f.split == Split::Train) {
                let stream = tokenize(&f.code);
                for (ident, ty) in &f.vars {
                    for pos in 0..stream.len() {
                        if stream.tokens()[pos].text != *ident {
                            continue;
                        }
                        *freq.entry(ty.clone()).or_insert(0) += 1;
                        for (t, &n) in tables.iter_mut().zip(portfolio) {
                            let labels: &mut BTreeMap<String, u64> =
                                t.entry(window_text(&stream, pos, n)).or_default();
                            *labels.entry(ty.clone()).or_insert(0) += 1;
                        }
                    }
                }
            }
            RefModel {
                portfolio: portfolio.to_vec(),
                tables,
                freq,
                types: corpus.types.clone(),
            }
        }

        pub fn predict(&self, code: &str, ident: &str, k: usize, struct_priority: bool) -> RefPrediction {
            let stream = tokenize(code);
            let n_max = *self.portfolio.last().unwrap() as f64;
            // label -> contributions in (occurrence, n) order
            let mut evidence: Vec<(String, Vec<f64>)> = Vec::new();
            for pos in 0..stream.len() {
                if stream.tokens()[pos].text != ident {
                    continue;
                }
                for (t, &n) in self.tables.iter().zip(&self.portfolio) {
                    let Some(labels) = t.get(&window_text(&stream, pos, n)) else {
                        continue;
                    };
                    let mut sorted: Vec<(&String, &u64)> = labels.iter().collect();
                    sorted.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
                    let d = sorted.len() as f64;
                    for (label, _) in sorted.into_iter().take(k) {
                        let c = 0.5 + 0.5 * (n as f64 / n_max) * (1.0 / d);
                        match evidence.iter_mut().find(|(l, _)| l == label) {
                            Some((_, v)) => v.push(c),
                            None => evidence.push((label.clone(), vec![c])),
                        }
                    }
                }
            }
            let mut ranked: Vec<(String, f64, usize)> = evidence
                .into_iter()
                .map(|(l, cs)| {
                    let mut s = 0.0;
                    for c in &cs {
                        s += c;
                    }
                    (l, s, cs.len())
                })
                .collect();
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then(self.freq[&b.0].cmp(&self.freq[&a.0]))
                    .then(a.0.cmp(&b.0))
            });
            if struct_priority && !ranked.is_empty() {
                let is_struct = |name: &str| {
                    self.types
                        .get(name, Bitness::B64)
                        .is_some_and(|t| t.kind.is_struct_like())
                };
                if !is_struct(&ranked[0].0) {
                    let bar = (1.0 - 0.05) * ranked[0].1;
                    if let Some(i) = ranked.iter().position(|c| is_struct(&c.0) && c.1 >= bar) {
                        let c = ranked.remove(i);
                        ranked.insert(0, c);
                    }
                }
            }
            let (m, c_norm) = match ranked.first() {
                None => (0, 0.0),
                Some((_, s, m)) => {
                    let mf = *m as f64;
                    let b = mf / 2.0;
                    let c = if mf > 0.0 && mf > b && *s > b {
                        ((s - b) / (mf - b)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    (*m, c)
                }
            };
            RefPrediction {
                ranked: ranked.into_iter().map(|(l, s, _)| (l, s)).collect(),
                m,
                c_norm,
            }
        }
    }
}

/// Exhaustive isotonic least squares: every split of the score-sorted
/// groups into contiguous blocks, each block set to its mean, keeping only
/// non-decreasing block means.
pub fn isotonic_oracle_sse(pairs: &[(f64, bool)]) -> f64 {
    let mut groups: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for &(s, y) in pairs {
        let e = groups.entry(s.to_bits()).or_insert((0.0, 0.0));
        e.0 += y as u8 as f64;
        e.1 += 1.0;
    }
    let g: Vec<(f64, f64)> = groups.into_values().collect();
    let m = g.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (m.saturating_sub(1))) {
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 0..m {
            if i == m - 1 || mask & (1 << i) != 0 {
                blocks.push(start..i + 1);
                start = i + 1;
            }
        }
        let means: Vec<f64> = blocks
            .iter()
            .map(|b| {
                let (y, w) = g[b.clone()].iter().fold((0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1));
                y / w
            })
            .collect();
        if means.windows(2).any(|w| w[1] < w[0]) {
            continue;
        }
        let mut sse = 0.0;
        for (b, mean) in blocks.iter().zip(&means) {
            for &(y, w) in &g[b.clone()] {
                // y ones and w - y zeros
                sse += y * (1.0 - mean).powi(2) + (w - y) * mean.powi(2);
            }
        }
        best = best.min(sse);
    }
    best
}
