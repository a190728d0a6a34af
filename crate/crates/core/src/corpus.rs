//! On-disk corpus, type-library and signature-library formats.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"binary_id":"ls","address":"0x401000","bitness":64,"code":"...",
//!  "vars":{"v1":"int32_t"},"calls":{"sub_401200":"sigA"},"split":"train"}
//! ```
//!
//! Optional keys: `callee_addrs` (callee identifier → hex address) and `opt`
//! (optimization-level tag used for grouped reports).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::lexer::{tokenize, NGramKey, TokenStream};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("line {line}: unresolved {vocabulary} name `{name}`")]
    UnresolvedAnnotation {
        line: usize,
        name: String,
        vocabulary: &'static str,
    },
    #[error("line {line}: duplicate function ({binary_id}, {address:#x})")]
    DuplicateFunction {
        line: usize,
        binary_id: String,
        address: u64,
    },
    #[error("line {line}: invalid bitness {value} (expected 32 or 64)")]
    InvalidBitness { line: usize, value: i64 },
    #[error("line {line}: annotated identifier `{identifier}` does not occur in the code")]
    MissingIdentifier { line: usize, identifier: String },
    #[error("line {line}: identifier `{identifier}` annotated with conflicting labels")]
    ConflictingAnnotation { line: usize, identifier: String },
    #[error("type `{name}`: {reason}")]
    Layout { name: String, reason: String },
    #[error("duplicate type `{name}` for bitness {bitness}")]
    DuplicateType { name: String, bitness: String },
    #[error("type `{name}` of kind {kind:?} requires a layout")]
    MissingLayout { name: String, kind: TypeKind },
    #[error("`{0}` appears in both the type and signature vocabularies")]
    VocabularyOverlap(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bitness {
    B32,
    B64,
}

impl Bitness {
    pub fn bits(self) -> u32 {
        match self {
            Bitness::B32 => 32,
            Bitness::B64 => 64,
        }
    }

    pub fn from_bits(bits: i64) -> Option<Self> {
        match bits {
            32 => Some(Bitness::B32),
            64 => Some(Bitness::B64),
            _ => None,
        }
    }
}

impl fmt::Display for Bitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl Serialize for Bitness {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.bits())
    }
}

impl<'de> Deserialize<'de> for Bitness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = i64::deserialize(d)?;
        Bitness::from_bits(bits)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid bitness {bits}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeKind {
    Primitive,
    Pointer,
    Struct,
    PointerToStruct,
    Union,
    Array,
    FunctionPointer,
    Other,
}

impl TypeKind {
    pub fn requires_layout(self) -> bool {
        matches!(
            self,
            TypeKind::Struct | TypeKind::PointerToStruct | TypeKind::Union
        )
    }

    /// Positive class for struct identification and struct priority. Unions
    /// and arrays are deliberately not part of it.
    pub fn is_struct_like(self) -> bool {
        matches!(self, TypeKind::Struct | TypeKind::PointerToStruct)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub name: String,
    pub offset: u64,
    pub width: u64,
    #[serde(rename = "type")]
    pub type_name: String,
}

/// Byte layout of a composite. For pointer-to-struct labels this is the
/// pointee's layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeLayout {
    pub total_width: u64,
    pub fields: Vec<FieldRecord>,
}

impl TypeLayout {
    /// Offsets must strictly increase and every field must fit. Byte ranges
    /// may overlap (unions), offsets may not repeat.
    pub fn validate(&self, name: &str) -> Result<()> {
        let err = |reason: String| CorpusError::Layout {
            name: name.to_string(),
            reason,
        };
        for pair in self.fields.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.offset == a.offset {
                return Err(err(format!(
                    "fields `{}` and `{}` share offset {}",
                    a.name, b.name, a.offset
                )));
            }
            if b.offset < a.offset {
                return Err(err(format!(
                    "field `{}` at offset {} follows `{}` at offset {}",
                    b.name, b.offset, a.name, a.offset
                )));
            }
        }
        for f in &self.fields {
            if f.offset.checked_add(f.width).is_none_or(|end| end > self.total_width) {
                return Err(err(format!(
                    "field `{}` ({}+{}) exceeds total width {}",
                    f.name, f.offset, f.width, self.total_width
                )));
            }
        }
        Ok(())
    }

    /// The (offset, width) pairs the layout metric compares.
    pub fn offset_widths(&self) -> Vec<(u64, u64)> {
        self.fields.iter().map(|f| (f.offset, f.width)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeLabel {
    pub name: String,
    pub kind: TypeKind,
    /// `None` means the definition is valid for both bitnesses.
    pub bitness: Option<Bitness>,
    pub layout: Option<TypeLayout>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TypeEntryJson {
    kind: TypeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bitness: Option<Bitness>,
    #[serde(default)]
    total_width: u64,
    #[serde(default)]
    fields: Vec<FieldRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

/// Map-like JSON object kept as an ordered list so duplicate keys are visible.
#[derive(Debug, Clone)]
struct Pairs<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Pairs<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct PairsVisitor<V>(PhantomData<V>);
        impl<'de, V: Deserialize<'de>> Visitor<'de> for PairsVisitor<V> {
            type Value = Pairs<V>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry()? {
                    out.push(entry);
                }
                Ok(Pairs(out))
            }
        }
        d.deserialize_map(PairsVisitor(PhantomData))
    }
}

impl<V> Default for Pairs<V> {
    fn default() -> Self {
        Pairs(Vec::new())
    }
}

/// Fully qualified types keyed by name, at most one definition per bitness.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeLibrary {
    entries: BTreeMap<String, Vec<TypeLabel>>,
}

impl TypeLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: TypeLabel) -> Result<()> {
        if label.kind.requires_layout() && label.layout.is_none() {
            return Err(CorpusError::MissingLayout {
                name: label.name,
                kind: label.kind,
            });
        }
        if let Some(layout) = &label.layout {
            layout.validate(&label.name)?;
        }
        let slot = self.entries.entry(label.name.clone()).or_default();
        let clash = slot
            .iter()
            .any(|e| e.bitness.is_none() || label.bitness.is_none() || e.bitness == label.bitness);
        if clash {
            return Err(CorpusError::DuplicateType {
                name: label.name,
                bitness: label
                    .bitness
                    .map_or_else(|| "any".to_string(), |b| b.to_string()),
            });
        }
        slot.push(label);
        Ok(())
    }

    pub fn get(&self, name: &str, bitness: Bitness) -> Option<&TypeLabel> {
        self.entries
            .get(name)?
            .iter()
            .find(|e| e.bitness.is_none_or(|b| b == bitness))
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, TypeLibraryParseError> {
        let raw: Pairs<OneOrMany<TypeEntryJson>> = serde_json::from_str(text)?;
        let mut lib = TypeLibrary::new();
        for (name, entries) in raw.0 {
            let entries = match entries {
                OneOrMany::One(e) => vec![e],
                OneOrMany::Many(v) => v,
            };
            for e in entries {
                let layout = (e.kind.requires_layout() || !e.fields.is_empty()).then_some({
                    TypeLayout {
                        total_width: e.total_width,
                        fields: e.fields,
                    }
                });
                lib.insert(TypeLabel {
                    name: name.clone(),
                    kind: e.kind,
                    bitness: e.bitness,
                    layout,
                })?;
            }
        }
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            TypeLibraryParseError::Json(source) => CorpusError::Json {
                path: path.to_path_buf(),
                source,
            },
            TypeLibraryParseError::Corpus(c) => c,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (name, entries) in &self.entries {
            let json: Vec<TypeEntryJson> = entries
                .iter()
                .map(|e| TypeEntryJson {
                    kind: e.kind,
                    bitness: e.bitness,
                    total_width: e.layout.as_ref().map_or(0, |l| l.total_width),
                    fields: e.layout.as_ref().map_or_else(Vec::new, |l| l.fields.clone()),
                })
                .collect();
            let value = if json.len() == 1 {
                serde_json::to_value(&json[0])
            } else {
                serde_json::to_value(&json)
            };
            obj.insert(name.clone(), value.expect("type entries serialize"));
        }
        serde_json::Value::Object(obj)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TypeLibraryParseError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub fn load_type_library(path: &Path) -> Result<TypeLibrary> {
    TypeLibrary::load(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureLabel {
    pub name: String,
    pub function_name: String,
    pub parameters: Vec<Parameter>,
    pub return_type_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SignatureEntryJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    function: Option<String>,
    #[serde(default)]
    params: Vec<Parameter>,
    #[serde(rename = "return")]
    return_type: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignatureLibrary {
    entries: BTreeMap<String, SignatureLabel>,
}

impl SignatureLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: SignatureLabel) {
        self.entries.insert(label.name.clone(), label);
    }

    pub fn get(&self, name: &str) -> Option<&SignatureLabel> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, TypeLibraryParseError> {
        let raw: Pairs<SignatureEntryJson> = serde_json::from_str(text)?;
        let mut lib = SignatureLibrary::new();
        for (name, e) in raw.0 {
            if lib.entries.contains_key(&name) {
                return Err(CorpusError::DuplicateType {
                    name,
                    bitness: "any".into(),
                }
                .into());
            }
            lib.insert(SignatureLabel {
                function_name: e.function.unwrap_or_else(|| name.clone()),
                name,
                parameters: e.params,
                return_type_name: e.return_type,
            });
        }
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            TypeLibraryParseError::Json(source) => CorpusError::Json {
                path: path.to_path_buf(),
                source,
            },
            TypeLibraryParseError::Corpus(c) => c,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (name, s) in &self.entries {
            let entry = SignatureEntryJson {
                function: (s.function_name != *name).then(|| s.function_name.clone()),
                params: s.parameters.clone(),
                return_type: s.return_type_name.clone(),
            };
            obj.insert(
                name.clone(),
                serde_json::to_value(entry).expect("signature entries serialize"),
            );
        }
        serde_json::Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedFunction {
    pub binary_id: String,
    pub address: u64,
    pub bitness: Bitness,
    pub code: String,
    /// identifier → type name
    pub vars: BTreeMap<String, String>,
    /// callee identifier → signature name
    pub calls: BTreeMap<String, String>,
    /// callee identifier → callee address, when the decompiler knows it
    pub callee_addrs: BTreeMap<String, u64>,
    pub split: Split,
    pub opt_level: Option<String>,
}

impl AnnotatedFunction {
    pub fn tokens(&self) -> TokenStream {
        tokenize(&self.code)
    }

    /// Address of a callee, from explicit annotations or an IDA-style
    /// `sub_<hex>` name.
    pub fn callee_address(&self, callee: &str) -> Option<u64> {
        self.callee_addrs
            .get(callee)
            .copied()
            .or_else(|| address_from_name(callee))
    }
}

pub fn address_from_name(name: &str) -> Option<u64> {
    let hex = name.strip_prefix("sub_")?;
    if hex.is_empty() || hex.len() > 16 {
        return None;
    }
    u64::from_str_radix(hex, 16).ok()
}

#[derive(Debug, Deserialize)]
struct RecordJson {
    binary_id: String,
    address: String,
    bitness: i64,
    code: String,
    #[serde(default)]
    vars: Pairs<String>,
    #[serde(default)]
    calls: Pairs<String>,
    #[serde(default)]
    callee_addrs: Pairs<String>,
    split: Split,
    #[serde(default)]
    opt: Option<String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    binary_id: &'a str,
    address: String,
    bitness: u32,
    code: &'a str,
    vars: &'a BTreeMap<String, String>,
    calls: &'a BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    callee_addrs: BTreeMap<&'a str, String>,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    opt: Option<&'a str>,
}

pub fn parse_address(text: &str) -> Option<u64> {
    let t = text.trim();
    let hex = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    u64::from_str_radix(hex, 16).ok()
}

fn unique_map(line: usize, pairs: Pairs<String>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, v) in pairs.0 {
        if let Some(prev) = out.get(&k) {
            if *prev != v {
                return Err(CorpusError::ConflictingAnnotation {
                    line,
                    identifier: k,
                });
            }
        }
        out.insert(k, v);
    }
    Ok(out)
}

fn parse_record(line: usize, text: &str) -> Result<AnnotatedFunction> {
    let raw: RecordJson = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line,
        message: e.to_string(),
    })?;
    let bitness = Bitness::from_bits(raw.bitness).ok_or(CorpusError::InvalidBitness {
        line,
        value: raw.bitness,
    })?;
    let address = parse_address(&raw.address).ok_or_else(|| CorpusError::Parse {
        line,
        message: format!("invalid address `{}`", raw.address),
    })?;
    let mut callee_addrs = BTreeMap::new();
    for (callee, addr) in raw.callee_addrs.0 {
        let a = parse_address(&addr).ok_or_else(|| CorpusError::Parse {
            line,
            message: format!("invalid callee address `{addr}`"),
        })?;
        callee_addrs.insert(callee, a);
    }
    Ok(AnnotatedFunction {
        binary_id: raw.binary_id,
        address,
        bitness,
        code: raw.code,
        vars: unique_map(line, raw.vars)?,
        calls: unique_map(line, raw.calls)?,
        callee_addrs,
        split: raw.split,
        opt_level: raw.opt,
    })
}

/// Functions plus the libraries their annotations resolve against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub functions: Vec<AnnotatedFunction>,
    pub types: TypeLibrary,
    pub signatures: SignatureLibrary,
}

impl Corpus {
    /// Validates and assembles a corpus built in memory.
    pub fn new(
        functions: Vec<AnnotatedFunction>,
        types: TypeLibrary,
        signatures: SignatureLibrary,
    ) -> Result<Self> {
        let lines: Vec<usize> = (1..=functions.len()).collect();
        Self::with_lines(functions, &lines, types, signatures)
    }

    fn with_lines(
        functions: Vec<AnnotatedFunction>,
        lines: &[usize],
        types: TypeLibrary,
        signatures: SignatureLibrary,
    ) -> Result<Self> {
        if let Some(name) = signatures.names().find(|n| types.contains_name(n)) {
            return Err(CorpusError::VocabularyOverlap(name.to_string()));
        }
        let mut seen = HashSet::new();
        for (f, &line) in functions.iter().zip(lines) {
            if !seen.insert((f.binary_id.as_str(), f.address)) {
                return Err(CorpusError::DuplicateFunction {
                    line,
                    binary_id: f.binary_id.clone(),
                    address: f.address,
                });
            }
            validate_function(f, line, &types, &signatures)?;
        }
        Ok(Corpus {
            functions,
            types,
            signatures,
        })
    }

    pub fn load(path: &Path, types: TypeLibrary, signatures: SignatureLibrary) -> Result<Self> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut functions = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let text = line.map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if text.trim().is_empty() {
                continue;
            }
            functions.push(parse_record(line_no, &text)?);
            lines.push(line_no);
        }
        Self::with_lines(functions, &lines, types, signatures)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for f in &self.functions {
            let rec = RecordOut {
                binary_id: &f.binary_id,
                address: format!("{:#x}", f.address),
                bitness: f.bitness.bits(),
                code: &f.code,
                vars: &f.vars,
                calls: &f.calls,
                callee_addrs: f
                    .callee_addrs
                    .iter()
                    .map(|(k, v)| (k.as_str(), format!("{v:#x}")))
                    .collect(),
                split: f.split,
                opt: f.opt_level.as_deref(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedFunction> {
        self.functions.iter().filter(move |f| f.split == split)
    }

    pub fn find(&self, binary_id: &str, address: u64) -> Option<&AnnotatedFunction> {
        self.functions
            .iter()
            .find(|f| f.binary_id == binary_id && f.address == address)
    }

    /// Index for repeated (binary, address) lookups.
    pub fn index(&self) -> HashMap<(&str, u64), &AnnotatedFunction> {
        self.functions
            .iter()
            .map(|f| ((f.binary_id.as_str(), f.address), f))
            .collect()
    }

    pub fn bitnesses(&self, split: Split) -> Vec<Bitness> {
        let mut b: Vec<Bitness> = self.split(split).map(|f| f.bitness).collect();
        b.sort();
        b.dedup();
        b
    }

    /// Normalized-stream hashes of one split.
    pub fn stream_hashes(&self, split: Split) -> HashSet<NGramKey> {
        self.split(split).map(|f| f.tokens().stream_hash()).collect()
    }
}

fn validate_function(
    f: &AnnotatedFunction,
    line: usize,
    types: &TypeLibrary,
    signatures: &SignatureLibrary,
) -> Result<()> {
    let stream = f.tokens();
    for (ident, ty) in &f.vars {
        if !stream.contains_identifier(ident) {
            return Err(CorpusError::MissingIdentifier {
                line,
                identifier: ident.clone(),
            });
        }
        if types.get(ty, f.bitness).is_none() {
            return Err(CorpusError::UnresolvedAnnotation {
                line,
                name: ty.clone(),
                vocabulary: "type",
            });
        }
    }
    for (callee, sig) in &f.calls {
        if !stream.contains_identifier(callee) {
            return Err(CorpusError::MissingIdentifier {
                line,
                identifier: callee.clone(),
            });
        }
        if signatures.get(sig).is_none() {
            return Err(CorpusError::UnresolvedAnnotation {
                line,
                name: sig.clone(),
                vocabulary: "signature",
            });
        }
    }
    Ok(())
}

pub fn load_corpus(
    path: &Path,
    types: TypeLibrary,
    signatures: SignatureLibrary,
) -> Result<Corpus> {
    Corpus::load(path, types, signatures)
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitOverlap {
    pub a: Split,
    pub b: Split,
    /// distinct normalized streams present in both splits
    pub shared: usize,
    /// fraction of `a`'s functions whose stream also occurs in `b`
    pub a_in_b: f64,
    pub b_in_a: f64,
    /// shared distinct streams over the smaller split's distinct streams
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub counts: BTreeMap<Split, usize>,
    pub overlaps: Vec<SplitOverlap>,
}

pub fn split_overlap(corpus: &Corpus, a: Split, b: Split) -> SplitOverlap {
    let streams =
        |s: Split| -> Vec<NGramKey> { corpus.split(s).map(|f| f.tokens().stream_hash()).collect() };
    let (sa, sb) = (streams(a), streams(b));
    let (ha, hb): (HashSet<_>, HashSet<_>) = (sa.iter().collect(), sb.iter().collect());
    let frac = |xs: &[NGramKey], other: &HashSet<&NGramKey>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|h| other.contains(h)).count() as f64 / xs.len() as f64
        }
    };
    let shared = ha.intersection(&hb).count();
    let denom = ha.len().min(hb.len());
    SplitOverlap {
        a,
        b,
        shared,
        a_in_b: frac(&sa, &hb),
        b_in_a: frac(&sb, &ha),
        overlap: if denom == 0 {
            0.0
        } else {
            shared as f64 / denom as f64
        },
    }
}

/// Per-split counts and pairwise overlap by exact normalized-stream equality.
pub fn validate_splits(corpus: &Corpus) -> SplitReport {
    let counts = Split::ALL
        .iter()
        .map(|&s| (s, corpus.split(s).count()))
        .collect();
    let overlaps = vec![
        split_overlap(corpus, Split::Train, Split::Validation),
        split_overlap(corpus, Split::Train, Split::Test),
        split_overlap(corpus, Split::Validation, Split::Test),
    ];
    SplitReport { counts, overlaps }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib() -> TypeLibrary {
        TypeLibrary::from_json_str(
            r#"{"int32_t":{"kind":"primitive","total_width":4},
                "S":{"kind":"struct","total_width":8,"fields":[
                    {"name":"a","offset":0,"width":4,"type":"int32_t"},
                    {"name":"b","offset":4,"width":4,"type":"int32_t"}]}}"#,
        )
        .unwrap()
    }

    fn sigs() -> SignatureLibrary {
        SignatureLibrary::from_json_str(
            r#"{"sigA":{"params":[{"name":"p","type":"int32_t"}],"return":"void"}}"#,
        )
        .unwrap()
    }

    fn record(id: &str, addr: &str, code: &str, vars: &str, split: &str) -> String {
        format!(
            r#"{{"binary_id":"{id}","address":"{addr}","bitness":64,"code":"{code}","vars":{vars},"calls":{{}},"split":"{split}"}}"#
        )
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn minimal_corpus() {
        let f = write_lines(&[record("b", "0x10", "x = 1;", r#"{"x":"int32_t"}"#, "train")]);
        let c = load_corpus(f.path(), lib(), sigs()).unwrap();
        assert_eq!(c.functions.len(), 1);
        assert_eq!(c.functions[0].vars.len(), 1);
        assert_eq!(c.functions[0].address, 0x10);
    }

    #[test]
    fn unresolved_type_name() {
        let f = write_lines(&[record("b", "0x10", "x = 1;", r#"{"x":"nope_t"}"#, "train")]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::UnresolvedAnnotation { line: 1, .. }));
    }

    #[test]
    fn three_way_partition() {
        let f = write_lines(&[
            record("b", "0x10", "x = 1;", r#"{"x":"int32_t"}"#, "train"),
            record("b", "0x20", "x = 2;", r#"{"x":"int32_t"}"#, "validation"),
            record("b", "0x30", "y = 3;", r#"{"y":"S"}"#, "test"),
        ]);
        let c = load_corpus(f.path(), lib(), sigs()).unwrap();
        let r = validate_splits(&c);
        assert_eq!(r.counts[&Split::Train], 1);
        assert_eq!(r.counts[&Split::Validation], 1);
        assert_eq!(r.counts[&Split::Test], 1);
    }

    #[test]
    fn parse_error_carries_line() {
        let f = write_lines(&[
            record("b", "0x10", "x = 1;", r#"{"x":"int32_t"}"#, "train"),
            "{not json".to_string(),
        ]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_function_rejected() {
        let f = write_lines(&[
            record("b", "0x10", "x = 1;", "{}", "train"),
            record("b", "0x10", "x = 2;", "{}", "test"),
        ]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateFunction { line: 2, .. }));
    }

    #[test]
    fn invalid_bitness_rejected() {
        let text = record("b", "0x10", "x;", "{}", "train").replace("64", "16");
        let f = write_lines(&[text]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidBitness { value: 16, .. }));
    }

    #[test]
    fn annotation_must_occur_in_code() {
        let f = write_lines(&[record("b", "0x10", "y = 1;", r#"{"x":"int32_t"}"#, "train")]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingIdentifier { .. }));
    }

    #[test]
    fn conflicting_labels_for_one_identifier() {
        let f = write_lines(&[record(
            "b",
            "0x10",
            "x = 1;",
            r#"{"x":"int32_t","x":"S"}"#,
            "train",
        )]);
        let err = load_corpus(f.path(), lib(), sigs()).unwrap_err();
        assert!(matches!(err, CorpusError::ConflictingAnnotation { .. }));
    }

    #[test]
    fn layout_two_fields() {
        let l = lib();
        let s = l.get("S", Bitness::B64).unwrap();
        assert_eq!(s.layout.as_ref().unwrap().fields.len(), 2);
    }

    #[test]
    fn decreasing_offsets_rejected() {
        let err = TypeLibrary::from_json_str(
            r#"{"S":{"kind":"struct","total_width":8,"fields":[
                {"name":"a","offset":4,"width":4,"type":"int"},
                {"name":"b","offset":0,"width":4,"type":"int"}]}}"#,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            TypeLibraryParseError::Corpus(CorpusError::Layout { .. })
        ));
    }

    #[test]
    fn overlapping_ranges_with_distinct_offsets_accepted() {
        let l = TypeLibrary::from_json_str(
            r#"{"T":{"kind":"union","total_width":8,"fields":[
                {"name":"a","offset":0,"width":4,"type":"int"},
                {"name":"b","offset":2,"width":4,"type":"int"}]}}"#,
        )
        .unwrap();
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn shared_offset_rejected() {
        let err = TypeLibrary::from_json_str(
            r#"{"T":{"kind":"struct","total_width":8,"fields":[
                {"name":"a","offset":0,"width":4,"type":"int"},
                {"name":"b","offset":0,"width":2,"type":"short"}]}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("share offset"));
    }

    #[test]
    fn field_past_total_width_rejected() {
        assert!(TypeLibrary::from_json_str(
            r#"{"T":{"kind":"struct","total_width":4,"fields":[
                {"name":"a","offset":0,"width":8,"type":"long"}]}}"#,
        )
        .is_err());
    }

    #[test]
    fn per_bitness_definitions() {
        let l = TypeLibrary::from_json_str(
            r#"{"P":[{"kind":"struct","bitness":32,"total_width":4,"fields":[{"name":"p","offset":0,"width":4,"type":"void *"}]},
                     {"kind":"struct","bitness":64,"total_width":8,"fields":[{"name":"p","offset":0,"width":8,"type":"void *"}]}]}"#,
        )
        .unwrap();
        assert_eq!(l.get("P", Bitness::B32).unwrap().layout.as_ref().unwrap().total_width, 4);
        assert_eq!(l.get("P", Bitness::B64).unwrap().layout.as_ref().unwrap().total_width, 8);
    }

    #[test]
    fn duplicate_name_same_bitness_rejected() {
        let err = TypeLibrary::from_json_str(
            r#"{"int":{"kind":"primitive","bitness":64},"int":{"kind":"primitive","bitness":64}}"#,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            TypeLibraryParseError::Corpus(CorpusError::DuplicateType { .. })
        ));
    }

    #[test]
    fn struct_without_layout_rejected() {
        let mut l = TypeLibrary::new();
        let err = l
            .insert(TypeLabel {
                name: "S".into(),
                kind: TypeKind::Struct,
                bitness: None,
                layout: None,
            })
            .unwrap_err();
        assert!(matches!(err, CorpusError::MissingLayout { .. }));
    }

    #[test]
    fn vocabularies_must_be_disjoint() {
        let s = SignatureLibrary::from_json_str(r#"{"int32_t":{"return":"void"}}"#).unwrap();
        let err = Corpus::new(vec![], lib(), s).unwrap_err();
        assert!(matches!(err, CorpusError::VocabularyOverlap(_)));
    }

    #[test]
    fn sub_names_carry_addresses() {
        assert_eq!(address_from_name("sub_401000"), Some(0x401000));
        assert_eq!(address_from_name("memcpy"), None);
        assert_eq!(address_from_name("sub_zz"), None);
    }

    fn func(addr: u64, code: &str, split: Split) -> AnnotatedFunction {
        AnnotatedFunction {
            binary_id: "b".into(),
            address: addr,
            bitness: Bitness::B64,
            code: code.into(),
            vars: BTreeMap::new(),
            calls: BTreeMap::new(),
            callee_addrs: BTreeMap::new(),
            split,
            opt_level: None,
        }
    }

    #[test]
    fn identical_streams_overlap_fully() {
        let c = Corpus::new(
            vec![
                func(1, "x = 1;", Split::Train),
                func(2, "x   =  9 ; // c", Split::Test),
            ],
            lib(),
            sigs(),
        )
        .unwrap();
        let o = split_overlap(&c, Split::Train, Split::Test);
        assert_eq!(o.overlap, 1.0);
        assert_eq!(o.a_in_b, 1.0);
    }

    #[test]
    fn disjoint_streams_do_not_overlap() {
        let c = Corpus::new(
            vec![func(1, "x = 1;", Split::Train), func(2, "y = 1;", Split::Test)],
            lib(),
            sigs(),
        )
        .unwrap();
        assert_eq!(split_overlap(&c, Split::Train, Split::Test).overlap, 0.0);
    }

    #[test]
    fn half_of_test_seen_in_train() {
        // stream-equality oracle: test functions 1 and 2 copy train functions
        let train = ["a = 1;", "b = 2;", "c = 3;", "d = 4;"];
        let test = ["a = 1;", "c = 3;", "e = 5;", "f = 6;"];
        let mut fs = Vec::new();
        for (i, t) in train.iter().enumerate() {
            fs.push(func(i as u64, t, Split::Train));
        }
        for (i, t) in test.iter().enumerate() {
            fs.push(func(100 + i as u64, t, Split::Test));
        }
        let c = Corpus::new(fs, lib(), sigs()).unwrap();
        let expected = test.iter().filter(|t| train.contains(t)).count() as f64 / test.len() as f64;
        let o = split_overlap(&c, Split::Test, Split::Train);
        assert_eq!(o.a_in_b, expected);
        assert_eq!(o.overlap, 0.5);
        let r = split_overlap(&c, Split::Train, Split::Test);
        assert_eq!(r.overlap, o.overlap);
    }

    #[test]
    fn reserialized_corpus_is_identical() {
        let f = write_lines(&[
            record("b", "0x10", "x = 1;", r#"{"x":"int32_t"}"#, "train"),
            record("c", "0x20", "y = x;", r#"{"y":"S"}"#, "test"),
        ]);
        let c = load_corpus(f.path(), lib(), sigs()).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let g = write_lines(&[String::from_utf8(buf).unwrap().trim_end().to_string()]);
        let types = TypeLibrary::from_json_str(&c.types.to_json().to_string()).unwrap();
        let signatures = SignatureLibrary::from_json_str(&c.signatures.to_json().to_string()).unwrap();
        let d = load_corpus(g.path(), types, signatures).unwrap();
        assert_eq!(c, d);
    }
}
