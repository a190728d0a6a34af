//! Tokenizer for decompiled C-like pseudo-code and context-window extraction.
//!
//! The lexer is a maximal-munch scanner that never fails: bytes it does not
//! recognise become single-character punctuation tokens. Literals are replaced
//! by placeholders (`<NUM>`, `<STRING>`) so that contexts differing only in a
//! constant hash to the same key.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

pub const NUM_PLACEHOLDER: &str = "<NUM>";
pub const STRING_PLACEHOLDER: &str = "<STRING>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";

/// 64-bit key of a normalized context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NGramKey(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Identifier,
    Keyword,
    Punctuation,
    Operator,
    NumberPlaceholder,
    StringPlaceholder,
    BoundarySentinel,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub class: TokenClass,
}

impl Token {
    fn new(text: impl Into<String>, class: TokenClass) -> Self {
        Token {
            text: text.into(),
            class,
        }
    }

    pub fn bos() -> Self {
        Token::new(BOS, TokenClass::BoundarySentinel)
    }

    pub fn eos() -> Self {
        Token::new(EOS, TokenClass::BoundarySentinel)
    }

    pub fn is_identifier(&self) -> bool {
        self.class == TokenClass::Identifier
    }
}

const KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "bool", "true", "false",
];

// Longest first within each leading character so maximal munch is a linear scan.
const OPERATORS: &[&str] = &[
    "<<=", ">>=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=",
    "-=", "*=", "/=", "%=", "&=", "^=", "|=", "::", "+", "-", "*", "/", "%", "=", "<", ">", "!",
    "&", "|", "^", "~", "?", ":", ".",
];

const PUNCTUATION: &[char] = &['(', ')', '[', ']', '{', '}', ',', ';'];

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$' || c == '@'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '@'
}

/// Normalized token sequence of one function plus an index of where each
/// identifier occurs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<Token>,
    occurrences: FxHashMap<String, Vec<usize>>,
    // identifiers in order of first occurrence
    order: Vec<String>,
}

impl TokenStream {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let mut occurrences: FxHashMap<String, Vec<usize>> = FxHashMap::default();
        let mut order = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_identifier() {
                let slot = occurrences.entry(tok.text.clone()).or_default();
                if slot.is_empty() {
                    order.push(tok.text.clone());
                }
                slot.push(i);
            }
        }
        TokenStream {
            tokens,
            occurrences,
            order,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn occurrences(&self, identifier: &str) -> &[usize] {
        self.occurrences
            .get(identifier)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains_identifier(&self, identifier: &str) -> bool {
        self.occurrences.contains_key(identifier)
    }

    /// Distinct identifiers ordered by first occurrence.
    pub fn identifiers(&self) -> &[String] {
        &self.order
    }

    /// Token texts joined by single spaces; re-tokenizing yields the same stream.
    pub fn joined(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&t.text);
        }
        out
    }

    /// Hash of the whole normalized stream, used for split-overlap checks.
    pub fn stream_hash(&self) -> NGramKey {
        hash_context(self.tokens.iter().map(|t| t.text.as_str()))
    }

    /// Returns the index of the `(` opening the argument list when the
    /// identifier at `index` is called. Closing parens of a surrounding cast
    /// may sit between the callee and the argument list.
    pub fn call_open_paren(&self, index: usize) -> Option<usize> {
        let tok = self.tokens.get(index)?;
        if !tok.is_identifier() {
            return None;
        }
        let mut j = index + 1;
        while j < self.tokens.len() && self.tokens[j].text == ")" {
            j += 1;
        }
        (j < self.tokens.len() && self.tokens[j].text == "(").then_some(j)
    }

    pub fn is_call_occurrence(&self, index: usize) -> bool {
        self.call_open_paren(index).is_some()
    }

    /// Identifiers with at least one call occurrence, in first-occurrence order.
    pub fn callees(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|id| {
                self.occurrences(id)
                    .iter()
                    .any(|&i| self.is_call_occurrence(i))
            })
            .map(String::as_str)
            .collect()
    }
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn peek_at(&self, offset_chars: usize) -> Option<char> {
        self.rest().chars().nth(offset_chars)
    }

    fn bump_while(&mut self, mut pred: impl FnMut(char) -> bool) {
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn skip_to_eol(&mut self) {
        self.bump_while(|c| c != '\n');
    }

    // Consumes a quoted literal starting at the opening quote. An unterminated
    // literal swallows the rest of the line.
    fn quoted(&mut self, quote: char) {
        self.pos += 1;
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => {
                    if let Some((_, n)) = chars.next() {
                        if n == '\n' {
                            self.pos += i;
                            return;
                        }
                    }
                }
                '\n' => {
                    self.pos += i;
                    return;
                }
                c if c == quote => {
                    self.pos += i + 1;
                    return;
                }
                _ => {}
            }
        }
        self.pos = self.src.len();
    }

    // pp-number: digits, letters, underscores, dots, and a sign after an exponent marker.
    fn number(&mut self) {
        let mut prev = '\0';
        while let Some(c) = self.peek() {
            let sign_ok = (c == '+' || c == '-') && matches!(prev, 'e' | 'E' | 'p' | 'P');
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' || sign_ok {
                self.pos += 1;
                prev = c;
            } else {
                break;
            }
        }
    }
}

fn string_prefix_len(rest: &str) -> Option<usize> {
    for prefix in ["u8\"", "L\"", "u\"", "U\"", "L'", "u'", "U'"] {
        if rest.starts_with(prefix) {
            return Some(prefix.len() - 1);
        }
    }
    None
}

/// Tokenizes pseudo-code. Whitespace and comments are dropped, literals become
/// placeholders, and anything unrecognised becomes a one-character
/// punctuation token.
pub fn tokenize(source: &str) -> TokenStream {
    let mut sc = Scanner { src: source, pos: 0 };
    let mut tokens = Vec::new();

    while let Some(c) = sc.peek() {
        let rest = sc.rest();
        if c.is_whitespace() {
            sc.pos += c.len_utf8();
            continue;
        }
        if rest.starts_with("//") {
            sc.skip_to_eol();
            continue;
        }
        if let Some(body) = rest.strip_prefix("/*") {
            match body.find("*/") {
                Some(end) => sc.pos += end + 4,
                None => sc.pos = source.len(),
            }
            continue;
        }
        if c == '<' {
            if let Some(p) = [NUM_PLACEHOLDER, STRING_PLACEHOLDER, BOS, EOS]
                .into_iter()
                .find(|p| rest.starts_with(p))
            {
                sc.pos += p.len();
                let class = match p {
                    NUM_PLACEHOLDER => TokenClass::NumberPlaceholder,
                    STRING_PLACEHOLDER => TokenClass::StringPlaceholder,
                    _ => TokenClass::BoundarySentinel,
                };
                tokens.push(Token::new(p, class));
                continue;
            }
        }
        if let Some(skip) = string_prefix_len(rest) {
            sc.pos += skip;
            let quote = sc.peek().unwrap_or('"');
            sc.quoted(quote);
            tokens.push(literal_token(quote));
            continue;
        }
        if c == '"' || c == '\'' {
            sc.quoted(c);
            tokens.push(literal_token(c));
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && sc.peek_at(1).is_some_and(|d| d.is_ascii_digit())) {
            sc.number();
            tokens.push(Token::new(NUM_PLACEHOLDER, TokenClass::NumberPlaceholder));
            continue;
        }
        if is_ident_start(c) {
            let start = sc.pos;
            sc.bump_while(is_ident_continue);
            let word = &source[start..sc.pos];
            let class = if KEYWORDS.contains(&word) {
                TokenClass::Keyword
            } else {
                TokenClass::Identifier
            };
            tokens.push(Token::new(word, class));
            continue;
        }
        if PUNCTUATION.contains(&c) {
            sc.pos += 1;
            tokens.push(Token::new(c.to_string(), TokenClass::Punctuation));
            continue;
        }
        if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(**op)) {
            sc.pos += op.len();
            tokens.push(Token::new(*op, TokenClass::Operator));
            continue;
        }
        sc.pos += c.len_utf8();
        tokens.push(Token::new(c.to_string(), TokenClass::Punctuation));
    }

    TokenStream::from_tokens(tokens)
}

fn literal_token(quote: char) -> Token {
    if quote == '"' {
        Token::new(STRING_PLACEHOLDER, TokenClass::StringPlaceholder)
    } else {
        Token::new(NUM_PLACEHOLDER, TokenClass::NumberPlaceholder)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SEPARATOR: u8 = 0x1f;

/// FNV-1a 64 over token texts joined with a 0x1F separator byte.
pub fn hash_context<'a>(texts: impl IntoIterator<Item = &'a str>) -> NGramKey {
    let mut h = FNV_OFFSET;
    for (i, text) in texts.into_iter().enumerate() {
        if i > 0 {
            h ^= SEPARATOR as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in text.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    NGramKey(h)
}

/// Context around one identifier occurrence. The center token is never part
/// of the hashed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub n: usize,
    pub position: usize,
    pub left: Vec<String>,
    pub center: String,
    pub right: Vec<String>,
    pub key: NGramKey,
    /// Set when a call's argument list ran off the end of the stream.
    pub truncated: bool,
}

impl ContextWindow {
    fn new(
        n: usize,
        position: usize,
        left: Vec<String>,
        center: String,
        right: Vec<String>,
        truncated: bool,
    ) -> Self {
        let key = hash_context(left.iter().chain(right.iter()).map(String::as_str));
        ContextWindow {
            n,
            position,
            left,
            center,
            right,
            key,
            truncated,
        }
    }

    pub fn hashed_len(&self) -> usize {
        self.left.len() + self.right.len()
    }
}

fn left_of(tokens: &[Token], pos: usize, n: usize) -> Vec<String> {
    let start = pos.saturating_sub(n);
    let mut left = Vec::with_capacity(n);
    left.extend(std::iter::repeat_n(BOS.to_string(), n - (pos - start)));
    left.extend(tokens[start..pos].iter().map(|t| t.text.clone()));
    left
}

fn push_right(tokens: &[Token], from: usize, n: usize, out: &mut Vec<String>) {
    let end = (from + n).min(tokens.len());
    if from < end {
        out.extend(tokens[from..end].iter().map(|t| t.text.clone()));
    }
    let got = end.saturating_sub(from);
    out.extend(std::iter::repeat_n(EOS.to_string(), n - got));
}

/// Window of radius `n` around token `pos`, padded with sentinels at the edges.
pub fn variable_window(stream: &TokenStream, pos: usize, n: usize) -> ContextWindow {
    let tokens = stream.tokens();
    let left = left_of(tokens, pos, n);
    let mut right = Vec::with_capacity(n);
    push_right(tokens, pos + 1, n, &mut right);
    ContextWindow::new(n, pos, left, tokens[pos].text.clone(), right, false)
}

/// One window per occurrence of `identifier`, in source order. Unknown
/// identifiers yield no windows.
pub fn extract_variable_contexts(
    stream: &TokenStream,
    identifier: &str,
    n: usize,
) -> Vec<ContextWindow> {
    stream
        .occurrences(identifier)
        .iter()
        .map(|&pos| variable_window(stream, pos, n))
        .collect()
}

/// End (exclusive) of the call signature starting at the callee token `pos`,
/// and whether the argument list ran off the end of the stream.
fn call_span(stream: &TokenStream, pos: usize) -> Option<(usize, bool)> {
    let open = stream.call_open_paren(pos)?;
    let mut depth = 0usize;
    for (j, tok) in stream.tokens().iter().enumerate().skip(open) {
        match tok.text.as_str() {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    return Some((j + 1, false));
                }
            }
            _ => {}
        }
    }
    Some((stream.len(), true))
}

/// Window for a call at token `pos`: the whole argument list (and any cast
/// parens before it) goes to the right side and does not count towards `n`.
/// Returns `None` if `pos` is not a call occurrence.
pub fn call_window(stream: &TokenStream, pos: usize, n: usize) -> Option<ContextWindow> {
    let (sig_end, truncated) = call_span(stream, pos)?;
    let tokens = stream.tokens();
    let left = left_of(tokens, pos, n);
    let mut right: Vec<String> = tokens[pos + 1..sig_end]
        .iter()
        .map(|t| t.text.clone())
        .collect();
    push_right(tokens, sig_end, n, &mut right);
    Some(ContextWindow::new(
        n,
        pos,
        left,
        tokens[pos].text.clone(),
        right,
        truncated,
    ))
}

fn padded(
    tokens: &[Token],
    before: usize,
    pos: usize,
    after: usize,
    end: usize,
    n: usize,
) -> impl Iterator<Item = &str> {
    let start = pos.saturating_sub(n);
    let right_end = (after + n).min(tokens.len());
    let right_got = right_end.saturating_sub(after);
    std::iter::repeat_n(BOS, n - (pos - start))
        .chain(tokens[start..pos].iter().map(|t| t.text.as_str()))
        .chain(tokens[before..end].iter().map(|t| t.text.as_str()))
        .chain(tokens[after.min(right_end)..right_end].iter().map(|t| t.text.as_str()))
        .chain(std::iter::repeat_n(EOS, n - right_got))
}

/// Key of [`variable_window`] without materializing the window.
pub fn variable_key(stream: &TokenStream, pos: usize, n: usize) -> NGramKey {
    hash_context(padded(stream.tokens(), pos + 1, pos, pos + 1, pos + 1, n))
}

/// Key of [`call_window`] without materializing the window.
pub fn call_key(stream: &TokenStream, pos: usize, n: usize) -> Option<NGramKey> {
    let (sig_end, _) = call_span(stream, pos)?;
    Some(hash_context(padded(
        stream.tokens(),
        pos + 1,
        pos,
        sig_end,
        sig_end,
        n,
    )))
}

/// One window per call occurrence of `callee`, in source order. Occurrences
/// that are not calls (e.g. the callee passed as a function pointer) are
/// skipped.
pub fn extract_call_contexts(stream: &TokenStream, callee: &str, n: usize) -> Vec<ContextWindow> {
    stream
        .occurrences(callee)
        .iter()
        .filter_map(|&pos| call_window(stream, pos, n))
        .collect()
}
