//! N-gram based type and function-signature recovery for decompiled code.

pub mod calibrate;
pub mod corpus;
pub mod engine;
pub mod lexer;
pub mod metrics;
pub mod ngramdb;
pub mod signatures;
