//! Command-line pipeline around `mqlrec-core`: synthesize data, train the
//! quantitative translators, tokenize items, build task corpora, train the
//! seq2seq recommender, and evaluate it.

pub mod commands;
pub mod config;
pub mod manifest;
