//! Desk-scale multimodal quantitative-language generative recommendation.
//!
//! Pipeline: per-item text/image embeddings are translated into discrete
//! code tuples by residual-quantized autoencoders ([`rqvae`]), serialized
//! into a shared prefixed token vocabulary ([`quantlang`]), turned into
//! six families of sequence-to-sequence training examples ([`corpus`]),
//! used to train a small encoder-decoder transformer ([`seq2seq`]), and
//! decoded into ranked recommendations via trie-constrained beam search
//! with two-list score fusion ([`generate`]), evaluated leave-one-out
//! ([`evaluate`]).

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod evaluate;
pub mod generate;
pub mod ingest;
pub mod optim;
pub mod quantlang;
pub mod rqvae;
pub mod seq2seq;
