//! End-to-end speech-to-text translation at desk scale.
//!
//! The pipeline: raw audio becomes 80-dimensional log-Mel filterbank features
//! ([`features`]), paired with normalized English translations and bucketed into
//! padded mini-batches ([`corpus`]). A CNN + bidirectional-LSTM encoder feeds a
//! word- or character-level attention decoder ([`model`]) built on a small
//! reverse-mode autodiff engine ([`nn`]). Training with early stopping and
//! checkpointing lives in [`train`], greedy/beam decoding in [`infer`], and the
//! multi-metric evaluation harness (BLEU, METEOR-style staged matching, unigram
//! precision/recall, frequency buckets, OOV counts) in [`eval`].

pub mod corpus;
pub mod eval;
pub mod features;
pub mod infer;
pub mod model;
pub mod nn;
pub mod train;

mod seed;

pub use seed::sub_seed;
