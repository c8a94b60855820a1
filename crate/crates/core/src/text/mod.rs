//! Vocabulary, input encoding, JSONL ingestion and synthetic tasks.

mod dataset;
mod synth;
mod vocab;

pub use dataset::{
    decode, encode, load_jsonl, subsample_target, Dataset, Domain, Encoded, Example, Label, Split,
    TaskKind,
};
pub use synth::{keyword_oracle_accuracy, synth_generate, KeywordSets, SynthCorpus, SynthSpec};
pub use vocab::{tokenize, Vocabulary, CLS, MASK, NUM_RESERVED, PAD, SEP, UNK};
