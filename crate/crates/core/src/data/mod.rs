//! Corpus ingestion: tokenization, truecasing, BPE, vocabularies, readers
//! and token-budget batching.

mod batch;
mod bpe;
mod corpus;
mod tokenize;
mod truecase;
mod vocab;

pub use batch::{make_batches, Batch};
pub use bpe::{learn_bpe, revert_bpe, BpeModel, MARKER};
pub use corpus::{
    read_lines, read_parallel, read_tagged, word_count, Example, Pipeline, ReadReport, TextExample, DEFAULT_MAX_LEN,
};
pub use tokenize::{detokenize, tokenize};
pub use truecase::Truecaser;
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
