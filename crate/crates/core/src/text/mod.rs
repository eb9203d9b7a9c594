//! Vocabulary, pretrained vectors, dataset ingestion, batching and
//! synthetic tasks.

pub mod batch;
pub mod dataset;
pub mod embeddings;
pub mod synth;
pub mod vocab;

pub use batch::{full_masks, make_batches, Batch, ExampleView};
pub use dataset::{load_jsonl, tokenize, Dataset, EncodedExample, Example};
pub use embeddings::{build_embeddings, load_pretrained, EmbeddingMatrix};
pub use vocab::{build_vocab, Vocabulary, PAD, UNK};
