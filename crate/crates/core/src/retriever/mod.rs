//! Reference dense retriever with closed-form gradients and integrated
//! gradients attribution over token embeddings.

mod encoder;
mod ig;
mod tokenize;

pub use encoder::{
    retrieve_topk, score, Activation, EmbeddingSequence, EncoderShape, ReferenceEncoder, ReferenceRetriever, Side,
};
pub use ig::{additivity_ratio, build_baseline, integrate, integrated_gradients, BaselineMode, IgPath, SaliencyVector, DEFAULT_STEPS};
pub use tokenize::{split_words, TokenSequence, Tokenizer, END, FIRST_REGULAR_ID, MASK, PAD, START, UNK};
pub(crate) use tokenize::fnv1a;
