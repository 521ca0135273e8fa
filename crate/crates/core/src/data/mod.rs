//! Utterances, the text corpus format, batching, and the synthetic corpus
//! with planted critical articulators.

mod batch;
mod channel;
mod io;
mod norm;
mod synth;
mod utterance;

pub use batch::{make_batches, Batch, BatchOptions};
pub use channel::{format_channels, ArticulatorChannel, EMA_DIM, MFCC_DIM};
pub use io::{
    format_utterance, load_corpus, parse_utterance, read_utterance, write_corpus, MANIFEST_NAME,
};
pub use norm::{FeatureStats, Normalizer};
pub use synth::{
    format_oracle, generate_corpus, generate_range, generate_utterance, parse_oracle,
    planted_oracle, random_projection, PlantedPhoneme, SyntheticSpec,
};
pub use utterance::{Corpus, Utterance};
