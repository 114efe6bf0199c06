//! Fine-tuning head and decoding on top of the pretrained encoder.

pub mod charset;
pub mod model;
pub mod train;

pub use charset::Charset;
pub use model::{causal_bias, Recognizer, RecognizerConfig, DECODER_PREFIX};
pub use train::{
    finetune_step, greedy_decode, load_recognizer, normalize_for_match, recognize_all, run_finetune,
    sequence_cross_entropy, word_accuracy, FinetuneInit, FinetuneOptions, FinetuneOutcome, FinetuneRow,
    FinetuneStep, FinetuneTrainer,
};
