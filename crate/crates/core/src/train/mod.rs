//! Masked-language-model training of a stacked-GAU encoder.

mod batch;
mod checkpoint;
mod corpus;
mod model;
mod optim;
mod schedule;
mod trainer;
mod vocab;

pub use batch::{make_mlm_batch, mask_tokens, Batch, LengthStrategy, MaskConfig};
pub use checkpoint::{
    load_checkpoint, restore, save_checkpoint, to_checkpoint, Checkpoint, StoredTensor, MAGIC, VERSION,
};
pub use corpus::{synthetic_corpus, SyntheticCorpusConfig, TokenStream};
pub use model::{
    count_correct, encode, masked_forward, model_forward, MaskedOutput, ModelConfig, ModelOutput, ModelParams,
    ModelVars,
};
pub use optim::{adamw_step, check_finite, AdamState, AdamWConfig};
pub use schedule::lr_at;
pub use trainer::{
    compute_step, eval_mlm_accuracy, train_loop, write_csv, write_run, EvalResult, EvalRow, MetricsRow, Resume,
    StepResult, TrainConfig, TrainRun, EVAL_HEADER, METRICS_HEADER,
};
pub use vocab::{build_vocab, tokenize, Vocab, CLS, MASK, NUM_RESERVED, PAD, SEP, UNK};
