//! Concrete-selector pilot placement.

pub mod concrete;
pub mod decoder;
pub mod pattern;
pub mod train;

pub use concrete::{
    anneal, concrete_forward, fill_gumbel, gumbel_from_uniform, sample_gumbel, selector_forward,
    selector_forward_with_noise, AnnealSchedule, ConcreteSelector,
};
pub use decoder::{Decoder, DecoderNet, DecoderSpec, DECODER_NAME};
pub use pattern::{argmax_gather, extract_pattern, interleave, PilotPattern};
pub use train::{
    decoder_loss, epoch_batches, selector_loss, train_decoder, train_selector, Batch, Frames,
    History, SelectorOutcome, TrainConfig, SELECTOR_LOGITS,
};
