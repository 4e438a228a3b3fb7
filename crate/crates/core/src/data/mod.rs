//! Vocabulary, tokenization, probe ingestion and masking.

mod masking;
mod probes;
mod vocab;

pub use masking::{
    make_mlm_batch, render_probe, Corruption, MaskedBatch, MaskedRow, MaskingConfig, ProbeMasking,
    RenderMode,
};
pub use probes::{
    load_probe_set, read_lines, reference_counts, FactProbe, LoadedProbeSet, ProbeSet, ProbeSetKind,
    RejectReason, Rejection,
};
pub use vocab::{
    detokenize, split_words, tokenize, Vocabulary, CLS_TOKEN, MASK_TOKEN, PAD_TOKEN, SEP_TOKEN,
    UNK_TOKEN,
};
