//! Mini bidirectional masked-language-model backbone, tokenizer, hard
//! template, soft prompt, and verbalizer head.
//!
//! The classification interface is text-to-text: a templated input ends
//! with `it was <mask> .`, the head reads log-probabilities at the mask,
//! and a verbalizer maps label words to classes. A soft prompt, when
//! present, is prepended to the token embeddings and is the only thing
//! that trains against a frozen backbone.

pub mod backbone;
pub mod head;
pub mod tokenizer;

pub use backbone::{
    mask_sequence, mlm_eval_loss, pretrain_backbone, BackboneParams, MaskedSeq, MlmConfig,
    ModelConfig,
};
pub use head::{
    class_probs, init_prompt, label_loss, predict, PromptInit, Verbalizer, DEFAULT_LABEL_WORDS,
};
pub use tokenizer::{
    apply_template, split_text, TemplatedInput, Tokenizer, MASK_ID, MASK_TOKEN, PAD_ID, PAD_TOKEN,
    TEMPLATE_WORDS, UNK_ID, UNK_TOKEN,
};
