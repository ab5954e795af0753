use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_record, softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::model::backbone::BackboneParams;
use crate::model::tokenizer::{TemplatedInput, Tokenizer};
use crate::util::randn_vec;

/// Ordered label-word mapping: class i verbalizes as `tokens[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verbalizer {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

/// The five-way sentiment mapping used by the shipped benchmarks.
pub const DEFAULT_LABEL_WORDS: [&str; 5] = ["terrible", "bad", "maybe", "good", "great"];

impl Verbalizer {
    /// Each label word must be a single known vocabulary token and the
    /// ids must be distinct.
    pub fn new(tok: &Tokenizer, words: &[String]) -> Result<Verbalizer> {
        if words.is_empty() {
            return Err(Error::config("verbalizer needs at least one label word"));
        }
        let mut ids = Vec::with_capacity(words.len());
        for w in words {
            let encoded = tok.encode(w);
            if encoded.len() != 1 {
                return Err(Error::config(format!(
                    "label word {w:?} does not tokenize to a single token"
                )));
            }
            let id = encoded[0];
            if id == crate::model::tokenizer::UNK_ID {
                return Err(Error::config(format!("label word {w:?} is not in the vocabulary")));
            }
            if ids.contains(&id) {
                return Err(Error::config(format!("label word {w:?} repeats a verbalizer id")));
            }
            ids.push(id);
        }
        Ok(Verbalizer { tokens: words.to_vec(), ids })
    }

    pub fn n_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn class_of_id(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }
}

/// Soft prompt initialization flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// N(0, 0.02^2) entries.
    #[default]
    RandomNormal,
    /// Rows copied from the embeddings of sampled vocabulary tokens.
    SampleVocab,
}

/// Fresh trainable prompt, `[prompt_len, d_model]`.
pub fn init_prompt(backbone: &BackboneParams, mode: PromptInit, seed: u64) -> Tensor {
    let plen = backbone.config.prompt_len;
    let d = backbone.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PromptInit::RandomNormal => Tensor::param(randn_vec(&mut rng, plen * d, 0.02), plen, d),
        PromptInit::SampleVocab => {
            let ids: Vec<usize> = (0..plen)
                .map(|_| rng.gen_range(0..backbone.vocab_size))
                .collect();
            backbone.tok_embed.gather_rows(&ids).detach().to_param()
        }
    }
}

/// Mean negative log-likelihood of the verbalized labels over a batch.
/// The normalizer runs over the full vocabulary.
pub fn label_loss(
    backbone: &BackboneParams,
    prompt: Option<&Tensor>,
    verbalizer: &Verbalizer,
    batch: &[(&TemplatedInput, usize)],
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::data("label_loss: empty batch"));
    }
    let mut total: Option<Tensor> = None;
    for (input, label) in batch {
        if *label >= verbalizer.n_classes() {
            return Err(Error::data(format!(
                "label {label} out of range for {}-way verbalizer",
                verbalizer.n_classes()
            )));
        }
        let lp = backbone.mask_log_probs(prompt, &input.ids)?;
        let target = verbalizer.ids[*label];
        let nll = lp.transpose().gather_rows(&[target]).scale(-1.0);
        total = Some(match total {
            Some(t) => t.add(&nll),
            None => nll,
        });
    }
    Ok(total.unwrap().scale(1.0 / batch.len() as f64))
}

/// Class probabilities at the mask, restricted to the verbalizer tokens
/// and renormalized. Runs unrecorded.
pub fn class_probs(
    backbone: &BackboneParams,
    prompt: Option<&Tensor>,
    verbalizer: &Verbalizer,
    input: &TemplatedInput,
) -> Result<Vec<f64>> {
    let _quiet = no_record();
    let lp = backbone.mask_log_probs(prompt, &input.ids)?;
    let picked: Vec<f64> = verbalizer.ids.iter().map(|&id| lp.data()[id]).collect();
    let probs = softmax_rows(&Tensor::constant(picked, 1, verbalizer.n_classes()));
    Ok(probs.to_vec())
}

/// Predicted class: argmax over verbalizer tokens, smallest class index
/// on ties.
pub fn predict(
    backbone: &BackboneParams,
    prompt: Option<&Tensor>,
    verbalizer: &Verbalizer,
    input: &TemplatedInput,
) -> Result<usize> {
    let probs = class_probs(backbone, prompt, verbalizer, input)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}
