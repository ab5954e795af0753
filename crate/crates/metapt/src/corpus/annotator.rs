//! Pseudo-label annotator: the mini backbone fully tuned on a labeled
//! source set, then frozen and used to score an open corpus. Scoring
//! runs one text at a time and emits results in input order, so output
//! is deterministic however the work is scheduled.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Dataset, PseudoRecord};
use crate::autodiff::{adamw_step, grad, lr_schedule, AdamWConfig, AdamWState, Schedule};
use crate::model::{
    apply_template, class_probs, label_loss, predict, BackboneParams, TemplatedInput, Tokenizer,
    Verbalizer, DEFAULT_LABEL_WORDS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Verbalizer words, one per class. Defaults to a prefix of
    /// `DEFAULT_LABEL_WORDS`.
    pub label_words: Option<Vec<String>>,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            warmup: 10,
            seed: 0,
            label_words: None,
        }
    }
}

/// A trained, frozen classifier exposing class-probability scoring.
#[derive(Debug, Clone)]
pub struct Annotator {
    tokenizer: Tokenizer,
    backbone: BackboneParams,
    verbalizer: Verbalizer,
}

impl Annotator {
    pub fn n_classes(&self) -> usize {
        self.verbalizer.n_classes()
    }

    pub fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Class probabilities for one text; sums to 1.
    pub fn score(&self, text: &str) -> Result<Vec<f64>> {
        let input = apply_template(text, &self.tokenizer, &self.backbone.config)?;
        class_probs(&self.backbone, None, &self.verbalizer, &input)
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        let input = apply_template(text, &self.tokenizer, &self.backbone.config)?;
        predict(&self.backbone, None, &self.verbalizer, &input)
    }

    /// Reassembles an annotator from stored pieces, e.g. a checkpoint.
    /// The backbone is frozen on the way in.
    pub fn from_parts(
        tokenizer: Tokenizer,
        backbone: BackboneParams,
        verbalizer: Verbalizer,
    ) -> Annotator {
        Annotator { tokenizer, backbone: backbone.freeze(), verbalizer }
    }
}

/// The verbalizer words an [`AnnotatorConfig`] resolves to: its own
/// `label_words` if set, otherwise a prefix of `DEFAULT_LABEL_WORDS`.
pub fn resolve_label_words(cfg: &AnnotatorConfig, n_classes: usize) -> Result<Vec<String>> {
    match &cfg.label_words {
        Some(words) => {
            if words.len() != n_classes {
                return Err(Error::config(format!(
                    "{} label words for {n_classes} classes",
                    words.len()
                )));
            }
            Ok(words.clone())
        }
        None => {
            if n_classes > DEFAULT_LABEL_WORDS.len() {
                return Err(Error::config(format!(
                    "no default label words for {n_classes} classes; supply label_words"
                )));
            }
            Ok(DEFAULT_LABEL_WORDS[..n_classes].iter().map(|s| s.to_string()).collect())
        }
    }
}

/// Fully tunes a thawed copy of `init` on the labeled source set and
/// freezes the result. Every class must be represented in the source.
pub fn train_annotator(
    source: &Dataset,
    tok: &Tokenizer,
    init: &BackboneParams,
    cfg: &AnnotatorConfig,
) -> Result<Annotator> {
    source.validate()?;
    if source.is_empty() {
        return Err(Error::data("annotator source is empty"));
    }
    if !source.fully_labeled() {
        return Err(Error::data("annotator source has unlabeled examples"));
    }
    let mut present = vec![false; source.n_classes];
    for ex in &source.examples {
        present[ex.label.unwrap()] = true;
    }
    if let Some(c) = present.iter().position(|&p| !p) {
        return Err(Error::data(format!(
            "annotator source covers {} of {} classes (class {c} missing)",
            present.iter().filter(|&&p| p).count(),
            source.n_classes
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let words = resolve_label_words(cfg, source.n_classes)?;
    let verbalizer = Verbalizer::new(tok, &words)?;

    let inputs: Vec<(TemplatedInput, usize)> = source
        .examples
        .iter()
        .map(|ex| Ok((apply_template(&ex.text, tok, &init.config)?, ex.label.unwrap())))
        .collect::<Result<_>>()?;

    let mut bb = init.thawed_copy();
    let batches_per_epoch = inputs.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup = cfg.warmup.min(total_steps.saturating_sub(1));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new();
    let opt = AdamWConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&TemplatedInput, usize)> =
                chunk.iter().map(|&i| (&inputs[i].0, inputs[i].1)).collect();
            let loss = label_loss(&bb, None, &verbalizer, &batch)?;
            let params = bb.params();
            let grads = grad(&loss, &params, false)?;
            let lr = lr_schedule(Schedule::WarmupConstant, step as u64, warmup as u64, total_steps as u64, cfg.lr)?;
            let new = adamw_step(&params, &grads, &mut state, &opt, lr)?;
            bb = bb.with_params(new)?;
            step += 1;
        }
    }
    Ok(Annotator { tokenizer: tok.clone(), backbone: bb.freeze(), verbalizer })
}

/// Totals for one annotation pass. `retained + dropped` equals the
/// input count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub retained: usize,
    pub dropped: usize,
}

/// Scores every text and keeps the ones whose top-class probability
/// reaches `threshold`. Output preserves input order.
pub fn pseudo_label<S: AsRef<str>>(
    texts: &[S],
    annotator: &Annotator,
    threshold: f64,
) -> Result<(Vec<PseudoRecord>, PseudoStats)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut records = Vec::new();
    let mut dropped = 0usize;
    for text in texts {
        let probs = annotator.score(text.as_ref())?;
        let (label, conf) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        if conf >= threshold {
            records.push(PseudoRecord { text: text.as_ref().to_string(), pseudo_label: label, confidence: conf });
        } else {
            dropped += 1;
        }
    }
    let stats = PseudoStats { retained: records.len(), dropped };
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 32, prompt_len: 4 }
    }

    /// Two classes separated by a single word: "cold" texts are class 0,
    /// "warm" texts are class 1.
    fn separable_source() -> Dataset {
        let subjects = ["soup", "bread", "salad", "coffee", "stew", "cocoa"];
        let mut examples = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            examples.push(Example { text: format!("the {s} was cold today"), label: Some(0) });
            examples.push(Example { text: format!("the {s} was warm today"), label: Some(1) });
            examples.push(Example { text: format!("very cold {s} again"), label: Some(0) });
            examples.push(Example { text: format!("very warm {s} again"), label: Some(1) });
            let _ = i;
        }
        Dataset::new("separable", 2, examples).unwrap()
    }

    fn setup() -> (Dataset, Tokenizer, BackboneParams) {
        let source = separable_source();
        let texts = source.texts();
        let tok = Tokenizer::build(&texts, 64, &DEFAULT_LABEL_WORDS.to_vec()).unwrap();
        let backbone = BackboneParams::init(&tiny_config(), tok.vocab_size(), 5).unwrap();
        (source, tok, backbone)
    }

    #[test]
    fn annotator_separates_a_two_word_task() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 40, batch_size: 8, lr: 0.01, warmup: 5, seed: 1, label_words: None };
        let ann = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        let mut correct = 0;
        for ex in &source.examples {
            if ann.predict(&ex.text).unwrap() == ex.label.unwrap() {
                correct += 1;
            }
        }
        let acc = correct as f64 / source.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn retraining_with_the_same_seed_reproduces_scores() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 3, ..AnnotatorConfig::default() };
        let a = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        let b = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        assert_eq!(a.backbone().content_hash(), b.backbone().content_hash());
        let pa = a.score("the soup was warm").unwrap();
        let pb = b.score("the soup was warm").unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn scores_are_probabilities() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 2, ..AnnotatorConfig::default() };
        let ann = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        for text in ["the soup was cold", "entirely unseen words here", "warm warm warm"] {
            let p = ann.score(text).unwrap();
            assert_eq!(p.len(), 2);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} for {text}");
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn missing_class_is_rejected() {
        let (mut source, tok, backbone) = setup();
        for ex in &mut source.examples {
            ex.label = Some(0);
        }
        let err = train_annotator(&source, &tok, &backbone, &AnnotatorConfig::default()).unwrap_err();
        assert!(err.to_string().contains("class 1 missing"), "{err}");
    }

    #[test]
    fn threshold_bounds_are_enforced() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 1, ..AnnotatorConfig::default() };
        let ann = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        let texts = ["anything"];
        assert!(pseudo_label(&texts, &ann, 0.0).is_err());
        assert!(pseudo_label(&texts, &ann, 1.0).is_err());
        assert!(pseudo_label(&texts, &ann, 0.5).is_ok());
    }

    #[test]
    fn threshold_above_max_confidence_drops_everything() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 1, ..AnnotatorConfig::default() };
        let ann = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        let texts: Vec<String> = source.texts();
        let max_conf = texts
            .iter()
            .map(|t| ann.score(t).unwrap().into_iter().fold(f64::MIN, f64::max))
            .fold(f64::MIN, f64::max);
        let threshold = (max_conf + 1.0) / 2.0;
        assert!(threshold < 1.0);
        let (recs, stats) = pseudo_label(&texts, &ann, threshold).unwrap();
        assert!(recs.is_empty());
        assert_eq!(stats, PseudoStats { retained: 0, dropped: texts.len() });
    }

    #[test]
    fn filter_keeps_only_confident_records_and_accounts_for_all_input() {
        let (source, tok, backbone) = setup();
        let cfg = AnnotatorConfig { epochs: 15, ..AnnotatorConfig::default() };
        let ann = train_annotator(&source, &tok, &backbone, &cfg).unwrap();
        let mut texts = source.texts();
        texts.push("completely unrelated words".to_string());
        texts.push("neither one nor other".to_string());
        let threshold = 0.8;
        let (recs, stats) = pseudo_label(&texts, &ann, threshold).unwrap();
        assert_eq!(stats.retained + stats.dropped, texts.len());
        assert_eq!(stats.retained, recs.len());
        for r in &recs {
            assert!(r.confidence >= threshold, "{} at {}", r.text, r.confidence);
            assert!(r.pseudo_label < 2);
        }
    }
}
