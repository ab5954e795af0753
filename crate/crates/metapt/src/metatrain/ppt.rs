use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, grad, lr_schedule, AdamWConfig, AdamWState, Schedule, Tensor};
use crate::corpus::Dataset;
use crate::model::{apply_template, label_loss, predict, BackboneParams, TemplatedInput, Tokenizer, Verbalizer};
use crate::{Error, Result};

/// Pooled prompt pre-training settings: plain prompt tuning on the whole
/// pseudo-labeled pool, no task structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PptConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup: u64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for PptConfig {
    fn default() -> Self {
        PptConfig { lr: 0.003, batch_size: 4, max_epochs: 5, warmup: 20, patience: 5, seed: 0 }
    }
}

#[derive(Debug)]
pub struct PptResult {
    /// Prompt at the best validation epoch.
    pub prompt: Tensor,
    /// Prompt after the final step, regardless of validation.
    pub last: Tensor,
    /// Validation accuracy per completed epoch.
    pub curve: Vec<f64>,
    pub epochs_run: usize,
}

/// Prompt tuning over a pooled dataset: shuffled mini-batches of the
/// label loss, AdamW on the prompt alone, warmup-then-constant learning
/// rate, per-epoch validation with early stopping on `patience` epochs
/// without improvement. Batch contents are sorted by example index, so a
/// batch's loss does not depend on the shuffle's internal order.
pub fn ppt_train(
    backbone: &BackboneParams,
    tok: &Tokenizer,
    verbalizer: &Verbalizer,
    train: &Dataset,
    valid: &Dataset,
    init: &Tensor,
    cfg: &PptConfig,
) -> Result<PptResult> {
    if !backbone.frozen {
        return Err(Error::config("ppt_train requires a frozen backbone"));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::config("lr must be positive"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if cfg.patience == 0 {
        return Err(Error::config("patience must be at least 1"));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::data("ppt_train: empty train or valid split"));
    }
    if !train.fully_labeled() || !valid.fully_labeled() {
        return Err(Error::data("ppt_train: unlabeled examples in the pool"));
    }

    let prep = |ds: &Dataset| -> Result<Vec<(TemplatedInput, usize)>> {
        ds.examples
            .iter()
            .map(|ex| Ok((apply_template(&ex.text, tok, &backbone.config)?, ex.label.unwrap())))
            .collect()
    };
    let train_inputs = prep(train)?;
    let valid_inputs = prep(valid)?;

    let mut prompt = Tensor::param(init.to_vec(), init.rows(), init.cols());
    let mut best = prompt.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut bad = 0usize;
    let mut curve = Vec::new();
    let mut epochs_run = 0usize;

    let n = train_inputs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.max_epochs as u64;
    let warmup = cfg.warmup.min(total_steps);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamWState::new();
    let opt_cfg = AdamWConfig::with_lr(cfg.lr);
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch: Vec<(&TemplatedInput, usize)> =
                idx.iter().map(|&i| (&train_inputs[i].0, train_inputs[i].1)).collect();
            let loss = label_loss(backbone, Some(&prompt), verbalizer, &batch)?;
            let g = grad(&loss, &[prompt.clone()], false)?;
            let lr = lr_schedule(Schedule::WarmupConstant, step, warmup, total_steps, cfg.lr)?;
            prompt = adamw_step(&[prompt.clone()], &g, &mut opt, &opt_cfg, lr)?
                .into_iter()
                .next()
                .unwrap();
            step += 1;
        }
        epochs_run += 1;

        let mut correct = 0usize;
        for (input, label) in &valid_inputs {
            if predict(backbone, Some(&prompt), verbalizer, input)? == *label {
                correct += 1;
            }
        }
        let acc = correct as f64 / valid_inputs.len() as f64;
        curve.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = prompt.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }

    Ok(PptResult { prompt: best, last: prompt, curve, epochs_run })
}
