//! Few-shot adaptation and evaluation.
//!
//! One experiment cell is a method, a downstream dataset, and a list of
//! benchmark seeds. Every seed draws its own few-shot split, tunes on
//! it, and scores the untouched remainder; the cell reports the mean
//! and population deviation over the seeds. Prompt methods differ only
//! in where the prompt starts; the full-tuning baseline trains a
//! private copy of the backbone instead.

mod ablate;

pub use ablate::{ablate_clusters, ablate_datasize, ablate_methods, reports_csv, AblationContext};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adamw_step, grad, lr_schedule, AdamWConfig, AdamWState, Schedule, Tensor};
use crate::corpus::{sample_fewshot, Dataset};
use crate::metatrain::{ppt_train, PptConfig};
use crate::model::{
    apply_template, init_prompt, label_loss, predict, BackboneParams, PromptInit, TemplatedInput,
    Tokenizer, Verbalizer,
};
use crate::util::{mean_std, subseed};
use crate::{Error, Result};

/// Few-shot adaptation settings, shared by prompt tuning and the
/// full-model baseline. The default is the prompt-tuning operating
/// point; `ft_default` keeps the schedule and shrinks the step for
/// full-model updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup: u64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { lr: 0.003, batch_size: 4, max_epochs: 200, warmup: 20, patience: 5, seed: 0 }
    }
}

impl TuneConfig {
    /// Full-tuning operating point.
    pub fn ft_default() -> Self {
        TuneConfig { lr: 0.00003, ..TuneConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }

    fn to_ppt(&self) -> PptConfig {
        PptConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            warmup: self.warmup,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

/// Prompt tuning from an explicit initialization: AdamW on the prompt
/// alone against a frozen backbone, warmup-then-constant learning rate,
/// per-epoch validation with early stopping. Returns the prompt from
/// the best validation epoch and the per-epoch validation curve; with
/// `max_epochs` 0 the init comes back untouched and the curve is empty.
pub fn prompt_tune(
    init: &Tensor,
    backbone: &BackboneParams,
    tok: &Tokenizer,
    verbalizer: &Verbalizer,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TuneConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    check_prompt_shape(init, backbone, "prompt_tune init")?;
    let res = ppt_train(backbone, tok, verbalizer, train, valid, init, &cfg.to_ppt())?;
    Ok((res.prompt, res.curve))
}

/// Result of full-model tuning. `model` is a frozen snapshot of the
/// weights at the best validation epoch, ready for evaluation.
#[derive(Debug)]
pub struct FullTuneResult {
    pub model: BackboneParams,
    pub best_acc: f64,
    /// Validation accuracy per completed epoch.
    pub curve: Vec<f64>,
    pub epochs_run: usize,
}

/// Full-model baseline: thaws a private copy of the backbone and runs
/// the same minibatch, schedule, and early-stopping machinery as prompt
/// tuning over every weight, with no prompt. The input backbone is only
/// read. Validation is measured once before the first epoch, so the
/// returned snapshot is never worse than the starting point.
pub fn full_tune(
    backbone: &BackboneParams,
    tok: &Tokenizer,
    verbalizer: &Verbalizer,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TuneConfig,
) -> Result<FullTuneResult> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::data("full_tune: empty train or valid split"));
    }
    if !train.fully_labeled() || !valid.fully_labeled() {
        return Err(Error::data("full_tune: unlabeled examples"));
    }

    let prep = |ds: &Dataset| -> Result<Vec<(TemplatedInput, usize)>> {
        ds.examples
            .iter()
            .map(|ex| Ok((apply_template(&ex.text, tok, &backbone.config)?, ex.label.unwrap())))
            .collect()
    };
    let train_inputs = prep(train)?;
    let valid_inputs = prep(valid)?;

    let mut model = backbone.thawed_copy();
    let mut best = model.freeze();
    let mut best_acc = split_accuracy(&best, None, verbalizer, &valid_inputs)?;
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
            let params = model.params();
            let loss = label_loss(&model, None, verbalizer, &batch)?;
            let g = grad(&loss, &params, false)?;
            let lr = lr_schedule(Schedule::WarmupConstant, step, warmup, total_steps, cfg.lr)?;
            model = model.with_params(adamw_step(&params, &g, &mut opt, &opt_cfg, lr)?)?;
            step += 1;
        }
        epochs_run += 1;

        let acc = split_accuracy(&model, None, verbalizer, &valid_inputs)?;
        curve.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = model.freeze();
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }

    Ok(FullTuneResult { model: best, best_acc, curve, epochs_run })
}

fn split_accuracy(
    model: &BackboneParams,
    prompt: Option<&Tensor>,
    verbalizer: &Verbalizer,
    inputs: &[(TemplatedInput, usize)],
) -> Result<f64> {
    let mut correct = 0usize;
    for (input, label) in inputs {
        if predict(model, prompt, verbalizer, input)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}

/// Accuracy of a model, optionally with a soft prompt, on a labeled
/// set: exact correct-over-total counting, one float division at the
/// end. Prediction is pure, so repeated calls agree bitwise.
pub fn evaluate(
    backbone: &BackboneParams,
    prompt: Option<&Tensor>,
    tok: &Tokenizer,
    verbalizer: &Verbalizer,
    test: &Dataset,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::data("evaluate: empty test set"));
    }
    if !test.fully_labeled() {
        return Err(Error::data("evaluate: unlabeled test examples"));
    }
    let mut correct = 0usize;
    for ex in &test.examples {
        let input = apply_template(&ex.text, tok, &backbone.config)?;
        if predict(backbone, prompt, verbalizer, &input)? == ex.label.unwrap() {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// One row of the experiment matrix, aggregated over benchmark seeds.
/// The stored moments are exactly what `mean_std` produces from the
/// per-seed list; `validate` recomputes and compares bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn new(
        method: &str,
        dataset: &str,
        seeds: Vec<u64>,
        accuracies: Vec<f64>,
        fingerprint: String,
    ) -> Result<EvalReport> {
        if seeds.is_empty() || seeds.len() != accuracies.len() {
            return Err(Error::data(format!(
                "report needs matching seed and accuracy lists, got {} and {}",
                seeds.len(),
                accuracies.len()
            )));
        }
        for &a in &accuracies {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::numeric(format!("accuracy {a} outside [0,1]")));
            }
        }
        let (mean, std) = mean_std(&accuracies);
        Ok(EvalReport {
            method: method.to_string(),
            dataset: dataset.to_string(),
            seeds,
            accuracies,
            mean,
            std,
            fingerprint,
        })
    }

    /// Consistency check: a report whose moments were edited or rounded
    /// after construction fails here.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.seeds.len() != self.accuracies.len() {
            return Err(Error::data("report seed and accuracy lists disagree"));
        }
        let (mean, std) = mean_std(&self.accuracies);
        if self.mean != mean || self.std != std {
            return Err(Error::numeric(format!(
                "stored moments ({}, {}) are not the recomputed ({mean}, {std})",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// What a cell runs per seed. Prompt variants carry their starting
/// point; the names match the reported rows.
#[derive(Debug, Clone, Copy)]
pub enum CellMethod<'a> {
    /// Prompt tuning from a fresh random prompt each seed.
    Pt,
    /// Prompt tuning from the pooled pre-trained prompt.
    Ppt(&'a Tensor),
    /// Prompt tuning from the meta-learned prompt.
    MetaPt(&'a Tensor),
    /// Full-model tuning of a private backbone copy.
    Ft,
}

impl CellMethod<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            CellMethod::Pt => "PT",
            CellMethod::Ppt(_) => "PPT",
            CellMethod::MetaPt(_) => "MetaPT",
            CellMethod::Ft => "FT",
        }
    }

    fn init_prompt(&self) -> Option<&Tensor> {
        match self {
            CellMethod::Ppt(p) | CellMethod::MetaPt(p) => Some(p),
            CellMethod::Pt | CellMethod::Ft => None,
        }
    }
}

/// Shared machinery for a whole experiment matrix: one frozen backbone,
/// one split protocol, one tuning operating point per cell kind.
#[derive(Debug, Clone)]
pub struct CellContext<'a> {
    pub backbone: &'a BackboneParams,
    pub tok: &'a Tokenizer,
    pub verbalizer: &'a Verbalizer,
    /// Examples drawn per few-shot split, train and validation each.
    pub shots: usize,
    pub prompt_cfg: TuneConfig,
    pub full_cfg: TuneConfig,
}

/// Runs one cell: per seed, draw the few-shot split, tune, and score
/// the untouched remainder. The remainder's access counter must still
/// be zero when tuning ends, and the shared backbone hash must survive
/// the whole cell.
pub fn run_cell(
    method: &CellMethod,
    dataset: &Dataset,
    seeds: &[u64],
    ctx: &CellContext,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::config("run_cell: no seeds"));
    }
    if let Some(init) = method.init_prompt() {
        check_prompt_shape(init, ctx.backbone, method.name())?;
    }
    let backbone_hash = ctx.backbone.content_hash();

    let mut accuracies = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let split = sample_fewshot(dataset, ctx.shots, seed)?;
        let acc = match method {
            CellMethod::Ft => {
                let cfg = TuneConfig { seed, ..ctx.full_cfg.clone() };
                let tuned =
                    full_tune(ctx.backbone, ctx.tok, ctx.verbalizer, &split.train, &split.valid, &cfg)?;
                if split.test.access_count() != 0 {
                    return Err(Error::data("test remainder was read during tuning"));
                }
                evaluate(&tuned.model, None, ctx.tok, ctx.verbalizer, split.test.dataset())?
            }
            _ => {
                let fresh;
                let init = match method {
                    CellMethod::Pt => {
                        fresh = init_prompt(
                            ctx.backbone,
                            PromptInit::RandomNormal,
                            subseed(seed, "pt-init"),
                        );
                        &fresh
                    }
                    CellMethod::Ppt(p) | CellMethod::MetaPt(p) => *p,
                    CellMethod::Ft => unreachable!(),
                };
                let cfg = TuneConfig { seed, ..ctx.prompt_cfg.clone() };
                let (prompt, _) = prompt_tune(
                    init,
                    ctx.backbone,
                    ctx.tok,
                    ctx.verbalizer,
                    &split.train,
                    &split.valid,
                    &cfg,
                )?;
                if split.test.access_count() != 0 {
                    return Err(Error::data("test remainder was read during tuning"));
                }
                evaluate(ctx.backbone, Some(&prompt), ctx.tok, ctx.verbalizer, split.test.dataset())?
            }
        };
        accuracies.push(acc);
    }

    if ctx.backbone.content_hash() != backbone_hash {
        return Err(Error::numeric("run_cell: shared backbone weights changed"));
    }
    let fingerprint = cell_fingerprint(method, &dataset.name, seeds, ctx);
    EvalReport::new(method.name(), &dataset.name, seeds.to_vec(), accuracies, fingerprint)
}

fn check_prompt_shape(init: &Tensor, backbone: &BackboneParams, what: &str) -> Result<()> {
    let (plen, d) = (backbone.config.prompt_len, backbone.config.d_model);
    if init.rows() != plen || init.cols() != d {
        return Err(Error::shape(format!(
            "{what}: prompt is [{},{}], backbone wants [{plen},{d}]",
            init.rows(),
            init.cols()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CellRecord<'a> {
    method: &'a str,
    dataset: &'a str,
    shots: usize,
    seeds: &'a [u64],
    tune: TuneConfig,
    backbone: &'a str,
    init: Option<String>,
}

/// Content hash of everything that pins a cell's numbers apart from the
/// code: method, dataset name, split size, seeds, tuning settings,
/// backbone weights, and the supplied prompt init. Per-seed runs
/// override the config seed, so it is zeroed out here.
fn cell_fingerprint(method: &CellMethod, dataset: &str, seeds: &[u64], ctx: &CellContext) -> String {
    let tune = match method {
        CellMethod::Ft => TuneConfig { seed: 0, ..ctx.full_cfg.clone() },
        _ => TuneConfig { seed: 0, ..ctx.prompt_cfg.clone() },
    };
    let backbone = ctx.backbone.content_hash();
    let record = CellRecord {
        method: method.name(),
        dataset,
        shots: ctx.shots,
        seeds,
        tune,
        backbone: &backbone,
        init: method.init_prompt().map(tensor_digest),
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&record).expect("plain record serializes"));
    format!("{:x}", h.finalize())
}

fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update((t.rows() as u64).to_le_bytes());
    h.update((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}
