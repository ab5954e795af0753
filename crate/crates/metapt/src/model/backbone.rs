use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    adamw_step, concat_rows, gelu, grad, layer_norm_rows, log_softmax_rows, lr_schedule,
    softmax_rows, AdamWConfig, AdamWState, Schedule, Tensor,
};
use crate::error::{Error, Result};
use crate::model::tokenizer::MASK_ID;
use crate::util::randn_vec;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture of the mini bidirectional encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 160,
            prompt_len: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.prompt_len + 4 > self.max_seq_len {
            return Err(Error::config(format!(
                "prompt_len {} leaves no room for the template in max_seq_len {}",
                self.prompt_len, self.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Weights of the encoder plus the tied token embedding table. When
/// `frozen`, tensors are plain constants: nothing records against them
/// and asking for their gradient is an error.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub frozen: bool,
}

fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    t.transpose().slice_rows(start, len).transpose()
}

fn concat_cols(parts: &[Tensor]) -> Tensor {
    let transposed: Vec<Tensor> = parts.iter().map(|p| p.transpose()).collect();
    concat_rows(&transposed).transpose()
}

impl BackboneParams {
    /// Seeded random init; all tensors track gradients.
    pub fn init(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<BackboneParams> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::config("vocab_size must cover the reserved ids"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut w = |r: usize, c: usize| Tensor::param(randn_vec(&mut rng, r * c, INIT_STD), r, c);
        let tok_embed = w(vocab_size, d);
        let pos_embed = w(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::param(vec![1.0; d], 1, d),
                ln1_b: Tensor::param(vec![0.0; d], 1, d),
                wq: w(d, d),
                bq: Tensor::param(vec![0.0; d], 1, d),
                wk: w(d, d),
                bk: Tensor::param(vec![0.0; d], 1, d),
                wv: w(d, d),
                bv: Tensor::param(vec![0.0; d], 1, d),
                wo: w(d, d),
                bo: Tensor::param(vec![0.0; d], 1, d),
                ln2_g: Tensor::param(vec![1.0; d], 1, d),
                ln2_b: Tensor::param(vec![0.0; d], 1, d),
                w1: w(d, config.d_ff),
                b1: Tensor::param(vec![0.0; config.d_ff], 1, config.d_ff),
                w2: w(config.d_ff, d),
                b2: Tensor::param(vec![0.0; d], 1, d),
            });
        }
        Ok(BackboneParams {
            config: config.clone(),
            vocab_size,
            tok_embed,
            pos_embed,
            layers,
            final_ln_g: Tensor::param(vec![1.0; d], 1, d),
            final_ln_b: Tensor::param(vec![0.0; d], 1, d),
            frozen: false,
        })
    }

    /// All weight tensors in a fixed order. The order is part of the
    /// checkpoint and hash format.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = vec![self.tok_embed.clone(), self.pos_embed.clone()];
        for l in &self.layers {
            out.extend([
                l.ln1_g.clone(),
                l.ln1_b.clone(),
                l.wq.clone(),
                l.bq.clone(),
                l.wk.clone(),
                l.bk.clone(),
                l.wv.clone(),
                l.bv.clone(),
                l.wo.clone(),
                l.bo.clone(),
                l.ln2_g.clone(),
                l.ln2_b.clone(),
                l.w1.clone(),
                l.b1.clone(),
                l.w2.clone(),
                l.b2.clone(),
            ]);
        }
        out.push(self.final_ln_g.clone());
        out.push(self.final_ln_b.clone());
        out
    }

    /// Rebuilds the backbone from tensors in `params()` order.
    pub fn with_params(&self, tensors: Vec<Tensor>) -> Result<BackboneParams> {
        let expected = 2 + 16 * self.layers.len() + 2;
        if tensors.len() != expected {
            return Err(Error::shape(format!(
                "with_params: expected {expected} tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let tok_embed = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for _ in 0..self.layers.len() {
            layers.push(LayerParams {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        Ok(BackboneParams {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            tok_embed,
            pos_embed,
            layers,
            final_ln_g: next(),
            final_ln_b: next(),
            frozen: self.frozen,
        })
    }

    /// Converts every weight to a constant. Frozen weights never record
    /// onto the graph, so prompt-only training cannot touch them.
    pub fn freeze(&self) -> BackboneParams {
        let tensors = self.params().iter().map(|t| t.detach()).collect();
        let mut out = self.with_params(tensors).expect("same arity");
        out.frozen = true;
        out
    }

    /// Trainable copy with the same values.
    pub fn thawed_copy(&self) -> BackboneParams {
        let tensors = self.params().iter().map(|t| t.to_param()).collect();
        let mut out = self.with_params(tensors).expect("same arity");
        out.frozen = false;
        out
    }

    /// SHA-256 over shapes and little-endian payloads in `params()` order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params() {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Full encoder pass: optional soft prompt rows are prepended to the
    /// token embeddings, learned positions cover the whole sequence.
    /// Returns final hidden states, one row per position.
    pub fn encode_sequence(&self, prompt: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let plen = prompt.map_or(0, |p| p.rows());
        if let Some(p) = prompt {
            if p.cols() != self.config.d_model {
                return Err(Error::shape(format!(
                    "prompt width {} != d_model {}",
                    p.cols(),
                    self.config.d_model
                )));
            }
        }
        let total = plen + ids.len();
        if total == 0 {
            return Err(Error::data("encode_sequence: empty sequence"));
        }
        if total > self.config.max_seq_len {
            return Err(Error::data(format!(
                "sequence length {total} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for &id in ids {
            if id >= self.vocab_size {
                return Err(Error::data(format!(
                    "token id {id} out of vocabulary {}",
                    self.vocab_size
                )));
            }
        }
        let tok = self.tok_embed.gather_rows(ids);
        let seq = match prompt {
            Some(p) => concat_rows(&[p.clone(), tok]),
            None => tok,
        };
        let mut x = seq.add(&self.pos_embed.slice_rows(0, total));
        for l in &self.layers {
            let normed = layer_norm_rows(&x, &l.ln1_g, &l.ln1_b, LN_EPS);
            x = x.add(&self.attention(l, &normed));
            let normed = layer_norm_rows(&x, &l.ln2_g, &l.ln2_b, LN_EPS);
            x = x.add(&Self::ffn(l, &normed));
        }
        Ok(layer_norm_rows(&x, &self.final_ln_g, &self.final_ln_b, LN_EPS))
    }

    fn attention(&self, l: &LayerParams, x: &Tensor) -> Tensor {
        let t = x.rows();
        let dh = self.config.d_model / self.config.n_heads;
        let q = x.matmul(&l.wq).add(&l.bq.broadcast_rows(t));
        let k = x.matmul(&l.wk).add(&l.bk.broadcast_rows(t));
        let v = x.matmul(&l.wv).add(&l.bv.broadcast_rows(t));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for i in 0..self.config.n_heads {
            let qh = slice_cols(&q, i * dh, dh);
            let kh = slice_cols(&k, i * dh, dh);
            let vh = slice_cols(&v, i * dh, dh);
            let attn = softmax_rows(&qh.matmul(&kh.transpose()).scale(scale));
            heads.push(attn.matmul(&vh));
        }
        concat_cols(&heads).matmul(&l.wo).add(&l.bo.broadcast_rows(t))
    }

    fn ffn(l: &LayerParams, x: &Tensor) -> Tensor {
        let t = x.rows();
        let h = gelu(&x.matmul(&l.w1).add(&l.b1.broadcast_rows(t)));
        h.matmul(&l.w2).add(&l.b2.broadcast_rows(t))
    }

    /// Log-probabilities over the vocabulary at the single mask slot of a
    /// templated input. The output head is tied to the embedding table.
    pub fn mask_log_probs(&self, prompt: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let mask_count = ids.iter().filter(|&&id| id == MASK_ID).count();
        if mask_count != 1 {
            return Err(Error::data(format!(
                "expected exactly one mask token, found {mask_count}"
            )));
        }
        let mask_pos = ids.iter().position(|&id| id == MASK_ID).unwrap();
        let plen = prompt.map_or(0, |p| p.rows());
        let hidden = self.encode_sequence(prompt, ids)?;
        let row = hidden.gather_rows(&[plen + mask_pos]);
        let logits = row.matmul(&self.tok_embed.transpose());
        Ok(log_softmax_rows(&logits))
    }

    /// Mean cross-entropy of masked positions against their original ids,
    /// prompt-free. The training objective for backbone pretraining.
    pub fn mlm_loss(&self, batch: &[MaskedSeq]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::data("mlm_loss: empty batch"));
        }
        let mut total: Option<Tensor> = None;
        for item in batch {
            let hidden = self.encode_sequence(None, &item.ids)?;
            let rows = hidden.gather_rows(&item.positions);
            let logits = rows.matmul(&self.tok_embed.transpose());
            let lp = log_softmax_rows(&logits);
            // One-hot pick of each row's target, averaged over positions.
            let mut hot = vec![0.0; item.positions.len() * self.vocab_size];
            for (i, &tgt) in item.targets.iter().enumerate() {
                hot[i * self.vocab_size + tgt] = 1.0;
            }
            let hot = Tensor::constant(hot, item.positions.len(), self.vocab_size);
            let loss = lp
                .mul(&hot)
                .sum_all()
                .scale(-1.0 / item.positions.len() as f64);
            total = Some(match total {
                Some(t) => t.add(&loss),
                None => loss,
            });
        }
        Ok(total.unwrap().scale(1.0 / batch.len() as f64))
    }
}

/// A sequence with some positions replaced by the mask id; `targets`
/// holds the original ids at those positions.
#[derive(Debug, Clone)]
pub struct MaskedSeq {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Masks each position independently with `mask_prob`, forcing at least
/// one mask per sequence.
pub fn mask_sequence<R: Rng>(seq: &[usize], mask_prob: f64, rng: &mut R) -> MaskedSeq {
    let mut ids = seq.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &id) in seq.iter().enumerate() {
        if rng.gen::<f64>() < mask_prob {
            positions.push(i);
            targets.push(id);
            ids[i] = MASK_ID;
        }
    }
    if positions.is_empty() {
        let i = rng.gen_range(0..seq.len());
        positions.push(i);
        targets.push(seq[i]);
        ids[i] = MASK_ID;
    }
    MaskedSeq { ids, positions, targets }
}

/// Masked-language-model pretraining settings for the backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            warmup: 20,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

/// Trains the backbone as a masked language model on raw token sequences
/// and returns it frozen, along with the per-step loss trace. With
/// `steps == 0` the seeded init is frozen untouched.
pub fn pretrain_backbone(
    seqs: &[Vec<usize>],
    cfg: &ModelConfig,
    vocab_size: usize,
    mlm: &MlmConfig,
) -> Result<(BackboneParams, Vec<f64>)> {
    if !(mlm.mask_prob > 0.0 && mlm.mask_prob < 1.0) {
        return Err(Error::config(format!("mask_prob {} outside (0,1)", mlm.mask_prob)));
    }
    if mlm.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut backbone = BackboneParams::init(cfg, vocab_size, mlm.seed)?;
    let mut trace = Vec::with_capacity(mlm.steps as usize);
    if mlm.steps == 0 {
        return Ok((backbone.freeze(), trace));
    }
    let seqs: Vec<Vec<usize>> = seqs
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut s = s.clone();
            s.truncate(cfg.max_seq_len);
            s
        })
        .collect();
    if seqs.is_empty() {
        return Err(Error::data("pretrain_backbone: no non-empty sequences"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mlm.seed);
    let mut state = AdamWState::new();
    let opt = AdamWConfig::with_lr(mlm.lr);
    for step in 0..mlm.steps {
        let take = mlm.batch_size.min(seqs.len());
        let batch: Vec<MaskedSeq> = rand::seq::index::sample(&mut rng, seqs.len(), take)
            .into_iter()
            .map(|i| mask_sequence(&seqs[i], mlm.mask_prob, &mut rng))
            .collect();
        let loss = backbone.mlm_loss(&batch)?;
        trace.push(loss.item());
        let params = backbone.params();
        let grads = grad(&loss, &params, false)?;
        let lr = lr_schedule(Schedule::LinearDecay, step, mlm.warmup, mlm.steps, mlm.lr)?;
        let updated = adamw_step(&params, &grads, &mut state, &opt, lr)?;
        backbone = backbone.with_params(updated)?;
    }
    Ok((backbone.freeze(), trace))
}

/// Deterministically masked mean MLM loss, for held-out evaluation.
pub fn mlm_eval_loss(backbone: &BackboneParams, seqs: &[Vec<usize>], mask_prob: f64, seed: u64) -> Result<f64> {
    let _quiet = crate::autodiff::no_record();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<MaskedSeq> = seqs
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut s = s.clone();
            s.truncate(backbone.config.max_seq_len);
            mask_sequence(&s, mask_prob, &mut rng)
        })
        .collect();
    if batch.is_empty() {
        return Err(Error::data("mlm_eval_loss: no non-empty sequences"));
    }
    Ok(backbone.mlm_loss(&batch)?.item())
}
