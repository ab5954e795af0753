//! Latent Dirichlet allocation via collapsed Gibbs sampling. The
//! corpus-derived stopword list (top 1% most frequent tokens) is
//! removed before fitting; the joint log-likelihood of (words, topics)
//! is recorded once per sweep so convergence is inspectable.

use libm::lgamma;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frequent_stopwords;
use crate::corpus::Dataset;
use crate::model::split_text;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Model vocabulary, stopwords removed, sorted.
    pub vocab: Vec<String>,
    pub stopwords: Vec<String>,
    /// K x V topic-word counts.
    pub topic_word: Vec<Vec<usize>>,
    /// Tokens per topic; row sums of `topic_word`.
    pub topic_totals: Vec<usize>,
    /// D x K document-topic counts.
    pub doc_topic: Vec<Vec<usize>>,
    /// Per-document token lists in model vocabulary ids.
    pub docs: Vec<Vec<usize>>,
    /// Per-document, per-token topic assignments.
    pub assignments: Vec<Vec<usize>>,
    /// Joint log-likelihood of (words, topics) after each sweep.
    pub log_likelihood: Vec<f64>,
}

impl LdaModel {
    /// The `n` highest-count words of one topic, count then lexicographic.
    pub fn top_words(&self, topic: usize, n: usize) -> Vec<String> {
        let mut ranked: Vec<(usize, &String)> = self.topic_word[topic]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(w, &c)| (c, &self.vocab[w]))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        ranked.into_iter().take(n).map(|(_, w)| w.clone()).collect()
    }

    fn joint_log_likelihood(&self) -> f64 {
        let v = self.vocab.len() as f64;
        let k = self.k as f64;
        let mut ll = 0.0;
        for (d, counts) in self.doc_topic.iter().enumerate() {
            let n_d = self.docs[d].len() as f64;
            ll += lgamma(k * self.alpha) - lgamma(n_d + k * self.alpha);
            for &c in counts {
                if c > 0 {
                    ll += lgamma(c as f64 + self.alpha) - lgamma(self.alpha);
                }
            }
        }
        for t in 0..self.k {
            ll += lgamma(v * self.beta) - lgamma(self.topic_totals[t] as f64 + v * self.beta);
            for &c in &self.topic_word[t] {
                if c > 0 {
                    ll += lgamma(c as f64 + self.beta) - lgamma(self.beta);
                }
            }
        }
        ll
    }
}

/// Fits LDA with collapsed Gibbs sampling at the usual defaults:
/// alpha = 50/K, beta = 0.01. Those assume document lengths well above
/// alpha; for very short texts use `lda_fit_with` and a small alpha.
pub fn lda_fit(ds: &Dataset, k: usize, iterations: usize, seed: u64) -> Result<LdaModel> {
    lda_fit_with(ds, k, iterations, seed, 50.0 / k as f64, 0.01)
}

/// `lda_fit` with explicit Dirichlet hyperparameters.
pub fn lda_fit_with(
    ds: &Dataset,
    k: usize,
    iterations: usize,
    seed: u64,
    alpha: f64,
    beta: f64,
) -> Result<LdaModel> {
    if k < 2 {
        return Err(Error::config(format!("LDA needs K >= 2, got {k}")));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::config(format!("Dirichlet hyperparameters must be positive, got {alpha} and {beta}")));
    }
    if ds.len() < k {
        return Err(Error::data(format!("{} documents for {k} topics", ds.len())));
    }
    if iterations == 0 {
        return Err(Error::config("LDA needs at least one iteration"));
    }
    let texts = ds.texts();
    let stopwords = frequent_stopwords(&texts);
    let stopset: std::collections::HashSet<&String> = stopwords.iter().collect();
    let mut vocab: Vec<String> = {
        let mut set = std::collections::BTreeSet::new();
        for t in &texts {
            for w in split_text(t) {
                if !stopset.contains(&w) {
                    set.insert(w);
                }
            }
        }
        set.into_iter().collect()
    };
    if vocab.is_empty() {
        return Err(Error::data("no tokens left after stopword removal"));
    }
    vocab.shrink_to_fit();
    let index: std::collections::HashMap<&String, usize> =
        vocab.iter().enumerate().map(|(i, w)| (w, i)).collect();
    let docs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| split_text(t).iter().filter_map(|w| index.get(w).copied()).collect())
        .collect();

    let v = vocab.len();
    let mut model = LdaModel {
        k,
        alpha,
        beta,
        vocab,
        stopwords,
        topic_word: vec![vec![0; v]; k],
        topic_totals: vec![0; k],
        doc_topic: vec![vec![0; k]; docs.len()],
        assignments: docs.iter().map(|d| vec![0; d.len()]).collect(),
        docs,
        log_likelihood: Vec::with_capacity(iterations),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in 0..model.docs.len() {
        for i in 0..model.docs[d].len() {
            let z = rng.gen_range(0..k);
            let w = model.docs[d][i];
            model.assignments[d][i] = z;
            model.topic_word[z][w] += 1;
            model.topic_totals[z] += 1;
            model.doc_topic[d][z] += 1;
        }
    }

    let vb = v as f64 * beta;
    let mut weights = vec![0.0f64; k];
    for _ in 0..iterations {
        for d in 0..model.docs.len() {
            for i in 0..model.docs[d].len() {
                let w = model.docs[d][i];
                let z_old = model.assignments[d][i];
                model.topic_word[z_old][w] -= 1;
                model.topic_totals[z_old] -= 1;
                model.doc_topic[d][z_old] -= 1;
                let mut total = 0.0;
                for (t, weight) in weights.iter_mut().enumerate() {
                    *weight = (model.doc_topic[d][t] as f64 + alpha)
                        * (model.topic_word[t][w] as f64 + beta)
                        / (model.topic_totals[t] as f64 + vb);
                    total += *weight;
                }
                let mut target = rng.gen::<f64>() * total;
                let mut z_new = k - 1;
                for (t, &weight) in weights.iter().enumerate() {
                    target -= weight;
                    if target <= 0.0 {
                        z_new = t;
                        break;
                    }
                }
                model.assignments[d][i] = z_new;
                model.topic_word[z_new][w] += 1;
                model.topic_totals[z_new] += 1;
                model.doc_topic[d][z_new] += 1;
            }
        }
        model.log_likelihood.push(model.joint_log_likelihood());
    }
    Ok(model)
}

/// Hard topic assignment: argmax of the document-topic counts, smallest
/// topic id on ties. `ds` must be the corpus the model was fitted on.
pub fn assign_by_lda(model: &LdaModel, ds: &Dataset) -> Result<Vec<usize>> {
    if ds.len() != model.docs.len() {
        return Err(Error::data(format!(
            "model fitted on {} documents, dataset has {}",
            model.docs.len(),
            ds.len()
        )));
    }
    Ok(model
        .doc_topic
        .iter()
        .map(|counts| {
            let mut best = 0;
            for (t, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = t;
                }
            }
            best
        })
        .collect())
}
