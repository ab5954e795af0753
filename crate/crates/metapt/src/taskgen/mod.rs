//! Turns a labeled pre-training pool into K auxiliary tasks. Four
//! grouping strategies are provided: k-means over sentence embeddings,
//! LDA topics, a uniform random split, and a split by label. Every
//! strategy produces the same artifact shape: a partition of the pool
//! into tasks, each with its own train/validation split.

mod kmeans;
mod lda;

pub use kmeans::{adjusted_rand_index, kmeans, silhouette, KmeansResult};
pub use lda::{assign_by_lda, lda_fit, LdaModel};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::model::{split_text, BackboneParams, Tokenizer};
use crate::util::subseed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    /// Mean of the frozen backbone's final-layer token states, no
    /// prompt and no template.
    MeanPooledBackbone,
    /// log-tf x smoothed idf over the tokenizer vocabulary.
    TfIdf,
}

/// One L2-normalized row per dataset example, in dataset order.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub method: EmbedMethod,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn l2_normalize(row: &mut [f64]) -> Result<()> {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::numeric("embedding row has zero norm"));
    }
    for x in row.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Embeds every example of the dataset. `MeanPooledBackbone` requires a
/// frozen backbone; `TfIdf` needs only the tokenizer.
pub fn embed(
    ds: &Dataset,
    method: EmbedMethod,
    tok: &Tokenizer,
    backbone: Option<&BackboneParams>,
) -> Result<EmbeddingMatrix> {
    if ds.is_empty() {
        return Err(Error::data("cannot embed an empty dataset"));
    }
    match method {
        EmbedMethod::MeanPooledBackbone => {
            let bb = backbone
                .ok_or_else(|| Error::config("mean-pooled embedding requires a backbone"))?;
            if !bb.frozen {
                return Err(Error::config("embedding backbone must be frozen"));
            }
            let _quiet = crate::autodiff::no_record();
            let dim = bb.config.d_model;
            let mut data = Vec::with_capacity(ds.len() * dim);
            for ex in &ds.examples {
                let mut ids = tok.encode(&ex.text);
                ids.truncate(bb.config.max_seq_len);
                if ids.is_empty() {
                    return Err(Error::data(format!("no tokens in {:?}", ex.text)));
                }
                let hidden = bb.encode_sequence(None, &ids)?;
                let pooled = hidden.sum_rows().scale(1.0 / ids.len() as f64);
                let mut row = pooled.to_vec();
                l2_normalize(&mut row)?;
                data.extend_from_slice(&row);
            }
            Ok(EmbeddingMatrix { rows: ds.len(), dim, data, method })
        }
        EmbedMethod::TfIdf => {
            let dim = tok.vocab_size();
            let n = ds.len() as f64;
            let mut df = vec![0usize; dim];
            let doc_ids: Vec<Vec<usize>> = ds.examples.iter().map(|ex| tok.encode(&ex.text)).collect();
            for ids in &doc_ids {
                let mut seen = vec![false; dim];
                for &id in ids {
                    if !seen[id] {
                        seen[id] = true;
                        df[id] += 1;
                    }
                }
            }
            let idf: Vec<f64> =
                df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
            let mut data = Vec::with_capacity(ds.len() * dim);
            for ids in &doc_ids {
                let mut tf = vec![0.0f64; dim];
                for &id in ids {
                    tf[id] += 1.0;
                }
                let mut row: Vec<f64> =
                    (0..dim).map(|j| if tf[j] > 0.0 { (1.0 + tf[j]).ln() * idf[j] } else { 0.0 }).collect();
                l2_normalize(&mut row)?;
                data.extend_from_slice(&row);
            }
            Ok(EmbeddingMatrix { rows: ds.len(), dim, data, method })
        }
    }
}

/// Uniform random partition into K groups with sizes differing by at
/// most one.
pub fn split_random(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > ds.len() {
        return Err(Error::config(format!("cannot split {} examples into {k} groups", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0usize; ds.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(assignments)
}

/// Groups by label. K == n_classes maps cluster = label; K > n_classes
/// subdivides each label group randomly (deterministic per seed);
/// K < n_classes is an error.
pub fn split_by_label(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if !ds.fully_labeled() {
        return Err(Error::data("label split needs a fully labeled dataset"));
    }
    let n_labels = ds.n_classes;
    if k < n_labels {
        return Err(Error::config(format!("K = {k} is below the {n_labels} label groups")));
    }
    // Sub-cluster counts per label: K split as evenly as possible.
    let base = k / n_labels;
    let extra = k % n_labels;
    let counts: Vec<usize> = (0..n_labels).map(|l| base + usize::from(l < extra)).collect();
    let offsets: Vec<usize> = counts
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; ds.len()];
    for l in 0..n_labels {
        let mut members: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.examples[i].label == Some(l)).collect();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            assignments[i] = offsets[l] + pos % counts[l];
        }
    }
    Ok(assignments)
}

/// One auxiliary task: a train pool and a validation pool, disjoint,
/// both non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTask {
    pub task_id: usize,
    pub origin: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl MetaTask {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }
}

/// A merge of one undersized cluster into another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub from: usize,
    pub to: usize,
    pub moved: usize,
}

fn centroid_distance(km: &KmeansResult, dim: usize, a: usize, b: usize) -> f64 {
    let ca = &km.centroids[a * dim..(a + 1) * dim];
    let cb = &km.centroids[b * dim..(b + 1) * dim];
    ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Builds tasks from a cluster assignment. Clusters smaller than
/// `min_size` are merged: into the nearest centroid's cluster when a
/// k-means result is supplied, into the largest cluster otherwise.
/// Within each task, a seeded `val_fraction` split produces the
/// validation pool.
pub fn make_tasks(
    ds: &Dataset,
    assignments: &[usize],
    origin: &str,
    val_fraction: f64,
    min_size: usize,
    seed: u64,
    km: Option<&KmeansResult>,
) -> Result<(Vec<MetaTask>, Vec<MergeEvent>)> {
    if assignments.len() != ds.len() {
        return Err(Error::data(format!(
            "{} assignments for {} examples",
            assignments.len(),
            ds.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction <= 0.5) {
        return Err(Error::config(format!("val_fraction must be in (0, 0.5], got {val_fraction}")));
    }
    if min_size < 2 {
        return Err(Error::config("min_size must be at least 2"));
    }
    if !ds.fully_labeled() {
        return Err(Error::data("tasks need labeled examples"));
    }
    let k = match assignments.iter().max() {
        Some(&m) => m + 1,
        None => return Err(Error::data("no examples to build tasks from")),
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignments.iter().enumerate() {
        members[c].push(i);
    }
    if members.iter().all(|m| m.is_empty() || m.len() < min_size) {
        return Err(Error::data(format!("every cluster is below the minimum task size {min_size}")));
    }
    let mut merges = Vec::new();
    loop {
        let small = (0..k)
            .filter(|&c| !members[c].is_empty() && members[c].len() < min_size)
            .min_by_key(|&c| members[c].len());
        let Some(c) = small else { break };
        let candidates: Vec<usize> = (0..k).filter(|&t| t != c && !members[t].is_empty()).collect();
        let target = match km {
            Some(km) => *candidates
                .iter()
                .min_by(|&&a, &&b| {
                    centroid_distance(km, km.dim, c, a)
                        .partial_cmp(&centroid_distance(km, km.dim, c, b))
                        .unwrap()
                })
                .unwrap(),
            None => *candidates.iter().max_by_key(|&&t| members[t].len()).unwrap(),
        };
        let moved: Vec<usize> = std::mem::take(&mut members[c]);
        merges.push(MergeEvent { from: c, to: target, moved: moved.len() });
        members[target].extend(moved);
        members[target].sort_unstable();
    }
    let mut tasks = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let task_id = tasks.len();
        let mut order = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("task-split-{c}")));
        order.shuffle(&mut rng);
        let n_val = ((m.len() as f64 * val_fraction).round() as usize).clamp(1, m.len() - 1);
        let mut val_idx: Vec<usize> = order[..n_val].to_vec();
        let mut train_idx: Vec<usize> = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        tasks.push(MetaTask {
            task_id,
            origin: origin.to_string(),
            train: train_idx.iter().map(|&i| ds.examples[i].clone()).collect(),
            val: val_idx.iter().map(|&i| ds.examples[i].clone()).collect(),
        });
    }
    Ok((tasks, merges))
}

/// Sidecar manifest describing how a task set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub strategy: String,
    pub k_requested: usize,
    pub k_effective: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub min_size: usize,
    /// (train, val) sizes per task, in task order.
    pub sizes: Vec<(usize, usize)>,
    pub merges: Vec<MergeEvent>,
}

#[derive(Serialize, Deserialize)]
struct TaskLine<'a> {
    split: &'a str,
    text: String,
    label: usize,
}

/// Writes one JSONL file per task plus `manifest.json` into `dir`.
pub fn save_tasks(dir: impl AsRef<Path>, tasks: &[MetaTask], manifest: &TaskManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for task in tasks {
        let mut buf = Vec::new();
        for (split, exs) in [("train", &task.train), ("val", &task.val)] {
            for ex in exs {
                let line = TaskLine { split, text: ex.text.clone(), label: ex.label.unwrap() };
                serde_json::to_writer(&mut buf, &line)
                    .map_err(|e| Error::artifact(format!("serializing task line: {e}")))?;
                buf.push(b'\n');
            }
        }
        let path = dir.join(format!("task-{:03}.jsonl", task.task_id));
        fs::write(&path, &buf).map_err(|e| Error::io(path, e))?;
    }
    let mpath = dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::artifact(format!("serializing manifest: {e}")))?;
    fs::write(&mpath, body).map_err(|e| Error::io(mpath, e))?;
    Ok(())
}

/// Reads a task set written by `save_tasks`.
pub fn load_tasks(dir: impl AsRef<Path>) -> Result<(Vec<MetaTask>, TaskManifest)> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: TaskManifest =
        serde_json::from_str(&raw).map_err(|e| Error::artifact(format!("{}: {e}", mpath.display())))?;
    let mut tasks = Vec::new();
    for task_id in 0..manifest.k_effective {
        let path = dir.join(format!("task-{task_id:03}.jsonl"));
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TaskLineOwned = serde_json::from_str(line).map_err(|e| Error::DataLine {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let ex = Example { text: parsed.text, label: Some(parsed.label) };
            match parsed.split.as_str() {
                "train" => train.push(ex),
                "val" => val.push(ex),
                other => {
                    return Err(Error::DataLine {
                        path: path.clone(),
                        line: i + 1,
                        msg: format!("unknown split {other:?}"),
                    })
                }
            }
        }
        tasks.push(MetaTask { task_id, origin: manifest.strategy.clone(), train, val });
    }
    Ok((tasks, manifest))
}

#[derive(Deserialize)]
struct TaskLineOwned {
    split: String,
    text: String,
    label: usize,
}

/// The LDA stopword rule: the top 1% (by ceiling) most frequent tokens.
pub fn frequent_stopwords(texts: &[String]) -> Vec<String> {
    let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for t in texts {
        for w in split_text(t) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let distinct = counts.len();
    let n_stop = distinct.div_ceil(100);
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(n_stop).map(|(w, _)| w).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_benchmark, SynthSpec};
    use crate::model::{ModelConfig, DEFAULT_LABEL_WORDS};

    fn small_bench() -> (Dataset, Vec<usize>, Tokenizer) {
        let mut spec = SynthSpec::desk_default();
        spec.pretrain_examples = 150;
        let bench = make_synthetic_benchmark(&spec, 21).unwrap();
        let tok = Tokenizer::build(&bench.mlm_corpus, 256, &DEFAULT_LABEL_WORDS.to_vec()).unwrap();
        (bench.pretrain, bench.pretrain_domain_ids, tok)
    }

    fn tiny_backbone(vocab: usize) -> BackboneParams {
        let cfg = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 32, prompt_len: 4 };
        BackboneParams::init(&cfg, vocab, 3).unwrap().freeze()
    }

    #[test]
    fn duplicate_sentences_embed_identically() {
        let ds = Dataset::new(
            "dup",
            2,
            vec![
                Example { text: "the same words".into(), label: Some(0) },
                Example { text: "something else".into(), label: Some(1) },
                Example { text: "the same words".into(), label: Some(0) },
            ],
        )
        .unwrap();
        let tok = Tokenizer::build(&ds.texts(), 32, &[]).unwrap();
        let bb = tiny_backbone(tok.vocab_size());
        for method in [EmbedMethod::MeanPooledBackbone, EmbedMethod::TfIdf] {
            let e = embed(&ds, method, &tok, Some(&bb)).unwrap();
            assert_eq!(e.row(0), e.row(2), "{method:?}");
            assert_ne!(e.row(0), e.row(1), "{method:?}");
        }
    }

    #[test]
    fn rows_are_unit_length() {
        let (ds, _, tok) = small_bench();
        let bb = tiny_backbone(tok.vocab_size());
        for method in [EmbedMethod::MeanPooledBackbone, EmbedMethod::TfIdf] {
            let e = embed(&ds, method, &tok, Some(&bb)).unwrap();
            for i in 0..e.rows {
                let norm: f64 = e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "{method:?} row {i}: {norm}");
            }
        }
    }

    #[test]
    fn tfidf_single_word_sentence_is_one_hot() {
        let ds = Dataset::new(
            "single",
            2,
            vec![
                Example { text: "zebra".into(), label: Some(0) },
                Example { text: "yak and zebra".into(), label: Some(1) },
            ],
        )
        .unwrap();
        let tok = Tokenizer::build(&ds.texts(), 32, &[]).unwrap();
        let e = embed(&ds, EmbedMethod::TfIdf, &tok, None).unwrap();
        let zebra = tok.token_id("zebra").unwrap();
        let row = e.row(0);
        assert!((row[zebra] - 1.0).abs() < 1e-12);
        for (j, &v) in row.iter().enumerate() {
            if j != zebra {
                assert_eq!(v, 0.0, "column {j}");
            }
        }
    }

    #[test]
    fn same_domain_pairs_are_more_similar_on_average() {
        let (ds, domains, tok) = small_bench();
        let bb = tiny_backbone(tok.vocab_size());
        for method in [EmbedMethod::MeanPooledBackbone, EmbedMethod::TfIdf] {
            let e = embed(&ds, method, &tok, Some(&bb)).unwrap();
            let mut same = (0.0, 0usize);
            let mut cross = (0.0, 0usize);
            for i in 0..e.rows {
                for j in i + 1..e.rows {
                    let cos: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum();
                    if domains[i] == domains[j] {
                        same = (same.0 + cos, same.1 + 1);
                    } else {
                        cross = (cross.0 + cos, cross.1 + 1);
                    }
                }
            }
            let same_avg = same.0 / same.1 as f64;
            let cross_avg = cross.0 / cross.1 as f64;
            assert!(
                same_avg > cross_avg,
                "{method:?}: same-domain {same_avg:.4} <= cross-domain {cross_avg:.4}"
            );
        }
    }

    #[test]
    fn mean_pooled_requires_a_frozen_backbone() {
        let (ds, _, tok) = small_bench();
        assert!(embed(&ds, EmbedMethod::MeanPooledBackbone, &tok, None).is_err());
        let thawed = tiny_backbone(tok.vocab_size()).thawed_copy();
        assert!(embed(&ds, EmbedMethod::MeanPooledBackbone, &tok, Some(&thawed)).is_err());
    }

    #[test]
    fn random_split_sizes_differ_by_at_most_one() {
        let (ds, _, _) = small_bench();
        let k = 7;
        let a = split_random(&ds, k, 3).unwrap();
        let mut sizes = vec![0usize; k];
        for &c in &a {
            sizes[c] += 1;
        }
        let (min, max) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        assert!(max - min <= 1, "{sizes:?}");
        assert_eq!(a, split_random(&ds, k, 3).unwrap());
        assert_ne!(a, split_random(&ds, k, 4).unwrap());
    }

    #[test]
    fn random_split_of_ten_into_three() {
        let ds = Dataset::new(
            "ten",
            2,
            (0..10).map(|i| Example { text: format!("item {i}"), label: Some(i % 2) }).collect(),
        )
        .unwrap();
        let a = split_random(&ds, 3, 0).unwrap();
        let mut sizes = vec![0usize; 3];
        for &c in &a {
            sizes[c] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn label_split_with_k_equal_to_classes_is_the_label() {
        let (ds, _, _) = small_bench();
        let a = split_by_label(&ds, 5, 0).unwrap();
        for (i, ex) in ds.examples.iter().enumerate() {
            assert_eq!(a[i], ex.label.unwrap());
        }
    }

    #[test]
    fn label_split_with_excess_k_subdivides_each_label() {
        let (ds, _, _) = small_bench();
        let k = 10;
        let a = split_by_label(&ds, k, 5).unwrap();
        // Sub-clusters 2l and 2l+1 must both hold only label l.
        for (i, ex) in ds.examples.iter().enumerate() {
            let l = ex.label.unwrap();
            assert!(a[i] == 2 * l || a[i] == 2 * l + 1, "example {i}: cluster {} label {l}", a[i]);
        }
        for c in 0..k {
            assert!(a.iter().any(|&x| x == c), "cluster {c} empty");
        }
    }

    #[test]
    fn label_split_with_small_k_is_rejected() {
        let (ds, _, _) = small_bench();
        assert!(split_by_label(&ds, 3, 0).is_err());
    }

    fn uniform_dataset(n: usize) -> Dataset {
        Dataset::new(
            "flat",
            5,
            (0..n).map(|i| Example { text: format!("sentence number {i}"), label: Some(i % 5) }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn make_tasks_splits_each_cluster() {
        let ds = uniform_dataset(100);
        let assignments: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let (tasks, merges) = make_tasks(&ds, &assignments, "test", 0.2, 8, 1, None).unwrap();
        assert!(merges.is_empty());
        assert_eq!(tasks.len(), 10);
        for t in &tasks {
            assert_eq!(t.train.len(), 8);
            assert_eq!(t.val.len(), 2);
        }
    }

    #[test]
    fn make_tasks_partitions_the_dataset() {
        let ds = uniform_dataset(83);
        let assignments = split_random(&ds, 6, 9).unwrap();
        let (tasks, _) = make_tasks(&ds, &assignments, "test", 0.25, 4, 2, None).unwrap();
        let mut seen: Vec<&str> = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.val))
            .map(|e| e.text.as_str())
            .collect();
        seen.sort_unstable();
        let mut all: Vec<&str> = ds.examples.iter().map(|e| e.text.as_str()).collect();
        all.sort_unstable();
        assert_eq!(seen, all);
        for t in &tasks {
            assert!(!t.train.is_empty() && !t.val.is_empty());
            for v in &t.val {
                assert!(!t.train.contains(v));
            }
        }
    }

    #[test]
    fn undersized_cluster_folds_into_largest_without_kmeans() {
        let ds = uniform_dataset(21);
        // Cluster 0: 1 example, cluster 1: 8, cluster 2: 12.
        let assignments: Vec<usize> =
            (0..21).map(|i| if i == 0 { 0 } else if i <= 8 { 1 } else { 2 }).collect();
        let (tasks, merges) = make_tasks(&ds, &assignments, "test", 0.25, 8, 0, None).unwrap();
        assert_eq!(merges, vec![MergeEvent { from: 0, to: 2, moved: 1 }]);
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks.iter().map(MetaTask::len).sum::<usize>(), 21);
    }

    #[test]
    fn undersized_cluster_merges_into_nearest_centroid_with_kmeans() {
        // Embedded points on a line; centroids at 0.0, 0.4, 10.0. The
        // singleton at 0.4 must merge into the 0.0 cluster.
        let mut data = vec![0.0, 1.0, 0.02, 1.0, 0.04, 1.0, 0.06, 1.0, 0.08, 1.0, 0.1, 1.0, 0.12, 1.0, 0.14, 1.0];
        data.extend([0.4, 1.0]);
        data.extend([10.0, 1.0, 10.02, 1.0, 10.04, 1.0, 10.06, 1.0, 10.08, 1.0, 10.1, 1.0, 10.12, 1.0, 10.14, 1.0]);
        let n = data.len() / 2;
        let ds = uniform_dataset(n);
        let assignments: Vec<usize> =
            (0..n).map(|i| if i < 8 { 0 } else if i == 8 { 1 } else { 2 }).collect();
        let km = KmeansResult {
            assignments: assignments.clone(),
            centroids: vec![0.07, 1.0, 0.4, 1.0, 10.07, 1.0],
            dim: 2,
            inertia: 0.0,
            iterations: 0,
        };
        let (tasks, merges) = make_tasks(&ds, &assignments, "kmeans", 0.25, 4, 0, Some(&km)).unwrap();
        assert_eq!(merges, vec![MergeEvent { from: 1, to: 0, moved: 1 }]);
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].len(), 9);
    }

    #[test]
    fn all_undersized_clusters_is_an_error() {
        let ds = uniform_dataset(12);
        let assignments: Vec<usize> = (0..12).map(|i| i / 2).collect();
        let err = make_tasks(&ds, &assignments, "test", 0.25, 8, 0, None).unwrap_err();
        assert!(err.to_string().contains("below the minimum"), "{err}");
    }

    #[test]
    fn task_files_round_trip() {
        let ds = uniform_dataset(40);
        let assignments = split_random(&ds, 4, 7).unwrap();
        let (tasks, merges) = make_tasks(&ds, &assignments, "random k=4", 0.2, 4, 3, None).unwrap();
        let manifest = TaskManifest {
            strategy: "random k=4".into(),
            k_requested: 4,
            k_effective: tasks.len(),
            seed: 3,
            val_fraction: 0.2,
            min_size: 4,
            sizes: tasks.iter().map(|t| (t.train.len(), t.val.len())).collect(),
            merges,
        };
        let dir = std::env::temp_dir().join(format!("metapt-tasks-{}", std::process::id()));
        save_tasks(&dir, &tasks, &manifest).unwrap();
        let (back_tasks, back_manifest) = load_tasks(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back_tasks, tasks);
    }

    #[test]
    fn stopword_rule_takes_the_top_percent() {
        // 150 distinct words, so ceil(1.5) = 2 stopwords: the two most
        // frequent ("alpha" then "beta" by count).
        let mut texts: Vec<String> = (0..150).map(|i| format!("word{i}")).collect();
        for _ in 0..30 {
            texts.push("alpha".into());
        }
        for _ in 0..20 {
            texts.push("beta".into());
        }
        let stops = frequent_stopwords(&texts);
        assert_eq!(stops, vec!["alpha".to_string(), "beta".to_string()]);
    }
}
