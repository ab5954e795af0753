//! Dataset ingestion and the pseudo-label pipeline.
//!
//! Text flows in as JSON Lines (`{"text": ..., "label": ...}`, label
//! optional), gets annotated by a fully tuned classifier, filtered by
//! confidence, and class-balanced into a pre-training pool. Few-shot
//! splits keep the test remainder behind an access-counting handle so
//! the evaluation protocol can prove the remainder never leaked into
//! tuning decisions.

mod annotator;
mod synth;

pub use annotator::{
    pseudo_label, resolve_label_words, train_annotator, Annotator, AnnotatorConfig, PseudoStats,
};
pub use synth::{make_synthetic_benchmark, DomainLexicon, SynthSpec, SyntheticBenchmark};

use std::cell::Cell;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One text with an optional class label. Unlabeled examples come from
/// open corpora that have not been annotated yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// An ordered collection of examples. Order is load order and is part
/// of the contract: sampling and balancing are defined against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, n_classes: usize, examples: Vec<Example>) -> Result<Dataset> {
        let ds = Dataset { name: name.into(), n_classes, examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::data("dataset must have at least one class"));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.text.trim().is_empty() {
                return Err(Error::data(format!("example {i}: empty text")));
            }
            if let Some(l) = ex.label {
                if l >= self.n_classes {
                    return Err(Error::data(format!(
                        "example {i}: label {l} out of range for {} classes",
                        self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.text.clone()).collect()
    }

    /// True iff every example carries a label.
    pub fn fully_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.label.is_some())
    }
}

/// One pseudo-annotated text. `confidence` is the annotator's maximum
/// class probability on this text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub text: String,
    pub pseudo_label: usize,
    pub confidence: f64,
}

/// Reads a JSON Lines dataset. Each non-empty line must be an object
/// with `text` and an optional `label`. Errors carry the 1-based line
/// number. CRLF files load identically to LF files.
pub fn load_jsonl(path: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut examples = Vec::new();
    for (i, line) in raw.split('\n').enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::DataLine {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if ex.text.trim().is_empty() {
            return Err(Error::DataLine {
                path: path.to_path_buf(),
                line: lineno,
                msg: "empty text".to_string(),
            });
        }
        if let Some(l) = ex.label {
            if l >= n_classes {
                return Err(Error::DataLine {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("label {l} out of range for {n_classes} classes"),
                });
            }
        }
        examples.push(ex);
    }
    Ok(Dataset { name, n_classes, examples })
}

/// Writes a dataset as JSON Lines, one example per line, omitting the
/// `label` field for unlabeled examples. Round-trips with `load_jsonl`.
pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in &ds.examples {
        serde_json::to_writer(&mut buf, ex)
            .map_err(|e| Error::artifact(format!("serializing example: {e}")))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// The held-out remainder of a few-shot split. Reading the examples
/// goes through `dataset()`, which counts accesses; the evaluation
/// protocol asserts the count stayed at zero until final scoring.
#[derive(Debug)]
pub struct TestSet {
    data: Dataset,
    reads: Cell<usize>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Audited accessor: every call is counted.
    pub fn dataset(&self) -> &Dataset {
        self.reads.set(self.reads.get() + 1);
        &self.data
    }

    pub fn access_count(&self) -> usize {
        self.reads.get()
    }
}

/// A few-shot split: `n` training examples, `n` disjoint validation
/// examples, and the untouched remainder for testing.
#[derive(Debug)]
pub struct FewShotSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: TestSet,
}

/// Draws `n` train and `n` validation examples uniformly without
/// replacement; everything else becomes the test remainder. Within each
/// split, dataset order is preserved. Deterministic per seed.
pub fn sample_fewshot(ds: &Dataset, n: usize, seed: u64) -> Result<FewShotSplit> {
    use rand::SeedableRng;
    if n == 0 {
        return Err(Error::data("few-shot size must be positive"));
    }
    if ds.len() < 2 * n {
        return Err(Error::data(format!(
            "dataset {} has {} examples, need at least {} for a {n}+{n} split",
            ds.name,
            ds.len(),
            2 * n
        )));
    }
    if !ds.fully_labeled() {
        return Err(Error::data(format!("dataset {} has unlabeled examples", ds.name)));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ds.len(), 2 * n).into_vec();
    let mut train_idx: Vec<usize> = picked[..n].to_vec();
    let mut valid_idx: Vec<usize> = picked[n..].to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    let chosen: std::collections::HashSet<usize> = picked.iter().copied().collect();
    let take = |idx: &[usize]| -> Vec<Example> { idx.iter().map(|&i| ds.examples[i].clone()).collect() };
    let rest: Vec<Example> = (0..ds.len())
        .filter(|i| !chosen.contains(i))
        .map(|i| ds.examples[i].clone())
        .collect();
    Ok(FewShotSplit {
        train: Dataset {
            name: format!("{}-train", ds.name),
            n_classes: ds.n_classes,
            examples: take(&train_idx),
        },
        valid: Dataset {
            name: format!("{}-valid", ds.name),
            n_classes: ds.n_classes,
            examples: take(&valid_idx),
        },
        test: TestSet {
            data: Dataset {
                name: format!("{}-test", ds.name),
                n_classes: ds.n_classes,
                examples: rest,
            },
            reads: Cell::new(0),
        },
    })
}

/// Downsamples every class to the minimum class count, uniformly and
/// deterministically per seed, preserving input order in the output.
/// Every class in `0..n_classes` must be represented.
pub fn balance(records: &[PseudoRecord], n_classes: usize, seed: u64) -> Result<Dataset> {
    use rand::SeedableRng;
    if n_classes == 0 {
        return Err(Error::data("balance: need at least one class"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, r) in records.iter().enumerate() {
        if r.pseudo_label >= n_classes {
            return Err(Error::data(format!(
                "record {i}: pseudo label {} out of range for {n_classes} classes",
                r.pseudo_label
            )));
        }
        by_class[r.pseudo_label].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::data(format!("balance: class {c} has no records")));
    }
    let min = by_class.iter().map(|v| v.len()).min().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(min * n_classes);
    for members in &by_class {
        if members.len() == min {
            keep.extend_from_slice(members);
        } else {
            let picked = rand::seq::index::sample(&mut rng, members.len(), min);
            keep.extend(picked.iter().map(|j| members[j]));
        }
    }
    keep.sort_unstable();
    let examples = keep
        .iter()
        .map(|&i| Example { text: records[i].text.clone(), label: Some(records[i].pseudo_label) })
        .collect();
    Dataset::new("balanced", n_classes, examples)
}
