//! Deterministic synthetic sentiment benchmark. Sentences are built
//! from three disjoint word pools: class-bearing words (aligned with
//! the verbalizer in the pre-training domains, private rows in the
//! downstream ones), domain-bearing words (unique to one domain), and a
//! fixed set of filler words. Downstream domains share no class
//! vocabulary with pre-training text, so a bag-of-words learner cannot
//! transfer at all; the class signal only crosses domains through the
//! backbone's embedding space.
//!
//! The masked-language-model corpus is not a plain copy of the datasets:
//! every copied example carries a verdict clause, and the corpus ends
//! with class runs and bridge runs (see [`with_verdict`], [`class_run`]
//! and [`bridge_run`]). The first two are needed for a desk-scale
//! backbone to link the `it was <mask>` slot to the class words at all;
//! the bridge-run count dials how much of that link the downstream
//! domains inherit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::model::split_text;
use crate::util::subseed;
use crate::{Error, Result};

/// One class lexicon per label, in label order. The first word of each
/// row is the verbalizer word for that class.
const CLASS_LEXICONS: [[&str; 4]; 5] = [
    ["terrible", "awful", "horrible", "dreadful"],
    ["bad", "poor", "mediocre", "lousy"],
    ["maybe", "passable", "unremarkable", "middling"],
    ["good", "nice", "pleasant", "agreeable"],
    ["great", "superb", "wonderful", "fantastic"],
];

const FILLER_WORDS: [&str; 11] =
    ["the", "was", "this", "felt", "and", "really", "seemed", "it", "a", "overall", "quite"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLexicon {
    pub name: String,
    pub words: Vec<String>,
    /// Per-class sentiment words private to this domain, one row per
    /// label. Empty means the domain speaks the global class lexicon.
    /// A domain with its own rows shares no class vocabulary with
    /// pre-training text, so nothing transfers at the bag-of-words
    /// level; transfer has to run through the backbone's embeddings.
    #[serde(default)]
    pub class_words: Vec<Vec<String>>,
}

impl DomainLexicon {
    pub fn new(name: &str, words: &[&str]) -> DomainLexicon {
        DomainLexicon {
            name: name.to_string(),
            words: words.iter().map(|w| w.to_string()).collect(),
            class_words: Vec::new(),
        }
    }

    pub fn with_class_words(mut self, rows: &[&[&str]]) -> DomainLexicon {
        self.class_words =
            rows.iter().map(|r| r.iter().map(|w| w.to_string()).collect()).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default = "SynthSpec::desk_default")]
pub struct SynthSpec {
    pub n_classes: usize,
    pub pretrain_domains: Vec<DomainLexicon>,
    pub downstream_domains: Vec<DomainLexicon>,
    /// Size of the labeled source set the annotator trains on.
    pub annotator_examples: usize,
    /// Size of the open corpus that gets pseudo-labeled.
    pub pretrain_examples: usize,
    /// Size of each downstream dataset.
    pub downstream_examples: usize,
    /// Extra unlabeled texts generated per downstream domain for the
    /// masked-language-model corpus, so downstream vocabulary is never
    /// out of vocabulary for the backbone.
    pub mlm_extra_per_domain: usize,
    /// Number of class-run sentences appended to the
    /// masked-language-model corpus. See [`class_run`].
    pub mlm_class_runs: usize,
    /// Number of bridge-run sentences appended to the
    /// masked-language-model corpus. See [`bridge_run`].
    pub mlm_bridge_runs: usize,
}

impl SynthSpec {
    pub fn desk_default() -> SynthSpec {
        SynthSpec {
            n_classes: 5,
            pretrain_domains: vec![
                DomainLexicon::new("food", &["soup", "bread", "pasta", "sauce", "dinner", "menu"]),
                DomainLexicon::new("film", &["movie", "film", "actor", "scene", "plot", "cinema"]),
                DomainLexicon::new("travel", &["hotel", "flight", "beach", "resort", "luggage", "tour"]),
            ],
            downstream_domains: vec![
                DomainLexicon::new("tech", &["laptop", "phone", "battery", "screen", "keyboard", "charger"])
                    .with_class_words(&[
                        &["broken", "glitchy"],
                        &["laggy", "flimsy"],
                        &["serviceable", "standard"],
                        &["snappy", "sturdy"],
                        &["flawless", "stellar"],
                    ]),
                DomainLexicon::new("books", &["novel", "author", "chapter", "paperback", "prose", "cover"])
                    .with_class_words(&[
                        &["unreadable", "dire"],
                        &["dull", "clumsy"],
                        &["uneven", "plain"],
                        &["engaging", "vivid"],
                        &["gripping", "luminous"],
                    ]),
            ],
            annotator_examples: 200,
            pretrain_examples: 1200,
            downstream_examples: 400,
            mlm_extra_per_domain: 90,
            mlm_class_runs: 1200,
            mlm_bridge_runs: 150,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=CLASS_LEXICONS.len()).contains(&self.n_classes) {
            return Err(Error::config(format!(
                "n_classes must be in 2..={}, got {}",
                CLASS_LEXICONS.len(),
                self.n_classes
            )));
        }
        if self.pretrain_domains.is_empty() || self.downstream_domains.is_empty() {
            return Err(Error::config("need at least one pre-training and one downstream domain"));
        }
        for (n, v) in [
            ("annotator_examples", self.annotator_examples),
            ("pretrain_examples", self.pretrain_examples),
            ("downstream_examples", self.downstream_examples),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{n} must be positive")));
            }
        }
        let mut owner: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
        for row in &CLASS_LEXICONS {
            for w in row {
                if owner.insert(w, "class lexicon").is_some() {
                    return Err(Error::config(format!("lexicon collision: {w} appears twice in class lexicons")));
                }
            }
        }
        for w in FILLER_WORDS {
            if let Some(prev) = owner.insert(w, "filler") {
                return Err(Error::config(format!("lexicon collision: {w} in filler and {prev}")));
            }
        }
        for dom in self.pretrain_domains.iter().chain(&self.downstream_domains) {
            if dom.name.trim().is_empty() {
                return Err(Error::config("domain with empty name"));
            }
            if dom.words.len() < 2 {
                return Err(Error::config(format!("domain {} needs at least two words", dom.name)));
            }
            for w in dom.words.iter().chain(dom.class_words.iter().flatten()) {
                let toks = split_text(w);
                if toks.len() != 1 || toks[0] != *w {
                    return Err(Error::config(format!("domain {}: {w} is not a single lowercase token", dom.name)));
                }
                if let Some(prev) = owner.insert(w.as_str(), dom.name.as_str()) {
                    return Err(Error::config(format!("lexicon collision: {w} in {} and {prev}", dom.name)));
                }
            }
            if !dom.class_words.is_empty() {
                if dom.class_words.len() != self.n_classes {
                    return Err(Error::config(format!(
                        "domain {}: {} class-word rows for {} classes",
                        dom.name,
                        dom.class_words.len(),
                        self.n_classes
                    )));
                }
                if dom.class_words.iter().any(|row| row.len() < 2) {
                    return Err(Error::config(format!(
                        "domain {}: every class-word row needs at least two words",
                        dom.name
                    )));
                }
            }
        }
        for pre in &self.pretrain_domains {
            if !pre.class_words.is_empty() {
                return Err(Error::config(format!(
                    "pre-training domain {} cannot have its own class words; the annotator and the verbalizer assume the global lexicon there",
                    pre.name
                )));
            }
        }
        for down in &self.downstream_domains {
            if self.pretrain_domains.iter().any(|p| p.name == down.name) {
                return Err(Error::config(format!("domain {} used for both pre-training and downstream", down.name)));
            }
        }
        if self.mlm_bridge_runs > 0 && self.downstream_domains.iter().all(|d| d.class_words.is_empty()) {
            return Err(Error::config(
                "mlm_bridge_runs requires a downstream domain with its own class words",
            ));
        }
        Ok(())
    }
}

/// Everything the pipeline needs, generated in one shot. The open
/// corpus keeps its ground-truth labels for diagnostics; the pipeline
/// annotates from text alone.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    /// Labeled source set (pre-training domains) for the annotator.
    pub annotator_train: Dataset,
    /// Open corpus (pre-training domains) to pseudo-label.
    pub pretrain: Dataset,
    /// Domain index of each `pretrain` example.
    pub pretrain_domain_ids: Vec<usize>,
    /// One labeled dataset per downstream domain.
    pub downstream: Vec<Dataset>,
    /// Unlabeled texts for backbone pre-training and tokenizer
    /// construction: one verdict-suffixed copy of every generated
    /// example across all domains, then the class runs.
    pub mlm_corpus: Vec<String>,
}

fn pick_two<'a, R: Rng, S: AsRef<str>>(rng: &mut R, pool: &'a [S]) -> (&'a str, &'a str) {
    let i = rng.gen_range(0..pool.len());
    let mut j = rng.gen_range(0..pool.len() - 1);
    if j >= i {
        j += 1;
    }
    (pool[i].as_ref(), pool[j].as_ref())
}

fn gen_sentence<R: Rng, S: AsRef<str>>(rng: &mut R, class_words: &[S], domain_words: &[String]) -> String {
    let (cw1, cw2) = pick_two(rng, class_words);
    let (dw1, dw2) = pick_two(rng, domain_words);
    match rng.gen_range(0..6) {
        0 => format!("the {dw1} was {cw1}"),
        1 => format!("this {dw1} felt {cw1} and {cw2}"),
        2 => format!("{cw1} {dw1} , really {cw2}"),
        3 => format!("the {dw1} and the {dw2} seemed {cw1}"),
        4 => format!("it was a {cw1} {dw1} overall"),
        _ => format!("quite {cw1} , this {dw1}"),
    }
}

fn gen_dataset(
    name: &str,
    n: usize,
    n_classes: usize,
    domains: &[DomainLexicon],
    rng: &mut ChaCha8Rng,
) -> (Dataset, Vec<usize>) {
    let mut examples = Vec::with_capacity(n);
    let mut domain_ids = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        let d = rng.gen_range(0..domains.len());
        let dom = &domains[d];
        let text = if dom.class_words.is_empty() {
            gen_sentence(rng, &CLASS_LEXICONS[label], &dom.words)
        } else {
            gen_sentence(rng, &dom.class_words[label], &dom.words)
        };
        examples.push(Example { text, label: Some(label) });
        domain_ids.push(d);
    }
    (Dataset { name: name.to_string(), n_classes, examples }, domain_ids)
}

pub fn make_synthetic_benchmark(spec: &SynthSpec, seed: u64) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "synth-annotator"));
    let (annotator_train, _) =
        gen_dataset("annotator-train", spec.annotator_examples, spec.n_classes, &spec.pretrain_domains, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "synth-pretrain"));
    let (pretrain, pretrain_domain_ids) =
        gen_dataset("pretrain", spec.pretrain_examples, spec.n_classes, &spec.pretrain_domains, &mut rng);
    let mut downstream = Vec::new();
    for dom in &spec.downstream_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("synth-down-{}", dom.name)));
        let name = format!("down-{}", dom.name);
        let (ds, _) = gen_dataset(&name, spec.downstream_examples, spec.n_classes, std::slice::from_ref(dom), &mut rng);
        downstream.push(ds);
    }
    let mut mlm_corpus: Vec<String> = Vec::new();
    let mut echo_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "synth-mlm-echo"));
    let extend_corpus = |ds: &Dataset, rng: &mut ChaCha8Rng, out: &mut Vec<String>| {
        for ex in &ds.examples {
            out.push(with_verdict(ex, rng));
        }
    };
    extend_corpus(&pretrain, &mut echo_rng, &mut mlm_corpus);
    extend_corpus(&annotator_train, &mut echo_rng, &mut mlm_corpus);
    for dom in &spec.downstream_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("synth-mlm-{}", dom.name)));
        let (extra, _) =
            gen_dataset("mlm-extra", spec.mlm_extra_per_domain, spec.n_classes, std::slice::from_ref(dom), &mut rng);
        extend_corpus(&extra, &mut echo_rng, &mut mlm_corpus);
    }
    let mut run_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "synth-mlm-runs"));
    for _ in 0..spec.mlm_class_runs {
        mlm_corpus.push(class_run(spec.n_classes, &mut run_rng));
    }
    let bridged: Vec<&DomainLexicon> =
        spec.downstream_domains.iter().filter(|d| !d.class_words.is_empty()).collect();
    let mut bridge_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "synth-mlm-bridges"));
    for _ in 0..spec.mlm_bridge_runs {
        mlm_corpus.push(bridge_run(&bridged, spec.n_classes, &mut bridge_rng));
    }
    Ok(SyntheticBenchmark { annotator_train, pretrain, pretrain_domain_ids, downstream, mlm_corpus })
}

/// Corpus copy of a generated example. Every copy ends with the verdict
/// clause `it was W .` where W comes from the sentence's own class
/// lexicon, the way a review closes with a summary judgement. The clause
/// is the only corpus evidence tying the `it was <mask>` context to the
/// class of the surrounding words; masked pre-training without it never
/// links the slot to the sentence, and prompts have nothing to steer.
/// The labeled datasets themselves never carry the clause.
fn with_verdict(ex: &Example, rng: &mut ChaCha8Rng) -> String {
    let label = ex.label.expect("generated examples are labeled");
    let lex = &CLASS_LEXICONS[label];
    format!("{} it was {} .", ex.text, lex[rng.gen_range(0..lex.len())])
}

/// A run of two to four words from one class lexicon, like
/// `good , pleasant , nice`. Generated sentences expose at most two
/// class words buried among fillers, which at desk scale is too weak a
/// co-occurrence signal to keep the class rows from collapsing into a
/// single embedding direction (the rows are interchangeable across the
/// corpus). Runs concentrate that signal: masking any word in a run is
/// answerable only from same-class neighbours, so the rows separate and
/// the verdict clause becomes decodable.
fn class_run(n_classes: usize, rng: &mut ChaCha8Rng) -> String {
    let lex = &CLASS_LEXICONS[rng.gen_range(0..n_classes)];
    let mut words: Vec<&str> = lex.to_vec();
    words.shuffle(rng);
    words[..rng.gen_range(2..=4)].join(" , ")
}

/// A run tying one downstream domain's class row to the global row of
/// the same class, like `flawless , great , stellar`. Domain class
/// words never co-occur with global class words in generated sentences,
/// so these runs are the only evidence aligning their embeddings; their
/// count sets how well downstream sentiment decodes zero-shot through
/// the verbalizer, which is the headroom few-shot adaptation works in.
/// The global member is always the verbalizer word (row head), the
/// direction the classification head actually reads.
fn bridge_run(domains: &[&DomainLexicon], n_classes: usize, rng: &mut ChaCha8Rng) -> String {
    let dom = domains[rng.gen_range(0..domains.len())];
    let label = rng.gen_range(0..n_classes);
    let row = &dom.class_words[label];
    let mut words = vec![row[rng.gen_range(0..row.len())].as_str(), CLASS_LEXICONS[label][0]];
    if rng.gen_bool(0.5) {
        words.push(row[rng.gen_range(0..row.len())].as_str());
    }
    words.shuffle(rng);
    words.join(" , ")
}
