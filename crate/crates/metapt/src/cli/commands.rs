//! Subcommand implementations. Every command regenerates the synthetic
//! benchmark and tokenizer deterministically from the config (they are
//! pure functions of it), reads hash-verified upstream artifacts, and
//! writes its own outputs plus a provenance manifest naming the exact
//! upstream hashes and a timestamp-free JSONL log. Upstream artifacts
//! are never modified.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::corpus::{
    balance, load_jsonl, make_synthetic_benchmark, pseudo_label, resolve_label_words,
    sample_fewshot, save_jsonl, train_annotator, Dataset, SyntheticBenchmark,
};
use crate::downstream::{
    ablate_clusters, ablate_datasize, ablate_methods, full_tune, prompt_tune, reports_csv,
    run_cell, AblationContext, CellContext, CellMethod, EvalReport,
};
use crate::metatrain::{meta_train, ppt_train, PromptTasks};
use crate::model::{
    init_prompt, pretrain_backbone, ModelConfig, PromptInit, Tokenizer, Verbalizer,
};
use crate::taskgen::{
    assign_by_lda, embed, kmeans, lda_fit, load_tasks, make_tasks, save_tasks, silhouette,
    split_by_label, split_random, KmeansResult, TaskManifest,
};
use crate::util::{sha256_hex, subseed};
use crate::{Error, Result};

use super::checkpoint::{
    from_annotator, from_backbone, from_prompt, load_checkpoint, save_checkpoint, to_backbone,
    to_prompt, Checkpoint,
};
use super::{
    load_config, Cli, ClusterStrategy, Command, DirLock, EvalMethod, ExperimentConfig,
};

const BACKBONE_CKPT: &str = "backbone.ckpt";
const ANNOTATOR_CKPT: &str = "annotator.ckpt";
const POOL_JSONL: &str = "pool.jsonl";
const TASKS_DIR: &str = "tasks";
const PROMPT_META_CKPT: &str = "prompt-meta.ckpt";
const PROMPT_PPT_CKPT: &str = "prompt-ppt.ckpt";
const REPORTS_JSON: &str = "reports.json";
const REPORTS_CSV: &str = "reports.csv";

pub(super) fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    let root = cli
        .artifacts
        .clone()
        .or_else(|| std::env::var_os("METAPT_ARTIFACTS").map(PathBuf::from))
        .unwrap_or_else(|| cfg.artifact_dir.clone());
    let _lock = DirLock::acquire(&root)?;
    let fingerprint = cfg.fingerprint()?;
    let ctx = Ctx { cfg, root, fingerprint };
    match &cli.command {
        Command::PretrainBackbone => cmd_pretrain_backbone(&ctx),
        Command::PseudoLabel => cmd_pseudo_label(&ctx),
        Command::Cluster => cmd_cluster(&ctx),
        Command::MetaTrain => cmd_meta_train(&ctx),
        Command::PptTrain => cmd_ppt_train(&ctx),
        Command::Tune { method, dataset, seed } => cmd_tune(&ctx, method, dataset, *seed),
        Command::Eval => cmd_eval(&ctx),
        Command::Ablate => cmd_ablate(&ctx),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    root: PathBuf,
    fingerprint: String,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Benchmark, tokenizer, and verbalizer, regenerated from the config.
struct World {
    bench: SyntheticBenchmark,
    tok: Tokenizer,
    verbalizer: Verbalizer,
}

fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let bench = make_synthetic_benchmark(&cfg.corpus.synth, cfg.seed)?;
    let tok = Tokenizer::build(&bench.mlm_corpus, cfg.corpus.tokenizer_vocab, &[])?;
    let words = resolve_label_words(&cfg.corpus.annotator, cfg.corpus.synth.n_classes)?;
    let verbalizer = Verbalizer::new(&tok, &words)?;
    Ok(World { bench, tok, verbalizer })
}

fn require(ctx: &Ctx, name: &str, produced_by: &str) -> Result<PathBuf> {
    let p = ctx.path(name);
    if !p.exists() {
        return Err(Error::artifact(format!(
            "missing upstream artifact {}; run `metapt {produced_by}` first",
            p.display()
        )));
    }
    Ok(p)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Order-independent hash of a directory's files: sorted names, each
/// followed by a NUL and its bytes.
fn dir_hash(dir: &Path) -> Result<String> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut h = Sha256::new();
    for name in &names {
        let path = dir.join(name);
        h.update(name.as_bytes());
        h.update([0]);
        h.update(&fs::read(&path).map_err(|e| Error::io(path, e))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: &'a str,
    sha256: &'a str,
    config_fingerprint: &'a str,
    /// Upstream artifact name to hash, everything this run read.
    inputs: &'a BTreeMap<&'a str, String>,
    /// The fully-resolved config that produced the artifact.
    config: &'a ExperimentConfig,
}

fn manifest_path(ctx: &Ctx, artifact: &str) -> PathBuf {
    ctx.path("manifests").join(format!("{artifact}.json"))
}

fn write_manifest(
    ctx: &Ctx,
    artifact: &str,
    sha256: &str,
    inputs: &BTreeMap<&str, String>,
) -> Result<()> {
    let dir = ctx.path("manifests");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let m = Manifest {
        artifact,
        sha256,
        config_fingerprint: &ctx.fingerprint,
        inputs,
        config: &ctx.cfg,
    };
    let body = serde_json::to_vec_pretty(&m)
        .map_err(|e| Error::artifact(format!("serializing manifest: {e}")))?;
    let path = manifest_path(ctx, artifact);
    fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// If the artifact has a manifest from an earlier run, its recorded
/// hash must match the bytes on disk now; a mismatch means the file was
/// edited or half-replaced and everything downstream would be built on
/// sand. Checkpoints carry their own footer and skip this.
fn verify_against_manifest(ctx: &Ctx, artifact: &str, actual: &str) -> Result<()> {
    let mpath = manifest_path(ctx, artifact);
    if !mpath.exists() {
        return Ok(());
    }
    let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let parsed: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::artifact(format!("{}: {e}", mpath.display())))?;
    match parsed.get("sha256").and_then(|v| v.as_str()) {
        Some(recorded) if recorded == actual => Ok(()),
        Some(_) => Err(Error::artifact(format!(
            "{} does not match its manifest; regenerate it",
            ctx.path(artifact).display()
        ))),
        None => Err(Error::artifact(format!("{}: manifest has no sha256", mpath.display()))),
    }
}

fn write_log(ctx: &Ctx, cmd: &str, events: &[serde_json::Value]) -> Result<()> {
    let dir = ctx.path("logs");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e)
            .map_err(|e| Error::artifact(format!("serializing log event: {e}")))?;
        buf.push(b'\n');
    }
    let path = dir.join(format!("{cmd}.jsonl"));
    fs::write(&path, buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_pool(ctx: &Ctx) -> Result<(Dataset, String)> {
    let ppath = require(ctx, POOL_JSONL, "pseudo-label")?;
    let hash = file_hash(&ppath)?;
    verify_against_manifest(ctx, POOL_JSONL, &hash)?;
    Ok((load_jsonl(&ppath, ctx.cfg.corpus.synth.n_classes)?, hash))
}

fn load_backbone(ctx: &Ctx) -> Result<(crate::model::BackboneParams, String)> {
    let bpath = require(ctx, BACKBONE_CKPT, "pretrain-backbone")?;
    Ok((to_backbone(&load_checkpoint(&bpath)?)?, file_hash(&bpath)?))
}

fn load_prompt_artifact(ctx: &Ctx, name: &str, produced_by: &str) -> Result<(Tensor, String)> {
    let path = require(ctx, name, produced_by)?;
    let prompt = to_prompt(&load_checkpoint(&path)?)?;
    check_prompt_fits(&prompt, &ctx.cfg.model, &path)?;
    Ok((prompt, file_hash(&path)?))
}

fn check_prompt_fits(prompt: &Tensor, model: &ModelConfig, path: &Path) -> Result<()> {
    if (prompt.rows(), prompt.cols()) != (model.prompt_len, model.d_model) {
        return Err(Error::artifact(format!(
            "prompt checkpoint {} has shape {}x{}, the model config wants {}x{}",
            path.display(),
            prompt.rows(),
            prompt.cols(),
            model.prompt_len,
            model.d_model
        )));
    }
    Ok(())
}

fn select_datasets<'a>(bench: &'a SyntheticBenchmark, wanted: &[String]) -> Result<Vec<&'a Dataset>> {
    if wanted.is_empty() {
        return Ok(bench.downstream.iter().collect());
    }
    wanted
        .iter()
        .map(|name| {
            bench.downstream.iter().find(|d| &d.name == name).ok_or_else(|| {
                let known: Vec<&str> = bench.downstream.iter().map(|d| d.name.as_str()).collect();
                Error::config(format!(
                    "unknown dataset {name:?}; generated datasets: {}",
                    known.join(", ")
                ))
            })
        })
        .collect()
}

fn save_and_manifest(
    ctx: &Ctx,
    ckpt: &Checkpoint,
    name: &str,
    inputs: &BTreeMap<&str, String>,
) -> Result<PathBuf> {
    let path = ctx.path(name);
    save_checkpoint(ckpt, &path)?;
    write_manifest(ctx, name, &file_hash(&path)?, inputs)?;
    Ok(path)
}

fn cmd_pretrain_backbone(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let seqs: Vec<Vec<usize>> = world
        .bench
        .mlm_corpus
        .iter()
        .map(|t| {
            let mut ids = world.tok.encode(t);
            ids.truncate(cfg.model.max_seq_len);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    eprintln!(
        "pre-training backbone: {} sequences, vocab {}, {} steps",
        seqs.len(),
        world.tok.vocab_size(),
        cfg.mlm.steps
    );
    let (backbone, trace) = pretrain_backbone(&seqs, &cfg.model, world.tok.vocab_size(), &cfg.mlm)?;
    let ckpt = from_backbone(&backbone, &ctx.fingerprint)?;
    let path = save_and_manifest(ctx, &ckpt, BACKBONE_CKPT, &BTreeMap::new())?;
    let mut events: Vec<serde_json::Value> = trace
        .iter()
        .enumerate()
        .map(|(i, loss)| json!({"event": "mlm_step", "step": i + 1, "loss": loss}))
        .collect();
    events.push(json!({
        "event": "backbone_saved",
        "steps": trace.len(),
        "final_loss": trace.last(),
        "sequences": seqs.len(),
        "vocab": world.tok.vocab_size(),
        "hash": backbone.content_hash(),
    }));
    write_log(ctx, "pretrain-backbone", &events)?;
    eprintln!(
        "wrote {} (final loss {:.4})",
        path.display(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_pseudo_label(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    eprintln!(
        "training annotator on {} labeled source examples",
        world.bench.annotator_train.len()
    );
    let annotator =
        train_annotator(&world.bench.annotator_train, &world.tok, &backbone, &cfg.corpus.annotator)?;
    let texts: Vec<&str> = world.bench.pretrain.examples.iter().map(|e| e.text.as_str()).collect();
    eprintln!(
        "pseudo-labeling {} texts at confidence {}",
        texts.len(),
        cfg.corpus.confidence_threshold
    );
    let (records, stats) = pseudo_label(&texts, &annotator, cfg.corpus.confidence_threshold)?;
    let pool = balance(&records, cfg.corpus.synth.n_classes, subseed(cfg.seed, "balance"))?;
    let ppath = ctx.path(POOL_JSONL);
    save_jsonl(&pool, &ppath)?;
    let inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash)]);
    write_manifest(ctx, POOL_JSONL, &file_hash(&ppath)?, &inputs)?;
    let ackpt = from_annotator(&annotator, &ctx.fingerprint)?;
    save_and_manifest(ctx, &ackpt, ANNOTATOR_CKPT, &inputs)?;
    let mut per_class = vec![0usize; cfg.corpus.synth.n_classes];
    for ex in &pool.examples {
        per_class[ex.label.unwrap()] += 1;
    }
    write_log(
        ctx,
        "pseudo-label",
        &[json!({
            "event": "pseudo_labeled",
            "texts": texts.len(),
            "retained": stats.retained,
            "dropped": stats.dropped,
            "pool": pool.len(),
            "per_class": per_class,
        })],
    )?;
    eprintln!(
        "retained {} of {} texts, balanced pool {} -> {}",
        stats.retained,
        texts.len(),
        pool.len(),
        ppath.display()
    );
    Ok(())
}

fn cmd_cluster(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (pool, pool_hash) = load_pool(ctx)?;
    let k = cfg.taskgen.k;
    let mut inputs = BTreeMap::from([(POOL_JSONL, pool_hash)]);
    let mut quality: Option<(f64, f64)> = None;
    let (assignments, km_holder): (Vec<usize>, Option<KmeansResult>) = match cfg.taskgen.strategy {
        ClusterStrategy::Kmeans => {
            let backbone = match cfg.taskgen.embed {
                crate::taskgen::EmbedMethod::MeanPooledBackbone => {
                    let (bb, hash) = load_backbone(ctx)?;
                    inputs.insert(BACKBONE_CKPT, hash);
                    Some(bb)
                }
                crate::taskgen::EmbedMethod::TfIdf => None,
            };
            let e = embed(&pool, cfg.taskgen.embed, &world.tok, backbone.as_ref())?;
            let km = kmeans(&e, k, subseed(cfg.seed, "cluster-kmeans"), cfg.taskgen.kmeans_iters)?;
            quality = Some((km.inertia, silhouette(&e, &km.assignments)));
            (km.assignments.clone(), Some(km))
        }
        ClusterStrategy::Lda => {
            let lda =
                lda_fit(&pool, k, cfg.taskgen.lda_iterations, subseed(cfg.seed, "cluster-lda"))?;
            (assign_by_lda(&lda, &pool)?, None)
        }
        ClusterStrategy::Random => {
            (split_random(&pool, k, subseed(cfg.seed, "cluster-random"))?, None)
        }
        ClusterStrategy::Label => {
            (split_by_label(&pool, k, subseed(cfg.seed, "cluster-label"))?, None)
        }
    };
    let (tasks, merges) = make_tasks(
        &pool,
        &assignments,
        cfg.taskgen.strategy.name(),
        cfg.taskgen.val_fraction,
        cfg.taskgen.min_task_size,
        subseed(cfg.seed, "cluster-split"),
        km_holder.as_ref(),
    )?;
    let manifest = TaskManifest {
        strategy: cfg.taskgen.strategy.name().to_string(),
        k_requested: k,
        k_effective: tasks.len(),
        seed: cfg.seed,
        val_fraction: cfg.taskgen.val_fraction,
        min_size: cfg.taskgen.min_task_size,
        sizes: tasks.iter().map(|t| (t.train.len(), t.val.len())).collect(),
        merges: merges.clone(),
    };
    let tdir = ctx.path(TASKS_DIR);
    // The task set is this command's own output; clear any stale one so
    // task files from a larger previous K cannot linger beside the new
    // manifest.
    if tdir.exists() {
        fs::remove_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    }
    save_tasks(&tdir, &tasks, &manifest)?;
    write_manifest(ctx, TASKS_DIR, &dir_hash(&tdir)?, &inputs)?;
    let mut events = vec![json!({
        "event": "clustered",
        "strategy": cfg.taskgen.strategy.name(),
        "k_requested": k,
        "k_effective": tasks.len(),
        "sizes": manifest.sizes,
        "inertia": quality.map(|q| q.0),
        "silhouette": quality.map(|q| q.1),
    })];
    for m in &merges {
        events.push(json!({"event": "merge", "from": m.from, "to": m.to, "moved": m.moved}));
    }
    write_log(ctx, "cluster", &events)?;
    eprintln!(
        "clustered pool of {} into {} tasks (requested {k}, strategy {}) -> {}",
        pool.len(),
        tasks.len(),
        cfg.taskgen.strategy.name(),
        tdir.display()
    );
    Ok(())
}

fn cmd_meta_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    let tdir = require(ctx, TASKS_DIR, "cluster")?;
    let tasks_hash = dir_hash(&tdir)?;
    verify_against_manifest(ctx, TASKS_DIR, &tasks_hash)?;
    let (tasks, tmanifest) = load_tasks(&tdir)?;
    let objective = PromptTasks::new(&backbone, &world.tok, &world.verbalizer, &tasks)?;
    let init = init_prompt(&backbone, PromptInit::RandomNormal, subseed(cfg.seed, "meta-init"));
    eprintln!(
        "meta-training over {} tasks (strategy {}), up to {} outer steps",
        tasks.len(),
        tmanifest.strategy,
        cfg.maml.max_outer_steps
    );
    let (best, state) = meta_train(&objective, &init, &cfg.maml)?;
    let ckpt = from_prompt(&best, "meta", &ctx.fingerprint)?;
    let inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash), (TASKS_DIR, tasks_hash)]);
    let path = save_and_manifest(ctx, &ckpt, PROMPT_META_CKPT, &inputs)?;
    let mut events = Vec::with_capacity(state.log.len() + 1);
    for entry in &state.log {
        let mut v = serde_json::to_value(entry)
            .map_err(|e| Error::artifact(format!("serializing log entry: {e}")))?;
        v.as_object_mut().unwrap().insert("event".to_string(), json!("outer_step"));
        events.push(v);
    }
    events.push(json!({
        "event": "meta_trained",
        "steps": state.step,
        "best_acc": state.best_acc,
        "stopped_early": state.stopped_early,
    }));
    write_log(ctx, "meta-train", &events)?;
    eprintln!(
        "wrote {} (best task-val acc {:.4} after {} outer steps)",
        path.display(),
        state.best_acc,
        state.step
    );
    Ok(())
}

/// Seeded tenth of the pool held out for early stopping; mirrors the
/// holdout the strategy sweep's reference row uses.
fn pool_holdout(pool: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if pool.len() < 2 {
        return Err(Error::data("pool too small for a holdout"));
    }
    let n_valid = (pool.len() / 10).max(1);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize], name: &str| -> Result<Dataset> {
        Dataset::new(
            format!("{}-{name}", pool.name),
            pool.n_classes,
            idx.iter().map(|&i| pool.examples[i].clone()).collect(),
        )
    };
    Ok((pick(&train_idx, "ppt-train")?, pick(&valid_idx, "ppt-valid")?))
}

fn cmd_ppt_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    let (pool, pool_hash) = load_pool(ctx)?;
    let (train, valid) = pool_holdout(&pool, subseed(cfg.seed, "ppt-holdout"))?;
    let init = init_prompt(&backbone, PromptInit::RandomNormal, subseed(cfg.seed, "ppt-init"));
    eprintln!(
        "prompt pre-training on pool of {} ({} held out), up to {} epochs",
        pool.len(),
        valid.len(),
        cfg.ppt.max_epochs
    );
    let result = ppt_train(&backbone, &world.tok, &world.verbalizer, &train, &valid, &init, &cfg.ppt)?;
    let ckpt = from_prompt(&result.prompt, "ppt", &ctx.fingerprint)?;
    let inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash), (POOL_JSONL, pool_hash)]);
    let path = save_and_manifest(ctx, &ckpt, PROMPT_PPT_CKPT, &inputs)?;
    let mut events: Vec<serde_json::Value> = result
        .curve
        .iter()
        .enumerate()
        .map(|(i, acc)| json!({"event": "epoch", "epoch": i + 1, "val_acc": acc}))
        .collect();
    let best = result.curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    events.push(json!({
        "event": "ppt_trained",
        "epochs_run": result.epochs_run,
        "best_val_acc": best,
    }));
    write_log(ctx, "ppt-train", &events)?;
    eprintln!(
        "wrote {} (best pool-val acc {:.4} over {} epochs)",
        path.display(),
        best,
        result.epochs_run
    );
    Ok(())
}

fn cmd_tune(ctx: &Ctx, method: &str, dataset: &str, seed: u64) -> Result<()> {
    let cfg = &ctx.cfg;
    let method = EvalMethod::parse(method)?;
    let world = build_world(cfg)?;
    let ds = select_datasets(&world.bench, &[dataset.to_string()])?[0];
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    let split = sample_fewshot(ds, cfg.eval.shots, seed)?;
    let mut inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash)]);
    eprintln!(
        "tuning {} on {} (seed {seed}, {}+{} shots)",
        method.name(),
        ds.name,
        split.train.len(),
        split.valid.len()
    );
    let tune_prompt = |init: &Tensor| -> Result<(Checkpoint, f64, Vec<f64>)> {
        let (prompt, curve) = prompt_tune(
            init,
            &backbone,
            &world.tok,
            &world.verbalizer,
            &split.train,
            &split.valid,
            &cfg.tune,
        )?;
        let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let role = format!("tuned-{}", method.name().to_ascii_lowercase());
        Ok((from_prompt(&prompt, &role, &ctx.fingerprint)?, best, curve))
    };
    let (ckpt, best_acc, curve) = match method {
        EvalMethod::Pt => {
            let init = init_prompt(&backbone, PromptInit::RandomNormal, subseed(seed, "pt-init"));
            tune_prompt(&init)?
        }
        EvalMethod::Ppt => {
            let (prompt, hash) = load_prompt_artifact(ctx, PROMPT_PPT_CKPT, "ppt-train")?;
            inputs.insert(PROMPT_PPT_CKPT, hash);
            tune_prompt(&prompt)?
        }
        EvalMethod::MetaPt => {
            let (prompt, hash) = load_prompt_artifact(ctx, PROMPT_META_CKPT, "meta-train")?;
            inputs.insert(PROMPT_META_CKPT, hash);
            tune_prompt(&prompt)?
        }
        EvalMethod::Ft => {
            let result = full_tune(
                &backbone,
                &world.tok,
                &world.verbalizer,
                &split.train,
                &split.valid,
                &cfg.full,
            )?;
            (from_backbone(&result.model, &ctx.fingerprint)?, result.best_acc, result.curve)
        }
    };
    let out_name = format!("tuned-{}-{}-s{seed}.ckpt", method.name().to_ascii_lowercase(), ds.name);
    let path = save_and_manifest(ctx, &ckpt, &out_name, &inputs)?;
    write_log(
        ctx,
        "tune",
        &[json!({
            "event": "tuned",
            "method": method.name(),
            "dataset": ds.name,
            "seed": seed,
            "best_val_acc": best_acc,
            "curve": curve,
            "test_remainder_reads": split.test.access_count(),
        })],
    )?;
    eprintln!("wrote {} (best val acc {:.4})", path.display(), best_acc);
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    let mut inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash)]);
    let mut methods: Vec<EvalMethod> = Vec::new();
    for m in &cfg.eval.methods {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let ppt_prompt = if methods.contains(&EvalMethod::Ppt) {
        let (prompt, hash) = load_prompt_artifact(ctx, PROMPT_PPT_CKPT, "ppt-train")?;
        inputs.insert(PROMPT_PPT_CKPT, hash);
        Some(prompt)
    } else {
        None
    };
    let meta_prompt = if methods.contains(&EvalMethod::MetaPt) {
        let (prompt, hash) = load_prompt_artifact(ctx, PROMPT_META_CKPT, "meta-train")?;
        inputs.insert(PROMPT_META_CKPT, hash);
        Some(prompt)
    } else {
        None
    };
    let datasets = select_datasets(&world.bench, &cfg.eval.datasets)?;
    let cell_ctx = CellContext {
        backbone: &backbone,
        tok: &world.tok,
        verbalizer: &world.verbalizer,
        shots: cfg.eval.shots,
        prompt_cfg: cfg.tune.clone(),
        full_cfg: cfg.full.clone(),
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for ds in &datasets {
        for m in &methods {
            let cell = match m {
                EvalMethod::Pt => CellMethod::Pt,
                EvalMethod::Ppt => CellMethod::Ppt(ppt_prompt.as_ref().unwrap()),
                EvalMethod::MetaPt => CellMethod::MetaPt(meta_prompt.as_ref().unwrap()),
                EvalMethod::Ft => CellMethod::Ft,
            };
            let report = run_cell(&cell, ds, &cfg.eval.seeds, &cell_ctx)?;
            eprintln!(
                "{:>6} on {}: {:.4} +- {:.4} over {} seeds",
                report.method,
                report.dataset,
                report.mean,
                report.std,
                report.seeds.len()
            );
            reports.push(report);
        }
    }
    // Canonical order regardless of config order.
    reports.sort_by(|a, b| a.dataset.cmp(&b.dataset).then(a.method.cmp(&b.method)));
    let jpath = ctx.path(REPORTS_JSON);
    let body = serde_json::to_vec_pretty(&reports)
        .map_err(|e| Error::artifact(format!("serializing reports: {e}")))?;
    fs::write(&jpath, body).map_err(|e| Error::io(&jpath, e))?;
    let cpath = ctx.path(REPORTS_CSV);
    fs::write(&cpath, reports_csv(&reports)).map_err(|e| Error::io(&cpath, e))?;
    write_manifest(ctx, REPORTS_JSON, &file_hash(&jpath)?, &inputs)?;
    write_manifest(ctx, REPORTS_CSV, &file_hash(&cpath)?, &inputs)?;
    let events: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            json!({
                "event": "cell",
                "method": r.method,
                "dataset": r.dataset,
                "seeds": r.seeds,
                "accuracies": r.accuracies,
                "mean": r.mean,
                "std": r.std,
                "fingerprint": r.fingerprint,
            })
        })
        .collect();
    write_log(ctx, "eval", &events)?;
    eprintln!("wrote {} and {}", jpath.display(), cpath.display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = build_world(cfg)?;
    let (backbone, backbone_hash) = load_backbone(ctx)?;
    let (pool, pool_hash) = load_pool(ctx)?;
    let dataset: &Dataset = if cfg.ablation.dataset.is_empty() {
        world
            .bench
            .downstream
            .first()
            .ok_or_else(|| Error::config("config generates no downstream datasets"))?
    } else {
        select_datasets(&world.bench, &[cfg.ablation.dataset.clone()])?[0]
    };
    let actx = AblationContext {
        backbone: &backbone,
        tok: &world.tok,
        verbalizer: &world.verbalizer,
        pool: &pool,
        dataset,
        embed: cfg.taskgen.embed,
        maml: cfg.maml.clone(),
        ppt: cfg.ppt.clone(),
        tune: cfg.tune.clone(),
        shots: cfg.eval.shots,
        val_fraction: cfg.taskgen.val_fraction,
        min_task_size: cfg.taskgen.min_task_size,
        kmeans_iters: cfg.taskgen.kmeans_iters,
        lda_iterations: cfg.taskgen.lda_iterations,
        seed: cfg.seed,
    };
    let inputs = BTreeMap::from([(BACKBONE_CKPT, backbone_hash), (POOL_JSONL, pool_hash)]);
    let mut events = Vec::new();
    let sweeps: [(&str, &str); 3] = [
        ("ablate-datasize.csv", "datasize"),
        ("ablate-clusters.csv", "clusters"),
        ("ablate-methods.csv", "methods"),
    ];
    for (file, which) in sweeps {
        let csv = match which {
            "datasize" => {
                eprintln!("data-size sweep over {:?} at k = {}", cfg.ablation.sizes, cfg.taskgen.k);
                ablate_datasize(&actx, &cfg.ablation.sizes, cfg.taskgen.k, &cfg.ablation.seeds)?
            }
            "clusters" => {
                eprintln!("cluster-count sweep over {:?}", cfg.ablation.ks);
                ablate_clusters(&actx, &cfg.ablation.ks, &cfg.ablation.seeds)?
            }
            _ => {
                eprintln!("strategy sweep at k = {}", cfg.taskgen.k);
                ablate_methods(&actx, cfg.taskgen.k, &cfg.ablation.seeds)?
            }
        };
        let path = ctx.path(file);
        fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        write_manifest(ctx, file, &file_hash(&path)?, &inputs)?;
        events.push(json!({
            "event": "sweep",
            "sweep": which,
            "artifact": file,
            "rows": csv.lines().count().saturating_sub(1),
        }));
        eprintln!("wrote {}", path.display());
    }
    write_log(ctx, "ablate", &events)?;
    Ok(())
}
