//! Ablation drivers: pool-size, cluster-count, and clustering-method
//! sweeps. Each driver reruns the pipeline tail (cluster, meta-train,
//! adapt, evaluate) against a fixed context and emits one CSV row per
//! setting, so a sweep is a single string artifact.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::metatrain::{meta_train, ppt_train, MamlConfig, PptConfig, PromptTasks};
use crate::model::{init_prompt, BackboneParams, PromptInit, Tokenizer, Verbalizer};
use crate::taskgen::{
    assign_by_lda, embed, kmeans, lda_fit, make_tasks, silhouette, split_by_label, split_random,
    EmbedMethod, KmeansResult,
};
use crate::util::subseed;
use crate::{Error, Result};

use super::{run_cell, CellContext, CellMethod, EvalReport, TuneConfig};

/// The fixed side of a sweep: one frozen backbone, the pseudo-labeled
/// pool feeding clustering and meta-training, one downstream dataset,
/// and the operating points of every pipeline stage. Sweeps vary a
/// single axis against this.
pub struct AblationContext<'a> {
    pub backbone: &'a BackboneParams,
    pub tok: &'a Tokenizer,
    pub verbalizer: &'a Verbalizer,
    pub pool: &'a Dataset,
    pub dataset: &'a Dataset,
    /// Embedding fed to k-means.
    pub embed: EmbedMethod,
    pub maml: MamlConfig,
    /// Pooled pre-training settings for the PPT reference row.
    pub ppt: PptConfig,
    /// Few-shot adaptation settings.
    pub tune: TuneConfig,
    /// Examples per few-shot split.
    pub shots: usize,
    pub val_fraction: f64,
    pub min_task_size: usize,
    pub kmeans_iters: usize,
    pub lda_iterations: usize,
    /// Pipeline seed; clustering, task splits, and prompt inits derive
    /// their streams from it. Benchmark seeds are passed per sweep.
    pub seed: u64,
}

impl AblationContext<'_> {
    fn cell(&self) -> CellContext<'_> {
        CellContext {
            backbone: self.backbone,
            tok: self.tok,
            verbalizer: self.verbalizer,
            shots: self.shots,
            prompt_cfg: self.tune.clone(),
            full_cfg: self.tune.clone(),
        }
    }

    /// Assignment to meta prompt: build tasks, meta-train from a seeded
    /// random init.
    fn meta_prompt(
        &self,
        pool: &Dataset,
        assignments: &[usize],
        origin: &str,
        km: Option<&KmeansResult>,
    ) -> Result<Tensor> {
        let (tasks, _) = make_tasks(
            pool,
            assignments,
            origin,
            self.val_fraction,
            self.min_task_size,
            subseed(self.seed, "ablate-tasks"),
            km,
        )?;
        let obj = PromptTasks::new(self.backbone, self.tok, self.verbalizer, &tasks)?;
        let init =
            init_prompt(self.backbone, PromptInit::RandomNormal, subseed(self.seed, "ablate-init"));
        let (prompt, _) = meta_train(&obj, &init, &self.maml)?;
        Ok(prompt)
    }
}

/// Pool-size sweep: subsample the pool to each size, recluster with
/// k-means at the fixed K, meta-train, and score one downstream cell
/// per size. Sizes must fit the pool; K must fit every size.
pub fn ablate_datasize(
    ctx: &AblationContext,
    sizes: &[usize],
    k: usize,
    seeds: &[u64],
) -> Result<String> {
    if sizes.is_empty() {
        return Err(Error::config("ablate_datasize: no sizes"));
    }
    let mut out = String::from("pool_size,method,dataset,seeds,mean,std,fingerprint\n");
    for &size in sizes {
        if size == 0 || size > ctx.pool.len() {
            return Err(Error::config(format!(
                "pool size {size} outside 1..={}",
                ctx.pool.len()
            )));
        }
        let sub = subsample(ctx.pool, size, subseed(ctx.seed, &format!("datasize-{size}")))?;
        let e = embed(&sub, ctx.embed, ctx.tok, Some(ctx.backbone))?;
        let km = kmeans(&e, k, subseed(ctx.seed, "datasize-kmeans"), ctx.kmeans_iters)?;
        let prompt = ctx.meta_prompt(&sub, &km.assignments, "kmeans", Some(&km))?;
        let report = run_cell(&CellMethod::MetaPt(&prompt), ctx.dataset, seeds, &ctx.cell())?;
        let mut fields = vec![size.to_string()];
        fields.extend(report_cols(&report));
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    Ok(out)
}

/// Cluster-count sweep over a shared pool and embedding: one k-means
/// MetaPT cell per K.
pub fn ablate_clusters(ctx: &AblationContext, ks: &[usize], seeds: &[u64]) -> Result<String> {
    if ks.is_empty() {
        return Err(Error::config("ablate_clusters: no cluster counts"));
    }
    let e = embed(ctx.pool, ctx.embed, ctx.tok, Some(ctx.backbone))?;
    let mut out = String::from("k,method,dataset,seeds,mean,std,fingerprint\n");
    for &k in ks {
        let km = kmeans(&e, k, subseed(ctx.seed, &format!("clusters-{k}")), ctx.kmeans_iters)?;
        let prompt = ctx.meta_prompt(ctx.pool, &km.assignments, "kmeans", Some(&km))?;
        let report = run_cell(&CellMethod::MetaPt(&prompt), ctx.dataset, seeds, &ctx.cell())?;
        let mut fields = vec![k.to_string()];
        fields.extend(report_cols(&report));
        out.push_str(&csv_line(&fields));
        out.push('\n');
    }
    Ok(out)
}

/// Clustering-method sweep at a fixed K: k-means, LDA, random, and
/// label grouping, each meta-trained on the shared pool, plus the
/// pooled PPT reference. The k-means row carries its cluster-quality
/// numbers; the other rows leave those columns empty.
pub fn ablate_methods(ctx: &AblationContext, k: usize, seeds: &[u64]) -> Result<String> {
    let e = embed(ctx.pool, ctx.embed, ctx.tok, Some(ctx.backbone))?;
    let km = kmeans(&e, k, subseed(ctx.seed, "methods-kmeans"), ctx.kmeans_iters)?;
    let sil = silhouette(&e, &km.assignments);
    let lda = lda_fit(ctx.pool, k, ctx.lda_iterations, subseed(ctx.seed, "methods-lda"))?;

    let strategies: [(&str, Vec<usize>, Option<&KmeansResult>); 4] = [
        ("kmeans", km.assignments.clone(), Some(&km)),
        ("lda", assign_by_lda(&lda, ctx.pool)?, None),
        ("random", split_random(ctx.pool, k, subseed(ctx.seed, "methods-random"))?, None),
        ("label", split_by_label(ctx.pool, k, subseed(ctx.seed, "methods-label"))?, None),
    ];

    let mut out =
        String::from("strategy,method,dataset,seeds,mean,std,inertia,silhouette,fingerprint\n");
    for (strategy, assignments, kres) in &strategies {
        let prompt = ctx.meta_prompt(ctx.pool, assignments, strategy, *kres)?;
        let report = run_cell(&CellMethod::MetaPt(&prompt), ctx.dataset, seeds, &ctx.cell())?;
        let quality = kres.map(|r| (r.inertia, sil));
        out.push_str(&methods_row(strategy, &report, quality));
        out.push('\n');
    }

    let pooled = pooled_prompt(ctx)?;
    let report = run_cell(&CellMethod::Ppt(&pooled), ctx.dataset, seeds, &ctx.cell())?;
    out.push_str(&methods_row("ppt", &report, None));
    out.push('\n');
    Ok(out)
}

/// PPT reference: plain prompt tuning over the whole pool, with a
/// seeded tenth held out for early stopping.
fn pooled_prompt(ctx: &AblationContext) -> Result<Tensor> {
    let n = ctx.pool.len();
    if n < 2 {
        return Err(Error::data("pool too small for a holdout"));
    }
    let n_valid = (n / 10).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(ctx.seed, "ppt-holdout"));
    order.shuffle(&mut rng);
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize], name: &str| -> Result<Dataset> {
        Dataset::new(
            format!("{}-{name}", ctx.pool.name),
            ctx.pool.n_classes,
            idx.iter().map(|&i| ctx.pool.examples[i].clone()).collect(),
        )
    };
    let train = pick(&train_idx, "ppt-train")?;
    let valid = pick(&valid_idx, "ppt-valid")?;
    let init =
        init_prompt(ctx.backbone, PromptInit::RandomNormal, subseed(ctx.seed, "ppt-init"));
    Ok(ppt_train(ctx.backbone, ctx.tok, ctx.verbalizer, &train, &valid, &init, &ctx.ppt)?.prompt)
}

/// Seeded uniform subsample, dataset order preserved.
fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    picked.sort_unstable();
    Dataset::new(
        format!("{}-n{n}", ds.name),
        ds.n_classes,
        picked.iter().map(|&i| ds.examples[i].clone()).collect(),
    )
}

/// Flat CSV view of a batch of eval reports, one row per report.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,dataset,seeds,mean,std,fingerprint\n");
    for r in reports {
        out.push_str(&csv_line(&report_cols(r)));
        out.push('\n');
    }
    out
}

fn report_cols(r: &EvalReport) -> Vec<String> {
    vec![
        r.method.clone(),
        r.dataset.clone(),
        r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
        r.mean.to_string(),
        r.std.to_string(),
        r.fingerprint.clone(),
    ]
}

fn methods_row(strategy: &str, r: &EvalReport, quality: Option<(f64, f64)>) -> String {
    let mut cols = report_cols(r);
    let fingerprint = cols.pop().unwrap();
    let (inertia, sil) = match quality {
        Some((i, s)) => (i.to_string(), s.to_string()),
        None => (String::new(), String::new()),
    };
    let mut fields = vec![strategy.to_string()];
    fields.append(&mut cols);
    fields.extend([inertia, sil, fingerprint]);
    csv_line(&fields)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
}
