//! Meta-learning of soft prompts over frozen backbones, plus the
//! pooled pre-training baseline. The outer loop treats each auxiliary
//! task as one term of a summed query loss evaluated at inner-adapted
//! prompts; in second-order mode the inner gradient step stays on the
//! record, so the single outer gradient differentiates through it.

mod maml;
mod ppt;

pub use maml::{inner_step, meta_train, outer_gradient, outer_step, MetaLogEntry, MetaState};
pub use ppt::{ppt_train, PptConfig, PptResult};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Example;
use crate::model::{apply_template, label_loss, predict, BackboneParams, TemplatedInput, Verbalizer};
use crate::taskgen::MetaTask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlMode {
    #[default]
    SecondOrder,
    FirstOrder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MamlConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    /// Support samples per task per outer step.
    pub m: usize,
    pub inner_steps: usize,
    pub mode: MamlMode,
    /// Query samples per task per outer step.
    pub batch_size: usize,
    pub max_outer_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub seed: u64,
    /// Apply the outer gradient as plain SGD instead of AdamW. Exists
    /// for closed-form verification; leave off for training.
    pub raw_sgd: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            alpha: 0.08,
            beta: 0.025,
            m: 4,
            inner_steps: 1,
            mode: MamlMode::SecondOrder,
            batch_size: 4,
            max_outer_steps: 20_000,
            eval_every: 50,
            patience: 6,
            seed: 0,
            raw_sgd: false,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::config("alpha must be non-negative"));
        }
        if self.beta <= 0.0 {
            return Err(Error::config("beta must be positive"));
        }
        if self.m == 0 || self.batch_size == 0 {
            return Err(Error::config("m and batch_size must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// What the meta trainer needs from a task set: a differentiable loss
/// on selected train examples and a validation accuracy. Implemented by
/// the real prompt/verbalizer objective and by toy objectives in tests.
pub trait MetaObjective {
    fn task_count(&self) -> usize;
    fn train_size(&self, task: usize) -> usize;
    /// Mean loss of prompt `p` on the given train examples of `task`.
    fn train_loss(&self, p: &Tensor, task: usize, idx: &[usize]) -> Result<Tensor>;
    /// Prediction accuracy of `p` on the task's validation split.
    fn val_accuracy(&self, p: &Tensor, task: usize) -> Result<f64>;
}

/// The production objective: templated task examples classified through
/// a frozen backbone and verbalizer with the prompt prepended.
pub struct PromptTasks<'a> {
    backbone: &'a BackboneParams,
    verbalizer: &'a Verbalizer,
    train: Vec<Vec<(TemplatedInput, usize)>>,
    val: Vec<Vec<(TemplatedInput, usize)>>,
}

impl<'a> PromptTasks<'a> {
    pub fn new(
        backbone: &'a BackboneParams,
        tok: &crate::model::Tokenizer,
        verbalizer: &'a Verbalizer,
        tasks: &[MetaTask],
    ) -> Result<PromptTasks<'a>> {
        if !backbone.frozen {
            return Err(Error::config("meta training requires a frozen backbone"));
        }
        if tasks.is_empty() {
            return Err(Error::data("no tasks"));
        }
        let prep = |exs: &[Example]| -> Result<Vec<(TemplatedInput, usize)>> {
            exs.iter()
                .map(|ex| {
                    let label = ex
                        .label
                        .ok_or_else(|| Error::data(format!("unlabeled example {:?}", ex.text)))?;
                    Ok((apply_template(&ex.text, tok, &backbone.config)?, label))
                })
                .collect()
        };
        let mut train = Vec::with_capacity(tasks.len());
        let mut val = Vec::with_capacity(tasks.len());
        for t in tasks {
            train.push(prep(&t.train)?);
            val.push(prep(&t.val)?);
        }
        Ok(PromptTasks { backbone, verbalizer, train, val })
    }
}

impl MetaObjective for PromptTasks<'_> {
    fn task_count(&self) -> usize {
        self.train.len()
    }

    fn train_size(&self, task: usize) -> usize {
        self.train[task].len()
    }

    fn train_loss(&self, p: &Tensor, task: usize, idx: &[usize]) -> Result<Tensor> {
        let batch: Vec<(&TemplatedInput, usize)> =
            idx.iter().map(|&i| (&self.train[task][i].0, self.train[task][i].1)).collect();
        label_loss(self.backbone, Some(p), self.verbalizer, &batch)
    }

    fn val_accuracy(&self, p: &Tensor, task: usize) -> Result<f64> {
        let split = &self.val[task];
        if split.is_empty() {
            return Err(Error::data(format!("task {task} has an empty validation split")));
        }
        let mut correct = 0usize;
        for (input, label) in split {
            if predict(self.backbone, Some(p), self.verbalizer, input)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / split.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{adamw_step, finite_diff_grad, grad, AdamWConfig, AdamWState, Tensor};
    use crate::corpus::{make_synthetic_benchmark, SynthSpec, SyntheticBenchmark};
    use crate::corpus::Dataset;
    use crate::model::{
        class_probs, init_prompt, pretrain_backbone, MlmConfig, ModelConfig, PromptInit,
        Tokenizer, DEFAULT_LABEL_WORDS,
    };
    use crate::taskgen::{make_tasks, split_random};

    /// Per-task diagonal quadratic 0.5 * sum_j a_j (p_j - c_j)^2. The
    /// example indices are ignored: every draw sees the same function, so
    /// closed forms are exact. Validation accuracy replays a script,
    /// which lets tests drive the stopping logic; the last value repeats.
    /// Scripted tests use a single task so the call order is obvious.
    struct Quadratics {
        tasks: Vec<(Vec<f64>, Vec<f64>)>,
        n_train: usize,
        script: RefCell<Vec<f64>>,
    }

    impl Quadratics {
        fn new(tasks: Vec<(Vec<f64>, Vec<f64>)>) -> Quadratics {
            Quadratics { tasks, n_train: 64, script: RefCell::new(vec![0.5]) }
        }

        fn with_script(self, accs: &[f64]) -> Quadratics {
            let mut rev = accs.to_vec();
            rev.reverse();
            Quadratics { script: RefCell::new(rev), ..self }
        }
    }

    impl MetaObjective for Quadratics {
        fn task_count(&self) -> usize {
            self.tasks.len()
        }

        fn train_size(&self, _task: usize) -> usize {
            self.n_train
        }

        fn train_loss(&self, p: &Tensor, task: usize, _idx: &[usize]) -> Result<Tensor> {
            let (a, c) = &self.tasks[task];
            let at = Tensor::constant(a.clone(), p.rows(), p.cols());
            let ct = Tensor::constant(c.clone(), p.rows(), p.cols());
            let d = p.sub(&ct);
            Ok(d.mul(&d).mul(&at).sum_all().scale(0.5))
        }

        fn val_accuracy(&self, _p: &Tensor, _task: usize) -> Result<f64> {
            let mut s = self.script.borrow_mut();
            Ok(if s.len() > 1 { s.pop().unwrap() } else { s[0] })
        }
    }

    /// Hand-derived outer gradient for the diagonal quadratic with one
    /// inner step: P' = P - alpha*a*(P-c), query gradient a*(P'-c), and
    /// the second-order correction multiplies by (1 - alpha*a).
    fn quad_outer_closed_form(
        p: &[f64],
        tasks: &[(Vec<f64>, Vec<f64>)],
        alpha: f64,
        second: bool,
    ) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        for (a, c) in tasks {
            for j in 0..p.len() {
                let adapted = p[j] - alpha * a[j] * (p[j] - c[j]);
                let q = a[j] * (adapted - c[j]);
                g[j] += if second { (1.0 - alpha * a[j]) * q } else { q };
            }
        }
        g
    }

    fn quad_pair() -> Vec<(Vec<f64>, Vec<f64>)> {
        vec![
            (vec![1.0, 3.0], vec![0.4, -0.2]),
            (vec![2.0, 0.5], vec![-1.0, 0.8]),
        ]
    }

    fn micro_model() -> (Tokenizer, BackboneParams, Verbalizer) {
        let texts = [
            "the soup was great today",
            "a terrible cold dinner",
            "the bread was bad",
            "what a good quiet film",
            "maybe the plot was fine",
        ];
        let tok = Tokenizer::build(&texts, 64, &DEFAULT_LABEL_WORDS.to_vec()).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            prompt_len: 2,
        };
        let bb = BackboneParams::init(&cfg, tok.vocab_size(), 11).unwrap().freeze();
        let words: Vec<String> = DEFAULT_LABEL_WORDS.iter().map(|s| s.to_string()).collect();
        let verb = Verbalizer::new(&tok, &words).unwrap();
        (tok, bb, verb)
    }

    fn ex(text: &str, label: usize) -> Example {
        Example { text: text.to_string(), label: Some(label) }
    }

    fn micro_tasks() -> Vec<MetaTask> {
        vec![
            MetaTask {
                task_id: 0,
                origin: "unit".into(),
                train: vec![
                    ex("the soup was great today", 4),
                    ex("a terrible cold dinner", 0),
                    ex("the bread was bad", 1),
                    ex("what a good quiet film", 3),
                    ex("maybe the plot was fine", 2),
                    ex("the soup was bad", 1),
                ],
                val: vec![ex("the bread was great today", 4), ex("a terrible film", 0)],
            },
            MetaTask {
                task_id: 1,
                origin: "unit".into(),
                train: vec![
                    ex("a good quiet dinner", 3),
                    ex("the film was terrible", 0),
                    ex("maybe a bad plot", 1),
                    ex("the soup was good", 3),
                    ex("what a great film", 4),
                ],
                val: vec![ex("the dinner was good", 3)],
            },
        ]
    }

    #[test]
    fn zero_alpha_inner_step_returns_the_prompt_unchanged() {
        let obj = Quadratics::new(quad_pair());
        let p = Tensor::param(vec![0.3, -0.7], 1, 2);
        let cfg = MamlConfig { alpha: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (adapted, support) = inner_step(&p, &obj, 0, &cfg, &mut rng).unwrap();
        assert!(support.is_empty());
        assert_eq!(adapted.data(), p.data());
    }

    #[test]
    fn inner_step_is_one_explicit_gradient_step() {
        // a = 1 everywhere, so P' = P - alpha * (P - c).
        let obj = Quadratics::new(vec![(vec![1.0, 1.0], vec![0.5, -0.5])]);
        let p = Tensor::param(vec![1.0, 2.0], 1, 2);
        let before = p.to_vec();
        let cfg = MamlConfig { alpha: 0.1, m: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (adapted, support) = inner_step(&p, &obj, 0, &cfg, &mut rng).unwrap();
        assert_eq!(support.len(), 4);
        assert!(support.windows(2).all(|w| w[0] < w[1]), "sorted, distinct");
        assert!(support.iter().all(|&i| i < obj.train_size(0)));
        for (j, (&got, &x)) in adapted.data().iter().zip(&before).enumerate() {
            let c = [0.5, -0.5][j];
            let want = x - 0.1 * (x - c);
            assert!((got - want).abs() < 1e-15, "coord {j}: {got} vs {want}");
        }
        assert_eq!(p.to_vec(), before, "input prompt must not move");
    }

    #[test]
    fn inner_step_unrolls_multiple_steps() {
        // Two steps of P <- P - alpha*a*(P-c) give
        // P'' = c + (1 - alpha*a)^2 (P - c).
        let a = [2.0, 0.5];
        let c = [0.4, -0.1];
        let obj = Quadratics::new(vec![(a.to_vec(), c.to_vec())]);
        let p = Tensor::param(vec![1.0, -1.0], 1, 2);
        let cfg = MamlConfig { alpha: 0.1, inner_steps: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (adapted, _) = inner_step(&p, &obj, 0, &cfg, &mut rng).unwrap();
        for j in 0..2 {
            let shrink = (1.0 - 0.1 * a[j]).powi(2);
            let want = c[j] + shrink * (p.data()[j] - c[j]);
            assert!((adapted.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_step_rejects_a_task_smaller_than_m() {
        let obj = Quadratics { n_train: 2, ..Quadratics::new(quad_pair()) };
        let p = Tensor::param(vec![0.0, 0.0], 1, 2);
        let cfg = MamlConfig { m: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = inner_step(&p, &obj, 0, &cfg, &mut rng).unwrap_err();
        assert!(err.to_string().contains("train split has 2"), "{err}");
    }

    #[test]
    fn adaptation_displacement_is_alpha_times_gradient_norm() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let p = init_prompt(&bb, PromptInit::RandomNormal, 7);
        let cfg = MamlConfig { alpha: 0.05, m: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (adapted, support) = inner_step(&p, &obj, 0, &cfg, &mut rng).unwrap();

        // Recompute the same support gradient independently.
        let loss = obj.train_loss(&p, 0, &support).unwrap();
        let g = grad(&loss, &[p.clone()], false).unwrap();
        let gnorm: f64 = g[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let moved: f64 = adapted
            .data()
            .iter()
            .zip(p.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((moved - 0.05 * gnorm).abs() < 1e-12, "{moved} vs {}", 0.05 * gnorm);
    }

    #[test]
    fn outer_gradient_matches_the_quadratic_closed_form() {
        let tasks = quad_pair();
        let obj = Quadratics::new(tasks.clone());
        let p = Tensor::param(vec![0.9, -0.6], 1, 2);
        let s0 = |x: &Tensor| obj.train_loss(x, 0, &[]);
        let q0 = |x: &Tensor| obj.train_loss(x, 0, &[]);
        let s1 = |x: &Tensor| obj.train_loss(x, 1, &[]);
        let q1 = |x: &Tensor| obj.train_loss(x, 1, &[]);
        let closures: Vec<(&dyn Fn(&Tensor) -> Result<Tensor>, &dyn Fn(&Tensor) -> Result<Tensor>)> =
            vec![(&s0, &q0), (&s1, &q1)];

        for (mode, second) in [(MamlMode::SecondOrder, true), (MamlMode::FirstOrder, false)] {
            let (g, losses) = outer_gradient(&p, &closures, 0.08, 1, mode).unwrap();
            let want = quad_outer_closed_form(p.data(), &tasks, 0.08, second);
            for (got, want) in g.data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "{mode:?}: {got} vs {want}");
            }
            assert_eq!(losses.len(), 2);
        }
    }

    #[test]
    fn second_order_outer_gradient_matches_finite_differences() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let p = init_prompt(&bb, PromptInit::RandomNormal, 9);
        let alpha = 0.08;

        let s0 = |x: &Tensor| obj.train_loss(x, 0, &[0, 1, 4]);
        let q0 = |x: &Tensor| obj.train_loss(x, 0, &[2, 3]);
        let s1 = |x: &Tensor| obj.train_loss(x, 1, &[1, 2]);
        let q1 = |x: &Tensor| obj.train_loss(x, 1, &[0, 3]);
        let closures: Vec<(&dyn Fn(&Tensor) -> Result<Tensor>, &dyn Fn(&Tensor) -> Result<Tensor>)> =
            vec![(&s0, &q0), (&s1, &q1)];

        let (g, _) = outer_gradient(&p, &closures, alpha, 1, MamlMode::SecondOrder).unwrap();

        // The probed objective recomputes the whole unrolled pipeline at
        // perturbed prompts; only loss values are needed, so the inner
        // gradient runs without graph creation.
        let fd = finite_diff_grad(
            |x| {
                let px = x.to_param();
                let mut total: Option<Tensor> = None;
                for (s, q) in &closures {
                    let sl = s(&px)?;
                    let gi = grad(&sl, &[px.clone()], false)?;
                    let adapted = px.sub(&gi[0].scale(alpha));
                    let ql = q(&adapted)?;
                    total = Some(match total {
                        Some(t) => t.add(&ql),
                        None => ql,
                    });
                }
                Ok(total.unwrap())
            },
            &p,
            1e-4,
        )
        .unwrap();

        let scale = g.data().iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (i, (got, want)) in g.data().iter().zip(fd.data()).enumerate() {
            assert!(
                (got - want).abs() / scale < 1e-4,
                "entry {i}: analytic {got} vs fd {want}"
            );
        }
    }

    #[test]
    fn first_and_second_order_gap_shrinks_linearly_with_alpha() {
        let tasks = quad_pair();
        let obj = Quadratics::new(tasks);
        let p = Tensor::param(vec![0.9, -0.6], 1, 2);
        let s0 = |x: &Tensor| obj.train_loss(x, 0, &[]);
        let s1 = |x: &Tensor| obj.train_loss(x, 1, &[]);
        let closures: Vec<(&dyn Fn(&Tensor) -> Result<Tensor>, &dyn Fn(&Tensor) -> Result<Tensor>)> =
            vec![(&s0, &s0), (&s1, &s1)];

        let gap = |alpha: f64| {
            let (g2, _) = outer_gradient(&p, &closures, alpha, 1, MamlMode::SecondOrder).unwrap();
            let (g1, _) = outer_gradient(&p, &closures, alpha, 1, MamlMode::FirstOrder).unwrap();
            g2.data()
                .iter()
                .zip(g1.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = gap(0.02) / gap(0.01);
        assert!((1.5..=2.5).contains(&ratio), "gap ratio {ratio}");
    }

    #[test]
    fn zero_alpha_single_task_outer_gradient_is_the_plain_gradient() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let p = init_prompt(&bb, PromptInit::RandomNormal, 13);
        let q = |x: &Tensor| obj.train_loss(x, 0, &[1, 3, 5]);
        let closures: Vec<(&dyn Fn(&Tensor) -> Result<Tensor>, &dyn Fn(&Tensor) -> Result<Tensor>)> =
            vec![(&q, &q)];
        let (g, _) = outer_gradient(&p, &closures, 0.0, 1, MamlMode::SecondOrder).unwrap();

        let loss = obj.train_loss(&p, 0, &[1, 3, 5]).unwrap();
        let plain = grad(&loss, &[p.clone()], false).unwrap();
        for (a, b) in g.data().iter().zip(plain[0].data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn outer_step_with_one_task_and_zero_alpha_is_one_adamw_step() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks[..1]).unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 2);
        let cfg = MamlConfig { alpha: 0.0, batch_size: 3, seed: 9, ..Default::default() };

        let mut state = MetaState::new(&init, &cfg);
        outer_step(&mut state, &obj, &cfg).unwrap();
        assert_eq!(state.log[0].replacement_draws, 0);

        // With alpha = 0 no support is drawn, so the first rng use is the
        // query draw; replay it and take the same AdamW step by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut query: Vec<usize> =
            rand::seq::index::sample(&mut rng, obj.train_size(0), 3).into_vec();
        query.sort_unstable();

        let p0 = Tensor::param(init.to_vec(), init.rows(), init.cols());
        let loss = obj.train_loss(&p0, 0, &query).unwrap();
        let g = grad(&loss, &[p0.clone()], false).unwrap();
        let mut opt = AdamWState::new();
        let manual = adamw_step(&[p0], &g, &mut opt, &AdamWConfig::with_lr(cfg.beta), cfg.beta)
            .unwrap()
            .remove(0);
        assert_eq!(state.prompt.data(), manual.data());
    }

    #[test]
    fn outer_step_replaces_the_prompt_without_mutating_anything() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 3);
        let init_data = init.to_vec();
        let bb_hash = bb.content_hash();
        let cfg = MamlConfig { alpha: 0.08, m: 2, batch_size: 2, seed: 1, ..Default::default() };

        let mut state = MetaState::new(&init, &cfg);
        outer_step(&mut state, &obj, &cfg).unwrap();
        let first = state.prompt.clone();
        let first_data = first.to_vec();
        outer_step(&mut state, &obj, &cfg).unwrap();

        assert_eq!(init.to_vec(), init_data, "caller's init tensor moved");
        assert_eq!(first.to_vec(), first_data, "previous prompt was mutated in place");
        assert_eq!(bb.content_hash(), bb_hash, "frozen backbone changed");
        assert_ne!(state.prompt.data(), first_data.as_slice(), "step had no effect");
    }

    #[test]
    fn patience_counts_evaluations_without_improvement() {
        // Constant accuracy: the first evaluation sets the best, the
        // second fails to improve, and patience 1 stops the run there.
        let obj = Quadratics::new(vec![(vec![1.0, 1.0], vec![0.0, 0.0])]);
        let p = Tensor::param(vec![0.5, 0.5], 1, 2);
        let cfg = MamlConfig {
            alpha: 0.05,
            beta: 0.01,
            m: 2,
            batch_size: 2,
            eval_every: 1,
            patience: 1,
            max_outer_steps: 100,
            ..Default::default()
        };
        let (_, state) = meta_train(&obj, &p, &cfg).unwrap();
        assert_eq!(state.step, 2);
        assert!(state.stopped_early);
        assert_eq!(state.log.iter().filter(|e| e.val_acc.is_some()).count(), 2);
    }

    #[test]
    fn meta_train_returns_the_best_checkpoint_not_the_last() {
        let mk = || {
            Quadratics::new(vec![(vec![1.0, 2.0], vec![0.3, -0.3])])
                .with_script(&[0.5, 0.9, 0.3, 0.3])
        };
        let p = Tensor::param(vec![1.0, -1.0], 1, 2);
        let cfg = MamlConfig {
            alpha: 0.05,
            beta: 0.01,
            m: 2,
            batch_size: 2,
            eval_every: 1,
            patience: 2,
            max_outer_steps: 100,
            seed: 21,
            ..Default::default()
        };
        let (best, state) = meta_train(&mk(), &p, &cfg).unwrap();
        assert_eq!(state.step, 4, "two bad evaluations after the peak");
        assert_eq!(state.best_acc, 0.9);
        assert_ne!(best.data(), state.prompt.data(), "training moved past the peak");

        // The best checkpoint is the prompt as of step 2; a fresh run cut
        // off there must land on it exactly.
        let cut = MamlConfig { max_outer_steps: 2, ..cfg };
        let (_, state2) = meta_train(&mk(), &p, &cut).unwrap();
        assert_eq!(best.data(), state2.prompt.data());
    }

    #[test]
    fn meta_train_is_seed_deterministic() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 5);
        let cfg = MamlConfig {
            alpha: 0.05,
            beta: 0.01,
            m: 2,
            batch_size: 2,
            eval_every: 2,
            patience: 6,
            max_outer_steps: 4,
            seed: 5,
            ..Default::default()
        };
        let (a, _) = meta_train(&obj, &init, &cfg).unwrap();
        let (b, _) = meta_train(&obj, &init, &cfg).unwrap();
        assert_eq!(a.data(), b.data());

        let other = MamlConfig { seed: 6, ..cfg };
        let (c, _) = meta_train(&obj, &init, &other).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn first_order_mode_takes_a_different_trajectory() {
        let (tok, bb, verb) = micro_model();
        let tasks = micro_tasks();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 6);
        let cfg = MamlConfig {
            alpha: 0.08,
            m: 2,
            batch_size: 2,
            eval_every: 10,
            max_outer_steps: 3,
            seed: 8,
            ..Default::default()
        };
        let (_, second) = meta_train(&obj, &init, &cfg).unwrap();
        let first_cfg = MamlConfig { mode: MamlMode::FirstOrder, ..cfg };
        let (_, first) = meta_train(&obj, &init, &first_cfg).unwrap();
        assert_ne!(second.prompt.data(), first.prompt.data());
    }

    /// Small synthetic benchmark with an MLM-pretrained backbone, the
    /// setting where prompts have real leverage.
    fn pretrained_fixture(seed: u64) -> (SyntheticBenchmark, Tokenizer, BackboneParams, Verbalizer)
    {
        let spec = SynthSpec {
            annotator_examples: 40,
            pretrain_examples: 1200,
            downstream_examples: 60,
            mlm_extra_per_domain: 40,
            mlm_class_runs: 1200,
            ..SynthSpec::desk_default()
        };
        let bench = make_synthetic_benchmark(&spec, seed).unwrap();
        let tok = Tokenizer::build(&bench.mlm_corpus, 256, &DEFAULT_LABEL_WORDS.to_vec()).unwrap();
        let cfg = ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 32,
            prompt_len: 4,
        };
        let seqs: Vec<Vec<usize>> = bench.mlm_corpus.iter().map(|t| tok.encode(t)).collect();
        let mlm = MlmConfig { steps: 4500, mask_prob: 0.25, seed: 7, ..Default::default() };
        let (bb, _) = pretrain_backbone(&seqs, &cfg, tok.vocab_size(), &mlm).unwrap();
        let words: Vec<String> = DEFAULT_LABEL_WORDS.iter().map(|s| s.to_string()).collect();
        let verb = Verbalizer::new(&tok, &words).unwrap();
        (bench, tok, bb, verb)
    }

    #[test]
    fn meta_training_recovers_from_a_disruptive_init_prompt() {
        let (bench, tok, bb, verb) = pretrained_fixture(0);
        let assign = split_random(&bench.pretrain, 2, 7).unwrap();
        let (tasks, _) = make_tasks(&bench.pretrain, &assign, "random", 0.25, 8, 7, None).unwrap();
        let obj = PromptTasks::new(&bb, &tok, &verb, &tasks).unwrap();

        // A prompt at embedding scale leaves the backbone's zero-shot
        // behavior intact, which this backbone already aces. Start from
        // a prompt 25x that scale, large enough to wreck the readout,
        // and require meta-training to climb back.
        let (plen, d) = (bb.config.prompt_len, bb.config.d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Tensor::param(crate::util::randn_vec(&mut rng, plen * d, 0.5), plen, d);

        let mut init_acc = 0.0;
        for t in 0..obj.task_count() {
            init_acc += obj.val_accuracy(&init, t).unwrap();
        }
        init_acc /= obj.task_count() as f64;
        assert!(init_acc < 0.7, "init prompt is not disruptive, acc {init_acc}");

        let cfg = MamlConfig {
            beta: 0.05,
            max_outer_steps: 400,
            eval_every: 20,
            patience: 10,
            seed: 2,
            ..Default::default()
        };
        let (_, state) = meta_train(&obj, &init, &cfg).unwrap();
        assert!(
            state.best_acc > init_acc + 0.15,
            "meta {} vs disruptive init {}",
            state.best_acc,
            init_acc
        );
        // The basin is sticky: oversized prompt rows keep soaking up
        // attention, so full recovery is slow. Improvement is the claim;
        // the floor just pins the observed level against regression.
        assert!(state.best_acc > 0.6, "meta only reached {}", state.best_acc);
    }

    #[test]
    fn ppt_is_meta_training_with_one_task_and_zero_alpha() {
        let (tok, bb, verb) = micro_model();
        let pool = Dataset::new(
            "pool",
            5,
            vec![
                ex("the soup was great today", 4),
                ex("a terrible cold dinner", 0),
                ex("the bread was bad", 1),
                ex("what a good quiet film", 3),
                ex("maybe the plot was fine", 2),
                ex("the soup was bad", 1),
            ],
        )
        .unwrap();
        let valid = Dataset::new(
            "valid",
            5,
            vec![ex("the bread was great today", 4), ex("a terrible film", 0), ex("the dinner was good", 3)],
        )
        .unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 4);

        // One batch per epoch covers the whole pool, so both sides see
        // the identical example order every step.
        let pcfg = PptConfig {
            lr: 0.025,
            batch_size: pool.len(),
            max_epochs: 5,
            warmup: 0,
            patience: 10,
            seed: 1,
        };
        let ppt = ppt_train(&bb, &tok, &verb, &pool, &valid, &init, &pcfg).unwrap();

        let task = MetaTask {
            task_id: 0,
            origin: "pool".into(),
            train: pool.examples.clone(),
            val: valid.examples.clone(),
        };
        let obj = PromptTasks::new(&bb, &tok, &verb, std::slice::from_ref(&task)).unwrap();
        let mcfg = MamlConfig {
            alpha: 0.0,
            beta: 0.025,
            batch_size: pool.len(),
            eval_every: 1,
            patience: 10,
            max_outer_steps: 5,
            seed: 1,
            ..Default::default()
        };
        let (_, state) = meta_train(&obj, &init, &mcfg).unwrap();

        assert_eq!(state.prompt.data(), ppt.last.data(), "trajectories diverged");
        let meta_accs: Vec<f64> = state.log.iter().filter_map(|e| e.val_acc).collect();
        assert_eq!(meta_accs, ppt.curve);
    }

    #[test]
    fn ppt_on_a_one_class_pool_drives_that_class_probability_up() {
        let (bench, tok, bb, verb) = pretrained_fixture(1);
        let of_class = |label: usize| {
            bench
                .pretrain
                .examples
                .iter()
                .filter(move |e| e.label == Some(label))
                .cloned()
        };
        let pool: Vec<Example> = of_class(3).take(24).collect();
        let valid: Vec<Example> = of_class(3).skip(24).take(6).collect();
        let held: Vec<String> = of_class(3).skip(30).take(6).map(|e| e.text).collect();
        assert_eq!((pool.len(), valid.len(), held.len()), (24, 6, 6));
        let pool = Dataset::new("one-class", 5, pool).unwrap();
        let valid = Dataset::new("one-class-valid", 5, valid).unwrap();

        let mean_p3 = |prompt: &Tensor| -> f64 {
            let mut total = 0.0;
            for text in &held {
                let input = apply_template(text, &tok, &bb.config).unwrap();
                total += class_probs(&bb, Some(prompt), &verb, &input).unwrap()[3];
            }
            total / held.len() as f64
        };

        let init = init_prompt(&bb, PromptInit::RandomNormal, 2);
        let before = mean_p3(&init);
        let cfg = PptConfig {
            lr: 0.05,
            batch_size: 4,
            max_epochs: 40,
            warmup: 5,
            patience: 50,
            seed: 0,
        };
        let res = ppt_train(&bb, &tok, &verb, &pool, &valid, &init, &cfg).unwrap();
        let after = mean_p3(&res.last);
        assert!(after > before, "{after} vs {before}");
        assert!(after > 0.8, "held-out class probability only reached {after}");
    }

    #[test]
    fn ppt_rejects_bad_inputs() {
        let (tok, bb, verb) = micro_model();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 0);
        let pool = Dataset::new("pool", 5, vec![ex("the soup was bad", 1)]).unwrap();
        let empty = Dataset::new("empty", 5, vec![]).unwrap();
        let cfg = PptConfig::default();

        assert!(ppt_train(&bb, &tok, &verb, &empty, &pool, &init, &cfg).is_err());
        assert!(ppt_train(&bb, &tok, &verb, &pool, &empty, &init, &cfg).is_err());

        let unlabeled = Dataset::new(
            "open",
            5,
            vec![Example { text: "the soup was bad".into(), label: None }],
        )
        .unwrap();
        assert!(ppt_train(&bb, &tok, &verb, &unlabeled, &pool, &init, &cfg).is_err());

        let thawed = bb.thawed_copy();
        let err = ppt_train(&thawed, &tok, &verb, &pool, &pool, &init, &cfg).unwrap_err();
        assert!(err.to_string().contains("frozen"), "{err}");
    }

    #[test]
    fn ppt_is_seed_deterministic() {
        let (tok, bb, verb) = micro_model();
        let pool = Dataset::new(
            "pool",
            5,
            vec![
                ex("the soup was great today", 4),
                ex("a terrible cold dinner", 0),
                ex("the bread was bad", 1),
                ex("what a good quiet film", 3),
                ex("maybe the plot was fine", 2),
                ex("the soup was bad", 1),
            ],
        )
        .unwrap();
        let valid =
            Dataset::new("valid", 5, vec![ex("the bread was great today", 4)]).unwrap();
        let init = init_prompt(&bb, PromptInit::RandomNormal, 3);
        let cfg = PptConfig { max_epochs: 2, ..Default::default() };
        let a = ppt_train(&bb, &tok, &verb, &pool, &valid, &init, &cfg).unwrap();
        let b = ppt_train(&bb, &tok, &verb, &pool, &valid, &init, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.last.data(), b.last.data());
    }

    #[test]
    fn config_validation_and_partial_deserialization() {
        assert!(MamlConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { m: 0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { inner_steps: 0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { eval_every: 0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(MamlConfig::default().validate().is_ok());

        let cfg: MamlConfig =
            serde_json::from_str(r#"{"alpha": 0.0, "mode": "first_order"}"#).unwrap();
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.mode, MamlMode::FirstOrder);
        assert_eq!(cfg.beta, 0.025);
        assert_eq!(cfg.max_outer_steps, 20_000);
        assert!(serde_json::from_str::<MamlConfig>(r#"{"alphaa": 1.0}"#).is_err());
    }
}
