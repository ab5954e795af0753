use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MamlConfig, MamlMode, MetaObjective};
use crate::autodiff::{adamw_step, grad, AdamWConfig, AdamWState, Tensor};
use crate::{Error, Result};

/// One inner adaptation: draw `cfg.m` support examples and take
/// `cfg.inner_steps` gradient steps at learning rate alpha. The input
/// prompt is never touched; the adapted prompt is a fresh tensor.
///
/// In second-order mode the inner gradient is itself recorded, so a later
/// gradient of a loss at the adapted prompt differentiates through the
/// adaptation. In first-order mode the inner gradient is a constant and
/// the adapted prompt depends on the original only through an identity.
///
/// Alpha of zero is the exact degeneracy: no support is drawn and the
/// returned prompt is the input itself.
pub fn inner_step<O: MetaObjective + ?Sized>(
    p: &Tensor,
    obj: &O,
    task: usize,
    cfg: &MamlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if cfg.alpha == 0.0 {
        return Ok((p.clone(), Vec::new()));
    }
    let n = obj.train_size(task);
    if n < cfg.m {
        return Err(Error::data(format!(
            "task {task}: train split has {n} examples, need at least m = {}",
            cfg.m
        )));
    }
    let mut support: Vec<usize> = rand::seq::index::sample(rng, n, cfg.m).into_vec();
    support.sort_unstable();

    let second_order = cfg.mode == MamlMode::SecondOrder;
    let mut cur = p.clone();
    for _ in 0..cfg.inner_steps {
        let loss = obj.train_loss(&cur, task, &support)?;
        let g = grad(&loss, &[cur.clone()], second_order)?;
        cur = cur.sub(&g[0].scale(cfg.alpha));
    }
    Ok((cur, support))
}

/// MAML outer gradient for a set of tasks given directly as loss
/// closures, one (support, query) pair per task. Returns the gradient of
/// the summed query loss at the adapted prompts with respect to `p`,
/// along with the per-task query losses.
///
/// This is the mathematical core with no sampling in it, which is what
/// the closed-form and finite-difference checks exercise.
#[allow(clippy::type_complexity)]
pub fn outer_gradient(
    p: &Tensor,
    tasks: &[(
        &dyn Fn(&Tensor) -> Result<Tensor>,
        &dyn Fn(&Tensor) -> Result<Tensor>,
    )],
    alpha: f64,
    inner_steps: usize,
    mode: MamlMode,
) -> Result<(Tensor, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::data("outer_gradient: no tasks"));
    }
    let second_order = mode == MamlMode::SecondOrder;
    let mut total: Option<Tensor> = None;
    let mut losses = Vec::with_capacity(tasks.len());
    for (support, query) in tasks {
        let mut cur = p.clone();
        if alpha != 0.0 {
            for _ in 0..inner_steps {
                let sl = support(&cur)?;
                let g = grad(&sl, &[cur.clone()], second_order)?;
                cur = cur.sub(&g[0].scale(alpha));
            }
        }
        let ql = query(&cur)?;
        losses.push(ql.item());
        total = Some(match total {
            Some(t) => t.add(&ql),
            None => ql,
        });
    }
    let g = grad(&total.unwrap(), &[p.clone()], false)?;
    Ok((g.into_iter().next().unwrap(), losses))
}

/// Everything one meta-training run carries between outer steps.
pub struct MetaState {
    pub prompt: Tensor,
    pub step: u64,
    pub opt: AdamWState,
    pub best_acc: f64,
    pub best_prompt: Tensor,
    pub bad_evals: usize,
    pub stopped_early: bool,
    pub log: Vec<MetaLogEntry>,
    rng: ChaCha8Rng,
}

impl MetaState {
    pub fn new(init: &Tensor, cfg: &MamlConfig) -> MetaState {
        let prompt = Tensor::param(init.to_vec(), init.rows(), init.cols());
        MetaState {
            best_prompt: prompt.clone(),
            prompt,
            step: 0,
            opt: AdamWState::new(),
            best_acc: f64::NEG_INFINITY,
            bad_evals: 0,
            stopped_early: false,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaLogEntry {
    pub step: u64,
    pub task_losses: Vec<f64>,
    pub grad_norm: f64,
    /// How many tasks had to draw their query batch with replacement
    /// because the train split could not supply a disjoint one.
    pub replacement_draws: usize,
    /// Mean validation accuracy, present on evaluation steps.
    pub val_acc: Option<f64>,
}

/// Query batch for one task: disjoint from the support batch when the
/// split is large enough, otherwise drawn with replacement from the whole
/// split and counted in `replacement`.
fn draw_query(
    n: usize,
    support: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    replacement: &mut usize,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::data("draw_query: empty train split"));
    }
    let rest: Vec<usize> = (0..n).filter(|i| !support.contains(i)).collect();
    let mut idx = if rest.len() >= batch_size {
        rand::seq::index::sample(rng, rest.len(), batch_size)
            .into_iter()
            .map(|i| rest[i])
            .collect::<Vec<usize>>()
    } else {
        *replacement += 1;
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

/// One outer step: adapt on every task in id order, sum the query losses
/// at the adapted prompts, take a single gradient with respect to the
/// current prompt and apply it (AdamW, or plain SGD under `raw_sgd`).
pub fn outer_step<O: MetaObjective + ?Sized>(
    state: &mut MetaState,
    obj: &O,
    cfg: &MamlConfig,
) -> Result<()> {
    let k = obj.task_count();
    if k == 0 {
        return Err(Error::data("outer_step: no tasks"));
    }
    let mut total: Option<Tensor> = None;
    let mut task_losses = Vec::with_capacity(k);
    let mut replacement = 0usize;
    for task in 0..k {
        let (adapted, support) = inner_step(&state.prompt, obj, task, cfg, &mut state.rng)?;
        let query = draw_query(
            obj.train_size(task),
            &support,
            cfg.batch_size,
            &mut state.rng,
            &mut replacement,
        )?;
        let ql = obj.train_loss(&adapted, task, &query)?;
        task_losses.push(ql.item());
        total = Some(match total {
            Some(t) => t.add(&ql),
            None => ql,
        });
    }
    let g = grad(&total.unwrap(), &[state.prompt.clone()], false)?
        .into_iter()
        .next()
        .unwrap();
    let grad_norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();

    state.prompt = if cfg.raw_sgd {
        let data: Vec<f64> = state
            .prompt
            .data()
            .iter()
            .zip(g.data())
            .map(|(p, gv)| p - cfg.beta * gv)
            .collect();
        Tensor::param(data, state.prompt.rows(), state.prompt.cols())
    } else {
        let opt_cfg = AdamWConfig::with_lr(cfg.beta);
        adamw_step(&[state.prompt.clone()], &[g], &mut state.opt, &opt_cfg, cfg.beta)?
            .into_iter()
            .next()
            .unwrap()
    };
    state.step += 1;
    state.log.push(MetaLogEntry {
        step: state.step,
        task_losses,
        grad_norm,
        replacement_draws: replacement,
        val_acc: None,
    });
    Ok(())
}

/// Meta-trains a prompt over the task set. Every `eval_every` outer steps
/// the mean validation accuracy across tasks is computed; the best prompt
/// is kept and training stops after `patience` evaluations without
/// improvement. Returns the best prompt and the full state with its log.
pub fn meta_train<O: MetaObjective + ?Sized>(
    obj: &O,
    init: &Tensor,
    cfg: &MamlConfig,
) -> Result<(Tensor, MetaState)> {
    cfg.validate()?;
    if obj.task_count() == 0 {
        return Err(Error::data("meta_train: no tasks"));
    }
    let mut state = MetaState::new(init, cfg);
    while state.step < cfg.max_outer_steps {
        outer_step(&mut state, obj, cfg)?;
        if state.step % cfg.eval_every == 0 {
            let k = obj.task_count();
            let mut acc = 0.0;
            for task in 0..k {
                acc += obj.val_accuracy(&state.prompt, task)?;
            }
            acc /= k as f64;
            state.log.last_mut().unwrap().val_acc = Some(acc);
            if acc > state.best_acc {
                state.best_acc = acc;
                state.best_prompt = state.prompt.clone();
                state.bad_evals = 0;
            } else {
                state.bad_evals += 1;
                if state.bad_evals >= cfg.patience {
                    state.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok((state.best_prompt.clone(), state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_avoids_the_support_batch_when_the_split_allows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let support = [0usize, 2, 4, 6];
        for _ in 0..50 {
            let mut rep = 0;
            let q = draw_query(8, &support, 4, &mut rng, &mut rep).unwrap();
            assert_eq!(rep, 0);
            assert_eq!(q, vec![1, 3, 5, 7], "only four indices remain");
        }
    }

    #[test]
    fn query_falls_back_to_replacement_on_small_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rep = 0;
        let q = draw_query(4, &[0, 1, 2, 3], 2, &mut rng, &mut rep).unwrap();
        assert_eq!(rep, 1);
        assert_eq!(q.len(), 2);
        assert!(q.iter().all(|&i| i < 4));
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "sorted, repeats allowed");

        rep = 0;
        let q = draw_query(5, &[0, 1], 4, &mut rng, &mut rep).unwrap();
        assert_eq!(rep, 1, "three leftovers cannot fill a batch of four");
        assert_eq!(q.len(), 4);

        assert!(draw_query(0, &[], 2, &mut rng, &mut rep).is_err());
    }

    #[test]
    fn query_without_support_is_a_plain_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rep = 0;
        let q = draw_query(6, &[], 6, &mut rng, &mut rep).unwrap();
        assert_eq!(rep, 0);
        assert_eq!(q, vec![0, 1, 2, 3, 4, 5]);
    }
}
