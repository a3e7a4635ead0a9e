//! The per-step two-stage update, the learning-rate schedule and the
//! training loop.
//!
//! Each step runs one forward pass over queries and targets. Stage one fits
//! the estimators on detached copies of the path embeddings. Stage two binds
//! the updated estimators frozen and moves the model against the full
//! objective, reusing the same live embeddings.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Example;
use crate::miest::{estimator_loss, EstimatorParams};
use crate::nn::{bind, gradients};
use crate::objectives::{total_loss, BatchEmbeddings, LossBreakdown};
use crate::parallel::ModelParams;
use crate::tensor::{concat, DenseArray, Tape, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::TrainConfig;
use optim::AdamW;

/// Linear warmup from 0 to `peak_lr` over `[0, warmup_steps]`, then linear
/// decay to 0 at `total_steps`. The update of step `s` (1-based) uses `lr(s)`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> Result<f64> {
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step > t {
        return Err(Error::OutOfRange(format!("step {step} beyond total_steps {t}")));
    }
    let peak = config.peak_lr;
    if step <= w && w > 0 {
        return Ok(peak * step as f64 / w as f64);
    }
    Ok(peak * (t - step) as f64 / (t - w) as f64)
}

/// Everything a run needs to continue: parameters, optimizer moments and
/// the data-order RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelParams,
    pub estimators: EstimatorParams,
    pub opt_model: AdamW,
    pub opt_estimators: AdamW,
    /// Completed steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
    /// Current epoch permutation and the position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let model = ModelParams::init(&config.model(), seed)?;
        let estimators = EstimatorParams::init(config.num_paths, config.d_model, config.mim(), seed.wrapping_add(3));
        let opt = AdamW::new(config.optimizer());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            model,
            estimators,
            opt_model: opt.clone(),
            opt_estimators: opt,
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            config,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Mean estimator loss over the inner estimator updates; 0 for one path.
    pub loss_estimator: f64,
    /// Mean pairwise path cosine over the batch inputs; NaN for one path.
    pub path_cosine_mean: f64,
    pub grad_norm_model: f64,
    pub grad_norm_estimators: f64,
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_contrastive_agg,loss_contrastive_paths,loss_mim,loss_estimator,path_cosine_mean";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.step,
            m.lr,
            m.loss.total,
            m.loss.contrastive_agg,
            m.loss.contrastive_paths,
            m.loss.mim,
            m.loss_estimator,
            m.path_cosine_mean
        )
        .unwrap();
    }
    s
}

pub fn write_metrics_csv(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}

/// Point inside [`train_step_observed`] at which the observer is called.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Start,
    AfterEstimatorUpdate,
    AfterModelUpdate,
}

fn grad_norm(grads: &[Option<DenseArray>]) -> f64 {
    grads.iter().flatten().map(|g| g.values().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Mean over inputs of the mean pairwise cosine between path embeddings.
pub fn mean_path_cosine(paths: &[DenseArray]) -> Result<f64> {
    let n = paths.len();
    if n < 2 {
        return Err(Error::InvalidInput("path cosine needs at least two paths".into()));
    }
    let (rows, _) = paths[0].dims2()?;
    let mut total = 0.0;
    for r in 0..rows {
        for i in 0..n {
            for j in (i + 1)..n {
                total += cosine(paths[i].row(r), paths[j].row(r))?;
            }
        }
    }
    Ok(total / (rows * n * (n - 1) / 2) as f64)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn stack_sides<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    Ok(concat(&[a.detach(), b.detach()], 0)?)
}

pub fn train_step(state: &mut TrainState, batch: &[Example]) -> Result<StepMetrics> {
    train_step_observed(state, batch, &mut |_, _| {})
}

/// [`train_step`] with `observe` called at the start, between the stages
/// and at the end.
pub fn train_step_observed(
    state: &mut TrainState,
    batch: &[Example],
    observe: &mut dyn FnMut(Stage, &TrainState),
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput("a training batch needs at least two examples".into()));
    }
    let step = state.step + 1;
    let lr = lr_schedule(step, &state.config)?;
    let weights = state.config.loss_weights();
    observe(Stage::Start, state);

    let tape = Tape::new();
    let model = bind(&state.model, &tape, true);
    let queries: Vec<Vec<usize>> = batch.iter().map(|e| e.query.clone()).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.target.clone()).collect();
    let emb = BatchEmbeddings { queries: model.encode_batch(&queries)?, targets: model.encode_batch(&targets)? };
    let n = state.config.num_paths;

    // stage one: estimators on detached embeddings
    let mut loss_estimator = 0.0;
    let mut grad_norm_estimators = 0.0;
    if n > 1 {
        let detached: Vec<Var<'_>> = emb
            .queries
            .per_path
            .iter()
            .zip(&emb.targets.per_path)
            .map(|(q, t)| stack_sides(q, t))
            .collect::<Result<_>>()?;
        let inner = state.config.estimator_steps;
        for k in 0..inner {
            let live = bind(&state.estimators, &tape, true);
            let loss = estimator_loss(&detached, &live)?;
            if k > 0 {
                tape.reset_grads();
            }
            tape.backward(loss)?;
            if gradients(&model).iter().any(Option::is_some) {
                return Err(Error::Contract("estimator loss reached model parameters".into()));
            }
            let grads = gradients(&live);
            grad_norm_estimators = grad_norm(&grads);
            loss_estimator += loss.item()? / inner as f64;
            state.estimators = state.opt_estimators.update(&state.estimators, &grads, state.config.estimator_lr())?;
        }
    }
    observe(Stage::AfterEstimatorUpdate, state);

    // stage two: model against the frozen estimators
    let frozen = bind(&state.estimators, &tape, false);
    let (total, loss) = total_loss(&emb, &frozen, &weights)?;
    tape.reset_grads();
    tape.backward(total)?;
    let grads = gradients(&model);
    if gradients(&frozen).iter().any(Option::is_some) {
        return Err(Error::Contract("model loss reached estimator parameters".into()));
    }
    let grad_norm_model = grad_norm(&grads);
    state.model = state.opt_model.update(&state.model, &grads, lr)?;
    state.step = step;

    let path_cosine_mean = if n > 1 {
        let rows: Vec<DenseArray> = emb
            .queries
            .per_path
            .iter()
            .zip(&emb.targets.per_path)
            .map(|(q, t)| stack_sides(q, t).map(|v| v.to_array()))
            .collect::<Result<_>>()?;
        mean_path_cosine(&rows)?
    } else {
        f64::NAN
    };
    observe(Stage::AfterModelUpdate, state);
    Ok(StepMetrics { step, lr, loss, loss_estimator, path_cosine_mean, grad_norm_model, grad_norm_estimators })
}

/// Optional callbacks of [`fit`], each given the completed step count.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_eval: Option<HookFn<'a>>,
    pub on_checkpoint: Option<HookFn<'a>>,
}

pub type HookFn<'a> = &'a mut dyn FnMut(usize, &TrainState) -> Result<()>;

impl TrainState {
    /// Next `batch_size` example indices, reshuffling at each epoch boundary.
    fn next_batch(&mut self, examples: usize) -> Vec<usize> {
        let b = self.config.batch_size.min(examples);
        if self.order.len() != examples || self.cursor + b > self.order.len() {
            self.order = (0..examples).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }
}

/// Runs the remaining steps up to `total_steps`. `on_checkpoint` fires every
/// `checkpoint_every` steps and once at the end.
pub fn fit(state: &mut TrainState, data: &[Example], mut hooks: Hooks<'_>) -> Result<Vec<StepMetrics>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if data.len() < 2 && state.config.total_steps > state.step {
        return Err(Error::InvalidInput("training needs at least two examples".into()));
    }
    let total = state.config.total_steps;
    let mut metrics = Vec::with_capacity(total.saturating_sub(state.step));
    while state.step < total {
        let at = state.step + 1;
        let idx = state.next_batch(data.len());
        let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
        let m = train_step(state, &batch).map_err(|e| Error::AtStep { step: at, source: Box::new(e) })?;
        metrics.push(m);
        let every = |k: usize| k > 0 && state.step.is_multiple_of(k);
        if every(state.config.eval_every) {
            if let Some(f) = hooks.on_eval.as_mut() {
                f(state.step, state).map_err(|e| Error::AtStep { step: at, source: Box::new(e) })?;
            }
        }
        if every(state.config.checkpoint_every) && state.step < total {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                f(state.step, state).map_err(|e| Error::AtStep { step: at, source: Box::new(e) })?;
            }
        }
    }
    if let Some(f) = hooks.on_checkpoint.as_mut() {
        f(state.step, state).map_err(|e| Error::AtStep { step: state.step, source: Box::new(e) })?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests;
