//! Variational conditional-Gaussian estimators and the CLUB mutual
//! information terms built on them.
//!
//! `q(y | x) = N(y | μ(x), diag(exp(logvar(x))))`. The `-d/2 · ln 2π`
//! constant of the Gaussian log-density is dropped everywhere: it cancels in
//! the positive-minus-negative difference and carries no gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{bind, bind_leaf, gradients, param_tree, LeafFn, Linear};
use crate::tensor::{DenseArray, Tape, Var};
use crate::trainer::optim::{AdamW, AdamWConfig};
use crate::{Error, Result};

/// `Linear(d, d_h/2) → ReLU → Linear(d_h/2, d)`, optionally followed by Tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub input: Linear<T>,
    pub output: Linear<T>,
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Mlp<U> {
        Mlp {
            input: self.input.map(&format!("{path}.input"), f),
            output: self.output.map(&format!("{path}.output"), f),
        }
    }
}

impl<'t> Mlp<Var<'t>> {
    fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.output.forward(&self.input.forward(x)?.relu())?)
    }
}

/// `q(h^(target) | h^(condition))` for one ordered path pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MiEstimator<T> {
    pub target: usize,
    pub condition: usize,
    pub mean: Mlp<T>,
    pub logvar: Mlp<T>,
}

impl<T> MiEstimator<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> MiEstimator<U> {
        MiEstimator {
            target: self.target,
            condition: self.condition,
            mean: self.mean.map(&format!("{path}.mean"), f),
            logvar: self.logvar.map(&format!("{path}.logvar"), f),
        }
    }
}

impl MiEstimator<DenseArray> {
    pub fn init(target: usize, condition: usize, dim_x: usize, dim_y: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = hidden / 2;
        Self {
            target,
            condition,
            mean: Mlp { input: Linear::init(dim_x, half, &mut rng), output: Linear::init(half, dim_y, &mut rng) },
            logvar: Mlp { input: Linear::init(dim_x, half, &mut rng), output: Linear::init(half, dim_y, &mut rng) },
        }
    }

    /// `(μ, logvar)` for each row of `x`, off the tape.
    pub fn predict(&self, x: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let tape = Tape::new();
        let est = self.map("est", &mut bind_leaf(&tape, false));
        let (mu, lv) = est.predict(&tape.constant(x.clone()))?;
        Ok((mu.to_array(), lv.to_array()))
    }
}

impl<'t> MiEstimator<Var<'t>> {
    fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.map("", &mut |_, _, v: &Var<'t>| frozen &= !v.requires_grad());
        frozen
    }

    /// `(μ(x), logvar(x))`, both `rows × d`; logvar lies in (−1, 1).
    pub fn predict(&self, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.mean.forward(x)?, self.logvar.forward(x)?.tanh()))
    }

    /// Row-wise `log q(y_k | x_k)` as a length-`rows` vector.
    pub fn log_q_paired(&self, y: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (mu, lv) = self.predict(x)?;
        let precision = lv.scale(-1.0).exp();
        let quad = y.sub(&mu)?.square().mul(&precision)?;
        Ok(quad.add(&lv)?.sum_cols()?.scale(-0.5))
    }

    /// `out[k, m] = log q(y_k | x_m)` for every pair of rows.
    pub fn log_q_matrix(&self, y: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (mu, lv) = self.predict(x)?;
        let precision = lv.scale(-1.0).exp();
        // (y_k − μ_m)² w_m = y_k² w_m − 2 y_k μ_m w_m + μ_m² w_m, summed over dims
        let yy_w = y.square().matmul_nt(&precision)?;
        let y_mu_w = y.matmul_nt(&mu.mul(&precision)?)?;
        let per_m = mu.square().mul(&precision)?.add(&lv)?.sum_cols()?;
        let quad = yy_w.sub(&y_mu_w.scale(2.0))?.add_row(&per_m)?;
        Ok(quad.scale(-0.5))
    }
}

/// `-0.5 · Σ [(y − μ)² · exp(−logvar) + logvar]`.
pub fn gaussian_log_q(y: &[f64], mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if y.len() != mu.len() || y.len() != logvar.len() {
        return Err(Error::InvalidInput("gaussian_log_q length mismatch".into()));
    }
    let s: f64 = y.iter().zip(mu).zip(logvar).map(|((y, m), lv)| (y - m) * (y - m) * (-lv).exp() + lv).sum();
    Ok(-0.5 * s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimConfig {
    /// Estimator hidden width `d_h`; each MLP uses `d_h / 2`.
    pub hidden: usize,
}

impl MimConfig {
    pub fn for_dim(d_model: usize) -> Self {
        Self { hidden: 4 * d_model }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("estimator hidden {} must be even and ≥ 2", self.hidden)));
        }
        Ok(())
    }
}

/// One estimator per ordered pair `(i, j)`, `i ≠ j`, in row-major pair order.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimators<T> {
    pub pairs: Vec<MiEstimator<T>>,
}

pub type EstimatorParams = Estimators<DenseArray>;

param_tree!(Mlp, "mlp");
param_tree!(MiEstimator, "estimator");
param_tree!(Estimators, "estimators");

pub fn ordered_pairs(num_paths: usize) -> Vec<(usize, usize)> {
    (0..num_paths).flat_map(|i| (0..num_paths).filter(move |&j| j != i).map(move |j| (i, j))).collect()
}

impl<T> Estimators<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Estimators<U> {
        Estimators {
            pairs: self.pairs.iter().map(|e| e.map(&format!("{path}.{}_{}", e.target, e.condition), f)).collect(),
        }
    }
}

impl EstimatorParams {
    pub fn init(num_paths: usize, d_model: usize, config: MimConfig, seed: u64) -> Self {
        let pairs = ordered_pairs(num_paths)
            .into_iter()
            .enumerate()
            .map(|(idx, (i, j))| {
                MiEstimator::init(i, j, d_model, d_model, config.hidden, seed.wrapping_add(1000 + idx as u64))
            })
            .collect();
        Self { pairs }
    }
}

fn check_detached(paths: &[Var<'_>]) -> Result<()> {
    if paths.iter().any(Var::requires_grad) {
        return Err(Error::Contract("estimator loss inputs must be detached".into()));
    }
    Ok(())
}

fn check_paths(paths: &[Var<'_>], estimators: &Estimators<Var<'_>>) -> Result<usize> {
    let rows = paths.first().ok_or_else(|| Error::InvalidInput("no path embeddings".into()))?.shape()[0];
    if paths.iter().any(|p| p.shape()[0] != rows) {
        return Err(Error::InvalidInput("path embeddings disagree on batch size".into()));
    }
    for e in &estimators.pairs {
        if e.target >= paths.len() || e.condition >= paths.len() {
            return Err(Error::OutOfRange(format!(
                "estimator ({}, {}) for {} paths",
                e.target,
                e.condition,
                paths.len()
            )));
        }
    }
    Ok(rows)
}

/// Negative log-likelihood of same-sample pairs, averaged over rows and
/// estimators. `paths[i]` is `B × d` and must be detached.
pub fn estimator_loss<'t>(paths: &[Var<'t>], estimators: &Estimators<Var<'t>>) -> Result<Var<'t>> {
    check_detached(paths)?;
    check_paths(paths, estimators)?;
    if estimators.pairs.is_empty() {
        return Err(Error::InvalidInput("estimator loss needs at least two paths".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for e in &estimators.pairs {
        let nll = e.log_q_paired(&paths[e.target], &paths[e.condition])?.mean().scale(-1.0);
        total = Some(match total {
            Some(t) => t.add(&nll)?,
            None => nll,
        });
    }
    Ok(total.unwrap().scale(1.0 / estimators.pairs.len() as f64))
}

/// Batch CLUB penalty: for each sample `k` and ordered pair `(i, j)`,
/// `log q(h_k^i | h_k^j)` minus the mean over `m ≠ k` of
/// `log q(h_k^i | h_m^j)`, averaged over samples and pairs.
///
/// The estimators must be frozen.
pub fn mim_loss<'t>(paths: &[Var<'t>], estimators: &Estimators<Var<'t>>) -> Result<Var<'t>> {
    let b = check_paths(paths, estimators)?;
    if b < 2 {
        return Err(Error::InvalidInput("MIM loss needs at least two samples".into()));
    }
    if estimators.pairs.is_empty() {
        return Err(Error::InvalidInput("MIM loss needs at least two paths".into()));
    }
    if !estimators.pairs.iter().all(MiEstimator::is_frozen) {
        return Err(Error::Contract("MIM loss requires frozen estimators".into()));
    }
    let tape = paths[0].tape();
    let mut contrast = DenseArray::filled(&[b, b], -1.0 / (b - 1) as f64);
    for k in 0..b {
        contrast.set(&[k, k], 1.0);
    }
    let contrast = tape.constant(contrast);
    let mut total: Option<Var<'t>> = None;
    for e in &estimators.pairs {
        let logq = e.log_q_matrix(&paths[e.target], &paths[e.condition])?;
        let term = logq.mul(&contrast)?.sum();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap().scale(1.0 / (b * estimators.pairs.len()) as f64))
}

/// Empirical CLUB value of a fitted estimator: mean `log q(y_k | x_k)` minus
/// the mean of `log q(y_k | x_m)` over all `m ≠ k`.
///
/// The cross term is the exact all-pairs mean, computed in `O(n·d)` from
/// per-dimension sums of `y` and `y²`.
pub fn club_estimate(x: &DenseArray, y: &DenseArray, estimator: &MiEstimator<DenseArray>) -> Result<f64> {
    let (n, dy) = y.dims2()?;
    if n < 2 || x.dims2()?.0 != n {
        return Err(Error::InvalidInput("club_estimate needs at least two paired samples".into()));
    }
    let (mu, lv) = estimator.predict(x)?;
    if mu.dims2()?.1 != dy {
        return Err(Error::InvalidInput("estimator output width does not match y".into()));
    }
    let mut sum_y = vec![0.0; dy];
    let mut sum_yy = vec![0.0; dy];
    for k in 0..n {
        for (c, &v) in y.row(k).iter().enumerate() {
            sum_y[c] += v;
            sum_yy[c] += v * v;
        }
    }
    let nf = n as f64;
    let mut positive = 0.0;
    let mut all_pairs = 0.0;
    for m in 0..n {
        positive += gaussian_log_q(y.row(m), mu.row(m), lv.row(m))?;
        let (mu_m, lv_m) = (mu.row(m), lv.row(m));
        let mut s = 0.0;
        for c in 0..dy {
            let sq = sum_yy[c] - 2.0 * mu_m[c] * sum_y[c] + nf * mu_m[c] * mu_m[c];
            s += (-lv_m[c]).exp() * sq + nf * lv_m[c];
        }
        all_pairs += -0.5 * s;
    }
    let negative = (all_pairs - positive) / (nf * (nf - 1.0));
    Ok(positive / nf - negative)
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 256, lr: 1e-2, seed: 0 }
    }
}

/// Fits `estimator` to maximize `log q(y | x)` on paired rows with AdamW
/// on random mini-batches. Returns the per-step estimator loss.
pub fn fit_estimator(
    estimator: &mut MiEstimator<DenseArray>,
    x: &DenseArray,
    y: &DenseArray,
    config: FitConfig,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let (n, dx) = x.dims2()?;
    let dy = y.dims2()?.1;
    if n == 0 || y.dims2()?.0 != n {
        return Err(Error::InvalidInput("fit_estimator needs paired rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let batch = config.batch_size.min(n).max(1);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let gather = |a: &DenseArray, width: usize| {
            let mut v = Vec::with_capacity(batch * width);
            for &i in &idx {
                v.extend_from_slice(a.row(i));
            }
            DenseArray::from_parts(vec![batch, width], v)
        };
        let tape = Tape::new();
        let bound = bind(&*estimator, &tape, true);
        let xb = tape.constant(gather(x, dx));
        let yb = tape.constant(gather(y, dy));
        let loss = bound.log_q_paired(&yb, &xb)?.mean().scale(-1.0);
        tape.backward(loss)?;
        losses.push(loss.item()?);
        *estimator = opt.update(estimator, &gradients(&bound), config.lr)?;
    }
    Ok(losses)
}
