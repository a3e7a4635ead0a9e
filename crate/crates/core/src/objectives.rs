//! Contrastive alignment losses and the combined training objective.

use crate::miest::{mim_loss, Estimators};
pub use crate::parallel::SideEmbeddings;
use crate::tensor::{DenseArray, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Softmax temperature of the similarity logits.
    pub tau: f64,
    /// Weight of the per-path contrastive terms.
    pub lambda_con: f64,
    /// Weight of the path mutual-information penalty.
    pub lambda_mim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau: 0.02, lambda_con: 1.0, lambda_mim: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if [self.lambda_con, self.lambda_mim].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("cosine of vectors with different lengths".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `−log softmax` of the positive among `{positive} ∪ negatives`, with
/// cosine logits divided by `tau`. Returns 0 for an empty negative set.
pub fn info_nce(query: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    let pos = cosine(query, positive)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine(query, n)? / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Mean in-batch InfoNCE: query row `k` is scored against every target row,
/// and row `k` of `targets` is its positive. Both are `B × d`.
pub fn batch_info_nce<'t>(queries: &Var<'t>, targets: &Var<'t>, tau: f64) -> Result<Var<'t>> {
    let b = queries.shape()[0];
    if targets.shape()[0] != b {
        return Err(Error::InvalidInput("query and target batches differ in size".into()));
    }
    let logits = queries.normalize_rows()?.matmul_nt(&targets.normalize_rows()?)?.scale(1.0 / tau);
    let diag = queries.tape().constant(DenseArray::identity(b));
    Ok(logits.log_softmax(1)?.mul(&diag)?.sum().scale(-1.0 / b as f64))
}

#[derive(Clone, Debug)]
pub struct BatchEmbeddings<'t> {
    pub queries: SideEmbeddings<'t>,
    pub targets: SideEmbeddings<'t>,
}

impl BatchEmbeddings<'_> {
    fn check(&self) -> Result<usize> {
        let b = self.queries.aggregated.shape()[0];
        let (q, t) = (&self.queries, &self.targets);
        if t.aggregated.shape() != q.aggregated.shape() || q.per_path.len() != t.per_path.len() {
            return Err(Error::InvalidInput("query and target sides disagree in shape".into()));
        }
        if q.per_path.is_empty() {
            return Err(Error::InvalidInput("batch has no paths".into()));
        }
        if q.per_path.iter().chain(&t.per_path).any(|p| p.shape() != q.aggregated.shape()) {
            return Err(Error::InvalidInput("path embeddings disagree with the aggregate".into()));
        }
        if b < 2 {
            return Err(Error::InvalidInput("contrastive loss needs at least two samples".into()));
        }
        Ok(b)
    }
}

/// `(aggregated term, mean per-path term)` of the composite contrastive loss.
pub fn contrastive_terms<'t>(batch: &BatchEmbeddings<'t>, tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    batch.check()?;
    let agg = batch_info_nce(&batch.queries.aggregated, &batch.targets.aggregated, tau)?;
    let mut paths: Option<Var<'t>> = None;
    for (q, t) in batch.queries.per_path.iter().zip(&batch.targets.per_path) {
        let term = batch_info_nce(q, t, tau)?;
        paths = Some(match paths {
            Some(p) => p.add(&term)?,
            None => term,
        });
    }
    let n = batch.queries.per_path.len() as f64;
    Ok((agg, paths.unwrap().scale(1.0 / n)))
}

/// Aggregated InfoNCE plus `lambda_con` times the mean per-path InfoNCE.
pub fn contrastive_composite<'t>(batch: &BatchEmbeddings<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    weights.validate()?;
    let (agg, paths) = contrastive_terms(batch, weights.tau)?;
    Ok(agg.add(&paths.scale(weights.lambda_con))?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive_agg: f64,
    pub contrastive_paths: f64,
    pub mim: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `contrastive_agg + λ_CON · contrastive_paths + λ_MIM · mim`.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        self.contrastive_agg + weights.lambda_con * self.contrastive_paths + weights.lambda_mim * self.mim
    }
}

/// Full objective. The MIM term averages the query-side and target-side
/// penalties and is skipped (reported as 0) for a single path. Estimators
/// must be bound frozen.
pub fn total_loss<'t>(
    batch: &BatchEmbeddings<'t>,
    estimators: &Estimators<Var<'t>>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    weights.validate()?;
    let (agg, paths) = contrastive_terms(batch, weights.tau)?;
    let mut total = agg.add(&paths.scale(weights.lambda_con))?;
    let mut mim_value = 0.0;
    if batch.queries.per_path.len() > 1 {
        let mq = mim_loss(&batch.queries.per_path, estimators)?;
        let mt = mim_loss(&batch.targets.per_path, estimators)?;
        let mim = mq.add(&mt)?.scale(0.5);
        mim_value = mim.item()?;
        total = total.add(&mim.scale(weights.lambda_mim))?;
    }
    let breakdown = LossBreakdown {
        contrastive_agg: agg.item()?,
        contrastive_paths: paths.item()?,
        mim: mim_value,
        total: total.item()?,
    };
    Ok((total, breakdown))
}
