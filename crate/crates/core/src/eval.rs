//! Retrieval scoring, path-diversity traces, inference modes and
//! multiply-add accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{tokenize, ModelConfig};
use crate::data::{Example, RetrievalSet};
use crate::nn::bind;
use crate::parallel::ModelParams;
use crate::tensor::{DenseArray, Tape};
use crate::trainer::{cosine, fit, Hooks, TrainConfig, TrainState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// One path only (0-based index).
    SinglePrefix { path: usize },
    /// Every path, fused by the aggregator.
    Aggregate,
    /// The shared backbone with all prefixes removed.
    NoPrefix,
}

impl InferenceMode {
    pub const SINGLE: Self = Self::SinglePrefix { path: 0 };

    pub fn name(&self) -> &'static str {
        match self {
            Self::SinglePrefix { .. } => "single_prefix",
            Self::Aggregate => "aggregate",
            Self::NoPrefix => "no_prefix",
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_prefix" => Ok(Self::SINGLE),
            "aggregate" => Ok(Self::Aggregate),
            "no_prefix" => Ok(Self::NoPrefix),
            _ => Err(Error::InvalidInput(format!(
                "unknown inference mode `{s}` (expected single_prefix, aggregate or no_prefix)"
            ))),
        }
    }
}

/// Embedding of one token sequence as a length-`d` array.
pub fn inference_encode(tokens: &[usize], model: &ModelParams, mode: InferenceMode) -> Result<DenseArray> {
    let tape = Tape::new();
    let bound = bind(model, &tape, false);
    let row = match mode {
        InferenceMode::SinglePrefix { path } => bound.encoder().encode_path(tokens, path)?,
        InferenceMode::Aggregate => bound.encode_input(tokens)?.1.aggregated,
        InferenceMode::NoPrefix => bound.encoder().encode_without_prefix(tokens)?,
    };
    Ok(row.to_array().reshape(&[model.config.d_model])?)
}

/// Embeddings of `texts`, one row each.
pub fn encode_texts(texts: &[String], model: &ModelParams, mode: InferenceMode) -> Result<DenseArray> {
    let vocab = model.config.vocab();
    let mut values = Vec::with_capacity(texts.len() * model.config.d_model);
    for t in texts {
        values.extend_from_slice(inference_encode(&tokenize(t, &vocab)?, model, mode)?.values());
    }
    Ok(DenseArray::new(vec![texts.len(), model.config.d_model], values)?)
}

/// Index of the cosine-nearest target for each query; ties go to the lowest index.
pub fn top1(queries: &DenseArray, targets: &DenseArray) -> Result<Vec<usize>> {
    let (q, dq) = queries.dims2()?;
    let (t, dt) = targets.dims2()?;
    if dq != dt {
        return Err(Error::InvalidInput(format!("query width {dq} vs target width {dt}")));
    }
    let norms = |a: &DenseArray, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|r| {
                let v = a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if v == 0.0 {
                    Err(Error::InvalidInput(format!("zero-norm embedding at row {r}")))
                } else {
                    Ok(v)
                }
            })
            .collect()
    };
    let (nq, nt) = (norms(queries, q)?, norms(targets, t)?);
    let mut out = Vec::with_capacity(q);
    for (i, ni) in nq.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, nj) in nt.iter().enumerate() {
            let dot: f64 = queries.row(i).iter().zip(targets.row(j)).map(|(a, b)| a * b).sum();
            let s = dot / (ni * nj);
            if s > best.1 {
                best = (j, s);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Fraction of queries whose nearest target is `gold[i]`.
pub fn precision_at_1(queries: &DenseArray, targets: &DenseArray, gold: &[usize]) -> Result<f64> {
    let (q, _) = queries.dims2()?;
    let (t, _) = targets.dims2()?;
    if gold.len() != q {
        return Err(Error::InvalidInput(format!("{} gold labels for {q} queries", gold.len())));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= t) {
        return Err(Error::OutOfRange(format!("gold index {bad} of {t} targets")));
    }
    let picks = top1(queries, targets)?;
    Ok(picks.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / q as f64)
}

/// Mean pairwise cosine among the path embeddings of each probe, averaged over probes.
pub fn path_similarity_trace(model: &ModelParams, probes: &[Vec<usize>]) -> Result<f64> {
    let n = model.config.num_paths;
    if n < 2 {
        return Err(Error::InvalidInput("path similarity needs at least two paths".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidInput("no probe inputs".into()));
    }
    let mut total = 0.0;
    for tokens in probes {
        let tape = Tape::new();
        let bound = bind(model, &tape, false);
        let paths: Vec<DenseArray> = bound.encoder().encode_all_paths(tokens)?.iter().map(|p| p.to_array()).collect();
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += cosine(paths[i].values(), paths[j].values())?;
            }
        }
        total += s / (n * (n - 1) / 2) as f64;
    }
    Ok(total / probes.len() as f64)
}

/// `count` query inputs of `set`, chosen by a seeded shuffle.
pub fn probe_inputs(set: &RetrievalSet, config: &ModelConfig, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut idx: Vec<usize> = (0..set.queries.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let vocab = config.vocab();
    idx.iter().take(count).map(|&i| tokenize(&set.queries[i], &vocab)).collect()
}

/// Exact multiply-add count of one encode of `seq_len` tokens, matching
/// what the matrix-product kernels perform.
pub fn op_count(config: &ModelConfig, mode: InferenceMode, seq_len: usize) -> u64 {
    let (l, d, f) = (seq_len as u64, config.d_model as u64, config.ffn_hidden as u64);
    let layer = |prefix: u64| 4 * l * d * d + 2 * l * (prefix + l) * d + 3 * l * d * f;
    let forward = |prefix: u64| config.layers as u64 * layer(prefix);
    let k = config.prefix_len as u64;
    match mode {
        InferenceMode::SinglePrefix { .. } => forward(k),
        InferenceMode::NoPrefix => forward(0),
        InferenceMode::Aggregate => {
            let n = config.num_paths as u64;
            // hidden layer, output layer, weighted sum of the paths
            n * forward(k) + n * d * d + d * n + n * d
        }
    }
}

/// Relative multiply-add overhead of single-prefix inference over no prefix, in percent.
pub fn single_prefix_overhead_percent(config: &ModelConfig, seq_len: usize) -> f64 {
    let base = op_count(config, InferenceMode::NoPrefix, seq_len) as f64;
    let with = op_count(config, InferenceMode::SINGLE, seq_len) as f64;
    100.0 * (with - base) / base
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: &'static str,
    pub precision_at_1: f64,
    pub per_task: BTreeMap<String, f64>,
    /// `None` for a single-path model.
    pub path_cosine_mean: Option<f64>,
    /// Multiply-adds of one encode at `max_len` tokens.
    pub op_count: u64,
    pub num_queries: usize,
    pub num_targets: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "mode            {}", self.mode).unwrap();
        writeln!(s, "queries         {}", self.num_queries).unwrap();
        writeln!(s, "targets         {}", self.num_targets).unwrap();
        writeln!(s, "precision@1     {:.4}", self.precision_at_1).unwrap();
        for (task, p) in &self.per_task {
            writeln!(s, "  {task:<14}{p:.4}").unwrap();
        }
        match self.path_cosine_mean {
            Some(c) => writeln!(s, "path cosine     {c:.4}").unwrap(),
            None => writeln!(s, "path cosine     n/a").unwrap(),
        }
        writeln!(s, "op count        {}", self.op_count).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Number of probe inputs used for the path-similarity trace.
pub const PROBE_COUNT: usize = 64;

pub fn evaluate(model: &ModelParams, set: &RetrievalSet, mode: InferenceMode, probe_seed: u64) -> Result<EvalReport> {
    let queries = encode_texts(&set.queries, model, mode)?;
    let targets = encode_texts(&set.targets, model, mode)?;
    let picks = top1(&queries, &targets)?;
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for ((task, &p), &g) in set.tasks.iter().zip(&picks).zip(&set.gold) {
        let e = per_task.entry(task.clone()).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
            hits += 1;
        }
    }
    let path_cosine_mean = if model.config.num_paths > 1 {
        let probes = probe_inputs(set, &model.config, PROBE_COUNT, probe_seed)?;
        Some(path_similarity_trace(model, &probes)?)
    } else {
        None
    };
    Ok(EvalReport {
        mode: mode.name(),
        precision_at_1: hits as f64 / set.queries.len() as f64,
        per_task: per_task.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        path_cosine_mean,
        op_count: op_count(&model.config, mode, model.config.max_len),
        num_queries: set.queries.len(),
        num_targets: set.targets.len(),
    })
}

/// One grid point of the hyperparameter sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub num_paths: usize,
    pub prefix_len: usize,
    pub lambda_mim: f64,
}

pub fn default_sweep_grid() -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for num_paths in [2, 4] {
        for prefix_len in [10, 20, 40] {
            for lambda_mim in [1e-3, 1e-4, 1e-5] {
                out.push(SweepPoint { num_paths, prefix_len, lambda_mim });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub precision_at_1: f64,
    pub path_cosine_mean: f64,
    pub final_loss: f64,
}

/// Trains and evaluates (aggregate mode) one run per grid point.
pub fn run_sweep(
    base: &TrainConfig,
    grid: &[SweepPoint],
    train: &[Example],
    eval: &RetrievalSet,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &point in grid {
        let config = TrainConfig {
            num_paths: point.num_paths,
            prefix_len: point.prefix_len,
            lambda_mim: point.lambda_mim,
            ..base.clone()
        };
        let mut state = TrainState::new(config)?;
        let metrics = fit(&mut state, train, Hooks::default())?;
        let report = evaluate(&state.model, eval, InferenceMode::Aggregate, base.seed)?;
        rows.push(SweepRow {
            point,
            precision_at_1: report.precision_at_1,
            path_cosine_mean: report.path_cosine_mean.unwrap_or(f64::NAN),
            final_loss: metrics.last().map_or(f64::NAN, |m| m.loss.total),
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "num_paths,prefix_len,lambda_mim,precision_at_1,path_cosine_mean,final_loss";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{:e},{},{},{}",
            r.point.num_paths,
            r.point.prefix_len,
            r.point.lambda_mim,
            r.precision_at_1,
            r.path_cosine_mean,
            r.final_loss
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mac_count, reset_mac_count};

    fn tiny_model(num_paths: usize, prefix_len: usize) -> ModelParams {
        let config = ModelConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            max_len: 16,
            num_paths,
            prefix_len,
            ffn_hidden: 12,
            ..Default::default()
        };
        ModelParams::init(&config, 5).unwrap()
    }

    #[test]
    fn identity_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseArray::uniform(&[6, 4], 1.0, &mut rng);
        assert_eq!(precision_at_1(&x, &x, &[0, 1, 2, 3, 4, 5]).unwrap(), 1.0);
    }

    #[test]
    fn argmin_gold_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = DenseArray::uniform(&[8, 5], 1.0, &mut rng);
        let t = DenseArray::uniform(&[8, 5], 1.0, &mut rng);
        let gold: Vec<usize> = (0..8)
            .map(|i| {
                (0..8)
                    .min_by(|&a, &b| {
                        cosine(q.row(i), t.row(a)).unwrap().total_cmp(&cosine(q.row(i), t.row(b)).unwrap())
                    })
                    .unwrap()
            })
            .collect();
        assert_eq!(precision_at_1(&q, &t, &gold).unwrap(), 0.0);
    }

    #[test]
    fn three_by_three_hand_case() {
        let q = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let t = DenseArray::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.0]]).unwrap();
        // nearest: 0, 1, and a tie between 0 and 1 resolved to 0
        assert_eq!(top1(&q, &t).unwrap(), vec![0, 1, 0]);
        assert!((precision_at_1(&q, &t, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scoring_rejects_bad_input() {
        let q = DenseArray::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let t = DenseArray::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(precision_at_1(&q, &t, &[0]).is_err());
        assert!(precision_at_1(&t, &t, &[1]).is_err());
        assert!(precision_at_1(&t, &t, &[]).is_err());
    }

    #[test]
    fn precision_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = DenseArray::uniform(&[10, 4], 1.0, &mut rng);
        let t = DenseArray::uniform(&[7, 4], 1.0, &mut rng);
        let gold: Vec<usize> = (0..10).map(|i| i % 7).collect();
        let p = precision_at_1(&q, &t, &gold).unwrap();
        let p2 = precision_at_1(&q.map(|v| v * 4.0), &t.map(|v| v * 4.0), &gold).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn modes_parse_by_name() {
        for m in [InferenceMode::SINGLE, InferenceMode::Aggregate, InferenceMode::NoPrefix] {
            assert_eq!(m.name().parse::<InferenceMode>().unwrap(), m);
        }
        assert!("both".parse::<InferenceMode>().is_err());
    }

    #[test]
    fn single_prefix_matches_training_path_embedding() {
        let model = tiny_model(2, 3);
        let tokens = [3, 1, 4, 1, 5];
        let tape = Tape::new();
        let bound = bind(&model, &tape, true);
        let train_time = bound.encoder().encode_all_paths(&tokens).unwrap()[0].to_array();
        let inference = inference_encode(&tokens, &model, InferenceMode::SINGLE).unwrap();
        assert!(train_time.values().iter().zip(inference.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn no_prefix_equals_a_prefix_free_model() {
        let model = tiny_model(2, 3);
        let mut bare = model.clone();
        bare.config.prefix_len = 0;
        bare.prefixes = crate::backbone::PrefixBank::init(&bare.config, 0);
        let tokens = [9, 8, 7];
        let a = inference_encode(&tokens, &model, InferenceMode::NoPrefix).unwrap();
        let b = inference_encode(&tokens, &bare, InferenceMode::SINGLE).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn trace_of_identical_paths_is_one() {
        let mut model = tiny_model(3, 2);
        model.prefixes.copy_path(0, 1).unwrap();
        model.prefixes.copy_path(0, 2).unwrap();
        let t = path_similarity_trace(&model, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(path_similarity_trace(&tiny_model(1, 2), &[vec![1]]).is_err());
    }

    #[test]
    fn trace_is_symmetric_under_path_permutation() {
        let model = tiny_model(3, 2);
        let mut swapped = model.clone();
        let m = model.config.layers;
        for l in 0..m {
            swapped.prefixes.keys.swap(l, 2 * m + l);
            swapped.prefixes.values.swap(l, 2 * m + l);
        }
        let probes = [vec![1, 2, 3], vec![7, 7]];
        let a = path_similarity_trace(&model, &probes).unwrap();
        let b = path_similarity_trace(&swapped, &probes).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn op_count_matches_instrumented_kernels() {
        for (n, k) in [(2, 3), (3, 0), (1, 5)] {
            let model = tiny_model(n, k);
            let tokens = [1, 2, 3, 4, 5, 6, 7];
            for mode in [InferenceMode::SINGLE, InferenceMode::Aggregate, InferenceMode::NoPrefix] {
                reset_mac_count();
                inference_encode(&tokens, &model, mode).unwrap();
                assert_eq!(mac_count(), op_count(&model.config, mode, tokens.len()), "{mode:?} n={n} k={k}");
            }
        }
    }

    #[test]
    fn op_count_relations() {
        let config = ModelConfig::default();
        let single = op_count(&config, InferenceMode::SINGLE, 64);
        let agg = op_count(&config, InferenceMode::Aggregate, 64);
        assert!(agg > 2 * single && agg - 2 * single < single / 100);
        let k0 = ModelConfig { prefix_len: 0, ..config.clone() };
        assert_eq!(op_count(&k0, InferenceMode::SINGLE, 64), op_count(&k0, InferenceMode::NoPrefix, 64));
        let pct = single_prefix_overhead_percent(&config, 64);
        assert!((pct - 100.0 * 163_840.0 / 6_291_456.0).abs() < 1e-9, "{pct}");
    }

    #[test]
    fn report_serializes_both_ways() {
        let report = EvalReport {
            mode: "aggregate",
            precision_at_1: 0.5,
            per_task: [("find item".to_string(), 0.5)].into_iter().collect(),
            path_cosine_mean: Some(0.25),
            op_count: 10,
            num_queries: 4,
            num_targets: 2,
        };
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["precision_at_1"], 0.5);
        assert_eq!(v["per_task"]["find item"], 0.5);
        assert!(report.to_text().contains("precision@1     0.5000"));
    }

    #[test]
    fn sweep_grid_has_eighteen_points() {
        let grid = default_sweep_grid();
        assert_eq!(grid.len(), 18);
        let row = SweepRow { point: grid[0], precision_at_1: 0.1, path_cosine_mean: 0.2, final_loss: 1.0 };
        let csv = sweep_csv(&[row]);
        assert_eq!(csv.lines().nth(1).unwrap(), "2,10,1e-3,0.1,0.2,1");
    }
}
