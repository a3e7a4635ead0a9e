//! MLP-softmax fusion of the parallel path embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, EncoderView, ModelConfig, PrefixBank};
use crate::nn::{param_tree, LeafFn, Linear};
use crate::tensor::{concat, DenseArray, Var};
use crate::{Error, Result};

/// `Linear(N·d, d) → SiLU → Linear(d, N) → softmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

pub type AggregatorParams = Aggregator<DenseArray>;

param_tree!(Aggregator, "aggregator");

impl<T> Aggregator<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Aggregator<U> {
        Aggregator {
            hidden: self.hidden.map(&format!("{path}.hidden"), f),
            output: self.output.map(&format!("{path}.output"), f),
        }
    }
}

impl AggregatorParams {
    /// The output layer starts at zero, so initial fusion weights are uniform.
    pub fn init(num_paths: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { hidden: Linear::init(num_paths * d_model, d_model, &mut rng), output: Linear::zeros(d_model, num_paths) }
    }

    pub fn num_paths(&self) -> usize {
        self.output.fan_out()
    }
}

/// Path embeddings of one input together with their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEmbeddings {
    pub per_path: Vec<DenseArray>,
    pub aggregated: DenseArray,
    pub weights: Vec<f64>,
}

/// Output of [`aggregate`] on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Fused<'t> {
    /// `1 × N`
    pub weights: Var<'t>,
    /// `1 × d`
    pub aggregated: Var<'t>,
}

impl<'t> Aggregator<Var<'t>> {
    /// Fuses `N` path embeddings (each `1 × d`) of a single input.
    pub fn aggregate(&self, per_path: &[Var<'t>]) -> Result<Fused<'t>> {
        let n = self.output.w.shape()[1];
        if per_path.len() != n {
            return Err(Error::InvalidInput(format!("aggregator expects {n} paths, got {}", per_path.len())));
        }
        let flat = if n == 1 { per_path[0] } else { concat(per_path, 1)? };
        let expected = self.hidden.w.shape()[0];
        if flat.shape() != [1, expected] {
            return Err(Error::InvalidInput(format!(
                "aggregator expects a 1 x {expected} input, got {:?}",
                flat.shape()
            )));
        }
        let logits = self.output.forward(&self.hidden.forward(&flat)?.silu())?;
        let weights = logits.softmax(1)?;
        let stacked = if n == 1 { per_path[0] } else { concat(per_path, 0)? };
        let aggregated = weights.matmul(&stacked)?;
        Ok(Fused { weights, aggregated })
    }
}

/// Backbone, prefixes and aggregator: every parameter the contrastive
/// objective trains.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub prefixes: PrefixBank<T>,
    pub aggregator: Aggregator<T>,
}

pub type ModelParams = Model<DenseArray>;

param_tree!(Model, "model");

impl<T> Model<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.map(&format!("{path}.backbone"), f),
            prefixes: self.prefixes.map(&format!("{path}.prefixes"), f),
            aggregator: self.aggregator.map(&format!("{path}.aggregator"), f),
        }
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: crate::backbone::BackboneParams::init(config, seed),
            prefixes: PrefixBank::init(config, seed.wrapping_add(1)),
            aggregator: AggregatorParams::init(config.num_paths, config.d_model, seed.wrapping_add(2)),
        })
    }
}

/// One side (queries or targets) of a batch.
#[derive(Clone, Debug)]
pub struct SideEmbeddings<'t> {
    /// `N` entries, each `B × d`.
    pub per_path: Vec<Var<'t>>,
    /// `B × d`
    pub aggregated: Var<'t>,
    /// `B × N`
    pub weights: Var<'t>,
}

fn stack<'t>(rows: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(if rows.len() == 1 { rows[0] } else { concat(rows, 0)? })
}

impl<'t> Model<Var<'t>> {
    pub fn encoder(&self) -> EncoderView<'_, 't> {
        EncoderView { config: &self.config, backbone: &self.backbone, prefixes: &self.prefixes }
    }

    /// All path embeddings of one input and their fusion.
    pub fn encode_input(&self, tokens: &[usize]) -> Result<(Vec<Var<'t>>, Fused<'t>)> {
        let paths = self.encoder().encode_all_paths(tokens)?;
        let fused = self.aggregator.aggregate(&paths)?;
        Ok((paths, fused))
    }

    pub fn encode_batch(&self, inputs: &[Vec<usize>]) -> Result<SideEmbeddings<'t>> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let n = self.config.num_paths;
        let mut per_path: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(inputs.len()); n];
        let mut aggregated = Vec::with_capacity(inputs.len());
        let mut weights = Vec::with_capacity(inputs.len());
        for tokens in inputs {
            let (paths, fused) = self.encode_input(tokens)?;
            for (slot, p) in per_path.iter_mut().zip(paths) {
                slot.push(p);
            }
            aggregated.push(fused.aggregated);
            weights.push(fused.weights);
        }
        Ok(SideEmbeddings {
            per_path: per_path.iter().map(|rows| stack(rows)).collect::<Result<_>>()?,
            aggregated: stack(&aggregated)?,
            weights: stack(&weights)?,
        })
    }
}
