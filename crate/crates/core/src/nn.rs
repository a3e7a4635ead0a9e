//! Layer building blocks shared by the encoder, the aggregation head and the
//! estimators.
//!
//! Parameter containers are generic over their leaf type: `T = DenseArray` is
//! the stored model and `T = Var<'t>` is the same model bound to a tape. A
//! single `map` per container walks the leaves in a fixed order, which is
//! what binding, gradient collection, optimizer updates and checkpointing all
//! build on.

use rand::Rng;

use crate::tensor::{DenseArray, Tape, TensorError, Var};

/// Role of a parameter tensor; only [`ParamKind::Weight`] is weight-decayed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Prefix,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, Self::Weight)
    }
}

/// Callback used by every container's `map`.
pub trait LeafFn<T, U>: FnMut(&str, ParamKind, &T) -> U {}
impl<T, U, F: FnMut(&str, ParamKind, &T) -> U> LeafFn<T, U> for F {}

/// Affine layer `x · w + b` with `w: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Linear<U> {
        Linear {
            w: f(&format!("{path}.w"), ParamKind::Weight, &self.w),
            b: f(&format!("{path}.b"), ParamKind::Bias, &self.b),
        }
    }
}

impl Linear<DenseArray> {
    /// Uniform `±1/sqrt(fan_in)` weights and zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self { w: DenseArray::uniform(&[fan_in, fan_out], bound, rng), b: DenseArray::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: DenseArray::zeros(&[fan_in, fan_out]), b: DenseArray::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }
}

impl<'t> Linear<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

/// Layer normalization gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> Norm<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Norm<U> {
        Norm {
            gain: f(&format!("{path}.gain"), ParamKind::Norm, &self.gain),
            bias: f(&format!("{path}.bias"), ParamKind::Norm, &self.bias),
        }
    }
}

impl Norm<DenseArray> {
    pub fn new(width: usize) -> Self {
        Self { gain: DenseArray::ones(&[width]), bias: DenseArray::zeros(&[width]) }
    }
}

impl<'t> Norm<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>, TensorError> {
        x.layer_norm(&self.gain, &self.bias)
    }
}

/// A container of parameter leaves with a fixed traversal order.
pub trait ParamTree<T>: Sized {
    type With<U>: ParamTree<U>;

    fn map_leaves<U>(&self, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Self::With<U>;
}

/// Implements [`ParamTree`] for a container with an inherent `map(path, f)`.
macro_rules! param_tree {
    ($ty:ident, $root:expr) => {
        impl<T> $crate::nn::ParamTree<T> for $ty<T> {
            type With<U> = $ty<U>;

            fn map_leaves<U>(&self, f: &mut dyn FnMut(&str, $crate::nn::ParamKind, &T) -> U) -> $ty<U> {
                self.map($root, &mut |n: &str, k, v: &T| f(n, k, v))
            }
        }
    };
}
pub(crate) use param_tree;

param_tree!(Linear, "linear");
param_tree!(Norm, "norm");

/// Registers every leaf on `tape`, trainable or frozen.
pub fn bind_leaf<'t>(tape: &'t Tape, trainable: bool) -> impl FnMut(&str, ParamKind, &DenseArray) -> Var<'t> {
    move |_, _, value| tape.leaf(value.clone(), trainable)
}

pub fn bind<'t, P: ParamTree<DenseArray>>(params: &P, tape: &'t Tape, trainable: bool) -> P::With<Var<'t>> {
    params.map_leaves(&mut bind_leaf(tape, trainable))
}

/// Gradients of a bound tree in traversal order (`None` where none arrived).
pub fn gradients<'t, B: ParamTree<Var<'t>>>(bound: &B) -> Vec<Option<DenseArray>> {
    let mut out = Vec::new();
    bound.map_leaves(&mut |_, _, v: &Var<'t>| out.push(v.grad()));
    out
}

/// Flat `(name, kind, value)` listing of a tree.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: DenseArray,
}

pub fn leaves<P: ParamTree<DenseArray>>(params: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    params.map_leaves(&mut |name, kind, value| {
        out.push(NamedTensor { name: name.to_string(), kind, value: value.clone() })
    });
    out
}

pub fn leaf_count<P: ParamTree<DenseArray>>(params: &P) -> usize {
    let mut n = 0;
    params.map_leaves(&mut |_, _, v| n += v.len());
    n
}

/// Rebuilds `params` with the tensors of `values` in traversal order; shapes must match.
pub fn replace_leaves<P>(params: &P, values: Vec<DenseArray>) -> Result<P, String>
where
    P: ParamTree<DenseArray, With<DenseArray> = P>,
{
    let mut source = values.into_iter();
    let mut error: Option<String> = None;
    let rebuilt = params.map_leaves(&mut |name, _, current| match source.next() {
        Some(next) if next.shape() == current.shape() => next,
        Some(next) => {
            error
                .get_or_insert_with(|| format!("{name}: expected shape {:?}, got {:?}", current.shape(), next.shape()));
            current.clone()
        }
        None => {
            error.get_or_insert_with(|| format!("{name}: missing tensor"));
            current.clone()
        }
    });
    if source.next().is_some() {
        error.get_or_insert_with(|| "more tensors than parameters".into());
    }
    match error {
        Some(e) => Err(e),
        None => Ok(rebuilt),
    }
}
