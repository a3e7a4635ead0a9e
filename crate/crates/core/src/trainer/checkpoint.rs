//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, format version, the config in its canonical text form,
//! step counter, RNG state, epoch order, then the model and estimator
//! tensors by name and both optimizers' moments. Every value is written from
//! its exact bit pattern, so save, load and save again gives the same bytes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{leaves, replace_leaves, ParamTree};
use crate::tensor::DenseArray;
use crate::trainer::optim::AdamW;
use crate::trainer::{TrainConfig, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PARAPATH";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, a: &DenseArray) {
        self.u32(a.ndim() as u32);
        for &s in a.shape() {
            self.u64(s as u64);
        }
        for v in a.values() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fn tree<P: ParamTree<DenseArray>>(&mut self, params: &P) {
        let named = leaves(params);
        self.u64(named.len() as u64);
        for t in named {
            self.bytes(t.name.as_bytes());
            self.array(&t.value);
        }
    }
    fn optimizer(&mut self, opt: &AdamW) {
        self.u64(opt.step);
        self.u64(opt.first_moment.len() as u64);
        for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
            self.array(m);
            self.array(v);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| corrupt(what))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).ok().filter(|&n| n <= self.data.len()).ok_or_else(|| corrupt(what))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }
    fn array(&mut self, what: &str) -> Result<DenseArray> {
        let ndim = self.u32(what)? as usize;
        if ndim > 8 {
            return Err(corrupt(what));
        }
        let shape = (0..ndim).map(|_| self.len(what)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s)).ok_or_else(|| corrupt(what))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| corrupt(what))?, what)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        DenseArray::new(shape, values).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
    fn tree<P>(&mut self, skeleton: &P, what: &str) -> Result<P>
    where
        P: ParamTree<DenseArray, With<DenseArray> = P>,
    {
        let expected = leaves(skeleton);
        let count = self.len(what)?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("{what}: {count} tensors, expected {}", expected.len())));
        }
        let mut values = Vec::with_capacity(count);
        for e in &expected {
            let name = self.bytes(what)?;
            if name != e.name.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "{what}: found tensor `{}` where `{}` was expected",
                    String::from_utf8_lossy(name),
                    e.name
                )));
            }
            values.push(self.array(&e.name)?);
        }
        replace_leaves(skeleton, values).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
    fn optimizer(
        &mut self,
        config: crate::trainer::optim::AdamWConfig,
        shapes: &[Vec<usize>],
        what: &str,
    ) -> Result<AdamW> {
        let mut opt = AdamW::new(config);
        opt.step = self.u64(what)?;
        let count = self.len(what)?;
        if count != 0 && count != shapes.len() {
            return Err(Error::Checkpoint(format!("{what}: {count} moment pairs for {} parameters", shapes.len())));
        }
        for s in shapes.iter().take(count) {
            let (m, v) = (self.array(what)?, self.array(what)?);
            if m.shape() != s.as_slice() || v.shape() != s.as_slice() {
                return Err(Error::Checkpoint(format!("{what}: moment shape mismatch")));
            }
            opt.first_moment.push(m);
            opt.second_moment.push(v);
        }
        Ok(opt)
    }
}

fn shapes<P: ParamTree<DenseArray>>(params: &P) -> Vec<Vec<usize>> {
    leaves(params).into_iter().map(|t| t.value.shape().to_vec()).collect()
}

pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(state.config.to_text().as_bytes());
    w.u64(state.step as u64);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.u64(state.cursor as u64);
    w.u64(state.order.len() as u64);
    for &i in &state.order {
        w.u64(i as u64);
    }
    w.tree(&state.model);
    w.tree(&state.estimators);
    w.optimizer(&state.opt_model);
    w.optimizer(&state.opt_estimators);
    w.0
}

pub fn read_checkpoint(data: &[u8]) -> Result<TrainState> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let text = std::str::from_utf8(r.bytes("config")?).map_err(|_| corrupt("config"))?;
    let config = TrainConfig::parse(text)?;
    let mut state = TrainState::new(config)?;
    state.step = r.len("step")?;
    let seed: [u8; 32] = r.take(32, "rng")?.try_into().unwrap();
    let stream = r.u64("rng")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng")?.try_into().unwrap());
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(stream);
    state.rng.set_word_pos(word_pos);
    state.cursor = r.len("order")?;
    let n = r.len("order")?;
    state.order = (0..n).map(|_| r.len("order")).collect::<Result<_>>()?;
    state.model = r.tree(&state.model, "model")?;
    state.estimators = r.tree(&state.estimators, "estimators")?;
    let opt_config = state.config.optimizer();
    state.opt_model = r.optimizer(opt_config, &shapes(&state.model), "model optimizer")?;
    state.opt_estimators = r.optimizer(opt_config, &shapes(&state.estimators), "estimator optimizer")?;
    if r.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&data)
}
