//! Synthetic multi-facet retrieval corpus and JSON Lines pair files.
//!
//! An entity is a tuple of facet words. Its target text lists every facet in
//! canonical order; a query lists the facets that survive dropout. Entities
//! come in groups that share their first facet and differ in the others, so
//! a matcher that reads only the first facet cannot tell a group apart.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_query_input, tokenize, TokenVocab};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub task_id: String,
    pub query_text: String,
    pub target_text: String,
}

const FIELDS: [&str; 3] = ["task_id", "query_text", "target_text"];

impl PairRecord {
    pub fn new(task_id: &str, query_text: &str, target_text: &str) -> Result<Self> {
        let r = Self { task_id: task_id.into(), query_text: query_text.into(), target_text: target_text.into() };
        if let Some(empty) = r.fields().iter().position(|f| f.is_empty()) {
            return Err(Error::InvalidInput(format!("{} is empty", FIELDS[empty])));
        }
        Ok(r)
    }

    fn fields(&self) -> [&str; 3] {
        [&self.task_id, &self.query_text, &self.target_text]
    }

    /// Templated query input; the task id doubles as the task definition.
    pub fn query_input(&self) -> Result<String> {
        build_query_input(&self.task_id, &self.query_text)
    }
}

/// Task ids of the generated corpus. The second lists query facets in reverse.
pub const TASKS: [&str; 2] = ["find item", "match reversed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_facets: usize,
    pub num_entities: usize,
    pub pairs_per_entity: usize,
    /// Probability that a facet is left out of a query (one always survives).
    pub facet_dropout: f64,
    /// Entities per group sharing the first facet.
    pub group_size: usize,
    /// Distinct words available to each facet after the first.
    pub values_per_facet: usize,
    /// Fraction of groups held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_facets: 3,
            num_entities: 512,
            pairs_per_entity: 2,
            facet_dropout: 0.25,
            group_size: 4,
            values_per_facet: 8,
            eval_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_facets < 2 {
            return fail(format!("num_facets must be at least 2, got {}", self.num_facets));
        }
        if self.num_entities == 0 || self.pairs_per_entity == 0 {
            return fail("num_entities and pairs_per_entity must be positive".into());
        }
        if self.group_size == 0 || !self.num_entities.is_multiple_of(self.group_size) {
            return fail("num_entities must be a positive multiple of group_size".into());
        }
        let combos = (self.values_per_facet as f64).powi(self.num_facets as i32 - 1);
        if (self.group_size as f64) > combos {
            return fail("group_size exceeds the distinct tails the other facets allow".into());
        }
        if !(0.0..=1.0).contains(&self.facet_dropout) || !(0.0..=1.0).contains(&self.eval_fraction) {
            return fail("probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.num_entities / self.group_size
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A generated corpus with entity and group ids per record.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<PairRecord>,
    pub entity: Vec<usize>,
    pub group: Vec<usize>,
    /// Facet words of each entity.
    pub facets: Vec<Vec<String>>,
    pub eval_groups: Vec<bool>,
}

/// Distinct pronounceable three-letter words.
fn word_pool(count: usize, rng: &mut ChaCha8Rng, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    const C: &[u8] = b"bcdfghjklmnprstvwz";
    const V: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String =
            [C[rng.random_range(0..C.len())], V[rng.random_range(0..V.len())], C[rng.random_range(0..C.len())]]
                .iter()
                .map(|&b| b as char)
                .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = std::collections::HashSet::new();
    let heads = word_pool(spec.num_groups(), &mut rng, &mut taken);
    let tails: Vec<Vec<String>> =
        (1..spec.num_facets).map(|_| word_pool(spec.values_per_facet, &mut rng, &mut taken)).collect();

    let mut facets = Vec::with_capacity(spec.num_entities);
    for head in &heads {
        let mut seen = std::collections::HashSet::new();
        while seen.len() < spec.group_size {
            let tail: Vec<usize> = tails.iter().map(|t| rng.random_range(0..t.len())).collect();
            if seen.insert(tail.clone()) {
                let mut words = vec![head.clone()];
                words.extend(tail.iter().zip(&tails).map(|(&i, t)| t[i].clone()));
                facets.push(words);
            }
        }
    }

    let mut order: Vec<usize> = (0..spec.num_groups()).collect();
    order.shuffle(&mut rng);
    let held_out = ((spec.num_groups() as f64) * spec.eval_fraction).round() as usize;
    let mut eval_groups = vec![false; spec.num_groups()];
    for &g in &order[..held_out] {
        eval_groups[g] = true;
    }

    let mut records = Vec::new();
    let (mut entity, mut group) = (Vec::new(), Vec::new());
    for (e, words) in facets.iter().enumerate() {
        for _ in 0..spec.pairs_per_entity {
            let mut keep: Vec<usize> = (0..words.len()).filter(|_| !rng.random_bool(spec.facet_dropout)).collect();
            if keep.is_empty() {
                keep.push(rng.random_range(0..words.len()));
            }
            let task = TASKS[rng.random_range(0..TASKS.len())];
            if task == TASKS[1] {
                keep.reverse();
            }
            let query: Vec<&str> = keep.iter().map(|&i| words[i].as_str()).collect();
            records.push(PairRecord::new(task, &query.join(" "), &words.join(" "))?);
            entity.push(e);
            group.push(e / spec.group_size);
        }
    }
    Ok(SynthCorpus { records, entity, group, facets, eval_groups })
}

impl SynthCorpus {
    fn select(&self, eval: bool) -> Vec<PairRecord> {
        self.records
            .iter()
            .zip(&self.group)
            .filter(|(_, &g)| self.eval_groups[g] == eval)
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn train(&self) -> Vec<PairRecord> {
        self.select(false)
    }

    pub fn eval(&self) -> Vec<PairRecord> {
        self.select(true)
    }
}

/// Queries against the deduplicated pool of targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub tasks: Vec<String>,
    /// Templated query inputs.
    pub queries: Vec<String>,
    pub targets: Vec<String>,
    pub gold: Vec<usize>,
}

impl RetrievalSet {
    pub fn from_records(records: &[PairRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no records".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut set = Self { tasks: Vec::new(), queries: Vec::new(), targets: Vec::new(), gold: Vec::new() };
        for r in records {
            let next = set.targets.len();
            let g = *index.entry(&r.target_text).or_insert(next);
            if g == next {
                set.targets.push(r.target_text.clone());
            }
            set.tasks.push(r.task_id.clone());
            set.queries.push(r.query_input()?);
            set.gold.push(g);
        }
        Ok(set)
    }
}

/// Token ids of a templated query and its untemplated target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub query: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn tokenize_pairs(records: &[PairRecord], vocab: &TokenVocab) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| Ok(Example { query: tokenize(&r.query_input()?, vocab)?, target: tokenize(&r.target_text, vocab)? }))
        .collect()
}

/// Scores each query by whether it mentions a target's first facet word and
/// nothing else; ties, including queries with no first-facet word, go to the
/// lowest index. Returns P@1 over the set.
pub fn first_facet_matcher_precision(set: &RetrievalSet) -> f64 {
    let head = |t: &str| t.split(' ').next().unwrap_or("").to_string();
    let heads: Vec<String> = set.targets.iter().map(|t| head(t)).collect();
    let mut hits = 0;
    for (q, &gold) in set.queries.iter().zip(&set.gold) {
        let body = q.rsplit(" Query: ").next().unwrap_or(q);
        let words: Vec<&str> = body.split(' ').collect();
        let pick = heads.iter().position(|h| words.contains(&h.as_str())).unwrap_or(0);
        hits += usize::from(pick == gold);
    }
    hits as f64 / set.queries.len() as f64
}

pub fn save_pairs(records: &[PairRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses one JSON Lines record; `line` is 1-based and only used in errors.
pub fn parse_pair_line(text: &str, line: usize) -> Result<PairRecord> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse { line, message: e.to_string() })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse { line, message: "expected a JSON object".into() })?;
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(Error::Parse { line, message: format!("unknown field `{extra}`") });
    }
    let mut fields = Vec::with_capacity(3);
    for name in FIELDS {
        let v = obj.get(name).ok_or_else(|| Error::Schema { line, field: name.into() })?;
        let s = v.as_str().ok_or_else(|| Error::Parse { line, message: format!("`{name}` must be a string") })?;
        if s.is_empty() {
            return Err(Error::Parse { line, message: format!("`{name}` is empty") });
        }
        fields.push(s.to_string());
    }
    let [task_id, query_text, target_text]: [String; 3] = fields.try_into().unwrap();
    Ok(PairRecord { task_id, query_text, target_text })
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_text = line.map_err(|e| Error::io(path, e))?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(parse_pair_line(&line_text, i + 1)?);
    }
    Ok(out)
}
