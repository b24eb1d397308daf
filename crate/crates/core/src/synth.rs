//! Synthetic chain benchmarks with exact MAP labels.
//!
//! Every instance is a chain of `L` binary variables with
//!
//! * unary log-potentials drawn from `U[0, 1]` per state,
//! * a pairwise factor on each `(i, i+1)`,
//! * a budget factor on each full window `i..i+W` that is 0 when at most
//!   `k` of its variables are 1 and [`PENALTY`] otherwise.
//!
//! Dataset 1 uses the fixed pairwise table `[[0, 0.1], [0.2, 1]]`. Datasets
//! 2 and 3 draw the `(1, 1)` entry from `U[0, 2]` and leave the rest at 0.
//! Dataset 3 also draws `k` uniformly from `1..=W` for each budget factor.
//!
//! # Random numbers
//!
//! All draws come from SplitMix64 seeded with the instance seed, in this
//! order: unary pairs for `i = 0..L`, then pairwise values (datasets 2 and
//! 3), then budget sizes (dataset 3). A uniform draw is
//! `(next_u64() >> 11) · 2⁻⁵³`; an integer in `lo..=hi` is
//! `lo + next_u64() % (hi - lo + 1)`. Instance `n` of a dataset (counting
//! train, then validation, then test) uses seed `seed · 10⁶ + n`.

use std::io::{BufRead, Write};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::fgnn::FeatureSet;
use crate::numkit::Tensor;
use crate::pgm::{window_dp_map, Assignment, FactorGraph, FactorNode, VariableNode, PENALTY};

/// Version tag of the dataset header line.
pub const DATASET_FORMAT: &str = "fgnn-dataset-v1";

/// Instances per seed block; the per-instance seed is `seed · 10⁶ + n`.
pub const SEED_STRIDE: u64 = 1_000_000;

/// Portable random stream used by generators and initialisers.
#[derive(Clone, Debug)]
pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `lo..=hi`.
    pub fn int_in(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next_u64() % (hi - lo + 1)
    }
}

/// Generator parameters recorded with each instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub dataset_id: u8,
    pub seed: u64,
    pub chain_length: usize,
    pub window: usize,
    /// Budget size of each budget factor, in factor order.
    pub budget_k: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub graph: FactorGraph,
    pub features: FeatureSet,
    pub label: Assignment,
    pub meta: InstanceMeta,
}

/// Width of the factor features for a dataset schema.
pub fn factor_feature_dim(dataset_id: u8, window: usize) -> usize {
    match dataset_id {
        1 => 0,
        2 => 1,
        _ => 1 + window,
    }
}

/// Width of the edge features: factor kind one-hot, then scope position.
pub fn edge_feature_dim(window: usize) -> usize {
    2 + window
}

fn budget_table(window: usize, k: usize) -> Tensor {
    let values = (0..1usize << window)
        .map(|off| if off.count_ones() as usize <= k { 0.0 } else { PENALTY })
        .collect();
    Tensor::new(vec![2; window], values).expect("shape matches")
}

fn check_sizes(dataset_id: u8, length: usize, window: usize, k_budget: usize) -> Result<()> {
    if !(1..=3).contains(&dataset_id) {
        bail!(Argument, "dataset id must be 1, 2 or 3, got {dataset_id}");
    }
    if window < 2 || length < window {
        bail!(Argument, "need length >= window >= 2, got length {length}, window {window}");
    }
    if window > 20 {
        bail!(Argument, "window {window} is too wide for exact labelling");
    }
    if dataset_id != 3 && k_budget > window {
        bail!(Argument, "budget {k_budget} exceeds the window {window}");
    }
    Ok(())
}

pub fn gen_instance(dataset_id: u8, seed: u64, length: usize, window: usize, k_budget: usize) -> Result<DatasetInstance> {
    check_sizes(dataset_id, length, window, k_budget)?;
    let mut rng = Rng::new(seed);
    let variables: Vec<VariableNode> = (0..length)
        .map(|i| {
            let lp = vec![rng.uniform(), rng.uniform()];
            VariableNode::new(i, lp)
        })
        .collect();
    let pair_11: Vec<f64> = (0..length - 1)
        .map(|_| if dataset_id == 1 { 1.0 } else { 2.0 * rng.uniform() })
        .collect();
    let n_budget = length - window + 1;
    let budget_k: Vec<usize> = (0..n_budget)
        .map(|_| if dataset_id == 3 { rng.int_in(1, window as u64) as usize } else { k_budget })
        .collect();

    let mut factors = Vec::with_capacity(length - 1 + n_budget);
    for (i, &v) in pair_11.iter().enumerate() {
        let table = if dataset_id == 1 { vec![0.0, 0.1, 0.2, 1.0] } else { vec![0.0, 0.0, 0.0, v] };
        factors.push(FactorNode::new(factors.len(), vec![i, i + 1], Tensor::new(vec![2, 2], table)?));
    }
    for (s, &k) in budget_k.iter().enumerate() {
        factors.push(FactorNode::new(factors.len(), (s..s + window).collect(), budget_table(window, k)));
    }
    let graph = FactorGraph::new(variables, factors)?;
    let (label, _) = window_dp_map(&graph, window)?;

    let fdim = factor_feature_dim(dataset_id, window);
    let node = graph.variables().iter().map(|v| v.log_potential.clone()).collect();
    let mut factor = Vec::with_capacity(graph.num_factors());
    for &v in &pair_11 {
        let mut f = vec![0.0; fdim];
        if dataset_id != 1 {
            f[0] = v;
        }
        factor.push(f);
    }
    for &k in &budget_k {
        let mut f = vec![0.0; fdim];
        if dataset_id == 3 {
            f[k] = 1.0;
        }
        factor.push(f);
    }
    let edge = graph
        .edges()
        .iter()
        .map(|e| {
            let mut t = vec![0.0; edge_feature_dim(window)];
            t[usize::from(e.factor >= length - 1)] = 1.0;
            t[2 + e.position] = 1.0;
            t
        })
        .collect();
    let features = FeatureSet::new(node, factor, edge)?;

    Ok(DatasetInstance {
        graph,
        features,
        label,
        meta: InstanceMeta {
            dataset_id,
            seed,
            chain_length: length,
            window,
            budget_k,
        },
    })
}

/// Parameters shared by every instance of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: u8,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub chain_length: usize,
    pub window: usize,
    pub k_budget: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetInstance>,
    pub val: Vec<DatasetInstance>,
    pub test: Vec<DatasetInstance>,
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    check_sizes(spec.dataset_id, spec.chain_length, spec.window, spec.k_budget)?;
    let total = spec.n_train + spec.n_val + spec.n_test;
    if total as u64 > SEED_STRIDE {
        bail!(Argument, "at most {SEED_STRIDE} instances per seed, asked for {total}");
    }
    let Some(base) = spec.seed.checked_mul(SEED_STRIDE) else {
        bail!(Argument, "seed {} is too large", spec.seed);
    };
    if base.checked_add(total as u64).is_none() {
        bail!(Argument, "seed {} is too large", spec.seed);
    }
    let make = |offset: usize, n: usize| -> Result<Vec<DatasetInstance>> {
        (0..n)
            .into_par_iter()
            .map(|j| {
                gen_instance(
                    spec.dataset_id,
                    base + (offset + j) as u64,
                    spec.chain_length,
                    spec.window,
                    spec.k_budget,
                )
            })
            .collect()
    };
    Ok(Dataset {
        train: make(0, spec.n_train)?,
        val: make(spec.n_train, spec.n_val)?,
        test: make(spec.n_train + spec.n_val, spec.n_test)?,
    })
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub split: String,
    pub count: usize,
    pub spec: DatasetSpec,
}

impl DatasetHeader {
    pub fn new(split: &str, count: usize, spec: &DatasetSpec) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            split: split.to_string(),
            count,
            spec: spec.clone(),
        }
    }
}

/// Writes the header line, then one instance per line.
pub fn write_jsonl(mut w: impl Write, header: &DatasetHeader, instances: &[DatasetInstance]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<(DatasetHeader, Vec<DatasetInstance>)> {
    let mut lines = r.lines();
    let Some(first) = lines.next() else {
        bail!(Format, "empty dataset file");
    };
    let header: DatasetHeader = serde_json::from_str(&first?)?;
    if header.format != DATASET_FORMAT {
        bail!(Format, "expected format {DATASET_FORMAT}, found {}", header.format);
    }
    let mut instances = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        instances.push(serde_json::from_str(&line)?);
    }
    if instances.len() != header.count {
        bail!(Format, "header announces {} instances, file has {}", header.count, instances.len());
    }
    Ok((header, instances))
}
