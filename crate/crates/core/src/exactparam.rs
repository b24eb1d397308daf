//! Hand-built parameters under which an FGNN computes max-product exactly.
//!
//! The pieces:
//!
//! * [`build_max_net`]: a ReLU tournament computing `max_j x_j`, using
//!   `max(a, b) = relu(a − b) + relu(b) − relu(−b)`.
//! * [`build_sum_via_max`]: non-negative rows routed into disjoint blocks,
//!   a max across rows, and a fixed linear map summing the blocks. This is
//!   how the emulator below turns per-edge values into per-factor sums: each
//!   edge writes into its own slot, every other slot receives 0, and the max
//!   aggregation of the FGNN keeps each slot intact.
//! * [`build_decomposition_layer`]: one FGNN layer mapping flattened factor
//!   tables to the decomposed tables `φ_ic(x_i, z)`.
//! * [`build_bp_emulator`]: the decomposition layer followed by one FGNN
//!   layer per decomposed max-product iteration, and a linear readout that
//!   adds the unary term to the incoming messages.
//!
//! All features live in a fixed padded layout ([`EmulatorLayout`]): `S` the
//! largest arity, `K` the largest cardinality, `Z` the largest table and `D`
//! the largest variable degree. Factor features are
//! `[U (S·Z), Φ (S·K·Z)]`, where `U[p]` holds the max-marginal sent from scope
//! position `p` and `Φ[q][x][z]` the decomposed table. Node features are
//! `[θ (K), W (D·K)]`, where `W[d]` holds the message on the variable's
//! `d`-th edge. Padded table rows get a large negative value so they never
//! win a max.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decomp::{decompose_graph, DecomposedFactor};
use crate::error::{bail, Result};
use crate::fgnn::{stack_forward, FeatureSet, FgnnLayerParams, FgnnStack, HalfParams, StackLayer};
use crate::numkit::{unravel_into, Activation, DenseLayer, DenseNet, Matrix, Tensor};
use crate::pgm::FactorGraph;

/// Version tag of the recipe sidecar written next to emulator parameters.
pub const RECIPE_FORMAT: &str = "fgnn-recipe-v1";

/// Largest number of `Q` weights an emulator may allocate.
pub const MAX_Q_WEIGHTS: usize = 50_000_000;

fn ceil_log2(n: usize) -> usize {
    n.next_power_of_two().trailing_zeros() as usize
}

/// Affine expression `Σ coef·x[col] + bias` over one layer's input.
#[derive(Clone, Debug, Default)]
struct Expr {
    terms: BTreeMap<usize, f64>,
    bias: f64,
}

impl Expr {
    fn sum(terms: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut e = Expr::default();
        for (c, v) in terms {
            *e.terms.entry(c).or_insert(0.0) += v;
        }
        e
    }

    fn constant(bias: f64) -> Self {
        Expr {
            terms: BTreeMap::new(),
            bias,
        }
    }

    fn combine(parts: &[(&Expr, f64)]) -> Self {
        let mut e = Expr::default();
        for (p, s) in parts {
            for (&c, &v) in &p.terms {
                *e.terms.entry(c).or_insert(0.0) += s * v;
            }
            e.bias += s * p.bias;
        }
        e.terms.retain(|_, v| *v != 0.0);
        e
    }
}

fn dense_layer(rows: &[Expr], input_dim: usize, activation: Activation) -> DenseLayer {
    let mut w = Matrix::zeros(rows.len(), input_dim);
    for (r, e) in rows.iter().enumerate() {
        for (&c, &v) in &e.terms {
            w.set(r, c, v);
        }
    }
    let bias = rows.iter().map(|e| e.bias).collect();
    DenseLayer::new(w, bias, activation).expect("one bias per row")
}

/// Rows of one tournament round: `[a−b, b, −b]` per pair, `[x, −x]` for a
/// carried item. Returns the relu rows and, per item of the next round, its
/// combination of those rows.
fn round_rows(items: &[Expr], rows: &mut Vec<Expr>) -> Vec<Expr> {
    let mut next = Vec::with_capacity(items.len().div_ceil(2));
    for chunk in items.chunks(2) {
        let base = rows.len();
        match chunk {
            [a, b] => {
                rows.push(Expr::combine(&[(a, 1.0), (b, -1.0)]));
                rows.push(b.clone());
                rows.push(Expr::combine(&[(b, -1.0)]));
                next.push(Expr::sum([(base, 1.0), (base + 1, 1.0), (base + 2, -1.0)]));
            }
            [x] => {
                rows.push(x.clone());
                rows.push(Expr::combine(&[(x, -1.0)]));
                next.push(Expr::sum([(base, 1.0), (base + 1, -1.0)]));
            }
            _ => unreachable!(),
        }
    }
    next
}

/// ReLU network emitting `[max of each group, passthrough values]`, where
/// every item is an affine expression of the input. The input map is folded
/// into the first layer. Each round is a ReLU layer followed by an identity
/// layer; passthrough values ride along as `relu(v) − relu(−v)`.
fn group_max_net(input_dim: usize, groups: Vec<Vec<Expr>>, passthrough: Vec<Expr>) -> DenseNet {
    assert!(groups.iter().all(|g| !g.is_empty()), "empty max group");
    let mut groups = groups;
    let mut pass = passthrough;
    let mut layers = Vec::new();
    let mut dim = input_dim;
    while groups.iter().any(|g| g.len() > 1) {
        let mut relu = Vec::new();
        let next_groups: Vec<Vec<Expr>> = groups.iter().map(|g| round_rows(g, &mut relu)).collect();
        let next_pass = round_rows_single(&pass, &mut relu);
        layers.push(dense_layer(&relu, dim, Activation::Relu));
        let ident: Vec<Expr> = next_groups.iter().flatten().chain(&next_pass).cloned().collect();
        layers.push(dense_layer(&ident, relu.len(), Activation::Identity));
        dim = ident.len();
        let mut at = 0;
        let mut unit = |n: usize| {
            let v: Vec<Expr> = (at..at + n).map(|c| Expr::sum([(c, 1.0)])).collect();
            at += n;
            v
        };
        groups = next_groups.iter().map(|g| unit(g.len())).collect();
        pass = unit(next_pass.len());
    }
    if layers.is_empty() {
        let rows: Vec<Expr> = groups.into_iter().flatten().chain(pass).collect();
        layers.push(dense_layer(&rows, input_dim, Activation::Identity));
    }
    DenseNet::new(input_dim, layers).expect("layers chain by construction")
}

fn round_rows_single(items: &[Expr], rows: &mut Vec<Expr>) -> Vec<Expr> {
    items
        .iter()
        .map(|x| {
            let base = rows.len();
            rows.push(x.clone());
            rows.push(Expr::combine(&[(x, -1.0)]));
            Expr::sum([(base, 1.0), (base + 1, -1.0)])
        })
        .collect()
}

/// A ReLU network with `2·ceil(log2 n)` layers and hidden width at most
/// `2n` computing `max_j x_j` over `n` inputs. For `n = 1` the network is
/// empty.
///
/// # Panics
///
/// If `n == 0`.
pub fn build_max_net(n: usize) -> DenseNet {
    assert!(n >= 1, "max over zero inputs");
    if n == 1 {
        return DenseNet::identity(1);
    }
    let items = (0..n).map(|j| Expr::sum([(j, 1.0)])).collect();
    let net = group_max_net(n, vec![items], Vec::new());
    assert_eq!(net.depth(), 2 * ceil_log2(n), "max net depth");
    assert!(net.hidden_width() <= 2 * n, "max net width");
    net
}

/// Fixed tensors summing the rows of a non-negative `m × n` matrix with one
/// max and two linear maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumViaMaxGadget {
    /// Shape `[m, n, m·n]`; routes row `i` into block `i`.
    pub w: Tensor,
    /// Shape `[n, m·n]`; adds the blocks.
    pub q: Matrix,
}

pub fn build_sum_via_max(m: usize, n: usize) -> SumViaMaxGadget {
    let w = Tensor::from_fn(vec![m, n, m * n], |ix| if ix[2] == ix[0] * n + ix[1] { 1.0 } else { 0.0 })
        .expect("positive shape");
    let mut q = Matrix::zeros(n, m * n);
    for i in 0..m {
        for j in 0..n {
            q.set(j, i * n + j, 1.0);
        }
    }
    SumViaMaxGadget { w, q }
}

impl SumViaMaxGadget {
    pub fn rows(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.w.shape()[1]
    }

    /// `Q · max_i (Σ_j x_ij w_ij·)`; equals the column sums of `x`.
    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (m, n) = (self.rows(), self.cols());
        if x.len() != m || x.iter().any(|r| r.len() != n) {
            bail!(Shape, "gadget takes a {m} x {n} input");
        }
        if let Some(v) = x.iter().flatten().find(|v| !(**v >= 0.0)) {
            bail!(Domain, "gadget input {v} is negative");
        }
        let mn = m * n;
        let w = self.w.values();
        let mut y_hat = vec![f64::NEG_INFINITY; mn];
        for (i, row) in x.iter().enumerate() {
            for (k, y) in y_hat.iter_mut().enumerate() {
                let v: f64 = row.iter().enumerate().map(|(j, xij)| xij * w[(i * n + j) * mn + k]).sum();
                *y = y.max(v);
            }
        }
        Ok(self.q.matvec(&y_hat))
    }
}

/// Padded sizes shared by every feature of an emulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmulatorLayout {
    pub max_arity: usize,
    pub max_cardinality: usize,
    pub max_table_len: usize,
    pub max_degree: usize,
    pub num_edges: usize,
}

impl EmulatorLayout {
    pub fn of(g: &FactorGraph) -> Result<Self> {
        if let Some(i) = (0..g.num_variables()).find(|&i| g.variable_edges(i).is_empty()) {
            bail!(Structure, "variable {i} belongs to no factor");
        }
        let fs = g.factors();
        Ok(Self {
            max_arity: fs.iter().map(|f| f.arity()).max().unwrap_or(0),
            max_cardinality: g.variables().iter().map(|v| v.cardinality).max().unwrap_or(0),
            max_table_len: fs.iter().map(|f| f.table_len()).max().unwrap_or(0),
            max_degree: g.max_degree(),
            num_edges: g.edges().len(),
        })
    }

    /// Width of factor features inside the emulator.
    pub fn factor_width(&self) -> usize {
        let (s, k, z) = (self.max_arity, self.max_cardinality, self.max_table_len);
        s * z + s * k * z
    }

    /// Width of node features inside the emulator.
    pub fn node_width(&self) -> usize {
        self.max_cardinality * (1 + self.max_degree)
    }

    fn u(&self, q: usize, z: usize) -> usize {
        q * self.max_table_len + z
    }

    fn phi(&self, q: usize, x: usize, z: usize) -> usize {
        let (s, k, zl) = (self.max_arity, self.max_cardinality, self.max_table_len);
        s * zl + (q * k + x) * zl + z
    }

    fn w(&self, d: usize, x: usize) -> usize {
        self.max_cardinality * (1 + d) + x
    }
}

/// Describes how to build the input features of an emulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub format: String,
    pub layout: EmulatorLayout,
    pub iterations: usize,
}

impl Recipe {
    pub fn new(g: &FactorGraph, iterations: usize) -> Result<Self> {
        Ok(Self {
            format: RECIPE_FORMAT.to_string(),
            layout: EmulatorLayout::of(g)?,
            iterations,
        })
    }

    /// One-hot edge ids, flattened factor tables padded to `Z`, unary tables
    /// padded to `K`.
    pub fn features(&self, g: &FactorGraph) -> Result<FeatureSet> {
        if self.format != RECIPE_FORMAT {
            bail!(Format, "expected format {RECIPE_FORMAT}, found {}", self.format);
        }
        let layout = EmulatorLayout::of(g)?;
        if layout != self.layout {
            bail!(Structure, "graph layout {layout:?} does not match recipe {:?}", self.layout);
        }
        let pad = |v: &[f64], n: usize| {
            let mut out = v.to_vec();
            out.resize(n, 0.0);
            out
        };
        let node = g.variables().iter().map(|v| pad(&v.log_potential, layout.max_cardinality)).collect();
        let factor = g
            .factors()
            .iter()
            .map(|f| pad(f.log_potential.values(), layout.max_table_len))
            .collect();
        let edge = (0..layout.num_edges)
            .map(|e| {
                let mut t = vec![0.0; layout.num_edges];
                t[e] = 1.0;
                t
            })
            .collect();
        FeatureSet::new(node, factor, edge)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Recipe = serde_json::from_str(text)?;
        if r.format != RECIPE_FORMAT {
            bail!(Format, "expected format {RECIPE_FORMAT}, found {}", r.format);
        }
        Ok(r)
    }
}

fn prepared_decomposition(g: &FactorGraph) -> Result<Vec<DecomposedFactor>> {
    for v in g.variables() {
        if let Some(bad) = v.log_potential.iter().find(|&&t| !(t >= 0.0)) {
            bail!(Domain, "variable {} has unary entry {bad} < 0; shift the graph first", v.id);
        }
    }
    decompose_graph(g)
}

/// Magnitude used for padded states. Beliefs after `t` iterations are
/// bounded by `B_t`, with `B_0 = max θ_i` and
/// `B_{t+1} = max θ_i + D·(S·max θ_c + (S−1)·B_t)`.
fn padding_magnitude(g: &FactorGraph, layout: &EmulatorLayout, d: &[DecomposedFactor], k: usize) -> f64 {
    let s = layout.max_arity as f64;
    let deg = layout.max_degree as f64;
    let theta = g
        .variables()
        .iter()
        .flat_map(|v| v.log_potential.iter().copied())
        .fold(0.0, f64::max);
    let theta_c = g.factors().iter().map(|f| f.log_potential.max_abs()).fold(0.0, f64::max);
    let p_max = d.iter().map(|f| f.penalty).fold(0.0, f64::max);
    let mut b = theta;
    for _ in 0..k {
        b = theta + deg * (s * theta_c + (s - 1.0) * b);
    }
    p_max + s * (theta_c + b) + 1.0
}

/// `Q(t) = W t + b` with `W` given per edge as sparse `(row, col, value)`
/// triples of the `rows × cols` output matrix.
fn edge_q(rows: usize, cols: usize, num_edges: usize, shared: &[(usize, usize, f64)], per_edge: &[Vec<(usize, usize, f64)>]) -> DenseNet {
    let mut w = Matrix::zeros(rows * cols, num_edges);
    let mut b = vec![0.0; rows * cols];
    for &(r, c, v) in shared {
        b[r * cols + c] = v;
    }
    for (e, entries) in per_edge.iter().enumerate() {
        for &(r, c, v) in entries {
            w.set(r * cols + c, e, v);
        }
    }
    DenseNet::single(w, b, Activation::Identity).expect("bias matches rows")
}

fn linear_net(rows: &[Expr], input_dim: usize) -> DenseNet {
    DenseNet::new(input_dim, vec![dense_layer(rows, input_dim, Activation::Identity)]).expect("one layer")
}

fn check_capacity(layout: &EmulatorLayout, k: usize) -> Result<()> {
    let fw = layout.factor_width();
    let per_layer = fw * fw + layout.node_width() * (layout.max_arity + 1) * layout.max_cardinality;
    let total = (fw * (1 + layout.max_table_len) + layout.node_width() * layout.max_cardinality)
        .saturating_add(k.saturating_mul(per_layer))
        .saturating_mul(layout.num_edges);
    if total > MAX_Q_WEIGHTS {
        bail!(Capacity, "emulator would need {total} Q weights, limit is {MAX_Q_WEIGHTS}");
    }
    Ok(())
}

fn decomposition_layer(g: &FactorGraph, layout: &EmulatorLayout, d: &[DecomposedFactor], big: f64) -> FgnnLayerParams {
    let (k, z_max) = (layout.max_cardinality, layout.max_table_len);
    let fw = layout.factor_width();
    let nw = layout.node_width();
    let e_count = layout.num_edges;

    // VF: M = [1, g_c]; Q(e) writes Φ of the edge's factor.
    let m_rows: Vec<Expr> = std::iter::once(Expr::constant(1.0))
        .chain((0..z_max).map(|z| Expr::sum([(z, 1.0)])))
        .collect();
    let vf_m = linear_net(&m_rows, z_max + k);
    let mut per_edge = Vec::with_capacity(e_count);
    for edge in g.edges() {
        let f = &g.factors()[edge.factor];
        let dc = &d[edge.factor];
        let shape = f.log_potential.shape();
        let inv = 1.0 / f.arity() as f64;
        let mut config = vec![0; f.arity()];
        let mut entries = Vec::new();
        for q in 0..f.arity() {
            for x in 0..k {
                for z in 0..z_max {
                    let row = layout.phi(q, x, z);
                    if x >= shape[q] {
                        entries.push((row, 0, -big));
                    } else if z >= dc.z_cardinality {
                        entries.push((row, 0, -dc.penalty));
                    } else {
                        unravel_into(shape, z, &mut config);
                        if config[q] == x {
                            entries.push((row, 1 + z, inv));
                        } else {
                            entries.push((row, 0, -dc.penalty));
                        }
                    }
                }
            }
        }
        per_edge.push(entries);
    }
    let vf = HalfParams::new(vf_m, edge_q(fw, 1 + z_max, e_count, &[], &per_edge), fw).expect("Q shape");

    // FV: M passes θ through; Q places it first and leaves the message slots at 0.
    let m_rows: Vec<Expr> = (0..k).map(|x| Expr::sum([(fw + x, 1.0)])).collect();
    let fv_m = linear_net(&m_rows, fw + k);
    let shared: Vec<_> = (0..k).map(|x| (x, x, 1.0)).collect();
    let fv = HalfParams::new(fv_m, edge_q(nw, k, e_count, &shared, &vec![Vec::new(); e_count]), nw).expect("Q shape");
    FgnnLayerParams { vf, fv }
}

fn bp_layer(g: &FactorGraph, layout: &EmulatorLayout) -> FgnnLayerParams {
    let (s, k, z_max, deg) = (layout.max_arity, layout.max_cardinality, layout.max_table_len, layout.max_degree);
    let fw = layout.factor_width();
    let nw = layout.node_width();
    let e_count = layout.num_edges;
    let input = fw + nw;

    // VF: u_q(z) = max_x Φ_q(x, z) + θ(x) + Σ_d W_d(x), Φ passed through.
    let groups = (0..s)
        .flat_map(|q| (0..z_max).map(move |z| (q, z)))
        .map(|(q, z)| {
            (0..k)
                .map(|x| {
                    Expr::sum(
                        [(layout.phi(q, x, z), 1.0), (fw + x, 1.0)]
                            .into_iter()
                            .chain((0..deg).map(|d| (fw + layout.w(d, x), 1.0))),
                    )
                })
                .collect()
        })
        .collect();
    let pass = (s * z_max..fw).map(|c| Expr::sum([(c, 1.0)])).collect();
    let vf_m = group_max_net(input, groups, pass);
    let shared: Vec<_> = (s * z_max..fw).map(|r| (r, r, 1.0)).collect();
    let per_edge: Vec<Vec<_>> = g
        .edges()
        .iter()
        .map(|e| (0..z_max).map(|z| (layout.u(e.position, z), layout.u(e.position, z), 1.0)).collect())
        .collect();
    let vf = HalfParams::new(vf_m, edge_q(fw, fw, e_count, &shared, &per_edge), fw).expect("Q shape");

    // FV: w_q(x) = max_z Φ_q(x, z) + Σ_{q'≠q} U[q', z], θ passed through.
    let groups = (0..s)
        .flat_map(|q| (0..k).map(move |x| (q, x)))
        .map(|(q, x)| {
            (0..z_max)
                .map(|z| {
                    Expr::sum(
                        (0..s)
                            .filter(|&q2| q2 != q)
                            .map(|q2| (layout.u(q2, z), 1.0))
                            .chain([(layout.phi(q, x, z), 1.0)]),
                    )
                })
                .collect()
        })
        .collect();
    let pass = (0..k).map(|x| Expr::sum([(fw + x, 1.0)])).collect();
    let fv_m = group_max_net(input, groups, pass);
    let cols = s * k + k;
    let shared: Vec<_> = (0..k).map(|x| (x, s * k + x, 1.0)).collect();
    let mut per_edge = vec![Vec::new(); e_count];
    for i in 0..g.num_variables() {
        for (d, &e) in g.variable_edges(i).iter().enumerate() {
            let p = g.edges()[e].position;
            per_edge[e] = (0..k).map(|x| (layout.w(d, x), p * k + x, 1.0)).collect();
        }
    }
    let fv = HalfParams::new(fv_m, edge_q(nw, cols, e_count, &shared, &per_edge), nw).expect("Q shape");
    FgnnLayerParams { vf, fv }
}

/// One FGNN layer whose factor outputs hold the decomposed tables of every
/// factor (see [`deblock_factor`]), with the recipe features of `g`.
/// Requires factor entries ≥ 1 and unary entries ≥ 0.
pub fn build_decomposition_layer(g: &FactorGraph) -> Result<(FgnnLayerParams, FeatureSet)> {
    let d = prepared_decomposition(g)?;
    let recipe = Recipe::new(g, 0)?;
    check_capacity(&recipe.layout, 0)?;
    let big = padding_magnitude(g, &recipe.layout, &d, 0);
    let params = decomposition_layer(g, &recipe.layout, &d, big);
    Ok((params, recipe.features(g)?))
}

/// Reads the tables `φ_ic(x, z)`, `K_i × |Z_c|`, of factor `c` out of an
/// emulator factor feature.
pub fn deblock_factor(g: &FactorGraph, layout: &EmulatorLayout, c: usize, feature: &[f64]) -> Result<Vec<Matrix>> {
    if feature.len() != layout.factor_width() {
        bail!(Shape, "factor feature has width {}, layout needs {}", feature.len(), layout.factor_width());
    }
    let Some(f) = g.factors().get(c) else {
        bail!(Index, "factor {c} out of range");
    };
    let z_len = f.table_len();
    Ok(f.log_potential
        .shape()
        .iter()
        .enumerate()
        .map(|(q, &kq)| {
            let mut m = Matrix::zeros(kq, z_len);
            for x in 0..kq {
                for z in 0..z_len {
                    m.set(x, z, feature[layout.phi(q, x, z)]);
                }
            }
            m
        })
        .collect())
}

/// An FGNN stack that, run on [`Recipe::features`], produces after its
/// readout the beliefs of `k` decomposed max-product iterations (padded to
/// the largest cardinality). The stack has `k + 1` FGNN layers when
/// `k > 0`: the decomposition layer and one per iteration.
pub fn build_bp_emulator(g: &FactorGraph, k: usize) -> Result<FgnnStack> {
    let d = prepared_decomposition(g)?;
    let layout = EmulatorLayout::of(g)?;
    check_capacity(&layout, k)?;
    let kk = layout.max_cardinality;
    let (nd, fd, ed) = (kk, layout.max_table_len, layout.num_edges);
    if k == 0 {
        let readout = linear_net(&(0..kk).map(|x| Expr::sum([(x, 1.0)])).collect::<Vec<_>>(), kk);
        return FgnnStack::new(nd, fd, ed, Vec::new(), Some(readout));
    }
    let big = padding_magnitude(g, &layout, &d, k);
    let mut layers = vec![StackLayer::Fgnn(decomposition_layer(g, &layout, &d, big))];
    let layer = bp_layer(g, &layout);
    layers.extend(std::iter::repeat_n(StackLayer::Fgnn(layer), k));
    let readout_rows: Vec<Expr> = (0..kk)
        .map(|x| Expr::sum(std::iter::once((x, 1.0)).chain((0..layout.max_degree).map(|dd| (layout.w(dd, x), 1.0)))))
        .collect();
    let readout = linear_net(&readout_rows, layout.node_width());
    FgnnStack::new(nd, fd, ed, layers, Some(readout))
}

/// Builds the emulator for `g` and runs it, returning per-variable beliefs
/// cut to each variable's cardinality.
pub fn emulate_max_product(g: &FactorGraph, k: usize) -> Result<Vec<Vec<f64>>> {
    let stack = build_bp_emulator(g, k)?;
    let feats = Recipe::new(g, k)?.features(g)?;
    let out = stack.node_outputs(g, &feats)?;
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, mut b)| {
            b.truncate(g.cardinality(i));
            b
        })
        .collect())
}

/// Factor features after running only the decomposition layer.
pub fn decomposition_features(g: &FactorGraph) -> Result<Vec<Vec<f64>>> {
    let (p, feats) = build_decomposition_layer(g)?;
    let s = FgnnStack::new(
        feats.node_dim(),
        feats.factor_dim(),
        feats.edge_dim(),
        vec![StackLayer::Fgnn(p)],
        None,
    )?;
    Ok(stack_forward(&s, g, &feats)?.factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::decompose_factor;
    use crate::maxprod::{run_max_product, Mode};
    use crate::pgm::{FactorNode, VariableNode};

    #[test]
    fn max_net_examples() {
        let net = build_max_net(2);
        assert_eq!(net.forward(&[3.0, 5.0]).unwrap(), vec![5.0]);
        assert_eq!(net.forward(&[5.0, 3.0]).unwrap(), vec![5.0]);
        let net = build_max_net(7);
        for c in [-1.0, 0.0, 4.0] {
            assert_eq!(net.forward(&[c; 7]).unwrap(), vec![c]);
        }
        assert_eq!(net.depth(), 6);
        assert_eq!(build_max_net(1).depth(), 0);
        assert_eq!(build_max_net(1).forward(&[-2.5]).unwrap(), vec![-2.5]);
    }

    #[test]
    fn group_net_with_passthrough() {
        let groups = vec![
            vec![Expr::sum([(0, 1.0)]), Expr::sum([(1, 1.0)]), Expr::sum([(2, 1.0)])],
            vec![Expr::sum([(0, 1.0), (1, 1.0)])],
        ];
        let net = group_max_net(3, groups, vec![Expr::sum([(2, -1.0)])]);
        assert_eq!(net.forward(&[1.0, -4.0, 2.0]).unwrap(), vec![2.0, -3.0, -2.0]);
    }

    #[test]
    fn sum_via_max_examples() {
        let gadget = build_sum_via_max(2, 2);
        assert_eq!(gadget.apply(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), vec![4.0, 6.0]);
        assert_eq!(gadget.apply(&[vec![0.0; 2], vec![0.0; 2]]).unwrap(), vec![0.0; 2]);
        assert!(matches!(
            gadget.apply(&[vec![1.0, -2.0], vec![3.0, 4.0]]),
            Err(crate::Error::Domain(_))
        ));
        let single = build_sum_via_max(1, 3);
        assert_eq!(single.apply(&[vec![1.5, 0.0, 2.0]]).unwrap(), vec![1.5, 0.0, 2.0]);
    }

    fn graph(cards: &[usize], factors: &[(&[usize], Vec<f64>)]) -> FactorGraph {
        FactorGraph::new(
            cards
                .iter()
                .enumerate()
                .map(|(i, &k)| VariableNode::new(i, (0..k).map(|x| 0.25 * (x + i) as f64).collect()))
                .collect(),
            factors
                .iter()
                .enumerate()
                .map(|(c, (s, v))| {
                    let shape = s.iter().map(|&i| cards[i]).collect();
                    FactorNode::new(c, s.to_vec(), Tensor::new(shape, v.clone()).unwrap())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn decomposition_layer_reproduces_tables() {
        let g = graph(
            &[2, 3, 2],
            &[(&[0, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]), (&[1], vec![2.0, 1.0, 3.0]), (&[1, 2], vec![1.0; 6])],
        );
        let out = decomposition_features(&g).unwrap();
        let layout = EmulatorLayout::of(&g).unwrap();
        for c in 0..g.num_factors() {
            let want = decompose_factor(&g.factors()[c]).unwrap();
            assert_eq!(deblock_factor(&g, &layout, c, &out[c]).unwrap(), want.tables);
        }
    }

    #[test]
    fn preconditions() {
        let g = graph(&[2, 2], &[(&[0, 1], vec![1.0, 0.5, 1.0, 1.0])]);
        assert!(matches!(build_bp_emulator(&g, 1), Err(crate::Error::Domain(_))));
        let g = graph(&[2, 2], &[(&[0], vec![1.0, 2.0])]);
        assert!(matches!(build_bp_emulator(&g, 1), Err(crate::Error::Structure(_))));
    }

    #[test]
    fn emulator_matches_max_product_with_mixed_cardinalities() {
        let g = graph(
            &[2, 3, 2, 2],
            &[
                (&[0, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]),
                (&[1, 2, 3], (0..12).map(|v| 1.0 + (v * 7 % 5) as f64 * 0.5).collect()),
                (&[2], vec![2.0, 1.0]),
            ],
        );
        for k in 0..4 {
            let want = run_max_product(&g, k, Mode::Decomposed).unwrap().0.node_beliefs;
            let got = emulate_max_product(&g, k).unwrap();
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() < 1e-9, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn recipe_round_trip_and_mismatch() {
        let g = graph(&[2, 2], &[(&[0, 1], vec![1.0; 4])]);
        let r = Recipe::new(&g, 2).unwrap();
        assert_eq!(Recipe::from_json(&r.to_json().unwrap()).unwrap(), r);
        let h = graph(&[2, 2], &[(&[0, 1], vec![1.0; 4]), (&[1], vec![1.0; 2])]);
        assert!(r.features(&h).is_err());
    }
}
