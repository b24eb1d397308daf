//! The FGNN layer.
//!
//! A layer has two halves. The variable-to-factor half updates every factor
//! feature from its scope,
//!
//! ```text
//! g̃_c = max_{i ∈ s(c)} Q(t_ci) · M([g_c, f_i])
//! ```
//!
//! and the factor-to-variable half updates every node feature from the
//! factors that contain it,
//!
//! ```text
//! f̃_i = max_{c ∋ i} Q(t_ci) · M([g_c, f_i])
//! ```
//!
//! where `M` is a dense network, `Q` maps an edge feature to a row-major
//! `rows × cols` matrix and the max is elementwise. Inside a stack the two
//! halves run in sequence: the factor-to-variable half reads `g̃`.

mod half;
mod mpnn;
pub(crate) mod stack;

pub use mpnn::{find_perfect_matching, mpnn_transform, Matching, MpnnLayer};
pub use stack::{stack_forward, FgnnStack, Residual, StackLayer, PARAMS_FORMAT};

pub(crate) use half::{half_forward, Direction, EdgeKeys, HalfTrace};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numkit::DenseNet;
use crate::pgm::FactorGraph;

/// Node, factor and edge features of one graph. Edge features follow the
/// graph's edge order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub node: Vec<Vec<f64>>,
    pub factor: Vec<Vec<f64>>,
    pub edge: Vec<Vec<f64>>,
}

fn uniform_width(family: &str, rows: &[Vec<f64>]) -> Result<usize> {
    let w = rows.first().map_or(0, Vec::len);
    if let Some(k) = rows.iter().position(|r| r.len() != w) {
        bail!(Shape, "{family} feature {k} has width {}, expected {w}", rows[k].len());
    }
    Ok(w)
}

impl FeatureSet {
    pub fn new(node: Vec<Vec<f64>>, factor: Vec<Vec<f64>>, edge: Vec<Vec<f64>>) -> Result<Self> {
        uniform_width("node", &node)?;
        uniform_width("factor", &factor)?;
        uniform_width("edge", &edge)?;
        Ok(Self { node, factor, edge })
    }

    pub fn node_dim(&self) -> usize {
        self.node.first().map_or(0, Vec::len)
    }

    pub fn factor_dim(&self) -> usize {
        self.factor.first().map_or(0, Vec::len)
    }

    pub fn edge_dim(&self) -> usize {
        self.edge.first().map_or(0, Vec::len)
    }

    /// Checks counts against `g` and widths against the given dimensions.
    pub fn check(&self, g: &FactorGraph, node_dim: usize, factor_dim: usize, edge_dim: usize) -> Result<()> {
        let counts = [
            ("node", self.node.len(), g.num_variables()),
            ("factor", self.factor.len(), g.num_factors()),
            ("edge", self.edge.len(), g.edges().len()),
        ];
        for (family, have, want) in counts {
            if have != want {
                bail!(Shape, "{have} {family} features for {want} {family}s");
            }
        }
        let widths = [
            ("node", &self.node, node_dim),
            ("factor", &self.factor, factor_dim),
            ("edge", &self.edge, edge_dim),
        ];
        for (family, rows, want) in widths {
            if let Some(k) = rows.iter().position(|r| r.len() != want) {
                bail!(Shape, "{family} feature {k} has width {}, expected {want}", rows[k].len());
            }
        }
        Ok(())
    }
}

/// One half of an FGNN layer. `q` outputs `rows * cols` values read as a
/// row-major matrix; `cols` equals the output width of `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfParams {
    pub m: DenseNet,
    pub q: DenseNet,
    pub rows: usize,
    pub cols: usize,
}

impl HalfParams {
    pub fn new(m: DenseNet, q: DenseNet, rows: usize) -> Result<Self> {
        let cols = m.output_dim();
        if rows * cols != q.output_dim() {
            bail!(
                Shape,
                "Q emits {} values, which is not {rows} x {cols}",
                q.output_dim()
            );
        }
        Ok(Self { m, q, rows, cols })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            m: self.m.zeros_like(),
            q: self.q.zeros_like(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn param_count(&self) -> usize {
        self.m.param_count() + self.q.param_count()
    }
}

/// Parameters of one FGNN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgnnLayerParams {
    pub vf: HalfParams,
    pub fv: HalfParams,
}

impl FgnnLayerParams {
    /// Validates that the halves chain for the given input widths.
    pub fn check_dims(&self, node_dim: usize, factor_dim: usize, edge_dim: usize) -> Result<()> {
        let want = [
            ("VF M", self.vf.m.input_dim(), factor_dim + node_dim),
            ("VF Q", self.vf.q.input_dim(), edge_dim),
            ("FV M", self.fv.m.input_dim(), self.vf.rows + node_dim),
            ("FV Q", self.fv.q.input_dim(), edge_dim),
        ];
        for (name, have, want) in want {
            if have != want {
                bail!(Shape, "{name} takes input width {have}, expected {want}");
            }
        }
        Ok(())
    }

    pub fn node_out(&self) -> usize {
        self.fv.rows
    }

    pub fn factor_out(&self) -> usize {
        self.vf.rows
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            vf: self.vf.zeros_like(),
            fv: self.fv.zeros_like(),
        }
    }
}

fn checked_inputs(g: &FactorGraph, feats: &FeatureSet, half: &HalfParams) -> Result<()> {
    let nd = feats.node_dim();
    let fd = feats.factor_dim();
    feats.check(g, nd, fd, feats.edge_dim())?;
    if half.m.input_dim() != fd + nd {
        bail!(Shape, "M takes input width {}, features give {}", half.m.input_dim(), fd + nd);
    }
    if half.q.input_dim() != feats.edge_dim() {
        bail!(Shape, "Q takes input width {}, edges give {}", half.q.input_dim(), feats.edge_dim());
    }
    Ok(())
}

/// Variable-to-factor half on its own: one output vector per factor.
pub fn vf_layer(g: &FactorGraph, feats: &FeatureSet, p: &FgnnLayerParams) -> Result<Vec<Vec<f64>>> {
    checked_inputs(g, feats, &p.vf)?;
    let keys = EdgeKeys::new(&feats.edge);
    half_forward(&p.vf, g, Direction::VarToFactor, &feats.factor, &feats.node, &keys, None)
}

/// Factor-to-variable half on its own, reading the input factor features.
pub fn fv_layer(g: &FactorGraph, feats: &FeatureSet, p: &FgnnLayerParams) -> Result<Vec<Vec<f64>>> {
    checked_inputs(g, feats, &p.fv)?;
    let keys = EdgeKeys::new(&feats.edge);
    half_forward(&p.fv, g, Direction::FactorToVar, &feats.factor, &feats.node, &keys, None)
}
