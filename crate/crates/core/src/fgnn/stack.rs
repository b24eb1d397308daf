//! Layer stacks and their parameter file format.

use serde::{Deserialize, Serialize};

use super::half::{half_backward, half_forward, Direction, EdgeKeys, HalfTrace};
use super::{FeatureSet, FgnnLayerParams};
use crate::error::{bail, Error, Result};
use crate::numkit::{DenseNet, DenseTrace, Matrix};
use crate::pgm::FactorGraph;

/// Version tag of the parameter JSON format.
pub const PARAMS_FORMAT: &str = "fgnn-params-v1";

/// One entry of an [`FgnnStack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StackLayer {
    /// Variable-to-factor then factor-to-variable.
    Fgnn(FgnnLayerParams),
    /// The same network applied to every node, another to every factor.
    Dense { node: DenseNet, factor: DenseNet },
    Residual(Residual),
}

/// `inner(x) + P x`, where `P` is the identity unless a projection is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub inner: Vec<StackLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_proj: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_proj: Option<Matrix>,
}

/// Layers applied in order to node and factor features, plus an optional
/// readout network applied to every final node feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StackFile", into = "StackFile")]
pub struct FgnnStack {
    node_dim: usize,
    factor_dim: usize,
    edge_dim: usize,
    layers: Vec<StackLayer>,
    readout: Option<DenseNet>,
}

#[derive(Clone, Serialize, Deserialize)]
struct StackFile {
    format: String,
    node_dim: usize,
    factor_dim: usize,
    edge_dim: usize,
    layers: Vec<StackLayer>,
    readout: Option<DenseNet>,
}

impl From<FgnnStack> for StackFile {
    fn from(s: FgnnStack) -> Self {
        StackFile {
            format: PARAMS_FORMAT.to_string(),
            node_dim: s.node_dim,
            factor_dim: s.factor_dim,
            edge_dim: s.edge_dim,
            layers: s.layers,
            readout: s.readout,
        }
    }
}

impl TryFrom<StackFile> for FgnnStack {
    type Error = Error;

    fn try_from(f: StackFile) -> Result<Self> {
        if f.format != PARAMS_FORMAT {
            bail!(Format, "expected format {PARAMS_FORMAT}, found {}", f.format);
        }
        FgnnStack::new(f.node_dim, f.factor_dim, f.edge_dim, f.layers, f.readout)
    }
}

fn chain(layers: &[StackLayer], mut nd: usize, mut fd: usize, ed: usize) -> Result<(usize, usize)> {
    for layer in layers {
        match layer {
            StackLayer::Fgnn(p) => {
                p.check_dims(nd, fd, ed)?;
                (nd, fd) = (p.node_out(), p.factor_out());
            }
            StackLayer::Dense { node, factor } => {
                if node.input_dim() != nd || factor.input_dim() != fd {
                    bail!(
                        Shape,
                        "dense layer takes ({}, {}), receives ({nd}, {fd})",
                        node.input_dim(),
                        factor.input_dim()
                    );
                }
                (nd, fd) = (node.output_dim(), factor.output_dim());
            }
            StackLayer::Residual(r) => {
                let (n2, f2) = chain(&r.inner, nd, fd, ed)?;
                for (name, proj, din, dout) in [("node", &r.node_proj, nd, n2), ("factor", &r.factor_proj, fd, f2)] {
                    match proj {
                        Some(m) if m.rows() != dout || m.cols() != din => {
                            bail!(Shape, "{name} projection is {}x{}, expected {dout}x{din}", m.rows(), m.cols())
                        }
                        None if din != dout => {
                            bail!(Shape, "residual {name} width changes {din} -> {dout} without a projection")
                        }
                        _ => {}
                    }
                }
                (nd, fd) = (n2, f2);
            }
        }
    }
    Ok((nd, fd))
}

impl FgnnStack {
    pub fn new(
        node_dim: usize,
        factor_dim: usize,
        edge_dim: usize,
        layers: Vec<StackLayer>,
        readout: Option<DenseNet>,
    ) -> Result<Self> {
        let (nd, _) = chain(&layers, node_dim, factor_dim, edge_dim)?;
        if let Some(r) = &readout {
            if r.input_dim() != nd {
                bail!(Shape, "readout takes {}, stack emits {nd}", r.input_dim());
            }
        }
        Ok(Self {
            node_dim,
            factor_dim,
            edge_dim,
            layers,
            readout,
        })
    }

    /// The empty stack: identity on features.
    pub fn empty(node_dim: usize, factor_dim: usize, edge_dim: usize) -> Self {
        Self {
            node_dim,
            factor_dim,
            edge_dim,
            layers: Vec::new(),
            readout: None,
        }
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.node_dim, self.factor_dim, self.edge_dim)
    }

    /// Node and factor widths after the last layer, before the readout.
    pub fn output_dims(&self) -> (usize, usize) {
        chain(&self.layers, self.node_dim, self.factor_dim, self.edge_dim).expect("validated at construction")
    }

    pub fn layers(&self) -> &[StackLayer] {
        &self.layers
    }

    pub fn readout(&self) -> Option<&DenseNet> {
        self.readout.as_ref()
    }

    pub(crate) fn layers_mut_internal(&mut self) -> &mut [StackLayer] {
        &mut self.layers
    }

    pub(crate) fn readout_mut_internal(&mut self, r: DenseNet) {
        self.readout = Some(r);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(StackLayer::zeros_like).collect(),
            readout: self.readout.as_ref().map(DenseNet::zeros_like),
            ..*self
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |s| n += s.len());
        n
    }

    /// Visits every parameter slice in a fixed order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.for_each_param(f);
        }
        if let Some(r) = &self.readout {
            r.for_each_param(f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.for_each_param_mut(f);
        }
        if let Some(r) = &mut self.readout {
            r.for_each_param_slice(f);
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            bail!(Shape, "{} values for {} parameters", values.len(), self.param_count());
        }
        let mut at = 0;
        self.for_each_param_mut(&mut |s| {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stack output followed by the readout on every node.
    pub fn node_outputs(&self, g: &FactorGraph, feats: &FeatureSet) -> Result<Vec<Vec<f64>>> {
        let out = stack_forward(self, g, feats)?;
        Ok(match &self.readout {
            Some(r) => out.node.iter().map(|f| r.forward_from(0, f.clone())).collect(),
            None => out.node,
        })
    }
}

impl StackLayer {
    fn zeros_like(&self) -> Self {
        match self {
            StackLayer::Fgnn(p) => StackLayer::Fgnn(p.zeros_like()),
            StackLayer::Dense { node, factor } => StackLayer::Dense {
                node: node.zeros_like(),
                factor: factor.zeros_like(),
            },
            StackLayer::Residual(r) => StackLayer::Residual(Residual {
                inner: r.inner.iter().map(StackLayer::zeros_like).collect(),
                node_proj: r.node_proj.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
                factor_proj: r.factor_proj.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            }),
        }
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            StackLayer::Fgnn(p) => {
                for net in [&p.vf.m, &p.vf.q, &p.fv.m, &p.fv.q] {
                    net.for_each_param(f);
                }
            }
            StackLayer::Dense { node, factor } => {
                node.for_each_param(f);
                factor.for_each_param(f);
            }
            StackLayer::Residual(r) => {
                for l in &r.inner {
                    l.for_each_param(f);
                }
                for m in [&r.node_proj, &r.factor_proj].into_iter().flatten() {
                    f(m.data());
                }
            }
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            StackLayer::Fgnn(p) => {
                for net in [&mut p.vf.m, &mut p.vf.q, &mut p.fv.m, &mut p.fv.q] {
                    net.for_each_param_slice(f);
                }
            }
            StackLayer::Dense { node, factor } => {
                node.for_each_param_slice(f);
                factor.for_each_param_slice(f);
            }
            StackLayer::Residual(r) => {
                for l in &mut r.inner {
                    l.for_each_param_mut(f);
                }
                for m in [&mut r.node_proj, &mut r.factor_proj].into_iter().flatten() {
                    f(m.data_mut());
                }
            }
        }
    }
}

/// Applies every layer of `s` in order. The readout is not applied.
pub fn stack_forward(s: &FgnnStack, g: &FactorGraph, feats: &FeatureSet) -> Result<FeatureSet> {
    feats.check(g, s.node_dim, s.factor_dim, s.edge_dim)?;
    let keys = EdgeKeys::new(&feats.edge);
    let (node, factor) = forward_layers(&s.layers, g, &keys, feats.node.clone(), feats.factor.clone(), None)?;
    Ok(FeatureSet {
        node,
        factor,
        edge: feats.edge.clone(),
    })
}

/// Saved state of one stack layer.
#[derive(Clone, Debug)]
pub(crate) enum LayerTrace {
    Fgnn {
        node_in: Vec<Vec<f64>>,
        factor_in: Vec<Vec<f64>>,
        factor_mid: Vec<Vec<f64>>,
        vf: HalfTrace,
        fv: HalfTrace,
    },
    Dense {
        node: Vec<DenseTrace>,
        factor: Vec<DenseTrace>,
    },
    Residual {
        node_in: Vec<Vec<f64>>,
        factor_in: Vec<Vec<f64>>,
        inner: Vec<LayerTrace>,
    },
}

fn apply_each(net: &DenseNet, xs: Vec<Vec<f64>>, trace: Option<&mut Vec<DenseTrace>>) -> Vec<Vec<f64>> {
    match trace {
        None => xs.into_iter().map(|x| net.forward_from(0, x)).collect(),
        Some(t) => xs
            .into_iter()
            .map(|x| {
                let (y, tr) = net.forward_traced_from(0, x);
                t.push(tr);
                y
            })
            .collect(),
    }
}

fn add_projected(out: &mut [Vec<f64>], input: &[Vec<f64>], proj: Option<&Matrix>) {
    for (o, x) in out.iter_mut().zip(input) {
        match proj {
            Some(m) => {
                for (a, b) in o.iter_mut().zip(m.matvec(x)) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in o.iter_mut().zip(x) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn forward_layers(
    layers: &[StackLayer],
    g: &FactorGraph,
    keys: &EdgeKeys,
    mut node: Vec<Vec<f64>>,
    mut factor: Vec<Vec<f64>>,
    mut traces: Option<&mut Vec<LayerTrace>>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    for layer in layers {
        match layer {
            StackLayer::Fgnn(p) => match traces.as_deref_mut() {
                None => {
                    factor = half_forward(&p.vf, g, Direction::VarToFactor, &factor, &node, keys, None)?;
                    node = half_forward(&p.fv, g, Direction::FactorToVar, &factor, &node, keys, None)?;
                }
                Some(t) => {
                    let mut vf = HalfTrace::default();
                    let mut fv = HalfTrace::default();
                    let mid = half_forward(&p.vf, g, Direction::VarToFactor, &factor, &node, keys, Some(&mut vf))?;
                    let out = half_forward(&p.fv, g, Direction::FactorToVar, &mid, &node, keys, Some(&mut fv))?;
                    t.push(LayerTrace::Fgnn {
                        node_in: std::mem::replace(&mut node, out),
                        factor_in: std::mem::replace(&mut factor, mid.clone()),
                        factor_mid: mid,
                        vf,
                        fv,
                    });
                }
            },
            StackLayer::Dense { node: nn, factor: fnet } => match traces.as_deref_mut() {
                None => {
                    node = apply_each(nn, node, None);
                    factor = apply_each(fnet, factor, None);
                }
                Some(t) => {
                    let (mut tn, mut tf) = (Vec::new(), Vec::new());
                    node = apply_each(nn, node, Some(&mut tn));
                    factor = apply_each(fnet, factor, Some(&mut tf));
                    t.push(LayerTrace::Dense { node: tn, factor: tf });
                }
            },
            StackLayer::Residual(r) => {
                let mut inner_traces = traces.as_ref().map(|_| Vec::new());
                let (mut n2, mut f2) =
                    forward_layers(&r.inner, g, keys, node.clone(), factor.clone(), inner_traces.as_mut())?;
                add_projected(&mut n2, &node, r.node_proj.as_ref());
                add_projected(&mut f2, &factor, r.factor_proj.as_ref());
                let node_in = std::mem::replace(&mut node, n2);
                let factor_in = std::mem::replace(&mut factor, f2);
                if let (Some(t), Some(inner)) = (traces.as_deref_mut(), inner_traces) {
                    t.push(LayerTrace::Residual {
                        node_in,
                        factor_in,
                        inner,
                    });
                }
            }
        }
    }
    Ok((node, factor))
}

fn zeros_shaped(like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    like.iter().map(|v| vec![0.0; v.len()]).collect()
}

/// Reverse pass matching [`forward_layers`]. Returns gradients with respect
/// to the node and factor inputs of the first layer.
pub(crate) fn backward_layers(
    layers: &[StackLayer],
    traces: &[LayerTrace],
    g: &FactorGraph,
    keys: &EdgeKeys,
    mut d_node: Vec<Vec<f64>>,
    mut d_factor: Vec<Vec<f64>>,
    grads: &mut [StackLayer],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    for ((layer, trace), grad) in layers.iter().zip(traces).zip(grads.iter_mut()).rev() {
        match (layer, trace, grad) {
            (
                StackLayer::Fgnn(p),
                LayerTrace::Fgnn {
                    node_in,
                    factor_in,
                    factor_mid,
                    vf,
                    fv,
                },
                StackLayer::Fgnn(gp),
            ) => {
                let mut d_mid = d_factor;
                let mut d_node_in = zeros_shaped(node_in);
                half_backward(&p.fv, g, factor_mid, node_in, keys, fv, &d_node, &mut gp.fv, &mut d_mid, &mut d_node_in);
                let mut d_factor_in = zeros_shaped(factor_in);
                half_backward(&p.vf, g, factor_in, node_in, keys, vf, &d_mid, &mut gp.vf, &mut d_factor_in, &mut d_node_in);
                d_node = d_node_in;
                d_factor = d_factor_in;
            }
            (StackLayer::Dense { node, factor }, LayerTrace::Dense { node: tn, factor: tf }, StackLayer::Dense { node: gn, factor: gf }) => {
                d_node = d_node
                    .into_iter()
                    .zip(tn)
                    .map(|(d, t)| node.backward_from(0, t, d, gn))
                    .collect();
                d_factor = d_factor
                    .into_iter()
                    .zip(tf)
                    .map(|(d, t)| factor.backward_from(0, t, d, gf))
                    .collect();
            }
            (
                StackLayer::Residual(r),
                LayerTrace::Residual {
                    node_in,
                    factor_in,
                    inner,
                },
                StackLayer::Residual(gr),
            ) => {
                let (mut dn, mut df) =
                    backward_layers(&r.inner, inner, g, keys, d_node.clone(), d_factor.clone(), &mut gr.inner);
                for (dx, dy, x, proj, gproj) in [
                    (&mut dn, &d_node, node_in, &r.node_proj, &mut gr.node_proj),
                    (&mut df, &d_factor, factor_in, &r.factor_proj, &mut gr.factor_proj),
                ] {
                    for ((a, d), xi) in dx.iter_mut().zip(dy).zip(x) {
                        match (proj, gproj.as_mut()) {
                            (Some(m), Some(gm)) => {
                                gm.add_outer(d, xi);
                                m.matvec_t_acc(d, a);
                            }
                            _ => {
                                for (a, d) in a.iter_mut().zip(d) {
                                    *a += d;
                                }
                            }
                        }
                    }
                }
                d_node = dn;
                d_factor = df;
            }
            _ => unreachable!("trace and gradient structure follow the stack"),
        }
    }
    (d_node, d_factor)
}
