//! Dense tensors, matrices and small feed-forward networks.
//!
//! Everything is `f64` and row-major: the last index of a multi-index varies
//! fastest. Factor tables are indexed in scope order with this layout.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Row-major offset of `index` inside `shape`.
pub fn row_major_offset(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() {
        bail!(
            Index,
            "index has {} coordinates, tensor has rank {}",
            index.len(),
            shape.len()
        );
    }
    let mut offset = 0;
    for (axis, (&i, &extent)) in index.iter().zip(shape).enumerate() {
        if i >= extent {
            bail!(Index, "coordinate {i} out of bounds for axis {axis} of extent {extent}");
        }
        offset = offset * extent + i;
    }
    Ok(offset)
}

/// Inverse of [`row_major_offset`]; writes the multi-index into `out`.
pub fn unravel_into(shape: &[usize], mut offset: usize, out: &mut [usize]) {
    debug_assert_eq!(shape.len(), out.len());
    for axis in (0..shape.len()).rev() {
        out[axis] = offset % shape[axis];
        offset /= shape[axis];
    }
}

/// A dense tensor with a flat row-major value array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "tensor extents must be positive, got {shape:?}");
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            bail!(
                Shape,
                "shape {shape:?} needs {len} values, got {}",
                values.len()
            );
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let mut values = Vec::with_capacity(len);
        for offset in 0..len {
            unravel_into(&shape, offset, &mut idx);
            values.push(f(&idx));
        }
        Self::new(shape, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        row_major_offset(&self.shape, index)
    }

    /// Entry at a multi-index.
    pub fn at(&self, index: &[usize]) -> Result<f64> {
        Ok(self.values[self.offset(index)?])
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.shape[0], raw.shape[1], raw.values)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            shape: [m.rows, m.cols],
            values: m.data,
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(
                Shape,
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            );
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Shape, "ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`. Zero entries of `x` are skipped, which leaves every
    /// partial sum unchanged and keeps one-hot inputs cheap.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        let nz: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        if nz.len() == x.len() {
            for (r, o) in out.iter_mut().enumerate() {
                let row = self.row(r);
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                *o = acc;
            }
        } else {
            for (r, o) in out.iter_mut().enumerate() {
                let row = self.row(r);
                let mut acc = 0.0;
                for &j in &nz {
                    acc += row[j] * x[j];
                }
                *o = acc;
            }
        }
    }

    /// `selfᵀ · y`, accumulated into `out`.
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self[:, col0..col0 + x.len()] · x`, skipping zero entries of `x`.
    pub(crate) fn matvec_block(&self, col0: usize, x: &[f64]) -> Vec<f64> {
        debug_assert!(col0 + x.len() <= self.cols);
        let nz: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        (0..self.rows)
            .map(|r| {
                let row = &self.row(r)[col0..];
                let mut acc = 0.0;
                for &j in &nz {
                    acc += row[j] * x[j];
                }
                acc
            })
            .collect()
    }

    /// `out += self[:, col0..col0 + out.len()]ᵀ · y`.
    pub(crate) fn matvec_t_block_acc(&self, col0: usize, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.row(r)[col0..]) {
                *o += w * yr;
            }
        }
    }

    /// `self[:, col0..col0 + b.len()] += a ⊗ b`.
    pub(crate) fn add_outer_block(&mut self, col0: usize, a: &[f64], b: &[f64]) {
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols + col0..r * cols + col0 + b.len()];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    /// `self += a ⊗ b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map followed by an activation: `act(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            bail!(
                Shape,
                "bias length {} does not match {} output rows",
                bias.len(),
                weight.rows()
            );
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.affine(x);
        self.activate(&mut out);
        out
    }

    pub fn activate(&self, pre: &mut [f64]) {
        if self.activation != Activation::Identity {
            for v in pre.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

/// Saved intermediates of one [`DenseNet`] forward pass.
#[derive(Clone, Debug, Default)]
pub struct DenseTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl DenseTrace {
    /// Pre-activation vectors, one per layer.
    pub(crate) fn pre(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// A feed-forward network. An empty layer list is the identity on
/// `input_dim`-vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNet")]
pub struct DenseNet {
    input_dim: usize,
    layers: Vec<DenseLayer>,
}

#[derive(Deserialize)]
struct RawNet {
    input_dim: usize,
    layers: Vec<DenseLayer>,
}

impl TryFrom<RawNet> for DenseNet {
    type Error = Error;

    fn try_from(raw: RawNet) -> Result<Self> {
        DenseNet::new(raw.input_dim, raw.layers)
    }
}

impl DenseNet {
    pub fn new(input_dim: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let mut dim = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.input_dim() != dim {
                bail!(
                    Shape,
                    "layer {l} expects input {} but receives {dim}",
                    layer.input_dim()
                );
            }
            dim = layer.output_dim();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    /// Single affine layer.
    pub fn single(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let layer = DenseLayer::new(weight, bias, activation)?;
        Ok(Self {
            input_dim: layer.input_dim(),
            layers: vec![layer],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, DenseLayer::output_dim)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest output width among all layers but the last.
    pub fn hidden_width(&self) -> usize {
        let n = self.layers.len();
        self.layers[..n.saturating_sub(1)]
            .iter()
            .map(DenseLayer::output_dim)
            .max()
            .unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            bail!(
                Shape,
                "network expects input of length {}, got {}",
                self.input_dim,
                x.len()
            );
        }
        Ok(self.forward_from(0, x.to_vec()))
    }

    /// Runs layers `start..` on an input already sized for layer `start`.
    pub(crate) fn forward_from(&self, start: usize, mut x: Vec<f64>) -> Vec<f64> {
        for layer in &self.layers[start..] {
            x = layer.forward(&x);
        }
        x
    }

    pub(crate) fn forward_traced_from(&self, start: usize, mut x: Vec<f64>) -> (Vec<f64>, DenseTrace) {
        let mut trace = DenseTrace::default();
        for layer in &self.layers[start..] {
            let mut pre = layer.affine(&x);
            trace.inputs.push(std::mem::take(&mut x));
            x = pre.clone();
            layer.activate(&mut x);
            trace.pre.push(std::mem::take(&mut pre));
        }
        (x, trace)
    }

    /// Backpropagates `dy` through layers `start..`, accumulating parameter
    /// gradients into `grads` (a zeroed net of the same shape). Returns the
    /// gradient with respect to the input of layer `start`.
    pub(crate) fn backward_from(
        &self,
        start: usize,
        trace: &DenseTrace,
        mut dy: Vec<f64>,
        grads: &mut DenseNet,
    ) -> Vec<f64> {
        for (k, layer) in self.layers[start..].iter().enumerate().rev() {
            let l = start + k;
            let pre = &trace.pre[k];
            for (d, &p) in dy.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(p);
            }
            let g = &mut grads.layers[l];
            g.weight.add_outer(&dy, &trace.inputs[k]);
            for (b, d) in g.bias.iter_mut().zip(&dy) {
                *b += d;
            }
            let mut dx = vec![0.0; layer.input_dim()];
            layer.weight.matvec_t_acc(&dy, &mut dx);
            dy = dx;
        }
        dy
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        for layer in &self.layers {
            f(layer.weight.data());
            f(&layer.bias);
        }
    }

    pub(crate) fn for_each_param_slice(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            f(layer.weight.data_mut());
            f(&mut layer.bias);
        }
    }
}
