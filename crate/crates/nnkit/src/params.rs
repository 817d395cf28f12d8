use crate::{NnError, Result};

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorLayout {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// `(rows, cols)` view: vectors are treated as a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// Flat `f32` parameter storage with an ordered tensor layout.
///
/// Invariants: `values.len()` equals the sum of the layout's shape products
/// and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Vec<TensorLayout>,
}

impl ParamVector {
    pub fn new(layout: Vec<TensorLayout>, values: Vec<f32>) -> Result<Self> {
        let expected: usize = layout.iter().map(TensorLayout::numel).sum();
        if values.len() != expected {
            return Err(NnError::dim("parameter vector", expected, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::Numerical {
                term: "parameter vector".to_owned(),
                detail: format!("value {} at index {i} is not finite", values[i]),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<TensorLayout>) -> Self {
        let n = layout.iter().map(TensorLayout::numel).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn layout(&self) -> &[TensorLayout] {
        &self.layout
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Start offset of every tensor, in layout order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut off = 0;
        for t in &self.layout {
            out.push(off);
            off += t.numel();
        }
        out
    }

    pub fn tensor(&self, idx: usize) -> &[f32] {
        let off: usize = self.layout[..idx].iter().map(TensorLayout::numel).sum();
        &self.values[off..off + self.layout[idx].numel()]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [f32] {
        let off: usize = self.layout[..idx].iter().map(TensorLayout::numel).sum();
        let n = self.layout[idx].numel();
        &mut self.values[off..off + n]
    }

    pub fn find(&self, name: &str) -> Option<&[f32]> {
        let idx = self.layout.iter().position(|t| t.name == name)?;
        Some(self.tensor(idx))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}
