//! Dense numerics and flat parameter vectors with hand-written gradients.
//!
//! Everything here is 64-bit and deterministic: all trainable parameters of a
//! model live in one flat [`ParamVec`] whose [`Layout`] is fixed at model
//! construction, gradients live in index-aligned [`GradVec`]s, and the
//! update rules of the meta-reweighting machinery reduce to `axpy`/`dot`
//! over these vectors. [`finite_diff_grad`] is the central-difference oracle
//! used to verify every analytic backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps a row-major buffer. Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix buffer length must equal rows * cols"
        );
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One named block of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, contiguous, non-overlapping block descriptors for a [`ParamVec`].
///
/// A layout is built once per model and shared (via `Arc`) by every
/// parameter and gradient vector of that model.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total_len: usize,
}

impl Layout {
    /// Builds a layout from `(name, shape)` pairs; offsets are assigned
    /// contiguously in order.
    pub fn new(blocks: &[(&str, Vec<usize>)]) -> Arc<Self> {
        let mut entries = Vec::with_capacity(blocks.len());
        let mut offset = 0usize;
        for (name, shape) in blocks {
            let entry = LayoutEntry {
                name: (*name).to_string(),
                offset,
                shape: shape.clone(),
            };
            offset += entry.len();
            entries.push(entry);
        }
        Arc::new(Layout {
            entries,
            total_len: offset,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Flat index range of the named block.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.entry(name).map(|e| e.offset..e.offset + e.len())
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Flat vector of all trainable parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

/// Flat gradient vector, index-aligned with the [`ParamVec`] of the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVec {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        ParamVec { layout, data }
    }

    /// Wraps a buffer whose length must equal the layout's total length.
    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::Size(format!(
                "parameter buffer has length {}, layout expects {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVec { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Immutable view of a named block; panics if the block does not exist.
    pub fn block(&self, name: &str) -> &[f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no parameter block named {name:?}"));
        &self.data[r]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no parameter block named {name:?}"));
        &mut self.data[r]
    }
}

impl GradVec {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        GradVec { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::Size(format!(
                "gradient buffer has length {}, layout expects {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(GradVec { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no gradient block named {name:?}"));
        &self.data[r]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no gradient block named {name:?}"));
        &mut self.data[r]
    }

    /// In-place `self += scale * other`. Errors on layout mismatch.
    pub fn add_scaled(&mut self, scale: f64, other: &GradVec) -> Result<()> {
        if !same_layout(&self.layout, &other.layout) {
            return Err(Error::Layout(
                "add_scaled requires gradients with a shared layout".into(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Returns `y + alpha * x` element-wise; inputs are unmodified.
pub fn axpy(alpha: f64, x: &GradVec, y: &ParamVec) -> Result<ParamVec> {
    if !same_layout(&x.layout, &y.layout) {
        return Err(Error::Layout(
            "axpy requires a gradient and parameters with a shared layout".into(),
        ));
    }
    let data = y
        .data
        .iter()
        .zip(x.data.iter())
        .map(|(yi, xi)| yi + alpha * xi)
        .collect();
    Ok(ParamVec {
        layout: y.layout.clone(),
        data,
    })
}

/// Inner product of two gradient vectors.
pub fn dot(x: &GradVec, y: &GradVec) -> Result<f64> {
    if !same_layout(&x.layout, &y.layout) {
        return Err(Error::Layout(
            "dot requires gradients with a shared layout".into(),
        ));
    }
    Ok(x.data.iter().zip(y.data.iter()).map(|(a, b)| a * b).sum())
}

/// Central-difference gradient of `loss_fn` at `params`:
/// `(loss(p + h e_i) - loss(p - h e_i)) / (2h)` for every coordinate.
///
/// This is the verification oracle for analytic backward passes; `loss_fn`
/// must be deterministic.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamVec, h: f64) -> Result<GradVec>
where
    F: FnMut(&ParamVec) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = GradVec::zeros(params.layout.clone());
    for i in 0..params.len() {
        let original = probe.data[i];
        probe.data[i] = original + h;
        let plus = loss_fn(&probe)?;
        probe.data[i] = original - h;
        let minus = loss_fn(&probe)?;
        probe.data[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is non-finite near coordinate {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error used by all gradient checks: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A classifier viewed as a differentiable per-example loss over a flat
/// parameter vector. The meta-reweighting ops are generic over this so they
/// can be exercised on small closed-form models as well as the real encoder.
pub trait PerExampleLoss {
    type Example;

    /// Loss of one example at the given parameters.
    fn loss(&self, params: &ParamVec, example: &Self::Example) -> Result<f64>;

    /// Loss plus its exact gradient with respect to all parameters.
    fn loss_and_grad(&self, params: &ParamVec, example: &Self::Example) -> Result<(f64, GradVec)>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_layout(n: usize) -> Arc<Layout> {
        Layout::new(&[("w", vec![n])])
    }

    fn pv(values: &[f64]) -> ParamVec {
        ParamVec::from_vec(flat_layout(values.len()), values.to_vec()).unwrap()
    }

    fn gv(values: &[f64]) -> GradVec {
        GradVec::from_vec(flat_layout(values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn axpy_zero_step_returns_y() {
        let x = gv(&[5.0, -3.0]);
        let y = pv(&[1.0, 2.0]);
        let out = axpy(0.0, &x, &y).unwrap();
        assert_eq!(out.data(), y.data());
    }

    #[test]
    fn axpy_elementwise() {
        let out = axpy(1.0, &gv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
        let out = axpy(-0.5, &gv(&[2.0, 2.0]), &pv(&[1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn axpy_layout_mismatch_is_error() {
        let x = gv(&[1.0, 2.0, 3.0]);
        let y = pv(&[1.0, 2.0]);
        assert!(matches!(axpy(1.0, &x, &y), Err(Error::Layout(_))));
    }

    #[test]
    fn dot_values() {
        assert_eq!(dot(&gv(&[0.0, 0.0]), &gv(&[9.0, -2.0])).unwrap(), 0.0);
        assert_eq!(dot(&gv(&[1.0, 2.0]), &gv(&[3.0, 4.0])).unwrap(), 11.0);
        let v = gv(&[2.0, -1.0]);
        assert_eq!(dot(&v, &v).unwrap(), 5.0);
    }

    #[test]
    fn dot_layout_mismatch_is_error() {
        let a = gv(&[1.0]);
        let b = gv(&[1.0, 2.0]);
        assert!(matches!(dot(&a, &b), Err(Error::Layout(_))));
    }

    #[test]
    fn finite_diff_constant_loss_is_zero() {
        let params = pv(&[0.3, -0.7, 1.1]);
        let grad = finite_diff_grad(|_| Ok(42.0), &params, 1e-4).unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_diff_quadratic() {
        let params = pv(&[3.0]);
        let grad = finite_diff_grad(|p| Ok(p.data()[0] * p.data()[0]), &params, 1e-4).unwrap();
        assert!((grad.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_linear_sum() {
        let params = pv(&[0.2, -1.5, 4.0, 0.0]);
        let grad = finite_diff_grad(|p| Ok(p.data().iter().sum()), &params, 1e-4).unwrap();
        for &g in grad.data() {
            assert!((g - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite_loss() {
        let params = pv(&[1.0]);
        assert!(matches!(
            finite_diff_grad(|p| Ok(p.data()[0]), &params, 0.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &params, 1e-4),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layout_blocks_are_contiguous() {
        let layout = Layout::new(&[("a", vec![2, 3]), ("b", vec![4])]);
        assert_eq!(layout.total_len(), 10);
        assert_eq!(layout.range("a").unwrap(), 0..6);
        assert_eq!(layout.range("b").unwrap(), 6..10);
        assert!(layout.range("c").is_none());
    }
}
