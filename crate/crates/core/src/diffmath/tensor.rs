//! Dense n-dimensional tensor with optional participation in a tape.

use std::sync::Arc;

use crate::scalar::Scalar;

/// Identifies a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) idx: usize,
}

impl NodeRef {
    /// Index of the node within its tape.
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Dense real tensor, row-major flat storage.
///
/// Values are shared copy-on-write so constant snapshots (frozen parameters,
/// captured inputs) are cheap to pass around. A tensor optionally carries a
/// [`NodeRef`] tying it to the tape that recorded it; it participates in
/// exactly one tape at a time.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Arc<Vec<F>>,
    node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor from a shape and flat values.
    ///
    /// Panics if `product(shape) != values.len()`.
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == values.len(),
            "shape {:?} implies {} values, got {}",
            shape,
            n,
            values.len()
        );
        Tensor { shape, values: Arc::new(values), node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: Arc::new(vec![F::zero(); n]), node: None }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(values: Vec<F>) -> Self {
        Tensor { shape: vec![values.len()], values: Arc::new(values), node: None }
    }

    /// 1-D tensor from f64 values (convenience for noise and constants).
    pub fn from_f64s(values: &[f64]) -> Self {
        Tensor::from_vec(values.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    /// Rank-0-like scalar, stored as shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], values: Arc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    /// Mutable access; detaches from any tape since recorded history would
    /// no longer describe the stored values.
    pub fn values_mut(&mut self) -> &mut [F] {
        self.node = None;
        let values: &mut Vec<F> = Arc::make_mut(&mut self.values);
        values
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.values)
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, values: Arc<Vec<F>>, node: NodeRef) -> Self {
        Tensor { shape, values, node: Some(node) }
    }

    /// Copy of this tensor with no tape participation.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), values: Arc::clone(&self.values), node: None }
    }

    /// Scalar extraction; panics on non-scalar tensors.
    pub fn item(&self) -> F {
        assert!(self.len() == 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 values")]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn detached_drops_node_only() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let d = t.detached();
        assert_eq!(d.values(), t.values());
        assert!(d.node().is_none());
    }
}
