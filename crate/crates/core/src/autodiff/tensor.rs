use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{ConvGeom, PoolGeom};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static ALLOW_NON_FINITE: AtomicBool = AtomicBool::new(false);

/// Debug switch: when set, operations stop rejecting NaN/Inf outputs.
pub fn set_allow_non_finite(allow: bool) {
    ALLOW_NON_FINITE.store(allow, Ordering::SeqCst);
}

fn allow_non_finite() -> bool {
    ALLOW_NON_FINITE.load(Ordering::Relaxed)
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded primitive. Each variant carries whatever its vector-Jacobian
/// product needs beyond the input tensors.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Reshape,
    MatMul { ta: bool, tb: bool },
    BroadcastMid { a: usize, b: usize },
    SumMid { a: usize, b: usize },
    Gather { index: Arc<Vec<usize>> },
    ScatterAdd { index: Arc<Vec<usize>> },
    Conv { geom: ConvGeom },
    ConvTranspose { geom: ConvGeom },
    ConvWeightGrad { geom: ConvGeom },
    AvgPool { geom: PoolGeom },
    AvgUnpool { geom: PoolGeom },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Row-major float64 array that may participate in a computation graph.
///
/// Cloning is cheap (reference counted). Gradients produced by
/// [`crate::autodiff::grad`] with `create_graph = true` are ordinary
/// tensors with their own graph, so they can be differentiated again.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    fn validated(data: Vec<f64>, shape: &[usize], op: &'static str) -> Result<Vec<f64>> {
        if shape.contains(&0) {
            return Err(Error::shape(
                op,
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                op,
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        if !allow_non_finite() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(data)
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let data = Self::validated(data, shape, "new")?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let data = Self::validated(data, shape, "param")?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(Vec::new(), Arc::new(vec![value]), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(
            shape.to_vec(),
            Arc::new(vec![value; numel(shape)]),
            false,
            None,
        )
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    /// Internal constructor for op outputs. Records a graph node only when
    /// some input requires a gradient.
    pub(crate) fn from_op(
        op: Op,
        inputs: Vec<Tensor>,
        data: Vec<f64>,
        shape: Vec<usize>,
        name: &'static str,
    ) -> Result<Tensor> {
        if !allow_non_finite() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(Node { op, inputs });
        Ok(Self::build(shape, Arc::new(data), requires_grad, node))
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Same values as a fresh trainable leaf with a new identity.
    pub fn to_leaf(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), true, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape {:?}", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    /// Copy with new values and the same shape, as a constant.
    pub fn with_values(&self, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(data, self.shape())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("values", &preview)
            .finish()
    }
}

// Long chains of Arc'd nodes would otherwise drop recursively.
impl Drop for Inner {
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.node.take() {
            Some(node) => node.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}
