use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{dim_err, EngineError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    /// Euclidean norm of all entries, producing a scalar.
    Norm,
    SumTo,
    BroadcastTo,
    Reshape,
    SelectRows(Rc<[usize]>),
    ScatterRows(Rc<[usize]>),
    ConcatRows,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<f64>>,
}

/// Append-only record of operations. Node ids are issued in creation order,
/// so every node's inputs have smaller ids than the node itself.
#[derive(Clone, Default)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a copy of `t` as a differentiable leaf of this graph.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
        });
        Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            node: Some((self.clone(), id)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn with_node<R>(&self, id: NodeId, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    pub(crate) fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.borrow()[id].inputs.clone()
    }

    /// Handle to an existing node, either still attached or as a constant.
    pub(crate) fn handle(&self, id: NodeId, attached: bool) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        Tensor {
            shape: node.shape.clone(),
            data: Rc::clone(&node.data),
            node: attached.then(|| (self.clone(), id)),
        }
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// Dense row-major array of `f64`, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<(Graph, NodeId)>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return dim_err("new", format!("rank {} unsupported", shape.len()));
        }
        if shape.contains(&0) {
            return dim_err("new", format!("zero-sized dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Vec::new(), vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Result<Self> {
        Self::new(&[v.len()], v)
    }

    /// Matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return dim_err("from_rows", "no rows");
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return dim_err("from_rows", format!("row {i} has {} values, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![1.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of the rank-2 view: `[]` is 1x1, `[k]` is 1xk.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|(g, _)| g)
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Same values, cut loose from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Builds the result of an operation, recording it when any operand is
    /// attached to a graph. Constant operands of a recorded op are registered
    /// as constant nodes.
    pub(crate) fn from_op(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let mut graph: Option<&Graph> = None;
        for t in inputs {
            if let Some((g, _)) = &t.node {
                match graph {
                    None => graph = Some(g),
                    Some(existing) if !existing.same(g) => return Err(EngineError::GraphMismatch),
                    Some(_) => {}
                }
            }
        }
        let Some(graph) = graph else {
            return Ok(Tensor::raw(shape, data));
        };
        let ids = inputs
            .iter()
            .map(|t| match &t.node {
                Some((_, id)) => *id,
                None => graph.push(Node {
                    op: Op::Constant,
                    inputs: Vec::new(),
                    shape: t.shape.clone(),
                    data: Rc::clone(&t.data),
                }),
            })
            .collect();
        let data = Rc::new(data);
        let id = graph.push(Node {
            op,
            inputs: ids,
            shape: shape.clone(),
            data: Rc::clone(&data),
        });
        Ok(Tensor {
            shape,
            data,
            node: Some((graph.clone(), id)),
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("node", &self.node_id())
            .finish()
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => unreachable!("tensors are at most rank 2"),
    }
}
