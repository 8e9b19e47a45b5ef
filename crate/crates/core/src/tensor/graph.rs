use super::{Element, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one node: receives the gradient of the node's output and
/// a mask of which parents need a gradient, returns one entry per parent.
pub type BackwardFn<T> =
    Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    parents: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Single-use computation tape.
///
/// Nodes are appended in evaluation order, so every parent index precedes its
/// child and the graph is acyclic by construction. [`Graph::backward`] walks
/// the tape once in reverse and consumes every backward rule.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    kinks: Option<KinkTrace>,
}

/// Sign pattern and nearest distance of every non-smooth point evaluated on
/// a graph (relu inputs, `|·|` arguments). Used by finite-difference checks
/// to detect perturbations that cross a kink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkTrace {
    pub signature: u64,
    pub min_distance: f64,
}

impl Default for KinkTrace {
    fn default() -> Self {
        Self {
            signature: 0xcbf2_9ce4_8422_2325,
            min_distance: f64::INFINITY,
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            kinks: None,
        }
    }

    /// Graph that records a [`KinkTrace`] for every kink-bearing op.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(KinkTrace::default()),
            ..Self::new()
        }
    }

    pub fn kink_trace(&self) -> Option<KinkTrace> {
        self.kinks
    }

    /// Fold the arguments of a non-smooth op into the kink trace, if tracked.
    pub fn note_kinks(&mut self, args: impl IntoIterator<Item = T>) {
        let Some(trace) = self.kinks.as_mut() else { return };
        for v in args {
            let class: u64 = if v > T::zero() { 1 } else if v < T::zero() { 2 } else { 3 };
            trace.signature = (trace.signature ^ class).wrapping_mul(0x0000_0100_0000_01b3);
            trace.min_distance = trace.min_distance.min(v.as_f64().abs());
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf("constant", value, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf("variable", value, true)
    }

    fn leaf(&mut self, op: &'static str, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            parents: Vec::new(),
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append an operation node.
    ///
    /// The backward rule is dropped immediately when no parent requires a
    /// gradient, releasing whatever activations it captured.
    pub fn push(
        &mut self,
        op: &'static str,
        parents: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::State(format!("{op} recorded on a consumed graph")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents: parents.iter().map(|p| p.0).collect(),
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Consumes the graph: a second call fails with a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward called twice on one graph".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut visited = 0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            visited += 1;
            let node = &mut self.nodes[id];
            let Some(rule) = node.backward.take() else {
                // leaf variable: keep its gradient
                grads[id] = Some(grad);
                continue;
            };
            let parents = node.parents.clone();
            let op = node.op;
            let mask: Vec<bool> = parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = rule(&grad, &mask)?;
            if parent_grads.len() != parents.len() {
                return Err(Error::State(format!(
                    "{op} returned {} gradients for {} parents",
                    parent_grads.len(),
                    parents.len()
                )));
            }
            for ((&p, g), need) in parents.iter().zip(parent_grads).zip(mask) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(dim_err(
                        op,
                        format!(
                            "gradient shape {:?} for parent of shape {:?}",
                            g.shape(),
                            self.nodes[p].value.shape()
                        ),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(op));
                }
                grads[p] = Some(match grads[p].take() {
                    None => g,
                    Some(acc) => acc.zip_map(&g, |a, b| a + b)?,
                });
            }
        }
        // release saved activations of nodes not on the loss path
        for node in &mut self.nodes {
            node.backward = None;
        }
        Ok(Gradients { grads, visited })
    }
}

/// Gradients of the leaf variables after a backward pass.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose backward rule ran (or whose gradient was kept).
    pub fn visited(&self) -> usize {
        self.visited
    }
}
