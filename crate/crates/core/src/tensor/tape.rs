use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward rule.
pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether each input needs a gradient; rules may skip work for `false`.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    retain: bool,
    /// Set on stop-gradient outputs: the node whose value was copied.
    detached_from: Option<usize>,
    op: &'static str,
}

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every input id precedes its
/// consumer and a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
    /// Replacement values for successive stop-gradient outputs.
    frozen: Option<std::vec::IntoIter<Tensor<T>>>,
    /// FNV-1a hash of every piecewise branch taken, when tracking.
    branches: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: false,
            frozen: None,
            branches: None,
        }
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
            frozen: None,
            branches: None,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf; its gradient is kept by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad,
            retain: requires_grad,
            detached_from: None,
            op: "leaf",
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep this intermediate node's gradient after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Appends an operation result. The backward rule is dropped when no
    /// parent requires a gradient.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            retain: false,
            detached_from: None,
            op,
        }))
    }

    /// Forward identity whose output is a fresh leaf: no gradient ever flows
    /// back into `x` through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match self.frozen.as_mut().and_then(|f| f.next()) {
            Some(v) => v,
            None => self.nodes[x.0].value.clone(),
        };
        let v = self.push_node(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
            retain: false,
            detached_from: Some(x.0),
            op: "stop_gradient",
        });
        v
    }

    /// A tape whose stop-gradient outputs take the given values, in call
    /// order, instead of their inputs. Finite differences on such a tape see
    /// detached quantities as the constants the analytic gradient assumes.
    pub fn with_frozen_stops(values: Vec<Tensor<T>>) -> Self {
        Self {
            frozen: Some(values.into_iter()),
            ..Self::new()
        }
    }

    /// Starts recording which side of every kink (ReLU, max-pool winner,
    /// truncation) the forward pass lands on.
    pub fn track_branches(&mut self) {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
    }

    /// Hash of the branches taken so far; equal signatures mean two passes
    /// lie on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn is_tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn note_branches(&mut self, codes: impl IntoIterator<Item = u32>) {
        if let Some(h) = self.branches.as_mut() {
            for c in codes {
                for b in c.to_le_bytes() {
                    *h = (*h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
    }

    /// Values of every stop-gradient output, in call order.
    pub fn stop_values(&self) -> Vec<Tensor<T>> {
        self.nodes.iter().filter(|n| n.op == "stop_gradient").map(|n| n.value.clone()).collect()
    }

    /// Nodes that `target` depends on through differentiable edges.
    pub fn differentiable_ancestors(&self, target: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        seen[target.0] = true;
        for i in (0..=target.0).rev() {
            if seen[i] {
                for &p in &self.nodes[i].parents {
                    seen[p] = true;
                }
            }
        }
        seen
    }

    /// Nodes that `target` depends on when stop-gradient edges are treated
    /// as ordinary identities.
    pub fn all_ancestors(&self, target: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        seen[target.0] = true;
        for i in (0..=target.0).rev() {
            if seen[i] {
                for &p in &self.nodes[i].parents {
                    seen[p] = true;
                }
                if let Some(src) = self.nodes[i].detached_from {
                    seen[src] = true;
                }
            }
        }
        seen
    }

    /// Leaves and intermediates that influence `target` only through a
    /// stop-gradient operand.
    pub fn reachable_only_through_stop_gradient(&self, target: Var) -> Vec<Var> {
        let diff = self.differentiable_ancestors(target);
        let all = self.all_ancestors(target);
        (0..self.nodes.len())
            .filter(|&i| all[i] && !diff[i])
            .filter(|&i| self.nodes[i].op != "stop_gradient")
            .map(Var)
            .collect()
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Gradients are kept for trainable leaves and for nodes marked with
    /// [`Tape::retain_grad`]; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect(),
                };
                let parent_grads = rule(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "{}", node.op);
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.retain {
                kept[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.retain && kept[i].is_none() && node.requires_grad {
                kept[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: kept })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
