//! Eager tape: every op computes its value immediately and records a
//! closure that maps the output gradient to parent gradients.

use crate::array::Array;

/// Maps (output gradient, parent values, output value) to one optional
/// gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Array, &[&Array], &Array) -> Vec<Option<Array>> + Send + Sync>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Array,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Array, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Array::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Reverse sweep from `root` seeded with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Array) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let parent_values: Vec<&Array> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, or zeros of `shape` when none flowed there.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Array {
        self.get(v).cloned().unwrap_or_else(|| Array::zeros(shape))
    }
}
