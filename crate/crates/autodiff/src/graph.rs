use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Valid only for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut Gradients<F>)>;

pub(crate) struct Node<F: Scalar> {
    pub value: Tensor<F>,
    pub needs_grad: bool,
    pub back: Option<BackFn<F>>,
}

/// Reverse-mode tape. Operations evaluate eagerly and, when any input is
/// connected to a tracked leaf, record a closure that routes the incoming
/// adjoint to the operation's parents.
///
/// Graphs are built per forward pass and dropped afterwards; node ids are
/// append-only, so reverse id order is a valid topological order for the
/// backward sweep.
pub struct Graph<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records no backward closures; forward values only.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: gradients are accumulated for it during backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let track = self.grad_enabled;
        self.push(value, track, None)
    }

    /// Untracked input; backward treats it as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, None)
    }

    /// Value copy of `v` severed from the tape (constant from here on).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Replace a node's forward value in place. Only allowed on inference
    /// graphs, where no recorded closure can observe the old value; used by
    /// attention interventions (e.g. the erasing diagnostic).
    pub fn override_value(&mut self, v: Var, value: Tensor<F>) {
        assert!(
            !self.grad_enabled,
            "value overrides are only valid on inference graphs"
        );
        assert_eq!(self.nodes[v.0].value.shape(), value.shape());
        self.nodes[v.0].value = value;
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, needs_grad: bool, back: Option<BackFn<F>>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            back: if self.grad_enabled { back } else { None },
        });
        Var(id)
    }

    /// Record an op node; the closure is kept only when some parent is
    /// connected to a tracked leaf.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        back: impl Fn(&Tensor<F>, &mut Gradients<F>) + 'static,
    ) -> Var {
        let needs = self.grad_enabled && parents.iter().any(|p| self.wants(*p));
        let back: Option<BackFn<F>> = if needs { Some(Box::new(back)) } else { None };
        self.push(value, needs, back)
    }

    /// Reverse sweep from a scalar loss. Returns the adjoints of all leaves
    /// reached; interior adjoints are freed as soon as they are consumed.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads = Gradients {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.back.is_none() {
                continue; // leaf or constant: keep any accumulated adjoint
            }
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            if let Some(back) = &node.back {
                back(&g, &mut grads);
            }
        }
        grads
    }
}

/// Adjoint buffers produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }

    pub(crate) fn add(&mut self, v: Var, t: Tensor<F>) {
        match &mut self.slots[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}
