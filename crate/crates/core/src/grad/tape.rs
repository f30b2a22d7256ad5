use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::grad::float::Float;
use crate::grad::tensor::Tensor;

/// Backward rule of a recorded op. Receives the output gradient and a mask of
/// which parents need a gradient; returns one entry per parent.
pub type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
    retain: bool,
}

struct TapeInner<T: Float> {
    nodes: Vec<Node<T>>,
    no_grad_depth: usize,
}

/// Append-only record of the ops executed in one forward pass.
///
/// Backward rules are consumed by [`Tape::backward`], so each tape supports a
/// single backward pass.
pub struct Tape<T: Float = f32>(Rc<RefCell<TapeInner<T>>>);

impl<T: Float> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            no_grad_depth: 0,
        })))
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// A differentiable input. Its gradient is kept after backward. Leaves
    /// require gradients even inside [`Tape::no_grad`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let requires_grad = true;
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
            retain: true,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            retain: false,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.0.borrow().no_grad_depth == 0
    }

    /// Run `f` without recording backward rules.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        self.0.borrow_mut().no_grad_depth += 1;
        let out = f();
        self.0.borrow_mut().no_grad_depth -= 1;
        out
    }

    /// Record an op output. `backward` is dropped unless some parent needs a
    /// gradient and recording is enabled.
    pub fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        for p in parents {
            assert!(p.tape.same_tape(self), "op mixes variables from different tapes");
        }
        let requires_grad = self.grad_enabled() && parents.iter().any(|p| p.requires_grad);
        let node = if requires_grad {
            Node {
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
                requires_grad: true,
                retain: false,
            }
        } else {
            Node {
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
                retain: false,
            }
        };
        let id = self.push(node);
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Gradients<T> {
        assert!(loss.tape.same_tape(self), "loss recorded on another tape");
        assert_eq!(loss.value.numel(), 1, "backward needs a scalar loss");
        let n = self.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        if !loss.requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::ones(loss.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let (parents, backward, needs, retain) = {
                let mut inner = self.0.borrow_mut();
                let node = &mut inner.nodes[id];
                let parents = node.parents.clone();
                let backward = node.backward.take();
                let retain = node.retain;
                let needs: Vec<bool> = parents.iter().map(|&p| inner.nodes[p].requires_grad).collect();
                (parents, backward, needs, retain)
            };
            if !retain {
                grads[id] = None;
            }
            let Some(backward) = backward else { continue };
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&p, pg), &need) in parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        assert_eq!(acc.shape(), pg.shape(), "gradient shape mismatch");
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Gradients<T: Float = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

/// A tensor value bound to a node of a [`Tape`].
pub struct Var<T: Float = f32> {
    tape: Tape<T>,
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
}

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            value: self.value.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl<T: Float> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value as `f64`.
    pub fn scalar(&self) -> f64 {
        self.value.item().as_f64()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant(self.value.clone())
    }

    /// Keep this variable's gradient after backward.
    pub fn retain_grad(&self) {
        self.tape.0.borrow_mut().nodes[self.id].retain = true;
    }

    /// New constant on the same tape.
    pub fn constant_like(&self, value: Tensor<T>) -> Var<T> {
        self.tape.constant(value)
    }
}
