use ndarray::Array2;

use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse-mode rule of a recorded operation.
pub trait Backward<T: Real> {
    /// Name used in diagnostics (e.g. the non-finite value report).
    fn name(&self) -> &'static str;

    /// Accumulates input gradients given the gradient of the output.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Array2<T>, acc: &mut GradAcc<T>);
}

struct Node<T: Real> {
    value: Array2<T>,
    op: Option<Box<dyn Backward<T>>>,
    name: &'static str,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A statically recorded computation: every operation appends a node holding
/// its forward value and the rule needed to propagate gradients back.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that does not require gradients.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push_leaf(value, "constant", false, None)
    }

    /// Records a scalar constant as a `1×1` value.
    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Records a leaf that gradients flow into (not tied to a parameter).
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.push_leaf(value, "variable", true, None)
    }

    /// Binds a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(p.value.clone(), "parameter", p.requires_grad, Some(id))
    }

    /// Binds every parameter of `store`, indexed by [`ParamId`].
    pub fn bind_all(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    fn push_leaf(
        &mut self,
        value: Array2<T>,
        name: &'static str,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            name,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends the result of an operation on `inputs`.
    pub fn push_op(
        &mut self,
        value: Array2<T>,
        inputs: &[Var],
        op: Box<dyn Backward<T>>,
    ) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let name = op.name();
        self.nodes.push(Node {
            value,
            op: if needs_grad { Some(op) } else { None },
            name,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, v: Var) -> T {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    /// Fails on the first node holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for node in &self.nodes {
            if node.value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue {
                    op: node.name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<GradAcc<T>> {
        if self.shape(output) != (1, 1) {
            return Err(Error::shape("backward", "1×1 output", format!("{:?}", self.shape(output))));
        }
        let mut acc = GradAcc {
            grads: (0..=output.0).map(|_| None).collect(),
            shapes: self.nodes[..=output.0].iter().map(|n| n.value.dim()).collect(),
            needs: self.nodes[..=output.0].iter().map(|n| n.needs_grad).collect(),
        };
        if !self.nodes[output.0].needs_grad {
            return Ok(acc);
        }
        acc.grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));
        for i in (0..=output.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                tape: self,
                out: Var(i),
            };
            op.backward(&ctx, &g, &mut acc);
            acc.grads[i] = Some(g);
        }
        Ok(acc)
    }

    /// Collects parameter gradients from a finished backward pass.
    pub fn param_gradients(&self, acc: &GradAcc<T>, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients {
            grads: (0..store.len()).map(|_| None).collect(),
        };
        for (i, node) in self.nodes.iter().enumerate().take(acc.grads.len()) {
            if let Some(id) = node.param {
                if !store.get(id).requires_grad {
                    continue;
                }
                let g = acc.grads[i]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                match &mut out.grads[id.0] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        for id in store.ids() {
            let p = store.get(id);
            if p.requires_grad && out.grads[id.0].is_none() {
                out.grads[id.0] = Some(Array2::zeros(p.value.dim()));
            }
        }
        out
    }
}

/// Read access to values during a backward pass.
pub struct BackwardCtx<'a, T: Real> {
    tape: &'a Tape<T>,
    out: Var,
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Array2<T> {
        self.tape.value(v)
    }

    pub fn output(&self) -> &'a Array2<T> {
        self.tape.value(self.out)
    }
}

/// Gradient accumulator indexed by tape node.
pub struct GradAcc<T: Real> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
    needs: Vec<bool>,
}

impl<T: Real> GradAcc<T> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable gradient buffer of `v` (zero-initialized on first use), or
    /// `None` when `v` does not lead to any trainable leaf.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut Array2<T>> {
        if !self.needs[v.0] {
            return None;
        }
        let shape = self.shapes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| Array2::zeros(shape)))
    }

    /// Adds `g` into the gradient of `v`.
    pub fn add(&mut self, v: Var, g: &Array2<T>) {
        if let Some(buf) = self.grad_mut(v) {
            *buf += g;
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Per-parameter gradients; `None` for parameters that do not require them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            grads: store
                .ids()
                .map(|id| {
                    let p = store.get(id);
                    p.requires_grad.then(|| Array2::zeros(p.value.dim()))
                })
                .collect(),
        }
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over every gradient entry.
    pub fn norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(T::zero(), |acc, x| acc + *x * *x)
            .sqrt()
    }
}

/// Evaluates `computation` on a fresh tape and returns its scalar value with
/// the gradients of every parameter that requires them.
pub fn evaluate_with_gradients<T, F>(store: &ParamStore<T>, computation: F) -> Result<(T, Gradients<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let params = tape.bind_all(store);
    let out = computation(&mut tape, &params)?;
    tape.check_finite()?;
    let value = tape.scalar_value(out);
    let acc = tape.backward(out)?;
    let grads = tape.param_gradients(&acc, store);
    if !grads.is_finite() {
        return Err(Error::NonFiniteValue {
            op: "backward".into(),
        });
    }
    Ok((value, grads))
}

/// Forward-only evaluation of a scalar computation.
pub fn evaluate<T, F>(store: &ParamStore<T>, computation: F) -> Result<T>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let params = tape.bind_all(store);
    let out = computation(&mut tape, &params)?;
    tape.check_finite()?;
    Ok(tape.scalar_value(out))
}
