use crate::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`]. Cheap to copy; only valid for
/// the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&mut Backprop<'_>)>;

struct Node {
    backward: Option<BackwardFn>,
}

/// Append-only computation graph. Ops push a value plus a backward closure;
/// [`Tape::backward`] walks the nodes in reverse and accumulates gradients
/// into the leaves that were registered with [`Tape::param`].
///
/// A tape built with [`Tape::no_grad`] runs the same forward math but skips
/// all recording — use it for inference and finite-difference probes.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    need_grad: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), need_grad: Vec::new(), grads: Vec::new(), recording: true }
    }

    /// Forward-only tape: no backward closures are kept, `param` behaves
    /// like `constant`.
    pub fn no_grad() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers an input that does not need gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Registers a trainable leaf; its gradient is retained by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        let need = self.recording;
        self.push_leaf(t, need)
    }

    fn push_leaf(&mut self, t: Tensor, need: bool) -> Var {
        self.values.push(t);
        self.nodes.push(Node { backward: None });
        self.need_grad.push(need);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Rejects vars minted by a different tape before any op touches them.
    pub(crate) fn owned(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.0 >= self.values.len() {
                return Err(TensorError::invalid(op, "input var does not belong to this tape"));
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` call w.r.t. a leaf, if one flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.values[v.0].shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Records `out` as the result of `op` over `inputs`. The backward
    /// closure receives a [`Backprop`] context and must route
    /// `out_grad`-weighted contributions into each input that needs them.
    ///
    /// This is the extension point for ops defined outside this crate.
    pub fn custom_op<F>(&mut self, op: &'static str, inputs: &[Var], out: Tensor, backward: F) -> Result<Var>
    where
        F: Fn(&mut Backprop<'_>) + 'static,
    {
        self.push(op, inputs, out, backward)
    }

    pub(crate) fn push<F>(&mut self, op: &'static str, inputs: &[Var], out: Tensor, backward: F) -> Result<Var>
    where
        F: Fn(&mut Backprop<'_>) + 'static,
    {
        for v in inputs {
            if v.0 >= self.values.len() {
                return Err(TensorError::invalid(op, "input var does not belong to this tape"));
            }
        }
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let need = self.recording && inputs.iter().any(|v| self.need_grad[v.0]);
        self.values.push(out);
        self.need_grad.push(need);
        self.nodes.push(Node { backward: if need { Some(Box::new(backward)) } else { None } });
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    /// Reverse pass from a scalar loss. Interior gradients are dropped as
    /// soon as they have been propagated; leaf gradients stay readable via
    /// [`Tape::grad`] until the next `backward` call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(TensorError::invalid("backward", "tape was created with no_grad"));
        }
        let numel = self.values[loss.0].numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.need_grad[loss.0] {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { values, nodes, need_grad, grads, .. } = self;
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(bwd) = nodes[id].backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let g = grads[id].take().expect("checked above");
            let mut bp = Backprop { values, need: need_grad, out: id, out_grad: &g, grads };
            bwd(&mut bp);
        }
        Ok(())
    }
}

/// Read-only view of recorded forward values, used inside backward closures.
pub struct Vals<'a>(&'a [Tensor]);

impl<'a> Vals<'a> {
    pub fn get(&self, v: Var) -> &'a Tensor {
        &self.0[v.0]
    }
}

/// Mutable access to gradient accumulators, lazily zero-initialised.
pub struct GradBufs<'a> {
    values: &'a [Tensor],
    need: &'a [bool],
    grads: &'a mut [Option<Vec<f32>>],
}

impl GradBufs<'_> {
    /// Accumulator for `v`, or `None` when no gradient is required there.
    pub fn get(&mut self, v: Var) -> Option<&mut [f32]> {
        if !self.need[v.0] {
            return None;
        }
        let numel = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice())
    }

    /// Two distinct accumulators at once (e.g. conv2d input and kernel).
    pub fn get2(&mut self, a: Var, b: Var) -> (Option<&mut [f32]>, Option<&mut [f32]>) {
        assert_ne!(a.0, b.0, "get2 requires distinct vars");
        if self.need[a.0] {
            let numel = self.values[a.0].numel();
            self.grads[a.0].get_or_insert_with(|| vec![0.0; numel]);
        }
        if self.need[b.0] {
            let numel = self.values[b.0].numel();
            self.grads[b.0].get_or_insert_with(|| vec![0.0; numel]);
        }
        let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
        let (left, right) = self.grads.split_at_mut(hi);
        let ga = left[lo].as_mut().map(|g| g.as_mut_slice()).filter(|_| self.need[lo]);
        let gb = right[0].as_mut().map(|g| g.as_mut_slice()).filter(|_| self.need[hi]);
        if swap {
            (gb, ga)
        } else {
            (ga, gb)
        }
    }
}

/// Context handed to backward closures: forward values, the incoming
/// gradient of the op output, and accumulators for the op inputs.
pub struct Backprop<'a> {
    values: &'a [Tensor],
    need: &'a [bool],
    out: usize,
    out_grad: &'a [f32],
    grads: &'a mut [Option<Vec<f32>>],
}

impl<'a> Backprop<'a> {
    pub fn val(&self, v: Var) -> &'a Tensor {
        &self.values[v.0]
    }

    pub fn out_val(&self) -> &'a Tensor {
        &self.values[self.out]
    }

    pub fn out_grad(&self) -> &'a [f32] {
        self.out_grad
    }

    pub fn needs(&self, v: Var) -> bool {
        self.need[v.0]
    }

    /// Adds a dense contribution to the gradient of `v`. No-op when `v`
    /// does not require a gradient.
    pub fn add_grad(&mut self, v: Var, contrib: &[f32]) {
        if !self.need[v.0] {
            return;
        }
        let numel = self.values[v.0].numel();
        debug_assert_eq!(numel, contrib.len(), "gradient length mismatch");
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    /// Splits the context into forward values, output gradient and raw
    /// accumulators, for ops that want to scatter in place.
    pub fn split(&mut self) -> (Vals<'_>, &[f32], GradBufs<'_>) {
        (
            Vals(self.values),
            self.out_grad,
            GradBufs { values: self.values, need: self.need, grads: self.grads },
        )
    }
}
