//! Reverse-mode tape.
//!
//! Ops push one node per output. A node records its parents and a closure
//! that maps the output gradient to per-parent gradient contributions. The
//! tape is single-writer; independent graphs on independent tapes may run in
//! parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<(NodeId, Vec<f64>)>>;

struct Node {
    backward: BackwardFn,
    numel: usize,
}

/// Recording tape for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    checked: bool,
}

impl Tape {
    /// Recording tape with per-op NaN/Inf checks enabled.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: true,
            checked: true,
        }
    }

    /// Recording tape without finite-value checks (training loops).
    pub fn training() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: true,
            checked: false,
        }
    }

    /// Non-recording tape: ops run forward only and produce detached tensors.
    pub fn inference() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: false,
            checked: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register `t` as a leaf (trainable input) on this tape.
    pub fn leaf(&mut self, t: &mut Tensor) {
        if !self.recording {
            t.set_node(None);
            return;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            backward: Box::new(|_| Vec::new()),
            numel: t.numel(),
        });
        t.set_node(Some(id));
    }

    /// Push an op output node. `backward` receives the output gradient and
    /// returns (parent id, parent gradient contribution) pairs.
    pub(crate) fn emit(
        &mut self,
        mut out: Tensor,
        track: bool,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if self.checked && !out.is_finite() {
            return Err(Error::NonFinite("op produced NaN or Inf".into()));
        }
        if self.recording && track {
            let id = self.nodes.len();
            self.nodes.push(Node {
                backward,
                numel: out.numel(),
            });
            out.set_node(Some(id));
        } else {
            out.set_node(None);
        }
        Ok(out)
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got {} elements",
                root.numel()
            )));
        }
        let root_id = root
            .node()
            .ok_or_else(|| Error::Usage("backward root is not tracked on this tape".into()))?;
        if root_id >= self.nodes.len() {
            return Err(Error::Usage("backward root id out of range for tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            debug_assert_eq!(g.len(), self.nodes[id].numel);
            for (pid, pg) in (self.nodes[id].backward)(&g) {
                debug_assert!(pid < id, "tape not topologically ordered");
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg.iter()) {
                            *a += b;
                        }
                    }
                    None => grads[pid] = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `t`, shaped like `t`. Zero tensor if `t`
    /// was tracked but unreachable from the root.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let id = t
            .node()
            .ok_or_else(|| Error::Usage("gradient requested for untracked tensor".into()))?;
        match self.grads.get(id) {
            Some(Some(g)) => Tensor::new(t.shape(), g.clone()),
            Some(None) => Ok(Tensor::zeros(t.shape())),
            None => Err(Error::Usage("tensor id not on this tape".into())),
        }
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

/// True when the op consuming these inputs should record a node.
pub(crate) fn any_tracked(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.node().is_some())
}
