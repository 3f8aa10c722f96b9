use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            w: store.add_xavier(format!("{name}.w"), inputs, outputs, rng),
            b: store.add_zeros(format!("{name}.b"), 1, outputs),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}
