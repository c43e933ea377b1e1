use pmt_tensor::{ParamId, ParamStore, Real, Tape, Var};

use crate::error::Result;
use crate::params::Linear;

/// A tape bound to the parameter store it reads from.
pub struct Graph<'s, F: Real> {
    pub tape: Tape<F>,
    pub store: &'s ParamStore<F>,
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph { tape: Tape::new(), store }
    }

    /// Tape node for a parameter; repeated calls reuse one node.
    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// `x · W + b` over the last axis of a row matrix.
    pub fn linear(&mut self, x: Var, layer: &Linear) -> Result<Var> {
        let w = self.p(layer.w);
        let b = self.p(layer.b);
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let g = self.p(gain);
        let b = self.p(bias);
        Ok(self.tape.layer_norm(x, g, b)?)
    }
}
