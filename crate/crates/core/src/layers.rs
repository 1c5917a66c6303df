//! Small parameterized layers shared by the models.

use learnds_autodiff::{Binding, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: ps.add_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            b: ps.add_full(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add_row(y, p.var(self.b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            g: ps.add_full(format!("{name}.g"), &[width], 1.0),
            b: ps.add_full(format!("{name}.b"), &[width], 0.0),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, 1e-5)?;
        let y = tape.mul_row(y, p.var(self.g))?;
        Ok(tape.add_row(y, p.var(self.b))?)
    }
}
