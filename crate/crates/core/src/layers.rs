//! Parameter lookup on a tape and the small affine building blocks.

use ctl_tensor::{Real, Tape, Var};
use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Name → tape variable view over a bound parameter set, with a path prefix.
#[derive(Clone, Copy)]
pub struct ParamScope<'a> {
    vars: &'a IndexMap<String, Var>,
    prefix: &'a str,
}

impl<'a> ParamScope<'a> {
    pub fn new(vars: &'a IndexMap<String, Var>) -> Self {
        ParamScope { vars, prefix: "" }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        let key = self.path(name);
        self.vars
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Scope for a child path; the caller owns the prefix string.
    pub fn child<'b>(&self, prefix: &'b str) -> ParamScope<'b>
    where
        'a: 'b,
    {
        ParamScope {
            vars: self.vars,
            prefix,
        }
    }
}

/// `y = x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(scope: &ParamScope, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: scope.var(&format!("{name}.weight"))?,
            bias: scope.var(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add(y, self.bias)?)
    }
}

/// Stride-1 "same" convolution with kernels `[C_out×C_in×k×k]`, `k` odd.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
}

impl Conv {
    pub fn bind(scope: &ParamScope, name: &str) -> Result<Self> {
        Ok(Conv {
            weight: scope.var(&format!("{name}.weight"))?,
            bias: scope.var(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let k = tape.shape(self.weight)[2];
        let c_out = tape.shape(self.weight)[0];
        let y = tape.conv2d(x, self.weight, 1, k / 2)?;
        let b = tape.reshape(self.bias, &[c_out, 1, 1])?;
        Ok(tape.add(y, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn bind(scope: &ParamScope, name: &str) -> Result<Self> {
        Ok(Norm {
            gain: scope.var(&format!("{name}.gain"))?,
            bias: scope.var(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        Ok(tape.layernorm(x, self.gain, self.bias, F::of(LAYERNORM_EPS))?)
    }
}
