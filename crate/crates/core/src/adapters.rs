//! Trainable bottleneck adapters and the visual neck.

use rand::Rng;

use crate::engine::fan_in_uniform;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Matrix, ParamId, ParamStore, Tape, Var};

/// Residual bottleneck `x + silu(x · down) · up`.
///
/// `up` starts at zero, so a fresh adapter is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub down: ParamId,
    pub up: ParamId,
    pub width: usize,
    pub bottleneck: usize,
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Self {
        AdapterParams {
            down: store.add(
                format!("{prefix}.down"),
                fan_in_uniform(width, bottleneck, rng),
                true,
            ),
            up: store.add(format!("{prefix}.up"), Matrix::zeros(bottleneck, width), true),
            width,
            bottleneck,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.width * self.bottleneck
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.1 != self.width {
            return Err(Error::dim("adapter_forward", shape, (shape.0, self.width)));
        }
        let down = tape.param(self.down);
        let up = tape.param(self.up);
        let h = tape.matmul(x, down)?;
        let h = tape.activation(h, Activation::Silu);
        let delta = tape.matmul(h, up)?;
        tape.add(x, delta)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// Per-token Linear-SiLU-Linear projection from encoder width to stack
/// width.
#[derive(Clone, Debug, PartialEq)]
pub struct NeckParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_width: usize,
    pub hidden: usize,
    pub out_width: usize,
}

impl NeckParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        NeckParams {
            w1: store.add("neck.w1", fan_in_uniform(in_width, hidden, rng), true),
            b1: store.add("neck.b1", Matrix::zeros(1, hidden), true),
            w2: store.add("neck.w2", fan_in_uniform(hidden, out_width, rng), true),
            b2: store.add("neck.b2", Matrix::zeros(1, out_width), true),
            in_width,
            hidden,
            out_width,
        }
    }

    /// `x_cat` is `d′ × n`; the result is `d′ × n′`.
    pub fn forward(&self, tape: &mut Tape, x_cat: Var) -> Result<Var> {
        let shape = tape.value(x_cat).shape();
        if shape.1 != self.in_width {
            return Err(Error::dim("neck_forward", shape, (shape.0, self.in_width)));
        }
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x_cat, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.activation(h, Activation::Silu);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
