//! LSTM cell shared by the encoders, the memory write head and the decoder.
//!
//! Gate columns are laid out `[input, forget, candidate, output]`.

use crate::error::Result;
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Var};

/// Hidden and cell rows, `n × hidden` each.
#[derive(Clone, Copy, Debug)]
pub struct LstmState<'g> {
    pub h: Var<'g>,
    pub c: Var<'g>,
}

impl<'g> LstmState<'g> {
    pub fn zeros(graph: &'g Graph, rows: usize, hidden: usize) -> Self {
        LstmState {
            h: graph.zeros(&[rows, hidden]),
            c: graph.zeros(&[rows, hidden]),
        }
    }
}

/// `w_x`, `w_h` and `b` under `prefix`.
pub fn lstm_specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_x"), input, 4 * hidden),
        ParamSpec::weight(format!("{prefix}.w_h"), hidden, 4 * hidden),
        ParamSpec::bias(format!("{prefix}.b"), 4 * hidden),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCell<'g> {
    pub w_x: Var<'g>,
    pub w_h: Var<'g>,
    pub b: Var<'g>,
    pub hidden: usize,
}

impl<'g> LstmCell<'g> {
    pub fn bind(params: &Bound<'g>, prefix: &str) -> Result<Self> {
        let w_h = params.get(&format!("{prefix}.w_h"))?;
        let hidden = w_h.shape()[0];
        Ok(LstmCell {
            w_x: params.get(&format!("{prefix}.w_x"))?,
            w_h,
            b: params.get(&format!("{prefix}.b"))?,
            hidden,
        })
    }

    pub fn step(&self, x: Var<'g>, state: LstmState<'g>) -> Result<LstmState<'g>> {
        let gates = x
            .matmul(self.w_x)?
            .add(state.h.matmul(self.w_h)?)?
            .add_row(self.b)?;
        apply_gates(gates, state.c, self.hidden)
    }
}

/// Finish an LSTM step from pre-activation gates (`n × 4·hidden`).
pub fn apply_gates<'g>(gates: Var<'g>, c_prev: Var<'g>, hidden: usize) -> Result<LstmState<'g>> {
    let input = gates.narrow(1, 0, hidden)?.sigmoid();
    let forget = gates.narrow(1, hidden, hidden)?.sigmoid();
    let candidate = gates.narrow(1, 2 * hidden, hidden)?.tanh();
    let output = gates.narrow(1, 3 * hidden, hidden)?.sigmoid();
    let c = forget.mul(c_prev)?.add(input.mul(candidate)?)?;
    let h = output.mul(c.tanh())?;
    Ok(LstmState { h, c })
}
