//! Gated combination of the two streams' memory summaries.

use crate::error::Result;
use crate::params::{Bound, ParamSpec};
use crate::tensor::Var;

pub fn fusion_specs(prefix: &str, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_i"), hidden, hidden),
        ParamSpec::weight(format!("{prefix}.w_r"), hidden, hidden),
        ParamSpec::weight(format!("{prefix}.w_gate"), 2 * hidden, hidden),
    ]
}

/// Intermediate values of one fusion, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Fused<'g> {
    pub video: Var<'g>,
    pub radar: Var<'g>,
    pub gate: Var<'g>,
    pub out: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct Fusion<'g> {
    pub w_i: Var<'g>,
    pub w_r: Var<'g>,
    pub w_gate: Var<'g>,
}

impl<'g> Fusion<'g> {
    pub fn bind(params: &Bound<'g>, prefix: &str) -> Result<Self> {
        Ok(Fusion {
            w_i: params.get(&format!("{prefix}.w_i"))?,
            w_r: params.get(&format!("{prefix}.w_r"))?,
            w_gate: params.get(&format!("{prefix}.w_gate"))?,
        })
    }

    /// `ν ⊙ tanh(h_I W_I) + (1 − ν) ⊙ tanh(h_R W_R)` with
    /// `ν = σ([tanh(h_I W_I), tanh(h_R W_R)] W_gate)`.
    pub fn fuse(&self, h_i: Var<'g>, h_r: Var<'g>) -> Result<Fused<'g>> {
        let video = h_i.matmul(self.w_i)?.tanh();
        let radar = h_r.matmul(self.w_r)?.tanh();
        let gate = h_i.graph().concat(&[video, radar], 1)?.matmul(self.w_gate)?.sigmoid();
        let out = video.lerp(gate, radar)?;
        Ok(Fused {
            video,
            radar,
            gate,
            out,
        })
    }
}

/// `tanh` of the concatenated parts.
pub fn fused_context<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| crate::Error::Contract("fused context of zero parts".into()))?;
    Ok(first.graph().concat(parts, 1)?.tanh())
}
