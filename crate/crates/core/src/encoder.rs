//! Per-pedestrian trajectory encoding and the per-frame context vectors:
//! soft attention over the pedestrian's own history, distance-weighted
//! neighbourhood context, and their combination.

use crate::error::{Error, Result};
use crate::lstm::{LstmCell, LstmState};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Tensor, Var};

/// Distance clamp for neighbourhood weights, in normalized units.
pub const DEFAULT_MIN_DISTANCE: f64 = 1e-3;

/// Run the encoder over a window of positions, one hidden row per point.
/// The first input offset is zero.
pub fn encode_trajectory<'g>(cell: &LstmCell<'g>, points: &[[f64; 2]]) -> Result<Vec<Var<'g>>> {
    let first = points
        .first()
        .ok_or_else(|| Error::Contract("cannot encode an empty window".into()))?;
    let graph = cell.w_x.graph();
    let mut state = LstmState::zeros(graph, 1, cell.hidden);
    let mut prev = *first;
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let delta = graph.constant(Tensor::row(&[p[0] - prev[0], p[1] - prev[1]]));
        state = cell.step(delta, state)?;
        out.push(state.h);
        prev = *p;
    }
    Ok(out)
}

pub fn attention_specs(prefix: &str, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_key"), hidden, hidden),
        ParamSpec::weight(format!("{prefix}.w_query"), hidden, hidden),
        ParamSpec::weight(format!("{prefix}.v"), hidden, 1),
    ]
}

/// Additive attention: `score_j = v · tanh(h_j W_key + q W_query)`.
#[derive(Clone, Copy, Debug)]
pub struct SoftAttention<'g> {
    pub w_key: Var<'g>,
    pub w_query: Var<'g>,
    pub v: Var<'g>,
}

impl<'g> SoftAttention<'g> {
    pub fn bind(params: &Bound<'g>, prefix: &str) -> Result<Self> {
        Ok(SoftAttention {
            w_key: params.get(&format!("{prefix}.w_key"))?,
            w_query: params.get(&format!("{prefix}.w_query"))?,
            v: params.get(&format!("{prefix}.v"))?,
        })
    }

    /// `hiddens` is `n × l`, `query` is `1 × l`. Returns the `1 × l`
    /// context and the `n × 1` weights.
    pub fn attend(&self, hiddens: Var<'g>, query: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let keys = hiddens.matmul(self.w_key)?;
        let q = query.matmul(self.w_query)?;
        let scores = keys.add_row(q)?.tanh().matmul(self.v)?;
        let alpha = scores.softmax()?;
        let context = alpha.transpose()?.matmul(hiddens)?;
        Ok((context, alpha))
    }
}

/// Stacked hidden rows of other pedestrians and where each was observed.
#[derive(Clone, Debug)]
pub struct Neighbours<'g> {
    /// `n × l`.
    pub hiddens: Var<'g>,
    pub positions: Vec<[f64; 2]>,
}

/// `Σ_j w_j h_j` with `w_j = 1 / max(‖target − p_j‖, min_distance)`; the
/// zero row when there are no neighbours. `target` is a `1 × 2` row and may
/// carry a gradient.
pub fn hardwired_attention<'g>(
    graph: &'g Graph,
    hidden: usize,
    neighbours: Option<&Neighbours<'g>>,
    target: Var<'g>,
    min_distance: f64,
) -> Result<Var<'g>> {
    let Some(nb) = neighbours.filter(|n| !n.positions.is_empty()) else {
        return Ok(graph.zeros(&[1, hidden]));
    };
    let rows: Vec<f64> = nb.positions.iter().flatten().copied().collect();
    let at = graph.constant(Tensor::new(vec![nb.positions.len(), 2], rows)?);
    let sq = at.neg().add_row(target)?.square()?;
    let dist_sq = sq.matmul(graph.constant(Tensor::ones(&[2, 1])))?;
    let weights = dist_sq.clamp_min(min_distance * min_distance).powf(-0.5);
    weights.transpose()?.matmul(nb.hiddens)
}

/// `tanh` of the concatenated contexts.
pub fn combine<'g>(c_soft: Var<'g>, c_hard: Option<Var<'g>>) -> Result<Var<'g>> {
    match c_hard {
        Some(h) => Ok(c_soft.graph().concat(&[c_soft, h], 1)?.tanh()),
        None => Ok(c_soft.tanh()),
    }
}
