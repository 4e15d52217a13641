//! Hierarchical memory read.
//!
//! Each layer first advances a gated recurrent state for every cell of its
//! grid, then merges non-overlapping 2×2 groups into the next, halved grid.
//! The single vector left after the last merge is the read output. Weights
//! are shared within a layer; recurrent states are kept per cell.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::memory::GridShape;
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Var};

pub fn read_specs(prefix: &str, hidden: usize, stages: usize) -> Vec<ParamSpec> {
    (0..stages)
        .flat_map(|j| {
            let p = format!("{prefix}.l{j}");
            [
                ParamSpec::weight(format!("{p}.w_z"), 2 * hidden, hidden),
                ParamSpec::bias(format!("{p}.b_z"), hidden),
                ParamSpec::weight(format!("{p}.w_o"), 2 * hidden, hidden),
                ParamSpec::bias(format!("{p}.b_o"), hidden),
                ParamSpec::weight(format!("{p}.w_q"), 4 * hidden, hidden),
                ParamSpec::bias(format!("{p}.b_q"), hidden),
            ]
        })
        .collect()
}

/// Weights of one layer. The update-gate and candidate maps are stored
/// side by side so a layer step is a single product.
#[derive(Clone, Copy, Debug)]
pub struct ReadLayer<'g> {
    w_cell: Var<'g>,
    b_cell: Var<'g>,
    w_q: Var<'g>,
    b_q: Var<'g>,
    hidden: usize,
}

impl<'g> ReadLayer<'g> {
    pub fn new(w_z: Var<'g>, b_z: Var<'g>, w_o: Var<'g>, b_o: Var<'g>, w_q: Var<'g>, b_q: Var<'g>) -> Result<Self> {
        let graph = w_z.graph();
        let hidden = w_z.shape()[1];
        Ok(ReadLayer {
            w_cell: graph.concat(&[w_z, w_o], 1)?,
            b_cell: graph.concat(&[b_z, b_o], 1)?,
            w_q,
            b_q,
            hidden,
        })
    }

    pub fn bind(params: &Bound<'g>, prefix: &str, layer: usize) -> Result<Self> {
        let get = |n: &str| params.get(&format!("{prefix}.l{layer}.{n}"));
        Self::new(get("w_z")?, get("b_z")?, get("w_o")?, get("b_o")?, get("w_q")?, get("b_q")?)
    }

    /// Gated state update for every row: returns the new states and the
    /// update gate.
    pub fn cell_step(&self, input: Var<'g>, prev: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let pre = input
            .graph()
            .concat(&[input, prev], 1)?
            .matmul(self.w_cell)?
            .add_row(self.b_cell)?;
        let z = pre.narrow(1, 0, self.hidden)?.sigmoid();
        let candidate = pre.narrow(1, self.hidden, self.hidden)?.tanh();
        Ok((candidate.lerp(z, prev)?, z))
    }

    /// Merge the 2×2 groups of a `side × side` grid of states. Returns the
    /// merged rows (row-major over the halved grid) and the composition
    /// gates.
    pub fn compose(&self, states: Var<'g>, plan: &GroupPlan) -> Result<(Var<'g>, Var<'g>)> {
        let parts = plan
            .roles
            .iter()
            .map(|idx| states.gather_rows(Rc::clone(idx)))
            .collect::<Result<Vec<_>>>()?;
        let q = states
            .graph()
            .concat(&parts, 1)?
            .matmul(self.w_q)?
            .add_row(self.b_q)?
            .sigmoid();
        let gated = parts[0].tanh().mul(q)?;
        Ok((gated.group_sum_rows(4)?, q))
    }
}

/// Row selections for merging a `side × side` grid. Rows come out grouped
/// (four consecutive rows per 2×2 group, groups row-major); for each member
/// the four roles are itself, its horizontal, vertical and diagonal partner.
#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub side: usize,
    pub roles: [Rc<[usize]>; 4],
}

impl GroupPlan {
    pub fn new(side: usize) -> Self {
        let mut roles: [Vec<usize>; 4] = Default::default();
        for gy in 0..side / 2 {
            for gx in 0..side / 2 {
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (x, y) = (2 * gx + dx, 2 * gy + dy);
                    roles[0].push(y * side + x);
                    roles[1].push(y * side + (x ^ 1));
                    roles[2].push((y ^ 1) * side + x);
                    roles[3].push((y ^ 1) * side + (x ^ 1));
                }
            }
        }
        GroupPlan {
            side,
            roles: roles.map(Rc::from),
        }
    }
}

/// Activation ranges of one layer during one read.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub cells: usize,
    pub update_gate: (f64, f64),
    pub compose_gate: (f64, f64),
    pub state: (f64, f64),
    /// Mean Euclidean norm of the per-cell states.
    pub mean_state_norm: f64,
}

fn range(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Recurrent read state of one sample.
#[derive(Clone, Debug)]
pub struct ReadHierarchy<'g> {
    layers: Vec<ReadLayer<'g>>,
    plans: Vec<GroupPlan>,
    states: Vec<Var<'g>>,
    shape: GridShape,
}

impl<'g> ReadHierarchy<'g> {
    pub fn new(graph: &'g Graph, layers: Vec<ReadLayer<'g>>, shape: GridShape) -> Result<Self> {
        if layers.len() != shape.stages() {
            return Err(Error::Config(format!(
                "{}x{} memory needs {} read layers, got {}",
                shape.width,
                shape.height,
                shape.stages(),
                layers.len()
            )));
        }
        let hidden = layers.first().map(|l| l.hidden).unwrap_or(0);
        let (mut plans, mut states) = (Vec::new(), Vec::new());
        let mut side = shape.width;
        for _ in 0..layers.len() {
            plans.push(GroupPlan::new(side));
            states.push(graph.zeros(&[side * side, hidden]));
            side /= 2;
        }
        Ok(ReadHierarchy {
            layers,
            plans,
            states,
            shape,
        })
    }

    pub fn bind(params: &Bound<'g>, graph: &'g Graph, prefix: &str, shape: GridShape) -> Result<Self> {
        let layers = (0..shape.stages())
            .map(|j| ReadLayer::bind(params, prefix, j))
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph, layers, shape)
    }

    pub fn stages(&self) -> usize {
        self.layers.len()
    }

    pub fn states(&self) -> &[Var<'g>] {
        &self.states
    }

    /// Advance every layer once over `memory` (`W·H × l`, row `y·W + x`)
    /// and return the `1 × l` summary.
    pub fn read(&mut self, memory: Var<'g>) -> Result<Var<'g>> {
        self.read_traced(memory, None)
    }

    pub fn read_traced(&mut self, memory: Var<'g>, mut trace: Option<&mut Vec<LayerStats>>) -> Result<Var<'g>> {
        if memory.shape()[0] != self.shape.cells() {
            return Err(Error::shape("read", &memory.shape(), &[self.shape.cells()]));
        }
        let mut input = memory;
        for (j, layer) in self.layers.iter().enumerate() {
            let (state, z) = layer.cell_step(input, self.states[j])?;
            self.states[j] = state;
            let (merged, q) = layer.compose(state, &self.plans[j])?;
            if let Some(t) = trace.as_deref_mut() {
                let sv = state.value();
                let norms: f64 = (0..sv.rows())
                    .map(|r| sv.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .sum();
                t.push(LayerStats {
                    cells: sv.rows(),
                    update_gate: range(z.value().data()),
                    compose_gate: range(q.value().data()),
                    state: range(sv.data()),
                    mean_state_norm: norms / sv.rows() as f64,
                });
            }
            input = merged;
        }
        Ok(input)
    }
}
