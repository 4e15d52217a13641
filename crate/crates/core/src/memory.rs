//! Spatial memory grid: coordinate mapping, write vectors and single-cell
//! updates.

use crate::data::Extent;
use crate::error::{Error, Result};
use crate::lstm::{lstm_specs, LstmCell, LstmState};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Graph, Var};

/// Map a point to its grid cell, clamping onto the border cells.
pub fn psi(x: f64, y: f64, extent: &Extent, width: usize, height: usize) -> Result<(usize, usize)> {
    extent.check()?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Contract(format!("non-finite position ({x}, {y})")));
    }
    let cell = |v: f64, lo: f64, span: f64, n: usize| {
        let c = ((v - lo) / span * n as f64).floor();
        c.clamp(0.0, (n - 1) as f64) as usize
    };
    Ok((
        cell(x, extent.x_min, extent.width(), width),
        cell(y, extent.y_min, extent.height(), height),
    ))
}

/// Square power-of-two grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

impl GridShape {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || !width.is_power_of_two() || height < 2 || !height.is_power_of_two() {
            return Err(Error::Config(format!(
                "memory grid {width}x{height} must have power-of-two sides of at least 2"
            )));
        }
        if width != height {
            return Err(Error::Config(format!(
                "memory grid {width}x{height} must be square for the 2x2 merge hierarchy"
            )));
        }
        Ok(GridShape { width, height })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Row of cell `(x, y)` in the flattened grid.
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Number of 2×2 merge stages down to one cell.
    pub fn stages(&self) -> usize {
        self.width.trailing_zeros() as usize
    }
}

/// `cells × dim` contents, row `y·W + x`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryBlock<'g> {
    pub cells: Var<'g>,
    pub shape: GridShape,
}

impl<'g> MemoryBlock<'g> {
    pub fn zeros(graph: &'g Graph, shape: GridShape, dim: usize) -> Self {
        MemoryBlock {
            cells: graph.zeros(&[shape.cells(), dim]),
            shape,
        }
    }

    fn row(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.shape.width || y >= self.shape.height {
            return Err(Error::Contract(format!(
                "cell ({x}, {y}) outside {}x{} memory",
                self.shape.width, self.shape.height
            )));
        }
        Ok(self.shape.index(x, y))
    }

    pub fn cell(&self, x: usize, y: usize) -> Result<Var<'g>> {
        self.cells.row(self.row(x, y)?)
    }

    /// Replace cell `(x, y)` with `beta`; all other cells are untouched.
    pub fn update(&mut self, x: usize, y: usize, beta: Var<'g>) -> Result<()> {
        let r = self.row(x, y)?;
        self.cells = self.cells.replace_row(r, beta)?;
        Ok(())
    }

    /// Euclidean norm of every cell, row-major.
    pub fn cell_norms(&self) -> Vec<f64> {
        let v = self.cells.value();
        (0..v.rows())
            .map(|r| v.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// The write LSTM consumes `[combined context (2l), cell content (l)]`.
pub fn write_specs(prefix: &str, hidden: usize) -> Vec<ParamSpec> {
    lstm_specs(prefix, 3 * hidden, hidden)
}

#[derive(Clone, Copy, Debug)]
pub struct WriteHead<'g> {
    pub cell: LstmCell<'g>,
}

impl<'g> WriteHead<'g> {
    pub fn bind(params: &Bound<'g>, prefix: &str) -> Result<Self> {
        Ok(WriteHead {
            cell: LstmCell::bind(params, prefix)?,
        })
    }

    /// Returns the write vector and the advanced write state.
    pub fn write(&self, context: Var<'g>, content: Var<'g>, state: LstmState<'g>) -> Result<(Var<'g>, LstmState<'g>)> {
        let input = context.graph().concat(&[context, content], 1)?;
        let next = self.cell.step(input, state)?;
        Ok((next.h, next))
    }
}

/// One pending write: where the pedestrian is (normalized) and its
/// combined context.
#[derive(Clone, Copy, Debug)]
pub struct PendingWrite<'g> {
    pub position: [f64; 2],
    pub context: Var<'g>,
}

/// Apply `writes` in order; a later write to the same cell wins.
pub fn write_frame<'g>(
    block: &mut MemoryBlock<'g>,
    head: &WriteHead<'g>,
    state: &mut LstmState<'g>,
    writes: &[PendingWrite<'g>],
) -> Result<()> {
    for w in writes {
        let (x, y) = psi(w.position[0], w.position[1], &Extent::UNIT, block.shape.width, block.shape.height)?;
        let content = block.cell(x, y)?;
        let (beta, next) = head.write(w.context, content, *state)?;
        *state = next;
        block.update(x, y, beta)?;
    }
    Ok(())
}
