//! Model variants, parameter layout, the decoder and the per-sample
//! forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Stream, StreamWindow};
use crate::encoder::{attention_specs, hardwired_attention, Neighbours, SoftAttention, DEFAULT_MIN_DISTANCE};
use crate::error::{Error, Result};
use crate::fusion::{fusion_specs, Fusion};
use crate::lstm::{apply_gates, lstm_specs, LstmCell, LstmState};
use crate::memory::{write_frame, write_specs, GridShape, MemoryBlock, PendingWrite, WriteHead};
use crate::params::{Bound, ParamSpec, ParameterSet};
use crate::read::{read_specs, LayerStats, ReadHierarchy};
use crate::tensor::{Graph, Tensor, Var};

/// Which context paths feed the decoder and how many streams are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Soft attention over the target's own history.
    Sa,
    /// Soft plus distance-weighted neighbourhood context.
    Sha,
    /// Neighbourhood context plus the spatial memory summary.
    Smn,
    SaIr,
    ShaIr,
    SmnIr,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sa,
        Variant::Sha,
        Variant::Smn,
        Variant::SaIr,
        Variant::ShaIr,
        Variant::SmnIr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sa => "sa",
            Variant::Sha => "sha",
            Variant::Smn => "smn",
            Variant::SaIr => "sa_ir",
            Variant::ShaIr => "sha_ir",
            Variant::SmnIr => "smn_ir",
        }
    }

    pub fn hardwired(self) -> bool {
        !matches!(self, Variant::Sa | Variant::SaIr)
    }

    pub fn memory(self) -> bool {
        matches!(self, Variant::Smn | Variant::SmnIr)
    }

    /// Uses both streams.
    pub fn fused(self) -> bool {
        matches!(self, Variant::SaIr | Variant::ShaIr | Variant::SmnIr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}, expected one of sa, sha, smn, sa_ir, sha_ir, smn_ir"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden size shared by every recurrent unit and memory cell.
    pub hidden: usize,
    /// Memory grid side (W = H); ignored without memory.
    pub map: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Stream used by single-stream variants.
    pub stream: Stream,
    /// Distance clamp for neighbourhood weights (normalized units).
    pub min_distance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Smn,
            hidden: 30,
            map: 16,
            t_obs: 20,
            t_pred: 20,
            stream: Stream::I,
            min_distance: DEFAULT_MIN_DISTANCE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.t_obs == 0 {
            return Err(Error::Config("hidden and t_obs must be positive".into()));
        }
        if !(self.min_distance > 0.0 && self.min_distance.is_finite()) {
            return Err(Error::Config(format!("min_distance {} must be positive", self.min_distance)));
        }
        if self.variant.memory() {
            self.grid()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridShape> {
        GridShape::new(self.map, self.map)
    }

    pub fn streams(&self) -> Vec<Stream> {
        if self.variant.fused() {
            vec![Stream::I, Stream::R]
        } else {
            vec![self.stream]
        }
    }

    /// Whether samples must carry the R stream.
    pub fn needs_radar(&self) -> bool {
        self.streams().contains(&Stream::R)
    }

    /// Decoder context blocks in summation order.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        for s in self.streams() {
            out.push(Block::Soft(s));
            if self.variant.hardwired() {
                out.push(Block::Hard(s));
            }
        }
        if self.variant.memory() {
            out.push(Block::Memory);
        }
        out
    }
}

/// One slice of the decoder's context input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Soft(Stream),
    Hard(Stream),
    Memory,
}

impl Block {
    pub fn param_name(self) -> String {
        match self {
            Block::Soft(s) => format!("dec.w_ctx.{}_soft", s.tag()),
            Block::Hard(s) => format!("dec.w_ctx.{}_hard", s.tag()),
            Block::Memory => "dec.w_ctx.mem".into(),
        }
    }
}

/// Every trainable tensor of `cfg`, in a fixed order.
/// Initial range of the position head relative to the other weights; one
/// step of a walking pedestrian is about 0.01 in normalized units.
pub const OFFSET_INIT_SCALE: f64 = 0.01;

pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let l = cfg.hidden;
    let mut specs = Vec::new();
    for s in cfg.streams() {
        let t = s.tag();
        specs.extend(lstm_specs(&format!("{t}.enc"), 2, l));
        specs.extend(attention_specs(&format!("{t}.att"), l));
        if cfg.variant.memory() {
            specs.extend(write_specs(&format!("{t}.write"), l));
            specs.extend(read_specs(&format!("{t}.read"), l, cfg.grid()?.stages()));
        }
    }
    if cfg.variant.memory() && cfg.variant.fused() {
        specs.extend(fusion_specs("fuse", l));
    }
    specs.push(ParamSpec::weight("dec.w_pos", 2, 4 * l));
    for b in cfg.blocks() {
        specs.push(ParamSpec::weight(b.param_name(), l, 4 * l));
    }
    specs.push(ParamSpec::weight("dec.w_prev", 2, 4 * l));
    specs.push(ParamSpec::weight("dec.w_h", l, 4 * l));
    specs.push(ParamSpec::bias("dec.b", 4 * l));
    specs.push(ParamSpec::scaled_weight("dec.w_out", l, 2, OFFSET_INIT_SCALE));
    specs.push(ParamSpec::bias("dec.b_out", 2));
    Ok(specs)
}

/// Position decoder: an LSTM over `[previous position, context blocks,
/// previous output]` whose hidden state is mapped to a position offset.
#[derive(Clone, Debug)]
pub struct Decoder<'g> {
    w_pos: Var<'g>,
    w_ctx: Vec<Var<'g>>,
    w_prev: Var<'g>,
    w_h: Var<'g>,
    b: Var<'g>,
    w_out: Var<'g>,
    b_out: Var<'g>,
    hidden: usize,
}

impl<'g> Decoder<'g> {
    pub fn bind(params: &Bound<'g>, blocks: &[Block]) -> Result<Self> {
        let w_h = params.get("dec.w_h")?;
        Ok(Decoder {
            w_pos: params.get("dec.w_pos")?,
            w_ctx: blocks
                .iter()
                .map(|b| params.get(&b.param_name()))
                .collect::<Result<_>>()?,
            w_prev: params.get("dec.w_prev")?,
            hidden: w_h.shape()[0],
            w_h,
            b: params.get("dec.b")?,
            w_out: params.get("dec.w_out")?,
            b_out: params.get("dec.b_out")?,
        })
    }

    /// One step; returns the next position and state.
    pub fn step(
        &self,
        p_prev: Var<'g>,
        context: &[Var<'g>],
        y_prev: Var<'g>,
        state: LstmState<'g>,
    ) -> Result<(Var<'g>, LstmState<'g>)> {
        if context.len() != self.w_ctx.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} context blocks, got {}",
                self.w_ctx.len(),
                context.len()
            )));
        }
        let mut gates = p_prev.matmul(self.w_pos)?;
        for (x, w) in context.iter().zip(&self.w_ctx) {
            gates = gates.add(x.matmul(*w)?)?;
        }
        gates = gates.add(y_prev.matmul(self.w_prev)?)?;
        gates = gates.add(state.h.matmul(self.w_h)?)?.add_row(self.b)?;
        let next = apply_gates(gates, state.c, self.hidden)?;
        let offset = next.h.matmul(self.w_out)?.add_row(self.b_out)?;
        Ok((p_prev.add(offset)?, next))
    }
}

/// Memory activity of one stream at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    /// 0-based step; steps at or after `t_obs` are predictions.
    pub step: usize,
    pub stream: Stream,
    /// Row-major (`y·W + x`) cell norms.
    pub cell_norms: Vec<f64>,
    pub layers: Vec<LayerStats>,
}

struct StreamNet<'g> {
    stream: Stream,
    enc: LstmCell<'g>,
    att: SoftAttention<'g>,
    write: Option<WriteHead<'g>>,
}

/// Parameters of a model bound to a graph.
pub struct Net<'g> {
    graph: &'g Graph,
    cfg: ModelConfig,
    params: Bound<'g>,
    streams: Vec<StreamNet<'g>>,
    fusion: Option<Fusion<'g>>,
    decoder: Decoder<'g>,
}

impl<'g> Net<'g> {
    pub fn bind(graph: &'g Graph, params: Bound<'g>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = cfg
            .streams()
            .into_iter()
            .map(|s| {
                let t = s.tag();
                Ok(StreamNet {
                    stream: s,
                    enc: LstmCell::bind(&params, &format!("{t}.enc"))?,
                    att: SoftAttention::bind(&params, &format!("{t}.att"))?,
                    write: if cfg.variant.memory() {
                        Some(WriteHead::bind(&params, &format!("{t}.write"))?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = if cfg.variant.memory() && cfg.variant.fused() {
            Some(Fusion::bind(&params, "fuse")?)
        } else {
            None
        };
        let decoder = Decoder::bind(&params, &cfg.blocks())?;
        Ok(Net {
            graph,
            cfg: cfg.clone(),
            params,
            streams,
            fusion,
            decoder,
        })
    }

    pub fn params(&self) -> &Bound<'g> {
        &self.params
    }

    /// Predicted positions for steps `t_obs .. t_obs + t_pred`, normalized.
    pub fn forward(&self, sample: &Sample, mut trace: Option<&mut Vec<StepTrace>>) -> Result<Vec<Var<'g>>> {
        let cfg = &self.cfg;
        check_sample(cfg, sample)?;
        let g = self.graph;
        let l = cfg.hidden;
        let total = cfg.t_obs + cfg.t_pred;
        let point = |p: [f64; 2]| g.constant(Tensor::row(&p));

        let mut runs = Vec::with_capacity(self.streams.len());
        for net in &self.streams {
            let window = sample
                .window(net.stream)
                .ok_or_else(|| Error::Config(format!("sample {} has no {} stream", sample.id, net.stream)))?;
            runs.push(StreamRun::new(g, self, net, window)?);
        }

        let mut dec_state = LstmState::zeros(g, 1, l);
        let mut y_prev = point(sample.truth[cfg.t_obs - 1]);
        let mut out = Vec::with_capacity(cfg.t_pred);

        for t in 0..cfg.t_obs {
            let fallback = sample.truth[t];
            let mut contexts = Vec::with_capacity(runs.len());
            let mut summaries = Vec::with_capacity(runs.len());
            for run in runs.iter_mut() {
                run.advance(t)?;
                let target_ctx = run.observe(t, fallback)?;
                contexts.push(target_ctx);
                if let Some(h) = run.read(t, trace.as_deref_mut())? {
                    summaries.push(h);
                }
            }
            if t + 1 < total {
                let blocks = self.blocks(&contexts, &summaries)?;
                let (y, next) = self.decoder.step(point(sample.truth[t]), &blocks, y_prev, dec_state)?;
                dec_state = next;
                y_prev = y;
                if t + 1 == cfg.t_obs {
                    out.push(y);
                }
            }
        }
        for run in runs.iter_mut() {
            run.freeze()?;
        }
        for t in cfg.t_obs..total - 1 {
            let mut contexts = Vec::with_capacity(runs.len());
            let mut summaries = Vec::with_capacity(runs.len());
            for run in runs.iter_mut() {
                contexts.push(run.predicted_context(y_prev, dec_state.h)?);
                if let Some(h) = run.read(t, trace.as_deref_mut())? {
                    summaries.push(h);
                }
            }
            let blocks = self.blocks(&contexts, &summaries)?;
            let (y, next) = self.decoder.step(y_prev, &blocks, y_prev, dec_state)?;
            dec_state = next;
            y_prev = y;
            out.push(y);
        }
        Ok(out)
    }

    /// Decoder inputs in `cfg.blocks()` order.
    fn blocks(&self, contexts: &[Var<'g>], summaries: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let l = self.cfg.hidden;
        let mut out = Vec::new();
        for ctx in contexts {
            if self.cfg.variant.hardwired() {
                out.push(ctx.narrow(1, 0, l)?.tanh());
                out.push(ctx.narrow(1, l, l)?.tanh());
            } else {
                out.push(ctx.tanh());
            }
        }
        if self.cfg.variant.memory() {
            let h = match (&self.fusion, summaries) {
                (Some(f), [hi, hr]) => f.fuse(*hi, *hr)?.out,
                (None, [h]) => *h,
                _ => return Err(Error::Contract("memory summaries do not match the streams".into())),
            };
            out.push(h.tanh());
        }
        Ok(out)
    }
}

fn check_sample(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    if s.t_obs != cfg.t_obs || s.t_pred != cfg.t_pred || s.truth.len() != cfg.t_obs + cfg.t_pred {
        return Err(Error::Contract(format!(
            "sample {} has {}+{} steps ({} points), model expects {}+{}",
            s.id,
            s.t_obs,
            s.t_pred,
            s.truth.len(),
            cfg.t_obs,
            cfg.t_pred
        )));
    }
    if cfg.needs_radar() && s.radar.is_none() {
        return Err(Error::Config(format!(
            "variant {} needs the R stream but sample {} has none",
            cfg.variant, s.id
        )));
    }
    for w in std::iter::once(&s.video).chain(s.radar.as_ref()) {
        if w.tracks.iter().any(|t| t.positions.len() != cfg.t_obs) {
            return Err(Error::Contract(format!("sample {} has a track of the wrong length", s.id)));
        }
    }
    Ok(())
}

struct TrackRun<'g> {
    state: LstmState<'g>,
    /// Encoder hidden at the end of the previous step.
    query: Var<'g>,
    rows: Vec<Var<'g>>,
    last: Option<[f64; 2]>,
}

/// Per-sample state of one stream.
struct StreamRun<'g, 'a> {
    graph: &'g Graph,
    net: &'a StreamNet<'g>,
    cfg: &'a ModelConfig,
    window: &'a StreamWindow,
    /// Indices of `window.tracks` that are encoded.
    encoded: Vec<usize>,
    tracks: Vec<TrackRun<'g>>,
    /// Every hidden row so far with its owner and position.
    stack: Option<Var<'g>>,
    owners: Vec<usize>,
    positions: Vec<[f64; 2]>,
    memory: Option<MemoryBlock<'g>>,
    write_state: LstmState<'g>,
    reader: Option<ReadHierarchy<'g>>,
    /// Target history and neighbourhood, fixed once observation ends.
    frozen: Option<(Option<Var<'g>>, Option<Neighbours<'g>>)>,
}

impl<'g, 'a> StreamRun<'g, 'a> {
    fn new(graph: &'g Graph, model: &'a Net<'g>, net: &'a StreamNet<'g>, window: &'a StreamWindow) -> Result<Self> {
        let cfg = &model.cfg;
        let l = cfg.hidden;
        // without neighbourhood or memory paths only the target matters
        let encoded = if cfg.variant.hardwired() || cfg.variant.memory() {
            (0..window.tracks.len()).collect()
        } else {
            window.target.into_iter().collect()
        };
        let tracks = window
            .tracks
            .iter()
            .map(|_| {
                let state = LstmState::zeros(graph, 1, l);
                TrackRun {
                    state,
                    query: state.h,
                    rows: Vec::new(),
                    last: None,
                }
            })
            .collect();
        let (memory, reader) = if cfg.variant.memory() {
            let shape = cfg.grid()?;
            let prefix = format!("{}.read", net.stream.tag());
            (
                Some(MemoryBlock::zeros(graph, shape, l)),
                Some(ReadHierarchy::bind(&model.params, graph, &prefix, shape)?),
            )
        } else {
            (None, None)
        };
        Ok(StreamRun {
            graph,
            net,
            cfg,
            window,
            encoded,
            tracks,
            stack: None,
            owners: Vec::new(),
            positions: Vec::new(),
            memory,
            write_state: LstmState::zeros(graph, 1, l),
            reader,
            frozen: None,
        })
    }

    /// Step the encoder of every encoded track present at `t`.
    fn advance(&mut self, t: usize) -> Result<()> {
        let mut new_rows = Vec::new();
        for &k in &self.encoded {
            let Some(p) = self.window.tracks[k].positions[t] else { continue };
            let tr = &mut self.tracks[k];
            let prev = tr.last.unwrap_or(p);
            let delta = self.graph.constant(Tensor::row(&[p[0] - prev[0], p[1] - prev[1]]));
            tr.query = tr.state.h;
            tr.state = self.net.enc.step(delta, tr.state)?;
            tr.rows.push(tr.state.h);
            tr.last = Some(p);
            new_rows.push(tr.state.h);
            self.owners.push(k);
            self.positions.push(p);
        }
        if self.cfg.variant.hardwired() && !new_rows.is_empty() {
            if let Some(s) = self.stack {
                new_rows.insert(0, s);
            }
            self.stack = Some(self.graph.concat(&new_rows, 0)?);
        }
        Ok(())
    }

    fn history(&self, k: usize) -> Result<Option<Var<'g>>> {
        let rows = &self.tracks[k].rows;
        match rows.len() {
            0 => Ok(None),
            1 => Ok(Some(rows[0])),
            _ => Ok(Some(self.graph.concat(rows, 0)?)),
        }
    }

    fn neighbours(&self, k: Option<usize>) -> Result<Option<Neighbours<'g>>> {
        let Some(stack) = self.stack else { return Ok(None) };
        let keep: Vec<usize> = (0..self.owners.len()).filter(|&r| Some(self.owners[r]) != k).collect();
        if keep.is_empty() {
            return Ok(None);
        }
        let hiddens = if keep.len() == self.owners.len() {
            stack
        } else {
            stack.gather_rows(Rc::from(keep.as_slice()))?
        };
        Ok(Some(Neighbours {
            hiddens,
            positions: keep.iter().map(|&r| self.positions[r]).collect(),
        }))
    }

    /// Combined context from a history, a neighbourhood and a query.
    fn context(
        &self,
        history: Option<Var<'g>>,
        query: Var<'g>,
        neighbours: Option<&Neighbours<'g>>,
        position: Var<'g>,
    ) -> Result<Var<'g>> {
        let l = self.cfg.hidden;
        let soft = match history {
            Some(h) => self.net.att.attend(h, query)?.0,
            None => self.graph.zeros(&[1, l]),
        };
        if !self.cfg.variant.hardwired() {
            return Ok(soft.tanh());
        }
        let hard = hardwired_attention(self.graph, l, neighbours, position, self.cfg.min_distance)?;
        Ok(self.graph.concat(&[soft, hard], 1)?.tanh())
    }

    fn track_context(&self, k: usize, position: [f64; 2]) -> Result<Var<'g>> {
        let nb = if self.cfg.variant.hardwired() {
            self.neighbours(Some(k))?
        } else {
            None
        };
        self.context(
            self.history(k)?,
            self.tracks[k].query,
            nb.as_ref(),
            self.graph.constant(Tensor::row(&position)),
        )
    }

    /// Write every present track, then return the target's context. The
    /// target falls back to `fallback` for its position when this stream
    /// does not see it at `t`.
    fn observe(&mut self, t: usize, fallback: [f64; 2]) -> Result<Var<'g>> {
        let target = self.window.target;
        let mut target_ctx = None;
        if let (Some(mut mem), Some(head)) = (self.memory.take(), self.net.write) {
            let mut writes = Vec::new();
            for (k, track) in self.window.tracks.iter().enumerate() {
                let Some(p) = track.positions[t] else { continue };
                let ctx = self.track_context(k, p)?;
                if Some(k) == target {
                    target_ctx = Some(ctx);
                }
                writes.push(PendingWrite { position: p, context: ctx });
            }
            let written = write_frame(&mut mem, &head, &mut self.write_state, &writes);
            self.memory = Some(mem);
            written?;
        }
        if let Some(ctx) = target_ctx {
            return Ok(ctx);
        }
        match target {
            Some(k) => {
                let p = self.window.tracks[k].positions[t].unwrap_or(fallback);
                self.track_context(k, p)
            }
            None => {
                let nb = if self.cfg.variant.hardwired() {
                    self.neighbours(None)?
                } else {
                    None
                };
                let zero = self.graph.zeros(&[1, self.cfg.hidden]);
                self.context(None, zero, nb.as_ref(), self.graph.constant(Tensor::row(&fallback)))
            }
        }
    }

    fn read(&mut self, step: usize, trace: Option<&mut Vec<StepTrace>>) -> Result<Option<Var<'g>>> {
        let (Some(mem), Some(reader)) = (self.memory.as_ref(), self.reader.as_mut()) else {
            return Ok(None);
        };
        match trace {
            Some(tr) => {
                let mut layers = Vec::new();
                let h = reader.read_traced(mem.cells, Some(&mut layers))?;
                tr.push(StepTrace {
                    step,
                    stream: self.net.stream,
                    cell_norms: mem.cell_norms(),
                    layers,
                });
                Ok(Some(h))
            }
            None => Ok(Some(reader.read(mem.cells)?)),
        }
    }

    fn freeze(&mut self) -> Result<()> {
        let target = self.window.target;
        let history = match target {
            Some(k) => self.history(k)?,
            None => None,
        };
        let nb = if self.cfg.variant.hardwired() {
            self.neighbours(target)?
        } else {
            None
        };
        self.frozen = Some((history, nb));
        Ok(())
    }

    /// Target context during prediction: the decoder state is the query
    /// and distances are taken from the predicted position.
    fn predicted_context(&self, position: Var<'g>, query: Var<'g>) -> Result<Var<'g>> {
        let (history, nb) = self
            .frozen
            .as_ref()
            .ok_or_else(|| Error::Contract("prediction before observation finished".into()))?;
        self.context(*history, query, nb.as_ref(), position)
    }
}

/// Mean over steps of the squared Euclidean error, normalized units.
pub fn loss<'g>(pred: &[Var<'g>], truth: &[[f64; 2]]) -> Result<Var<'g>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let g = pred[0].graph();
    let stacked = g.concat(pred, 0)?;
    let target = g.constant(Tensor::new(vec![truth.len(), 2], truth.iter().flatten().copied().collect())?);
    Ok(stacked.sub(target)?.square()?.sum().scale(1.0 / truth.len() as f64))
}

fn rows(pred: &[Var<'_>]) -> Vec<[f64; 2]> {
    pred.iter()
        .map(|v| {
            let t = v.value();
            [t.data()[0], t.data()[1]]
        })
        .collect()
}

/// Gradient of every parameter, by name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(&config)?;
        Ok(Model {
            params: ParameterSet::init(&specs, seed),
            config,
        })
    }

    /// Wrap existing parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        params.validate(&param_specs(&config)?)?;
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Normalized predictions for the prediction steps.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<[f64; 2]>> {
        let g = Graph::new();
        let net = Net::bind(&g, self.params.bind_frozen(&g), &self.config)?;
        Ok(rows(&net.forward(sample, None)?))
    }

    /// Predictions plus per-step memory activity.
    pub fn trace(&self, sample: &Sample) -> Result<(Vec<[f64; 2]>, Vec<StepTrace>)> {
        let g = Graph::new();
        let net = Net::bind(&g, self.params.bind_frozen(&g), &self.config)?;
        let mut trace = Vec::new();
        let pred = net.forward(sample, Some(&mut trace))?;
        Ok((rows(&pred), trace))
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let g = Graph::new();
        let net = Net::bind(&g, self.params.bind_frozen(&g), &self.config)?;
        let pred = net.forward(sample, None)?;
        Ok(loss(&pred, sample.future())?.value().item())
    }

    /// Loss, gradients of every parameter, and the predictions.
    pub fn loss_and_grads(&self, sample: &Sample) -> Result<(f64, ParamGrads, Vec<[f64; 2]>)> {
        let g = Graph::new();
        let net = Net::bind(&g, self.params.bind(&g), &self.config)?;
        let pred = net.forward(sample, None)?;
        let l = loss(&pred, sample.future())?;
        let value = l.value().item();
        let grads = g.backward(l)?;
        let out: BTreeMap<String, Tensor> = net
            .params()
            .iter()
            .map(|(name, v)| (name.clone(), grads.get(*v)))
            .collect();
        if !value.is_finite() || !out.values().all(Tensor::is_finite) {
            return Err(Error::Numeric(format!(
                "loss {value} on sample {}; gradient {}",
                sample.id,
                crate::train::describe_norms(&out)
            )));
        }
        Ok((value, out, rows(&pred)))
    }
}
