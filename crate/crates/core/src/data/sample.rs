//! Fixed-length training/evaluation windows cut from I-stream trajectories.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Extent, Scene, Stream, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Window stride in points; `t_obs` when absent.
    pub stride: Option<usize>,
    /// Largest frame step allowed inside a window. Larger jumps split a
    /// trajectory into fragments.
    pub max_frame_gap: i64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            t_obs: 20,
            t_pred: 20,
            stride: None,
            max_frame_gap: 1,
        }
    }
}

impl SampleOptions {
    pub fn window(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs == 0 || self.t_pred == 0 {
            return Err(Error::Config("t_obs and t_pred must be positive".into()));
        }
        if self.stride == Some(0) || self.max_frame_gap < 1 {
            return Err(Error::Config("stride and max_frame_gap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId {
    pub scene: i64,
    pub ped: i64,
    pub start_frame: i64,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.scene, self.ped, self.start_frame)
    }
}

/// One pedestrian's normalized positions over the observed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub ped_id: i64,
    /// `None` where the pedestrian is absent at that step.
    pub positions: Vec<Option<[f64; 2]>>,
}

impl Track {
    pub fn present(&self, step: usize) -> bool {
        self.positions[step].is_some()
    }
}

/// Everything one stream shows during the observed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWindow {
    pub stream: Stream,
    /// Sorted by `ped_id`; only pedestrians seen at least once.
    pub tracks: Vec<Track>,
    /// Index of the target in `tracks`, if this stream saw it.
    pub target: Option<usize>,
}

impl StreamWindow {
    pub fn empty(stream: Stream) -> Self {
        StreamWindow {
            stream,
            tracks: Vec::new(),
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub t_obs: usize,
    pub t_pred: usize,
    /// I frame index of every step, observed then predicted.
    pub frames: Vec<i64>,
    /// Normalized target positions for every step.
    pub truth: Vec<[f64; 2]>,
    /// Normalization extent, used to report metrics in original units.
    pub extent: Extent,
    pub video: StreamWindow,
    /// Present when samples were built with the R stream.
    pub radar: Option<StreamWindow>,
}

impl Sample {
    pub fn window(&self, stream: Stream) -> Option<&StreamWindow> {
        match stream {
            Stream::I => Some(&self.video),
            Stream::R => self.radar.as_ref(),
        }
    }

    pub fn observed(&self) -> &[[f64; 2]] {
        &self.truth[..self.t_obs]
    }

    pub fn future(&self) -> &[[f64; 2]] {
        &self.truth[self.t_obs..]
    }

    /// Back to the original units.
    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        self.extent.denormalize(p)
    }
}

/// Cut windows from every I trajectory. With `with_r`, each sample also
/// carries the R view of its scene resampled onto the target's I frames.
pub fn build_samples(scenes: &[Scene], opts: &SampleOptions, with_r: bool) -> Result<Vec<Sample>> {
    opts.validate()?;
    let stride = opts.stride.unwrap_or(opts.t_obs);
    let radar: BTreeMap<i64, &Scene> = scenes
        .iter()
        .filter(|s| s.stream == Stream::R)
        .map(|s| (s.scene_id, s))
        .collect();

    let mut out = Vec::new();
    for scene in scenes.iter().filter(|s| s.stream == Stream::I) {
        let r_scene = radar.get(&scene.scene_id).copied();
        let ratio = match r_scene {
            Some(r) if with_r => rate_ratio(scene, r)?,
            _ => 1.0,
        };
        for target in &scene.trajectories {
            for run in fragments(target, opts.max_frame_gap) {
                let mut start = 0;
                while start + opts.window() <= run.len() {
                    let pts = &run[start..start + opts.window()];
                    let frames: Vec<i64> = pts.iter().map(|p| p.frame).collect();
                    let obs = &frames[..opts.t_obs];
                    let video = window_exact(scene, target.ped_id, obs);
                    let radar = with_r.then(|| match r_scene {
                        Some(r) => window_resampled(r, &scene.extent, target.ped_id, obs, ratio),
                        None => StreamWindow::empty(Stream::R),
                    });
                    out.push(Sample {
                        id: SampleId {
                            scene: scene.scene_id,
                            ped: target.ped_id,
                            start_frame: frames[0],
                        },
                        t_obs: opts.t_obs,
                        t_pred: opts.t_pred,
                        truth: pts.iter().map(|p| scene.extent.normalize(p.x, p.y)).collect(),
                        frames,
                        extent: scene.extent,
                        video,
                        radar,
                    });
                    start += stride;
                }
            }
        }
    }
    Ok(out)
}

fn rate_ratio(i: &Scene, r: &Scene) -> Result<f64> {
    let ratio = i.fps / r.fps;
    if !ratio.is_finite() || ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "scene {}: I rate {} is not an integer multiple of R rate {}",
            i.scene_id, i.fps, r.fps
        )));
    }
    Ok(ratio.round())
}

/// Maximal runs of points whose frame steps stay within `max_gap`.
fn fragments(t: &Trajectory, max_gap: i64) -> Vec<&[super::Point]> {
    let mut runs = Vec::new();
    let mut begin = 0;
    for i in 1..t.points.len() {
        if t.points[i].frame - t.points[i - 1].frame > max_gap {
            runs.push(&t.points[begin..i]);
            begin = i;
        }
    }
    runs.push(&t.points[begin..]);
    runs
}

fn finish(stream: Stream, mut tracks: Vec<Track>, target: i64) -> StreamWindow {
    tracks.retain(|t| t.positions.iter().any(Option::is_some));
    let target = tracks.iter().position(|t| t.ped_id == target);
    StreamWindow {
        stream,
        tracks,
        target,
    }
}

fn window_exact(scene: &Scene, target: i64, frames: &[i64]) -> StreamWindow {
    let tracks = scene
        .trajectories
        .iter()
        .filter(|t| t.last_frame() >= frames[0] && t.first_frame() <= frames[frames.len() - 1])
        .map(|t| Track {
            ped_id: t.ped_id,
            positions: frames
                .iter()
                .map(|&f| t.point_at(f).map(|p| scene.extent.normalize(p.x, p.y)))
                .collect(),
        })
        .collect();
    finish(scene.stream, tracks, target)
}

/// Linear interpolation of each R trajectory at I frame `f`, i.e. R time
/// `f / ratio`. Outside a trajectory's span the pedestrian is absent.
fn window_resampled(r: &Scene, extent: &Extent, target: i64, frames: &[i64], ratio: f64) -> StreamWindow {
    let tracks = r
        .trajectories
        .iter()
        .map(|t| Track {
            ped_id: t.ped_id,
            positions: frames
                .iter()
                .map(|&f| interpolate(t, f as f64 / ratio).map(|(x, y)| extent.normalize(x, y)))
                .collect(),
        })
        .collect();
    finish(Stream::R, tracks, target)
}

fn interpolate(t: &Trajectory, time: f64) -> Option<(f64, f64)> {
    let pts = &t.points;
    if time < pts[0].frame as f64 || time > pts[pts.len() - 1].frame as f64 {
        return None;
    }
    let hi = pts.partition_point(|p| (p.frame as f64) < time);
    if pts[hi].frame as f64 == time {
        return Some((pts[hi].x, pts[hi].y));
    }
    let (a, b) = (&pts[hi - 1], &pts[hi]);
    let w = (time - a.frame as f64) / (b.frame - a.frame) as f64;
    Some((a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)))
}
