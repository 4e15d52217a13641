//! Trajectory and scene data model.

mod jsonl;
mod sample;
mod split;
mod synth;

pub use jsonl::{load_jsonl, load_jsonl_with, read_jsonl_str, write_jsonl, IngestOptions, Ingested};
pub use sample::{build_samples, SampleId, SampleOptions, Sample, StreamWindow, Track};
pub use split::{split, Split};
pub use synth::{generate_synthetic, GenConfig};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input modality: video-like (`I`) or radar-like (`R`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    I,
    R,
}

impl Stream {
    pub fn tag(self) -> &'static str {
        match self {
            Stream::I => "i",
            Stream::R => "r",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::I => "I",
            Stream::R => "R",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub ped_id: i64,
    /// Strictly increasing frames, at least two points.
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(ped_id: i64, points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Contract(format!(
                "trajectory {ped_id} has {} point(s), need at least 2",
                points.len()
            )));
        }
        if points.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return Err(Error::Contract(format!(
                "trajectory {ped_id} frames are not strictly increasing"
            )));
        }
        Ok(Trajectory { ped_id, points })
    }

    pub fn first_frame(&self) -> i64 {
        self.points[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.points[self.points.len() - 1].frame
    }

    pub fn point_at(&self, frame: i64) -> Option<&Point> {
        self.points
            .binary_search_by_key(&frame, |p| p.frame)
            .ok()
            .map(|i| &self.points[i])
    }
}

/// Axis-aligned spatial bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub const UNIT: Extent = Extent {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
    };

    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let e = Extent {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        e.check()?;
        Ok(e)
    }

    pub fn check(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::Config(format!("degenerate extent {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }

    /// Map into the unit square used by the model.
    pub fn normalize(&self, x: f64, y: f64) -> [f64; 2] {
        [(x - self.x_min) / self.width(), (y - self.y_min) / self.height()]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.x_min + p[0] * self.width(),
            self.y_min + p[1] * self.height(),
        ]
    }

    /// Smallest extent covering every point of `scenes`; `None` when there
    /// are no points. Degenerate axes are widened by one unit either side.
    pub fn bounding(scenes: &[Scene]) -> Option<Extent> {
        let mut it = scenes
            .iter()
            .flat_map(|s| s.trajectories.iter())
            .flat_map(|t| t.points.iter());
        let first = it.next()?;
        let mut e = Extent {
            x_min: first.x,
            x_max: first.x,
            y_min: first.y,
            y_max: first.y,
        };
        for p in it {
            e.x_min = e.x_min.min(p.x);
            e.x_max = e.x_max.max(p.x);
            e.y_min = e.y_min.min(p.y);
            e.y_max = e.y_max.max(p.y);
        }
        if e.x_max <= e.x_min {
            e.x_min -= 1.0;
            e.x_max += 1.0;
        }
        if e.y_max <= e.y_min {
            e.y_min -= 1.0;
            e.y_max += 1.0;
        }
        Some(e)
    }
}

/// Co-occurring trajectories of one stream sharing a frame clock.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: i64,
    pub stream: Stream,
    /// Sorted by `ped_id`.
    pub trajectories: Vec<Trajectory>,
    pub extent: Extent,
    pub fps: f64,
}

impl Scene {
    pub fn trajectory(&self, ped_id: i64) -> Option<&Trajectory> {
        self.trajectories
            .binary_search_by_key(&ped_id, |t| t.ped_id)
            .ok()
            .map(|i| &self.trajectories[i])
    }
}
