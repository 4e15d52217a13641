use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Extent, Point, Scene, Stream, Trajectory};
use crate::error::{Error, Result};

/// One observation per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene: i64,
    stream: Stream,
    frame: i64,
    ped: i64,
    x: f64,
    y: f64,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Clamp target; the bounding box of the file when `None`.
    pub extent: Option<Extent>,
    pub i_fps: f64,
    pub r_fps: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            extent: None,
            i_fps: 10.0,
            r_fps: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub scenes: Vec<Scene>,
    /// Points moved onto the extent boundary.
    pub clamped: usize,
    /// Single-point trajectories that were discarded.
    pub dropped_short: usize,
}

/// Load with default options.
pub fn load_jsonl(path: &Path) -> Result<Vec<Scene>> {
    Ok(load_jsonl_with(path, &IngestOptions::default())?.scenes)
}

pub fn load_jsonl_with(path: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_jsonl_str(&text, opts)
}

/// Parse JSON Lines text into scenes grouped by `(scene, stream)`.
pub fn read_jsonl_str(text: &str, opts: &IngestOptions) -> Result<Ingested> {
    // (scene, stream) -> ped -> frame -> position
    type Tracks = BTreeMap<i64, BTreeMap<i64, (f64, f64)>>;
    let mut grouped: BTreeMap<(i64, Stream), Tracks> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !rec.x.is_finite() || !rec.y.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "non-finite coordinate".into(),
            });
        }
        let frames = grouped
            .entry((rec.scene, rec.stream))
            .or_default()
            .entry(rec.ped)
            .or_default();
        if frames.insert(rec.frame, (rec.x, rec.y)).is_some() {
            return Err(Error::Ingestion(format!(
                "duplicate observation scene={} stream={} frame={} ped={} (line {})",
                rec.scene,
                rec.stream,
                rec.frame,
                rec.ped,
                i + 1
            )));
        }
    }

    let mut scenes = Vec::with_capacity(grouped.len());
    let mut dropped_short = 0;
    for ((scene_id, stream), peds) in grouped {
        let mut trajectories = Vec::new();
        for (ped_id, frames) in peds {
            let points: Vec<Point> = frames
                .into_iter()
                .map(|(frame, (x, y))| Point { frame, x, y })
                .collect();
            if points.len() < 2 {
                dropped_short += 1;
                continue;
            }
            trajectories.push(Trajectory::new(ped_id, points)?);
        }
        scenes.push(Scene {
            scene_id,
            stream,
            trajectories,
            extent: Extent::UNIT,
            fps: match stream {
                Stream::I => opts.i_fps,
                Stream::R => opts.r_fps,
            },
        });
    }

    let extent = match opts.extent {
        Some(e) => {
            e.check()?;
            e
        }
        None => Extent::bounding(&scenes).unwrap_or(Extent::UNIT),
    };
    let mut clamped = 0;
    for scene in &mut scenes {
        scene.extent = extent;
        for p in scene.trajectories.iter_mut().flat_map(|t| t.points.iter_mut()) {
            if !extent.contains(p.x, p.y) {
                (p.x, p.y) = extent.clamp(p.x, p.y);
                clamped += 1;
            }
        }
    }
    if clamped > 0 {
        warn!("clamped {clamped} point(s) onto the scene extent");
    }
    if dropped_short > 0 {
        warn!("dropped {dropped_short} single-point trajectories");
    }
    Ok(Ingested {
        scenes,
        clamped,
        dropped_short,
    })
}

/// Write every observation, ordered by scene, stream, frame, ped.
pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut records: Vec<Record> = scenes
        .iter()
        .flat_map(|s| {
            s.trajectories.iter().flat_map(move |t| {
                t.points.iter().map(move |p| Record {
                    scene: s.scene_id,
                    stream: s.stream,
                    frame: p.frame,
                    ped: t.ped_id,
                    x: p.x,
                    y: p.y,
                })
            })
        })
        .collect();
    records.sort_by_key(|r| (r.scene, r.stream, r.frame, r.ped));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(scene: i64, stream: &str, frame: i64, ped: i64, x: f64, y: f64) -> String {
        format!(r#"{{"scene":{scene},"stream":"{stream}","frame":{frame},"ped":{ped},"x":{x},"y":{y}}}"#)
    }

    #[test]
    fn empty_input_is_empty() {
        let out = read_jsonl_str("", &IngestOptions::default()).unwrap();
        assert!(out.scenes.is_empty());
    }

    #[test]
    fn two_lines_make_one_trajectory() {
        let text = [line(0, "I", 1, 4, 0.5, 1.0), line(0, "I", 2, 4, 1.5, 2.0)].join("\n");
        let out = read_jsonl_str(&text, &IngestOptions::default()).unwrap();
        assert_eq!(out.scenes.len(), 1);
        assert_eq!(out.scenes[0].trajectories.len(), 1);
        assert_eq!(out.scenes[0].trajectories[0].points.len(), 2);
        assert_eq!(out.scenes[0].stream, Stream::I);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = [line(0, "I", 1, 4, 0.5, 1.0), "{not json".to_string()].join("\n");
        match read_jsonl_str(&text, &IngestOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_stream = r#"{"scene":0,"stream":"X","frame":1,"ped":1,"x":0,"y":0}"#;
        assert!(matches!(
            read_jsonl_str(bad_stream, &IngestOptions::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicates_are_rejected() {
        let text = [line(0, "I", 1, 4, 0.5, 1.0), line(0, "I", 1, 4, 0.7, 1.0)].join("\n");
        assert!(matches!(
            read_jsonl_str(&text, &IngestOptions::default()),
            Err(Error::Ingestion(_))
        ));
        // same frame/ped in the other stream is fine
        let text = [line(0, "I", 1, 4, 0.5, 1.0), line(0, "R", 1, 4, 0.7, 1.0)].join("\n");
        assert!(read_jsonl_str(&text, &IngestOptions::default()).is_ok());
    }

    #[test]
    fn out_of_extent_points_are_clamped() {
        let text = [line(0, "I", 1, 1, -3.0, 0.5), line(0, "I", 2, 1, 0.5, 9.0)].join("\n");
        let opts = IngestOptions {
            extent: Some(Extent::UNIT),
            ..IngestOptions::default()
        };
        let out = read_jsonl_str(&text, &opts).unwrap();
        assert_eq!(out.clamped, 2);
        let pts = &out.scenes[0].trajectories[0].points;
        assert_eq!((pts[0].x, pts[1].y), (0.0, 1.0));
    }

    #[test]
    fn shuffled_lines_load_like_sorted() {
        let mut lines = Vec::new();
        for f in 0..6 {
            for ped in 0..3 {
                lines.push(line(f % 2, if ped == 2 { "R" } else { "I" }, f, ped, f as f64 * 0.1, ped as f64 + 0.25));
            }
        }
        let sorted = read_jsonl_str(&lines.join("\n"), &IngestOptions::default()).unwrap();
        // deterministic shuffle via a fixed permutation
        let mut shuffled = lines.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        shuffled.swap(3, 11);
        let other = read_jsonl_str(&shuffled.join("\n"), &IngestOptions::default()).unwrap();
        assert_eq!(sorted.scenes, other.scenes);
    }
}
