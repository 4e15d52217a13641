//! Paired I/R scenes from a social-force point-mass simulation.
//!
//! Pedestrians spawn on a fixed schedule at the first waypoint of a route,
//! are attracted toward the next waypoint of that route, and are repelled
//! by each other and by circular obstacles. Stream I records every frame at
//! `i_rate`; stream R keeps every `i_rate / r_rate`-th frame, renumbered on
//! its own clock, with Gaussian position noise and whole-trajectory dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Extent, Point, Scene, Stream, Trajectory};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub scenes: usize,
    pub peds_per_scene: usize,
    /// Recorded I frames per scene.
    pub frames_per_scene: usize,
    /// Simulated frames before recording starts, so early spawns are
    /// already under way when the scene opens.
    pub warmup_frames: usize,
    /// I frames between consecutive spawns.
    pub spawn_interval: f64,
    /// Uniform spawn offset (metres) around the route's first waypoint.
    pub spawn_jitter: f64,
    pub i_rate: u32,
    pub r_rate: u32,
    pub r_noise: f64,
    pub r_dropout: f64,
    /// `[x_min, x_max, y_min, y_max]`.
    pub extent: [f64; 4],
    /// `[x, y, radius]` discs.
    pub obstacles: Vec<[f64; 3]>,
    pub waypoints: Vec<[f64; 2]>,
    /// Waypoint index sequences; the first entry is the spawn point.
    pub routes: Vec<Vec<usize>>,
    /// One route per scene (shared by all its pedestrians) instead of one
    /// per pedestrian.
    pub shared_route: bool,
    pub speed_min: f64,
    pub speed_max: f64,
    pub max_speed: f64,
    pub waypoint_radius: f64,
    pub relaxation_time: f64,
    pub body_radius: f64,
    pub ped_strength: f64,
    pub ped_range: f64,
    pub obstacle_strength: f64,
    pub obstacle_range: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 500,
            peds_per_scene: 4,
            frames_per_scene: 60,
            warmup_frames: 24,
            spawn_interval: 16.0,
            spawn_jitter: 0.5,
            i_rate: 10,
            r_rate: 2,
            r_noise: 0.15,
            r_dropout: 0.1,
            extent: [0.0, 16.0, 0.0, 16.0],
            obstacles: vec![
                [10.5, 8.0, 2.2],
                [4.0, 12.5, 1.5],
                [4.0, 3.5, 1.5],
                [13.5, 8.0, 1.0],
            ],
            waypoints: vec![
                [1.0, 8.0],
                [5.0, 8.0],
                [8.5, 12.5],
                [15.0, 13.5],
                [8.5, 3.5],
                [15.0, 2.5],
            ],
            routes: vec![vec![0, 1, 2, 3], vec![0, 1, 4, 5]],
            shared_route: true,
            speed_min: 1.1,
            speed_max: 1.5,
            max_speed: 2.0,
            waypoint_radius: 0.6,
            relaxation_time: 0.5,
            body_radius: 0.3,
            ped_strength: 2.0,
            ped_range: 0.3,
            obstacle_strength: 5.0,
            obstacle_range: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.i_rate == 0 || self.r_rate == 0 || !self.i_rate.is_multiple_of(self.r_rate) {
            return bad(format!(
                "i_rate {} must be a positive multiple of r_rate {}",
                self.i_rate, self.r_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.r_dropout) {
            return bad(format!("r_dropout {} outside [0, 1]", self.r_dropout));
        }
        if self.r_noise < 0.0 || !self.r_noise.is_finite() {
            return bad(format!("r_noise {} must be finite and non-negative", self.r_noise));
        }
        if self.routes.is_empty() {
            return bad("at least one route is required".into());
        }
        for r in &self.routes {
            if r.len() < 2 || r.iter().any(|&w| w >= self.waypoints.len()) {
                return bad(format!("route {r:?} needs >= 2 valid waypoint indices"));
            }
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min && self.max_speed >= self.speed_max) {
            return bad("speeds must satisfy 0 < speed_min <= speed_max <= max_speed".into());
        }
        if self.relaxation_time <= 0.0 || self.spawn_interval < 0.0 {
            return bad("relaxation_time must be positive and spawn_interval non-negative".into());
        }
        self.scene_extent().map(|_| ())
    }

    pub fn scene_extent(&self) -> Result<Extent> {
        let [a, b, c, d] = self.extent;
        Extent::new(a, b, c, d)
    }

    /// I frames per R frame.
    pub fn rate_ratio(&self) -> i64 {
        (self.i_rate / self.r_rate) as i64
    }
}

struct Walker {
    ped_id: i64,
    spawn: i64,
    pos: [f64; 2],
    vel: [f64; 2],
    desired_speed: f64,
    route: usize,
    next: usize,
    alive: bool,
    done: bool,
    points: Vec<Point>,
}

/// Generate `config.scenes` scene pairs (I then R for each scene id).
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<Vec<Scene>> {
    config.validate()?;
    let extent = config.scene_extent()?;
    let mut scenes = Vec::with_capacity(2 * config.scenes);
    for idx in 0..config.scenes {
        let scene_id = idx as i64;
        let truth = simulate_scene(config, &extent, seed, idx as u64);
        let radar = radar_view(config, &extent, &truth, seed, idx as u64);
        scenes.push(Scene {
            scene_id,
            stream: Stream::I,
            trajectories: truth,
            extent,
            fps: config.i_rate as f64,
        });
        scenes.push(Scene {
            scene_id,
            stream: Stream::R,
            trajectories: radar,
            extent,
            fps: config.r_rate as f64,
        });
    }
    Ok(scenes)
}

fn simulate_scene(config: &GenConfig, extent: &Extent, seed: u64, idx: u64) -> Vec<Trajectory> {
    let mut rng = substream(seed, "data/scene", idx);
    let dt = 1.0 / config.i_rate as f64;
    let scene_route = rng.gen_range(0..config.routes.len());
    let warmup = config.warmup_frames as i64;

    let mut walkers: Vec<Walker> = (0..config.peds_per_scene)
        .map(|i| {
            let route = if config.shared_route {
                scene_route
            } else {
                rng.gen_range(0..config.routes.len())
            };
            let start = config.waypoints[config.routes[route][0]];
            let jitter = config.spawn_jitter;
            let (jx, jy) = if jitter > 0.0 {
                (rng.gen_range(-jitter..jitter), rng.gen_range(-jitter..jitter))
            } else {
                (0.0, 0.0)
            };
            let desired_speed = if config.speed_max > config.speed_min {
                rng.gen_range(config.speed_min..config.speed_max)
            } else {
                config.speed_min
            };
            Walker {
                ped_id: i as i64,
                spawn: (i as f64 * config.spawn_interval).round() as i64 - warmup,
                pos: [start[0] + jx, start[1] + jy],
                vel: [0.0, 0.0],
                desired_speed,
                route,
                next: 1,
                alive: false,
                done: false,
                points: Vec::new(),
            }
        })
        .collect();

    for frame in -warmup..config.frames_per_scene as i64 {
        for w in walkers.iter_mut() {
            if !w.alive && !w.done && w.spawn == frame {
                w.alive = true;
                let goal = config.waypoints[config.routes[w.route][w.next]];
                let dir = unit([goal[0] - w.pos[0], goal[1] - w.pos[1]]);
                w.vel = [dir[0] * w.desired_speed, dir[1] * w.desired_speed];
            }
        }
        // forces from the state at the start of the frame
        let snapshot: Vec<(bool, [f64; 2])> = walkers.iter().map(|w| (w.alive, w.pos)).collect();
        for (i, w) in walkers.iter_mut().enumerate() {
            if !w.alive || w.spawn == frame {
                continue;
            }
            let goal = config.waypoints[config.routes[w.route][w.next]];
            let dir = unit([goal[0] - w.pos[0], goal[1] - w.pos[1]]);
            let mut f = [
                (dir[0] * w.desired_speed - w.vel[0]) / config.relaxation_time,
                (dir[1] * w.desired_speed - w.vel[1]) / config.relaxation_time,
            ];
            for (j, &(alive, other)) in snapshot.iter().enumerate() {
                if j == i || !alive {
                    continue;
                }
                let d = [w.pos[0] - other[0], w.pos[1] - other[1]];
                let dist = norm(d).max(1e-6);
                let mag = config.ped_strength
                    * ((2.0 * config.body_radius - dist) / config.ped_range).exp();
                f[0] += mag * d[0] / dist;
                f[1] += mag * d[1] / dist;
            }
            for &[ox, oy, r] in &config.obstacles {
                let d = [w.pos[0] - ox, w.pos[1] - oy];
                let centre = norm(d).max(1e-6);
                let gap = centre - r;
                let mag = config.obstacle_strength
                    * ((config.body_radius - gap) / config.obstacle_range).exp();
                f[0] += mag * d[0] / centre;
                f[1] += mag * d[1] / centre;
            }
            w.vel[0] += f[0] * dt;
            w.vel[1] += f[1] * dt;
            let speed = norm(w.vel);
            if speed > config.max_speed {
                w.vel = [w.vel[0] * config.max_speed / speed, w.vel[1] * config.max_speed / speed];
            }
            let (x, y) = extent.clamp(w.pos[0] + w.vel[0] * dt, w.pos[1] + w.vel[1] * dt);
            w.pos = [x, y];
        }
        for w in walkers.iter_mut() {
            if !w.alive {
                continue;
            }
            if frame >= 0 {
                w.points.push(Point {
                    frame,
                    x: w.pos[0],
                    y: w.pos[1],
                });
            }
            let route = &config.routes[w.route];
            let goal = config.waypoints[route[w.next]];
            if norm([goal[0] - w.pos[0], goal[1] - w.pos[1]]) < config.waypoint_radius {
                w.next += 1;
                if w.next == route.len() {
                    w.alive = false;
                    w.done = true;
                }
            }
        }
    }

    walkers
        .into_iter()
        .filter(|w| w.points.len() >= 2)
        .map(|w| Trajectory {
            ped_id: w.ped_id,
            points: w.points,
        })
        .collect()
}

fn radar_view(
    config: &GenConfig,
    extent: &Extent,
    truth: &[Trajectory],
    seed: u64,
    idx: u64,
) -> Vec<Trajectory> {
    let mut rng = substream(seed, "data/radar", idx);
    let ratio = config.rate_ratio();
    let noise = Normal::new(0.0, config.r_noise).expect("validated sigma");
    let mut out = Vec::new();
    for t in truth {
        if rng.gen::<f64>() < config.r_dropout {
            continue;
        }
        let points: Vec<Point> = t
            .points
            .iter()
            .filter(|p| p.frame.rem_euclid(ratio) == 0)
            .map(|p| {
                let (dx, dy) = if config.r_noise > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                let (x, y) = extent.clamp(p.x + dx, p.y + dy);
                Point {
                    frame: p.frame.div_euclid(ratio),
                    x,
                    y,
                }
            })
            .collect();
        if points.len() >= 2 {
            out.push(Trajectory {
                ped_id: t.ped_id,
                points,
            });
        }
    }
    out
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = norm(v);
    if n < 1e-12 {
        [0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}
