//! Finite-difference verification of every parameter gradient.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::data::{Extent, Sample, SampleId, Stream, StreamWindow, Track};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::params::module_of;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub map: usize,
    pub hidden: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub peds: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            map: 4,
            hidden: 8,
            t_obs: 2,
            t_pred: 2,
            peds: 2,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub entries: usize,
    pub max_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: (String, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantCheck {
    pub variant: Variant,
    pub tolerance: f64,
    pub modules: Vec<ModuleCheck>,
}

impl VariantCheck {
    pub fn failing(&self) -> Vec<&ModuleCheck> {
        self.modules.iter().filter(|m| m.max_error.is_nan() || m.max_error > self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.modules.iter().map(|m| m.max_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for VariantCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.modules {
            let verdict = if m.max_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<7} {:<16} {:>6} entries  max rel err {:.3e}  {verdict}",
                self.variant.name(),
                m.module,
                m.entries,
                m.max_error
            )?;
        }
        Ok(())
    }
}

/// Two pedestrians walking through a tiny unit-square scene, seen by
/// both streams.
pub fn micro_sample(cfg: &GradcheckConfig, seed: u64) -> Sample {
    let mut rng = substream(seed, "gradcheck/sample", 0);
    let total = cfg.t_obs + cfg.t_pred;
    let mut walk = |n: usize| {
        let mut p = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let v = [rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06)];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(p);
            p = [
                p[0] + v[0] + rng.gen_range(-0.02..0.02),
                p[1] + v[1] + rng.gen_range(-0.02..0.02),
            ];
        }
        out
    };
    let paths: Vec<Vec<[f64; 2]>> = (0..cfg.peds.max(1)).map(|_| walk(total)).collect();
    let window = |stream, jitter: f64, rng: &mut rand_chacha::ChaCha8Rng| StreamWindow {
        stream,
        tracks: paths
            .iter()
            .enumerate()
            .map(|(k, path)| Track {
                ped_id: k as i64,
                positions: path[..cfg.t_obs]
                    .iter()
                    .map(|p| Some([p[0] + jitter * rng.gen_range(-1.0..1.0), p[1] + jitter * rng.gen_range(-1.0..1.0)]))
                    .collect(),
            })
            .collect(),
        target: Some(0),
    };
    let mut noise = substream(seed, "gradcheck/radar", 0);
    Sample {
        id: SampleId {
            scene: 0,
            ped: 0,
            start_frame: 0,
        },
        t_obs: cfg.t_obs,
        t_pred: cfg.t_pred,
        frames: (0..total as i64).collect(),
        truth: paths[0].clone(),
        extent: Extent::UNIT,
        video: window(Stream::I, 0.0, &mut noise),
        radar: Some(window(Stream::R, 0.01, &mut noise)),
    }
}

/// Compare every analytic gradient entry of a fresh `variant` model
/// against central differences of the loss.
pub fn check_variant(variant: Variant, cfg: &GradcheckConfig, seed: u64) -> Result<VariantCheck> {
    let config = ModelConfig {
        variant,
        hidden: cfg.hidden,
        map: cfg.map,
        t_obs: cfg.t_obs,
        t_pred: cfg.t_pred,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, seed)?;
    let sample = micro_sample(cfg, seed);
    let (_, grads, _) = model.loss_and_grads(&sample)?;

    let mut modules: BTreeMap<String, ModuleCheck> = BTreeMap::new();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let analytic = grads[&name].clone();
        for i in 0..analytic.numel() {
            let original = model.params.get(&name).expect("listed").data()[i];
            model.params.get_mut(&name).expect("listed").data_mut()[i] = original + cfg.step;
            let plus = model.loss(&sample)?;
            model.params.get_mut(&name).expect("listed").data_mut()[i] = original - cfg.step;
            let minus = model.loss(&sample)?;
            model.params.get_mut(&name).expect("listed").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[i], numeric, cfg.floor);
            let module = module_of(&name).to_string();
            let entry = modules.entry(module.clone()).or_insert_with(|| ModuleCheck {
                module,
                entries: 0,
                max_error: 0.0,
                worst: (name.clone(), i),
            });
            entry.entries += 1;
            if err > entry.max_error || err.is_nan() {
                entry.max_error = err;
                entry.worst = (name.clone(), i);
            }
        }
    }
    Ok(VariantCheck {
        variant,
        tolerance: cfg.tolerance,
        modules: modules.into_values().collect(),
    })
}

pub fn check_all(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<VariantCheck>> {
    Variant::ALL.iter().map(|&v| check_variant(v, cfg, seed)).collect()
}
