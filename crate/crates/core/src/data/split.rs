use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::Scene;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Scene-level partition. Both streams of a scene land in the same part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub validation: Vec<Scene>,
}

/// Partition by `scene_id` with `ratios = [train, test, validation]`.
///
/// Counts are `round(n·train)` and `round(n·test)`, with the remainder
/// going to validation.
pub fn split(scenes: &[Scene], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if scenes.is_empty() {
        return Err(Error::Contract("cannot split an empty scene list".into()));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut ids: Vec<i64> = scenes
        .iter()
        .map(|s| s.scene_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut substream(seed, "data/split", 0));
    let n = ids.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_test = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let train: BTreeSet<i64> = ids[..n_train].iter().copied().collect();
    let test: BTreeSet<i64> = ids[n_train..n_train + n_test].iter().copied().collect();

    let mut out = Split::default();
    for s in scenes {
        let part = if train.contains(&s.scene_id) {
            &mut out.train
        } else if test.contains(&s.scene_id) {
            &mut out.test
        } else {
            &mut out.validation
        };
        part.push(s.clone());
    }
    Ok(out)
}
