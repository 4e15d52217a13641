//! Displacement metrics and evaluation reports.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, SampleId};
use crate::error::{Error, Result};
use crate::model::Model;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_pair(pred: &[[f64; 2]], truth: &[[f64; 2]], min_len: usize) -> Result<()> {
    if pred.len() != truth.len() || pred.len() < min_len {
        return Err(Error::Contract(format!(
            "metric over {} predicted and {} true points (need equal lengths of at least {min_len})",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance over all steps.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let total: f64 = pred.iter().zip(truth).map(|(&p, &t)| dist(p, t)).sum();
    Ok(total / pred.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Norm of the second difference of `truth` at each interior index.
pub fn curvature(truth: &[[f64; 2]]) -> Vec<(usize, f64)> {
    truth
        .windows(3)
        .enumerate()
        .map(|(i, w)| {
            let dx = w[2][0] - 2.0 * w[1][0] + w[0][0];
            let dy = w[2][1] - 2.0 * w[1][1] + w[0][1];
            (i + 1, dx.hypot(dy))
        })
        .collect()
}

/// Mean step length of a sequence (zero for fewer than two points).
pub fn mean_step(truth: &[[f64; 2]]) -> f64 {
    if truth.len() < 2 {
        return 0.0;
    }
    truth.windows(2).map(|w| dist(w[0], w[1])).sum::<f64>() / (truth.len() - 1) as f64
}

/// ADE restricted to interior indices where the true path bends by more
/// than `threshold`. `None` if no index qualifies.
pub fn nade(pred: &[[f64; 2]], truth: &[[f64; 2]], threshold: f64) -> Result<Option<f64>> {
    check_pair(pred, truth, 3)?;
    let picked: Vec<f64> = curvature(truth)
        .into_iter()
        .filter(|&(_, c)| c > threshold)
        .map(|(t, _)| dist(pred[t], truth[t]))
        .collect();
    if picked.is_empty() {
        return Ok(None);
    }
    Ok(Some(picked.iter().sum::<f64>() / picked.len() as f64))
}

/// How the non-linearity threshold is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Threshold as a multiple of the sample's mean true step length.
    pub nade_factor: f64,
    /// Fixed threshold in original units; overrides `nade_factor`.
    pub nade_threshold: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            nade_factor: 0.1,
            nade_threshold: None,
        }
    }
}

impl MetricConfig {
    pub fn threshold_for(&self, truth: &[[f64; 2]]) -> f64 {
        self.nade_threshold.unwrap_or_else(|| self.nade_factor * mean_step(truth))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: SampleId,
    pub ade: f64,
    pub fde: f64,
    pub nade: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(id: SampleId, pred: &[[f64; 2]], truth: &[[f64; 2]], cfg: &MetricConfig) -> Result<Self> {
        let nade = if truth.len() >= 3 {
            nade(pred, truth, cfg.threshold_for(truth))?
        } else {
            None
        };
        Ok(SampleMetrics {
            id,
            ade: ade(pred, truth)?,
            fde: fde(pred, truth)?,
            nade,
        })
    }
}

/// Per-sample metrics and their sample-weighted means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub ade: f64,
    pub fde: f64,
    /// Mean over samples that have at least one non-linear point.
    pub nade: Option<f64>,
    pub nade_count: usize,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("no samples to evaluate".into()));
        }
        let n = samples.len() as f64;
        let curved: Vec<f64> = samples.iter().filter_map(|s| s.nade).collect();
        Ok(EvalReport {
            ade: samples.iter().map(|s| s.ade).sum::<f64>() / n,
            fde: samples.iter().map(|s| s.fde).sum::<f64>() / n,
            nade: (!curved.is_empty()).then(|| curved.iter().sum::<f64>() / curved.len() as f64),
            nade_count: curved.len(),
            samples,
        })
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// Share of samples with a defined n-ADE.
    pub fn coverage(&self) -> f64 {
        self.nade_count as f64 / self.samples.len() as f64
    }

    pub fn aggregate_csv(&self) -> String {
        format!(
            "samples,ade,fde,nade,nade_samples,nade_coverage\n{},{},{},{},{},{}\n",
            self.count(),
            self.ade,
            self.fde,
            opt(self.nade),
            self.nade_count,
            self.coverage()
        )
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample,scene,ped,start_frame,ade,fde,nade\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.id,
                s.id.scene,
                s.id.ped,
                s.id.start_frame,
                s.ade,
                s.fde,
                opt(s.nade)
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12}", "metric", "value")?;
        writeln!(f, "{:<10} {:>12}", "samples", self.count())?;
        writeln!(f, "{:<10} {:>12.6}", "ADE", self.ade)?;
        writeln!(f, "{:<10} {:>12.6}", "FDE", self.fde)?;
        match self.nade {
            Some(v) => writeln!(f, "{:<10} {:>12.6}", "n-ADE", v)?,
            None => writeln!(f, "{:<10} {:>12}", "n-ADE", "-")?,
        }
        write!(f, "{:<10} {:>11.1}%", "coverage", 100.0 * self.coverage())
    }
}

/// Predictions in original units for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: SampleId,
    pub frames: Vec<i64>,
    pub predicted: Vec<[f64; 2]>,
    pub truth: Vec<[f64; 2]>,
}

/// Run `model` over `samples` and score the predictions in original units.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &MetricConfig) -> Result<(EvalReport, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let mut metrics = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let predicted: Vec<[f64; 2]> = model.predict(s)?.into_iter().map(|p| s.denormalize(p)).collect();
        let truth: Vec<[f64; 2]> = s.future().iter().map(|&p| s.denormalize(p)).collect();
        metrics.push(SampleMetrics::compute(s.id, &predicted, &truth, cfg)?);
        preds.push(Prediction {
            id: s.id,
            frames: s.frames[s.t_obs..].to_vec(),
            predicted,
            truth,
        });
    }
    Ok((EvalReport::from_samples(metrics)?, preds))
}

/// One row per predicted frame.
pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut out = String::from("sample,frame,step,pred_x,pred_y,true_x,true_y\n");
    for p in preds {
        for (k, (a, b)) in p.predicted.iter().zip(&p.truth).enumerate() {
            let frame = p.frames.get(k).copied().unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{},{}\n", p.id, frame, k + 1, a[0], a[1], b[0], b[1]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent brute-force versions.
    fn ade_oracle(p: &[[f64; 2]], t: &[[f64; 2]]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += ((p[i][0] - t[i][0]).powi(2) + (p[i][1] - t[i][1]).powi(2)).sqrt();
        }
        s / p.len() as f64
    }

    fn fde_oracle(p: &[[f64; 2]], t: &[[f64; 2]]) -> f64 {
        let n = p.len() - 1;
        ((p[n][0] - t[n][0]).powi(2) + (p[n][1] - t[n][1]).powi(2)).sqrt()
    }

    fn nade_oracle(p: &[[f64; 2]], t: &[[f64; 2]], theta: f64) -> Option<f64> {
        let (mut s, mut k) = (0.0, 0);
        for i in 1..t.len() - 1 {
            let ax = t[i + 1][0] - 2.0 * t[i][0] + t[i - 1][0];
            let ay = t[i + 1][1] - 2.0 * t[i][1] + t[i - 1][1];
            if (ax * ax + ay * ay).sqrt() > theta {
                s += ((p[i][0] - t[i][0]).powi(2) + (p[i][1] - t[i][1]).powi(2)).sqrt();
                k += 1;
            }
        }
        (k > 0).then(|| s / k as f64)
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let mut pt = || [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let a: Vec<_> = (0..n).map(|_| pt()).collect();
        let b: Vec<_> = (0..n).map(|_| pt()).collect();
        (a, b)
    }

    #[test]
    fn identical_sequences_score_zero() {
        let t = vec![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        assert_eq!(ade(&t, &t).unwrap(), 0.0);
        assert_eq!(fde(&t, &t).unwrap(), 0.0);
        assert_eq!(nade(&t, &t, 0.0).unwrap(), Some(0.0));
    }

    #[test]
    fn three_four_five_offset() {
        let t: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, 0.5 * i as f64]).collect();
        let p: Vec<[f64; 2]> = t.iter().map(|q| [q[0] + 3.0, q[1] + 4.0]).collect();
        assert_eq!(ade(&p, &t).unwrap(), 5.0);
        assert_eq!(fde(&p, &t).unwrap(), 5.0);
    }

    #[test]
    fn final_offset_only() {
        let t: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, 1.0]).collect();
        let mut p = t.clone();
        p[19][1] += 2.0;
        assert_eq!(fde(&p, &t).unwrap(), 2.0);
        assert!((ade(&p, &t).unwrap() - 2.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn random_pairs_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (p, t) = random_pair(&mut rng, 20);
            assert!((ade(&p, &t).unwrap() - ade_oracle(&p, &t)).abs() < 1e-12);
            assert!((fde(&p, &t).unwrap() - fde_oracle(&p, &t)).abs() < 1e-12);
            let theta = rng.gen_range(0.0..20.0);
            let (a, b) = (nade(&p, &t, theta).unwrap(), nade_oracle(&p, &t, theta));
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn straight_line_has_no_nonlinear_points() {
        let t: Vec<[f64; 2]> = (0..20).map(|i| [0.25 * i as f64, -0.5 * i as f64]).collect();
        let p: Vec<[f64; 2]> = t.iter().map(|q| [q[0] + 1.0, q[1]]).collect();
        assert_eq!(nade(&p, &t, 1e-9).unwrap(), None);
    }

    #[test]
    fn right_angle_turn() {
        // second differences: (0,0) at 1, (-1,1) at 2, (0,0) at 3
        let t = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 1.0], [2.0, 2.0]];
        let p = [[0.0, 0.0], [1.0, 0.5], [2.5, 0.0], [2.0, 1.0], [9.0, 9.0]];
        let c = curvature(&t);
        assert_eq!(c[0], (1, 0.0));
        assert_eq!(c[1].0, 2);
        assert!((c[1].1 - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c[2], (3, 0.0));
        assert_eq!(nade(&p, &t, 0.1).unwrap(), Some(0.5));
        // every strictly bent point counts at zero threshold
        assert_eq!(nade(&p, &t, 0.0).unwrap(), nade_oracle(&p, &t, 0.0));
        assert_eq!(nade(&p, &t, 0.0).unwrap(), Some(0.5));
    }

    #[test]
    fn zero_threshold_on_curved_truth() {
        let t: Vec<[f64; 2]> = (0..12).map(|i| [(i as f64 * 0.3).cos(), (i as f64 * 0.3).sin()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<[f64; 2]> = t.iter().map(|q| [q[0] + rng.gen_range(-0.1..0.1), q[1]]).collect();
        let interior: f64 = (1..11).map(|i| (p[i][0] - t[i][0]).abs()).sum::<f64>() / 10.0;
        assert!((nade(&p, &t, 0.0).unwrap().unwrap() - interior).abs() < 1e-12);
    }

    #[test]
    fn length_errors() {
        let a = [[0.0, 0.0]; 3];
        let b = [[0.0, 0.0]; 4];
        assert!(matches!(ade(&a, &b), Err(Error::Contract(_))));
        assert!(matches!(fde(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(nade(&a[..2], &a[..2], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn report_is_sample_weighted_and_skips_straight_samples() {
        let id = |p| SampleId {
            scene: 0,
            ped: p,
            start_frame: 0,
        };
        let rows = vec![
            SampleMetrics { id: id(0), ade: 1.0, fde: 2.0, nade: Some(3.0) },
            SampleMetrics { id: id(1), ade: 3.0, fde: 4.0, nade: None },
        ];
        let r = EvalReport::from_samples(rows).unwrap();
        assert_eq!((r.ade, r.fde, r.nade, r.nade_count), (2.0, 3.0, Some(3.0), 1));
        assert_eq!(r.coverage(), 0.5);
        assert!(r.aggregate_csv().ends_with("2,2,3,3,1,0.5\n"));
        assert_eq!(r.per_sample_csv().lines().nth(2).unwrap(), "0:1:0,0,1,0,3,4,");
        assert!(EvalReport::from_samples(Vec::new()).is_err());
    }

    fn rigid(p: [f64; 2], angle: f64, shift: [f64; 2]) -> [f64; 2] {
        let (s, c) = angle.sin_cos();
        [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]]
    }

    proptest! {
        #[test]
        fn bounds_and_rigid_invariance(seed in any::<u64>(), n in 3usize..25, angle in -3.2f64..3.2, sx in -50.0f64..50.0, sy in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_pair(&mut rng, n);
            let (a, f) = (ade(&p, &t).unwrap(), fde(&p, &t).unwrap());
            prop_assert!(a >= 0.0 && f >= 0.0);
            prop_assert!(f <= n as f64 * a + 1e-12);
            let p2: Vec<_> = p.iter().map(|&q| rigid(q, angle, [sx, sy])).collect();
            let t2: Vec<_> = t.iter().map(|&q| rigid(q, angle, [sx, sy])).collect();
            prop_assert!((ade(&p2, &t2).unwrap() - a).abs() < 1e-9);
            prop_assert!((fde(&p2, &t2).unwrap() - f).abs() < 1e-9);
            let (n1, n2) = (nade(&p, &t, 1.0).unwrap(), nade(&p2, &t2, 1.0).unwrap());
            if let (Some(x), Some(y)) = (n1, n2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
