//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed. Extra
//! arguments select criteria by id substring, e.g. `-- c04 c09`.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smn::cli::{run, Cli, CHECKPOINT, TRAIN_LOG};
use smn::data::{build_samples, generate_synthetic, split, GenConfig, Sample, SampleOptions};
use smn::fusion::{fusion_specs, Fusion};
use smn::gradcheck::{check_all, GradcheckConfig};
use smn::lstm::LstmState;
use smn::memory::{write_frame, write_specs, GridShape, MemoryBlock, PendingWrite, WriteHead};
use smn::metrics::{ade, evaluate, fde, nade, MetricConfig};
use smn::model::{param_specs, Model, ModelConfig, Variant};
use smn::params::ParameterSet;
use smn::read::{read_specs, ReadHierarchy};
use smn::tensor::{Graph, Tensor};
use smn::train::{normalized_ade, train, TrainConfig};

type Check = Result<String, String>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn() -> Check,
}

const CRITERIA: [Criterion; 11] = [
    Criterion { id: "c01", title: "gradients match central differences", run: gradients },
    Criterion { id: "c02", title: "a write changes exactly one cell", run: write_locality },
    Criterion { id: "c03", title: "read hierarchy shape and ranges", run: read_hierarchy },
    Criterion { id: "c04", title: "variants nest bit-exactly", run: nesting },
    Criterion { id: "c05", title: "fusion is a convex combination", run: fusion_convexity },
    Criterion { id: "c06", title: "metrics agree with reference formulas", run: metric_oracles },
    Criterion { id: "c07", title: "memory model overfits ten samples", run: overfit },
    Criterion { id: "c08", title: "ablation ordering across seeds", run: ablation },
    Criterion { id: "c09", title: "parameter count at full scale", run: parameter_count },
    Criterion { id: "c10", title: "prediction throughput", run: throughput },
    Criterion { id: "c11", title: "training is reproducible", run: reproducible },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.id.contains(f.as_str()))) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {} {} ({secs:.1}s): {detail}", c.id, c.title);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let took = start.elapsed();
    ensure(took <= limit, format!("{detail}; {:.1}s of {}s allowed", took.as_secs_f64(), limit.as_secs()))
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Samples with both streams from a freshly generated synthetic set.
fn synthetic_samples(scenes: usize, seed: u64) -> Vec<Sample> {
    let gen = GenConfig {
        scenes,
        ..GenConfig::default()
    };
    build_samples(&generate_synthetic(&gen, seed).unwrap(), &SampleOptions::default(), true).unwrap()
}

fn gradients() -> Check {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let reports = check_all(&cfg, 1).map_err(|e| e.to_string())?;
    let mut detail = format!("W=H={} l={} tol {:e}:", cfg.map, cfg.hidden, cfg.tolerance);
    let mut ok = true;
    for r in &reports {
        write!(detail, " {}={:.1e}", r.variant, r.max_error()).unwrap();
        for m in r.failing() {
            ok = false;
            write!(detail, " [{} {} worst {}#{}]", r.variant, m.module, m.worst.0, m.worst.1).unwrap();
        }
    }
    if !ok {
        return Err(detail);
    }
    within(Duration::from_secs(300), start, detail)
}

/// Independent cell lookup: floor of the scaled coordinate, clamped.
fn expected_cell(p: [f64; 2], side: usize) -> usize {
    let c = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
    c(p[1]) * side + c(p[0])
}

fn write_locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut writes = 0;
    for seq in 0..1000 {
        let side = 1 << rng.gen_range(1..=4);
        let hidden = rng.gen_range(2..=8);
        let shape = GridShape::new(side, side).unwrap();
        let g = Graph::new();
        let params = ParameterSet::init(&write_specs("mem.write", hidden), seq).bind(&g);
        let head = WriteHead::bind(&params, "mem.write").unwrap();
        let mut block = MemoryBlock {
            cells: g.constant(random_tensor(&mut rng, shape.cells(), hidden, 1.0)),
            shape,
        };
        let mut state = LstmState::zeros(&g, 1, hidden);
        for _ in 0..rng.gen_range(1..=12) {
            let position = [rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1)];
            let context = g.constant(random_tensor(&mut rng, 1, 2 * hidden, 1.0));
            let before = block.cells.value();
            write_frame(&mut block, &head, &mut state, &[PendingWrite { position, context }]).unwrap();
            let after = block.cells.value();
            let changed: Vec<usize> = (0..shape.cells())
                .filter(|&r| {
                    let (a, b) = (before.row_slice(r), after.row_slice(r));
                    a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
                })
                .collect();
            let want = expected_cell(position, side);
            if changed != [want] {
                return Err(format!("sequence {seq}: write at {position:?} changed rows {changed:?}, expected [{want}]"));
            }
            writes += 1;
        }
    }
    Ok(format!("1000 sequences, {writes} writes, grids 2..16"))
}

fn read_hierarchy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hidden = 8;
    let mut detail = format!("l={hidden}");
    for side in [2usize, 4, 8, 16, 32] {
        let shape = GridShape::new(side, side).unwrap();
        let g = Graph::new();
        let params = ParameterSet::init(&read_specs("mem.read", hidden, shape.stages()), side as u64).bind(&g);
        let mut reader = ReadHierarchy::bind(&params, &g, "mem.read", shape).unwrap();
        let mut gates = (f64::INFINITY, f64::NEG_INFINITY);
        let mut states = (f64::INFINITY, f64::NEG_INFINITY);
        for step in 0..3 {
            let memory = g.constant(random_tensor(&mut rng, shape.cells(), hidden, 2.0));
            let mut trace = Vec::new();
            let out = reader.read_traced(memory, Some(&mut trace)).unwrap();
            if out.shape() != [1, hidden] {
                return Err(format!("W={side}: summary shape {:?}", out.shape()));
            }
            if trace.len() != side.trailing_zeros() as usize {
                return Err(format!("W={side}: {} stages", trace.len()));
            }
            for (j, layer) in trace.iter().enumerate() {
                if layer.cells != (side >> j) * (side >> j) {
                    return Err(format!("W={side} step {step}: layer {j} holds {} cells", layer.cells));
                }
                for r in [layer.update_gate, layer.compose_gate] {
                    gates = (gates.0.min(r.0), gates.1.max(r.1));
                }
                states = (states.0.min(layer.state.0), states.1.max(layer.state.1));
            }
        }
        if !(gates.0 > 0.0 && gates.1 < 1.0 && states.0 > -1.0 && states.1 < 1.0) {
            return Err(format!("W={side}: gates {gates:?}, states {states:?}"));
        }
        write!(detail, "; W={side}: {} stages, gates [{:.3}, {:.3}]", shape.stages(), gates.0, gates.1).unwrap();
    }
    Ok(detail)
}

/// `big` with every parameter absent from `small` set to zero, next to a
/// fresh `small` model from the same seed.
fn nested_pair(big: Variant, small: Variant, seed: u64) -> (Model, Model) {
    let cfg = |variant| ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    let keep: Vec<String> = param_specs(&cfg(small)).unwrap().into_iter().map(|s| s.name).collect();
    let mut b = Model::new(cfg(big), seed).unwrap();
    for (name, t) in b.params.iter_mut() {
        if !keep.contains(name) {
            t.data_mut().fill(0.0);
        }
    }
    (b, Model::new(cfg(small), seed).unwrap())
}

fn bits(p: &[[f64; 2]]) -> Vec<u64> {
    p.iter().flatten().map(|v| v.to_bits()).collect()
}

fn nesting() -> Check {
    let samples = synthetic_samples(25, 4);
    if samples.len() < 100 {
        return Err(format!("only {} samples generated", samples.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let picked: Vec<&Sample> = samples.choose_multiple(&mut rng, 100).collect();
    let pairs = [
        (Variant::Smn, Variant::Sha),
        (Variant::Sha, Variant::Sa),
        (Variant::SmnIr, Variant::ShaIr),
        (Variant::ShaIr, Variant::SaIr),
    ];
    for (big, small) in pairs {
        let (b, s) = nested_pair(big, small, 11);
        for sample in &picked {
            let (pb, ps) = (b.predict(sample).unwrap(), s.predict(sample).unwrap());
            if bits(&pb) != bits(&ps) {
                return Err(format!("{big} with extra paths zeroed differs from {small} on {:?}", sample.id));
            }
        }
    }
    Ok("100 samples; smn>sha, sha>sa, smn_ir>sha_ir, sha_ir>sa_ir".into())
}

fn fusion_convexity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for draw in 0..1000u64 {
        let hidden = rng.gen_range(1..=16);
        let g = Graph::new();
        let params = ParameterSet::init(&fusion_specs("fuse", hidden), draw).bind(&g);
        let fusion = Fusion::bind(&params, "fuse").unwrap();
        let h_i = g.constant(random_tensor(&mut rng, 1, hidden, 1.0));
        let h_r = g.constant(random_tensor(&mut rng, 1, hidden, 1.0));
        let f = fusion.fuse(h_i, h_r).unwrap();
        let (v, r, gate, out) = (f.video.value(), f.radar.value(), f.gate.value(), f.out.value());
        for k in 0..hidden {
            let (a, b, n, o) = (v.data()[k], r.data()[k], gate.data()[k], out.data()[k]);
            if !(n > 0.0 && n < 1.0) {
                return Err(format!("draw {draw}: gate {n}"));
            }
            // allow rounding of the blend itself
            let slack = 4.0 * f64::EPSILON * a.abs().max(b.abs());
            let excess = (a.min(b) - o).max(o - a.max(b)).max(0.0);
            worst = worst.max(excess);
            if excess > slack {
                return Err(format!("draw {draw}: {o} outside [{a}, {b}]"));
            }
        }
    }
    Ok(format!("1000 draws, largest excursion {worst:e}"))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn ade_reference(p: &[[f64; 2]], t: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..t.len() {
        s += dist(p[i], t[i]);
    }
    s / t.len() as f64
}

fn nade_reference(p: &[[f64; 2]], t: &[[f64; 2]], threshold: f64) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for i in 1..t.len() - 1 {
        let bend = [t[i - 1][0] - 2.0 * t[i][0] + t[i + 1][0], t[i - 1][1] - 2.0 * t[i][1] + t[i + 1][1]];
        if dist(bend, [0.0, 0.0]) > threshold {
            s += dist(p[i], t[i]);
            k += 1;
        }
    }
    (k > 0).then(|| s / k as f64)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut nonlinear = 0;
    for pair in 0..1000 {
        let n = rng.gen_range(3..=30);
        let mut walk = || -> Vec<[f64; 2]> { (0..n).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)]).collect() };
        let (p, t) = (walk(), walk());
        let threshold = rng.gen_range(0.0..40.0);
        let got = [ade(&p, &t).map_err(|e| e.to_string())?, fde(&p, &t).map_err(|e| e.to_string())?];
        let want = [ade_reference(&p, &t), dist(p[n - 1], t[n - 1])];
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
        match (nade(&p, &t, threshold).map_err(|e| e.to_string())?, nade_reference(&p, &t, threshold)) {
            (Some(g), Some(w)) => {
                nonlinear += 1;
                worst = worst.max((g - w).abs());
            }
            (None, None) => {}
            (g, w) => return Err(format!("pair {pair}: n-ADE {g:?} vs reference {w:?}")),
        }
    }
    if worst > 1e-12 {
        return Err(format!("largest deviation {worst:e}"));
    }
    let offset = ade(&[[3.0, 4.0]], &[[0.0, 0.0]]).map_err(|e| e.to_string())?;
    let offset_fde = fde(&[[3.0, 4.0]], &[[0.0, 0.0]]).map_err(|e| e.to_string())?;
    ensure(
        offset == 5.0 && offset_fde == 5.0,
        format!("1000 pairs ({nonlinear} with bends), largest deviation {worst:e}; (3,4) offset gives ADE {offset} FDE {offset_fde}"),
    )
}

fn overfit() -> Check {
    let start = Instant::now();
    let ten: Vec<Sample> = synthetic_samples(4, 7).into_iter().take(10).collect();
    let model = Model::new(ModelConfig::default(), 7).unwrap();
    let cfg = TrainConfig {
        lr: OVERFIT_LR,
        epochs: 500,
        accumulate: 1,
        patience: 500,
        ..TrainConfig::default()
    };
    let mut reached = None;
    let mut last = f64::NAN;
    let out = train(model, &ten, &[], &cfg, 7, |row, model| {
        last = normalized_ade(model, &ten).unwrap_or(f64::NAN);
        if last < 0.02 {
            reached = Some(row.epoch);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(|e| e.to_string())?;
    let detail = format!("W=H=16 l=30 lr {OVERFIT_LR}: train ADE {last:.4} after {} epochs", out.log.len());
    if reached.is_none() {
        return Err(detail);
    }
    within(Duration::from_secs(600), start, detail)
}

const OVERFIT_LR: f64 = 3e-3;

/// Settings of the seeded ablation runs.
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_MAP: usize = 8;
const ABLATION_HIDDEN: usize = 16;
const ABLATION_EPOCHS: usize = 8;
const ABLATION_LR: f64 = 3e-3;

fn ablation() -> Check {
    let start = Instant::now();
    let mut memory_wins = 0;
    let mut fusion_wins = 0;
    let mut detail = String::new();
    for seed in ABLATION_SEEDS {
        let gen = GenConfig {
            scenes: 500,
            ..GenConfig::default()
        };
        let scenes = generate_synthetic(&gen, seed).map_err(|e| e.to_string())?;
        let parts = split(&scenes, [0.7, 0.25, 0.05], seed).map_err(|e| e.to_string())?;
        let opts = SampleOptions::default();
        let samples = |s| build_samples(s, &opts, true).map_err(|e| e.to_string());
        let (train_set, test_set, val_set) = (samples(&parts.train)?, samples(&parts.test)?, samples(&parts.validation)?);
        let score = |variant| -> Result<f64, String> {
            let cfg = ModelConfig {
                variant,
                map: ABLATION_MAP,
                hidden: ABLATION_HIDDEN,
                ..ModelConfig::default()
            };
            let tc = TrainConfig {
                lr: ABLATION_LR,
                epochs: ABLATION_EPOCHS,
                clip_norm: Some(1.0),
                ..TrainConfig::default()
            };
            let model = Model::new(cfg, seed).map_err(|e| e.to_string())?;
            let out = train(model, &train_set, &val_set, &tc, seed, |_, _| ControlFlow::Continue(())).map_err(|e| e.to_string())?;
            let (report, _) = evaluate(&out.model, &test_set, &MetricConfig::default()).map_err(|e| e.to_string())?;
            Ok(report.ade)
        };
        let (sha, smn, smn_ir) = (score(Variant::Sha)?, score(Variant::Smn)?, score(Variant::SmnIr)?);
        memory_wins += usize::from(smn < sha);
        fusion_wins += usize::from(smn_ir < smn);
        write!(detail, "seed {seed}: sha {sha:.3} smn {smn:.3} smn_ir {smn_ir:.3}; ").unwrap();
    }
    write!(detail, "smn<sha in {memory_wins}/5, smn_ir<smn in {fusion_wins}/5").unwrap();
    if memory_wins < 4 || fusion_wins < 3 {
        return Err(detail);
    }
    within(Duration::from_secs(7200), start, detail)
}

fn parameter_count() -> Check {
    let cfg = ModelConfig {
        variant: Variant::Smn,
        hidden: 30,
        map: 128,
        ..ModelConfig::default()
    };
    let n = Model::new(cfg, 1).map_err(|e| e.to_string())?.param_count();
    ensure((50_000..=500_000).contains(&n), format!("W=H=128 l=30: {n} parameters"))
}

fn throughput() -> Check {
    let samples = synthetic_samples(6, 10);
    let model = Model::new(ModelConfig::default(), 10).unwrap();
    let start = Instant::now();
    for i in 0..1000 {
        model.predict(&samples[i % samples.len()]).map_err(|e| e.to_string())?;
    }
    let ms_each = start.elapsed().as_secs_f64();
    within(Duration::from_secs(60), start, format!("1000 predictions at W=H=16 l=30, {ms_each:.1} ms each"))
}

fn reproducible() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let smn = |args: &[&str]| {
        let mut full = vec!["smn"];
        full.extend_from_slice(args);
        run(Cli::try_parse_from(full).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    };
    smn(&["generate", "--scenes", "10", "--seed", "3", "--out", &p("data")])?;
    fs::write(p("run.toml"), "seed = 3\n[model]\nvariant = \"smn\"\nmap = 8\nhidden = 16\n[train]\nepochs = 2\nsamples_per_epoch = 48\n")
        .map_err(|e| e.to_string())?;
    for out in ["a", "b"] {
        smn(&["train", "--config", &p("run.toml"), "--data", &p("data"), "--out", &p(out)])?;
    }
    let read = |run: &str, file: &str| fs::read(dir.path().join(run).join(file)).map_err(|e| e.to_string());
    let first_loss = |run: &str| -> Result<u64, String> {
        let log = String::from_utf8(read(run, TRAIN_LOG)?).map_err(|e| e.to_string())?;
        let row = log.lines().nth(1).ok_or("empty log")?;
        let loss: f64 = row.split(',').nth(1).ok_or("short row")?.parse().map_err(|e| format!("{e}"))?;
        Ok(loss.to_bits())
    };
    let (la, lb) = (first_loss("a")?, first_loss("b")?);
    let same_ck = read("a", CHECKPOINT)? == read("b", CHECKPOINT)?;
    ensure(
        la == lb && same_ck,
        format!("epoch-1 loss {} vs {}; checkpoints identical: {same_ck}", f64::from_bits(la), f64::from_bits(lb)),
    )
}
