//! Named trainable tensors, initialization and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Uniform in ±scale/√fan_in.
    Weight { scale: f64 },
    Bias,
}

/// Name, shape and kind of one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![rows, cols],
            kind: ParamKind::Weight { scale: 1.0 },
        }
    }

    /// Weight drawn from a narrower range.
    pub fn scaled_weight(name: impl Into<String>, rows: usize, cols: usize, scale: f64) -> Self {
        ParamSpec {
            kind: ParamKind::Weight { scale },
            ..Self::weight(name, rows, cols)
        }
    }

    pub fn bias(name: impl Into<String>, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![1, cols],
            kind: ParamKind::Bias,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable tensors keyed by module path (`i.enc.w_x`, `dec.b`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Weights uniform in ±scale/√fan_in with fan_in the leading extent; biases
    /// zero. Each tensor draws from its own stream keyed by name, so shared
    /// tensors get identical values across model variants.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .map(|spec| {
                let tensor = match spec.kind {
                    ParamKind::Bias => Tensor::zeros(&spec.shape),
                    ParamKind::Weight { scale } => {
                        let bound = scale / (spec.shape[0] as f64).sqrt();
                        let mut rng = substream(seed, &format!("init/{}", spec.name), 0);
                        let data = (0..spec.numel())
                            .map(|_| rng.gen_range(-bound..bound))
                            .collect();
                        Tensor::new(spec.shape.clone(), data).expect("spec shape")
                    }
                };
                (spec.name.clone(), tensor)
            })
            .collect();
        ParameterSet { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero every tensor whose name starts with `prefix`; returns how many
    /// tensors were touched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut touched = 0;
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
                touched += 1;
            }
        }
        touched
    }

    /// Tensors named in `specs`, copied from `self`.
    pub fn restrict(&self, specs: &[ParamSpec]) -> Result<ParameterSet> {
        let mut out = ParameterSet::default();
        for spec in specs {
            let t = self.tensors.get(&spec.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {}", spec.name))
            })?;
            out.insert(spec.name.clone(), t.clone());
        }
        Ok(out)
    }

    /// Shapes and names must match `specs` exactly; the error lists every
    /// offending parameter.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => problems.push(format!("{}: missing", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )),
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("; ")))
        }
    }

    /// Register every tensor as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        self.bind_with(graph, true)
    }

    /// Register every tensor as a constant (inference only).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not part of this model")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }
}

/// Owning-module path of a parameter: its name without the last segment.
pub fn module_of(name: &str) -> &str {
    name.rsplit_once('.').map(|(m, _)| m).unwrap_or(name)
}

/// L2 norm of a set of named tensors grouped by owning module.
pub fn module_norms<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in tensors {
        *sq.entry(module_of(name).to_string()).or_default() += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    sq.into_iter().map(|(m, s)| (m, s.sqrt())).collect()
}

pub const CHECKPOINT_FORMAT: &str = "smn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile<M> {
    format: String,
    version: u32,
    model: M,
    params: Vec<StoredTensor>,
}

/// Write `params` plus a serializable model description as JSON.
pub fn save_checkpoint<M: Serialize>(path: &Path, model: &M, params: &ParameterSet) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model,
        params: params
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<(M, ParameterSet)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile<M> = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut params = ParameterSet::default();
    for t in file.params {
        let tensor = Tensor::new(t.shape, t.values)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
        params.insert(t.name, tensor);
    }
    Ok((file.model, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![ParamSpec::weight("a.w", 4, 3), ParamSpec::bias("a.b", 3)]
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let p = ParameterSet::init(&specs(), 1);
        assert!(p.get("a.w").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert!(p.get("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.count(), 15);
        assert_eq!(p, ParameterSet::init(&specs(), 1));
        assert_ne!(p, ParameterSet::init(&specs(), 2));
    }

    #[test]
    fn shared_names_init_identically() {
        let small = ParameterSet::init(&specs(), 5);
        let mut more = specs();
        more.push(ParamSpec::weight("b.w", 2, 2));
        let big = ParameterSet::init(&more, 5);
        assert_eq!(small.get("a.w"), big.get("a.w"));
    }

    #[test]
    fn validate_lists_offenders() {
        let p = ParameterSet::init(&specs(), 1);
        let wrong = vec![ParamSpec::weight("a.w", 4, 4), ParamSpec::bias("c.b", 3)];
        let msg = p.validate(&wrong).unwrap_err().to_string();
        assert!(msg.contains("a.w") && msg.contains("c.b") && msg.contains("a.b"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p = ParameterSet::init(&specs(), 3);
        save_checkpoint(&path, &"meta".to_string(), &p).unwrap();
        let (meta, q): (String, ParameterSet) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(p, q);
    }

    #[test]
    fn norms_per_module() {
        let mut g = BTreeMap::new();
        g.insert("a.w".to_string(), Tensor::row(&[3.0]));
        g.insert("a.b".to_string(), Tensor::row(&[4.0]));
        g.insert("c.w".to_string(), Tensor::row(&[f64::NAN]));
        let n = module_norms(&g);
        assert_eq!(n["a"], 5.0);
        assert!(n["c"].is_nan());
    }

    #[test]
    fn module_paths() {
        assert_eq!(module_of("i.read.l0.w_z"), "i.read.l0");
        assert_eq!(module_of("bias"), "bias");
    }
}
