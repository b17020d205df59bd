//! Synthetic checkpoint quadruples with planted layer structure, for
//! desk-scale verification of the merge pipeline.
//!
//! The generator plants an instruction delta on layer set A and a task
//! delta on layer set B:
//!
//! ```text
//! pretrained = base + instruction delta            (supported on A)
//! finetuned  = pretrained + task delta (on B)
//!                        + reinforcement * instruction delta (on A)
//! target     = pretrained
//! ```
//!
//! With disjoint A and B, layers in A show cosine 1 against the
//! instruction vector and layers in B come out degenerate or near zero,
//! which is exactly the structure threshold weighting is meant to recover.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_checkpoint, Checkpoint, Dtype, TensorData};
use crate::error::{Error, Result};
use crate::rng::{mix, ElementRng};

const BASE_SCALE: f64 = 0.02;

/// Shape template instantiated once per layer (or once, for residuals).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorTemplate {
    pub name: String,
    pub shape: Vec<u64>,
}

/// Standard deviations of the planted deltas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Magnitudes {
    pub instruction: f32,
    pub task: f32,
    /// Fraction of the instruction delta re-applied during fine-tuning.
    pub reinforcement: f32,
    /// Instruction-delta noise floor on every layer; zero keeps the
    /// instruction delta strictly supported on A.
    pub noise: f32,
}

impl Default for Magnitudes {
    fn default() -> Self {
        Self {
            instruction: 1.0,
            task: 1.0,
            reinforcement: 0.05,
            noise: 0.0,
        }
    }
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

/// Deterministic fixture description; identical specs produce byte-identical
/// checkpoint files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub layers: usize,
    pub layer_tensors: Vec<TensorTemplate>,
    #[serde(default)]
    pub residual_tensors: Vec<TensorTemplate>,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    /// Layer set A carrying the instruction delta.
    pub instruction_layers: Vec<usize>,
    /// Layer set B carrying the task delta.
    pub task_layers: Vec<usize>,
    /// Reject specs where A and B intersect.
    #[serde(default)]
    pub disjoint: bool,
    #[serde(default)]
    pub magnitudes: Magnitudes,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers > 0 && self.layer_tensors.is_empty() {
            return Err(Error::Fixture(
                "layer_tensors must be non-empty when layers > 0".to_string(),
            ));
        }
        let mut seen = BTreeSet::new();
        for t in self.layer_tensors.iter().chain(&self.residual_tensors) {
            if !seen.insert(&t.name) {
                return Err(Error::Fixture(format!("duplicate tensor template `{}`", t.name)));
            }
            crate::checkpoint::element_count(&t.shape).ok_or_else(|| {
                Error::Fixture(format!("template `{}` shape overflows", t.name))
            })?;
        }
        for (label, set) in [("instruction_layers", &self.instruction_layers), ("task_layers", &self.task_layers)] {
            for &i in set {
                if i >= self.layers {
                    return Err(Error::Fixture(format!(
                        "{label} index {i} out of range for {} layers",
                        self.layers
                    )));
                }
            }
        }
        if self.disjoint {
            let a: BTreeSet<usize> = self.instruction_layers.iter().copied().collect();
            if self.task_layers.iter().any(|i| a.contains(i)) {
                return Err(Error::Fixture(
                    "instruction and task layer sets intersect but disjoint was requested"
                        .to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// The four generated checkpoints.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub base: Checkpoint,
    pub pretrained: Checkpoint,
    pub finetuned: Checkpoint,
    pub target: Checkpoint,
}

struct RoleRng {
    seed: u64,
}

impl RoleRng {
    fn stream(&self, role: u64, name: &str) -> ElementRng {
        ElementRng::new(mix(self.seed ^ role), name)
    }
}

const ROLE_BASE: u64 = 0x42;
const ROLE_INSTRUCTION: u64 = 0x1A;
const ROLE_NOISE: u64 = 0x2B;
const ROLE_TASK: u64 = 0x3C;

fn normals(rng: &ElementRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| rng.normal(i as u64) * scale).collect()
}

/// Generate the base/pretrained/finetuned/target quadruple for a spec.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<FixtureSet> {
    spec.validate()?;
    let rng = RoleRng { seed: spec.seed };
    let in_a: BTreeSet<usize> = spec.instruction_layers.iter().copied().collect();
    let in_b: BTreeSet<usize> = spec.task_layers.iter().copied().collect();
    let mags = spec.magnitudes;

    let mut base = Checkpoint::new();
    let mut pretrained = Checkpoint::new();
    let mut finetuned = Checkpoint::new();

    let mut emit = |name: String,
                    shape: &[u64],
                    instr_on: bool,
                    task_on: bool|
     -> Result<()> {
        let n = crate::checkpoint::element_count(shape).expect("validated") as usize;
        let base_vals: Vec<f64> = normals(&rng.stream(ROLE_BASE, &name), n, BASE_SCALE);

        let mut instr: Option<Vec<f64>> = None;
        if instr_on && mags.instruction != 0.0 {
            instr = Some(normals(
                &rng.stream(ROLE_INSTRUCTION, &name),
                n,
                f64::from(mags.instruction),
            ));
        }
        if mags.noise != 0.0 {
            let noise = normals(&rng.stream(ROLE_NOISE, &name), n, f64::from(mags.noise));
            match &mut instr {
                Some(v) => {
                    for (x, e) in v.iter_mut().zip(&noise) {
                        *x += e;
                    }
                }
                None => instr = Some(noise),
            }
        }
        let task: Option<Vec<f64>> = if task_on && mags.task != 0.0 {
            Some(normals(&rng.stream(ROLE_TASK, &name), n, f64::from(mags.task)))
        } else {
            None
        };

        let base_f32: Vec<f32> = base_vals.iter().map(|v| *v as f32).collect();
        let pre_f32: Vec<f32> = match &instr {
            Some(d) => base_f32
                .iter()
                .zip(d)
                .map(|(b, d)| b + *d as f32)
                .collect(),
            None => base_f32.clone(),
        };
        let mut ft_f32 = pre_f32.clone();
        let mut touched = false;
        if let Some(t) = &task {
            for (x, d) in ft_f32.iter_mut().zip(t) {
                *x += *d as f32;
            }
            touched = true;
        }
        if instr_on && mags.reinforcement != 0.0 {
            if let Some(d) = &instr {
                for (x, v) in ft_f32.iter_mut().zip(d) {
                    *x += mags.reinforcement * *v as f32;
                }
                touched = true;
            }
        }
        base.insert(
            name.clone(),
            TensorData::from_f32(spec.dtype, shape.to_vec(), &base_f32)?,
        )?;
        if instr.is_some() {
            pretrained.insert(
                name.clone(),
                TensorData::from_f32(spec.dtype, shape.to_vec(), &pre_f32)?,
            )?;
        } else {
            pretrained.insert(name.clone(), base.get(&name).expect("just inserted").clone())?;
        }
        if touched || instr.is_some() {
            finetuned.insert(
                name.clone(),
                TensorData::from_f32(spec.dtype, shape.to_vec(), &ft_f32)?,
            )?;
        } else {
            finetuned.insert(name.clone(), base.get(&name).expect("just inserted").clone())?;
        }
        Ok(())
    };

    for layer in 0..spec.layers {
        for template in &spec.layer_tensors {
            let name = format!("model.layers.{layer}.{}", template.name);
            emit(name, &template.shape, in_a.contains(&layer), in_b.contains(&layer))?;
        }
    }
    for template in &spec.residual_tensors {
        emit(template.name.clone(), &template.shape, false, false)?;
    }

    let target = pretrained.clone();
    Ok(FixtureSet {
        base,
        pretrained,
        finetuned,
        target,
    })
}

/// File names used by [`write_fixture`].
pub const FIXTURE_FILES: [&str; 4] = [
    "base.ckpt",
    "pretrained.ckpt",
    "finetuned.ckpt",
    "target.ckpt",
];

/// Write the four checkpoints into a directory, returning their paths.
pub fn write_fixture(set: &FixtureSet, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let pairs = [
        (&set.base, FIXTURE_FILES[0]),
        (&set.pretrained, FIXTURE_FILES[1]),
        (&set.finetuned, FIXTURE_FILES[2]),
        (&set.target, FIXTURE_FILES[3]),
    ];
    let mut paths = Vec::with_capacity(4);
    for (ckpt, name) in pairs {
        let path = dir.join(name);
        write_checkpoint(ckpt, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
