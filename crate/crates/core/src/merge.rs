//! Merge and forgetting strategies over task deltas: plain task arithmetic,
//! TIES trimming with sign election, DARE dropping, layer-aware weighting,
//! and ordered compositions of all of them, driven by a declarative recipe.
//!
//! Every stochastic step is keyed by (seed, tensor name, element index), so
//! recipe execution is bit-identical regardless of thread count or term
//! evaluation order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, Checkpoint};
use crate::error::{Error, Result};
use crate::partition::{partition, LayerPartition, LayerPattern};
use crate::rng::{derive_seed, ElementRng};
use crate::vector::{
    combine, delta_sum, diff, similarity_profile, DeltaTensor, DeltaVector, Provenance,
    SimilarityProfile,
};
use crate::weights::{build_pure_vector, WeightScheme};

// ── TIES trimming and sign election ─────────────────────────────────────────

/// Whether magnitude trimming ranks elements within each tensor or across
/// the whole delta.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrimScope {
    #[default]
    Tensor,
    Global,
}

/// Magnitude-trim configuration; `k` is the keep fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimSpec {
    pub k: f32,
    #[serde(default)]
    pub scope: TrimScope,
}

/// Stochastic drop configuration; `p` is the per-element drop probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    pub p: f32,
    pub seed: u64,
}

fn check_keep_fraction(k: f32) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "k".to_string(),
            reason: format!("keep fraction {k} outside (0, 1]"),
        });
    }
    Ok(())
}

/// Number of elements to keep for fraction `k` of `n`.
///
/// Computed as ceil(k*n), snapping products within a relative 1e-6 of an
/// integer onto it so that the F32 representation of decimal fractions
/// (0.3 stores as 0.30000001...) does not bump the ceiling.
fn keep_count(k: f32, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let t = f64::from(k) * n as f64;
    let r = t.round();
    let m = if (t - r).abs() <= t.abs() * 1e-6 {
        r as usize
    } else {
        t.ceil() as usize
    };
    m.min(n)
}

fn trim_tensor_values(values: &[f32], keep: usize) -> Vec<f32> {
    if keep >= values.len() {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Magnitude descending; ties at the cutoff keep the lower flat index.
    order.sort_unstable_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

pub(crate) fn ties_trim_counted(delta: &DeltaVector, k: f32) -> Result<(DeltaVector, u64)> {
    check_keep_fraction(k)?;
    if k == 1.0 {
        return Ok((delta.clone(), 0));
    }
    let pairs: Vec<(&String, &DeltaTensor)> = delta.iter().collect();
    let trimmed: Vec<(String, DeltaTensor, u64)> = pairs
        .par_iter()
        .map(|(name, tensor)| {
            let n = tensor.values().len();
            let keep = keep_count(k, n);
            let values = trim_tensor_values(tensor.values(), keep);
            (
                (*name).clone(),
                DeltaTensor::new(tensor.shape().to_vec(), values),
                (n - keep) as u64,
            )
        })
        .collect();
    let mut out = DeltaVector::new(Provenance::Derived);
    let mut zeroed = 0;
    for (name, tensor, z) in trimmed {
        zeroed += z;
        out.insert(name, tensor);
    }
    Ok((out, zeroed))
}

/// Keep the ceil(k*n) largest-magnitude elements of each tensor, zeroing
/// the rest. `k = 1` is the identity.
pub fn ties_trim(delta: &DeltaVector, k: f32) -> Result<DeltaVector> {
    ties_trim_counted(delta, k).map(|(d, _)| d)
}

pub(crate) fn ties_trim_global_counted(delta: &DeltaVector, k: f32) -> Result<(DeltaVector, u64)> {
    check_keep_fraction(k)?;
    if k == 1.0 {
        return Ok((delta.clone(), 0));
    }
    let total: usize = delta.iter().map(|(_, t)| t.values().len()).sum();
    let keep = keep_count(k, total);
    // Rank every element across tensors: magnitude descending, then
    // ascending tensor name (map order), then flat index.
    let mut order: Vec<(u32, u32)> = Vec::with_capacity(total);
    let tensors: Vec<(&String, &DeltaTensor)> = delta.iter().collect();
    for (ti, (_, tensor)) in tensors.iter().enumerate() {
        for i in 0..tensor.values().len() {
            order.push((ti as u32, i as u32));
        }
    }
    order.sort_unstable_by(|&(ta, ia), &(tb, ib)| {
        let va = tensors[ta as usize].1.values()[ia as usize].abs();
        let vb = tensors[tb as usize].1.values()[ib as usize].abs();
        vb.total_cmp(&va).then(ta.cmp(&tb)).then(ia.cmp(&ib))
    });
    let mut keep_mask: Vec<Vec<bool>> = tensors
        .iter()
        .map(|(_, t)| vec![false; t.values().len()])
        .collect();
    for &(ti, i) in &order[..keep] {
        keep_mask[ti as usize][i as usize] = true;
    }
    let mut out = DeltaVector::new(Provenance::Derived);
    for (ti, (name, tensor)) in tensors.iter().enumerate() {
        let values: Vec<f32> = tensor
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| if keep_mask[ti][i] { *v } else { 0.0 })
            .collect();
        out.insert((*name).clone(), DeltaTensor::new(tensor.shape().to_vec(), values));
    }
    Ok((out, (total - keep) as u64))
}

/// Global-budget variant of [`ties_trim`]: the keep fraction applies to the
/// whole delta rather than per tensor.
pub fn ties_trim_global(delta: &DeltaVector, k: f32) -> Result<DeltaVector> {
    ties_trim_global_counted(delta, k).map(|(d, _)| d)
}

pub(crate) fn ties_sign_merge_counted(deltas: &[&DeltaVector]) -> Result<(DeltaVector, u64)> {
    if deltas.len() < 2 {
        return Err(Error::Recipe(
            "sign merge needs at least two deltas".to_string(),
        ));
    }
    for other in &deltas[1..] {
        crate::vector::check_delta_pair("ties_sign_merge", deltas[0], other)?;
    }
    let mut out = DeltaVector::new(Provenance::Derived);
    let mut conflicts = 0u64;
    for (name, first) in deltas[0].iter() {
        let columns: Vec<&[f32]> = deltas
            .iter()
            .map(|d| d.get(name).expect("schema verified").values())
            .collect();
        let mut values = Vec::with_capacity(first.values().len());
        for i in 0..first.values().len() {
            let sum: f64 = columns.iter().map(|c| f64::from(c[i])).sum();
            if sum == 0.0 {
                if columns.iter().any(|c| c[i] != 0.0) {
                    conflicts += 1;
                }
                values.push(0.0);
                continue;
            }
            let positive = sum > 0.0;
            let mut agree_sum = 0.0f64;
            let mut agree_count = 0u32;
            for c in &columns {
                let v = c[i];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    agree_sum += f64::from(v);
                    agree_count += 1;
                }
            }
            values.push((agree_sum / f64::from(agree_count)) as f32);
        }
        out.insert(name.clone(), DeltaTensor::new(first.shape().to_vec(), values));
    }
    Ok((out, conflicts))
}

/// Elementwise sign election across trimmed deltas: the sign of the sum
/// wins, and the output is the mean of the agreeing elements (zero on an
/// exactly cancelled sum).
pub fn ties_sign_merge(deltas: &[&DeltaVector]) -> Result<DeltaVector> {
    ties_sign_merge_counted(deltas).map(|(d, _)| d)
}

// ── DARE dropping ───────────────────────────────────────────────────────────

pub(crate) fn dare_drop_counted(
    delta: &DeltaVector,
    p: f32,
    seed: u64,
) -> Result<(DeltaVector, u64)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter {
            name: "p".to_string(),
            reason: format!("drop probability {p} outside [0, 1)"),
        });
    }
    if p == 0.0 {
        return Ok((delta.clone(), 0));
    }
    let scale = (1.0 / (1.0 - f64::from(p))) as f32;
    let p = f64::from(p);
    let pairs: Vec<(&String, &DeltaTensor)> = delta.iter().collect();
    let dropped_tensors: Vec<(String, DeltaTensor, u64)> = pairs
        .par_iter()
        .map(|(name, tensor)| {
            let rng = ElementRng::new(seed, name);
            let mut dropped = 0u64;
            let values: Vec<f32> = tensor
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if rng.uniform(i as u64) < p {
                        dropped += 1;
                        0.0
                    } else {
                        v * scale
                    }
                })
                .collect();
            (
                (*name).clone(),
                DeltaTensor::new(tensor.shape().to_vec(), values),
                dropped,
            )
        })
        .collect();
    let mut out = DeltaVector::new(Provenance::Derived);
    let mut dropped = 0;
    for (name, tensor, d) in dropped_tensors {
        dropped += d;
        out.insert(name, tensor);
    }
    Ok((out, dropped))
}

/// Zero each element independently with probability `p` and rescale the
/// survivors by 1/(1-p). Identical (seed, schema) gives bit-identical
/// output regardless of evaluation order.
pub fn dare_drop(delta: &DeltaVector, p: f32, seed: u64) -> Result<DeltaVector> {
    dare_drop_counted(delta, p, seed).map(|(d, _)| d)
}

// ── Recipes ─────────────────────────────────────────────────────────────────

/// Where a term's task delta comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "path", rename_all = "lowercase")]
pub enum DeltaSource {
    /// Fine-tuned checkpoint; the delta is fine-tuned minus pre-trained.
    Finetuned(PathBuf),
    /// Precomputed delta stored as a checkpoint file.
    Delta(PathBuf),
}

impl DeltaSource {
    fn path(&self) -> &Path {
        match self {
            Self::Finetuned(p) | Self::Delta(p) => p,
        }
    }
}

/// One step of a term's transform chain, applied left to right.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Transform {
    Lata { scheme: WeightScheme },
    Ties { k: f32, scope: TrimScope },
    Dare { p: f32, seed: Option<u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Learn,
    Forget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecipeTerm {
    pub source: DeltaSource,
    pub lambda: f32,
    pub chain: Vec<Transform>,
}

/// Declarative description of one merge or forgetting run.
#[derive(Debug, Clone, Serialize)]
pub struct MergeRecipe {
    pub target: PathBuf,
    pub base: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub terms: Vec<RecipeTerm>,
    pub mode: MergeMode,
    pub layer_pattern: Option<String>,
    pub seed: u64,
    /// Merge all terms in one combine call instead of folding sequentially.
    /// Defaults to simultaneous when every term carries the same chain.
    pub simultaneous: Option<bool>,
    pub output: PathBuf,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<()> {
        for (i, term) in self.terms.iter().enumerate() {
            if !term.lambda.is_finite() {
                return Err(Error::InvalidParameter {
                    name: format!("terms[{i}].lambda"),
                    reason: "must be finite".to_string(),
                });
            }
            if matches!(term.source, DeltaSource::Finetuned(_)) && self.pretrained.is_none() {
                return Err(Error::Recipe(format!(
                    "terms[{i}] derives a delta from a fine-tuned checkpoint and needs `pretrained`"
                )));
            }
            for transform in &term.chain {
                match transform {
                    Transform::Lata { scheme } => {
                        scheme.validate()?;
                        if self.base.is_none() || self.pretrained.is_none() {
                            return Err(Error::Recipe(format!(
                                "terms[{i}] requests a lata transform, which needs both `base` and `pretrained`"
                            )));
                        }
                    }
                    Transform::Ties { k, .. } => check_keep_fraction(*k)?,
                    Transform::Dare { p, .. } => {
                        if !(0.0..1.0).contains(p) {
                            return Err(Error::InvalidParameter {
                                name: format!("terms[{i}].dare.p"),
                                reason: format!("drop probability {p} outside [0, 1)"),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn default_simultaneous(&self) -> bool {
        match self.terms.split_first() {
            None => true,
            Some((first, rest)) => rest.iter().all(|t| t.chain == first.chain),
        }
    }
}

/// Loads checkpoints for recipe execution; also reports a content digest
/// for the run manifest.
pub trait CheckpointResolver {
    fn load(&self, path: &Path) -> Result<(Checkpoint, String)>;
}

/// Resolver reading container files from the local filesystem.
pub struct FsResolver;

impl CheckpointResolver for FsResolver {
    fn load(&self, path: &Path) -> Result<(Checkpoint, String)> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let digest = format!("sha256:{}", hex::encode(sha2::Sha256::digest(&bytes)));
        Ok((checkpoint_from_bytes(&bytes)?, digest))
    }
}

// ── Run manifest ────────────────────────────────────────────────────────────

/// One layer's similarity entry as recorded in a manifest.
#[derive(Debug, Clone, Serialize)]
pub struct LataLayerReport {
    pub layer: usize,
    pub cosine: f32,
    pub degenerate: bool,
    pub instruction_rank: u32,
    pub task_rank: u32,
    pub weight: f32,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum TransformReport {
    Lata {
        scheme: WeightScheme,
        layers: Vec<LataLayerReport>,
    },
    Ties {
        k: f32,
        scope: TrimScope,
        zeroed: u64,
    },
    Dare {
        p: f32,
        seed: u64,
        dropped: u64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct TermReport {
    pub source: String,
    pub lambda: f32,
    pub transforms: Vec<TransformReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SignMergeReport {
    /// Indices of the terms that took part in the sign election.
    pub terms: Vec<usize>,
    /// Elements zeroed by an exactly cancelled sign vote.
    pub conflicts_zeroed: u64,
}

/// Provenance record written beside every output checkpoint: the recipe,
/// input digests, seed, per-layer similarity data, and per-transform drop
/// counts needed to reproduce the run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub recipe: serde_json::Value,
    /// Verbatim configuration document the run was invoked with, when one
    /// exists (CLI runs embed it; programmatic runs may omit it).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub mode: MergeMode,
    pub seed: u64,
    pub simultaneous: bool,
    pub inputs: BTreeMap<String, String>,
    pub terms: Vec<TermReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sign_merge: Option<SignMergeReport>,
    pub output: String,
    pub output_digest: String,
}

impl RunManifest {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Result of executing a recipe in memory.
#[derive(Debug)]
pub struct RecipeOutcome {
    pub merged: Checkpoint,
    pub manifest: RunManifest,
}

// ── Execution ───────────────────────────────────────────────────────────────

fn scale_delta(delta: &DeltaVector, c: f32) -> DeltaVector {
    let mut out = DeltaVector::new(delta.provenance());
    for (name, tensor) in delta.iter() {
        let values: Vec<f32> = tensor.values().iter().map(|v| c * v).collect();
        out.insert(name.clone(), DeltaTensor::new(tensor.shape().to_vec(), values));
    }
    out
}

struct Store {
    checkpoints: BTreeMap<PathBuf, Checkpoint>,
    digests: BTreeMap<String, String>,
}

impl Store {
    fn load_all(recipe: &MergeRecipe, resolver: &dyn CheckpointResolver) -> Result<Self> {
        let mut paths: Vec<&Path> = vec![recipe.target.as_path()];
        if let Some(p) = &recipe.base {
            paths.push(p);
        }
        if let Some(p) = &recipe.pretrained {
            paths.push(p);
        }
        for term in &recipe.terms {
            paths.push(term.source.path());
        }
        let mut checkpoints = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for path in paths {
            if checkpoints.contains_key(path) {
                continue;
            }
            let (ckpt, digest) = resolver.load(path)?;
            digests.insert(path.display().to_string(), digest);
            checkpoints.insert(path.to_path_buf(), ckpt);
        }
        Ok(Self {
            checkpoints,
            digests,
        })
    }

    fn get(&self, path: &Path) -> &Checkpoint {
        self.checkpoints.get(path).expect("preloaded")
    }
}

/// Similarity inputs for one term's lata transform.
fn lata_profile(
    recipe: &MergeRecipe,
    store: &Store,
    term: &RecipeTerm,
    raw_task: &DeltaVector,
    pattern: &LayerPattern,
) -> Result<(SimilarityProfile, LayerPartition)> {
    let base = store.get(recipe.base.as_ref().expect("validated"));
    let pretrained = store.get(recipe.pretrained.as_ref().expect("validated"));
    let instr = diff(pretrained, base)?.with_provenance(Provenance::Instruction);
    let comp = match &term.source {
        DeltaSource::Finetuned(path) => {
            diff(store.get(path), base)?.with_provenance(Provenance::Complex)
        }
        // theta_ft - theta_base = (theta_pre - theta_base) + (theta_ft - theta_pre)
        DeltaSource::Delta(_) => {
            delta_sum(&instr, raw_task)?.with_provenance(Provenance::Complex)
        }
    };
    let part = partition(comp.names(), pattern)?;
    let profile = similarity_profile(&comp, &instr, &part)?;
    Ok((profile, part))
}

/// Run a recipe: derive each term's task delta, apply its transform chain
/// left-to-right, then add (learn) or subtract (forget) the results into
/// the target, simultaneously or sequentially.
pub fn execute_recipe(
    recipe: &MergeRecipe,
    resolver: &dyn CheckpointResolver,
) -> Result<RecipeOutcome> {
    recipe.validate()?;
    let pattern = match &recipe.layer_pattern {
        Some(p) => LayerPattern::new(p)?,
        None => LayerPattern::default(),
    };
    let store = Store::load_all(recipe, resolver)?;
    let target = store.get(&recipe.target);

    let mut deltas: Vec<DeltaVector> = Vec::with_capacity(recipe.terms.len());
    let mut term_reports: Vec<TermReport> = Vec::with_capacity(recipe.terms.len());
    for (ti, term) in recipe.terms.iter().enumerate() {
        let raw_task = match &term.source {
            DeltaSource::Finetuned(path) => {
                let pretrained = store.get(recipe.pretrained.as_ref().expect("validated"));
                diff(store.get(path), pretrained)?.with_provenance(Provenance::Task)
            }
            DeltaSource::Delta(path) => {
                DeltaVector::from_checkpoint(store.get(path), Provenance::Task)
            }
        };
        let mut current = raw_task.clone();
        let mut transforms = Vec::with_capacity(term.chain.len());
        for (oi, transform) in term.chain.iter().enumerate() {
            match transform {
                Transform::Lata { scheme } => {
                    let (profile, part) =
                        lata_profile(recipe, &store, term, &raw_task, &pattern)?;
                    let pure = build_pure_vector(&current, &profile, scheme, &part)?;
                    let layers = profile
                        .layers()
                        .iter()
                        .enumerate()
                        .map(|(layer, sim)| LataLayerReport {
                            layer,
                            cosine: sim.cosine,
                            degenerate: sim.degenerate,
                            instruction_rank: sim.instruction_rank,
                            task_rank: sim.task_rank,
                            weight: pure.weights[layer],
                        })
                        .collect();
                    transforms.push(TransformReport::Lata {
                        scheme: *scheme,
                        layers,
                    });
                    current = pure.delta;
                }
                Transform::Ties { k, scope } => {
                    let (next, zeroed) = match scope {
                        TrimScope::Tensor => ties_trim_counted(&current, *k)?,
                        TrimScope::Global => ties_trim_global_counted(&current, *k)?,
                    };
                    transforms.push(TransformReport::Ties {
                        k: *k,
                        scope: *scope,
                        zeroed,
                    });
                    current = next;
                }
                Transform::Dare { p, seed } => {
                    let effective = seed.unwrap_or_else(|| derive_seed(recipe.seed, ti, oi));
                    let (next, dropped) = dare_drop_counted(&current, *p, effective)?;
                    transforms.push(TransformReport::Dare {
                        p: *p,
                        seed: effective,
                        dropped,
                    });
                    current = next;
                }
            }
        }
        term_reports.push(TermReport {
            source: term.source.path().display().to_string(),
            lambda: term.lambda,
            transforms,
        });
        deltas.push(current);
    }

    let simultaneous = recipe
        .simultaneous
        .unwrap_or_else(|| recipe.default_simultaneous());
    let sign = match recipe.mode {
        MergeMode::Learn => 1.0f32,
        MergeMode::Forget => -1.0f32,
    };

    let mut sign_merge_report = None;
    let merged = if simultaneous {
        let ties_terms: Vec<usize> = recipe
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.chain.iter().any(|op| matches!(op, Transform::Ties { .. })))
            .map(|(i, _)| i)
            .collect();
        let mut final_terms: Vec<(f32, DeltaVector)> = Vec::new();
        if ties_terms.len() >= 2 {
            // Sign-elect across the lambda-scaled trimmed deltas; for a
            // shared lambda this equals electing first and scaling after.
            let scaled: Vec<DeltaVector> = ties_terms
                .iter()
                .map(|&i| scale_delta(&deltas[i], recipe.terms[i].lambda))
                .collect();
            let refs: Vec<&DeltaVector> = scaled.iter().collect();
            let (elected, conflicts) = ties_sign_merge_counted(&refs)?;
            sign_merge_report = Some(SignMergeReport {
                terms: ties_terms.clone(),
                conflicts_zeroed: conflicts,
            });
            for (i, delta) in deltas.iter().enumerate() {
                if !ties_terms.contains(&i) {
                    final_terms.push((sign * recipe.terms[i].lambda, delta.clone()));
                }
            }
            final_terms.push((sign, elected));
            let refs: Vec<(f32, &DeltaVector)> =
                final_terms.iter().map(|(l, d)| (*l, d)).collect();
            combine(target, &refs)?
        } else {
            let refs: Vec<(f32, &DeltaVector)> = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| (sign * recipe.terms[i].lambda, d))
                .collect();
            combine(target, &refs)?
        }
    } else {
        let mut out = target.clone();
        for (i, delta) in deltas.iter().enumerate() {
            out = combine(&out, &[(sign * recipe.terms[i].lambda, delta)])?;
        }
        out
    };

    let output_bytes = checkpoint_to_bytes(&merged)?;
    let output_digest = format!("sha256:{}", hex::encode(sha2::Sha256::digest(&output_bytes)));
    let manifest = RunManifest {
        recipe: serde_json::to_value(recipe).expect("recipe serializes"),
        config: None,
        mode: recipe.mode,
        seed: recipe.seed,
        simultaneous,
        inputs: store.digests,
        terms: term_reports,
        sign_merge: sign_merge_report,
        output: recipe.output.display().to_string(),
        output_digest,
    };
    Ok(RecipeOutcome { merged, manifest })
}

/// Execute a recipe and write the output checkpoint plus its manifest
/// (`<output>.manifest.json`).
pub fn run_recipe_to_files(
    recipe: &MergeRecipe,
    resolver: &dyn CheckpointResolver,
    config_echo: Option<serde_json::Value>,
) -> Result<RunManifest> {
    let mut outcome = execute_recipe(recipe, resolver)?;
    outcome.manifest.config = config_echo;
    crate::checkpoint::write_checkpoint(&outcome.merged, &recipe.output)?;
    let manifest_path = manifest_path_for(&recipe.output);
    std::fs::write(&manifest_path, outcome.manifest.to_json_string()).map_err(|source| {
        Error::Io {
            path: manifest_path.clone(),
            source,
        }
    })?;
    Ok(outcome.manifest)
}

pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    output.with_file_name(name)
}
