//! Delta extraction and elementwise algebra over checkpoints, plus
//! per-layer cosine similarity.
//!
//! All delta arithmetic happens in F32 regardless of storage dtype; the
//! per-layer deltas of 16-bit checkpoints are small and cancellation-prone,
//! so reductions (dot products, norms) accumulate in f64 and round once at
//! the end. Reductions follow a fixed tree: sequential within a tensor,
//! tensors combined in ascending-name order, so parallel and sequential
//! evaluation are bit-identical.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{compat_error, schema_family_id, validate_compat, Checkpoint, TensorData};
use crate::error::{Error, Mismatch, MismatchKind, Result};
use crate::partition::LayerPartition;

/// How a delta was derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Fine-tuned minus pre-trained.
    Task,
    /// Pre-trained (instruction-tuned) minus base.
    Instruction,
    /// Fine-tuned minus base.
    Complex,
    /// Task vector reweighted per layer.
    Pure,
    /// Anything else (generic difference, trimmed/dropped intermediates).
    Derived,
}

/// One tensor's difference values, always F32.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    shape: Vec<u64>,
    values: Vec<f32>,
}

impl DeltaTensor {
    /// Panics if `values` does not match the shape's element count.
    pub fn new(shape: Vec<u64>, values: Vec<f32>) -> Self {
        let count = crate::checkpoint::element_count(&shape).expect("shape count fits u64");
        assert_eq!(
            count as usize,
            values.len(),
            "delta tensor values do not match shape"
        );
        Self { shape, values }
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Same schema as a checkpoint, with difference semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    tensors: BTreeMap<String, DeltaTensor>,
    provenance: Provenance,
}

impl DeltaVector {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            tensors: BTreeMap::new(),
            provenance,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DeltaTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&DeltaTensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DeltaTensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Model-family tag: a digest of the schema (names and shapes).
    pub fn family_id(&self) -> String {
        schema_family_id(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }

    /// Read a checkpoint file's tensors as a delta, widening to F32.
    pub fn from_checkpoint(ckpt: &Checkpoint, provenance: Provenance) -> Self {
        let mut delta = Self::new(provenance);
        for (name, tensor) in ckpt.iter() {
            delta.insert(
                name.clone(),
                DeltaTensor::new(tensor.shape().to_vec(), tensor.to_f32()),
            );
        }
        delta
    }
}

fn schema_error(context: &str, mismatches: Vec<Mismatch>) -> Result<()> {
    if mismatches.is_empty() {
        return Ok(());
    }
    let first = mismatches
        .first()
        .map(|m| format!("`{}` ({})", m.name, m.reason))
        .unwrap_or_default();
    Err(Error::SchemaMismatch {
        context: context.to_string(),
        first,
        mismatches,
    })
}

fn collect_mismatches<'a>(
    left: impl Iterator<Item = (&'a str, &'a [u64])>,
    lookup: impl Fn(&str) -> Option<&'a [u64]>,
    right_names: impl Iterator<Item = &'a str>,
    left_has: impl Fn(&str) -> bool,
) -> Vec<Mismatch> {
    let mut mismatches = Vec::new();
    for (name, shape) in left {
        match lookup(name) {
            None => mismatches.push(Mismatch {
                name: name.to_string(),
                reason: MismatchKind::MissingInB,
            }),
            Some(other) if other != shape => mismatches.push(Mismatch {
                name: name.to_string(),
                reason: MismatchKind::Shape,
            }),
            _ => {}
        }
    }
    for name in right_names {
        if !left_has(name) {
            mismatches.push(Mismatch {
                name: name.to_string(),
                reason: MismatchKind::MissingInA,
            });
        }
    }
    mismatches
}

/// Require a delta's schema (names and shapes) to match a checkpoint's.
pub(crate) fn check_delta_against_checkpoint(
    context: &str,
    delta: &DeltaVector,
    ckpt: &Checkpoint,
) -> Result<()> {
    let mismatches = collect_mismatches(
        ckpt.iter().map(|(n, t)| (n.as_str(), t.shape())),
        |name| delta.get(name).map(DeltaTensor::shape),
        delta.names(),
        |name| ckpt.get(name).is_some(),
    );
    schema_error(context, mismatches)
}

/// Require two deltas to share a schema.
pub(crate) fn check_delta_pair(context: &str, a: &DeltaVector, b: &DeltaVector) -> Result<()> {
    let mismatches = collect_mismatches(
        a.iter().map(|(n, t)| (n.as_str(), t.shape())),
        |name| b.get(name).map(DeltaTensor::shape),
        b.names(),
        |name| a.get(name).is_some(),
    );
    schema_error(context, mismatches)
}

// ── Elementwise operations ──────────────────────────────────────────────────

/// Elementwise minuend - subtrahend, computed and stored in F32.
pub fn diff(minuend: &Checkpoint, subtrahend: &Checkpoint) -> Result<DeltaVector> {
    let report = validate_compat(minuend, subtrahend);
    if !report.compatible {
        return Err(compat_error("diff", report));
    }
    let pairs: Vec<(&String, &TensorData)> = minuend.iter().collect();
    let tensors: Vec<(String, DeltaTensor)> = pairs
        .par_iter()
        .map(|(name, a)| {
            let b = subtrahend.get(name).expect("compat verified");
            let av = a.to_f32();
            let bv = b.to_f32();
            let values: Vec<f32> = av.iter().zip(&bv).map(|(x, y)| x - y).collect();
            ((*name).clone(), DeltaTensor::new(a.shape().to_vec(), values))
        })
        .collect();
    let mut delta = DeltaVector::new(Provenance::Derived);
    for (name, tensor) in tensors {
        delta.insert(name, tensor);
    }
    Ok(delta)
}

/// Elementwise sum of two deltas sharing a schema.
pub fn delta_sum(a: &DeltaVector, b: &DeltaVector) -> Result<DeltaVector> {
    check_delta_pair("delta_sum", a, b)?;
    let mut out = DeltaVector::new(Provenance::Derived);
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("schema verified");
        let values: Vec<f32> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        out.insert(name.clone(), DeltaTensor::new(ta.shape().to_vec(), values));
    }
    Ok(out)
}

/// theta + sum of lambda_i * delta_i, accumulated per element in F32 in the
/// listed term order. Output dtype per tensor equals the target's dtype
/// (round-to-nearest-even on down-conversion). An empty term list returns
/// the target bit-for-bit.
pub fn combine(target: &Checkpoint, terms: &[(f32, &DeltaVector)]) -> Result<Checkpoint> {
    if terms.is_empty() {
        return Ok(target.clone());
    }
    for (i, (_, delta)) in terms.iter().enumerate() {
        check_delta_against_checkpoint(&format!("combine term {i}"), delta, target)?;
    }
    let pairs: Vec<(&String, &TensorData)> = target.iter().collect();
    let results: Vec<(String, Result<TensorData>)> = pairs
        .par_iter()
        .map(|(name, tensor)| {
            let mut acc = tensor.to_f32();
            for (lambda, delta) in terms {
                let dv = delta.get(name.as_str()).expect("schema verified").values();
                for (a, d) in acc.iter_mut().zip(dv) {
                    *a += lambda * d;
                }
            }
            let out = match acc.iter().position(|v| !v.is_finite()) {
                Some(index) => Err(Error::NonFinite {
                    tensor: (*name).clone(),
                    index,
                }),
                None => TensorData::from_f32(tensor.dtype(), tensor.shape().to_vec(), &acc),
            };
            ((*name).clone(), out)
        })
        .collect();
    let mut out = Checkpoint::new();
    out.set_metadata(target.metadata().cloned());
    for (name, result) in results {
        out.insert(name, result?)?;
    }
    Ok(out)
}

/// Subtractive counterpart of [`combine`]: model - lambda * delta.
pub fn forget(model: &Checkpoint, lambda: f32, delta: &DeltaVector) -> Result<Checkpoint> {
    combine(model, &[(-lambda, delta)])
}

// ── Layerwise cosine similarity ─────────────────────────────────────────────

/// One layer's similarity entry. `instruction_rank` 1 marks the highest
/// cosine (most instruction-aligned); `task_rank` is the reverse ordering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub cosine: f32,
    pub degenerate: bool,
    pub instruction_rank: u32,
    pub task_rank: u32,
}

/// Per-layer cosine of a complex vector against an instruction vector,
/// with ranks filled.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    layers: Vec<LayerSimilarity>,
    family: String,
    partition: LayerPartition,
}

impl SimilarityProfile {
    /// Build a profile from precomputed cosines (value, degenerate flag),
    /// one per layer of the partition. Ranks are assigned immediately.
    pub fn from_cosines(
        partition: LayerPartition,
        family: impl Into<String>,
        cosines: impl IntoIterator<Item = (f32, bool)>,
    ) -> Result<Self> {
        let layers: Vec<LayerSimilarity> = cosines
            .into_iter()
            .map(|(cosine, degenerate)| LayerSimilarity {
                cosine,
                degenerate,
                instruction_rank: 0,
                task_rank: 0,
            })
            .collect();
        if layers.len() != partition.layer_count() {
            return Err(Error::InvalidParameter {
                name: "cosines".to_string(),
                reason: format!(
                    "{} cosines for {} layers",
                    layers.len(),
                    partition.layer_count()
                ),
            });
        }
        let mut profile = Self {
            layers,
            family: family.into(),
            partition,
        };
        profile.assign_ranks();
        Ok(profile)
    }

    pub fn layers(&self) -> &[LayerSimilarity] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn cosines(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.cosine).collect()
    }

    /// Recompute both rank orderings from the stored cosines.
    ///
    /// Instruction rank 1 goes to the highest similarity; ties break by
    /// ascending layer index; degenerate layers take the largest ranks
    /// (they behave as lowest-similarity, i.e. most task-relevant).
    pub fn assign_ranks(&mut self) {
        let l = self.layers.len() as u32;
        let mut order: Vec<usize> = (0..self.layers.len()).collect();
        order.sort_by(|&a, &b| {
            let (la, lb) = (&self.layers[a], &self.layers[b]);
            la.degenerate
                .cmp(&lb.degenerate)
                .then_with(|| lb.cosine.total_cmp(&la.cosine))
                .then_with(|| a.cmp(&b))
        });
        for (pos, &layer) in order.iter().enumerate() {
            let instruction_rank = pos as u32 + 1;
            self.layers[layer].instruction_rank = instruction_rank;
            self.layers[layer].task_rank = l + 1 - instruction_rank;
        }
    }
}

fn tensor_partials(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// Cosine similarity per layer between two deltas under one partition.
///
/// Dot products and norms accumulate in f64; zero-norm layers are flagged
/// degenerate with cosine 0 instead of erroring, since frozen layers do
/// occur in real fine-tunes. Cosines are clamped to [-1, 1].
pub fn similarity_profile(
    comp: &DeltaVector,
    instr: &DeltaVector,
    part: &LayerPartition,
) -> Result<SimilarityProfile> {
    check_delta_pair("similarity_profile", comp, instr)?;
    if !part.matches_names(comp.names()) {
        return Err(Error::Recipe(
            "deltas do not match the partition's source schema".to_string(),
        ));
    }
    if part.layer_count() == 0 {
        return Err(Error::NoLayers);
    }
    let indices: Vec<usize> = (0..part.layer_count()).collect();
    let layers: Vec<LayerSimilarity> = indices
        .par_iter()
        .map(|&i| {
            let names = part.layer(i).expect("index in range");
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for name in names {
                let ta = comp.get(name).expect("schema verified");
                let tb = instr.get(name).expect("schema verified");
                let (d, x, y) = tensor_partials(ta.values(), tb.values());
                dot += d;
                na += x;
                nb += y;
            }
            if na == 0.0 || nb == 0.0 {
                LayerSimilarity {
                    cosine: 0.0,
                    degenerate: true,
                    instruction_rank: 0,
                    task_rank: 0,
                }
            } else {
                let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
                LayerSimilarity {
                    cosine: cos as f32,
                    degenerate: false,
                    instruction_rank: 0,
                    task_rank: 0,
                }
            }
        })
        .collect();
    let mut profile = SimilarityProfile {
        layers,
        family: comp.family_id(),
        partition: part.clone(),
    };
    profile.assign_ranks();
    Ok(profile)
}
