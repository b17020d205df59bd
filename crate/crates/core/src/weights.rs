//! Per-layer weighting schemes that turn a similarity profile into a pure
//! vector: layers aligned with instruction-following are attenuated, layers
//! carrying the target task are kept or amplified.
//!
//! Weight orientation: ranks increase as similarity decreases, so the most
//! instruction-aligned layer gets the smallest weight. Linear weighting is
//! rank/L, logarithmic is log_L(rank), and threshold weighting drops any
//! layer whose cosine reaches sigma. Dropped mass is never redistributed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::LayerPartition;
use crate::vector::{DeltaTensor, DeltaVector, Provenance, SimilarityProfile};

/// Weighting scheme family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    #[serde(rename = "linear")]
    LinearDropByRank,
    #[serde(rename = "log")]
    LogDropByRank,
    #[serde(rename = "threshold")]
    DropWithThreshold,
}

impl SchemeKind {
    pub const fn config_name(self) -> &'static str {
        match self {
            Self::LinearDropByRank => "linear",
            Self::LogDropByRank => "log",
            Self::DropWithThreshold => "threshold",
        }
    }
}

/// What to do with zero-norm (degenerate) layers.
///
/// `Keep` treats them as lowest-similarity, i.e. maximal task weight;
/// `Drop` zeroes them, the safer choice for forgetting runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegeneratePolicy {
    #[default]
    Keep,
    Drop,
}

/// Full weighting configuration for building a pure vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    /// Similarity threshold, used by `DropWithThreshold` only.
    pub sigma: f32,
    /// Weight applied to residual (non-layer) tensors.
    pub residual_weight: f32,
    pub degenerate: DegeneratePolicy,
}

pub const DEFAULT_SIGMA: f32 = 0.95;

impl WeightScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            sigma: DEFAULT_SIGMA,
            residual_weight: 1.0,
            degenerate: DegeneratePolicy::default(),
        }
    }

    pub fn with_sigma(mut self, sigma: f32) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_residual_weight(mut self, w: f32) -> Self {
        self.residual_weight = w;
        self
    }

    pub fn with_degenerate(mut self, policy: DegeneratePolicy) -> Self {
        self.degenerate = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SchemeKind::DropWithThreshold && !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidParameter {
                name: "sigma".to_string(),
                reason: format!("{} outside [0, 1]", self.sigma),
            });
        }
        if !self.residual_weight.is_finite() {
            return Err(Error::InvalidParameter {
                name: "residual_weight".to_string(),
                reason: "must be finite".to_string(),
            });
        }
        Ok(())
    }
}

/// Return the profile with both rank orderings recomputed from its cosines.
pub fn rank_layers(mut profile: SimilarityProfile) -> SimilarityProfile {
    profile.assign_ranks();
    profile
}

/// Linear-drop-by-rank: w = rank / L. The most instruction-aligned layer
/// (rank 1) gets 1/L; the most task-specific gets exactly 1.
pub fn weights_linear(profile: &SimilarityProfile) -> Vec<f32> {
    let l = profile.layer_count() as f64;
    profile
        .layers()
        .iter()
        .map(|layer| (f64::from(layer.instruction_rank) / l) as f32)
        .collect()
}

/// Logarithmic-drop-by-rank: w = log_L(rank). Rank 1 maps to exactly 0
/// (fully dropped) and rank L to exactly 1. Undefined for L = 1.
pub fn weights_log(profile: &SimilarityProfile) -> Result<Vec<f32>> {
    let l = profile.layer_count();
    if l < 2 {
        return Err(Error::LogSingleLayer);
    }
    // ln(1)/ln(L) is exactly 0 and ln(L)/ln(L) exactly 1, so the endpoints
    // hold without special-casing.
    let ln_l = (l as f64).ln();
    Ok(profile
        .layers()
        .iter()
        .map(|layer| (f64::from(layer.instruction_rank).ln() / ln_l) as f32)
        .collect())
}

/// Drop-with-threshold: w = 0 when cosine >= sigma, else 1. Degenerate
/// layers count as lowest similarity and keep weight 1.
pub fn weights_threshold(profile: &SimilarityProfile, sigma: f32) -> Vec<f32> {
    profile
        .layers()
        .iter()
        .map(|layer| {
            if layer.degenerate {
                1.0
            } else if layer.cosine >= sigma {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Weights for a scheme with the degenerate policy applied.
pub fn scheme_weights(profile: &SimilarityProfile, scheme: &WeightScheme) -> Result<Vec<f32>> {
    scheme.validate()?;
    let mut weights = match scheme.kind {
        SchemeKind::LinearDropByRank => weights_linear(profile),
        SchemeKind::LogDropByRank => weights_log(profile)?,
        SchemeKind::DropWithThreshold => weights_threshold(profile, scheme.sigma),
    };
    if scheme.degenerate == DegeneratePolicy::Drop {
        for (w, layer) in weights.iter_mut().zip(profile.layers()) {
            if layer.degenerate {
                *w = 0.0;
            }
        }
    }
    Ok(weights)
}

/// A task vector reweighted per layer, with the weights that produced it.
#[derive(Debug, Clone)]
pub struct PureVector {
    pub delta: DeltaVector,
    pub weights: Vec<f32>,
    pub scheme: WeightScheme,
}

/// Scale every tensor in layer i by `weights[i]` and every residual tensor
/// by `residual_weight`.
pub fn apply_layer_weights(
    delta: &DeltaVector,
    part: &LayerPartition,
    weights: &[f32],
    residual_weight: f32,
) -> Result<DeltaVector> {
    if weights.len() != part.layer_count() {
        return Err(Error::InvalidParameter {
            name: "weights".to_string(),
            reason: format!(
                "{} weights for {} layers",
                weights.len(),
                part.layer_count()
            ),
        });
    }
    if !part.matches_names(delta.names()) {
        return Err(Error::Recipe(
            "delta schema does not match the partition's source schema".to_string(),
        ));
    }
    let mut out = DeltaVector::new(delta.provenance());
    let scale_group = |names: &[String], w: f32, out: &mut DeltaVector| {
        for name in names {
            let tensor = delta.get(name).expect("schema verified");
            let values: Vec<f32> = tensor.values().iter().map(|v| w * v).collect();
            out.insert(name.clone(), DeltaTensor::new(tensor.shape().to_vec(), values));
        }
    };
    for (i, names) in part.layers().iter().enumerate() {
        scale_group(names, weights[i], &mut out);
    }
    scale_group(part.residual(), residual_weight, &mut out);
    Ok(out)
}

/// Build the pure vector for a task delta under a scheme.
///
/// The profile must come from the same partition and the same model family
/// as the task vector.
pub fn build_pure_vector(
    task: &DeltaVector,
    profile: &SimilarityProfile,
    scheme: &WeightScheme,
    part: &LayerPartition,
) -> Result<PureVector> {
    if profile.partition() != part {
        return Err(Error::Recipe(
            "profile was computed from a different partition".to_string(),
        ));
    }
    if profile.family() != task.family_id() {
        return Err(Error::FamilyMismatch {
            expected: profile.family().to_string(),
            got: task.family_id(),
        });
    }
    let weights = scheme_weights(profile, scheme)?;
    let delta = apply_layer_weights(task, part, &weights, scheme.residual_weight)?
        .with_provenance(Provenance::Pure);
    Ok(PureVector {
        delta,
        weights,
        scheme: *scheme,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{partition, LayerPattern};

    /// Profile with the given exact per-layer cosines, one tensor per layer.
    fn profile_from_sims(sims: &[(f32, bool)]) -> (SimilarityProfile, LayerPartition, DeltaVector) {
        let mut task = DeltaVector::new(Provenance::Task);
        for i in 0..sims.len() {
            task.insert(format!("h.{i}.w"), DeltaTensor::new(vec![2], vec![1.0, 2.0]));
        }
        let names: Vec<String> = task.names().map(str::to_string).collect();
        let part = partition(names.iter().map(String::as_str), &LayerPattern::default()).unwrap();
        let prof =
            SimilarityProfile::from_cosines(part.clone(), task.family_id(), sims.iter().copied())
                .unwrap();
        (prof, part, task)
    }

    fn instruction_ranks(profile: &SimilarityProfile) -> Vec<u32> {
        profile.layers().iter().map(|l| l.instruction_rank).collect()
    }

    #[test]
    fn ranks_sort_descending_similarity() {
        let (prof, _, _) = profile_from_sims(&[(0.9, false), (0.5, false), (0.7, false)]);
        assert_eq!(instruction_ranks(&prof), vec![1, 3, 2]);
    }

    #[test]
    fn equal_sims_rank_by_layer_index() {
        let (prof, _, _) = profile_from_sims(&[(0.8, false); 4]);
        assert_eq!(instruction_ranks(&prof), vec![1, 2, 3, 4]);
    }

    #[test]
    fn degenerate_layers_take_largest_ranks() {
        let (prof, _, _) = profile_from_sims(&[(0.8, false), (0.0, true), (0.8, false)]);
        assert_eq!(instruction_ranks(&prof), vec![1, 3, 2]);
    }

    #[test]
    fn task_rank_is_reverse_of_instruction_rank() {
        let (prof, _, _) = profile_from_sims(&[(0.9, false), (0.5, false), (0.7, false)]);
        for layer in prof.layers() {
            assert_eq!(layer.task_rank, 4 - layer.instruction_rank);
        }
    }

    #[test]
    fn linear_weights_for_four_layers() {
        let (prof, _, _) =
            profile_from_sims(&[(0.9, false), (0.7, false), (0.5, false), (0.3, false)]);
        assert_eq!(weights_linear(&prof), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn linear_weight_single_layer_is_one() {
        let (prof, _, _) = profile_from_sims(&[(0.4, false)]);
        assert_eq!(weights_linear(&prof), vec![1.0]);
    }

    #[test]
    fn linear_weight_midrank_of_42() {
        let sims: Vec<(f32, bool)> = (0..42).map(|i| (1.0 - i as f32 * 0.01, false)).collect();
        let (prof, _, _) = profile_from_sims(&sims);
        // Layer 20 holds rank 21; Eq-style oracle: 21/42 = 0.5.
        let w = weights_linear(&prof);
        let rank21 = prof
            .layers()
            .iter()
            .position(|l| l.instruction_rank == 21)
            .unwrap();
        assert!((f64::from(w[rank21]) - 21.0 / 42.0).abs() <= 1e-7);
        assert_eq!(w[rank21], 0.5);
    }

    #[test]
    fn log_weights_for_four_layers() {
        let (prof, _, _) =
            profile_from_sims(&[(0.9, false), (0.7, false), (0.5, false), (0.3, false)]);
        let w = weights_log(&prof).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.5);
        let log4_3 = (3.0f64.ln() / 4.0f64.ln()) as f32;
        assert!((w[2] - log4_3).abs() <= 1e-7);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn log_rejects_single_layer() {
        let (prof, _, _) = profile_from_sims(&[(0.4, false)]);
        assert!(matches!(weights_log(&prof).unwrap_err(), Error::LogSingleLayer));
    }

    #[test]
    fn threshold_drops_at_and_above_sigma() {
        let (prof, _, _) =
            profile_from_sims(&[(0.97, false), (0.40, false), (0.95, false)]);
        // Boundary cosine equal to sigma is dropped.
        assert_eq!(weights_threshold(&prof, 0.95), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn threshold_sigma_one_keeps_sub_unit_sims() {
        let (prof, _, _) = profile_from_sims(&[(1.0, false), (0.999, false)]);
        let w = weights_threshold(&prof, 1.0);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn threshold_all_dropped_is_legal() {
        let (prof, _, _) = profile_from_sims(&[(0.99, false), (0.98, false)]);
        assert_eq!(weights_threshold(&prof, 0.95), vec![0.0, 0.0]);
    }

    #[test]
    fn threshold_keeps_degenerate_layers_by_default() {
        let (prof, _, _) = profile_from_sims(&[(0.99, false), (0.0, true)]);
        assert_eq!(weights_threshold(&prof, 0.95), vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_drop_policy_zeroes_flagged_layers() {
        let (prof, _, _) = profile_from_sims(&[(0.5, false), (0.0, true)]);
        let scheme = WeightScheme::new(SchemeKind::DropWithThreshold)
            .with_degenerate(DegeneratePolicy::Drop);
        assert_eq!(scheme_weights(&prof, &scheme).unwrap(), vec![1.0, 0.0]);
        let linear = WeightScheme::new(SchemeKind::LinearDropByRank)
            .with_degenerate(DegeneratePolicy::Drop);
        assert_eq!(scheme_weights(&prof, &linear).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn monotone_schemes_give_lower_weight_to_higher_similarity() {
        let sims = [(0.91f32, false), (0.2, false), (0.55, false), (0.83, false), (-0.4, false)];
        let (prof, _, _) = profile_from_sims(&sims);
        for weights in [
            weights_linear(&prof),
            weights_log(&prof).unwrap(),
        ] {
            for i in 0..sims.len() {
                for j in 0..sims.len() {
                    if sims[i].0 < sims[j].0 {
                        assert!(
                            weights[i] > weights[j],
                            "sim {} < {} must imply weight {} > {}",
                            sims[i].0,
                            sims[j].0,
                            weights[i],
                            weights[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn weight_multisets_match_rank_formulas() {
        let sims: Vec<(f32, bool)> = (0..7).map(|i| (0.9 - 0.1 * i as f32, false)).collect();
        let (prof, _, _) = profile_from_sims(&sims);
        let mut linear = weights_linear(&prof);
        linear.sort_by(f32::total_cmp);
        let expected: Vec<f32> = (1..=7).map(|r| (r as f64 / 7.0) as f32).collect();
        assert_eq!(linear, expected);

        let mut log = weights_log(&prof).unwrap();
        log.sort_by(f32::total_cmp);
        let expected_log: Vec<f32> = (1..=7)
            .map(|r| ((r as f64).ln() / 7.0f64.ln()) as f32)
            .collect();
        for (a, b) in log.iter().zip(&expected_log) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn apply_weights_scales_layers_and_residual() {
        let mut task = DeltaVector::new(Provenance::Task);
        task.insert("h.0.w", DeltaTensor::new(vec![2], vec![1.0, 2.0]));
        task.insert("h.1.w", DeltaTensor::new(vec![2], vec![3.0, 4.0]));
        task.insert("emb.w", DeltaTensor::new(vec![2], vec![5.0, 6.0]));
        let part = partition(
            ["h.0.w", "h.1.w", "emb.w"],
            &LayerPattern::default(),
        )
        .unwrap();
        let out = apply_layer_weights(&task, &part, &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(out.get("h.0.w").unwrap().values(), &[0.0, 0.0]);
        assert_eq!(out.get("h.1.w").unwrap().values(), &[3.0, 4.0]);
        assert_eq!(out.get("emb.w").unwrap().values(), &[2.5, 3.0]);
    }

    #[test]
    fn identity_weights_reproduce_the_task_vector_exactly() {
        let mut task = DeltaVector::new(Provenance::Task);
        task.insert(
            "h.0.w",
            DeltaTensor::new(vec![3], vec![0.125, -7.25, f32::MIN_POSITIVE]),
        );
        let part = partition(["h.0.w"], &LayerPattern::default()).unwrap();
        let out = apply_layer_weights(&task, &part, &[1.0], 1.0).unwrap();
        assert_eq!(out.get("h.0.w").unwrap().values(), task.get("h.0.w").unwrap().values());
    }

    #[test]
    fn linear_weights_on_all_ones_tensors_read_back_as_the_weights() {
        let sims = [(0.9f32, false), (0.7, false), (0.5, false), (0.3, false)];
        let mut task = DeltaVector::new(Provenance::Task);
        for i in 0..4 {
            task.insert(format!("h.{i}.w"), DeltaTensor::new(vec![3], vec![1.0; 3]));
        }
        let names: Vec<String> = task.names().map(str::to_string).collect();
        let part = partition(names.iter().map(String::as_str), &LayerPattern::default()).unwrap();
        let prof =
            SimilarityProfile::from_cosines(part.clone(), task.family_id(), sims).unwrap();
        let scheme = WeightScheme::new(SchemeKind::LinearDropByRank);
        let pure = build_pure_vector(&task, &prof, &scheme, &part).unwrap();
        for (i, expected) in [0.25f32, 0.5, 0.75, 1.0].iter().enumerate() {
            let values = pure.delta.get(&format!("h.{i}.w")).unwrap().values();
            assert!(values.iter().all(|v| v == expected), "layer {i}");
        }
    }

    #[test]
    fn pure_vector_carries_weights_and_provenance() {
        let (prof, part, comp) = profile_from_sims(&[(0.99, false), (0.1, false)]);
        let scheme = WeightScheme::new(SchemeKind::DropWithThreshold);
        let pure = build_pure_vector(&comp, &prof, &scheme, &part).unwrap();
        assert_eq!(pure.weights, vec![0.0, 1.0]);
        assert_eq!(pure.delta.provenance(), Provenance::Pure);
        assert_eq!(pure.delta.get("h.0.w").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn pure_vector_rejects_family_mismatch() {
        let (prof, _, _) = profile_from_sims(&[(0.99, false), (0.1, false)]);
        let mut other = DeltaVector::new(Provenance::Task);
        other.insert("h.0.w", DeltaTensor::new(vec![3], vec![0.0; 3]));
        other.insert("h.1.w", DeltaTensor::new(vec![3], vec![0.0; 3]));
        let other_part = partition(
            ["h.0.w", "h.1.w"],
            &LayerPattern::default(),
        )
        .unwrap();
        let scheme = WeightScheme::new(SchemeKind::LinearDropByRank);
        let err = build_pure_vector(&other, &prof, &scheme, &other_part).unwrap_err();
        assert!(
            matches!(err, Error::FamilyMismatch { .. } | Error::Recipe(_)),
            "{err:?}"
        );
    }

    #[test]
    fn sigma_outside_unit_interval_rejected() {
        let scheme = WeightScheme::new(SchemeKind::DropWithThreshold).with_sigma(1.5);
        assert!(scheme.validate().is_err());
    }

    #[test]
    fn permuting_layer_labels_permutes_weights() {
        let sims = [(0.9f32, false), (0.2, false), (0.6, false)];
        let (prof, _, _) = profile_from_sims(&sims);
        let w = weights_linear(&prof);
        let permuted = [sims[2], sims[0], sims[1]];
        let (prof2, _, _) = profile_from_sims(&permuted);
        let w2 = weights_linear(&prof2);
        assert_eq!(w2, vec![w[2], w[0], w[1]]);
    }
}
