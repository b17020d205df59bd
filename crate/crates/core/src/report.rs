//! Similarity report export: the per-layer cosine, both rank orderings, and
//! the weight each scheme would assign, as CSV plus a JSON twin.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::partition::{partition, LayerPattern};
use crate::vector::{diff, similarity_profile, Provenance, SimilarityProfile};
use crate::weights::{scheme_weights, DegeneratePolicy, SchemeKind, WeightScheme, DEFAULT_SIGMA};

/// Exact header of the CSV export.
pub const CSV_HEADER: &str =
    "layer,cosine,instruction_rank,task_rank,weight_linear,weight_log,weight_threshold";

/// One CSV row; `weight_log` is absent for single-layer models, where the
/// log scheme is undefined.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub layer: usize,
    pub cosine: f32,
    pub instruction_rank: u32,
    pub task_rank: u32,
    pub weight_linear: f32,
    pub weight_log: Option<f32>,
    pub weight_threshold: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    pub sigma: f32,
    pub residual_weight: f32,
    pub degenerate: DegeneratePolicy,
    pub degenerate_layers: Vec<usize>,
    pub layers: Vec<ReportRow>,
}

/// Parameters shared by report construction and the analyze command.
#[derive(Debug, Clone)]
pub struct AnalyzeParams {
    pub pattern: LayerPattern,
    pub sigma: f32,
    pub residual_weight: f32,
    pub degenerate: DegeneratePolicy,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        Self {
            pattern: LayerPattern::default(),
            sigma: DEFAULT_SIGMA,
            residual_weight: 1.0,
            degenerate: DegeneratePolicy::Keep,
        }
    }
}

/// Build the per-layer report for a ranked profile.
pub fn build_report(
    profile: &SimilarityProfile,
    sigma: f32,
    residual_weight: f32,
    degenerate: DegeneratePolicy,
) -> Result<SimilarityReport> {
    let scheme = |kind: SchemeKind| {
        WeightScheme::new(kind)
            .with_sigma(sigma)
            .with_residual_weight(residual_weight)
            .with_degenerate(degenerate)
    };
    let linear = scheme_weights(profile, &scheme(SchemeKind::LinearDropByRank))?;
    let log = if profile.layer_count() >= 2 {
        Some(scheme_weights(profile, &scheme(SchemeKind::LogDropByRank))?)
    } else {
        None
    };
    let threshold = scheme_weights(profile, &scheme(SchemeKind::DropWithThreshold))?;
    let layers = profile
        .layers()
        .iter()
        .enumerate()
        .map(|(i, sim)| ReportRow {
            layer: i,
            cosine: sim.cosine,
            instruction_rank: sim.instruction_rank,
            task_rank: sim.task_rank,
            weight_linear: linear[i],
            weight_log: log.as_ref().map(|w| w[i]),
            weight_threshold: threshold[i],
        })
        .collect();
    Ok(SimilarityReport {
        sigma,
        residual_weight,
        degenerate,
        degenerate_layers: profile
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.degenerate)
            .map(|(i, _)| i)
            .collect(),
        layers,
    })
}

/// Profile and report for a base/pretrained/finetuned triple.
pub fn analyze_checkpoints(
    base: &Checkpoint,
    pretrained: &Checkpoint,
    finetuned: &Checkpoint,
    params: &AnalyzeParams,
) -> Result<(SimilarityProfile, SimilarityReport)> {
    let instr = diff(pretrained, base)?.with_provenance(Provenance::Instruction);
    let comp = diff(finetuned, base)?.with_provenance(Provenance::Complex);
    let part = partition(comp.names(), &params.pattern)?;
    let profile = similarity_profile(&comp, &instr, &part)?;
    let report = build_report(&profile, params.sigma, params.residual_weight, params.degenerate)?;
    Ok((profile, report))
}

impl SimilarityReport {
    /// CSV rendering; floats use the shortest representation that parses
    /// back to the same F32.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.layers {
            let log = row
                .weight_log
                .map(|w| w.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.layer,
                row.cosine,
                row.instruction_rank,
                row.task_rank,
                row.weight_linear,
                log,
                row.weight_threshold
            ));
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Write `<stem>.csv` and `<stem>.json`, returning both paths.
    pub fn write_files(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        if let Some(parent) = stem.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
        }
        std::fs::write(&csv_path, self.to_csv()).map_err(|source| Error::Io {
            path: csv_path.clone(),
            source,
        })?;
        std::fs::write(&json_path, self.to_json_string()).map_err(|source| Error::Io {
            path: json_path.clone(),
            source,
        })?;
        Ok((csv_path, json_path))
    }
}
