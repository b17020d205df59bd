//! JSON configuration documents for the CLI subcommands.
//!
//! Every document is validated strictly: unknown keys are rejected so a
//! typo cannot silently change a run. The manifest written next to each
//! merge output embeds the verbatim config.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use lata_core::weights::DEFAULT_SIGMA;
use lata_core::{
    DegeneratePolicy, DeltaSource, Error, FixtureSpec, MergeMode, MergeRecipe, RecipeTerm,
    SchemeKind, Transform, TrimScope, WeightScheme,
};

/// One transform in a term's chain, applied left to right.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChainOpConfig {
    Lata {
        scheme: SchemeKind,
        #[serde(default = "default_sigma")]
        sigma: f32,
        #[serde(default = "default_residual_weight")]
        residual_weight: f32,
        #[serde(default)]
        degenerate: DegeneratePolicy,
    },
    Ties {
        k: f32,
        #[serde(default)]
        scope: TrimScope,
    },
    Dare {
        p: f32,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_sigma() -> f32 {
    DEFAULT_SIGMA
}

fn default_residual_weight() -> f32 {
    1.0
}

impl From<&ChainOpConfig> for Transform {
    fn from(op: &ChainOpConfig) -> Self {
        match op {
            ChainOpConfig::Lata {
                scheme,
                sigma,
                residual_weight,
                degenerate,
            } => Transform::Lata {
                scheme: WeightScheme {
                    kind: *scheme,
                    sigma: *sigma,
                    residual_weight: *residual_weight,
                    degenerate: *degenerate,
                },
            },
            ChainOpConfig::Ties { k, scope } => Transform::Ties { k: *k, scope: *scope },
            ChainOpConfig::Dare { p, seed } => Transform::Dare { p: *p, seed: *seed },
        }
    }
}

/// One merge term: a delta source plus scaling coefficient and chain.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    #[serde(default)]
    pub finetuned: Option<String>,
    /// Precomputed delta stored as a checkpoint file; mutually exclusive
    /// with `finetuned`.
    #[serde(default)]
    pub delta: Option<String>,
    pub lambda: f32,
    #[serde(default)]
    pub chain: Vec<ChainOpConfig>,
}

/// Configuration for `merge` and `forget`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default)]
    pub pretrained: Option<String>,
    pub target: String,
    pub terms: Vec<TermConfig>,
    /// Optional; must agree with the subcommand when present.
    #[serde(default)]
    pub mode: Option<MergeMode>,
    #[serde(default)]
    pub layer_pattern: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub simultaneous: Option<bool>,
    #[serde(default)]
    pub output: Option<String>,
}

impl RecipeConfig {
    /// Resolve into an executable recipe. `mode` comes from the subcommand;
    /// `seed`/`output` flags override the config values.
    pub fn into_recipe(
        self,
        mode: MergeMode,
        seed_override: Option<u64>,
        output_override: Option<PathBuf>,
    ) -> Result<MergeRecipe, Error> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::Recipe(format!(
                    "config mode `{}` conflicts with the requested subcommand",
                    match m {
                        MergeMode::Learn => "learn",
                        MergeMode::Forget => "forget",
                    }
                )));
            }
        }
        let output = output_override
            .or_else(|| self.output.as_ref().map(PathBuf::from))
            .ok_or_else(|| Error::Recipe("no output path in config or --output".to_string()))?;
        let mut terms = Vec::with_capacity(self.terms.len());
        for (i, term) in self.terms.iter().enumerate() {
            let source = match (&term.finetuned, &term.delta) {
                (Some(p), None) => DeltaSource::Finetuned(PathBuf::from(p)),
                (None, Some(p)) => DeltaSource::Delta(PathBuf::from(p)),
                _ => {
                    return Err(Error::Recipe(format!(
                        "terms[{i}] must set exactly one of `finetuned` or `delta`"
                    )))
                }
            };
            terms.push(RecipeTerm {
                source,
                lambda: term.lambda,
                chain: term.chain.iter().map(Transform::from).collect(),
            });
        }
        Ok(MergeRecipe {
            target: PathBuf::from(&self.target),
            base: self.base.as_ref().map(PathBuf::from),
            pretrained: self.pretrained.as_ref().map(PathBuf::from),
            terms,
            mode,
            layer_pattern: self.layer_pattern.clone(),
            seed: seed_override.or(self.seed).unwrap_or(0),
            simultaneous: self.simultaneous,
            output,
        })
    }
}

/// Configuration for `analyze`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub base: String,
    pub pretrained: String,
    pub finetuned: String,
    #[serde(default)]
    pub layer_pattern: Option<String>,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default = "default_residual_weight")]
    pub residual_weight: f32,
    #[serde(default)]
    pub degenerate: DegeneratePolicy,
    /// Stem for the `<stem>.csv` / `<stem>.json` pair.
    #[serde(default)]
    pub output: Option<String>,
}

/// Configuration for `fixture`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub spec: FixtureSpec,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// Load and strictly validate a JSON config document, returning both the
/// typed value and the raw document for manifest embedding.
pub fn load_config<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(T, serde_json::Value), Error> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let typed: T = serde_json::from_slice(&bytes).map_err(|e| Error::InvalidParameter {
        name: format!("config {}", path.display()),
        reason: e.to_string(),
    })?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes).expect("parsed once already");
    Ok((typed, raw))
}
