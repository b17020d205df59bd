//! Checkpoint-level model merging built on weight-space arithmetic.
//!
//! The crate extracts weight-delta vectors between model checkpoints, scores
//! each transformer block's alignment with instruction-following via
//! layerwise cosine similarity, reweights blocks to form pure task vectors,
//! and performs additive (task learning) and subtractive (task forgetting)
//! merges alongside TIES trimming, DARE dropping, and their compositions.
//!
//! Modules follow the pipeline:
//!
//! - [`checkpoint`]: bit-exact container I/O and schema compatibility.
//! - [`partition`]: grouping tensor names into layer units.
//! - [`vector`]: delta extraction, combine/forget arithmetic, cosine
//!   profiles.
//! - [`weights`]: rank-based and threshold weighting into pure vectors.
//! - [`merge`]: TIES, DARE, recipes, and run manifests.
//! - [`fixture`]: planted-structure synthetic checkpoints.
//! - [`report`]: CSV/JSON similarity exports.

pub mod checkpoint;
pub mod error;
pub mod fixture;
pub mod merge;
pub mod partition;
pub mod report;
pub mod rng;
pub mod vector;
pub mod weights;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, inspect_file, read_checkpoint, validate_compat,
    write_checkpoint, Checkpoint, CompatReport, Dtype, TensorData, TensorSpec,
};
pub use error::{Error, Mismatch, MismatchKind, Result};
pub use fixture::{generate_fixture, write_fixture, FixtureSet, FixtureSpec};
pub use merge::{
    dare_drop, execute_recipe, run_recipe_to_files, ties_sign_merge, ties_trim, ties_trim_global,
    CheckpointResolver, DeltaSource, DropSpec, FsResolver, MergeMode, MergeRecipe, RecipeOutcome,
    RecipeTerm, RunManifest, Transform, TrimScope, TrimSpec,
};
pub use partition::{layer_flatten, partition, LayerPartition, LayerPattern};
pub use report::{analyze_checkpoints, build_report, AnalyzeParams, SimilarityReport};
pub use vector::{
    combine, delta_sum, diff, forget, similarity_profile, DeltaTensor, DeltaVector, Provenance,
    SimilarityProfile,
};
pub use weights::{
    apply_layer_weights, build_pure_vector, rank_layers, scheme_weights, weights_linear,
    weights_log, weights_threshold, DegeneratePolicy, PureVector, SchemeKind, WeightScheme,
};
