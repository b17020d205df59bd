//! Grouping tensor names into ordered layer units plus a residual group.
//!
//! A "layer" is one transformer block: every tensor whose name carries the
//! same captured block index. Embeddings, final norms, output heads, and
//! anything else the pattern does not match land in the residual group,
//! which is excluded from similarity ranking.

use regex::Regex;

use crate::error::{Error, Result};
use crate::vector::DeltaVector;

/// Pattern extracting the block index from a tensor name.
///
/// The default captures the first integer following a path segment named
/// `layers` or `h`, e.g. `model.layers.12.mlp.w` -> 12.
#[derive(Debug, Clone)]
pub struct LayerPattern {
    regex: Regex,
    source: String,
}

pub const DEFAULT_LAYER_PATTERN: &str = r"(?:^|\.)(?:layers|h)\.([0-9]+)(?:\.|$)";

impl LayerPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let regex = Regex::new(pattern).map_err(|e| Error::InvalidPattern {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        if regex.captures_len() < 2 {
            return Err(Error::InvalidPattern {
                pattern: pattern.to_string(),
                reason: "pattern needs one capture group for the layer index".to_string(),
            });
        }
        Ok(Self {
            regex,
            source: pattern.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Layer index captured from a name, or None when the name belongs to
    /// the residual group.
    pub fn capture(&self, name: &str) -> Option<usize> {
        self.regex
            .captures(name)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<usize>().ok())
    }
}

impl Default for LayerPattern {
    fn default() -> Self {
        Self::new(DEFAULT_LAYER_PATTERN).expect("default pattern compiles")
    }
}

/// Assignment of tensor names to layers 0..L-1 plus the residual group.
/// Name lists are sorted ascending; every source name appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    layers: Vec<Vec<String>>,
    residual: Vec<String>,
}

impl LayerPartition {
    /// Number of layers L.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> Result<&[String]> {
        self.layers
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::LayerIndexOutOfRange {
                index: i,
                layers: self.layers.len(),
            })
    }

    pub fn layers(&self) -> &[Vec<String>] {
        &self.layers
    }

    pub fn residual(&self) -> &[String] {
        &self.residual
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .flatten()
            .chain(self.residual.iter())
            .map(String::as_str)
    }

    /// True when the partition was built from exactly this set of names.
    pub fn matches_names<'a>(&self, mut names: impl Iterator<Item = &'a str>) -> bool {
        let mut own: Vec<&str> = self.names().collect();
        own.sort_unstable();
        let mut count = 0usize;
        let all_found = names.all(|n| {
            count += 1;
            own.binary_search(&n).is_ok()
        });
        all_found && count == own.len()
    }
}

/// Group a schema's tensor names by captured layer index.
///
/// Indices must be contiguous from zero; unmatched names go to the residual
/// group. An all-residual schema yields L = 0, which downstream layerwise
/// operations reject.
pub fn partition<'a>(
    names: impl IntoIterator<Item = &'a str>,
    pattern: &LayerPattern,
) -> Result<LayerPartition> {
    let mut by_index: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    let mut residual = Vec::new();
    for name in names {
        match pattern.capture(name) {
            Some(i) => by_index.entry(i).or_default().push(name.to_string()),
            None => residual.push(name.to_string()),
        }
    }
    if let Some((&max, _)) = by_index.iter().next_back() {
        if by_index.len() != max + 1 {
            let missing = (0..=max).find(|i| !by_index.contains_key(i)).expect("gap exists");
            return Err(Error::NonContiguousLayers { missing, max });
        }
    }
    let mut layers: Vec<Vec<String>> = by_index.into_values().collect();
    for names in &mut layers {
        names.sort_unstable();
    }
    residual.sort_unstable();
    Ok(LayerPartition { layers, residual })
}

/// Flatten layer `i` of a delta: the layer's tensors in ascending-name
/// order, each row-major, as one F32 sequence.
pub fn layer_flatten(delta: &DeltaVector, part: &LayerPartition, i: usize) -> Result<Vec<f32>> {
    let names = part.layer(i)?;
    if !part.matches_names(delta.names()) {
        return Err(Error::Recipe(
            "delta schema does not match the partition's source schema".to_string(),
        ));
    }
    let mut out = Vec::new();
    for name in names {
        let tensor = delta.get(name).expect("partition names verified against delta");
        out.extend_from_slice(tensor.values());
    }
    Ok(out)
}
