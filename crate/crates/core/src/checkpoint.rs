//! Single-file tensor checkpoint container: reading, writing, and schema
//! compatibility.
//!
//! File layout, bit-exact:
//!
//! ```text
//! bytes [0, 8)      u64 little-endian header length H
//! bytes [8, 8+H)    UTF-8 JSON object: tensor name -> {"dtype", "shape", "data_offsets"},
//!                   plus an optional "__metadata__" string-to-string object
//! bytes [8+H, ...)  data section; offsets are relative to its start,
//!                   values little-endian, row-major
//! ```
//!
//! Writing is canonical: names are serialized in ascending order and data is
//! packed contiguously in that order with no padding, so write -> read ->
//! write reproduces the same bytes. Reading accepts any valid non-overlapping
//! layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Mismatch, MismatchKind, Result};

/// Hard cap on the JSON header, guarding against hostile length prefixes.
pub const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

const METADATA_KEY: &str = "__metadata__";

// ── Element types ───────────────────────────────────────────────────────────

/// Element data type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    /// Size of one element in bytes.
    pub const fn element_size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 | Self::BF16 => 2,
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(Self::F32),
            "F16" => Some(Self::F16),
            "BF16" => Some(Self::BF16),
            _ => None,
        }
    }

    pub const fn tag(self) -> &'static str {
        match self {
            Self::F32 => "F32",
            Self::F16 => "F16",
            Self::BF16 => "BF16",
        }
    }

    /// Decode the stored little-endian bytes to F32 values.
    ///
    /// Storage is verbatim; only arithmetic up-converts, so this is the single
    /// place 16-bit formats widen.
    pub fn decode_f32(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Self::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Self::F16 => bytes
                .chunks_exact(2)
                .map(|b| half::f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f32())
                .collect(),
            Self::BF16 => bytes
                .chunks_exact(2)
                .map(|b| half::bf16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f32())
                .collect(),
        }
    }

    /// Encode F32 values into this dtype, round-to-nearest-even for the
    /// 16-bit formats.
    pub fn encode_f32(self, values: &[f32]) -> Vec<u8> {
        match self {
            Self::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Self::F16 => values
                .iter()
                .flat_map(|v| half::f16::from_f32(*v).to_bits().to_le_bytes())
                .collect(),
            Self::BF16 => values
                .iter()
                .flat_map(|v| half::bf16::from_f32(*v).to_bits().to_le_bytes())
                .collect(),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Number of elements implied by a shape; the empty shape is a scalar.
pub fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, d| acc.checked_mul(*d))
}

// ── In-memory model ─────────────────────────────────────────────────────────

/// Descriptor of one stored tensor as it appears in a file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub data_offsets: (u64, u64),
}

/// One tensor's payload: dtype, shape, and raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    dtype: Dtype,
    shape: Vec<u64>,
    data: Vec<u8>,
}

impl TensorData {
    pub fn new(dtype: Dtype, shape: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        let count = element_count(&shape).ok_or_else(|| Error::MalformedHeader {
            reason: "shape element count overflows u64".into(),
        })?;
        let expected = count * dtype.element_size() as u64;
        if data.len() as u64 != expected {
            return Err(Error::LengthMismatch {
                tensor: String::new(),
                expected,
                got: data.len() as u64,
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Build a tensor from F32 values, stored in the requested dtype.
    pub fn from_f32(dtype: Dtype, shape: Vec<u64>, values: &[f32]) -> Result<Self> {
        Self::new(dtype, shape, dtype.encode_f32(values))
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn element_count(&self) -> u64 {
        element_count(&self.shape).expect("validated on construction")
    }

    /// Values widened to F32 (verbatim re-interpretation for F32 storage).
    pub fn to_f32(&self) -> Vec<f32> {
        self.dtype.decode_f32(&self.data)
    }
}

/// A full model's weights: ordered map of tensor name to payload plus
/// optional string metadata. Iteration order is ascending by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorData>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::ReservedName { name });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData)> {
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

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    /// Hex digest identifying the schema (names and shapes), used as the
    /// model-family tag carried on derived deltas.
    pub fn family_id(&self) -> String {
        schema_family_id(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }
}

pub(crate) fn schema_family_id<'a>(
    entries: impl Iterator<Item = (&'a str, &'a [u64])>,
) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    for (name, shape) in entries {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in shape {
            hasher.update(d.to_le_bytes());
        }
        hasher.update(*b"\n");
    }
    hex::encode(&hasher.finalize()[..16])
}

// ── Compatibility ───────────────────────────────────────────────────────────

/// Outcome of a schema comparison between two checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

/// Compare two checkpoints' schemas name by name. Total: never fails.
pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    let mut mismatches = Vec::new();
    for (name, ta) in a.iter() {
        match b.get(name) {
            None => mismatches.push(Mismatch {
                name: name.clone(),
                reason: MismatchKind::MissingInB,
            }),
            Some(tb) => {
                if ta.shape() != tb.shape() {
                    mismatches.push(Mismatch {
                        name: name.clone(),
                        reason: MismatchKind::Shape,
                    });
                } else if ta.dtype() != tb.dtype() {
                    mismatches.push(Mismatch {
                        name: name.clone(),
                        reason: MismatchKind::Dtype,
                    });
                }
            }
        }
    }
    for (name, _) in b.iter() {
        if a.get(name).is_none() {
            mismatches.push(Mismatch {
                name: name.clone(),
                reason: MismatchKind::MissingInA,
            });
        }
    }
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
    }
}

pub(crate) fn compat_error(context: &str, report: CompatReport) -> Error {
    let first = report
        .mismatches
        .first()
        .map(|m| format!("`{}` ({})", m.name, m.reason))
        .unwrap_or_default();
    Error::SchemaMismatch {
        context: context.to_string(),
        first,
        mismatches: report.mismatches,
    }
}

// ── Header serialization ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: (u64, u64),
}

/// Raw header entries in file order, duplicate keys rejected.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A>(self, mut map: A) -> std::result::Result<RawHeader, A::Error>
            where
                A: serde::de::MapAccess<'de>,
            {
                let mut entries: Vec<(String, serde_json::Value)> = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, serde_json::Value>()? {
                    if entries.iter().any(|(k, _)| *k == key) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate tensor name `{key}`"
                        )));
                    }
                    entries.push((key, value));
                }
                Ok(RawHeader(entries))
            }
        }
        deserializer.deserialize_map(Visitor)
    }
}

fn encode_header(ckpt: &Checkpoint) -> Result<(Vec<u8>, Vec<TensorSpec>)> {
    let mut fields: Vec<String> = Vec::with_capacity(ckpt.len() + 1);
    if let Some(meta) = ckpt.metadata() {
        let key = serde_json::to_string(METADATA_KEY).expect("string");
        let value = serde_json::to_string(meta).expect("string map");
        fields.push(format!("{key}:{value}"));
    }
    let mut specs = Vec::with_capacity(ckpt.len());
    let mut cursor: u64 = 0;
    for (name, tensor) in ckpt.iter() {
        let len = tensor.data().len() as u64;
        let offsets = (cursor, cursor + len);
        cursor += len;
        let entry = HeaderEntry {
            dtype: tensor.dtype().tag().to_string(),
            shape: tensor.shape().to_vec(),
            data_offsets: offsets,
        };
        let key = serde_json::to_string(name).expect("string");
        let value = serde_json::to_string(&entry).expect("plain struct");
        fields.push(format!("{key}:{value}"));
        specs.push(TensorSpec {
            name: name.clone(),
            dtype: tensor.dtype(),
            shape: tensor.shape().to_vec(),
            data_offsets: offsets,
        });
    }
    let header = format!("{{{}}}", fields.join(","));
    Ok((header.into_bytes(), specs))
}

type ParsedHeader = (Vec<TensorSpec>, Option<BTreeMap<String, String>>);

fn parse_specs(header: &[u8]) -> Result<ParsedHeader> {
    let raw: RawHeader =
        serde_json::from_slice(header).map_err(|e| Error::MalformedHeader {
            reason: e.to_string(),
        })?;
    let mut metadata = None;
    let mut specs = Vec::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> =
                serde_json::from_value(value).map_err(|e| Error::MalformedHeader {
                    reason: format!("__metadata__ must map strings to strings: {e}"),
                })?;
            metadata = Some(map);
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| Error::MalformedHeader {
                reason: format!("tensor `{name}`: {e}"),
            })?;
        let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| Error::UnknownDtype {
            tensor: name.clone(),
            tag: entry.dtype.clone(),
        })?;
        let count = element_count(&entry.shape).ok_or_else(|| Error::MalformedHeader {
            reason: format!("tensor `{name}`: shape element count overflows u64"),
        })?;
        let expected = count
            .checked_mul(dtype.element_size() as u64)
            .ok_or_else(|| Error::MalformedHeader {
                reason: format!("tensor `{name}`: byte length overflows u64"),
            })?;
        let (begin, end) = entry.data_offsets;
        if end < begin || end - begin != expected {
            return Err(Error::OffsetMismatch {
                tensor: name,
                begin,
                end,
                expected,
            });
        }
        specs.push(TensorSpec {
            name,
            dtype,
            shape: entry.shape,
            data_offsets: (begin, end),
        });
    }
    Ok((specs, metadata))
}

fn check_bounds_and_overlap(specs: &[TensorSpec], data_len: u64, data_base: u64) -> Result<()> {
    for spec in specs {
        let (_, end) = spec.data_offsets;
        if end > data_len {
            return Err(Error::Truncated {
                tensor: spec.name.clone(),
                end_position: data_base + end,
                available: data_len,
            });
        }
    }
    // Zero-length tensors occupy no bytes and cannot overlap anything.
    let mut occupied: Vec<&TensorSpec> = specs
        .iter()
        .filter(|s| s.data_offsets.0 < s.data_offsets.1)
        .collect();
    occupied.sort_by_key(|s| s.data_offsets);
    for pair in occupied.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.data_offsets.1 > b.data_offsets.0 {
            return Err(Error::OffsetOverlap {
                first: a.name.clone(),
                second: b.name.clone(),
                position: b.data_offsets.0,
            });
        }
    }
    Ok(())
}

// ── File I/O ────────────────────────────────────────────────────────────────

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize a checkpoint to its canonical byte form.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (header, specs) = encode_header(ckpt)?;
    let data_len: u64 = specs.iter().map(|s| s.data_offsets.1 - s.data_offsets.0).sum();
    let mut out = Vec::with_capacity(8 + header.len() + data_len as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, tensor) in ckpt.iter() {
        out.extend_from_slice(tensor.data());
    }
    Ok(out)
}

/// Parse a checkpoint from container bytes, validating offsets and lengths.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader {
            reason: format!("file holds {} bytes; 8-byte length prefix required", bytes.len()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::HeaderTooLarge {
            size: header_len,
            max: MAX_HEADER_BYTES,
        });
    }
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len() as u64)
        .ok_or_else(|| Error::MalformedHeader {
            reason: format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        })?;
    let header = &bytes[8..header_end as usize];
    let data = &bytes[header_end as usize..];
    let (specs, metadata) = parse_specs(header)?;
    check_bounds_and_overlap(&specs, data.len() as u64, header_end)?;

    let mut ckpt = Checkpoint::new();
    ckpt.set_metadata(metadata);
    for spec in specs {
        let (begin, end) = spec.data_offsets;
        let tensor = TensorData::new(
            spec.dtype,
            spec.shape,
            data[begin as usize..end as usize].to_vec(),
        )
        .map_err(|e| match e {
            Error::LengthMismatch { expected, got, .. } => Error::LengthMismatch {
                tensor: spec.name.clone(),
                expected,
                got,
            },
            other => other,
        })?;
        ckpt.insert(spec.name, tensor)?;
    }
    Ok(ckpt)
}

/// Read a checkpoint file, rejecting overlapping or out-of-bounds offsets.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

/// Write a checkpoint in canonical form: names ascending, data packed
/// contiguously with no padding.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Header summary of a file without materializing tensor payloads, with
/// offsets exactly as stored.
#[derive(Debug, Serialize)]
pub struct HeaderSummary {
    pub metadata: Option<BTreeMap<String, String>>,
    pub tensors: Vec<TensorSpec>,
}

pub fn inspect_file(path: impl AsRef<Path>) -> Result<HeaderSummary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader {
            reason: format!("file holds {} bytes; 8-byte length prefix required", bytes.len()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::HeaderTooLarge {
            size: header_len,
            max: MAX_HEADER_BYTES,
        });
    }
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len() as u64)
        .ok_or_else(|| Error::MalformedHeader {
            reason: format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        })?;
    let (specs, metadata) = parse_specs(&bytes[8..header_end as usize])?;
    check_bounds_and_overlap(&specs, bytes.len() as u64 - header_end, header_end)?;
    Ok(HeaderSummary {
        metadata,
        tensors: specs,
    })
}
