//! Portable binary checkpoint format.
//!
//! File layout:
//!
//! ```text
//! [u64 LE header length L][L bytes of JSON header][raw little-endian tensor data]
//! ```
//!
//! The header is a JSON object. The reserved key `__metadata__` holds a
//! string→string map; every other key is a tensor name mapped to
//! `{"dtype": "F32"|"F64", "shape": [..], "data_offsets": [begin, end]}` with
//! offsets relative to the start of the data section. Key order in the header
//! is the tensor order of the checkpoint.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reserved header key carrying the metadata map.
pub const METADATA_KEY: &str = "__metadata__";
/// Metadata key holding a JSON array of layer-group prefixes.
pub const LAYER_ORDER_KEY: &str = "layer_order";
/// Metadata key holding a decimal performance score.
pub const PERFORMANCE_KEY: &str = "performance";
/// Metadata key holding the model identifier.
pub const MODEL_ID_KEY: &str = "model_id";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header length {declared} exceeds available {available} bytes")]
    HeaderTooLarge { declared: u64, available: u64 },
    #[error("tensor `{tensor}`: data offsets [{begin}, {end}) out of bounds (data section is {len} bytes)")]
    OutOfBounds {
        tensor: String,
        begin: u64,
        end: u64,
        len: u64,
    },
    #[error("tensor `{first}` and tensor `{second}` have overlapping data ranges")]
    Overlap { first: String, second: String },
    #[error("tensor `{tensor}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor `{tensor}`: shape {shape:?} needs {expected} elements, found {found}")]
    ElementCount {
        tensor: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor name `{0}` is reserved")]
    ReservedName(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid layer_order: {0}")]
    LayerOrder(String),
    #[error("invalid metadata value for `{key}`: {value}")]
    Metadata { key: String, value: String },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("F32"),
            DType::F64 => f.write_str("F64"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `k` widened to f64.
    pub fn get_f64(&self, k: usize) -> f64 {
        match self {
            TensorData::F32(v) => f64::from(v[k]),
            TensorData::F64(v) => v[k],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Narrows (or keeps) f64 values into the requested storage dtype.
    pub fn from_f64(dtype: DType, values: Vec<f64>) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            DType::F64 => TensorData::F64(values),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        }
    }
}

/// Number of elements described by `shape`; the empty shape is a scalar.
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A named, shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        if name == METADATA_KEY {
            return Err(CheckpointError::ReservedName(name));
        }
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(CheckpointError::ElementCount {
                tensor: name,
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when `other` has the same dtype and shape.
    pub fn same_layout(&self, other: &TensorRecord) -> bool {
        self.dtype() == other.dtype() && self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Returns true when `name` belongs to the layer group `prefix`.
pub fn matches_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

/// An ordered set of named tensors with string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<TensorRecord>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<TensorRecord>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let ckpt = Self { tensors, metadata };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Checks name uniqueness and `layer_order` consistency.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if !seen.insert(t.name()) {
                return Err(CheckpointError::DuplicateName(t.name.clone()));
            }
        }
        if let Some(order) = self.layer_order()? {
            check_layer_order(&order, self.tensors.iter().map(|t| t.name()))?;
        }
        Ok(())
    }

    pub fn push(&mut self, tensor: TensorRecord) -> Result<()> {
        if self.get(tensor.name()).is_some() {
            return Err(CheckpointError::DuplicateName(tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn tensors(&self) -> &[TensorRecord] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(TensorRecord::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn remove_metadata(&mut self, key: &str) -> Option<String> {
        self.metadata.remove(key)
    }

    pub fn model_id(&self) -> Option<&str> {
        self.metadata.get(MODEL_ID_KEY).map(String::as_str)
    }

    /// Parsed `performance` score, if present.
    pub fn performance(&self) -> Result<Option<f64>> {
        match self.metadata.get(PERFORMANCE_KEY) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse::<f64>()
                .map(Some)
                .map_err(|_| CheckpointError::Metadata {
                    key: PERFORMANCE_KEY.into(),
                    value: v.clone(),
                }),
        }
    }

    /// Parsed `layer_order` list, if present.
    pub fn layer_order(&self) -> Result<Option<Vec<String>>> {
        match self.metadata.get(LAYER_ORDER_KEY) {
            None => Ok(None),
            Some(v) => serde_json::from_str::<Vec<String>>(v)
                .map(Some)
                .map_err(|e| CheckpointError::LayerOrder(format!("not a JSON string list: {e}"))),
        }
    }

    pub fn set_layer_order<S: AsRef<str>>(&mut self, prefixes: &[S]) {
        let list: Vec<&str> = prefixes.iter().map(AsRef::as_ref).collect();
        self.metadata.insert(
            LAYER_ORDER_KEY.into(),
            serde_json::to_string(&list).expect("string list serializes"),
        );
    }

    /// Encodes the checkpoint into the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let nbytes = (t.numel() * t.dtype().size_in_bytes()) as u64;
            entries.push(HeaderEntry {
                name: t.name.clone(),
                dtype: t.dtype().to_string(),
                shape: t.shape.clone(),
                offsets: [offset, offset + nbytes],
            });
            offset += nbytes;
        }
        let header = Header {
            metadata: self.metadata.clone(),
            entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            t.data.write_le(&mut out);
        }
        Ok(out)
    }

    /// Decodes a checkpoint from the on-disk byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data_start) = parse_header(bytes)?;
        let data = &bytes[data_start..];
        check_ranges(&header.entries, data.len() as u64)?;

        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let dtype = entry_dtype(&e)?;
            let [begin, end] = e.offsets;
            let payload = &data[begin as usize..end as usize];
            let tensor = TensorRecord::new(e.name, e.shape, TensorData::read_le(dtype, payload))?;
            tensors.push(tensor);
        }
        Checkpoint::new(tensors, header.metadata)
    }
}

/// Verifies that `order` partitions `names`: every prefix matches at least
/// one name and every name matches exactly one prefix.
pub(crate) fn check_layer_order<'a>(
    order: &[String],
    names: impl Iterator<Item = &'a str>,
) -> Result<()> {
    let mut hit = vec![false; order.len()];
    let mut unmatched = Vec::new();
    let mut ambiguous = Vec::new();
    for name in names {
        let matches: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, p)| matches_prefix(name, p))
            .map(|(i, _)| i)
            .collect();
        match matches.len() {
            0 => unmatched.push(name.to_string()),
            1 => hit[matches[0]] = true,
            _ => ambiguous.push(name.to_string()),
        }
    }
    let unused: Vec<&str> = order
        .iter()
        .zip(&hit)
        .filter(|(_, h)| !**h)
        .map(|(p, _)| p.as_str())
        .collect();
    if unmatched.is_empty() && ambiguous.is_empty() && unused.is_empty() {
        return Ok(());
    }
    let mut parts = Vec::new();
    if !unmatched.is_empty() {
        parts.push(format!("tensors matching no prefix: {}", unmatched.join(", ")));
    }
    if !ambiguous.is_empty() {
        parts.push(format!("tensors matching several prefixes: {}", ambiguous.join(", ")));
    }
    if !unused.is_empty() {
        parts.push(format!("prefixes matching no tensor: {}", unused.join(", ")));
    }
    Err(CheckpointError::LayerOrder(parts.join("; ")))
}

/// Writes `ckpt` to `path`. Nothing is created when validation or writing fails.
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes `bytes` through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub numel: usize,
}

/// Header-only view of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub tensors: Vec<TensorSummary>,
    pub parameter_count: usize,
    pub performance: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

/// Reads only the header of `path` and summarizes it.
pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut len_buf = [0u8; 8];
    if file_len < 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "file is {file_len} bytes, shorter than the 8-byte length prefix"
        )));
    }
    file.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len > file_len - 8 {
        return Err(CheckpointError::HeaderTooLarge {
            declared: header_len,
            available: file_len - 8,
        });
    }
    let mut header_buf = vec![0u8; header_len as usize];
    file.read_exact(&mut header_buf)?;
    let header = decode_header_json(&header_buf)?;
    check_ranges(&header.entries, file_len - 8 - header_len)?;

    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let dtype = entry_dtype(e)?;
        tensors.push(TensorSummary {
            name: e.name.clone(),
            dtype,
            shape: e.shape.clone(),
            numel: element_count(&e.shape),
        });
    }
    let ckpt_meta = Checkpoint {
        tensors: Vec::new(),
        metadata: header.metadata,
    };
    Ok(CheckpointSummary {
        parameter_count: tensors.iter().map(|t| t.numel).sum(),
        tensors,
        performance: ckpt_meta.performance()?,
        metadata: ckpt_meta.metadata,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryBody {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Debug, Clone)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offsets: [u64; 2],
}

#[derive(Debug, Clone)]
struct Header {
    metadata: BTreeMap<String, String>,
    entries: Vec<HeaderEntry>,
}

impl Serialize for Header {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len() + 1))?;
        map.serialize_entry(METADATA_KEY, &self.metadata)?;
        for e in &self.entries {
            map.serialize_entry(
                &e.name,
                &EntryBody {
                    dtype: e.dtype.clone(),
                    shape: e.shape.clone(),
                    data_offsets: e.offsets,
                },
            )?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a checkpoint header object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Header, A::Error> {
                use serde::de::Error;
                let mut metadata = None;
                let mut entries: Vec<HeaderEntry> = Vec::new();
                let mut seen = HashSet::new();
                while let Some(key) = access.next_key::<String>()? {
                    if key == METADATA_KEY {
                        if metadata.is_some() {
                            return Err(A::Error::custom("duplicate __metadata__ entry"));
                        }
                        metadata = Some(access.next_value::<BTreeMap<String, String>>()?);
                        continue;
                    }
                    if !seen.insert(key.clone()) {
                        return Err(A::Error::custom(format!("duplicate tensor name `{key}`")));
                    }
                    let body: EntryBody = access.next_value()?;
                    entries.push(HeaderEntry {
                        name: key,
                        dtype: body.dtype,
                        shape: body.shape,
                        offsets: body.data_offsets,
                    });
                }
                Ok(Header {
                    metadata: metadata.unwrap_or_default(),
                    entries,
                })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

fn decode_header_json(bytes: &[u8]) -> Result<Header> {
    serde_json::from_slice(bytes).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(CheckpointError::HeaderTooLarge {
            declared: header_len,
            available,
        });
    }
    let end = 8 + header_len as usize;
    Ok((decode_header_json(&bytes[8..end])?, end))
}

fn entry_dtype(e: &HeaderEntry) -> Result<DType> {
    DType::parse(&e.dtype).ok_or_else(|| CheckpointError::UnsupportedDtype {
        tensor: e.name.clone(),
        dtype: e.dtype.clone(),
    })
}

/// Validates dtypes, sizes, bounds and disjointness of every data range.
fn check_ranges(entries: &[HeaderEntry], data_len: u64) -> Result<()> {
    for e in entries {
        let dtype = entry_dtype(e)?;
        let [begin, end] = e.offsets;
        if begin > end || end > data_len {
            return Err(CheckpointError::OutOfBounds {
                tensor: e.name.clone(),
                begin,
                end,
                len: data_len,
            });
        }
        let expected = element_count(&e.shape);
        let found = ((end - begin) / dtype.size_in_bytes() as u64) as usize;
        if (end - begin) % dtype.size_in_bytes() as u64 != 0 || found != expected {
            return Err(CheckpointError::ElementCount {
                tensor: e.name.clone(),
                shape: e.shape.clone(),
                expected,
                found,
            });
        }
    }
    let mut ranges: Vec<(u64, u64, &str)> = entries
        .iter()
        .filter(|e| e.offsets[0] < e.offsets[1])
        .map(|e| (e.offsets[0], e.offsets[1], e.name.as_str()))
        .collect();
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::Overlap {
                first: w[0].2.to_string(),
                second: w[1].2.to_string(),
            });
        }
    }
    Ok(())
}
