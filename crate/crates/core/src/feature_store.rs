//! On-disk embedding matrices and the in-memory feature library.
//!
//! An embedding file holds one extractor's features for every image of a
//! dataset:
//!
//! ```text
//! "FSEB" | version: u32 LE (=1) | feature_dim: u32 LE | rows: u64 LE | rows*feature_dim f32 LE, row-major
//! ```
//!
//! Labels are not stored in the binary. They live in the dataset manifest
//! (JSON) so that every extractor of a dataset shares one label array.
//! Values are kept as `f32` in memory and widened to `f64` when gathered.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FSEB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// The nine ILSVRC2012-trained extractors and their pooled embedding widths.
pub const PAPER_EXTRACTORS: [(&str, usize); 9] = [
    ("DenseNet121", 1024),
    ("DenseNet161", 2208),
    ("DenseNet169", 1664),
    ("DenseNet201", 1920),
    ("ResNet18", 512),
    ("ResNet34", 512),
    ("ResNet50", 2048),
    ("ResNet101", 2048),
    ("ResNet152", 2048),
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"FSEB\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {version} at byte 4")]
    VersionUnsupported { version: u32 },
    #[error("truncated file: need {expected} bytes, have {actual} (short from byte offset {actual})")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("{extra} trailing bytes after payload ending at byte {expected}")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("zero feature_dim in header at byte 8")]
    ZeroDim,
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize, value: f32 },
    #[error("{labels} labels for {rows} rows")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("row {row} has label {label}, which is not in the class table")]
    UnknownClass { row: usize, label: u32 },
    #[error("extractor {name}: manifest declares dim {declared}, file has {actual}")]
    DimMismatch { name: String, declared: usize, actual: usize },
    #[error("member {name} has {actual} rows, expected {expected}")]
    RowCountMismatch { name: String, expected: usize, actual: usize },
    #[error("member {name} disagrees on the label of row {row}")]
    LabelOrderMismatch { name: String, row: usize },
    #[error("a library needs at least one embedding set")]
    EmptyLibrary,
    #[error("duplicate member name {0}")]
    DuplicateMember(String),
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("unknown member {0}")]
    UnknownMember(String),
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// One extractor's embeddings for every row of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    name: String,
    feature_dim: usize,
    rows: usize,
    data: Vec<f32>,
    labels: Vec<u32>,
}

impl EmbeddingSet {
    /// Builds a validated set from row-major data.
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        data: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let rows = data.len() / feature_dim;
        if rows * feature_dim != data.len() {
            return Err(StoreError::TruncatedFile {
                expected: ((rows + 1) * feature_dim * 4) as u64,
                actual: (data.len() * 4) as u64,
            });
        }
        check_finite(&data, feature_dim)?;
        if labels.len() != rows {
            return Err(StoreError::LabelCountMismatch {
                rows,
                labels: labels.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            feature_dim,
            rows,
            data,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.feature_dim..(index + 1) * self.feature_dim]
    }

    /// Same data under a different name.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..self.clone()
        }
    }
}

fn check_finite(data: &[f32], dim: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StoreError::NonFiniteValue {
            row: i / dim,
            col: i % dim,
            value: data[i],
        }),
        None => Ok(()),
    }
}

/// Raw contents of an embedding file, before labels are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub feature_dim: usize,
    pub rows: usize,
    pub data: Vec<f32>,
}

/// Serializes a matrix into the on-disk byte layout.
pub fn encode_embedding(feature_dim: usize, data: &[f32]) -> Vec<u8> {
    let rows = data.len() / feature_dim.max(1);
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses and validates the on-disk byte layout.
pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedFile {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionUnsupported { version });
    }
    let feature_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if feature_dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (rows as u128) * (feature_dim as u128) * 4 + HEADER_LEN as u128;
    let actual = bytes.len() as u128;
    if actual < expected {
        return Err(StoreError::TruncatedFile {
            expected: expected.min(u64::MAX as u128) as u64,
            actual: actual as u64,
        });
    }
    if actual > expected {
        return Err(StoreError::TrailingBytes {
            expected: expected as u64,
            extra: (actual - expected) as u64,
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(&data, feature_dim)?;
    Ok(EmbeddingMatrix {
        feature_dim,
        rows: rows as usize,
        data,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_embedding(&bytes)
}

/// Reads an embedding file and attaches the dataset's per-row labels.
pub fn load_embedding_set(
    path: impl AsRef<Path>,
    name: impl Into<String>,
    labels: Vec<u32>,
) -> Result<EmbeddingSet> {
    let matrix = read_embedding_file(path)?;
    if labels.len() != matrix.rows {
        return Err(StoreError::LabelCountMismatch {
            rows: matrix.rows,
            labels: labels.len(),
        });
    }
    EmbeddingSet::new(name, matrix.feature_dim, matrix.data, labels)
}

pub fn write_embedding_set(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding(set.feature_dim, &set.data)).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorEntry {
    pub name: String,
    pub file: String,
    pub dim: usize,
}

/// Dataset manifest: labels, class table and one entry per extractor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub rows: usize,
    pub labels: Vec<u32>,
    pub classes: Vec<ClassEntry>,
    pub extractors: Vec<ExtractorEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    fn check_labels(&self) -> Result<()> {
        if self.labels.len() != self.rows {
            return Err(StoreError::LabelCountMismatch {
                rows: self.rows,
                labels: self.labels.len(),
            });
        }
        let known: std::collections::BTreeSet<u32> = self.classes.iter().map(|c| c.id).collect();
        if let Some((row, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, l)| !known.contains(l))
        {
            return Err(StoreError::UnknownClass { row, label });
        }
        Ok(())
    }
}

/// Column block of one extractor inside the concatenated feature space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractorLayout {
    pub blocks: Vec<LayoutBlock>,
}

impl ExtractorLayout {
    pub fn total_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn block(&self, name: &str) -> Option<&LayoutBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Contiguous, non-overlapping, starting at zero.
    pub fn is_contiguous(&self) -> bool {
        let mut next = 0;
        for b in &self.blocks {
            if b.offset != next {
                return false;
            }
            next += b.len;
        }
        true
    }
}

/// All extractors of one dataset, sharing row order and labels.
#[derive(Debug, Clone)]
pub struct FeatureLibrary {
    dataset: String,
    members: Vec<EmbeddingSet>,
    class_index: BTreeMap<u32, Vec<usize>>,
    total_dim: usize,
}

/// Combines per-extractor sets into a library; member order fixes the layout.
pub fn assemble_library(
    dataset: impl Into<String>,
    sets: Vec<EmbeddingSet>,
) -> Result<(FeatureLibrary, ExtractorLayout)> {
    let first = sets.first().ok_or(StoreError::EmptyLibrary)?;
    let rows = first.rows;
    for set in &sets[1..] {
        if set.rows != rows {
            return Err(StoreError::RowCountMismatch {
                name: set.name.clone(),
                expected: rows,
                actual: set.rows,
            });
        }
        if let Some(row) = (0..rows).find(|&r| set.labels[r] != first.labels[r]) {
            return Err(StoreError::LabelOrderMismatch {
                name: set.name.clone(),
                row,
            });
        }
    }
    let mut blocks = Vec::with_capacity(sets.len());
    let mut offset = 0;
    for set in &sets {
        if blocks.iter().any(|b: &LayoutBlock| b.name == set.name) {
            return Err(StoreError::DuplicateMember(set.name.clone()));
        }
        blocks.push(LayoutBlock {
            name: set.name.clone(),
            offset,
            len: set.feature_dim,
        });
        offset += set.feature_dim;
    }
    let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (row, &label) in first.labels.iter().enumerate() {
        class_index.entry(label).or_default().push(row);
    }
    let library = FeatureLibrary {
        dataset: dataset.into(),
        members: sets,
        class_index,
        total_dim: offset,
    };
    Ok((library, ExtractorLayout { blocks }))
}

/// Loads every extractor listed in a manifest, paths relative to the manifest.
pub fn load_library(manifest_path: impl AsRef<Path>) -> Result<(FeatureLibrary, ExtractorLayout)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    manifest.check_labels()?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut sets = Vec::with_capacity(manifest.extractors.len());
    for entry in &manifest.extractors {
        let set = load_embedding_set(base.join(&entry.file), &entry.name, manifest.labels.clone())?;
        if set.feature_dim != entry.dim {
            return Err(StoreError::DimMismatch {
                name: entry.name.clone(),
                declared: entry.dim,
                actual: set.feature_dim,
            });
        }
        sets.push(set);
    }
    assemble_library(manifest.dataset, sets)
}

/// Writes a library as a manifest plus one `<name>.fseb` file per member.
pub fn save_library(
    library: &FeatureLibrary,
    class_names: &BTreeMap<u32, String>,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut extractors = Vec::new();
    for set in &library.members {
        let file = format!("{}.fseb", set.name);
        write_embedding_set(dir.join(&file), set)?;
        extractors.push(ExtractorEntry {
            name: set.name.clone(),
            file,
            dim: set.feature_dim,
        });
    }
    let manifest = Manifest {
        dataset: library.dataset.clone(),
        rows: library.rows(),
        labels: library.labels().to_vec(),
        classes: library
            .class_ids()
            .map(|id| ClassEntry {
                id,
                name: class_names
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{id}")),
            })
            .collect(),
        extractors,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

impl FeatureLibrary {
    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn members(&self) -> &[EmbeddingSet] {
        &self.members
    }

    pub fn rows(&self) -> usize {
        self.members[0].rows
    }

    pub fn labels(&self) -> &[u32] {
        &self.members[0].labels
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Sorted class ids.
    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.class_index.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Sorted row indices of a class.
    pub fn class_rows(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn member_index(&self, name: &str) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| StoreError::UnknownMember(name.to_string()))
    }

    /// Resolves member names to indices.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.member_index(n.as_ref())).collect()
    }

    pub fn all_members(&self) -> Vec<usize> {
        (0..self.members.len()).collect()
    }

    /// Width of the concatenation of the given members.
    pub fn width(&self, members: &[usize]) -> usize {
        members.iter().map(|&m| self.members[m].feature_dim).sum()
    }

    /// Horizontally concatenated features of `members` (in layout order) for
    /// the given rows. Duplicate rows are allowed.
    pub fn gather_rows(&self, rows: &[usize], members: &[usize]) -> Result<Array2<f64>> {
        let n = self.rows();
        if let Some(&index) = rows.iter().find(|&&r| r >= n) {
            return Err(StoreError::IndexOutOfRange { index, rows: n });
        }
        if let Some(&m) = members.iter().find(|&&m| m >= self.members.len()) {
            return Err(StoreError::UnknownMember(format!("#{m}")));
        }
        let mut ordered = members.to_vec();
        ordered.sort_unstable();
        ordered.dedup();
        let width = self.width(&ordered);
        let mut out = Array2::<f64>::zeros((rows.len(), width));
        for (i, &r) in rows.iter().enumerate() {
            let mut col = 0;
            let mut dst = out.row_mut(i);
            for &m in &ordered {
                for &v in self.members[m].row(r) {
                    dst[col] = f64::from(v);
                    col += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn summary(&self, layout: &ExtractorLayout) -> LibrarySummary {
        let sizes: Vec<usize> = self.class_index.values().map(Vec::len).collect();
        LibrarySummary {
            dataset: self.dataset.clone(),
            rows: self.rows(),
            classes: self.num_classes(),
            min_class_rows: sizes.iter().copied().min().unwrap_or(0),
            max_class_rows: sizes.iter().copied().max().unwrap_or(0),
            blocks: layout.blocks.clone(),
            total_dim: self.total_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LibrarySummary {
    pub dataset: String,
    pub rows: usize,
    pub classes: usize,
    pub min_class_rows: usize,
    pub max_class_rows: usize,
    pub blocks: Vec<LayoutBlock>,
    pub total_dim: usize,
}

impl fmt::Display for LibrarySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset   {}", self.dataset)?;
        writeln!(f, "rows      {}", self.rows)?;
        writeln!(
            f,
            "classes   {} ({}..={} rows per class)",
            self.classes, self.min_class_rows, self.max_class_rows
        )?;
        for b in &self.blocks {
            writeln!(f, "  {:<20} offset {:>6}  dim {:>5}", b.name, b.offset, b.len)?;
        }
        write!(f, "total_dim {}", self.total_dim)
    }
}
