//! Sparse third-order tensor storage.
//!
//! A [`SparseTensor`] holds the present cells of an `|I| x |J| x |K|` tensor.
//! Every cell not stored is unknown. Present cells are either `Known` (read
//! from data) or `Synthetic` (generated by an earlier cascade layer); the
//! origin sticks to an entry for its whole life so that training can weight
//! the two kinds differently.
//!
//! The COO text format is one `i j k value` record per line, 0-based indices,
//! arbitrary whitespace, `#` comment lines. Dimensions are never inferred from
//! the data.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{PlftError, Result};
use crate::rng;

pub type Key = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorDims {
    pub i_size: usize,
    pub j_size: usize,
    pub k_size: usize,
}

impl TensorDims {
    pub fn new(i_size: usize, j_size: usize, k_size: usize) -> Result<Self> {
        if i_size == 0 || j_size == 0 || k_size == 0 {
            return Err(PlftError::InvalidDims(format!(
                "{i_size}x{j_size}x{k_size}: every size must be at least 1"
            )));
        }
        Ok(Self {
            i_size,
            j_size,
            k_size,
        })
    }

    /// Total number of cells, saturating on overflow.
    pub fn cells(&self) -> usize {
        self.i_size
            .saturating_mul(self.j_size)
            .saturating_mul(self.k_size)
    }

    pub fn check(&self, i: usize, j: usize, k: usize) -> Result<()> {
        if i >= self.i_size {
            return Err(PlftError::IndexOutOfRange {
                axis: "i",
                index: i,
                size: self.i_size,
            });
        }
        if j >= self.j_size {
            return Err(PlftError::IndexOutOfRange {
                axis: "j",
                index: j,
                size: self.j_size,
            });
        }
        if k >= self.k_size {
            return Err(PlftError::IndexOutOfRange {
                axis: "k",
                index: k,
                size: self.k_size,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for TensorDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.i_size, self.j_size, self.k_size)
    }
}

impl std::str::FromStr for TensorDims {
    type Err = PlftError;

    /// Parses `I,J,K`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(PlftError::InvalidDims(format!(
                "expected I,J,K but got {s:?}"
            )));
        }
        let mut sizes = [0usize; 3];
        for (slot, part) in sizes.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| PlftError::InvalidDims(format!("not a size: {part:?}")))?;
        }
        TensorDims::new(sizes[0], sizes[1], sizes[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Known,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
    pub origin: Origin,
}

impl Entry {
    pub fn known(i: usize, j: usize, k: usize, value: f64) -> Self {
        Self {
            i,
            j,
            k,
            value,
            origin: Origin::Known,
        }
    }

    pub fn synthetic(i: usize, j: usize, k: usize, value: f64) -> Self {
        Self {
            i,
            j,
            k,
            value,
            origin: Origin::Synthetic,
        }
    }

    pub fn key(&self) -> Key {
        (self.i, self.j, self.k)
    }

    pub fn is_synthetic(&self) -> bool {
        self.origin == Origin::Synthetic
    }
}

/// Sparse tensor with a per-`(k, i)` row index of present columns.
///
/// Entries keep their insertion order; everything that iterates over a tensor
/// (training shuffles, file output) starts from that order.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    dims: TensorDims,
    entries: Vec<Entry>,
    lookup: HashMap<Key, usize>,
    // rows[k * i_size + i] = sorted present columns j
    rows: Vec<Vec<usize>>,
}

impl PartialEq for SparseTensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.entries == other.entries
    }
}

impl SparseTensor {
    pub fn empty(dims: TensorDims) -> Self {
        Self {
            dims,
            entries: Vec::new(),
            lookup: HashMap::new(),
            rows: vec![Vec::new(); dims.i_size * dims.k_size],
        }
    }

    pub fn from_entries(
        dims: TensorDims,
        entries: impl IntoIterator<Item = Entry>,
    ) -> Result<Self> {
        let mut tensor = Self::empty(dims);
        for entry in entries {
            tensor.push(entry)?;
        }
        tensor.sort_rows();
        Ok(tensor)
    }

    // Row lists are left unsorted here; callers finish with `sort_rows`.
    fn push(&mut self, entry: Entry) -> Result<()> {
        self.dims.check(entry.i, entry.j, entry.k)?;
        if !entry.value.is_finite() {
            return Err(PlftError::NonFinite("entry value"));
        }
        let key = entry.key();
        if self.lookup.contains_key(&key) {
            return Err(match entry.origin {
                Origin::Known => PlftError::DuplicateKey {
                    i: entry.i,
                    j: entry.j,
                    k: entry.k,
                },
                Origin::Synthetic => PlftError::KeyCollision {
                    i: entry.i,
                    j: entry.j,
                    k: entry.k,
                },
            });
        }
        self.lookup.insert(key, self.entries.len());
        let row = self.row_slot(entry.k, entry.i);
        self.rows[row].push(entry.j);
        self.entries.push(entry);
        Ok(())
    }

    fn sort_rows(&mut self) {
        for row in &mut self.rows {
            row.sort_unstable();
        }
    }

    fn row_slot(&self, k: usize, i: usize) -> usize {
        k * self.dims.i_size + i
    }

    pub fn dims(&self) -> TensorDims {
        self.dims
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn known_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_synthetic()).count()
    }

    pub fn synthetic_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_synthetic()).count()
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        self.lookup.contains_key(&(i, j, k))
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<&Entry> {
        self.lookup.get(&(i, j, k)).map(|&idx| &self.entries[idx])
    }

    /// Ascending columns `j` present in row `i` of relation slice `k`.
    pub fn slice_row(&self, k: usize, i: usize) -> Result<&[usize]> {
        if k >= self.dims.k_size {
            return Err(PlftError::IndexOutOfRange {
                axis: "k",
                index: k,
                size: self.dims.k_size,
            });
        }
        if i >= self.dims.i_size {
            return Err(PlftError::IndexOutOfRange {
                axis: "i",
                index: i,
                size: self.dims.i_size,
            });
        }
        Ok(&self.rows[self.row_slot(k, i)])
    }

    /// Checks that the row index equals one rebuilt from scratch.
    pub fn row_index_consistent(&self) -> bool {
        let mut rebuilt = vec![Vec::new(); self.rows.len()];
        for e in &self.entries {
            rebuilt[self.row_slot(e.k, e.i)].push(e.j);
        }
        for row in &mut rebuilt {
            row.sort_unstable();
        }
        rebuilt == self.rows
    }

    /// Appends synthetic entries, producing the next layer's input tensor.
    pub fn merge_synthetic(&self, omega: &[Entry]) -> Result<SparseTensor> {
        let mut next = self.clone();
        for entry in omega {
            next.push(Entry {
                origin: Origin::Synthetic,
                ..*entry
            })?;
        }
        next.sort_rows();
        Ok(next)
    }

    /// `(y_min, y_max)` over Known entries only.
    pub fn value_bounds(&self) -> Result<(f64, f64)> {
        self.entries
            .iter()
            .filter(|e| !e.is_synthetic())
            .map(|e| e.value)
            .fold(None, |acc: Option<(f64, f64)>, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
            .ok_or(PlftError::EmptyTensor)
    }

    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.dims.cells() as f64
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.entries.iter().map(Entry::key)
    }
}

/// Parses COO text. Errors carry the 1-based line number.
pub fn parse_coo(reader: impl BufRead, dims: TensorDims) -> Result<SparseTensor> {
    let mut tensor = SparseTensor::empty(dims);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| PlftError::io("<coo input>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry = parse_coo_line(trimmed).map_err(|e| e.at_line(line_no))?;
        tensor.push(entry).map_err(|e| e.at_line(line_no))?;
    }
    tensor.sort_rows();
    Ok(tensor)
}

fn parse_coo_line(line: &str) -> Result<Entry> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 4 {
        return Err(PlftError::Malformed(format!(
            "expected 4 fields (i j k value), found {}",
            tokens.len()
        )));
    }
    let index = |name: &str, tok: &str| -> Result<usize> {
        tok.parse().map_err(|_| {
            PlftError::Malformed(format!("{name} is not a non-negative integer: {tok:?}"))
        })
    };
    let i = index("i", tokens[0])?;
    let j = index("j", tokens[1])?;
    let k = index("k", tokens[2])?;
    let value: f64 = tokens[3]
        .parse()
        .map_err(|_| PlftError::Malformed(format!("value is not a number: {:?}", tokens[3])))?;
    Ok(Entry::known(i, j, k, value))
}

pub fn load_coo(path: impl AsRef<Path>, dims: TensorDims) -> Result<SparseTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PlftError::io(path, e))?;
    parse_coo(BufReader::new(file), dims)
}

/// Writes entries in COO form; values use the shortest round-trip decimal.
pub fn write_coo<'a>(
    mut out: impl Write,
    entries: impl IntoIterator<Item = &'a Entry>,
) -> std::io::Result<()> {
    for e in entries {
        writeln!(out, "{} {} {} {}", e.i, e.j, e.k, e.value)?;
    }
    out.flush()
}

pub fn save_coo<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = &'a Entry>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PlftError::io(path, e))?;
    write_coo(BufWriter::new(file), entries).map_err(|e| PlftError::io(path, e))
}

/// Train / validation / test partition of a known set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: SparseTensor,
    pub validation: Vec<Entry>,
    pub test: Vec<Entry>,
}

impl DatasetSplit {
    /// Coordinates of validation and test cells.
    pub fn held_out_keys(&self) -> HashSet<Key> {
        self.validation
            .iter()
            .chain(&self.test)
            .map(Entry::key)
            .collect()
    }
}

/// Seeded shuffled split. Validation and test sizes are `floor(ratio * n)`;
/// the remainder goes to train. Each part keeps the source entry order.
pub fn split(tensor: &SparseTensor, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(PlftError::InvalidRatios(ratios));
    }
    let n = tensor.len();
    if n < 3 {
        return Err(PlftError::TooFewEntries {
            needed: 3,
            found: n,
        });
    }
    // The small epsilon keeps products like 0.1 * 10 from flooring to 0.
    let part = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_val = part(ratios[1]);
    let n_test = part(ratios[2]).min(n - n_val);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, rng::SALT_SPLIT));

    // 0 = train, 1 = validation, 2 = test
    let mut assignment = vec![0u8; n];
    for &idx in &order[..n_val] {
        assignment[idx] = 1;
    }
    for &idx in &order[n_val..n_val + n_test] {
        assignment[idx] = 2;
    }

    let mut train = Vec::with_capacity(n - n_val - n_test);
    let mut validation = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    for (entry, part) in tensor.entries().iter().zip(&assignment) {
        match part {
            0 => train.push(*entry),
            1 => validation.push(*entry),
            _ => test.push(*entry),
        }
    }
    Ok(DatasetSplit {
        train: SparseTensor::from_entries(tensor.dims(), train)?,
        validation,
        test,
    })
}
