//! Rank-R canonical polyadic model: `y_ijk ≈ Σ_r u_ir · s_jr · t_kr`.
//!
//! Loss per visited entry is `w·(y − ŷ)² + λ·Σ_r (u_ir² + s_jr² + t_kr²)`
//! with `w = 1` for known entries and `w = α` for synthetic ones. The
//! regularizer is charged once per visit, so heavily observed rows are pulled
//! toward zero harder than sparse ones.
//!
//! All sums over `r` run in ascending order so that every code path that
//! evaluates a prediction produces the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{PlftError, Result};
use crate::rng;
use crate::tensor_store::{Entry, Origin, TensorDims};

/// Cell cap for [`reconstruct_dense`].
pub const DEFAULT_DENSE_CAP: usize = 1_000_000;

/// Row-major `rows x rank` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, rank: usize) -> Self {
        Self {
            rows,
            rank,
            data: vec![0.0; rows * rank],
        }
    }

    pub fn from_vec(rows: usize, rank: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * rank {
            return Err(PlftError::LengthMismatch {
                left: data.len(),
                right: rows * rank,
            });
        }
        Ok(Self { rows, rank, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn get(&self, i: usize, r: usize) -> f64 {
        self.data[i * self.rank + r]
    }

    pub fn set(&mut self, i: usize, r: usize, value: f64) {
        self.data[i * self.rank + r] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn column(&self, r: usize) -> FactorMatrix {
        FactorMatrix {
            rows: self.rows,
            rank: 1,
            data: (0..self.rows).map(|i| self.get(i, r)).collect(),
        }
    }
}

/// The three latent factor matrices `U` (|I|×R), `S` (|J|×R), `T` (|K|×R).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrices {
    pub u: FactorMatrix,
    pub s: FactorMatrix,
    pub t: FactorMatrix,
}

/// Which factor matrix a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    U,
    S,
    T,
}

impl FactorMatrices {
    pub fn new(u: FactorMatrix, s: FactorMatrix, t: FactorMatrix) -> Result<Self> {
        if u.rank != s.rank || u.rank != t.rank {
            return Err(PlftError::InvalidConfig(format!(
                "factor ranks differ: {}, {}, {}",
                u.rank, s.rank, t.rank
            )));
        }
        if u.rank == 0 {
            return Err(PlftError::InvalidRank);
        }
        if [&u, &s, &t]
            .iter()
            .any(|m| m.data.iter().any(|x| !x.is_finite()))
        {
            return Err(PlftError::NonFinite("factor matrix"));
        }
        Ok(Self { u, s, t })
    }

    pub fn zeros(dims: TensorDims, rank: usize) -> Self {
        Self {
            u: FactorMatrix::zeros(dims.i_size, rank),
            s: FactorMatrix::zeros(dims.j_size, rank),
            t: FactorMatrix::zeros(dims.k_size, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.rank
    }

    pub fn dims(&self) -> TensorDims {
        TensorDims {
            i_size: self.u.rows,
            j_size: self.s.rows,
            k_size: self.t.rows,
        }
    }

    pub fn matrix(&self, mode: Mode) -> &FactorMatrix {
        match mode {
            Mode::U => &self.u,
            Mode::S => &self.s,
            Mode::T => &self.t,
        }
    }

    pub fn matrix_mut(&mut self, mode: Mode) -> &mut FactorMatrix {
        match mode {
            Mode::U => &mut self.u,
            Mode::S => &mut self.s,
            Mode::T => &mut self.t,
        }
    }

    /// Rank-one model holding only column `r`.
    pub fn column(&self, r: usize) -> FactorMatrices {
        FactorMatrices {
            u: self.u.column(r),
            s: self.s.column(r),
            t: self.t.column(r),
        }
    }

    pub fn predict(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.dims().check(i, j, k)?;
        Ok(self.predict_unchecked(i, j, k))
    }

    pub(crate) fn predict_unchecked(&self, i: usize, j: usize, k: usize) -> f64 {
        let (u, s, t) = (self.u.row(i), self.s.row(j), self.t.row(k));
        let mut acc = 0.0;
        for r in 0..u.len() {
            acc += u[r] * s[r] * t[r];
        }
        acc
    }

    pub(crate) fn row_sq_norm_sum(&self, i: usize, j: usize, k: usize) -> f64 {
        let (u, s, t) = (self.u.row(i), self.s.row(j), self.t.row(k));
        let mut acc = 0.0;
        for r in 0..u.len() {
            acc += u[r] * u[r] + s[r] * s[r] + t[r] * t[r];
        }
        acc
    }
}

/// Seeded factors with every element in `(0, 0.1]`.
pub fn init_factors(dims: TensorDims, rank: usize, seed: u64) -> Result<FactorMatrices> {
    if rank == 0 {
        return Err(PlftError::InvalidRank);
    }
    let mut rng = rng::seeded(seed, rng::SALT_INIT);
    let mut draw = |rows: usize| {
        let data = (0..rows * rank)
            // random() is in [0, 1), so 1 - x is in (0, 1]
            .map(|_| 0.1 * (1.0 - rng.random::<f64>()))
            .collect();
        FactorMatrix { rows, rank, data }
    };
    let u = draw(dims.i_size);
    let s = draw(dims.j_size);
    let t = draw(dims.k_size);
    Ok(FactorMatrices { u, s, t })
}

/// Dense `i_size x j_size x k_size` array, index `(i * J + j) * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub dims: TensorDims,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims.j_size + j) * self.dims.k_size + k]
    }
}

/// Materializes the full approximation. Intended for small oracle checks.
pub fn reconstruct_dense(factors: &FactorMatrices, cap: usize) -> Result<DenseTensor> {
    let dims = factors.dims();
    let cells = dims.cells();
    if cells > cap {
        return Err(PlftError::CapExceeded { cells, cap });
    }
    let mut data = Vec::with_capacity(cells);
    for i in 0..dims.i_size {
        for j in 0..dims.j_size {
            for k in 0..dims.k_size {
                data.push(factors.predict_unchecked(i, j, k));
            }
        }
    }
    Ok(DenseTensor { dims, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub lambda: f64,
    pub alpha: f64,
}

impl LossParams {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("alpha", alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PlftError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self { lambda, alpha })
    }

    pub fn weight(&self, origin: Origin) -> f64 {
        match origin {
            Origin::Known => 1.0,
            Origin::Synthetic => self.alpha,
        }
    }
}

/// Loss contributed by a single visited entry.
pub fn entry_loss(factors: &FactorMatrices, entry: &Entry, params: LossParams) -> Result<f64> {
    factors.dims().check(entry.i, entry.j, entry.k)?;
    Ok(weighted_entry_loss(
        factors,
        entry,
        params.weight(entry.origin),
        params.lambda,
    ))
}

fn weighted_entry_loss(factors: &FactorMatrices, e: &Entry, weight: f64, lambda: f64) -> f64 {
    let residual = e.value - factors.predict_unchecked(e.i, e.j, e.k);
    weight * residual * residual + lambda * factors.row_sq_norm_sum(e.i, e.j, e.k)
}

/// Total loss over known entries `Λ` (weight 1) and synthetic entries `Ω`
/// (weight α), each charged the λ term once.
pub fn loss(
    factors: &FactorMatrices,
    known: &[Entry],
    synthetic: &[Entry],
    params: LossParams,
) -> Result<f64> {
    let dims = factors.dims();
    let mut total = 0.0;
    for (set, weight) in [(known, 1.0), (synthetic, params.alpha)] {
        for e in set {
            dims.check(e.i, e.j, e.k)?;
            total += weighted_entry_loss(factors, e, weight, params.lambda);
        }
    }
    Ok(total)
}

/// Partial derivatives of one entry's loss w.r.t. `u_i·`, `s_j·` and `t_k·`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGradients {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl EntryGradients {
    pub fn get(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::U => &self.u,
            Mode::S => &self.s,
            Mode::T => &self.t,
        }
    }
}

pub fn entry_gradients(
    factors: &FactorMatrices,
    entry: &Entry,
    params: LossParams,
) -> Result<EntryGradients> {
    factors.dims().check(entry.i, entry.j, entry.k)?;
    let rank = factors.rank();
    let mut grads = EntryGradients {
        u: vec![0.0; rank],
        s: vec![0.0; rank],
        t: vec![0.0; rank],
    };
    for mode in [Mode::U, Mode::S, Mode::T] {
        let out = match mode {
            Mode::U => &mut grads.u,
            Mode::S => &mut grads.s,
            Mode::T => &mut grads.t,
        };
        mode_gradient(factors, entry, params, mode, out);
    }
    Ok(grads)
}

/// Gradient w.r.t. one factor row. Indices must already be validated.
///
/// `∂/∂u_ir = −2·w·ρ·s_jr·t_kr + 2·λ·u_ir` with `ρ = y − ŷ`; the other modes
/// follow by symmetry.
pub(crate) fn mode_gradient(
    factors: &FactorMatrices,
    e: &Entry,
    params: LossParams,
    mode: Mode,
    out: &mut [f64],
) {
    let weight = params.weight(e.origin);
    let residual = e.value - factors.predict_unchecked(e.i, e.j, e.k);
    let scale = -2.0 * weight * residual;
    let (u, s, t) = (factors.u.row(e.i), factors.s.row(e.j), factors.t.row(e.k));
    let (own, a, b) = match mode {
        Mode::U => (u, s, t),
        Mode::S => (s, u, t),
        Mode::T => (t, u, s),
    };
    for r in 0..out.len() {
        out[r] = scale * a[r] * b[r] + 2.0 * params.lambda * own[r];
    }
}

const FACTOR_MAGIC: &str = "PLFT-FACTORS";
const FACTOR_VERSION: &str = "v1";

/// Writes the `PLFT-FACTORS v1` text format: a header line, then the rows of
/// U, S and T, 17 significant digits per value.
pub fn write_factors(mut out: impl Write, factors: &FactorMatrices) -> std::io::Result<()> {
    let d = factors.dims();
    writeln!(
        out,
        "{FACTOR_MAGIC} {FACTOR_VERSION} {} {} {} {}",
        d.i_size,
        d.j_size,
        d.k_size,
        factors.rank()
    )?;
    for m in [&factors.u, &factors.s, &factors.t] {
        for i in 0..m.rows {
            let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    out.flush()
}

pub fn read_factors(reader: impl BufRead) -> Result<FactorMatrices> {
    let mut lines = reader.lines();
    let mut next_line = |what: &str| -> Result<String> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(PlftError::io("<factor input>", e)),
            None => Err(PlftError::FactorFormat(format!(
                "unexpected end of input reading {what}"
            ))),
        }
    };
    let header = next_line("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != FACTOR_MAGIC || fields[1] != FACTOR_VERSION {
        return Err(PlftError::FactorFormat(format!("bad header {header:?}")));
    }
    let mut sizes = [0usize; 4];
    for (slot, f) in sizes.iter_mut().zip(&fields[2..]) {
        *slot = f
            .parse()
            .map_err(|_| PlftError::FactorFormat(format!("bad size {f:?} in header")))?;
    }
    let dims = TensorDims::new(sizes[0], sizes[1], sizes[2])?;
    let rank = sizes[3];
    if rank == 0 {
        return Err(PlftError::InvalidRank);
    }

    let mut read_matrix = |rows: usize, name: &str| -> Result<FactorMatrix> {
        let mut data = Vec::with_capacity(rows * rank);
        for row in 0..rows {
            let line = next_line(name)?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    PlftError::FactorFormat(format!("{name} row {row}: bad value {tok:?}"))
                })?;
                data.push(v);
            }
            if data.len() - before != rank {
                return Err(PlftError::FactorFormat(format!(
                    "{name} row {row}: expected {rank} values, found {}",
                    data.len() - before
                )));
            }
        }
        Ok(FactorMatrix { rows, rank, data })
    };
    let u = read_matrix(dims.i_size, "U")?;
    let s = read_matrix(dims.j_size, "S")?;
    let t = read_matrix(dims.k_size, "T")?;
    FactorMatrices::new(u, s, t)
}

pub fn save_factors(path: impl AsRef<Path>, factors: &FactorMatrices) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PlftError::io(path, e))?;
    write_factors(BufWriter::new(file), factors).map_err(|e| PlftError::io(path, e))
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<FactorMatrices> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PlftError::io(path, e))?;
    read_factors(BufReader::new(file))
}
