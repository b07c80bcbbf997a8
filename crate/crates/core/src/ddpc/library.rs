//! Excitation data and block-Hankel libraries.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_csv, write_atomic, write_csv};
use crate::linalg::{rank, RANK_TOL};
use crate::rng::{UniformStream, RNG_ALGORITHM};
use crate::systems::{simulate, KoopmanSystem};

/// Input and state samples with `z[k]` the state at which `u[k]` was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTrajectory {
    pub u: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

impl DataTrajectory {
    pub fn new(u: Vec<DVector<f64>>, z: Vec<DVector<f64>>) -> Result<Self> {
        if u.len() != z.len() {
            return Err(Error::dim("data trajectory length", u.len(), z.len()));
        }
        let first = |v: &[DVector<f64>]| v.first().map_or(0, |x| x.len());
        let (n_u, n_z) = (first(&u), first(&z));
        if u.iter().any(|x| x.len() != n_u) {
            return Err(Error::InvalidInput("ragged input samples".into()));
        }
        if z.iter().any(|x| x.len() != n_z) {
            return Err(Error::InvalidInput("ragged state samples".into()));
        }
        Ok(Self { u, z })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.u.first().map_or(0, |x| x.len())
    }

    pub fn n_z(&self) -> usize {
        self.z.first().map_or(0, |x| x.len())
    }
}

/// Uniform i.i.d. inputs per coordinate, then the plant response from `z1`.
pub fn collect_excitation(
    sys: &KoopmanSystem,
    z1: &DVector<f64>,
    length: usize,
    low: &DVector<f64>,
    high: &DVector<f64>,
    seed: u64,
) -> Result<DataTrajectory> {
    if length == 0 {
        return Err(Error::InvalidInput("data length must be at least 1".into()));
    }
    let n_u = sys.n_u();
    if low.len() != n_u || high.len() != n_u {
        return Err(Error::dim("input bounds", n_u, low.len().min(high.len())));
    }
    if low.iter().zip(high.iter()).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
        return Err(Error::InvalidInput("input bounds need low <= high".into()));
    }
    let mut rng = UniformStream::new(seed);
    let u: Vec<DVector<f64>> = (0..length)
        .map(|_| DVector::from_fn(n_u, |i, _| rng.uniform(low[i], high[i])))
        .collect();
    let mut z = simulate(sys, z1, &u)?;
    z.truncate(length);
    DataTrajectory::new(u, z)
}

/// `H_L(w)` for a vector signal: column `j` stacks `w_j, ..., w_{j+L-1}`.
pub fn hankel(w: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>> {
    if depth == 0 || w.len() < depth {
        return Err(Error::TooShort {
            required: depth.max(1),
            got: w.len(),
        });
    }
    let n = w[0].len();
    let cols = w.len() - depth + 1;
    Ok(DMatrix::from_fn(n * depth, cols, |row, j| w[j + row / n][row % n]))
}

/// `H_d = [H_L(u); H_L(z)]` with `L = T_ini + W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataLibrary {
    hd: DMatrix<f64>,
    t_ini: usize,
    window: usize,
    n_u: usize,
    n_z: usize,
    n_d: usize,
}

impl DataLibrary {
    pub fn build(data: &DataTrajectory, t_ini: usize, window: usize) -> Result<Self> {
        if t_ini == 0 || window == 0 {
            return Err(Error::InvalidInput("T_ini and W must be positive".into()));
        }
        let depth = t_ini + window;
        if data.len() < depth {
            return Err(Error::TooShort {
                required: depth,
                got: data.len(),
            });
        }
        let hu = hankel(&data.u, depth)?;
        let hz = hankel(&data.z, depth)?;
        let mut hd = DMatrix::zeros(hu.nrows() + hz.nrows(), hu.ncols());
        hd.rows_mut(0, hu.nrows()).copy_from(&hu);
        hd.rows_mut(hu.nrows(), hz.nrows()).copy_from(&hz);
        Ok(Self {
            hd,
            t_ini,
            window,
            n_u: data.n_u(),
            n_z: data.n_z(),
            n_d: data.len(),
        })
    }

    pub fn hd(&self) -> &DMatrix<f64> {
        &self.hd
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// `L = T_ini + W`.
    pub fn depth(&self) -> usize {
        self.t_ini + self.window
    }

    /// Number of columns `l = n_d - L + 1`.
    pub fn columns(&self) -> usize {
        self.hd.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn source_len(&self) -> usize {
        self.n_d
    }

    pub fn u_p(&self) -> DMatrix<f64> {
        self.hd.rows(0, self.n_u * self.t_ini).into_owned()
    }

    pub fn u_f(&self) -> DMatrix<f64> {
        self.hd.rows(self.n_u * self.t_ini, self.n_u * self.window).into_owned()
    }

    pub fn z_p(&self) -> DMatrix<f64> {
        self.hd.rows(self.n_u * self.depth(), self.n_z * self.t_ini).into_owned()
    }

    pub fn z_f(&self) -> DMatrix<f64> {
        self.hd
            .rows(self.n_u * self.depth() + self.n_z * self.t_ini, self.n_z * self.window)
            .into_owned()
    }

    /// Copy with the columns reordered; `perm[k]` is the source column of column `k`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let l = self.columns();
        let mut seen = vec![false; l];
        if perm.len() != l || perm.iter().any(|&j| j >= l || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::InvalidInput("not a column permutation".into()));
        }
        let mut out = self.clone();
        out.hd = self.hd.select_columns(perm);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcitationReport {
    pub rank: usize,
    pub required: usize,
    pub pass: bool,
}

/// Rank of the stacked window inputs over the lifted first state of each
/// window. Needs the true lifting, so this is a diagnostic only.
pub fn check_lifted_excitation(lib: &DataLibrary, sys: &KoopmanSystem) -> Result<ExcitationReport> {
    let n_x = sys.lifted_or_err()?.n_x();
    let nu_rows = lib.n_u * lib.depth();
    let l = lib.columns();
    let mut m = DMatrix::zeros(nu_rows + n_x, l);
    m.rows_mut(0, nu_rows).copy_from(&lib.hd.rows(0, nu_rows));
    for j in 0..l {
        let z = lib.hd.view((nu_rows, j), (lib.n_z, 1)).into_owned();
        let x = sys.lift(&DVector::from_column_slice(z.as_slice()))?;
        m.view_mut((nu_rows, j), (n_x, 1)).copy_from(&x);
    }
    let required = nu_rows + n_x;
    let rank = rank(&m, RANK_TOL);
    Ok(ExcitationReport {
        rank,
        required,
        pass: rank == required,
    })
}

/// Sidecar written next to `u_d.csv` and `z_d.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDescriptor {
    pub t_ini: usize,
    pub window: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub length: usize,
    pub source_seed: u64,
    pub rng: String,
}

impl DataDescriptor {
    pub fn new(data: &DataTrajectory, t_ini: usize, window: usize, seed: u64) -> Self {
        Self {
            t_ini,
            window,
            n_u: data.n_u(),
            n_z: data.n_z(),
            length: data.len(),
            source_seed: seed,
            rng: RNG_ALGORITHM.to_string(),
        }
    }
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

/// Write `u_d.csv`, `z_d.csv` and `descriptor.json` into `dir`.
pub fn save_data(dir: &Path, data: &DataTrajectory, desc: &DataDescriptor) -> Result<()> {
    write_csv(&dir.join("u_d.csv"), &columns("u", data.n_u()), &rows(&data.u))?;
    write_csv(&dir.join("z_d.csv"), &columns("z", data.n_z()), &rows(&data.z))?;
    let mut json = serde_json::to_string_pretty(desc)?;
    json.push('\n');
    write_atomic(&dir.join("descriptor.json"), json.as_bytes())
}

pub fn load_data(dir: &Path) -> Result<(DataTrajectory, DataDescriptor)> {
    let desc_path = dir.join("descriptor.json");
    if !desc_path.exists() {
        return Err(Error::MissingFile(desc_path));
    }
    let desc: DataDescriptor = serde_json::from_str(&std::fs::read_to_string(&desc_path)?)?;
    let (_, u) = read_csv(&dir.join("u_d.csv"))?;
    let (_, z) = read_csv(&dir.join("z_d.csv"))?;
    let to_vecs = |r: Vec<Vec<f64>>| r.into_iter().map(DVector::from_vec).collect::<Vec<_>>();
    let data = DataTrajectory::new(to_vecs(u), to_vecs(z))?;
    if data.len() != desc.length || data.n_u() != desc.n_u || data.n_z() != desc.n_z {
        return Err(Error::Config(format!(
            "{}: data files disagree with descriptor",
            dir.display()
        )));
    }
    Ok((data, desc))
}
