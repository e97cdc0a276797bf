//! Joint state of a small register of six-level atoms.
//!
//! Every site carries six levels, always in this order:
//!
//! | index | level  | meaning                                   |
//! |-------|--------|-------------------------------------------|
//! | 0     | `Q0`   | clock state \|0> (F=3, mF=0)              |
//! | 1     | `Q1`   | clock state \|1> (F=4, mF=0)              |
//! | 2     | `L3`   | non-clock F=3 sublevels, lumped together  |
//! | 3     | `L4`   | non-clock F=4 sublevels, lumped together  |
//! | 4     | `Ryd`  | Rydberg state                             |
//! | 5     | `Lost` | no atom in the tweezer                    |
//!
//! Sites are little-endian: `|l_0 l_1 ... l_{n-1}>` sits at basis index
//! `sum_i l_i * 6^i`, so site 0 is the least significant digit. Densities are
//! stored row-major.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};

pub const LEVELS: usize = 6;
/// Largest register the dense engines accept.
pub const MAX_SITES: usize = 3;

const STATE_TOL: f64 = 1e-12;
const UNITARY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteLevel {
    Q0,
    Q1,
    L3,
    L4,
    Ryd,
    Lost,
}

impl SiteLevel {
    pub const ALL: [SiteLevel; LEVELS] = [
        SiteLevel::Q0,
        SiteLevel::Q1,
        SiteLevel::L3,
        SiteLevel::L4,
        SiteLevel::Ryd,
        SiteLevel::Lost,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SiteLevel> {
        Self::ALL.get(i).copied()
    }

    pub fn is_qubit(self) -> bool {
        matches!(self, SiteLevel::Q0 | SiteLevel::Q1)
    }

    pub fn is_hyperfine_leak(self) -> bool {
        matches!(self, SiteLevel::L3 | SiteLevel::L4)
    }

    pub fn label(self) -> &'static str {
        match self {
            SiteLevel::Q0 => "Q0",
            SiteLevel::Q1 => "Q1",
            SiteLevel::L3 => "L3",
            SiteLevel::L4 => "L4",
            SiteLevel::Ryd => "RYD",
            SiteLevel::Lost => "LOST",
        }
    }

    pub fn parse(s: &str) -> Option<SiteLevel> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.label().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteRole {
    Data,
    Ancilla,
    Reservoir,
}

impl SiteRole {
    pub fn label(self) -> &'static str {
        match self {
            SiteRole::Data => "data",
            SiteRole::Ancilla => "ancilla",
            SiteRole::Reservoir => "reservoir",
        }
    }

    pub fn parse(s: &str) -> Option<SiteRole> {
        match s {
            "data" => Some(SiteRole::Data),
            "ancilla" => Some(SiteRole::Ancilla),
            "reservoir" => Some(SiteRole::Reservoir),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pure,
    Density,
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Pure(Vec<C64>),
    Density(Vec<C64>),
}

/// Per-site level populations.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelProbabilities {
    pub sites: Vec<[f64; LEVELS]>,
}

impl LevelProbabilities {
    pub fn get(&self, site: usize, level: SiteLevel) -> f64 {
        self.sites[site][level.index()]
    }
}

/// Dense state of `n` atoms, either a ket or a density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterState {
    n: usize,
    roles: Vec<SiteRole>,
    repr: Repr,
}

pub fn dim_of(n: usize) -> usize {
    LEVELS.pow(n as u32)
}

/// Digit of `site` in the basis index `g`.
pub fn level_at(g: usize, site: usize) -> usize {
    (g / LEVELS.pow(site as u32)) % LEVELS
}

pub fn basis_index(levels: &[SiteLevel]) -> usize {
    levels
        .iter()
        .rev()
        .fold(0, |acc, l| acc * LEVELS + l.index())
}

/// Amplitudes `alpha|Q0> + beta|Q1>` for one site.
pub fn qubit_site(alpha: C64, beta: C64) -> [C64; LEVELS] {
    let mut v = [C64::new(0.0, 0.0); LEVELS];
    v[0] = alpha;
    v[1] = beta;
    v
}

pub fn level_site(level: SiteLevel) -> [C64; LEVELS] {
    let mut v = [C64::new(0.0, 0.0); LEVELS];
    v[level.index()] = C64::new(1.0, 0.0);
    v
}

fn default_roles(n: usize) -> Vec<SiteRole> {
    (0..n)
        .map(|i| if i == 0 { SiteRole::Data } else { SiteRole::Ancilla })
        .collect()
}

/// Index bookkeeping for applying a k-site operator inside an n-site register.
///
/// `offsets[j]` is the global index contribution of local basis state `j`
/// (first listed site least significant), `bases` enumerates the global
/// indices whose digits on the acted-on sites are all zero.
#[derive(Clone, Debug)]
pub(crate) struct LocalMap {
    pub offsets: Vec<usize>,
    pub bases: Vec<usize>,
}

impl LocalMap {
    pub fn new(n: usize, sites: &[usize]) -> LocalMap {
        let k = sites.len();
        let local_dim = dim_of(k);
        let offsets = (0..local_dim)
            .map(|j| {
                sites
                    .iter()
                    .enumerate()
                    .map(|(t, &s)| level_at(j, t) * LEVELS.pow(s as u32))
                    .sum()
            })
            .collect();
        let bases = (0..dim_of(n))
            .filter(|&g| sites.iter().all(|&s| level_at(g, s) == 0))
            .collect();
        LocalMap { offsets, bases }
    }

    /// In-place `v <- m v` on the strided view `data[start + g * stride]`.
    pub fn apply(&self, data: &mut [C64], start: usize, stride: usize, m: &DMatrix<C64>, conj: bool) {
        let d = self.offsets.len();
        let mut inp = vec![C64::new(0.0, 0.0); d];
        for &b in &self.bases {
            for (j, &off) in self.offsets.iter().enumerate() {
                inp[j] = data[start + (b + off) * stride];
            }
            for (r, &off) in self.offsets.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for (c, x) in inp.iter().enumerate() {
                    let e = m[(r, c)];
                    if e.re != 0.0 || e.im != 0.0 {
                        acc += if conj { e.conj() } else { e } * x;
                    }
                }
                data[start + (b + off) * stride] = acc;
            }
        }
    }
}

pub fn check_sites(n: usize, sites: &[usize]) -> Result<()> {
    for (i, &s) in sites.iter().enumerate() {
        if s >= n {
            return Err(LduError::SiteOutOfRange { site: s, n });
        }
        if sites[..i].contains(&s) {
            return Err(LduError::RepeatedSite(s));
        }
    }
    Ok(())
}

pub fn unitarity_deviation(u: &DMatrix<C64>) -> f64 {
    let prod = u.adjoint() * u;
    let id = DMatrix::<C64>::identity(u.nrows(), u.ncols());
    (prod - id).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn new_register(levels: &[SiteLevel], mode: Mode) -> Result<RegisterState> {
    let sites: Vec<[C64; LEVELS]> = levels.iter().map(|&l| level_site(l)).collect();
    RegisterState::from_site_states(&sites, mode)
}

impl RegisterState {
    /// Product state from per-site amplitude vectors (each normalized here).
    pub fn from_site_states(sites: &[[C64; LEVELS]], mode: Mode) -> Result<RegisterState> {
        let n = sites.len();
        if n == 0 {
            return Err(LduError::EmptyRegister);
        }
        if n > MAX_SITES {
            return Err(LduError::TooManySites(n));
        }
        let mut psi = vec![C64::new(1.0, 0.0)];
        for site in sites.iter() {
            let norm = site.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(LduError::InvalidParameter("zero site amplitude vector".into()));
            }
            let mut next = vec![C64::new(0.0, 0.0); psi.len() * LEVELS];
            for (l, a) in site.iter().enumerate() {
                for (g, p) in psi.iter().enumerate() {
                    next[l * psi.len() + g] = p * a / norm;
                }
            }
            psi = next;
        }
        let state = RegisterState { n, roles: default_roles(n), repr: Repr::Pure(psi) };
        Ok(match mode {
            Mode::Pure => state,
            Mode::Density => state.to_density(),
        })
    }

    pub fn from_amplitudes(n: usize, amps: Vec<C64>) -> Result<RegisterState> {
        if n == 0 {
            return Err(LduError::EmptyRegister);
        }
        if amps.len() != dim_of(n) {
            return Err(LduError::DimensionMismatch { expected: dim_of(n), got: amps.len() });
        }
        Ok(RegisterState { n, roles: default_roles(n), repr: Repr::Pure(amps) })
    }

    /// Density state from a row-major matrix; no validation beyond shape.
    pub fn from_density(n: usize, rho: Vec<C64>) -> Result<RegisterState> {
        if n == 0 {
            return Err(LduError::EmptyRegister);
        }
        let d = dim_of(n);
        if rho.len() != d * d {
            return Err(LduError::DimensionMismatch { expected: d * d, got: rho.len() });
        }
        Ok(RegisterState { n, roles: default_roles(n), repr: Repr::Density(rho) })
    }

    pub fn with_roles(mut self, roles: &[SiteRole]) -> Result<RegisterState> {
        if roles.len() != self.n {
            return Err(LduError::DimensionMismatch { expected: self.n, got: roles.len() });
        }
        self.roles = roles.to_vec();
        Ok(self)
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        dim_of(self.n)
    }

    pub fn roles(&self) -> &[SiteRole] {
        &self.roles
    }

    pub fn mode(&self) -> Mode {
        match self.repr {
            Repr::Pure(_) => Mode::Pure,
            Repr::Density(_) => Mode::Density,
        }
    }

    pub fn amplitudes(&self) -> Option<&[C64]> {
        match &self.repr {
            Repr::Pure(v) => Some(v),
            Repr::Density(_) => None,
        }
    }

    pub fn density_matrix(&self) -> DMatrix<C64> {
        let d = self.dim();
        match &self.repr {
            Repr::Pure(v) => DMatrix::from_fn(d, d, |r, c| v[r] * v[c].conj()),
            Repr::Density(m) => DMatrix::from_row_slice(d, d, m),
        }
    }

    pub fn to_density(&self) -> RegisterState {
        match &self.repr {
            Repr::Density(_) => self.clone(),
            Repr::Pure(v) => {
                let d = v.len();
                let mut rho = vec![C64::new(0.0, 0.0); d * d];
                for r in 0..d {
                    if v[r].norm_sqr() == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        rho[r * d + c] = v[r] * v[c].conj();
                    }
                }
                RegisterState { n: self.n, roles: self.roles.clone(), repr: Repr::Density(rho) }
            }
        }
    }

    /// Squared norm (pure) or trace (density).
    pub fn weight(&self) -> f64 {
        match &self.repr {
            Repr::Pure(v) => v.iter().map(|a| a.norm_sqr()).sum(),
            Repr::Density(m) => {
                let d = self.dim();
                (0..d).map(|i| m[i * d + i].re).sum()
            }
        }
    }

    pub fn normalize(&mut self) {
        let w = self.weight();
        if w > 0.0 {
            match &mut self.repr {
                Repr::Pure(v) => {
                    let s = 1.0 / w.sqrt();
                    v.iter_mut().for_each(|a| *a *= s);
                }
                Repr::Density(m) => m.iter_mut().for_each(|a| *a /= w),
            }
        }
    }

    pub(crate) fn scale(&mut self, f: f64) {
        match &mut self.repr {
            Repr::Pure(v) => v.iter_mut().for_each(|a| *a *= f.sqrt()),
            Repr::Density(m) => m.iter_mut().for_each(|a| *a *= f),
        }
    }

    /// Adds another (unnormalized) density of the same shape.
    pub(crate) fn accumulate(&mut self, other: &RegisterState) {
        match (&mut self.repr, &other.repr) {
            (Repr::Density(a), Repr::Density(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            _ => panic!("accumulate requires two densities"),
        }
    }

    /// Checks the mode-specific invariants.
    pub fn validate(&self) -> Result<()> {
        match &self.repr {
            Repr::Pure(_) => {
                let w = self.weight();
                if (w - 1.0).abs() > STATE_TOL {
                    return Err(LduError::InvalidParameter(format!("norm {w} != 1")));
                }
            }
            Repr::Density(m) => {
                let d = self.dim();
                for r in 0..d {
                    for c in 0..r {
                        if (m[r * d + c] - m[c * d + r].conj()).norm() > STATE_TOL {
                            return Err(LduError::InvalidParameter("density not Hermitian".into()));
                        }
                    }
                }
                let tr = self.weight();
                if (tr - 1.0).abs() > STATE_TOL {
                    return Err(LduError::InvalidParameter(format!("trace {tr} != 1")));
                }
                let eig = self.density_matrix().symmetric_eigenvalues();
                if eig.iter().any(|&e| e < -1e-10) {
                    return Err(LduError::InvalidParameter("negative eigenvalue".into()));
                }
            }
        }
        Ok(())
    }

    /// Applies a unitary on the listed sites after checking it.
    pub fn apply_unitary(&mut self, u: &DMatrix<C64>, sites: &[usize]) -> Result<()> {
        check_sites(self.n, sites)?;
        let d = dim_of(sites.len());
        if u.nrows() != d || u.ncols() != d {
            return Err(LduError::DimensionMismatch { expected: d, got: u.nrows() });
        }
        let dev = unitarity_deviation(u);
        if dev > UNITARY_TOL {
            return Err(LduError::NotUnitary(dev));
        }
        self.apply_local(u, sites);
        Ok(())
    }

    /// `psi -> M psi` or `rho -> M rho M^dag` without any checks.
    pub(crate) fn apply_local(&mut self, m: &DMatrix<C64>, sites: &[usize]) {
        let map = LocalMap::new(self.n, sites);
        self.apply_mapped(m, &map);
    }

    pub(crate) fn apply_mapped(&mut self, m: &DMatrix<C64>, map: &LocalMap) {
        let d = self.dim();
        match &mut self.repr {
            Repr::Pure(v) => map.apply(v, 0, 1, m, false),
            Repr::Density(rho) => {
                for c in 0..d {
                    map.apply(rho, c, d, m, false);
                }
                for r in 0..d {
                    map.apply(rho, r * d, 1, m, true);
                }
            }
        }
    }

    /// Density mode: `rho -> sum_k K rho K^dag`.
    pub fn apply_kraus(&mut self, kraus: &[DMatrix<C64>], sites: &[usize]) -> Result<()> {
        check_sites(self.n, sites)?;
        if self.mode() != Mode::Density {
            return Err(LduError::ModeMismatch("density"));
        }
        let map = LocalMap::new(self.n, sites);
        self.apply_kraus_mapped(kraus, &map);
        Ok(())
    }

    pub(crate) fn apply_kraus_mapped(&mut self, kraus: &[DMatrix<C64>], map: &LocalMap) {
        let mut total: Option<RegisterState> = None;
        for k in kraus {
            let mut term = self.clone();
            term.apply_mapped(k, map);
            match &mut total {
                None => total = Some(term),
                Some(t) => t.accumulate(&term),
            }
        }
        if let Some(t) = total {
            *self = t;
        }
    }

    pub fn level_probabilities(&self) -> LevelProbabilities {
        let mut sites = vec![[0.0; LEVELS]; self.n];
        let d = self.dim();
        for g in 0..d {
            let p = match &self.repr {
                Repr::Pure(v) => v[g].norm_sqr(),
                Repr::Density(m) => m[g * d + g].re,
            };
            if p == 0.0 {
                continue;
            }
            for (s, probs) in sites.iter_mut().enumerate() {
                probs[level_at(g, s)] += p;
            }
        }
        LevelProbabilities { sites }
    }

    /// Zeroes every component whose level on `site` is not in `keep`;
    /// returns the weight that remains. No renormalization.
    pub(crate) fn project_site(&mut self, site: usize, keep: &[bool; LEVELS]) -> f64 {
        let d = self.dim();
        match &mut self.repr {
            Repr::Pure(v) => {
                for (g, a) in v.iter_mut().enumerate() {
                    if !keep[level_at(g, site)] {
                        *a = C64::new(0.0, 0.0);
                    }
                }
            }
            Repr::Density(m) => {
                for r in 0..d {
                    let kr = keep[level_at(r, site)];
                    for c in 0..d {
                        if !kr || !keep[level_at(c, site)] {
                            m[r * d + c] = C64::new(0.0, 0.0);
                        }
                    }
                }
            }
        }
        self.weight()
    }

    /// Reduced density over `keep` (in the listed order).
    pub fn partial_trace(&self, keep: &[usize]) -> Result<RegisterState> {
        check_sites(self.n, keep)?;
        if keep.is_empty() {
            return Err(LduError::EmptyRegister);
        }
        let rho = match &self.repr {
            Repr::Density(m) => m,
            Repr::Pure(_) => return Err(LduError::ModeMismatch("density")),
        };
        let d = self.dim();
        let kd = dim_of(keep.len());
        let traced: Vec<usize> = (0..self.n).filter(|s| !keep.contains(s)).collect();
        let kept_index =
            |g: usize| -> usize { keep.iter().rev().fold(0, |acc, &s| acc * LEVELS + level_at(g, s)) };
        let traced_key =
            |g: usize| -> usize { traced.iter().rev().fold(0, |acc, &s| acc * LEVELS + level_at(g, s)) };
        let mut out = vec![C64::new(0.0, 0.0); kd * kd];
        for r in 0..d {
            let (kr, tr) = (kept_index(r), traced_key(r));
            for c in 0..d {
                if traced_key(c) == tr {
                    out[kr * kd + kept_index(c)] += rho[r * d + c];
                }
            }
        }
        let roles = keep.iter().map(|&s| self.roles[s]).collect::<Vec<_>>();
        RegisterState::from_density(keep.len(), out)?.with_roles(&roles)
    }

    /// Product `self ⊗ other`; `self` keeps the low site indices.
    pub fn tensor(&self, other: &RegisterState) -> Result<RegisterState> {
        let n = self.n + other.n;
        if n > MAX_SITES {
            return Err(LduError::TooManySites(n));
        }
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        let (da, db) = (self.dim(), other.dim());
        match (&self.repr, &other.repr) {
            (Repr::Pure(a), Repr::Pure(b)) => {
                let mut v = vec![C64::new(0.0, 0.0); da * db];
                for (j, y) in b.iter().enumerate() {
                    for (i, x) in a.iter().enumerate() {
                        v[j * da + i] = x * y;
                    }
                }
                RegisterState::from_amplitudes(n, v)?.with_roles(&roles)
            }
            _ => {
                let (a, b) = (self.to_density(), other.to_density());
                let (ma, mb) = (a.raw_density(), b.raw_density());
                let d = da * db;
                let mut m = vec![C64::new(0.0, 0.0); d * d];
                for r in 0..d {
                    let (ra, rb) = (r % da, r / da);
                    for c in 0..d {
                        let (ca, cb) = (c % da, c / da);
                        m[r * d + c] = ma[ra * da + ca] * mb[rb * db + cb];
                    }
                }
                RegisterState::from_density(n, m)?.with_roles(&roles)
            }
        }
    }

    fn raw_density(&self) -> &[C64] {
        match &self.repr {
            Repr::Density(m) => m,
            Repr::Pure(_) => panic!("raw_density on pure state"),
        }
    }
}

/// Fidelity between two states of the same size.
///
/// Pure/pure is `|<a|b>|^2`, pure/density is `<a|rho|a>`, and two densities
/// use the Uhlmann form `(tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
pub fn state_fidelity(a: &RegisterState, b: &RegisterState) -> Result<f64> {
    if a.n != b.n {
        return Err(LduError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let d = a.dim();
    let f = match (&a.repr, &b.repr) {
        (Repr::Pure(x), Repr::Pure(y)) => {
            x.iter().zip(y).map(|(p, q)| p.conj() * q).sum::<C64>().norm_sqr()
        }
        (Repr::Pure(x), Repr::Density(m)) | (Repr::Density(m), Repr::Pure(x)) => {
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..d {
                if x[r].norm_sqr() == 0.0 {
                    continue;
                }
                for c in 0..d {
                    acc += x[r].conj() * m[r * d + c] * x[c];
                }
            }
            acc.re
        }
        (Repr::Density(_), Repr::Density(_)) => {
            let rho = a.density_matrix();
            let sigma = b.density_matrix();
            let sq = psd_sqrt(&rho);
            let inner = &sq * sigma * &sq;
            let inner = (&inner + inner.adjoint()) * C64::new(0.5, 0.0);
            let s: f64 = inner.symmetric_eigenvalues().iter().map(|&e| e.max(0.0).sqrt()).sum();
            s * s
        }
    };
    Ok(f.clamp(0.0, 1.0))
}

fn psd_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let d = m.nrows();
    let mut out = DMatrix::<C64>::zeros(d, d);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.adjoint()) * C64::new(s, 0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn basis_product_state() {
        let s = new_register(&[SiteLevel::Q0, SiteLevel::Q0], Mode::Pure).unwrap();
        let amps = s.amplitudes().unwrap();
        assert_eq!(amps.len(), 36);
        assert_eq!(amps[0], c(1.0, 0.0));
        assert!(amps[1..].iter().all(|a| a.norm() == 0.0));
    }

    #[test]
    fn density_projector_on_q1() {
        let s = new_register(&[SiteLevel::Q1], Mode::Density).unwrap();
        let m = s.density_matrix();
        for r in 0..6 {
            for col in 0..6 {
                let expect = if r == 1 && col == 1 { 1.0 } else { 0.0 };
                assert_eq!(m[(r, col)], c(expect, 0.0));
            }
        }
    }

    #[test]
    fn lost_is_an_ordinary_level() {
        let s = new_register(&[SiteLevel::Lost, SiteLevel::Q0], Mode::Pure).unwrap();
        s.validate().unwrap();
        let idx = basis_index(&[SiteLevel::Lost, SiteLevel::Q0]);
        assert_eq!(idx, 5);
        assert_eq!(s.amplitudes().unwrap()[idx], c(1.0, 0.0));
    }

    #[test]
    fn empty_register_rejected() {
        assert!(matches!(new_register(&[], Mode::Pure), Err(LduError::EmptyRegister)));
    }

    #[test]
    fn little_endian_ordering() {
        assert_eq!(basis_index(&[SiteLevel::Q1, SiteLevel::Q0]), 1);
        assert_eq!(basis_index(&[SiteLevel::Q0, SiteLevel::Q1]), 6);
        assert_eq!(level_at(6, 1), 1);
        assert_eq!(level_at(6, 0), 0);
    }

    fn pauli_x6() -> DMatrix<C64> {
        let mut x = DMatrix::<C64>::identity(6, 6);
        x[(0, 0)] = c(0.0, 0.0);
        x[(1, 1)] = c(0.0, 0.0);
        x[(0, 1)] = c(1.0, 0.0);
        x[(1, 0)] = c(1.0, 0.0);
        x
    }

    #[test]
    fn identity_leaves_state_unchanged() {
        let mut s = RegisterState::from_site_states(
            &[qubit_site(c(0.6, 0.0), c(0.0, 0.8)), level_site(SiteLevel::L4)],
            Mode::Pure,
        )
        .unwrap();
        let before = s.clone();
        s.apply_unitary(&DMatrix::identity(36, 36), &[0, 1]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn pauli_x_flips_q0() {
        let mut s = new_register(&[SiteLevel::Q0], Mode::Pure).unwrap();
        s.apply_unitary(&pauli_x6(), &[0]).unwrap();
        assert_eq!(s.amplitudes().unwrap()[1], c(1.0, 0.0));
    }

    #[test]
    fn non_unitary_and_repeated_sites_rejected() {
        let mut s = new_register(&[SiteLevel::Q0, SiteLevel::Q0], Mode::Pure).unwrap();
        let m = DMatrix::<C64>::identity(6, 6) * c(2.0, 0.0);
        assert!(matches!(s.apply_unitary(&m, &[0]), Err(LduError::NotUnitary(_))));
        let u = DMatrix::<C64>::identity(36, 36);
        assert!(matches!(s.apply_unitary(&u, &[1, 1]), Err(LduError::RepeatedSite(1))));
    }

    #[test]
    fn plus_x_vs_zero_overlap() {
        let h = 1.0 / 2f64.sqrt();
        let a = RegisterState::from_site_states(&[qubit_site(c(h, 0.0), c(h, 0.0))], Mode::Pure).unwrap();
        let b = new_register(&[SiteLevel::Q0], Mode::Pure).unwrap();
        assert!(close(state_fidelity(&a, &b).unwrap(), 0.5, 1e-12));
        assert!(close(state_fidelity(&a.to_density(), &b).unwrap(), 0.5, 1e-12));
        assert!(close(state_fidelity(&a.to_density(), &b.to_density()).unwrap(), 0.5, 1e-9));
        assert!(close(state_fidelity(&a, &a).unwrap(), 1.0, 1e-12));
        let one = new_register(&[SiteLevel::Q1], Mode::Pure).unwrap();
        assert!(close(state_fidelity(&b, &one).unwrap(), 0.0, 1e-12));
    }

    #[test]
    fn equal_superposition_marginals() {
        let h = 1.0 / 2f64.sqrt();
        let s = RegisterState::from_site_states(&[qubit_site(c(h, 0.0), c(h, 0.0))], Mode::Pure).unwrap();
        let p = s.level_probabilities();
        assert!(close(p.get(0, SiteLevel::Q0), 0.5, 1e-12));
        assert!(close(p.get(0, SiteLevel::Q1), 0.5, 1e-12));
    }

    #[test]
    fn bell_marginal_is_maximally_mixed() {
        let h = 1.0 / 2f64.sqrt();
        let mut amps = vec![c(0.0, 0.0); 36];
        amps[basis_index(&[SiteLevel::Q0, SiteLevel::Q0])] = c(h, 0.0);
        amps[basis_index(&[SiteLevel::Q1, SiteLevel::Q1])] = c(h, 0.0);
        let s = RegisterState::from_amplitudes(2, amps).unwrap().to_density();
        let r = s.partial_trace(&[1]).unwrap().density_matrix();
        assert!(close(r[(0, 0)].re, 0.5, 1e-12));
        assert!(close(r[(1, 1)].re, 0.5, 1e-12));
        assert!(r[(0, 1)].norm() < 1e-12);
    }

    #[test]
    fn partial_trace_requires_density() {
        let s = new_register(&[SiteLevel::Q0, SiteLevel::Q1], Mode::Pure).unwrap();
        assert!(matches!(s.partial_trace(&[0]), Err(LduError::ModeMismatch(_))));
    }

    #[test]
    fn tensor_then_trace_recovers_factor() {
        let a = RegisterState::from_site_states(&[qubit_site(c(0.6, 0.0), c(0.0, 0.8))], Mode::Density).unwrap();
        let b = new_register(&[SiteLevel::L3], Mode::Density).unwrap();
        let ab = a.tensor(&b).unwrap();
        let back = ab.partial_trace(&[0]).unwrap();
        let diff = (back.density_matrix() - a.density_matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        let back_b = ab.partial_trace(&[1]).unwrap();
        let diff = (back_b.density_matrix() - b.density_matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn kraus_requires_density_mode() {
        let mut s = new_register(&[SiteLevel::Q0], Mode::Pure).unwrap();
        let k = vec![DMatrix::<C64>::identity(6, 6)];
        assert!(s.apply_kraus(&k, &[0]).is_err());
    }
}
