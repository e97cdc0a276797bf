//! Native and canonical gates with their action on all six levels.
//!
//! Conventions: `R_phi(t) = exp(-i t/2 (cos(phi) X + sin(phi) Y))`,
//! `R_z(t) = diag(e^{-it/2}, e^{it/2})` and
//! `R_zz(t) = exp(-i t/2 Z⊗Z)`, all on the {Q0, Q1} block. Levels outside
//! the qubit block are untouched by single-site gates.
//!
//! A virtual Z only advances the site's entry in the [`PhaseFrame`]; every
//! later global pulse on that site is shifted to `phi - delta`. The logical
//! state is the physical one followed by `R_z(delta)` on each site
//! ([`PhaseFrame::materialize`]).

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};
use crate::qstate::{check_sites, dim_of, level_at, RegisterState, SiteLevel, SiteRole, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ZTarget {
    Site(usize),
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateOp {
    /// Equatorial rotation on every non-reservoir site.
    GlobalR { theta: f64, phi: f64 },
    VirtualZ { theta: f64, target: ZTarget },
    /// Physical light-shift Z rotation on one site.
    LocalZ { theta: f64, site: usize },
    /// Echoed `R_zz(theta)`; `phi` is the axis of the echo pulse.
    Entangle { theta: f64, a: usize, b: usize, phi: f64 },
    CanonicalCz { a: usize, b: usize },
    CanonicalH { site: usize },
    CanonicalX { site: usize },
    CanonicalCnot { control: usize, target: usize },
    /// Z on `site` when the reported outcome of `source` is ONE.
    FeedbackZ { site: usize, source: usize },
}

impl GateOp {
    pub fn sites(&self) -> Vec<usize> {
        match *self {
            GateOp::GlobalR { .. } => Vec::new(),
            GateOp::VirtualZ { target: ZTarget::Site(s), .. } => vec![s],
            GateOp::VirtualZ { target: ZTarget::Global, .. } => Vec::new(),
            GateOp::LocalZ { site, .. } => vec![site],
            GateOp::Entangle { a, b, .. } => vec![a, b],
            GateOp::CanonicalCz { a, b } => vec![a, b],
            GateOp::CanonicalH { site } | GateOp::CanonicalX { site } => vec![site],
            GateOp::CanonicalCnot { control, target } => vec![control, target],
            GateOp::FeedbackZ { site, source } => vec![site, source],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let params: &[f64] = match self {
            GateOp::GlobalR { theta, phi } | GateOp::Entangle { theta, phi, .. } => &[*theta, *phi],
            GateOp::VirtualZ { theta, .. } | GateOp::LocalZ { theta, .. } => &[*theta],
            _ => &[],
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LduError::InvalidParameter("gate angle is not finite".into()));
        }
        check_sites(n, &self.sites())
    }
}

/// Per-site phase offsets of the local oscillator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFrame {
    pub delta: Vec<f64>,
}

impl PhaseFrame {
    pub fn new(n: usize) -> PhaseFrame {
        PhaseFrame { delta: vec![0.0; n] }
    }

    pub fn advance(&mut self, target: ZTarget, theta: f64) {
        match target {
            ZTarget::Site(s) => self.delta[s] += theta,
            ZTarget::Global => self.delta.iter_mut().for_each(|d| *d += theta),
        }
    }

    /// Applies the deferred `R_z(delta_i)` so the state can be compared with
    /// a logical target.
    pub fn materialize(&self, state: &mut RegisterState) {
        for (s, &d) in self.delta.iter().enumerate() {
            if d != 0.0 {
                state.apply_local(&embed1(&rz(d)), &[s]);
            }
        }
    }
}

/// A matrix together with the sites it acts on (first site least significant).
#[derive(Clone, Debug)]
pub struct LocalOp {
    pub sites: Vec<usize>,
    pub matrix: DMatrix<C64>,
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn r_phi(theta: f64, phi: f64) -> Matrix2<C64> {
    let (s, co) = (theta / 2.0).sin_cos();
    Matrix2::new(
        c(co, 0.0),
        c(0.0, -s) * C64::from_polar(1.0, -phi),
        c(0.0, -s) * C64::from_polar(1.0, phi),
        c(co, 0.0),
    )
}

pub fn rz(theta: f64) -> Matrix2<C64> {
    Matrix2::new(
        C64::from_polar(1.0, -theta / 2.0),
        c(0.0, 0.0),
        c(0.0, 0.0),
        C64::from_polar(1.0, theta / 2.0),
    )
}

pub fn pauli(k: usize) -> Matrix2<C64> {
    let (o, z) = (c(1.0, 0.0), c(0.0, 0.0));
    match k {
        0 => Matrix2::new(o, z, z, o),
        1 => Matrix2::new(z, o, o, z),
        2 => Matrix2::new(z, c(0.0, -1.0), c(0.0, 1.0), z),
        3 => Matrix2::new(o, z, z, -o),
        _ => panic!("pauli index {k}"),
    }
}

fn hadamard() -> Matrix2<C64> {
    let h = 1.0 / 2f64.sqrt();
    Matrix2::new(c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0))
}

/// 6x6 operator acting as `m` on the qubit block and identity elsewhere.
pub fn embed1(m: &Matrix2<C64>) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::identity(LEVELS, LEVELS);
    for r in 0..2 {
        for col in 0..2 {
            out[(r, col)] = m[(r, col)];
        }
    }
    out
}

/// Swaps Q1 and RYD on one site (ideal excitation pulse).
pub fn rydberg_pi() -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::identity(LEVELS, LEVELS);
    let (q1, r) = (SiteLevel::Q1.index(), SiteLevel::Ryd.index());
    m[(q1, q1)] = c(0.0, 0.0);
    m[(r, r)] = c(0.0, 0.0);
    m[(q1, r)] = c(1.0, 0.0);
    m[(r, q1)] = c(1.0, 0.0);
    m
}

/// Builds a 36x36 pair operator from the action on qubit⊗qubit inputs, the
/// action on the qubit member when the partner is outside the block, and
/// identity when neither is a qubit.
fn pair_op(
    qq: impl Fn(usize, usize, usize, usize) -> C64,
    a_alone: &Matrix2<C64>,
    b_alone: &Matrix2<C64>,
) -> DMatrix<C64> {
    let d = LEVELS * LEVELS;
    let mut m = DMatrix::<C64>::zeros(d, d);
    for col in 0..d {
        let (la, lb) = (level_at(col, 0), level_at(col, 1));
        match (la < 2, lb < 2) {
            (true, true) => {
                for ra in 0..2 {
                    for rb in 0..2 {
                        m[(ra + LEVELS * rb, col)] = qq(ra, rb, la, lb);
                    }
                }
            }
            (true, false) => {
                for ra in 0..2 {
                    m[(ra + LEVELS * lb, col)] = a_alone[(ra, la)];
                }
            }
            (false, true) => {
                for rb in 0..2 {
                    m[(la + LEVELS * rb, col)] = b_alone[(rb, lb)];
                }
            }
            (false, false) => m[(col, col)] = c(1.0, 0.0),
        }
    }
    m
}

fn zz_phase(theta: f64, la: usize, lb: usize) -> C64 {
    let parity = if la == lb { 1.0 } else { -1.0 };
    C64::from_polar(1.0, -parity * theta / 2.0)
}

/// Pair matrix of the echoed entangler. `echo_a`/`echo_b` are the echo
/// pulses as seen by each site (frame already applied).
pub fn entangle_matrix(theta: f64, echo_a: &Matrix2<C64>, echo_b: &Matrix2<C64>) -> DMatrix<C64> {
    pair_op(
        |ra, rb, la, lb| zz_phase(theta, ra, rb) * echo_a[(ra, la)] * echo_b[(rb, lb)],
        echo_a,
        echo_b,
    )
}

/// Pair matrix for a qubit-block two-site gate given as a 4x4 function; the
/// lone qubit of a leaked pair sees identity.
fn canonical_pair(u: impl Fn(usize, usize, usize, usize) -> C64) -> DMatrix<C64> {
    let id = pauli(0);
    pair_op(u, &id, &id)
}

fn kron_sites(factors: &[DMatrix<C64>]) -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::identity(1, 1);
    for f in factors {
        m = f.kronecker(&m);
    }
    m
}

/// Commuting factors whose product is the gate; engines apply these one by
/// one. `VirtualZ` and `FeedbackZ` have no factors here.
pub fn gate_factors(gate: &GateOp, frame: &PhaseFrame, roles: &[SiteRole], eps_area: f64) -> Result<Vec<LocalOp>> {
    gate.check(roles.len())?;
    let one = |site: usize, m: Matrix2<C64>| LocalOp { sites: vec![site], matrix: embed1(&m) };
    Ok(match *gate {
        GateOp::GlobalR { theta, phi } => roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != SiteRole::Reservoir)
            .map(|(s, _)| one(s, r_phi(theta * (1.0 + eps_area), phi - frame.delta[s])))
            .collect(),
        GateOp::VirtualZ { .. } | GateOp::FeedbackZ { .. } => Vec::new(),
        GateOp::LocalZ { theta, site } => vec![one(site, rz(theta))],
        GateOp::Entangle { theta, a, b, phi } => {
            let echo = |s: usize| r_phi(PI * (1.0 + eps_area), phi - frame.delta[s]);
            vec![LocalOp { sites: vec![a, b], matrix: entangle_matrix(theta, &echo(a), &echo(b)) }]
        }
        GateOp::CanonicalCz { a, b } => vec![LocalOp {
            sites: vec![a, b],
            matrix: canonical_pair(|ra, rb, la, lb| {
                let on = ra == la && rb == lb;
                match (on, la == 1 && lb == 1) {
                    (false, _) => c(0.0, 0.0),
                    (true, true) => c(-1.0, 0.0),
                    (true, false) => c(1.0, 0.0),
                }
            }),
        }],
        GateOp::CanonicalCnot { control, target } => vec![LocalOp {
            sites: vec![control, target],
            matrix: canonical_pair(|rc, rt, lc, lt| {
                let expect_t = if lc == 1 { 1 - lt } else { lt };
                if rc == lc && rt == expect_t {
                    c(1.0, 0.0)
                } else {
                    c(0.0, 0.0)
                }
            }),
        }],
        GateOp::CanonicalH { site } => vec![one(site, hadamard())],
        GateOp::CanonicalX { site } => vec![one(site, pauli(1))],
    })
}

/// The gate as one unitary on the sites it touches (all non-reservoir sites
/// for `GlobalR`), together with those sites.
pub fn matrix_of(gate: &GateOp, frame: &PhaseFrame, roles: &[SiteRole], eps_area: f64) -> Result<LocalOp> {
    gate.check(roles.len())?;
    match *gate {
        GateOp::VirtualZ { target, .. } => {
            let sites = match target {
                ZTarget::Site(s) => vec![s],
                ZTarget::Global => (0..roles.len()).collect(),
            };
            let d = dim_of(sites.len());
            Ok(LocalOp { sites, matrix: DMatrix::identity(d, d) })
        }
        GateOp::FeedbackZ { site, .. } => Ok(LocalOp { sites: vec![site], matrix: embed1(&pauli(3)) }),
        _ => {
            let factors = gate_factors(gate, frame, roles, eps_area)?;
            let sites = factors.iter().flat_map(|f| f.sites.clone()).collect();
            let mats: Vec<DMatrix<C64>> = factors.into_iter().map(|f| f.matrix).collect();
            Ok(LocalOp { sites, matrix: kron_sites(&mats) })
        }
    }
}

/// Applies a gate under the current frame. `FeedbackZ` needs its classical
/// bit and is rejected here; see [`apply_feedback`].
pub fn apply_gate(state: &mut RegisterState, gate: &GateOp, frame: &mut PhaseFrame, eps_area: f64) -> Result<()> {
    if let GateOp::FeedbackZ { .. } = gate {
        return Err(LduError::InvalidParameter("feedback gate needs a classical bit".into()));
    }
    let factors = gate_factors(gate, frame, state.roles(), eps_area)?;
    if let GateOp::VirtualZ { theta, target } = *gate {
        frame.advance(target, theta);
    }
    for f in &factors {
        state.apply_local(&f.matrix, &f.sites);
    }
    Ok(())
}

pub fn apply_feedback(state: &mut RegisterState, site: usize, bit: bool) -> Result<()> {
    check_sites(state.n_sites(), &[site])?;
    if bit {
        state.apply_local(&embed1(&pauli(3)), &[site]);
    }
    Ok(())
}

/// Logical unitary of a gate list on the full register: the product of all
/// gates in order with the final phase frame folded in.
pub fn circuit_unitary(gates: &[GateOp], roles: &[SiteRole], eps_area: f64) -> Result<DMatrix<C64>> {
    let n = roles.len();
    let d = dim_of(n);
    let mut u = DMatrix::<C64>::identity(d, d);
    let mut frame = PhaseFrame::new(n);
    for g in gates {
        if let GateOp::FeedbackZ { .. } = g {
            return Err(LduError::NotUnitaryCircuit("feedback".into()));
        }
        for f in gate_factors(g, &frame, roles, eps_area)? {
            u = embed_full(&f, n) * u;
        }
        if let GateOp::VirtualZ { theta, target } = *g {
            frame.advance(target, theta);
        }
    }
    for (s, &delta) in frame.delta.iter().enumerate() {
        u = embed_full(&LocalOp { sites: vec![s], matrix: embed1(&rz(delta)) }, n) * u;
    }
    Ok(u)
}

/// Embeds a local operator into the full `6^n` space.
pub fn embed_full(op: &LocalOp, n: usize) -> DMatrix<C64> {
    let d = dim_of(n);
    let mut out = DMatrix::<C64>::zeros(d, d);
    let local = |g: usize| -> usize {
        op.sites.iter().rev().fold(0, |acc, &s| acc * LEVELS + level_at(g, s))
    };
    let rest = |g: usize| -> usize {
        (0..n).filter(|s| !op.sites.contains(s)).map(|s| level_at(g, s) * LEVELS.pow(s as u32)).sum()
    };
    for r in 0..d {
        for col in 0..d {
            if rest(r) == rest(col) {
                out[(r, col)] = op.matrix[(local(r), local(col))];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{new_register, qubit_site, state_fidelity, unitarity_deviation, Mode};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    const ROLES2: [SiteRole; 2] = [SiteRole::Data, SiteRole::Ancilla];

    fn max_dev(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Plain 4x4 arithmetic on the qubit block, independent of the 36x36
    /// embedding code.
    type M4 = [[C64; 4]; 4];

    fn mul4(a: &M4, b: &M4) -> M4 {
        let mut out = [[c(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    /// Index is `a + 2 b`, matching the little-endian site order.
    fn kron4(ma: &Matrix2<C64>, mb: &Matrix2<C64>) -> M4 {
        let mut out = [[c(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = ma[(i % 2, j % 2)] * mb[(i / 2, j / 2)];
            }
        }
        out
    }

    fn rzz4(theta: f64) -> M4 {
        let mut out = [[c(0.0, 0.0); 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            let z = (1.0 - 2.0 * (i % 2) as f64) * (1.0 - 2.0 * (i / 2) as f64);
            row[i] = C64::from_polar(1.0, -z * theta / 2.0);
        }
        out
    }

    fn qubit_block(m: &DMatrix<C64>) -> M4 {
        let idx = [0, 1, 6, 7];
        let mut out = [[c(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = m[(idx[i], idx[j])];
            }
        }
        out
    }

    fn dev4(a: &M4, b: &M4) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((a[i][j] - b[i][j]).norm());
            }
        }
        d
    }

    fn entangle(theta: f64, phi: f64) -> DMatrix<C64> {
        let g = GateOp::Entangle { theta, a: 0, b: 1, phi };
        matrix_of(&g, &PhaseFrame::new(2), &ROLES2, 0.0).unwrap().matrix
    }

    #[test]
    fn global_pi_on_q0() {
        let mut s = new_register(&[SiteLevel::Q0], Mode::Pure).unwrap();
        let mut f = PhaseFrame::new(1);
        apply_gate(&mut s, &GateOp::GlobalR { theta: PI, phi: 0.0 }, &mut f, 0.0).unwrap();
        let a = s.amplitudes().unwrap();
        assert!((a[1] - c(0.0, -1.0)).norm() < 1e-15);
        assert!(a[0].norm() < 1e-15);
    }

    #[test]
    fn entangle_matches_three_pulse_composite() {
        let ry = r_phi(PI, FRAC_PI_2);
        let composite = mul4(&rzz4(PI / 4.0), &mul4(&kron4(&ry, &ry), &rzz4(PI / 4.0)));
        let reduced = mul4(&rzz4(FRAC_PI_2), &kron4(&ry, &ry));
        let ours = qubit_block(&entangle(FRAC_PI_2, FRAC_PI_2));
        assert!(dev4(&ours, &composite) < 1e-12);
        assert!(dev4(&ours, &reduced) < 1e-12);
    }

    #[test]
    fn echo_only_when_partner_lost() {
        let mut s = new_register(&[SiteLevel::Q0, SiteLevel::Lost], Mode::Pure).unwrap();
        let mut f = PhaseFrame::new(2);
        let g = GateOp::Entangle { theta: FRAC_PI_2, a: 0, b: 1, phi: FRAC_PI_2 };
        apply_gate(&mut s, &g, &mut f, 0.0).unwrap();
        let target = new_register(&[SiteLevel::Q1, SiteLevel::Lost], Mode::Pure).unwrap();
        let amp = s.amplitudes().unwrap()[crate::qstate::basis_index(&[SiteLevel::Q1, SiteLevel::Lost])];
        assert!((amp - c(1.0, 0.0)).norm() < 1e-12);
        assert!((state_fidelity(&s, &target).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn virtual_z_shifts_later_axes() {
        let mut f = PhaseFrame::new(2);
        let mut s = new_register(&[SiteLevel::Q0, SiteLevel::Q0], Mode::Pure).unwrap();
        apply_gate(&mut s, &GateOp::VirtualZ { theta: PI / 3.0, target: ZTarget::Site(0) }, &mut f, 0.0).unwrap();
        let factors = gate_factors(&GateOp::GlobalR { theta: FRAC_PI_2, phi: 0.0 }, &f, &ROLES2, 0.0).unwrap();
        assert!(max_dev(&factors[0].matrix, &embed1(&r_phi(FRAC_PI_2, -PI / 3.0))) < 1e-15);
        assert!(max_dev(&factors[1].matrix, &embed1(&r_phi(FRAC_PI_2, 0.0))) < 1e-15);
        // no matrix was applied
        assert_eq!(s.amplitudes().unwrap()[0], c(1.0, 0.0));
    }

    #[test]
    fn global_r_skips_lost_site() {
        let h = 1.0 / 2f64.sqrt();
        let mut s = RegisterState::from_site_states(
            &[qubit_site(c(h, 0.0), c(0.0, h)), crate::qstate::level_site(SiteLevel::Lost)],
            Mode::Pure,
        )
        .unwrap();
        let before = s.level_probabilities();
        let mut f = PhaseFrame::new(2);
        apply_gate(&mut s, &GateOp::GlobalR { theta: 1.1, phi: 0.3 }, &mut f, 0.0).unwrap();
        assert_eq!(s.level_probabilities().sites[1], before.sites[1]);
    }

    #[test]
    fn reservoir_sites_skip_global_pulses() {
        let roles = [SiteRole::Data, SiteRole::Reservoir];
        let factors = gate_factors(&GateOp::GlobalR { theta: PI, phi: 0.0 }, &PhaseFrame::new(2), &roles, 0.0).unwrap();
        assert_eq!(factors.len(), 1);
        assert_eq!(factors[0].sites, vec![0]);
    }

    #[test]
    fn native_standard_ldu_is_identity_on_q0q0() {
        let y = FRAC_PI_2;
        let gates = [
            GateOp::GlobalR { theta: FRAC_PI_2, phi: 0.0 },
            GateOp::Entangle { theta: FRAC_PI_2, a: 0, b: 1, phi: y },
            GateOp::Entangle { theta: FRAC_PI_2, a: 0, b: 1, phi: y },
            GateOp::GlobalR { theta: FRAC_PI_2, phi: 0.0 },
            GateOp::VirtualZ { theta: PI, target: ZTarget::Global },
        ];
        let mut s = new_register(&[SiteLevel::Q0, SiteLevel::Q0], Mode::Pure).unwrap();
        let mut f = PhaseFrame::new(2);
        for g in &gates {
            apply_gate(&mut s, g, &mut f, 0.0).unwrap();
        }
        f.materialize(&mut s);
        let target = new_register(&[SiteLevel::Q0, SiteLevel::Q0], Mode::Pure).unwrap();
        assert!((state_fidelity(&s, &target).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circuit_unitary_basics() {
        let u = circuit_unitary(&[], &ROLES2, 0.0).unwrap();
        assert!(max_dev(&u, &DMatrix::identity(36, 36)) < 1e-15);
        let xx = [GateOp::CanonicalX { site: 0 }, GateOp::CanonicalX { site: 0 }];
        assert!(max_dev(&circuit_unitary(&xx, &ROLES2, 0.0).unwrap(), &DMatrix::identity(36, 36)) < 1e-12);
        let fb = [GateOp::FeedbackZ { site: 1, source: 0 }];
        assert!(circuit_unitary(&fb, &ROLES2, 0.0).is_err());
    }

    #[test]
    fn hardware_optimized_sequence_is_identity_on_qubits() {
        let gates = [
            GateOp::GlobalR { theta: FRAC_PI_2, phi: 0.0 },
            GateOp::Entangle { theta: PI, a: 0, b: 1, phi: 0.0 },
            GateOp::GlobalR { theta: -FRAC_PI_2, phi: 0.0 },
            GateOp::VirtualZ { theta: PI, target: ZTarget::Global },
        ];
        let u = qubit_block(&circuit_unitary(&gates, &ROLES2, 0.0).unwrap());
        let phase = u[0][0];
        assert!((phase.norm() - 1.0).abs() < 1e-10);
        let mut id = [[c(0.0, 0.0); 4]; 4];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = phase;
        }
        assert!(dev4(&u, &id) < 1e-10);
    }

    #[test]
    fn cnot_flips_target_only_on_control_one() {
        let g = GateOp::CanonicalCnot { control: 0, target: 1 };
        let u = circuit_unitary(&[g], &ROLES2, 0.0).unwrap();
        let idx = |a: SiteLevel, b: SiteLevel| crate::qstate::basis_index(&[a, b]);
        assert_eq!(u[(idx(SiteLevel::Q1, SiteLevel::Q1), idx(SiteLevel::Q1, SiteLevel::Q0))], c(1.0, 0.0));
        assert_eq!(u[(idx(SiteLevel::Q0, SiteLevel::Q0), idx(SiteLevel::Q0, SiteLevel::Q0))], c(1.0, 0.0));
        // leaked control: target untouched
        assert_eq!(u[(idx(SiteLevel::L4, SiteLevel::Q0), idx(SiteLevel::L4, SiteLevel::Q0))], c(1.0, 0.0));
    }

    fn all_gate_kinds(t: f64, p: f64) -> Vec<GateOp> {
        vec![
            GateOp::GlobalR { theta: t, phi: p },
            GateOp::VirtualZ { theta: t, target: ZTarget::Site(1) },
            GateOp::VirtualZ { theta: t, target: ZTarget::Global },
            GateOp::LocalZ { theta: t, site: 0 },
            GateOp::Entangle { theta: t, a: 0, b: 1, phi: p },
            GateOp::Entangle { theta: t, a: 1, b: 0, phi: p },
            GateOp::CanonicalCz { a: 0, b: 1 },
            GateOp::CanonicalH { site: 1 },
            GateOp::CanonicalX { site: 0 },
            GateOp::CanonicalCnot { control: 1, target: 0 },
            GateOp::FeedbackZ { site: 1, source: 0 },
        ]
    }

    fn lost_invariant(u: &DMatrix<C64>, n: usize) -> bool {
        let d = u.nrows();
        let lost = SiteLevel::Lost.index();
        (0..d).all(|r| {
            (0..d).all(|col| {
                let moves = (0..n).any(|s| (level_at(r, s) == lost) != (level_at(col, s) == lost));
                !moves || u[(r, col)].norm() == 0.0
            })
        })
    }

    proptest! {
        #[test]
        fn every_gate_is_unitary_and_keeps_lost(t in -7.0f64..7.0, p in -7.0f64..7.0, eps in -0.05f64..0.05) {
            let mut frame = PhaseFrame::new(2);
            frame.delta = vec![0.4, -1.3];
            for g in all_gate_kinds(t, p) {
                let op = matrix_of(&g, &frame, &ROLES2, eps).unwrap();
                prop_assert!(unitarity_deviation(&op.matrix) < 1e-10);
                let full = embed_full(&op, 2);
                prop_assert!(lost_invariant(&full, 2));
            }
        }

        #[test]
        fn entangle_qubit_block_is_rzz_times_echo(t in -7.0f64..7.0, p in -3.2f64..3.2) {
            let e = r_phi(PI, p);
            let expect = mul4(&rzz4(t), &kron4(&e, &e));
            prop_assert!(dev4(&qubit_block(&entangle(t, p)), &expect) < 1e-12);
        }

        #[test]
        fn echo_identity_holds(t in -7.0f64..7.0) {
            let x = pauli(1);
            let xx = kron4(&x, &x);
            let lhs = mul4(&xx, &mul4(&rzz4(t), &xx));
            prop_assert!(dev4(&lhs, &rzz4(t)) < 1e-12);
        }
    }

    #[test]
    fn virtual_and_local_z_agree_up_to_diagonal() {
        for &theta in &[0.0, PI / 4.0, PI, 1.5 * PI] {
            for &phi in &[0.0, 0.7, FRAC_PI_2] {
                let roles = [SiteRole::Data];
                let virt = circuit_physical(&[GateOp::VirtualZ { theta, target: ZTarget::Site(0) }, GateOp::GlobalR { theta: FRAC_PI_2, phi }], &roles);
                let local = circuit_physical(&[GateOp::LocalZ { theta, site: 0 }, GateOp::GlobalR { theta: FRAC_PI_2, phi }], &roles);
                // virt = D * local for a diagonal D
                let d = &virt * local.adjoint();
                for r in 0..6 {
                    for col in 0..6 {
                        if r != col {
                            assert!(d[(r, col)].norm() < 1e-12, "theta {theta} phi {phi}");
                        }
                    }
                }
            }
        }
    }

    /// Product of physical pulses only, without folding in the frame.
    fn circuit_physical(gates: &[GateOp], roles: &[SiteRole]) -> DMatrix<C64> {
        let n = roles.len();
        let mut u = DMatrix::<C64>::identity(dim_of(n), dim_of(n));
        let mut frame = PhaseFrame::new(n);
        for g in gates {
            for f in gate_factors(g, &frame, roles, 0.0).unwrap() {
                u = embed_full(&f, n) * u;
            }
            if let GateOp::VirtualZ { theta, target } = *g {
                frame.advance(target, theta);
            }
        }
        u
    }
}
