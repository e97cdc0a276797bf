//! Circuit descriptions: every LDU variant, the experiment sequences built
//! around them, and process-matrix extraction.
//!
//! Site 0 is the data atom and site 1 the ancilla throughout. Builders insert
//! noise hooks next to the gates they belong to, so both engines see the same
//! channels at the same points:
//!
//! | gate              | hooks that follow it                                   |
//! |-------------------|--------------------------------------------------------|
//! | `GlobalR(theta)`  | `PulseError(theta)`                                    |
//! | `Entangle`        | `Depolarize2`, `GateLoss` per atom, `RydbergPropagation` |
//! | `CanonicalCz/Cnot`| `Depolarize2`, `GateLoss` per atom                     |
//! | `LocalZ`          | `LocalZError`                                          |
//!
//! Canonical single-qubit gates and virtual Z carry no hooks.
//!
//! # Text form
//!
//! ```text
//! #ldu-circuit v1
//! name standard_native
//! roles data ancilla
//! semantics standard data=0 ancilla=1
//! gate global_r theta=1.5707963267948966 phi=0.0
//! noise pulse_error theta=1.5707963267948966
//! measure site=1
//! ```
//!
//! One step per line; angles in radians, times in seconds. Floats are
//! written in shortest round-trip form, so print/parse is lossless.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};
use crate::gates::{circuit_unitary, GateOp, ZTarget};
use crate::measure::Outcome;
use crate::noise::NoiseHook;
use crate::qstate::{basis_index, qubit_site, SiteLevel, SiteRole, LEVELS};

pub const DATA: usize = 0;
pub const ANCILLA: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Gate(GateOp),
    Noise(NoiseHook),
    Measure { site: usize },
    /// Free evolution with anti-trapping, Rydberg decay and background loss.
    Hold { seconds: f64 },
    LeakPulse { site: usize },
    /// Ideal Q1 <-> RYD transfer.
    RydbergPi { site: usize },
}

/// What the flag measurement of a circuit means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semantics {
    None,
    /// Ancilla ONE means the data atom left the qubit block; data untouched otherwise.
    Standard { data: usize, ancilla: usize },
    /// Data-site NEITHER means loss; the state continues on the ancilla site.
    Swap { data: usize, ancilla: usize },
    /// Data-site ONE triggers Z on the ancilla, NEITHER flags an erasure.
    Teleport { data: usize, ancilla: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LduKind {
    StandardCanonical,
    StandardNative,
    StandardGlobalOnly,
    StandardHwOpt,
    Swap,
    TeleportCanonical,
    TeleportNative,
}

impl LduKind {
    pub const ALL: [LduKind; 7] = [
        LduKind::StandardCanonical,
        LduKind::StandardNative,
        LduKind::StandardGlobalOnly,
        LduKind::StandardHwOpt,
        LduKind::Swap,
        LduKind::TeleportCanonical,
        LduKind::TeleportNative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LduKind::StandardCanonical => "standard_canonical",
            LduKind::StandardNative => "standard_native",
            LduKind::StandardGlobalOnly => "standard_global_only",
            LduKind::StandardHwOpt => "standard_hw_opt",
            LduKind::Swap => "swap",
            LduKind::TeleportCanonical => "teleport_canonical",
            LduKind::TeleportNative => "teleport_native",
        }
    }

    pub fn is_standard(self) -> bool {
        matches!(
            self,
            LduKind::StandardCanonical | LduKind::StandardNative | LduKind::StandardGlobalOnly | LduKind::StandardHwOpt
        )
    }

    /// Pauli (index into X=1, Y=2, Z=3, identity 0) a standard LDU leaves on
    /// the data when the ancilla is missing. `None` for non-standard kinds.
    pub fn ancilla_loss_pauli(self) -> Option<usize> {
        match self {
            LduKind::StandardCanonical => Some(0),
            LduKind::StandardNative | LduKind::StandardHwOpt => Some(2),
            LduKind::StandardGlobalOnly => Some(1),
            _ => None,
        }
    }

    /// Ancilla state the circuit expects on entry. The native teleport
    /// circuit shares its first global pulse with the data preparation, so
    /// its ancilla arrives as -y.
    pub fn ancilla_input(self) -> BlochTarget {
        match self {
            LduKind::TeleportNative => BlochTarget::MinusY,
            _ => BlochTarget::Zero,
        }
    }
}

/// The six cardinal qubit states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlochTarget {
    Zero,
    One,
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl BlochTarget {
    pub const ALL: [BlochTarget; 6] = [
        BlochTarget::Zero,
        BlochTarget::One,
        BlochTarget::PlusX,
        BlochTarget::MinusX,
        BlochTarget::PlusY,
        BlochTarget::MinusY,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BlochTarget::Zero => "0",
            BlochTarget::One => "1",
            BlochTarget::PlusX => "+x",
            BlochTarget::MinusX => "-x",
            BlochTarget::PlusY => "+y",
            BlochTarget::MinusY => "-y",
        }
    }

    pub fn amplitudes(self) -> (C64, C64) {
        let h = 1.0 / 2f64.sqrt();
        let (a, b) = match self {
            BlochTarget::Zero => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
            BlochTarget::One => (C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
            BlochTarget::PlusX => (C64::new(h, 0.0), C64::new(h, 0.0)),
            BlochTarget::MinusX => (C64::new(h, 0.0), C64::new(-h, 0.0)),
            BlochTarget::PlusY => (C64::new(h, 0.0), C64::new(0.0, h)),
            BlochTarget::MinusY => (C64::new(h, 0.0), C64::new(0.0, -h)),
        };
        (a, b)
    }

    pub fn site(self) -> [C64; LEVELS] {
        let (a, b) = self.amplitudes();
        qubit_site(a, b)
    }
}

/// `(xi, theta)` such that `R_y(theta) R_z(xi) R_x(pi/2) |0> = |target>` up
/// to a global phase.
pub fn prep_angles(target: BlochTarget) -> (f64, f64) {
    use BlochTarget::*;
    match target {
        Zero => (FRAC_PI_2, -FRAC_PI_2),
        One => (FRAC_PI_2, FRAC_PI_2),
        PlusX => (FRAC_PI_2, 0.0),
        MinusX => (-FRAC_PI_2, 0.0),
        PlusY => (PI, 0.0),
        MinusY => (0.0, 0.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub name: String,
    pub roles: Vec<SiteRole>,
    pub steps: Vec<Step>,
    pub semantics: Semantics,
}

/// Appends gates together with their noise hooks.
#[derive(Clone, Debug)]
pub struct Builder {
    spec: CircuitSpec,
}

impl Builder {
    pub fn new(name: &str, roles: &[SiteRole]) -> Builder {
        Builder {
            spec: CircuitSpec { name: name.into(), roles: roles.to_vec(), steps: Vec::new(), semantics: Semantics::None },
        }
    }

    pub fn pair(name: &str) -> Builder {
        Builder::new(name, &[SiteRole::Data, SiteRole::Ancilla])
    }

    fn push(&mut self, s: Step) -> &mut Self {
        self.spec.steps.push(s);
        self
    }

    pub fn global_r(&mut self, theta: f64, phi: f64) -> &mut Self {
        self.push(Step::Gate(GateOp::GlobalR { theta, phi }));
        self.push(Step::Noise(NoiseHook::PulseError { theta }))
    }

    pub fn entangle(&mut self, theta: f64, phi: f64) -> &mut Self {
        let (a, b) = (DATA, ANCILLA);
        self.push(Step::Gate(GateOp::Entangle { theta, a, b, phi }));
        self.two_qubit_hooks(a, b);
        self.push(Step::Noise(NoiseHook::RydbergPropagation { a, b }))
    }

    fn two_qubit_hooks(&mut self, a: usize, b: usize) -> &mut Self {
        self.push(Step::Noise(NoiseHook::Depolarize2 { a, b }));
        self.push(Step::Noise(NoiseHook::GateLoss { site: a }));
        self.push(Step::Noise(NoiseHook::GateLoss { site: b }))
    }

    pub fn cz(&mut self) -> &mut Self {
        self.push(Step::Gate(GateOp::CanonicalCz { a: DATA, b: ANCILLA }));
        self.two_qubit_hooks(DATA, ANCILLA)
    }

    pub fn cnot(&mut self, control: usize, target: usize) -> &mut Self {
        self.push(Step::Gate(GateOp::CanonicalCnot { control, target }));
        self.two_qubit_hooks(control.min(target), control.max(target))
    }

    pub fn local_z(&mut self, theta: f64, site: usize) -> &mut Self {
        self.push(Step::Gate(GateOp::LocalZ { theta, site }));
        self.push(Step::Noise(NoiseHook::LocalZError { site }))
    }

    pub fn virtual_z(&mut self, theta: f64, target: ZTarget) -> &mut Self {
        self.push(Step::Gate(GateOp::VirtualZ { theta, target }))
    }

    pub fn gate(&mut self, g: GateOp) -> &mut Self {
        self.push(Step::Gate(g))
    }

    pub fn noise(&mut self, h: NoiseHook) -> &mut Self {
        self.push(Step::Noise(h))
    }

    pub fn measure(&mut self, site: usize) -> &mut Self {
        self.push(Step::Measure { site })
    }

    pub fn hold(&mut self, seconds: f64) -> &mut Self {
        self.push(Step::Hold { seconds })
    }

    pub fn leak_pulse(&mut self, site: usize) -> &mut Self {
        self.push(Step::LeakPulse { site })
    }

    pub fn rydberg_pi(&mut self, site: usize) -> &mut Self {
        self.push(Step::RydbergPi { site })
    }

    pub fn append(&mut self, other: &CircuitSpec) -> &mut Self {
        self.spec.steps.extend_from_slice(&other.steps);
        if other.semantics != Semantics::None {
            self.spec.semantics = other.semantics;
        }
        self
    }

    pub fn semantics(&mut self, s: Semantics) -> &mut Self {
        self.spec.semantics = s;
        self
    }

    pub fn build(&self) -> CircuitSpec {
        self.spec.clone()
    }
}

/// The LDU as a fixed gate list, including its flag measurement (and, for
/// the teleport kinds, the feedback gate).
pub fn build_ldu(kind: LduKind) -> CircuitSpec {
    let (d, a) = (DATA, ANCILLA);
    let mut b = Builder::pair(kind.name());
    match kind {
        LduKind::StandardCanonical => {
            b.gate(GateOp::CanonicalX { site: a }).gate(GateOp::CanonicalH { site: a });
            b.cz().gate(GateOp::CanonicalX { site: d }).cz().gate(GateOp::CanonicalX { site: d });
            b.gate(GateOp::CanonicalH { site: a });
        }
        LduKind::StandardNative => {
            b.global_r(FRAC_PI_2, 0.0).entangle(FRAC_PI_2, FRAC_PI_2).entangle(FRAC_PI_2, FRAC_PI_2);
            b.global_r(FRAC_PI_2, 0.0).virtual_z(PI, ZTarget::Global);
        }
        LduKind::StandardGlobalOnly => {
            // canonical gates ignore the phase frame, so Z is applied explicitly
            let hz = |b: &mut Builder| {
                for s in [d, a] {
                    b.gate(GateOp::CanonicalH { site: s }).gate(GateOp::LocalZ { theta: PI, site: s });
                }
            };
            hz(&mut b);
            b.cz();
            b.gate(GateOp::CanonicalX { site: d }).gate(GateOp::CanonicalX { site: a });
            b.cz();
            hz(&mut b);
        }
        LduKind::StandardHwOpt => {
            b.global_r(FRAC_PI_2, 0.0).entangle(PI, 0.0).global_r(-FRAC_PI_2, 0.0);
            b.virtual_z(PI, ZTarget::Global);
        }
        LduKind::Swap => {
            b.cnot(d, a).cnot(a, d);
        }
        LduKind::TeleportCanonical => {
            b.gate(GateOp::CanonicalH { site: a });
            b.cz();
            b.gate(GateOp::CanonicalH { site: d }).gate(GateOp::CanonicalH { site: a });
        }
        LduKind::TeleportNative => {
            b.entangle(FRAC_PI_2, 0.0).global_r(-FRAC_PI_2, FRAC_PI_2);
            b.virtual_z(-FRAC_PI_2, ZTarget::Global);
        }
    }
    match kind {
        k if k.is_standard() => {
            b.measure(a).semantics(Semantics::Standard { data: d, ancilla: a });
        }
        LduKind::Swap => {
            b.measure(d).semantics(Semantics::Swap { data: d, ancilla: a });
        }
        _ => {
            b.measure(d).gate(GateOp::FeedbackZ { site: a, source: d });
            b.semantics(Semantics::Teleport { data: d, ancilla: a });
        }
    }
    b.build()
}

/// Data preparation from |0>|0>: global `R_x(pi/2)`, `LocalZ(xi)` on the data
/// site, global `R_y(theta)`. The data ends in `|target>`, the ancilla in -y.
pub fn build_state_prep(target: BlochTarget) -> CircuitSpec {
    let (xi, theta) = prep_angles(target);
    let mut b = Builder::pair(&format!("prep_{}", target.label()));
    b.global_r(FRAC_PI_2, 0.0);
    if xi != 0.0 {
        b.local_z(xi, DATA);
    }
    if theta != 0.0 {
        b.global_r(theta, FRAC_PI_2);
    }
    b.build()
}

/// Preparation of `label` followed by the standard native LDU without its
/// leading `R_x(pi/2)`, which the preparation takes the place of. The data
/// state seen by the LDU is therefore `R_x(-pi/2) |label>`; the label `-y`
/// reproduces the plain LDU on |0>|0>. Flag measurement on the ancilla only.
pub fn build_prepared_standard(label: BlochTarget) -> CircuitSpec {
    let ldu = build_ldu(LduKind::StandardNative);
    // drop the leading R_x(pi/2) and its pulse-error hook
    let body = CircuitSpec { steps: ldu.steps[2..].to_vec(), ..ldu };
    let mut b = Builder::pair(&format!("standard_native_{}", label.label()));
    b.append(&build_state_prep(label)).append(&body);
    b.build()
}

/// Ramsey sequence on the data atom with analysis phase `phi`; both sites
/// are read out at the end.
pub fn build_ramsey(with_ldu: bool, phi: f64) -> CircuitSpec {
    let mut b = Builder::pair(if with_ldu { "ramsey_ldu" } else { "ramsey" });
    if with_ldu {
        // label |1> puts the data into -y for the duration of the LDU
        let ldu = build_prepared_standard(BlochTarget::One);
        let steps: Vec<Step> = ldu.steps.into_iter().filter(|s| !matches!(s, Step::Measure { .. })).collect();
        for s in steps {
            b.push(s);
        }
    } else {
        b.global_r(FRAC_PI_2, 0.0);
    }
    b.global_r(FRAC_PI_2, phi).measure(DATA).measure(ANCILLA);
    b.build()
}

/// Bell-state preparation with `n_loops` entangling gates and a closing
/// global `R_x(pi/2)` that maps the state onto `|00> + e^{ia}|11>`. With
/// `phi` set, a parity analysis pulse `R_phi(pi/2)` follows.
pub fn build_bell_fidelity(n_loops: usize, phi: Option<f64>) -> Result<CircuitSpec> {
    if n_loops == 0 || n_loops.is_multiple_of(2) {
        return Err(LduError::InvalidParameter(format!(
            "n_loops = {n_loops}: the sequence only yields a Bell state for odd loop counts"
        )));
    }
    let mut b = Builder::pair(&format!("bell_{n_loops}"));
    b.global_r(FRAC_PI_2, 0.0);
    for _ in 0..n_loops {
        b.entangle(FRAC_PI_2, FRAC_PI_2);
    }
    b.global_r(FRAC_PI_2, 0.0);
    if let Some(phi) = phi {
        b.global_r(FRAC_PI_2, phi);
    }
    b.measure(DATA).measure(ANCILLA);
    Ok(b.build())
}

/// Single atom: excite Q1 to RYD, hold, de-excite, read out.
pub fn build_anti_trap(hold: f64) -> Result<CircuitSpec> {
    if !(hold >= 0.0 && hold.is_finite()) {
        return Err(LduError::InvalidParameter(format!("hold time {hold} must be finite and non-negative")));
    }
    let mut b = Builder::new("anti_trap", &[SiteRole::Data]);
    b.rydberg_pi(DATA).hold(hold).rydberg_pi(DATA).measure(DATA);
    Ok(b.build())
}

/// Native teleport followed by the analysis pulse `R_phi(pi/2)` on the
/// ancilla, split as two `R_phi(pi/4)` global pulses around a `LocalZ(pi)`
/// on the (already measured) data site.
pub fn build_teleport_readout(phi: f64) -> CircuitSpec {
    let mut b = Builder::pair("teleport_readout");
    b.append(&build_ldu(LduKind::TeleportNative));
    b.global_r(PI / 4.0, phi).local_z(PI, DATA).global_r(PI / 4.0, phi).measure(ANCILLA);
    b.build()
}

/// Leak pulse on the data atom, then the standard native LDU; both sites
/// are read out.
pub fn build_hyperfine() -> CircuitSpec {
    let mut b = Builder::pair("hyperfine_ldu");
    b.leak_pulse(DATA).append(&build_ldu(LduKind::StandardNative)).measure(DATA);
    b.build()
}

/// The initial idle period followed by `body`.
pub fn with_idle(body: &CircuitSpec) -> CircuitSpec {
    let mut out = body.clone();
    out.steps.insert(0, Step::Noise(NoiseHook::Idle));
    out
}

/// Process matrix over `{00, 01, 10, 11, l0, l1}` (data ⊗ ancilla, `l` = L3).
pub fn extract_process_matrix(kind: LduKind) -> Result<DMatrix<C64>> {
    if !kind.is_standard() {
        return Err(LduError::NonStandardKind);
    }
    let spec = build_ldu(kind);
    let gates: Vec<GateOp> = spec
        .steps
        .iter()
        .filter_map(|s| if let Step::Gate(g) = s { Some(*g) } else { None })
        .collect();
    let u = circuit_unitary(&gates, &spec.roles, 0.0)?;
    use SiteLevel::*;
    let basis = [(Q0, Q0), (Q0, Q1), (Q1, Q0), (Q1, Q1), (L3, Q0), (L3, Q1)].map(|(d, a)| basis_index(&[d, a]));
    Ok(DMatrix::from_fn(6, 6, |r, c| u[(basis[r], basis[c])]))
}

/// Deviations of a process matrix from the block form: identity (up to one
/// global phase) on the qubit block, an antidiagonal unit-modulus block on
/// the leaked data states, zero couplings in between.
#[derive(Clone, Copy, Debug)]
pub struct BlockCheck {
    pub identity_dev: f64,
    pub antidiagonal_dev: f64,
    pub off_block_dev: f64,
    /// Relative phase of the leaked block's upper-right entry.
    pub leak_phase: f64,
}

impl BlockCheck {
    pub fn max_dev(&self) -> f64 {
        self.identity_dev.max(self.antidiagonal_dev).max(self.off_block_dev)
    }
}

pub fn check_block_structure(m: &DMatrix<C64>) -> BlockCheck {
    let g = m[(0, 0)];
    let phase = if g.norm() > 0.0 { g / g.norm() } else { C64::new(1.0, 0.0) };
    let m = m.map(|z| z / phase);
    let mut identity_dev: f64 = 0.0;
    let mut off_block_dev: f64 = 0.0;
    for r in 0..6 {
        for c in 0..6 {
            let z = m[(r, c)];
            match (r < 4, c < 4) {
                (true, true) => {
                    let e = if r == c { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                    identity_dev = identity_dev.max((z - e).norm());
                }
                (false, false) => {}
                _ => off_block_dev = off_block_dev.max(z.norm()),
            }
        }
    }
    let antidiagonal_dev = [m[(4, 4)].norm(), m[(5, 5)].norm(), (m[(4, 5)].norm() - 1.0).abs(), (m[(5, 4)].norm() - 1.0).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    BlockCheck { identity_dev, antidiagonal_dev, off_block_dev, leak_phase: m[(4, 5)].arg() }
}

/// Data-atom conditions used by the truth tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataCondition {
    Present(BlochTarget),
    Lost,
    L3,
    L4,
}

impl DataCondition {
    pub fn label(self) -> String {
        match self {
            DataCondition::Present(t) => format!("present {}", t.label()),
            DataCondition::Lost => "lost".into(),
            DataCondition::L3 => "L3".into(),
            DataCondition::L4 => "L4".into(),
        }
    }

    pub fn site(self) -> [C64; LEVELS] {
        match self {
            DataCondition::Present(t) => t.site(),
            DataCondition::Lost => crate::qstate::level_site(SiteLevel::Lost),
            DataCondition::L3 => crate::qstate::level_site(SiteLevel::L3),
            DataCondition::L4 => crate::qstate::level_site(SiteLevel::L4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpectedOutcome {
    Exactly(Outcome),
    /// ZERO or ONE, never NEITHER.
    Detected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpectedState {
    /// The data input, on the given site.
    Input(usize),
    Qubit(usize, BlochTarget),
    Level(usize, SiteLevel),
}

/// Declared result of one noiseless LDU run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expectation {
    pub flag_site: usize,
    pub flag: ExpectedOutcome,
    pub state: ExpectedState,
}

/// The semantics each kind promises for a data condition.
pub fn expected(kind: LduKind, cond: DataCondition) -> Expectation {
    use DataCondition::*;
    use ExpectedOutcome::*;
    let (d, a) = (DATA, ANCILLA);
    let leaked_level = |c: DataCondition| match c {
        Lost => SiteLevel::Lost,
        L3 => SiteLevel::L3,
        _ => SiteLevel::L4,
    };
    if kind.is_standard() {
        return match cond {
            Present(_) => Expectation { flag_site: a, flag: Exactly(Outcome::Zero), state: ExpectedState::Input(d) },
            c => Expectation { flag_site: a, flag: Exactly(Outcome::One), state: ExpectedState::Level(d, leaked_level(c)) },
        };
    }
    let flag = match cond {
        Present(_) if kind == LduKind::Swap => Exactly(Outcome::Zero),
        Present(_) => Detected,
        Lost => Exactly(Outcome::Neither),
        L3 => Exactly(Outcome::Zero),
        L4 => Exactly(Outcome::One),
    };
    let refill = match (kind, cond) {
        (LduKind::TeleportNative, L4) => BlochTarget::MinusX,
        (LduKind::TeleportNative, _) => BlochTarget::PlusX,
        _ => BlochTarget::Zero,
    };
    let state = match cond {
        Present(_) => ExpectedState::Input(a),
        _ => ExpectedState::Qubit(a, refill),
    };
    Expectation { flag_site: d, flag, state }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

impl CircuitSpec {
    pub fn n_sites(&self) -> usize {
        self.roles.len()
    }

    pub fn gates(&self) -> Vec<GateOp> {
        self.steps.iter().filter_map(|s| if let Step::Gate(g) = s { Some(*g) } else { None }).collect()
    }

    pub fn measured_sites(&self) -> Vec<usize> {
        self.steps.iter().filter_map(|s| if let Step::Measure { site } = s { Some(*site) } else { None }).collect()
    }

    pub fn feedback_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Gate(GateOp::FeedbackZ { .. }))).count()
    }

    /// Site ranges, measurement/feedback ordering and the hook placement
    /// after entangling gates.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        if n == 0 {
            return Err(LduError::EmptyRegister);
        }
        let bad = |msg: String| Err(LduError::InvalidParameter(format!("{}: {msg}", self.name)));
        let mut measured = vec![false; n];
        for (i, step) in self.steps.iter().enumerate() {
            let sites: Vec<usize> = match step {
                Step::Gate(g) => g.sites(),
                Step::Noise(h) => match *h {
                    NoiseHook::Depolarize2 { a, b } | NoiseHook::RydbergPropagation { a, b } => vec![a, b],
                    NoiseHook::GateLoss { site } | NoiseHook::LocalZError { site } => vec![site],
                    NoiseHook::PulseError { .. } | NoiseHook::Idle => vec![],
                },
                Step::Measure { site } | Step::LeakPulse { site } | Step::RydbergPi { site } => vec![*site],
                Step::Hold { seconds } => {
                    if !(*seconds >= 0.0 && seconds.is_finite()) {
                        return bad(format!("step {i}: bad hold time"));
                    }
                    vec![]
                }
            };
            crate::qstate::check_sites(n, &sites)?;
            match step {
                Step::Measure { site } => {
                    if measured[*site] {
                        return bad(format!("site {site} measured twice"));
                    }
                    measured[*site] = true;
                }
                Step::Gate(GateOp::FeedbackZ { source, .. }) if !measured[*source] => {
                    return bad(format!("step {i}: feedback from unmeasured site {source}"));
                }
                Step::Gate(GateOp::Entangle { a, b, .. }) => {
                    let next = &self.steps[i + 1..];
                    let want = [
                        Step::Noise(NoiseHook::Depolarize2 { a: *a, b: *b }),
                        Step::Noise(NoiseHook::GateLoss { site: *a }),
                        Step::Noise(NoiseHook::GateLoss { site: *b }),
                    ];
                    if next.len() < 3 || next[..3] != want {
                        return bad(format!("step {i}: entangling gate without its hooks"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("#ldu-circuit v1\n");
        let _ = writeln!(out, "name {}", self.name);
        let roles: Vec<&str> = self.roles.iter().map(|r| r.label()).collect();
        let _ = writeln!(out, "roles {}", roles.join(" "));
        let _ = match self.semantics {
            Semantics::None => writeln!(out, "semantics none"),
            Semantics::Standard { data, ancilla } => writeln!(out, "semantics standard data={data} ancilla={ancilla}"),
            Semantics::Swap { data, ancilla } => writeln!(out, "semantics swap data={data} ancilla={ancilla}"),
            Semantics::Teleport { data, ancilla } => writeln!(out, "semantics teleport data={data} ancilla={ancilla}"),
        };
        for s in &self.steps {
            out.push_str(&step_line(s));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<CircuitSpec> {
        let mut name = None;
        let mut roles = None;
        let mut semantics = None;
        let mut steps = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == "#ldu-circuit v1" => {}
            _ => return Err(LduError::Parse { line: 1, msg: "missing `#ldu-circuit v1` header".into() }),
        }
        for (i, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| LduError::Parse { line: i + 1, msg };
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match head {
                "name" => name = Some(rest.join(" ")),
                "roles" => {
                    roles = Some(
                        rest.iter()
                            .map(|r| SiteRole::parse(r).ok_or_else(|| err(format!("unknown role `{r}`"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "semantics" => {
                    let kv = Fields::parse(&rest[1.min(rest.len())..]).map_err(err)?;
                    semantics = Some(match rest.first().copied() {
                        Some("none") => Semantics::None,
                        Some(k @ ("standard" | "swap" | "teleport")) => {
                            let (data, ancilla) = (kv.usize("data").map_err(err)?, kv.usize("ancilla").map_err(err)?);
                            match k {
                                "standard" => Semantics::Standard { data, ancilla },
                                "swap" => Semantics::Swap { data, ancilla },
                                _ => Semantics::Teleport { data, ancilla },
                            }
                        }
                        other => return Err(err(format!("unknown semantics {other:?}"))),
                    })
                }
                _ => steps.push(parse_step(head, &rest).map_err(err)?),
            }
        }
        let spec = CircuitSpec {
            name: name.ok_or(LduError::Parse { line: 0, msg: "missing name".into() })?,
            roles: roles.ok_or(LduError::Parse { line: 0, msg: "missing roles".into() })?,
            steps,
            semantics: semantics.unwrap_or(Semantics::None),
        };
        Ok(spec)
    }
}

fn step_line(s: &Step) -> String {
    match *s {
        Step::Gate(g) => {
            let body = match g {
                GateOp::GlobalR { theta, phi } => format!("global_r theta={} phi={}", fmt_f(theta), fmt_f(phi)),
                GateOp::VirtualZ { theta, target } => {
                    let t = match target {
                        ZTarget::Global => "global".to_string(),
                        ZTarget::Site(s) => s.to_string(),
                    };
                    format!("virtual_z theta={} target={t}", fmt_f(theta))
                }
                GateOp::LocalZ { theta, site } => format!("local_z theta={} site={site}", fmt_f(theta)),
                GateOp::Entangle { theta, a, b, phi } => {
                    format!("entangle theta={} a={a} b={b} phi={}", fmt_f(theta), fmt_f(phi))
                }
                GateOp::CanonicalCz { a, b } => format!("cz a={a} b={b}"),
                GateOp::CanonicalH { site } => format!("h site={site}"),
                GateOp::CanonicalX { site } => format!("x site={site}"),
                GateOp::CanonicalCnot { control, target } => format!("cnot control={control} target={target}"),
                GateOp::FeedbackZ { site, source } => format!("feedback_z site={site} source={source}"),
            };
            format!("gate {body}")
        }
        Step::Noise(h) => {
            let body = match h {
                NoiseHook::Depolarize2 { a, b } => format!("depolarize2 a={a} b={b}"),
                NoiseHook::GateLoss { site } => format!("gate_loss site={site}"),
                NoiseHook::RydbergPropagation { a, b } => format!("rydberg_propagation a={a} b={b}"),
                NoiseHook::PulseError { theta } => format!("pulse_error theta={}", fmt_f(theta)),
                NoiseHook::LocalZError { site } => format!("local_z_error site={site}"),
                NoiseHook::Idle => "idle".into(),
            };
            format!("noise {body}")
        }
        Step::Measure { site } => format!("measure site={site}"),
        Step::Hold { seconds } => format!("hold seconds={}", fmt_f(seconds)),
        Step::LeakPulse { site } => format!("leak_pulse site={site}"),
        Step::RydbergPi { site } => format!("rydberg_pi site={site}"),
    }
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn parse(words: &[&'a str]) -> std::result::Result<Fields<'a>, String> {
        words
            .iter()
            .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, found `{w}`")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Fields)
    }

    fn raw(&self, key: &str) -> std::result::Result<&'a str, String> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(|| format!("missing `{key}`"))
    }

    fn f64(&self, key: &str) -> std::result::Result<f64, String> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| format!("`{key}={v}` is not a number"))
    }

    fn usize(&self, key: &str) -> std::result::Result<usize, String> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| format!("`{key}={v}` is not a site index"))
    }

    fn expect_keys(&self, keys: &[&str]) -> std::result::Result<(), String> {
        match self.0.iter().find(|(k, _)| !keys.contains(k)) {
            Some((k, _)) => Err(format!("unexpected key `{k}`")),
            None => Ok(()),
        }
    }
}

fn parse_step(head: &str, rest: &[&str]) -> std::result::Result<Step, String> {
    let (kind, args) = match head {
        "gate" | "noise" => {
            let (k, a) = rest.split_first().ok_or("missing step kind")?;
            (format!("{head} {k}"), a)
        }
        _ => (head.to_string(), rest),
    };
    let f = Fields::parse(args)?;
    let (step, keys): (Step, &[&str]) = match kind.as_str() {
        "gate global_r" => (Step::Gate(GateOp::GlobalR { theta: f.f64("theta")?, phi: f.f64("phi")? }), &["theta", "phi"]),
        "gate virtual_z" => {
            let target = match f.raw("target")? {
                "global" => ZTarget::Global,
                _ => ZTarget::Site(f.usize("target")?),
            };
            (Step::Gate(GateOp::VirtualZ { theta: f.f64("theta")?, target }), &["theta", "target"])
        }
        "gate local_z" => (Step::Gate(GateOp::LocalZ { theta: f.f64("theta")?, site: f.usize("site")? }), &["theta", "site"]),
        "gate entangle" => (
            Step::Gate(GateOp::Entangle { theta: f.f64("theta")?, a: f.usize("a")?, b: f.usize("b")?, phi: f.f64("phi")? }),
            &["theta", "a", "b", "phi"],
        ),
        "gate cz" => (Step::Gate(GateOp::CanonicalCz { a: f.usize("a")?, b: f.usize("b")? }), &["a", "b"]),
        "gate h" => (Step::Gate(GateOp::CanonicalH { site: f.usize("site")? }), &["site"]),
        "gate x" => (Step::Gate(GateOp::CanonicalX { site: f.usize("site")? }), &["site"]),
        "gate cnot" => (
            Step::Gate(GateOp::CanonicalCnot { control: f.usize("control")?, target: f.usize("target")? }),
            &["control", "target"],
        ),
        "gate feedback_z" => (
            Step::Gate(GateOp::FeedbackZ { site: f.usize("site")?, source: f.usize("source")? }),
            &["site", "source"],
        ),
        "noise depolarize2" => (Step::Noise(NoiseHook::Depolarize2 { a: f.usize("a")?, b: f.usize("b")? }), &["a", "b"]),
        "noise gate_loss" => (Step::Noise(NoiseHook::GateLoss { site: f.usize("site")? }), &["site"]),
        "noise rydberg_propagation" => {
            (Step::Noise(NoiseHook::RydbergPropagation { a: f.usize("a")?, b: f.usize("b")? }), &["a", "b"])
        }
        "noise pulse_error" => (Step::Noise(NoiseHook::PulseError { theta: f.f64("theta")? }), &["theta"]),
        "noise local_z_error" => (Step::Noise(NoiseHook::LocalZError { site: f.usize("site")? }), &["site"]),
        "noise idle" => (Step::Noise(NoiseHook::Idle), &[]),
        "measure" => (Step::Measure { site: f.usize("site")? }, &["site"]),
        "hold" => (Step::Hold { seconds: f.f64("seconds")? }, &["seconds"]),
        "leak_pulse" => (Step::LeakPulse { site: f.usize("site")? }, &["site"]),
        "rydberg_pi" => (Step::RydbergPi { site: f.usize("site")? }, &["site"]),
        other => return Err(format!("unknown step `{other}`")),
    };
    f.expect_keys(keys)?;
    Ok(step)
}
