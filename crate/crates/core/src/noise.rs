//! Stochastic and irreversible processes.
//!
//! Every process is a Kraus list on a few sites ([`Channel`]). Density mode
//! applies `sum_k K rho K^dag`; trajectory mode picks branch `k` with Born
//! probability `|K psi|^2` and renormalizes. Kraus lists put the dominant
//! (no-event) branch first, which keeps trajectory sampling cheap.
//!
//! Hooks are the named insertion points that circuits carry; the model turns
//! each hook into concrete actions ([`NoiseModel::actions_for_hook`]).

use std::f64::consts::{FRAC_PI_4, PI};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};
use crate::gates::{embed1, pauli, rz};
use crate::qstate::{level_at, LocalMap, Mode, RegisterState, SiteLevel, SiteRole, LEVELS};

const Q0: usize = 0;
const Q1: usize = 1;
const L3: usize = 2;
const L4: usize = 3;
const RYD: usize = 4;
const LOST: usize = 5;

/// Calibrated error parameters. Time constants are in seconds; an infinite
/// time constant switches that process off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Process fidelity of one entangling gate.
    pub f2q: f64,
    /// Pauli error probability of a single-qubit pi pulse; scales with |theta|.
    pub p1q_pi: f64,
    pub eps_prep: f64,
    pub eps_read: f64,
    /// Loss probability per atom per entangling gate.
    pub p_loss_gate: f64,
    #[serde(with = "time_constant")]
    pub tau_vac: f64,
    /// Time between loading and the first pulse, exposed to background loss.
    pub t_idle: f64,
    #[serde(with = "time_constant")]
    pub tau_at: f64,
    #[serde(with = "time_constant")]
    pub tau_ryd: f64,
    pub p_prop: f64,
    /// Z phase picked up by a blockaded partner that stays in the qubit block.
    pub ryd_phase_err: f64,
    /// Share of Rydberg decay that lands in L3 (the rest goes to L4).
    pub ryd_decay_l3_fraction: f64,
    pub p_hfl_0: f64,
    pub p_hfl_1: f64,
    /// Standard deviation (radians) of the over-rotation of a local Z.
    pub local_z_err: f64,
    /// Fractional pulse-area error of every global pulse.
    pub eps_area: f64,
    pub p_meas_loss: f64,
}

/// Frozen calibration shipped with the crate.
pub const DEFAULT_CALIBRATION: &str = include_str!("../calibration/default.toml");

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            f2q: 0.967,
            p1q_pi: 0.002,
            eps_prep: 0.005,
            eps_read: 0.005,
            p_loss_gate: 0.013,
            tau_vac: 1.3,
            t_idle: 0.1,
            tau_at: 23e-6,
            tau_ryd: 170e-6,
            p_prop: 0.10,
            ryd_phase_err: FRAC_PI_4,
            ryd_decay_l3_fraction: 0.5,
            p_hfl_0: 0.955,
            p_hfl_1: 0.957,
            local_z_err: 0.02,
            eps_area: 0.0,
            p_meas_loss: 0.01,
        }
    }
}

/// Time constants may be infinite (process off). JSON has no infinity, so
/// those are written as the string `"inf"`; numbers and `"inf"` both parse.
mod time_constant {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a time in seconds or \"inf\", got `{t}`"))),
        }
    }
}

impl NoiseModel {
    /// The in-repo calibration file.
    pub fn calibrated() -> NoiseModel {
        #[derive(Deserialize)]
        struct File {
            noise: NoiseModel,
        }
        let f: File = toml::from_str(DEFAULT_CALIBRATION).expect("bundled calibration parses");
        f.noise.validate().expect("bundled calibration is valid");
        f.noise
    }

    /// No gate, SPAM or loss errors. Physical constants of the Rydberg level
    /// and the leak pulse are kept because they describe intended processes.
    pub fn noiseless() -> NoiseModel {
        NoiseModel {
            f2q: 1.0,
            p1q_pi: 0.0,
            eps_prep: 0.0,
            eps_read: 0.0,
            p_loss_gate: 0.0,
            tau_vac: f64::INFINITY,
            t_idle: 0.0,
            p_prop: 0.0,
            ryd_phase_err: 0.0,
            local_z_err: 0.0,
            eps_area: 0.0,
            p_meas_loss: 0.0,
            ..NoiseModel::default()
        }
    }

    pub const KEYS: [&'static str; 17] = [
        "f2q",
        "p1q_pi",
        "eps_prep",
        "eps_read",
        "p_loss_gate",
        "tau_vac",
        "t_idle",
        "tau_at",
        "tau_ryd",
        "p_prop",
        "ryd_phase_err",
        "ryd_decay_l3_fraction",
        "p_hfl_0",
        "p_hfl_1",
        "local_z_err",
        "eps_area",
        "p_meas_loss",
    ];

    fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "f2q" => &mut self.f2q,
            "p1q_pi" => &mut self.p1q_pi,
            "eps_prep" => &mut self.eps_prep,
            "eps_read" => &mut self.eps_read,
            "p_loss_gate" => &mut self.p_loss_gate,
            "tau_vac" => &mut self.tau_vac,
            "t_idle" => &mut self.t_idle,
            "tau_at" => &mut self.tau_at,
            "tau_ryd" => &mut self.tau_ryd,
            "p_prop" => &mut self.p_prop,
            "ryd_phase_err" => &mut self.ryd_phase_err,
            "ryd_decay_l3_fraction" => &mut self.ryd_decay_l3_fraction,
            "p_hfl_0" => &mut self.p_hfl_0,
            "p_hfl_1" => &mut self.p_hfl_1,
            "local_z_err" => &mut self.local_z_err,
            "eps_area" => &mut self.eps_area,
            "p_meas_loss" => &mut self.p_meas_loss,
            _ => return None,
        })
    }

    /// Overrides one named field; the result is validated.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let field = self
            .field_mut(key)
            .ok_or_else(|| LduError::Config(format!("unknown noise parameter `{key}`")))?;
        *field = value;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p1q_pi", self.p1q_pi),
            ("eps_prep", self.eps_prep),
            ("eps_read", self.eps_read),
            ("p_loss_gate", self.p_loss_gate),
            ("p_prop", self.p_prop),
            ("ryd_decay_l3_fraction", self.ryd_decay_l3_fraction),
            ("p_hfl_0", self.p_hfl_0),
            ("p_hfl_1", self.p_hfl_1),
            ("p_meas_loss", self.p_meas_loss),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(LduError::Config(format!("{k} = {p} is not a probability")));
            }
        }
        if !(self.f2q > 0.0 && self.f2q <= 1.0) {
            return Err(LduError::Config(format!("f2q = {} must lie in (0, 1]", self.f2q)));
        }
        for (k, t) in [("tau_vac", self.tau_vac), ("tau_at", self.tau_at), ("tau_ryd", self.tau_ryd)] {
            if t.is_nan() || t <= 0.0 {
                return Err(LduError::Config(format!("{k} = {t} must be positive")));
            }
        }
        if !(self.t_idle >= 0.0 && self.t_idle.is_finite()) {
            return Err(LduError::Config(format!("t_idle = {} must be a finite non-negative time", self.t_idle)));
        }
        for (k, v) in [("ryd_phase_err", self.ryd_phase_err), ("local_z_err", self.local_z_err), ("eps_area", self.eps_area)] {
            if !v.is_finite() {
                return Err(LduError::Config(format!("{k} must be finite")));
            }
        }
        if self.local_z_err < 0.0 {
            return Err(LduError::Config("local_z_err must be non-negative".into()));
        }
        Ok(())
    }

    /// Concrete channels for a hook on a register with the given roles.
    pub fn actions_for_hook(&self, hook: &NoiseHook, roles: &[SiteRole]) -> Vec<NoiseAction> {
        let mut out = Vec::new();
        match *hook {
            NoiseHook::Depolarize2 { a, b } => {
                if self.f2q < 1.0 {
                    out.push(NoiseAction::Kraus(depolarize2(a, b, self.f2q)));
                }
            }
            NoiseHook::GateLoss { site } => {
                if self.p_loss_gate > 0.0 {
                    out.push(NoiseAction::Kraus(loss_event(site, self.p_loss_gate)));
                }
            }
            NoiseHook::RydbergPropagation { a, b } => {
                if self.p_prop > 0.0 || self.ryd_phase_err != 0.0 {
                    out.push(NoiseAction::Kraus(rydberg_propagation(a, b, self.p_prop, self.ryd_phase_err)));
                }
            }
            NoiseHook::PulseError { theta } => {
                let p = (self.p1q_pi * theta.abs() / PI).min(1.0);
                if p > 0.0 {
                    for (s, r) in roles.iter().enumerate() {
                        if *r != SiteRole::Reservoir {
                            out.push(NoiseAction::Kraus(depolarize1(s, p)));
                        }
                    }
                }
            }
            NoiseHook::LocalZError { site } => {
                if self.local_z_err > 0.0 {
                    out.push(NoiseAction::GaussianZ { site, sigma: self.local_z_err });
                }
            }
            NoiseHook::Idle => {
                if self.t_idle > 0.0 {
                    for s in 0..roles.len() {
                        out.push(NoiseAction::Kraus(antitrap_and_decay(s, self.t_idle, self)));
                    }
                }
            }
        }
        out
    }
}

/// Named insertion points for noise inside a circuit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseHook {
    /// Two-qubit gate error after an entangling gate.
    Depolarize2 { a: usize, b: usize },
    /// Per-atom loss attached to an entangling gate.
    GateLoss { site: usize },
    /// Blockade spreading when one pair member is in the Rydberg state.
    RydbergPropagation { a: usize, b: usize },
    /// Single-qubit Pauli error after a global pulse of angle `theta`.
    PulseError { theta: f64 },
    LocalZError { site: usize },
    /// Background loss over the idle time before the circuit.
    Idle,
}

#[derive(Clone, Debug)]
pub struct Channel {
    pub sites: Vec<usize>,
    pub kraus: Vec<DMatrix<C64>>,
}

#[derive(Clone, Debug)]
pub enum NoiseAction {
    Kraus(Channel),
    /// Random `R_z(e)` with `e ~ N(0, sigma)`; density mode uses the exact
    /// average channel.
    GaussianZ { site: usize, sigma: f64 },
}

impl NoiseAction {
    pub fn apply_density(&self, state: &mut RegisterState) -> Result<()> {
        match self {
            NoiseAction::Kraus(ch) => ch.apply_density(state),
            NoiseAction::GaussianZ { site, sigma } => gaussian_z_average(*site, *sigma).apply_density(state),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &mut RegisterState, rng: &mut R) -> Result<()> {
        match self {
            NoiseAction::Kraus(ch) => ch.sample(state, rng).map(|_| ()),
            NoiseAction::GaussianZ { site, sigma } => {
                let e = Normal::new(0.0, *sigma)
                    .map_err(|e| LduError::InvalidParameter(e.to_string()))?
                    .sample(rng);
                state.apply_local(&embed1(&rz(e)), &[*site]);
                Ok(())
            }
        }
    }
}

impl Channel {
    pub fn apply_density(&self, state: &mut RegisterState) -> Result<()> {
        state.apply_kraus(&self.kraus, &self.sites)
    }

    /// Samples one Kraus branch on a pure state; returns its index.
    pub fn sample<R: Rng + ?Sized>(&self, state: &mut RegisterState, rng: &mut R) -> Result<usize> {
        if state.mode() != Mode::Pure {
            return Err(LduError::ModeMismatch("pure"));
        }
        let map = LocalMap::new(state.n_sites(), &self.sites);
        let u: f64 = rng.random::<f64>() * state.weight();
        let mut cum = 0.0;
        let mut last = None;
        for (j, k) in self.kraus.iter().enumerate() {
            let mut cand = state.clone();
            cand.apply_mapped(k, &map);
            let p = cand.weight();
            if p <= 0.0 {
                continue;
            }
            cum += p;
            if u < cum {
                cand.normalize();
                *state = cand;
                return Ok(j);
            }
            last = Some((j, cand));
        }
        // rounding left u just above the total weight
        let (j, mut cand) = last.ok_or_else(|| LduError::InvalidParameter("channel annihilates state".into()))?;
        cand.normalize();
        *state = cand;
        Ok(j)
    }

    /// Max elementwise deviation of `sum_k K^dag K` from identity.
    pub fn completeness_deviation(&self) -> f64 {
        let d = self.kraus[0].nrows();
        let mut acc = DMatrix::<C64>::zeros(d, d);
        for k in &self.kraus {
            acc += k.adjoint() * k;
        }
        (acc - DMatrix::<C64>::identity(d, d)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn ket_bra(d: usize, to: usize, from: usize, amp: f64) -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::zeros(d, d);
    m[(to, from)] = cr(amp);
    m
}

/// Two-site depolarizing error of process fidelity `f2q`.
///
/// On qubit⊗qubit inputs the 15 non-identity Paulis share probability
/// `1 - f2q`. If one member is outside the qubit block, the other gets a
/// single-qubit depolarizing channel with the same average gate fidelity,
/// i.e. Pauli probability `1.2 (1 - f2q)`. Kraus `j = 4 q + p` carries Pauli
/// `p` on `a` and `q` on `b`.
pub fn depolarize2(a: usize, b: usize, f2q: f64) -> Channel {
    let p2 = (1.0 - f2q).clamp(0.0, 1.0);
    let p1 = (1.2 * p2).min(1.0);
    let w2 = |j: usize| if j == 0 { 1.0 - p2 } else { p2 / 15.0 };
    let w1 = |p: usize| if p == 0 { 1.0 - p1 } else { p1 / 3.0 };
    let d = LEVELS * LEVELS;
    let paulis: Vec<_> = (0..4).map(pauli).collect();
    let mut kraus = Vec::with_capacity(16);
    for j in 0..16 {
        let (pa, pb) = (j % 4, j / 4);
        let mut m = DMatrix::<C64>::zeros(d, d);
        for col in 0..d {
            let (la, lb) = (level_at(col, 0), level_at(col, 1));
            match (la < 2, lb < 2) {
                (true, true) => {
                    let s = w2(j).sqrt();
                    for ra in 0..2 {
                        for rb in 0..2 {
                            m[(ra + LEVELS * rb, col)] = paulis[pa][(ra, la)] * paulis[pb][(rb, lb)] * s;
                        }
                    }
                }
                (true, false) if pb == 0 => {
                    for ra in 0..2 {
                        m[(ra + LEVELS * lb, col)] = paulis[pa][(ra, la)] * w1(pa).sqrt();
                    }
                }
                (false, true) if pa == 0 => {
                    for rb in 0..2 {
                        m[(la + LEVELS * rb, col)] = paulis[pb][(rb, lb)] * w1(pb).sqrt();
                    }
                }
                (false, false) if j == 0 => m[(col, col)] = cr(1.0),
                _ => {}
            }
        }
        kraus.push(m);
    }
    Channel { sites: vec![a, b], kraus }
}

/// Single-qubit depolarizing error with total Pauli probability `p`.
pub fn depolarize1(site: usize, p: f64) -> Channel {
    let kraus = (0..4)
        .map(|k| {
            let w: f64 = if k == 0 { 1.0 - p } else { p / 3.0 };
            let sp = pauli(k);
            let mut m = DMatrix::<C64>::zeros(LEVELS, LEVELS);
            for r in 0..2 {
                for col in 0..2 {
                    m[(r, col)] = sp[(r, col)] * w.sqrt();
                }
            }
            if k == 0 {
                for l in 2..LEVELS {
                    m[(l, l)] = cr(1.0);
                }
            }
            m
        })
        .collect();
    Channel { sites: vec![site], kraus }
}

/// Moves the site to LOST with probability `p`, whatever its level.
pub fn loss_event(site: usize, p: f64) -> Channel {
    let mut kraus = vec![DMatrix::<C64>::identity(LEVELS, LEVELS) * cr((1.0 - p).sqrt())];
    if p > 0.0 {
        for j in 0..LEVELS {
            kraus.push(ket_bra(LEVELS, LOST, j, p.sqrt()));
        }
    }
    Channel { sites: vec![site], kraus }
}

fn rate(tau: f64) -> f64 {
    1.0 / tau
}

/// `(1 - e^{-x t}) / x`, continuous through `x = 0`.
fn relax_integral(x: f64, t: f64) -> f64 {
    if (x * t).abs() < 1e-300 {
        t
    } else {
        -(-x * t).exp_m1() / x
    }
}

/// Evolution over `dt` seconds: RYD is ejected at `1/tau_at` and decays at
/// `1/tau_ryd` into L3/L4; every trapped non-Rydberg level is lost at
/// `1/tau_vac`. The populations follow the exact rate equations, so
/// consecutive holds compose.
pub fn antitrap_and_decay(site: usize, dt: f64, model: &NoiseModel) -> Channel {
    let (ga, gr, gv) = (rate(model.tau_at), rate(model.tau_ryd), rate(model.tau_vac));
    let gamma = ga + gr;
    let keep_trap = (-gv * dt).exp();
    let keep_ryd = (-gamma * dt).exp();
    let decayed = if gr > 0.0 { gr * keep_trap * relax_integral(gamma - gv, dt) } else { 0.0 };
    let to_l3 = model.ryd_decay_l3_fraction * decayed;
    let to_l4 = decayed - to_l3;
    let ryd_lost = (1.0 - keep_ryd - decayed).max(0.0);

    let mut k0 = DMatrix::<C64>::identity(LEVELS, LEVELS);
    for l in [Q0, Q1, L3, L4] {
        k0[(l, l)] = cr(keep_trap.sqrt());
    }
    k0[(RYD, RYD)] = cr(keep_ryd.sqrt());
    let mut kraus = vec![k0];
    let lose = 1.0 - keep_trap;
    if lose > 0.0 {
        for l in [Q0, Q1, L3, L4] {
            kraus.push(ket_bra(LEVELS, LOST, l, lose.sqrt()));
        }
    }
    for (to, p) in [(L3, to_l3), (L4, to_l4), (LOST, ryd_lost)] {
        if p > 0.0 {
            kraus.push(ket_bra(LEVELS, to, RYD, p.sqrt()));
        }
    }
    Channel { sites: vec![site], kraus }
}

/// Blockade spreading during an entangling gate. When exactly one member is
/// RYD and the other is a qubit, the qubit is excited with probability
/// `p_prop`; otherwise it keeps its state up to a Z phase `phase_err`.
pub fn rydberg_propagation(a: usize, b: usize, p_prop: f64, phase_err: f64) -> Channel {
    let d = LEVELS * LEVELS;
    let z = rz(phase_err);
    let stay = (1.0 - p_prop).sqrt();
    let mut k0 = DMatrix::<C64>::zeros(d, d);
    for col in 0..d {
        let (la, lb) = (level_at(col, 0), level_at(col, 1));
        if la == RYD && lb < 2 {
            k0[(la + LEVELS * lb, col)] = z[(lb, lb)] * stay;
        } else if lb == RYD && la < 2 {
            k0[(la + LEVELS * lb, col)] = z[(la, la)] * stay;
        } else {
            k0[(col, col)] = cr(1.0);
        }
    }
    let mut kraus = vec![k0];
    if p_prop > 0.0 {
        let amp = p_prop.sqrt();
        for q in [Q0, Q1] {
            kraus.push(ket_bra(d, RYD + LEVELS * RYD, RYD + LEVELS * q, amp));
            kraus.push(ket_bra(d, RYD + LEVELS * RYD, q + LEVELS * RYD, amp));
        }
    }
    Channel { sites: vec![a, b], kraus }
}

/// Leak pulse: Q0 -> L3 with `p_hfl_0`, Q1 -> L4 with `p_hfl_1`.
pub fn hyperfine_leak_pulse(site: usize, model: &NoiseModel) -> Channel {
    let (p0, p1) = (model.p_hfl_0, model.p_hfl_1);
    let mut k0 = DMatrix::<C64>::identity(LEVELS, LEVELS);
    k0[(Q0, Q0)] = cr((1.0 - p0).sqrt());
    k0[(Q1, Q1)] = cr((1.0 - p1).sqrt());
    Channel {
        sites: vec![site],
        kraus: vec![k0, ket_bra(LEVELS, L3, Q0, p0.sqrt()), ket_bra(LEVELS, L4, Q1, p1.sqrt())],
    }
}

/// Exact average of `R_z(e)` over `e ~ N(0, sigma)`, written as Kraus
/// operators from the eigendecomposition of the coherence damping matrix.
pub fn gaussian_z_average(site: usize, sigma: f64) -> Channel {
    // R_z phases per level: -e/2 on Q0, +e/2 on Q1, 0 elsewhere.
    let w = [-0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
    let damp = DMatrix::<f64>::from_fn(LEVELS, LEVELS, |r, c| (-(sigma * (w[r] - w[c])).powi(2) / 2.0).exp());
    let eig = damp.symmetric_eigen();
    let mut kraus: Vec<(f64, DMatrix<C64>)> = Vec::new();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-15 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let m = DMatrix::<C64>::from_fn(LEVELS, LEVELS, |r, c| if r == c { cr(lam.sqrt() * v[r]) } else { cr(0.0) });
        kraus.push((lam, m));
    }
    kraus.sort_by(|x, y| y.0.total_cmp(&x.0));
    Channel { sites: vec![site], kraus: kraus.into_iter().map(|(_, m)| m).collect() }
}

/// Collapses RYD into LOST; used when a site is read out.
pub fn ryd_to_lost(site: usize) -> Channel {
    let mut keep = DMatrix::<C64>::identity(LEVELS, LEVELS);
    keep[(RYD, RYD)] = cr(0.0);
    Channel { sites: vec![site], kraus: vec![keep, ket_bra(LEVELS, LOST, RYD, 1.0)] }
}

/// Mixture actually prepared when `intended` is requested: the other clock
/// state with probability `eps_prep`, every other level exactly.
pub fn spam_prepare(intended: SiteLevel, model: &NoiseModel) -> Vec<(f64, SiteLevel)> {
    let other = match intended {
        SiteLevel::Q0 => SiteLevel::Q1,
        SiteLevel::Q1 => SiteLevel::Q0,
        l => return vec![(1.0, l)],
    };
    if model.eps_prep > 0.0 {
        vec![(1.0 - model.eps_prep, intended), (model.eps_prep, other)]
    } else {
        vec![(1.0, intended)]
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn infinite_time_constants_survive_json() {
        let m = NoiseModel::noiseless();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"tau_vac\":\"inf\""));
        let back: NoiseModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    use super::*;
    use crate::qstate::{basis_index, level_site, new_register, qubit_site};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn h() -> f64 {
        1.0 / 2f64.sqrt()
    }

    fn plus() -> [C64; LEVELS] {
        qubit_site(c(h(), 0.0), c(h(), 0.0))
    }

    fn all_channels(model: &NoiseModel) -> Vec<Channel> {
        vec![
            depolarize2(0, 1, 0.967),
            depolarize2(1, 0, 0.5),
            depolarize1(0, 0.1),
            loss_event(1, 0.2),
            antitrap_and_decay(0, 17e-6, model),
            antitrap_and_decay(1, 0.3, &NoiseModel { tau_vac: 0.5, ..model.clone() }),
            rydberg_propagation(0, 1, 0.1, FRAC_PI_4),
            hyperfine_leak_pulse(0, model),
            gaussian_z_average(1, 0.3),
            ryd_to_lost(0),
        ]
    }

    #[test]
    fn every_channel_is_trace_preserving() {
        for ch in all_channels(&NoiseModel::default()) {
            assert!(ch.completeness_deviation() < 1e-10, "{:?}", ch.sites);
        }
    }

    #[test]
    fn no_channel_leaves_lost() {
        for ch in all_channels(&NoiseModel::default()) {
            let k = ch.sites.len();
            for m in &ch.kraus {
                for r in 0..m.nrows() {
                    for col in 0..m.ncols() {
                        let from_lost = (0..k).any(|s| level_at(col, s) == LOST && level_at(r, s) != LOST);
                        if from_lost {
                            assert_eq!(m[(r, col)].norm(), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_gate_is_identity() {
        let ch = depolarize2(0, 1, 1.0);
        let mut s = RegisterState::from_site_states(&[plus(), level_site(SiteLevel::Q1)], Mode::Density).unwrap();
        let before = s.clone();
        ch.apply_density(&mut s).unwrap();
        let dev = (s.density_matrix() - before.density_matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-15);
    }

    #[test]
    fn maximally_mixed_stays_mixed() {
        let d = 36;
        let mut rho = vec![c(0.0, 0.0); d * d];
        for a in 0..2 {
            for b in 0..2 {
                let g = a + 6 * b;
                rho[g * d + g] = c(0.25, 0.0);
            }
        }
        let mut s = RegisterState::from_density(2, rho.clone()).unwrap();
        depolarize2(0, 1, 0.8).apply_density(&mut s).unwrap();
        let out = s.density_matrix();
        for r in 0..d {
            for col in 0..d {
                assert!((out[(r, col)] - rho[r * d + col]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn loss_channel_arithmetic() {
        let mut s = RegisterState::from_site_states(&[plus()], Mode::Density).unwrap();
        loss_event(0, 0.1).apply_density(&mut s).unwrap();
        let p = s.level_probabilities();
        assert!((p.get(0, SiteLevel::Lost) - 0.1).abs() < 1e-12);
        assert!((p.get(0, SiteLevel::Q0) - 0.45).abs() < 1e-12);
        assert!((p.get(0, SiteLevel::Q1) - 0.45).abs() < 1e-12);

        let mut s = new_register(&[SiteLevel::Q1], Mode::Density).unwrap();
        loss_event(0, 1.0).apply_density(&mut s).unwrap();
        assert!((s.level_probabilities().get(0, SiteLevel::Lost) - 1.0).abs() < 1e-15);
    }

    fn ryd_only() -> NoiseModel {
        NoiseModel { tau_ryd: f64::INFINITY, tau_vac: f64::INFINITY, ..NoiseModel::default() }
    }

    #[test]
    fn antitrap_one_over_e() {
        let m = ryd_only();
        let mut s = new_register(&[SiteLevel::Ryd], Mode::Density).unwrap();
        antitrap_and_decay(0, 23e-6, &m).apply_density(&mut s).unwrap();
        let p = s.level_probabilities().get(0, SiteLevel::Ryd);
        assert!((p - (-1f64).exp()).abs() < 1e-12);

        let mut s = new_register(&[SiteLevel::Ryd], Mode::Density).unwrap();
        antitrap_and_decay(0, 0.0, &NoiseModel::default()).apply_density(&mut s).unwrap();
        assert_eq!(s.level_probabilities().get(0, SiteLevel::Ryd), 1.0);
    }

    #[test]
    fn antitrap_long_time_branching() {
        let m = NoiseModel { tau_vac: f64::INFINITY, ..NoiseModel::default() };
        let mut s = new_register(&[SiteLevel::Ryd], Mode::Density).unwrap();
        antitrap_and_decay(0, 1.0, &m).apply_density(&mut s).unwrap();
        let p = s.level_probabilities();
        let (ga, gr) = (1.0 / m.tau_at, 1.0 / m.tau_ryd);
        assert!(p.get(0, SiteLevel::Ryd) < 1e-300);
        assert!((p.get(0, SiteLevel::Lost) - ga / (ga + gr)).abs() < 1e-12);
        assert!((p.get(0, SiteLevel::L3) - 0.5 * gr / (ga + gr)).abs() < 1e-12);
    }

    #[test]
    fn antitrap_composes() {
        let m = NoiseModel { tau_vac: 40e-6, ..NoiseModel::default() };
        let start = RegisterState::from_site_states(
            &[[c(0.3, 0.0), c(0.1, 0.2), c(0.2, 0.0), c(0.0, 0.1), c(0.8, 0.0), c(0.3, 0.0)]],
            Mode::Density,
        )
        .unwrap();
        let mut split = start.clone();
        antitrap_and_decay(0, 7e-6, &m).apply_density(&mut split).unwrap();
        antitrap_and_decay(0, 31e-6, &m).apply_density(&mut split).unwrap();
        let mut whole = start.clone();
        antitrap_and_decay(0, 38e-6, &m).apply_density(&mut whole).unwrap();
        let (a, b) = (split.level_probabilities(), whole.level_probabilities());
        for l in 0..LEVELS {
            assert!((a.sites[0][l] - b.sites[0][l]).abs() < 1e-10);
        }
        // degenerate rates: Rydberg loss rate equal to the trap loss rate
        let deg = NoiseModel { tau_vac: 1.0 / (1.0 / 23e-6 + 1.0 / 170e-6), ..NoiseModel::default() };
        let mut s = new_register(&[SiteLevel::Ryd], Mode::Density).unwrap();
        let ch = antitrap_and_decay(0, 10e-6, &deg);
        assert!(ch.completeness_deviation() < 1e-10);
        ch.apply_density(&mut s).unwrap();
        assert!((s.weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn propagation_limits() {
        let idx = |a, b| basis_index(&[a, b]);
        let mut s = new_register(&[SiteLevel::Ryd, SiteLevel::Q1], Mode::Density).unwrap();
        rydberg_propagation(0, 1, 1.0, FRAC_PI_4).apply_density(&mut s).unwrap();
        let g = idx(SiteLevel::Ryd, SiteLevel::Ryd);
        assert!((s.density_matrix()[(g, g)].re - 1.0).abs() < 1e-15);

        let mut s = RegisterState::from_site_states(&[level_site(SiteLevel::Ryd), plus()], Mode::Density).unwrap();
        let before = s.clone();
        rydberg_propagation(0, 1, 0.0, 0.0).apply_density(&mut s).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn leak_pulse_populations() {
        let m = NoiseModel::default();
        let mut s = new_register(&[SiteLevel::Q0], Mode::Density).unwrap();
        hyperfine_leak_pulse(0, &m).apply_density(&mut s).unwrap();
        let p = s.level_probabilities();
        assert!((p.get(0, SiteLevel::L3) - 0.955).abs() < 1e-12);
        assert!((p.get(0, SiteLevel::Q0) - 0.045).abs() < 1e-12);

        let mut s = new_register(&[SiteLevel::Q1], Mode::Density).unwrap();
        hyperfine_leak_pulse(0, &m).apply_density(&mut s).unwrap();
        let p = s.level_probabilities();
        assert!((p.get(0, SiteLevel::L4) - 0.957).abs() < 1e-12);
        assert!((p.get(0, SiteLevel::Q1) - 0.043).abs() < 1e-12);

        let mut s = new_register(&[SiteLevel::L3], Mode::Density).unwrap();
        hyperfine_leak_pulse(0, &m).apply_density(&mut s).unwrap();
        assert_eq!(s.level_probabilities().get(0, SiteLevel::L3), 1.0);
    }

    #[test]
    fn gaussian_z_average_damps_coherence() {
        let sigma = 0.4;
        let mut s = RegisterState::from_site_states(&[plus()], Mode::Density).unwrap();
        gaussian_z_average(0, sigma).apply_density(&mut s).unwrap();
        let m = s.density_matrix();
        assert!((m[(0, 1)].re - 0.5 * (-sigma * sigma / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn spam_mixtures() {
        let m = NoiseModel::default();
        assert_eq!(spam_prepare(SiteLevel::Lost, &m), vec![(1.0, SiteLevel::Lost)]);
        assert_eq!(spam_prepare(SiteLevel::Q0, &NoiseModel::noiseless()), vec![(1.0, SiteLevel::Q0)]);
        let mix = spam_prepare(SiteLevel::Q0, &m);
        assert_eq!(mix[1], (0.005, SiteLevel::Q1));
    }

    #[test]
    fn model_validation_and_overrides() {
        let mut m = NoiseModel::default();
        m.set("f2q", 1.0).unwrap();
        assert_eq!(m.f2q, 1.0);
        assert!(m.set("f2q", 0.0).is_err());
        assert!(NoiseModel::default().set("p_prop", 1.5).is_err());
        assert!(NoiseModel::default().set("nope", 1.0).is_err());
        assert!(NoiseModel::default().set("tau_at", -1.0).is_err());
        for k in NoiseModel::KEYS {
            assert!(NoiseModel::default().field_mut(k).is_some());
        }
    }

    #[test]
    fn bundled_calibration_loads() {
        let m = NoiseModel::calibrated();
        assert_eq!(m.f2q, 0.967);
        assert_eq!(m.p_loss_gate, 0.013);
    }

    /// Trajectory frequencies of every level on every site against the
    /// density-mode populations, 10^5 shots, 4 sigma.
    fn check_channel_agreement(ch: &NoiseAction, start: &RegisterState, seed: u64) {
        let mut exact = start.to_density();
        ch.apply_density(&mut exact).unwrap();
        let probs = exact.level_probabilities();
        let shots = 100_000usize;
        let n = start.n_sites();
        let mut counts = vec![[0usize; LEVELS]; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..shots {
            let mut s = start.clone();
            ch.sample(&mut s, &mut rng).unwrap();
            // read the level of each site by sampling the marginal
            let lp = s.level_probabilities();
            for site in 0..n {
                let u: f64 = rng.random();
                let mut cum = 0.0;
                for l in 0..LEVELS {
                    cum += lp.sites[site][l];
                    if u < cum || l == LEVELS - 1 {
                        counts[site][l] += 1;
                        break;
                    }
                }
            }
        }
        for site in 0..n {
            for l in 0..LEVELS {
                let p = probs.sites[site][l].clamp(0.0, 1.0);
                let f = counts[site][l] as f64 / shots as f64;
                let sigma = (p * (1.0 - p) / shots as f64).sqrt();
                assert!((f - p).abs() <= 4.0 * sigma + 1e-12, "site {site} level {l}: {f} vs {p}");
            }
        }
    }

    #[test]
    fn trajectories_match_density() {
        let m = NoiseModel::default();
        let bell = {
            let mut amps = vec![c(0.0, 0.0); 36];
            amps[0] = c(h(), 0.0);
            amps[7] = c(h(), 0.0);
            RegisterState::from_amplitudes(2, amps).unwrap()
        };
        let ryd_q = RegisterState::from_site_states(&[level_site(SiteLevel::Ryd), plus()], Mode::Pure).unwrap();
        let mixed = RegisterState::from_site_states(
            &[[c(0.5, 0.0), c(0.5, 0.0), c(0.3, 0.0), c(0.2, 0.0), c(0.6, 0.0), c(0.0, 0.0)], plus()],
            Mode::Pure,
        )
        .unwrap();
        let cases: Vec<(NoiseAction, &RegisterState)> = vec![
            (NoiseAction::Kraus(depolarize2(0, 1, 0.9)), &bell),
            (NoiseAction::Kraus(loss_event(1, 0.1)), &bell),
            (NoiseAction::Kraus(rydberg_propagation(0, 1, 0.1, FRAC_PI_4)), &ryd_q),
            (NoiseAction::Kraus(antitrap_and_decay(0, 20e-6, &m)), &mixed),
            (NoiseAction::Kraus(hyperfine_leak_pulse(1, &m)), &mixed),
            (NoiseAction::Kraus(depolarize2(0, 1, 0.9)), &mixed),
            (NoiseAction::GaussianZ { site: 1, sigma: 0.5 }, &mixed),
        ];
        for (i, (ch, start)) in cases.iter().enumerate() {
            check_channel_agreement(ch, start, 1000 + i as u64);
        }
    }

    #[test]
    fn propagation_rate_from_trajectories() {
        let start = new_register(&[SiteLevel::Ryd, SiteLevel::Q1], Mode::Pure).unwrap();
        let ch = rydberg_propagation(0, 1, 0.1, FRAC_PI_4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shots = 100_000;
        let mut hits = 0;
        for _ in 0..shots {
            let mut s = start.clone();
            ch.sample(&mut s, &mut rng).unwrap();
            if s.level_probabilities().get(1, SiteLevel::Ryd) > 0.5 {
                hits += 1;
            }
        }
        let f = hits as f64 / shots as f64;
        let sigma = (0.1f64 * 0.9 / shots as f64).sqrt();
        assert!((f - 0.1).abs() < 3.0 * sigma, "{f}");
    }
}
