//! Trajectory and density-matrix execution of a circuit.
//!
//! A circuit is first compiled against a noise model: the phase frame does
//! not depend on measurement outcomes, so every gate becomes a fixed list of
//! local unitaries and every hook a fixed list of channels. Both engines then
//! walk the same op list.
//!
//! Trajectory shots are independent. Shot `i` of an experiment draws from
//! `ChaCha8Rng::seed_from_u64(derive_seed(master, label))` with stream `i`,
//! so results do not depend on the number of workers.
//!
//! The density engine keeps one unnormalized density matrix per classical
//! record; measurement splits branches and feedback acts per branch.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::circuits::{CircuitSpec, Step};
use crate::error::{LduError, Result};
use crate::gates::{apply_feedback, gate_factors, rydberg_pi, GateOp, LocalOp, PhaseFrame};
use crate::measure::{feedback_bit, llsd, llsd_branches, FeedbackBit, Outcome, RecordKey, ShotRecord};
use crate::noise::{antitrap_and_decay, hyperfine_leak_pulse, spam_prepare, NoiseAction, NoiseModel};
use crate::qstate::{level_site, Mode, RegisterState, SiteLevel, LEVELS};

/// Starting point of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Initial {
    /// Each site is prepared in a level, subject to preparation error.
    Levels(Vec<SiteLevel>),
    /// Exact product state, no preparation error.
    Sites(Vec<[C64; LEVELS]>),
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub label: String,
    pub circuit: CircuitSpec,
    pub initial: Initial,
    pub model: NoiseModel,
}

impl Experiment {
    pub fn new(label: &str, circuit: CircuitSpec, initial: Initial, model: NoiseModel) -> Result<Experiment> {
        circuit.validate()?;
        model.validate()?;
        let n = match &initial {
            Initial::Levels(l) => l.len(),
            Initial::Sites(s) => s.len(),
        };
        if n != circuit.n_sites() {
            return Err(LduError::DimensionMismatch { expected: circuit.n_sites(), got: n });
        }
        Ok(Experiment { label: label.into(), circuit, initial, model })
    }

    /// Both sites start in Q0.
    pub fn ground(label: &str, circuit: CircuitSpec, model: NoiseModel) -> Result<Experiment> {
        let n = circuit.n_sites();
        Experiment::new(label, circuit, Initial::Levels(vec![SiteLevel::Q0; n]), model)
    }

    pub fn compile(&self) -> Result<Compiled> {
        Compiled::new(&self.circuit, &self.model)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Unitary(LocalOp),
    Noise(Vec<NoiseAction>),
    Measure(usize),
    Feedback { site: usize, source: usize },
}

/// A circuit lowered to fixed operators under one noise model.
#[derive(Clone, Debug)]
pub struct Compiled {
    ops: Vec<Op>,
    frame: PhaseFrame,
    model: NoiseModel,
}

impl Compiled {
    pub fn new(spec: &CircuitSpec, model: &NoiseModel) -> Result<Compiled> {
        let n = spec.n_sites();
        let roles = &spec.roles;
        let mut frame = PhaseFrame::new(n);
        let mut ops = Vec::new();
        for step in &spec.steps {
            match *step {
                Step::Gate(GateOp::FeedbackZ { site, source }) => ops.push(Op::Feedback { site, source }),
                Step::Gate(g) => {
                    for f in gate_factors(&g, &frame, roles, model.eps_area)? {
                        ops.push(Op::Unitary(f));
                    }
                    if let GateOp::VirtualZ { theta, target } = g {
                        frame.advance(target, theta);
                    }
                }
                Step::Noise(h) => {
                    let acts = model.actions_for_hook(&h, roles);
                    if !acts.is_empty() {
                        ops.push(Op::Noise(acts));
                    }
                }
                Step::Measure { site } => ops.push(Op::Measure(site)),
                Step::Hold { seconds } => {
                    let acts = (0..n).map(|s| NoiseAction::Kraus(antitrap_and_decay(s, seconds, model))).collect();
                    ops.push(Op::Noise(acts));
                }
                Step::LeakPulse { site } => {
                    ops.push(Op::Noise(vec![NoiseAction::Kraus(hyperfine_leak_pulse(site, model))]));
                }
                Step::RydbergPi { site } => ops.push(Op::Unitary(LocalOp { sites: vec![site], matrix: rydberg_pi() })),
            }
        }
        Ok(Compiled { ops, frame, model: model.clone() })
    }

    /// Phase frame at the end of the circuit.
    pub fn final_frame(&self) -> &PhaseFrame {
        &self.frame
    }
}

/// Deterministic per-experiment seed: FNV-1a of the label mixed into the
/// master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    master ^ h
}

pub fn shot_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One trajectory: its record and the final state with the frame applied.
#[derive(Clone, Debug)]
pub struct Shot {
    pub key: RecordKey,
    pub state: RegisterState,
}

fn sample_initial<R: Rng + ?Sized>(exp: &Experiment, rng: &mut R) -> Result<RegisterState> {
    let sites: Vec<[C64; LEVELS]> = match &exp.initial {
        Initial::Sites(s) => s.clone(),
        Initial::Levels(levels) => levels
            .iter()
            .map(|&l| {
                let mix = spam_prepare(l, &exp.model);
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut pick = mix[mix.len() - 1].1;
                for (p, lvl) in mix {
                    cum += p;
                    if u < cum {
                        pick = lvl;
                        break;
                    }
                }
                level_site(pick)
            })
            .collect(),
    };
    RegisterState::from_site_states(&sites, Mode::Pure)?.with_roles(&exp.circuit.roles)
}

pub fn run_shot(exp: &Experiment, compiled: &Compiled, seed: u64, stream: u64) -> Result<Shot> {
    let mut rng = shot_rng(seed, stream);
    let mut state = sample_initial(exp, &mut rng)?;
    let mut key = RecordKey::new(state.n_sites());
    for op in &compiled.ops {
        match op {
            Op::Unitary(f) => state.apply_local(&f.matrix, &f.sites),
            Op::Noise(acts) => {
                for a in acts {
                    a.sample(&mut state, &mut rng)?;
                }
            }
            Op::Measure(site) => {
                let (o, kept) = llsd(&mut state, *site, &compiled.model, &mut rng)?;
                key.outcomes[*site] = Some(o);
                key.retained[*site] = Some(kept);
            }
            Op::Feedback { site, source } => {
                let bit = feedback_bit(key.outcomes[*source].unwrap_or(Outcome::Neither));
                apply_feedback(&mut state, *site, bit == FeedbackBit::ApplyZ)?;
                key.feedback.push(bit);
            }
        }
    }
    compiled.frame.materialize(&mut state);
    Ok(Shot { key, state })
}

/// Runs `shots` trajectories on `workers` threads (all cores if `None`).
pub fn run_trajectories(exp: &Experiment, shots: u64, master_seed: u64, workers: Option<usize>) -> Result<Vec<ShotRecord>> {
    let compiled = exp.compile()?;
    let seed = derive_seed(master_seed, &exp.label);
    let one = |i: u64| -> Result<ShotRecord> {
        let shot = run_shot(exp, &compiled, seed, i)?;
        Ok(ShotRecord { index: i, key: shot.key, seed, stream: i })
    };
    let work = || (0..shots).into_par_iter().map(one).collect::<Result<Vec<_>>>();
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| LduError::InvalidParameter(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// One classical record of the density engine with its probability and the
/// normalized conditional state (frame applied).
#[derive(Clone, Debug)]
pub struct Branch {
    pub key: RecordKey,
    pub probability: f64,
    pub state: RegisterState,
}

fn initial_density(exp: &Experiment) -> Result<RegisterState> {
    let roles = &exp.circuit.roles;
    match &exp.initial {
        Initial::Sites(s) => RegisterState::from_site_states(s, Mode::Density)?.with_roles(roles),
        Initial::Levels(levels) => {
            let mixes: Vec<Vec<(f64, SiteLevel)>> = levels.iter().map(|&l| spam_prepare(l, &exp.model)).collect();
            let mut combos: Vec<(f64, Vec<SiteLevel>)> = vec![(1.0, Vec::new())];
            for mix in &mixes {
                combos = combos
                    .into_iter()
                    .flat_map(|(p, ls)| {
                        mix.iter().map(move |&(q, l)| {
                            let mut ls = ls.clone();
                            ls.push(l);
                            (p * q, ls)
                        })
                    })
                    .collect();
            }
            let mut acc: Option<RegisterState> = None;
            for (p, ls) in combos {
                let sites: Vec<[C64; LEVELS]> = ls.iter().map(|&l| level_site(l)).collect();
                let mut part = RegisterState::from_site_states(&sites, Mode::Density)?;
                part.scale(p);
                match acc.as_mut() {
                    Some(a) => a.accumulate(&part),
                    None => acc = Some(part),
                }
            }
            acc.ok_or(LduError::EmptyRegister)?.with_roles(roles)
        }
    }
}

/// Exact outcome distribution; branches come back sorted by record key.
pub fn run_density(exp: &Experiment) -> Result<Vec<Branch>> {
    let compiled = exp.compile()?;
    let rho = initial_density(exp)?;
    let mut branches: BTreeMap<RecordKey, RegisterState> = BTreeMap::new();
    branches.insert(RecordKey::new(rho.n_sites()), rho);
    for op in &compiled.ops {
        match op {
            Op::Unitary(f) => branches.values_mut().for_each(|s| s.apply_local(&f.matrix, &f.sites)),
            Op::Noise(acts) => {
                for s in branches.values_mut() {
                    for a in acts {
                        a.apply_density(s)?;
                    }
                }
            }
            Op::Measure(site) => {
                let mut next: BTreeMap<RecordKey, RegisterState> = BTreeMap::new();
                for (key, s) in branches {
                    for (o, kept, part) in llsd_branches(&s, *site, &compiled.model)? {
                        if part.weight() <= 0.0 {
                            continue;
                        }
                        let mut k = key.clone();
                        k.outcomes[*site] = Some(o);
                        k.retained[*site] = Some(kept);
                        match next.get_mut(&k) {
                            Some(acc) => acc.accumulate(&part),
                            None => {
                                next.insert(k, part);
                            }
                        }
                    }
                }
                branches = next;
            }
            Op::Feedback { site, source } => {
                let mut next = BTreeMap::new();
                for (mut key, mut s) in branches {
                    let bit = feedback_bit(key.outcomes[*source].unwrap_or(Outcome::Neither));
                    apply_feedback(&mut s, *site, bit == FeedbackBit::ApplyZ)?;
                    key.feedback.push(bit);
                    next.insert(key, s);
                }
                branches = next;
            }
        }
    }
    let mut out = Vec::with_capacity(branches.len());
    for (key, mut state) in branches {
        let p = state.weight();
        if p <= 0.0 {
            continue;
        }
        compiled.frame.materialize(&mut state);
        state.normalize();
        out.push(Branch { key, probability: p, state });
    }
    Ok(out)
}

/// Total probability of the branches matching `pred`.
pub fn probability_where(branches: &[Branch], pred: impl Fn(&RecordKey) -> bool) -> f64 {
    branches.iter().filter(|b| pred(&b.key)).map(|b| b.probability).sum()
}

/// Probability-weighted mixture of the matching branch states, renormalized.
pub fn conditional_state(branches: &[Branch], pred: impl Fn(&RecordKey) -> bool) -> Option<RegisterState> {
    let mut acc: Option<RegisterState> = None;
    let mut total = 0.0;
    for b in branches.iter().filter(|b| pred(&b.key)) {
        let mut part = b.state.to_density();
        part.scale(b.probability);
        total += b.probability;
        match acc.as_mut() {
            Some(a) => a.accumulate(&part),
            None => acc = Some(part),
        }
    }
    let mut s = acc?;
    if total <= 0.0 {
        return None;
    }
    s.normalize();
    Some(s)
}

/// Agreement between sampled record frequencies and exact probabilities.
#[derive(Clone, Debug)]
pub struct EngineComparison {
    pub shots: u64,
    /// Largest `|f - p| / sigma` over all records seen by either engine.
    pub max_z: f64,
    pub worst: Option<RecordKey>,
}

impl EngineComparison {
    pub fn agrees(&self, z: f64) -> bool {
        self.max_z <= z
    }
}

/// Compares frequencies per record key. `sigma` is the binomial standard
/// error at the exact probability, floored at `1/N`.
pub fn compare_engines(records: &[ShotRecord], branches: &[Branch]) -> EngineComparison {
    let n = records.len() as f64;
    let mut counts: BTreeMap<&RecordKey, u64> = BTreeMap::new();
    for r in records {
        *counts.entry(&r.key).or_default() += 1;
    }
    let exact: BTreeMap<&RecordKey, f64> = branches.iter().map(|b| (&b.key, b.probability)).collect();
    let mut keys: Vec<&RecordKey> = counts.keys().copied().collect();
    keys.extend(exact.keys().copied());
    keys.sort();
    keys.dedup();
    let mut max_z: f64 = 0.0;
    let mut worst = None;
    for k in keys {
        let f = counts.get(k).copied().unwrap_or(0) as f64 / n;
        let p = exact.get(k).copied().unwrap_or(0.0);
        let sigma = (p * (1.0 - p) / n).sqrt().max(1.0 / n);
        let z = (f - p).abs() / sigma;
        if z > max_z {
            max_z = z;
            worst = Some(k.clone());
        }
    }
    EngineComparison { shots: records.len() as u64, max_z, worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_bell_fidelity, build_ldu, with_idle, LduKind};

    #[test]
    fn noiseless_standard_ldu_never_flags_present_data() {
        let exp = Experiment::ground("t", build_ldu(LduKind::StandardNative), NoiseModel::noiseless()).unwrap();
        let br = run_density(&exp).unwrap();
        assert_eq!(br.len(), 1);
        assert_eq!(br[0].key.outcome(1), Some(Outcome::Zero));
        assert!((br[0].probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_probabilities_sum_to_one() {
        let spec = with_idle(&build_bell_fidelity(3, Some(0.7)).unwrap());
        let exp = Experiment::ground("t", spec, NoiseModel::calibrated()).unwrap();
        let br = run_density(&exp).unwrap();
        let total: f64 = br.iter().map(|b| b.probability).sum();
        assert!((total - 1.0).abs() < 1e-10, "{total}");
        for b in &br {
            b.state.validate().unwrap();
        }
    }

    #[test]
    fn trajectories_are_independent_of_worker_count() {
        let exp = Experiment::ground("w", with_idle(&build_ldu(LduKind::TeleportNative)), NoiseModel::calibrated()).unwrap();
        let a = run_trajectories(&exp, 300, 11, Some(1)).unwrap();
        let b = run_trajectories(&exp, 300, 11, Some(3)).unwrap();
        assert_eq!(a, b);
        let c = run_trajectories(&exp, 300, 12, Some(3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seed_derivation_separates_labels() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }

    #[test]
    fn engines_agree_under_calibrated_noise() {
        let exp = Experiment::ground("agree", with_idle(&build_ldu(LduKind::StandardNative)), NoiseModel::calibrated()).unwrap();
        let recs = run_trajectories(&exp, 20_000, 3, None).unwrap();
        let br = run_density(&exp).unwrap();
        let cmp = compare_engines(&recs, &br);
        assert!(cmp.agrees(4.0), "{cmp:?}");
    }

    #[test]
    fn size_mismatch_rejected() {
        let r = Experiment::new("x", build_ldu(LduKind::Swap), Initial::Levels(vec![SiteLevel::Q0]), NoiseModel::noiseless());
        assert!(matches!(r, Err(LduError::DimensionMismatch { .. })));
    }
}
