//! The acceptance suite: eleven criteria with their tolerances and runtime
//! budgets. Each check returns a report instead of panicking so that the
//! test target and `ldusim verify` print the same lines.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;

use super::scenarios::*;
use crate::circuits::*;
use crate::engine::{derive_seed, run_density, Experiment, Initial};
use crate::error::Result;
use crate::measure::RecordKey;
use crate::noise::NoiseModel;
use crate::qstate::{level_site, state_fidelity, Mode, RegisterState, SiteLevel, LEVELS};
use crate::stats::{fit_ramsey_mle, wilson_interval, ScanData, ScanPoint};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for Options {
    fn default() -> Options {
        Options { seed: DEFAULT_SEED, workers: None }
    }
}

#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] C{} {} ({:.1} s of {:.0} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.budget,
            self.detail
        )
    }
}

pub const CRITERIA: [(u8, &str, f64); 11] = [
    (1, "noiseless truth tables", 5.0),
    (2, "process matrix block structure", 1.0),
    (3, "engine equivalence", 120.0),
    (4, "logic table reproduction", 30.0),
    (5, "ramsey contrast", 60.0),
    (6, "anti-trapping time", 30.0),
    (7, "bell pipeline", 120.0),
    (8, "teleportation LDU", 120.0),
    (9, "hyperfine composition", 60.0),
    (10, "ancilla-loss contrast", 10.0),
    (11, "estimator oracles", 120.0),
];

/// Outcome of the numerical part of one criterion.
struct Check {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: String) -> Result<Check> {
    Ok(Check { passed, detail })
}

pub fn run_criterion(id: u8, opts: &Options) -> CriterionReport {
    let (_, name, budget) = CRITERIA[(id - 1) as usize];
    let start = Instant::now();
    let out = match id {
        1 => truth_tables(),
        2 => process_matrices(),
        3 => engine_equivalence(opts),
        4 => logic_table(opts),
        5 => ramsey_contrast(opts),
        6 => antitrap_time(opts),
        7 => bell_pipeline(opts),
        8 => teleportation(opts),
        9 => hyperfine_composition(opts),
        10 => ancilla_loss_contrast(opts),
        11 => estimator_oracles(opts),
        _ => unreachable!("criterion {id}"),
    };
    let seconds = start.elapsed().as_secs_f64();
    let (passed, mut detail) = match out {
        Ok(c) => (c.passed, c.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = seconds <= budget;
    if !in_time {
        detail.push_str("; over runtime budget");
    }
    CriterionReport { id, name, passed: passed && in_time, detail, seconds, budget }
}

pub fn run_all(opts: &Options) -> Vec<CriterionReport> {
    CRITERIA.iter().map(|&(id, _, _)| run_criterion(id, opts)).collect()
}

fn ctx(model: NoiseModel, shots: u64, opts: &Options) -> Ctx {
    let mut c = Ctx::new(model, shots, opts.seed, Engine::Trajectory);
    c.workers = opts.workers;
    c
}

fn metric(sections: &[super::results::Section], section: &str, name: &str) -> f64 {
    sections
        .iter()
        .find(|s| s.name == section)
        .and_then(|s| s.metric(name))
        .map(|m| m.value)
        .unwrap_or(f64::NAN)
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn one_site(site: &[C64; LEVELS]) -> Result<RegisterState> {
    RegisterState::from_site_states(&[*site], Mode::Pure)
}

/// Largest violation of the declared semantics of one kind and data
/// condition: missing flag probability or infidelity of the output site.
pub fn semantics_deviation(kind: LduKind, cond: DataCondition) -> Result<f64> {
    let exp = Experiment::new(
        kind.name(),
        build_ldu(kind),
        Initial::Sites(vec![cond.site(), kind.ancilla_input().site()]),
        NoiseModel::noiseless(),
    )?;
    let want = expected(kind, cond);
    let branches = run_density(&exp)?;
    let flag_ok = |k: &RecordKey| match (want.flag, k.outcome(want.flag_site)) {
        (ExpectedOutcome::Exactly(o), Some(got)) => o == got,
        (ExpectedOutcome::Detected, Some(got)) => got.is_present(),
        _ => false,
    };
    let p_flag: f64 = branches.iter().filter(|b| flag_ok(&b.key)).map(|b| b.probability).sum();
    let (site, target) = match want.state {
        ExpectedState::Input(s) => (s, cond.site()),
        ExpectedState::Qubit(s, t) => (s, t.site()),
        ExpectedState::Level(s, l) => (s, level_site(l)),
    };
    let target = one_site(&target)?;
    let mut worst: f64 = (1.0 - p_flag).abs();
    for b in branches.iter().filter(|b| b.probability > 1e-12) {
        let f = state_fidelity(&target, &b.state.partial_trace(&[site])?)?;
        worst = worst.max(1.0 - f);
    }
    Ok(worst)
}

pub fn truth_table_conditions() -> Vec<DataCondition> {
    let mut v: Vec<DataCondition> = BlochTarget::ALL.iter().map(|&t| DataCondition::Present(t)).collect();
    v.extend([DataCondition::Lost, DataCondition::L3, DataCondition::L4]);
    v
}

fn truth_tables() -> Result<Check> {
    let mut worst = (0.0, String::new());
    let mut cases = 0;
    for kind in LduKind::ALL {
        for cond in truth_table_conditions() {
            let d = semantics_deviation(kind, cond)?;
            cases += 1;
            if d >= worst.0 {
                worst = (d, format!("{} / {}", kind.name(), cond.label()));
            }
        }
    }
    check(worst.0 < 1e-9, format!("{cases} cases, worst deviation {:.2e} ({})", worst.0, worst.1))
}

fn process_matrices() -> Result<Check> {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in LduKind::ALL.into_iter().filter(|k| k.is_standard()) {
        let b = check_block_structure(&extract_process_matrix(kind)?);
        ok &= b.max_dev() < 1e-9;
        parts.push(format!("{} {:.1e} (phase {:.3})", kind.name(), b.max_dev(), b.leak_phase));
    }
    check(ok, format!("max deviation: {}", parts.join(", ")))
}

fn engine_equivalence(opts: &Options) -> Result<Check> {
    const SHOTS: u64 = 100_000;
    let mut c = ctx(NoiseModel::calibrated(), SHOTS, opts);
    c.compare = true;
    let settings: Vec<(&str, CircuitSpec, Initial)> = vec![
        ("table2/present", table2_circuit(BlochTarget::MinusY), Initial::Levels(vec![SiteLevel::Q0; 2])),
        ("table2/absent", table2_circuit(BlochTarget::MinusY), Initial::Levels(vec![SiteLevel::Lost, SiteLevel::Q0])),
        ("bell/1/populations", bell_circuit(1, None)?, Initial::Levels(vec![SiteLevel::Q0; 2])),
        ("bell/1/parity", bell_circuit(1, Some(PI / 4.0))?, Initial::Levels(vec![SiteLevel::Q0; 2])),
        ("teleport/basis/0", teleport_basis_circuit(BlochTarget::Zero), Initial::Levels(vec![SiteLevel::Q0; 2])),
        ("teleport/fringe/-x", teleport_fringe_circuit(BlochTarget::MinusX, 0.0), Initial::Levels(vec![SiteLevel::Q0; 2])),
    ];
    for (label, circuit, init) in settings {
        c.tally(label, circuit, init, SHOTS)?;
    }
    let cmp = c.take_comparisons();
    let worst = cmp.iter().max_by(|a, b| a.max_z.total_cmp(&b.max_z)).expect("settings");
    check(
        cmp.iter().all(|e| e.within_4_sigma),
        format!("{} settings x {SHOTS} shots, largest deviation {:.2} sigma ({})", cmp.len(), worst.max_z, worst.label),
    )
}

fn logic_table(opts: &Options) -> Result<Check> {
    let s = table2(&ctx(NoiseModel::calibrated(), 2000, opts))?;
    let p = metric(&s, "table2", "present_accuracy");
    let a = metric(&s, "table2", "absent_accuracy");
    let x = metric(&s, "table2", "ancilla_exclusion_rate");
    check(
        within(p, 0.92, 0.96) && within(a, 0.91, 0.955) && within(x, 0.07, 0.13),
        format!("present {p:.4} [0.92, 0.96], absent {a:.4} [0.91, 0.955], exclusion {x:.4} [0.07, 0.13]"),
    )
}

fn ramsey_contrast(opts: &Options) -> Result<Check> {
    let s = ramsey(&ctx(NoiseModel::calibrated(), 500, opts))?;
    let c0 = metric(&s, "ramsey/no_ldu", "contrast");
    let c1 = metric(&s, "ramsey/ldu", "contrast");
    check(c0 >= 0.97 && within(c1, 0.90, 0.96), format!("no LDU {c0:.4} (>= 0.97), with LDU {c1:.4} [0.90, 0.96]"))
}

fn antitrap_time(opts: &Options) -> Result<Check> {
    let model = NoiseModel::calibrated();
    let injected = model.tau_at;
    let s = antitrap(&ctx(model, 10_000, opts))?;
    let t = metric(&s, "antitrap", "antitrap_time");
    let rel = (t / injected - 1.0).abs();
    check(rel <= 0.05, format!("fitted {:.2} us vs injected {:.2} us ({:.1}%)", t * 1e6, injected * 1e6, 100.0 * rel))
}

/// Bell fidelity after one gate with only the two-qubit gate error.
pub fn gate_only_model(f2q: f64) -> NoiseModel {
    let mut m = NoiseModel::noiseless();
    m.f2q = f2q;
    m
}

fn bell_pipeline(opts: &Options) -> Result<Check> {
    let calibrated = NoiseModel::calibrated();
    let gate = bell_point(&ctx(gate_only_model(calibrated.f2q), 50_000, opts), 1)?;
    let f1 = gate.metric("fidelity").map_or(f64::NAN, |m| m.value);
    let c = ctx(calibrated.clone(), 4000, opts);
    let mut points = Vec::new();
    for n in BELL_LOOPS {
        points.push(bell_point(&c, n)?);
    }
    let decay = bell_decay(&c, &points, &BELL_LOOPS)?;
    let tau = decay.metric("decay_loops").map_or(f64::NAN, |m| m.value);
    let f1_cal = points[0].metric("fidelity").map_or(f64::NAN, |m| m.value);
    check(
        (f1 - calibrated.f2q).abs() <= 0.01 && within(tau, 25.0, 35.0),
        format!(
            "gate-error fidelity {f1:.4} (0.967 +/- 0.01), decay {tau:.1} loops [25, 35]; calibrated single-loop fidelity {f1_cal:.4}"
        ),
    )
}

/// Worst per-branch infidelity between the ancilla and the data input
/// after a noiseless teleport, over the six cardinal inputs.
pub fn teleport_transfer_deviation(kind: LduKind) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in BlochTarget::ALL {
        let exp = Experiment::new(
            kind.name(),
            build_ldu(kind),
            Initial::Sites(vec![t.site(), kind.ancilla_input().site()]),
            NoiseModel::noiseless(),
        )?;
        let want = one_site(&t.site())?;
        for b in run_density(&exp)?.iter().filter(|b| b.probability > 1e-12) {
            worst = worst.max(1.0 - state_fidelity(&want, &b.state.partial_trace(&[ANCILLA])?)?);
        }
    }
    Ok(worst)
}

fn teleportation(opts: &Options) -> Result<Check> {
    let dev = teleport_transfer_deviation(LduKind::TeleportNative)?.max(teleport_transfer_deviation(LduKind::TeleportCanonical)?);
    let c = ctx(NoiseModel::calibrated(), 2000, opts);
    let s = teleport(&c)?;
    let basis = s.iter().find(|s| s.name == "teleport/basis").expect("basis section");
    let success = metric(&s, "teleport/basis", "transfer_success");
    let p0 = metric(&s, "teleport/basis", "lost_branch_p_zero");
    let n_lost = basis.metric("lost_branch_shots").map_or(0.0, |m| m.value);
    let bound = 4.0 * (0.25 / n_lost).sqrt();
    let cx = metric(&s, "teleport/fringe/-x", "contrast");
    let cy = metric(&s, "teleport/fringe/+y", "contrast");
    check(
        dev < 1e-9 && within(success, 0.94, 0.975) && (p0 - 0.5).abs() <= bound && within(cx, 0.87, 0.95) && within(cy, 0.87, 0.95),
        format!(
            "noiseless infidelity {dev:.1e}, basis success {success:.4} [0.94, 0.975], lost-branch P(0) {p0:.4} (0.5 +/- {bound:.4}, {n_lost:.0} shots), fringes -x {cx:.4} +y {cy:.4} [0.87, 0.95]"
        ),
    )
}

fn hyperfine_composition(opts: &Options) -> Result<Check> {
    let s = hyperfine(&ctx(NoiseModel::calibrated(), 2000, opts))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, lo, hi) in [("hyperfine/F3", 0.85, 0.93), ("hyperfine/F4", 0.83, 0.91)] {
        let r = metric(&s, name, "flag_rate");
        let comp = metric(&s, name, "composed_flag_rate");
        let n = metric(&s, name, "accepted");
        let sigma = (comp * (1.0 - comp) / n).sqrt();
        let z = (r - comp).abs() / sigma;
        ok &= z <= 3.0 && within(r, lo, hi);
        parts.push(format!("{} {r:.4} [{lo}, {hi}] vs composed {comp:.4} ({z:.2} sigma)", &name[10..]));
    }
    check(ok, parts.join(", "))
}

fn ancilla_loss_contrast(opts: &Options) -> Result<Check> {
    let noiseless = NoiseModel::noiseless();
    let (mut worst_std, mut worst_raw) = (0.0f64, 0.0f64);
    let mut ok = true;
    let (mut max_best, mut min_gap) = (0.0f64, f64::INFINITY);
    for psi in random_inputs(opts.seed, RANDOM_INPUTS) {
        let (fixed, raw) = standard_with_lost_ancilla(LduKind::StandardNative, &psi, &noiseless)?;
        worst_std = worst_std.max(1.0 - fixed);
        worst_raw = worst_raw.max(1.0 - raw);
        let (expected, best) = swap_with_lost_ancilla(&psi, &noiseless)?;
        ok &= expected <= best + 1e-12 && best < 1.0 - 1e-9;
        max_best = max_best.max(best);
        min_gap = min_gap.min(1.0 - best);
    }
    check(
        ok && worst_std < 1e-9,
        format!(
            "{RANDOM_INPUTS} inputs: standard infidelity {worst_std:.1e} after the heralded Pauli ({worst_raw:.3} before); swap best branch <= {max_best:.4}"
        ),
    )
}

/// Wilson bounds as the roots of the score quadratic
/// (n + z^2) p^2 - (2k + z^2) p + k^2/n = 0.
pub fn wilson_roots(k: u64, n: u64, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let a = n + z * z;
    let b = -(2.0 * k + z * z);
    let c = k * k / n;
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    // stable pair of roots
    let q = -0.5 * (b - disc);
    let (r1, r2) = (q / a, if q != 0.0 { c / q } else { 0.0 });
    (r1.min(r2), r1.max(r2))
}

/// Fraction of seeded replications whose likelihood interval for the
/// contrast covers the true value.
pub fn mle_coverage(truth: f64, reps: usize, shots: u64, points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mle_coverage"));
    let mut covered = 0;
    for _ in 0..reps {
        let pts: Vec<ScanPoint> = (0..points)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / points as f64;
                let p = 0.5 + 0.5 * truth * phi.cos();
                let k = rng.sample(Binomial::new(shots, p).expect("probability in range"));
                ScanPoint { phi_rad: phi, n: shots, k }
            })
            .collect();
        let fit = fit_ramsey_mle(&ScanData::new(pts)?)?;
        let c = fit.param("contrast")?;
        if c.lo <= truth && truth <= c.hi {
            covered += 1;
        }
    }
    Ok(covered as f64 / reps as f64)
}

fn estimator_oracles(opts: &Options) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for n in 1..=200u64 {
        for k in 0..=n {
            let w = wilson_interval(k, n, 1.0)?;
            let (lo, hi) = wilson_roots(k, n, 1.0);
            worst = worst.max((w.lo - lo).abs()).max((w.hi - hi).abs());
        }
    }
    let cov = mle_coverage(0.93, 200, 500, RAMSEY_POINTS, opts.seed)?;
    check(
        worst <= 1e-12 && within(cov, 0.60, 0.76),
        format!("wilson max deviation {worst:.1e} over n <= 200, mle coverage {:.1}% [60%, 76%]", 100.0 * cov),
    )
}
