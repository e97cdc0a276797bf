//! Three-outcome state detection, feedback bits, records and postselection.
//!
//! Outcome map: {Q1, L4} read ONE, {Q0, L3} read ZERO, LOST reads NEITHER.
//! A Rydberg atom is ejected long before the detection window closes, so
//! RYD is first converted to LOST and reads NEITHER as well. Reported ZERO
//! and ONE are swapped with probability `eps_read`; an atom that was seen can
//! still be lost during the measurement (`p_meas_loss`), which clears its
//! retained flag but not its outcome.
//!
//! # Shot record lines
//!
//! A record file starts with `#ldu-shots v1 sites=<n>` and then holds one
//! record per line, five space-separated fields:
//!
//! ```text
//! <index> <outcomes> <retained> <feedback> <seed>/<stream>
//! 17 0N 10 - 7/3
//! ```
//!
//! `outcomes` has one character per site: `0`, `1`, `N`, or `-` for a site
//! that was not measured. `retained` uses `1`, `0`, `-` per site. `feedback`
//! has one character per feedback gate in circuit order (`0` no correction,
//! `1` Z applied, `E` erasure flagged), or a single `-` if there were none.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};
use crate::noise::{loss_event, ryd_to_lost, NoiseModel};
use crate::qstate::{Mode, RegisterState, SiteLevel, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Zero,
    One,
    Neither,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Zero, Outcome::One, Outcome::Neither];

    pub fn letter(self) -> char {
        match self {
            Outcome::Zero => '0',
            Outcome::One => '1',
            Outcome::Neither => 'N',
        }
    }

    pub fn from_letter(c: char) -> Option<Outcome> {
        match c {
            '0' => Some(Outcome::Zero),
            '1' => Some(Outcome::One),
            'N' => Some(Outcome::Neither),
            _ => None,
        }
    }

    pub fn is_present(self) -> bool {
        self != Outcome::Neither
    }

    fn flipped(self) -> Outcome {
        match self {
            Outcome::Zero => Outcome::One,
            Outcome::One => Outcome::Zero,
            Outcome::Neither => Outcome::Neither,
        }
    }

    /// Levels that produce this outcome before misclassification.
    fn levels(self) -> [bool; LEVELS] {
        let mut keep = [false; LEVELS];
        for l in SiteLevel::ALL {
            keep[l.index()] = ideal_outcome(l) == self;
        }
        keep
    }
}

/// Outcome of an ideal detection of a site in `level`.
pub fn ideal_outcome(level: SiteLevel) -> Outcome {
    match level {
        SiteLevel::Q0 | SiteLevel::L3 => Outcome::Zero,
        SiteLevel::Q1 | SiteLevel::L4 => Outcome::One,
        SiteLevel::Ryd | SiteLevel::Lost => Outcome::Neither,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackBit {
    NoCorrection,
    ApplyZ,
    Erasure,
}

impl FeedbackBit {
    pub fn letter(self) -> char {
        match self {
            FeedbackBit::NoCorrection => '0',
            FeedbackBit::ApplyZ => '1',
            FeedbackBit::Erasure => 'E',
        }
    }

    fn from_letter(c: char) -> Option<FeedbackBit> {
        match c {
            '0' => Some(FeedbackBit::NoCorrection),
            '1' => Some(FeedbackBit::ApplyZ),
            'E' => Some(FeedbackBit::Erasure),
            _ => None,
        }
    }
}

pub fn feedback_bit(outcome: Outcome) -> FeedbackBit {
    match outcome {
        Outcome::Zero => FeedbackBit::NoCorrection,
        Outcome::One => FeedbackBit::ApplyZ,
        Outcome::Neither => FeedbackBit::Erasure,
    }
}

/// The classical content of one shot, without its bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub outcomes: Vec<Option<Outcome>>,
    pub retained: Vec<Option<bool>>,
    pub feedback: Vec<FeedbackBit>,
}

impl RecordKey {
    pub fn new(n: usize) -> RecordKey {
        RecordKey { outcomes: vec![None; n], retained: vec![None; n], feedback: Vec::new() }
    }

    pub fn outcome(&self, site: usize) -> Option<Outcome> {
        self.outcomes[site]
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let outs: String = self.outcomes.iter().map(|o| o.map_or('-', Outcome::letter)).collect();
        let ret: String = self
            .retained
            .iter()
            .map(|r| match r {
                None => '-',
                Some(true) => '1',
                Some(false) => '0',
            })
            .collect();
        let fb: String = if self.feedback.is_empty() {
            "-".into()
        } else {
            self.feedback.iter().map(|b| b.letter()).collect()
        };
        write!(f, "{outs} {ret} {fb}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub index: u64,
    pub key: RecordKey,
    /// Master seed and stream the shot's generator was derived from.
    pub seed: u64,
    pub stream: u64,
}

pub const RECORD_SCHEMA: &str = "#ldu-shots v1";

impl ShotRecord {
    pub fn to_line(&self) -> String {
        format!("{} {} {}/{}", self.index, self.key, self.seed, self.stream)
    }

    pub fn parse_line(line: &str, n_sites: usize) -> std::result::Result<ShotRecord, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(format!("expected 5 fields, found {}", f.len()));
        }
        let index = f[0].parse::<u64>().map_err(|e| e.to_string())?;
        let outcomes = f[1]
            .chars()
            .map(|c| if c == '-' { Ok(None) } else { Outcome::from_letter(c).map(Some).ok_or(c) })
            .collect::<std::result::Result<Vec<_>, char>>()
            .map_err(|c| format!("bad outcome letter `{c}`"))?;
        let retained = f[2]
            .chars()
            .map(|c| match c {
                '-' => Ok(None),
                '1' => Ok(Some(true)),
                '0' => Ok(Some(false)),
                _ => Err(format!("bad retained flag `{c}`")),
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if outcomes.len() != n_sites || retained.len() != n_sites {
            return Err(format!("expected {n_sites} sites"));
        }
        let feedback = if f[3] == "-" {
            Vec::new()
        } else {
            f[3].chars()
                .map(|c| FeedbackBit::from_letter(c).ok_or_else(|| format!("bad feedback bit `{c}`")))
                .collect::<std::result::Result<Vec<_>, String>>()?
        };
        let (seed, stream) = f[4].split_once('/').ok_or("seed path must be <seed>/<stream>")?;
        Ok(ShotRecord {
            index,
            key: RecordKey { outcomes, retained, feedback },
            seed: seed.parse().map_err(|_| "bad seed")?,
            stream: stream.parse().map_err(|_| "bad stream")?,
        })
    }
}

pub fn write_records<W: std::io::Write>(mut w: W, n_sites: usize, records: &[ShotRecord]) -> Result<()> {
    writeln!(w, "{RECORD_SCHEMA} sites={n_sites}")?;
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_records<R: std::io::BufRead>(r: R) -> Result<Vec<ShotRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let n_sites = header
        .strip_prefix(RECORD_SCHEMA)
        .and_then(|rest| rest.trim().strip_prefix("sites="))
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| LduError::Parse { line: 1, msg: format!("bad header `{header}`") })?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ShotRecord::parse_line(&line, n_sites).map_err(|msg| LduError::Parse { line: i + 2, msg })?);
    }
    Ok(out)
}

/// Trajectory-mode detection of one site; returns the reported outcome and
/// whether the atom is still there afterwards.
pub fn llsd<R: Rng + ?Sized>(
    state: &mut RegisterState,
    site: usize,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<(Outcome, bool)> {
    if state.mode() != Mode::Pure {
        return Err(LduError::ModeMismatch("pure"));
    }
    ryd_to_lost(site).sample(state, rng)?;
    let probs = state.level_probabilities().sites[site];
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut cum = 0.0;
    let mut truth = Outcome::Neither;
    for o in Outcome::ALL {
        let keep = o.levels();
        let p: f64 = (0..LEVELS).filter(|&l| keep[l]).map(|l| probs[l]).sum();
        if p <= 0.0 {
            continue;
        }
        truth = o;
        cum += p;
        if u < cum {
            break;
        }
    }
    state.project_site(site, &truth.levels());
    state.normalize();
    if truth == Outcome::Neither {
        return Ok((Outcome::Neither, false));
    }
    let reported = if rng.random::<f64>() < model.eps_read { truth.flipped() } else { truth };
    let retained = rng.random::<f64>() >= model.p_meas_loss;
    if !retained {
        loss_event(site, 1.0).sample(state, rng)?;
    }
    Ok((reported, retained))
}

/// Density-mode detection: every (reported outcome, retained) branch with
/// its unnormalized post-measurement state. Branch weights sum to the input
/// weight.
pub fn llsd_branches(state: &RegisterState, site: usize, model: &NoiseModel) -> Result<Vec<(Outcome, bool, RegisterState)>> {
    let mut rho = state.to_density();
    ryd_to_lost(site).apply_density(&mut rho)?;
    let mut merged: BTreeMap<(Outcome, bool), RegisterState> = BTreeMap::new();
    let mut add = |key: (Outcome, bool), part: RegisterState, w: f64| {
        if w <= 0.0 {
            return;
        }
        let mut part = part;
        part.scale(w);
        match merged.get_mut(&key) {
            Some(acc) => acc.accumulate(&part),
            None => {
                merged.insert(key, part);
            }
        }
    };
    for truth in Outcome::ALL {
        let mut proj = rho.clone();
        if proj.project_site(site, &truth.levels()) <= 0.0 {
            continue;
        }
        if truth == Outcome::Neither {
            add((Outcome::Neither, false), proj, 1.0);
            continue;
        }
        let mut gone = proj.clone();
        loss_event(site, 1.0).apply_density(&mut gone)?;
        for (reported, pr) in [(truth, 1.0 - model.eps_read), (truth.flipped(), model.eps_read)] {
            add((reported, true), proj.clone(), pr * (1.0 - model.p_meas_loss));
            add((reported, false), gone.clone(), pr * model.p_meas_loss);
        }
    }
    Ok(merged.into_iter().map(|((o, r), s)| (o, r, s)).collect())
}

/// Deterministic predicate over shot records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PostselectionRule {
    Always,
    /// Every listed site was detected (outcome is not NEITHER).
    Detected(Vec<usize>),
}

impl PostselectionRule {
    pub fn accepts(&self, key: &RecordKey) -> bool {
        match self {
            PostselectionRule::Always => true,
            PostselectionRule::Detected(sites) => {
                sites.iter().all(|&s| matches!(key.outcomes.get(s), Some(Some(o)) if o.is_present()))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            PostselectionRule::Always => "always".into(),
            PostselectionRule::Detected(sites) => {
                let s: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
                format!("detected[{}]", s.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountsRow {
    pub data: Outcome,
    pub ancilla: Outcome,
    pub interpretation: String,
    pub count: u64,
}

/// Joint data/ancilla outcome counts of the accepted shots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountsTable {
    pub rule: String,
    pub rows: Vec<CountsRow>,
    pub excluded: u64,
}

impl CountsTable {
    pub fn accepted(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn total(&self) -> u64 {
        self.accepted() + self.excluded
    }

    pub fn count(&self, data: Outcome, ancilla: Outcome) -> u64 {
        self.rows.iter().filter(|r| r.data == data && r.ancilla == ancilla).map(|r| r.count).sum()
    }
}

/// Counts joint outcomes of `data_site` and `ancilla_site` over the shots the
/// rule accepts. Rows appear in a fixed order, omitting empty combinations.
pub fn postselect(
    records: &[ShotRecord],
    rule: &PostselectionRule,
    data_site: usize,
    ancilla_site: usize,
    interpret: &dyn Fn(Outcome, Outcome) -> String,
) -> CountsTable {
    let mut counts: BTreeMap<(Outcome, Outcome), u64> = BTreeMap::new();
    let mut excluded = 0;
    for r in records {
        if !rule.accepts(&r.key) {
            excluded += 1;
            continue;
        }
        let d = r.key.outcomes[data_site].unwrap_or(Outcome::Neither);
        let a = r.key.outcomes[ancilla_site].unwrap_or(Outcome::Neither);
        *counts.entry((d, a)).or_default() += 1;
    }
    let rows = counts
        .into_iter()
        .map(|((data, ancilla), count)| CountsRow { data, ancilla, interpretation: interpret(data, ancilla), count })
        .collect();
    CountsTable { rule: rule.name(), rows, excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{new_register, qubit_site};
    use num_complex::Complex64 as C64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ideal() -> NoiseModel {
        NoiseModel::noiseless()
    }

    #[test]
    fn ideal_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (level, expect) in [
            (SiteLevel::Q1, Outcome::One),
            (SiteLevel::Q0, Outcome::Zero),
            (SiteLevel::L4, Outcome::One),
            (SiteLevel::L3, Outcome::Zero),
            (SiteLevel::Lost, Outcome::Neither),
            (SiteLevel::Ryd, Outcome::Neither),
        ] {
            let mut s = new_register(&[level], Mode::Pure).unwrap();
            let (o, kept) = llsd(&mut s, 0, &ideal(), &mut rng).unwrap();
            assert_eq!(o, expect);
            assert_eq!(kept, expect != Outcome::Neither);
            if expect == Outcome::Neither {
                assert_eq!(s.level_probabilities().get(0, SiteLevel::Lost), 1.0);
            }
        }
    }

    #[test]
    fn q1_collapses_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = new_register(&[SiteLevel::Q1], Mode::Pure).unwrap();
        assert_eq!(llsd(&mut s, 0, &ideal(), &mut rng).unwrap(), (Outcome::One, true));
        assert_eq!(s.level_probabilities().get(0, SiteLevel::Q1), 1.0);
    }

    #[test]
    fn feedback_bits() {
        assert_eq!(feedback_bit(Outcome::One), FeedbackBit::ApplyZ);
        assert_eq!(feedback_bit(Outcome::Zero), FeedbackBit::NoCorrection);
        assert_eq!(feedback_bit(Outcome::Neither), FeedbackBit::Erasure);
    }

    #[test]
    fn repeated_ideal_detection_is_idempotent() {
        let h = 1.0 / 2f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut s = RegisterState::from_site_states(&[qubit_site(C64::new(h, 0.0), C64::new(0.0, h))], Mode::Pure).unwrap();
            let (a, _) = llsd(&mut s, 0, &ideal(), &mut rng).unwrap();
            let (b, _) = llsd(&mut s, 0, &ideal(), &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn branch_weights_compose_marginals_with_flips() {
        let m = NoiseModel { eps_read: 0.05, p_meas_loss: 0.1, ..NoiseModel::noiseless() };
        let s = RegisterState::from_site_states(
            &[[C64::new(0.5, 0.0), C64::new(0.4, 0.0), C64::new(0.3, 0.0), C64::new(0.2, 0.0), C64::new(0.5, 0.0), C64::new(0.46, 0.0)]],
            Mode::Pure,
        )
        .unwrap();
        let p = s.level_probabilities().sites[0];
        let zero = p[0] + p[2];
        let one = p[1] + p[3];
        let branches = llsd_branches(&s, 0, &m).unwrap();
        let total = |o: Outcome| branches.iter().filter(|b| b.0 == o).map(|b| b.2.weight()).sum::<f64>();
        assert!((total(Outcome::Zero) - (0.95 * zero + 0.05 * one)).abs() < 1e-12);
        assert!((total(Outcome::One) - (0.95 * one + 0.05 * zero)).abs() < 1e-12);
        assert!((total(Outcome::Neither) - (p[4] + p[5])).abs() < 1e-12);
        let lost_after: f64 = branches.iter().filter(|b| b.0 != Outcome::Neither && !b.1).map(|b| b.2.weight()).sum();
        assert!((lost_after - 0.1 * (zero + one)).abs() < 1e-12);
        for (_, retained, st) in &branches {
            if !retained {
                let lp = st.level_probabilities();
                assert!((lp.get(0, SiteLevel::Lost) - st.weight()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_outcomes_match_branches() {
        let m = NoiseModel { eps_read: 0.05, p_meas_loss: 0.02, ..NoiseModel::noiseless() };
        let s = RegisterState::from_site_states(
            &[[C64::new(0.5, 0.0), C64::new(0.4, 0.1), C64::new(0.3, 0.0), C64::new(0.2, 0.0), C64::new(0.3, 0.0), C64::new(0.36, 0.0)]],
            Mode::Pure,
        )
        .unwrap();
        let branches = llsd_branches(&s, 0, &m).unwrap();
        let shots = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: BTreeMap<(Outcome, bool), usize> = BTreeMap::new();
        for _ in 0..shots {
            let mut t = s.clone();
            *counts.entry(llsd(&mut t, 0, &m, &mut rng).unwrap()).or_default() += 1;
        }
        for (o, r, st) in &branches {
            let p = st.weight();
            let f = *counts.get(&(*o, *r)).unwrap_or(&0) as f64 / shots as f64;
            assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / shots as f64).sqrt(), "{o:?} {r}: {f} vs {p}");
        }
    }

    fn rec(index: u64, d: Outcome, a: Outcome) -> ShotRecord {
        ShotRecord {
            index,
            key: RecordKey {
                outcomes: vec![Some(d), Some(a)],
                retained: vec![Some(d.is_present()), Some(a.is_present())],
                feedback: Vec::new(),
            },
            seed: 7,
            stream: index,
        }
    }

    #[test]
    fn postselection_counts() {
        let none = |_: Outcome, _: Outcome| String::new();
        let t = postselect(&[], &PostselectionRule::Detected(vec![1]), 0, 1, &none);
        assert_eq!((t.rows.len(), t.excluded), (0, 0));

        let mut records = Vec::new();
        for i in 0..2000 {
            let a = if i < 202 { Outcome::Neither } else { Outcome::Zero };
            records.push(rec(i, Outcome::One, a));
        }
        let t = postselect(&records, &PostselectionRule::Detected(vec![1]), 0, 1, &none);
        assert_eq!(t.excluded, 202);
        assert_eq!(t.accepted(), 1798);
        let all = postselect(&records, &PostselectionRule::Always, 0, 1, &none);
        assert_eq!(all.total(), 2000);
        assert_eq!(all.excluded, 0);

        records.reverse();
        assert_eq!(postselect(&records, &PostselectionRule::Detected(vec![1]), 0, 1, &none), t);
    }

    #[test]
    fn record_lines_round_trip() {
        let mut r = rec(17, Outcome::Zero, Outcome::Neither);
        r.key.feedback = vec![FeedbackBit::ApplyZ, FeedbackBit::Erasure];
        r.key.outcomes.push(None);
        r.key.retained.push(None);
        let line = r.to_line();
        assert_eq!(line, "17 0N- 10- 1E 7/17");
        assert_eq!(ShotRecord::parse_line(&line, 3).unwrap(), r);

        let plain = rec(3, Outcome::One, Outcome::Zero);
        let mut buf = Vec::new();
        write_records(&mut buf, 2, &[plain.clone(), r.clone()].map(|mut x| {
            x.key.outcomes.truncate(2);
            x.key.retained.truncate(2);
            x
        }))
        .unwrap();
        let back = read_records(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back[0], plain);
        assert_eq!(back[1].key.feedback, r.key.feedback);
        assert!(ShotRecord::parse_line("1 0 1", 1).is_err());
        assert!(ShotRecord::parse_line("1 X 1 - 0/0", 1).is_err());
    }
}
