use ldu::circuits::*;
use ldu::engine::{compare_engines, probability_where, run_density, run_trajectories, Experiment, Initial};
use ldu::measure::{Outcome, RecordKey};
use ldu::noise::NoiseModel;
use ldu::qstate::{level_site, SiteLevel};

fn reads(site: usize, o: Outcome) -> impl Fn(&RecordKey) -> bool {
    move |k| k.outcome(site) == Some(o)
}

#[test]
fn noiseless_standard_ldu_present_data() {
    for (t, want) in [(BlochTarget::Zero, Outcome::Zero), (BlochTarget::One, Outcome::One)] {
        let mut b = Builder::pair("ldu_then_data");
        b.append(&build_ldu(LduKind::StandardNative)).measure(DATA);
        let exp = Experiment::new("present", b.build(), Initial::Sites(vec![t.site(), BlochTarget::Zero.site()]), NoiseModel::noiseless())
            .unwrap();
        let recs = run_trajectories(&exp, 100, 3, None).unwrap();
        assert_eq!(recs.len(), 100);
        for r in &recs {
            assert_eq!(r.key.outcome(DATA), Some(want));
            assert_eq!(r.key.outcome(ANCILLA), Some(Outcome::Zero));
        }
    }
}

#[test]
fn noiseless_standard_ldu_flags_lost_data() {
    let exp = Experiment::new(
        "lost",
        build_ldu(LduKind::StandardNative),
        Initial::Sites(vec![level_site(SiteLevel::Lost), BlochTarget::Zero.site()]),
        NoiseModel::noiseless(),
    )
    .unwrap();
    let p = probability_where(&run_density(&exp).unwrap(), reads(ANCILLA, Outcome::One));
    assert!((p - 1.0).abs() < 1e-12, "{p}");
}

#[test]
fn teleport_lost_data_gives_even_ancilla() {
    let mut b = Builder::pair("teleport_lost");
    b.append(&build_ldu(LduKind::TeleportNative)).measure(ANCILLA);
    let exp = Experiment::new(
        "teleport_lost",
        b.build(),
        Initial::Sites(vec![level_site(SiteLevel::Lost), LduKind::TeleportNative.ancilla_input().site()]),
        NoiseModel::noiseless(),
    )
    .unwrap();
    let p = probability_where(&run_density(&exp).unwrap(), reads(ANCILLA, Outcome::Zero));
    assert!((p - 0.5).abs() < 1e-12, "{p}");
}

#[test]
fn deterministic_noiseless_settings_match_exactly() {
    for kind in LduKind::ALL.into_iter().filter(|k| k.is_standard()) {
        for cond in [DataCondition::Present(BlochTarget::One), DataCondition::Lost, DataCondition::L4] {
            let exp =
                Experiment::new("det", build_ldu(kind), Initial::Sites(vec![cond.site(), BlochTarget::Zero.site()]), NoiseModel::noiseless())
                    .unwrap();
            let cmp = compare_engines(&run_trajectories(&exp, 500, 9, None).unwrap(), &run_density(&exp).unwrap());
            assert!(cmp.max_z < 1e-9, "{} {}: {}", kind.name(), cond.label(), cmp.max_z);
        }
    }
}

#[test]
fn trajectories_independent_of_worker_count() {
    let mut b = Builder::pair("table");
    b.append(&with_idle(&build_prepared_standard(BlochTarget::MinusY))).measure(DATA);
    let exp = Experiment::new("workers", b.build(), Initial::Levels(vec![SiteLevel::Q0; 2]), NoiseModel::calibrated()).unwrap();
    let one = run_trajectories(&exp, 3000, 11, Some(1)).unwrap();
    let many = run_trajectories(&exp, 3000, 11, Some(4)).unwrap();
    assert_eq!(one, many);
    let other_seed = run_trajectories(&exp, 3000, 12, Some(1)).unwrap();
    assert_ne!(one, other_seed);
}

/// Two-sided sign test p-value for `pos` positives out of `n`.
fn sign_test(pos: usize, n: usize) -> f64 {
    let mut coef = 1.0f64;
    let mut pmf = vec![0.0; n + 1];
    for (k, v) in pmf.iter_mut().enumerate() {
        *v = coef * 0.5f64.powi(n as i32);
        coef = coef * (n - k) as f64 / (k + 1) as f64;
    }
    let tail = pos.min(n - pos);
    (2.0 * pmf[..=tail].iter().sum::<f64>()).min(1.0)
}

#[test]
fn seed_sweep_shows_no_sign_bias() {
    let mut b = Builder::pair("table");
    b.append(&with_idle(&build_prepared_standard(BlochTarget::MinusY))).measure(DATA);
    let exp = Experiment::new("sweep", b.build(), Initial::Levels(vec![SiteLevel::Q0; 2]), NoiseModel::calibrated()).unwrap();
    let branches = run_density(&exp).unwrap();
    let keys: Vec<RecordKey> = branches.iter().filter(|b| b.probability > 0.01).map(|b| b.key.clone()).collect();
    let mut positives = vec![0usize; keys.len()];
    for seed in 0..20u64 {
        let recs = run_trajectories(&exp, 2000, 1000 + seed, None).unwrap();
        for (i, key) in keys.iter().enumerate() {
            let f = recs.iter().filter(|r| &r.key == key).count() as f64 / recs.len() as f64;
            let p: f64 = branches.iter().filter(|b| &b.key == key).map(|b| b.probability).sum();
            if f > p {
                positives[i] += 1;
            }
        }
    }
    for (key, pos) in keys.iter().zip(&positives) {
        assert!(sign_test(*pos, 20) > 0.01, "record {key}: {pos}/20 above the exact probability");
    }
}

#[test]
fn sign_test_values() {
    assert!((sign_test(10, 20) - 1.0).abs() < 1e-12);
    assert!((sign_test(0, 20) - 2.0 * 0.5f64.powi(20)).abs() < 1e-15);
    assert!(sign_test(3, 20) < 0.01);
}
