//! Acceptance gate: one test per headline claim, each with its stated
//! tolerance and wall-clock budget. Every check here is end-to-end through
//! the public API; the unit suites in each module cover the internals.
//!
//! The tests share a lock and start their timers after acquiring it, so the
//! budgets measure each criterion's own work even if the harness interleaves
//! tests.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use boxlab::boxes::{Alphabet, Box};
use boxlab::channels::{
    build_definetti_extension, chsh_score_channel, coin_flip_channel, constant_channel,
    extension_family, partition_check, seeded_score_channels, trace_distance,
    two_component_partitions, verify_diamond_bound, Channel,
};
use boxlab::definetti::{
    evaluation_gap, lower_bound_general, materialize_tau_chsh, materialize_tau_general,
    tau_chsh_entry, tau_chsh_entry_quadrature, tau_general_entry,
};
use boxlab::rat::{binomial, rat, rat_int, rat_pow, rat_to_f64};
use boxlab::reduction::{
    counting_sweep, random_invariant_box, random_symmetric_box, reduction_campaign,
    test_bound_campaign, trial_seed, verify_reduction, verify_test_bound, InvariantTest,
    ReductionKind,
};
use boxlab::symmetry::{
    chsh_q_round, has_symmetry, is_chsh_symmetric, pr_box, SymmetryTemplate, TemplateLabel,
};
use boxlab::Rat;
use num::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn serial() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

fn assert_budget(start: Instant, budget: Duration, what: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed < budget,
        "{what} took {elapsed:?}, budget is {budget:?}"
    );
}

/// One free parameter appearing twice in a single row.
fn template_d1() -> SymmetryTemplate {
    use TemplateLabel::*;
    SymmetryTemplate::new(vec![vec![Param(0), Param(0), Unfree]]).unwrap()
}

/// Two inputs in one class; rows are permutations of `[p0, p1, u]`.
fn template_d2() -> SymmetryTemplate {
    use TemplateLabel::*;
    SymmetryTemplate::new(vec![
        vec![Param(0), Param(1), Unfree],
        vec![Param(1), Unfree, Param(0)],
    ])
    .unwrap()
}

/// A singleton class plus a two-input class; three parameters in total.
fn template_d3() -> SymmetryTemplate {
    use TemplateLabel::*;
    SymmetryTemplate::new(vec![
        vec![Param(0), Unfree, Unfree],
        vec![Param(1), Param(2), Unfree],
        vec![Param(2), Unfree, Param(1)],
    ])
    .unwrap()
}

/// The statistical tests every test-bound criterion exercises: the score
/// test plus the two degenerate fixtures.
fn score_fixtures(n: usize, threshold: &Rat) -> Vec<(&'static str, InvariantTest)> {
    vec![
        (
            "chsh-score",
            InvariantTest::new(chsh_score_channel(n, threshold)).unwrap(),
        ),
        (
            "always-fail",
            InvariantTest::new(constant_channel(n, true)).unwrap(),
        ),
        (
            "coin-flip",
            InvariantTest::new(coin_flip_channel(n)).unwrap(),
        ),
    ]
}

#[test]
fn criterion_01_chsh_closed_form_matches_quadrature() {
    let _guard = serial();
    let start = Instant::now();
    for n in 1..=6usize {
        for sat in 0..=n {
            let exact = rat_to_f64(&tau_chsh_entry(n, sat).unwrap());
            let quad = tau_chsh_entry_quadrature(n, sat).unwrap();
            assert!(
                (exact - quad).abs() <= 1e-10,
                "entry at n={n}, satisfied={sat}: closed form {exact} vs quadrature {quad}"
            );
        }
    }
    assert_budget(
        start,
        Duration::from_secs(1),
        "closed form vs quadrature sweep",
    );
}

#[test]
fn criterion_02_tau_chsh_columns_normalize_exactly() {
    let _guard = serial();
    let start = Instant::now();
    for n in 1..=4usize {
        let tau = materialize_tau_chsh(n).unwrap();
        if let Err(v) = tau.validate() {
            panic!("tau at n={n} is not a valid box: {v}");
        }
        // The same fact by counting: each column holds binom(n, N) * 2^n
        // outcome strings with N satisfied rounds, all sharing one value.
        let mut sum = Rat::zero();
        for sat in 0..=n {
            let strings = Rat::from_integer(binomial(n, sat)) * rat_pow(&rat_int(2), n);
            sum += strings * tau_chsh_entry(n, sat).unwrap();
        }
        assert_eq!(sum, rat_int(1), "class-count identity at n={n}");
    }
    assert_budget(start, Duration::from_secs(5), "tau normalization check");
}

#[test]
fn criterion_03_chsh_reduction_holds_and_pr_attains_it() {
    let _guard = serial();
    let start = Instant::now();
    let mut total = 0usize;
    for (n, trials) in [(1usize, 100usize), (2, 60), (3, 48)] {
        let report = reduction_campaign(&ReductionKind::Chsh, n, trials, 0xC3).unwrap();
        assert_eq!(report.prefactor, rat_int(n as i64 + 1));
        assert_eq!(
            report.failures, 0,
            "entrywise violations in the CHSH campaign at n={n}"
        );
        assert!(report.all_hold);
        assert!(report.worst_ratio <= report.prefactor);
        total += report.trial_reports.len();
    }
    assert!(total >= 200, "only {total} campaign boxes were checked");

    // Equality witness: the n-fold PR box attains the prefactor exactly, at
    // the all-satisfied corner.
    for n in 1..=3usize {
        let pr = pr_box(n);
        let report = verify_reduction(&pr, &ReductionKind::Chsh).unwrap();
        assert!(report.holds);
        assert_eq!(
            report.max_ratio,
            rat_int(n as i64 + 1),
            "PR power at n={n} must attain the prefactor"
        );
        let tau = materialize_tau_chsh(n).unwrap();
        let corner = pr.entry_by_codes(0, 0) / tau.entry_by_codes(0, 0);
        assert_eq!(corner, rat_int(n as i64 + 1));
    }
    assert_budget(start, Duration::from_secs(60), "CHSH reduction campaign");
}

#[test]
fn criterion_04_plain_reduction_prefactor_is_squared() {
    let _guard = serial();
    let start = Instant::now();
    let kind = ReductionKind::Plain {
        inputs: 2,
        outputs: 2,
    };
    for (n, trials) in [(1usize, 40usize), (2, 30), (3, 20)] {
        let report = reduction_campaign(&kind, n, trials, 0xC4).unwrap();
        assert_eq!(
            report.prefactor,
            rat_pow(&rat_int(n as i64 + 1), 2),
            "no-symmetry prefactor at n={n} must be (n+1)^2"
        );
        assert_eq!(report.failures, 0);
        assert!(report.all_hold);
    }
    assert_budget(start, Duration::from_secs(60), "plain reduction campaign");
}

#[test]
fn criterion_05_template_reductions_and_lower_bounds() {
    let _guard = serial();
    let start = Instant::now();
    let templates = [template_d1(), template_d2(), template_d3()];
    for (idx, template) in templates.iter().enumerate() {
        let d = template.degrees_of_freedom();
        assert_eq!(d, idx + 1);
        let kind = ReductionKind::Template(template.clone());
        for n in 1..=3usize {
            let report = reduction_campaign(&kind, n, 20, 0xC5).unwrap();
            assert_eq!(report.prefactor, rat_pow(&rat_int(n as i64 + 1), d));
            assert_eq!(
                report.failures, 0,
                "template d={d} violates the reduction at n={n}"
            );

            // Lower bound below the exact value everywhere, tight somewhere,
            // and the quadrature path agrees with the exact evaluator.
            let mut tight = false;
            for counts in template.reachable_counts(n) {
                let tau = tau_general_entry(template, n, &counts).unwrap();
                let lower = lower_bound_general(template, n, &counts).unwrap();
                assert!(
                    lower <= tau,
                    "lower bound exceeds tau at d={d}, n={n}, counts={counts:?}"
                );
                tight |= lower == tau;
                let gap = evaluation_gap(template, n, &counts).unwrap();
                assert!(
                    gap <= 1e-9,
                    "quadrature drifts {gap:e} at d={d}, n={n}, counts={counts:?}"
                );
            }
            assert!(tight, "lower bound never tight at d={d}, n={n}");
        }
    }
    assert_budget(start, Duration::from_secs(120), "template reduction sweep");
}

#[test]
fn criterion_06_counting_bound_on_every_cell() {
    let _guard = serial();
    let start = Instant::now();
    let chsh = SymmetryTemplate::chsh();
    let templates = [template_d1(), template_d2(), template_d3()];
    for n in 1..=3usize {
        let tau = materialize_tau_chsh(n).unwrap();
        let sweep = counting_sweep(&tau, &chsh).unwrap();
        assert!(sweep.all_ok && sweep.min_margin >= 0);

        for template in &templates {
            let tau = materialize_tau_general(template, n).unwrap();
            let sweep = counting_sweep(&tau, template).unwrap();
            assert!(sweep.all_ok && sweep.min_margin >= 0);
        }

        let alphabet = Alphabet::chsh(n);
        for trial in 0..3usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC6, trial));
            let b = random_symmetric_box(&alphabet, &chsh, &mut rng).unwrap();
            let sweep = counting_sweep(&b, &chsh).unwrap();
            assert!(sweep.all_ok, "counting fails on a projected box at n={n}");
        }
        for template in &templates {
            let alphabet =
                Alphabet::new(n, template.num_inputs(), template.num_outputs()).unwrap();
            for trial in 0..3usize {
                let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC66, trial));
                let b = random_symmetric_box(&alphabet, template, &mut rng).unwrap();
                let sweep = counting_sweep(&b, template).unwrap();
                assert!(sweep.all_ok);
            }
        }
    }
    assert_budget(start, Duration::from_secs(60), "counting-bound sweeps");
}

#[test]
fn criterion_07_test_bound_holds_for_score_and_fixtures() {
    let _guard = serial();
    let start = Instant::now();
    let threshold = rat(3, 4);
    for n in 1..=4usize {
        let trials = if n == 4 { 2 } else { 3 };
        for (label, test) in score_fixtures(n, &threshold) {
            let report =
                test_bound_campaign(&test, &ReductionKind::Chsh, n, trials, 0xC7).unwrap();
            assert!(
                report.all_hold,
                "test bound fails for {label} at n={n}: {} failures",
                report.failures
            );
        }
    }

    // Fixed boxes: the de Finetti box itself (both failure probabilities
    // coincide), the PR power, and a mildly violating iid box.
    let tau3 = materialize_tau_chsh(3).unwrap();
    let q3 = chsh_q_round(&rat(1, 10)).iid_power(3).unwrap();
    for (label, test) in score_fixtures(3, &threshold) {
        for b in [&tau3, &pr_box(3), &q3] {
            let report = verify_test_bound(&test, b, &ReductionKind::Chsh).unwrap();
            assert!(report.holds, "test bound fails for {label} on a fixed box");
        }
        let on_tau = verify_test_bound(&test, &tau3, &ReductionKind::Chsh).unwrap();
        assert_eq!(
            on_tau.failure_box, on_tau.failure_tau,
            "running {label} on the de Finetti box must give equal sides"
        );
    }
    assert_budget(start, Duration::from_secs(30), "test-bound instances");
}

#[test]
fn criterion_08_extension_chain_is_exact() {
    let _guard = serial();
    let start = Instant::now();
    let template = SymmetryTemplate::chsh();
    let d = template.degrees_of_freedom();
    for n in 1..=2usize {
        let alphabet = Alphabet::chsh(n);
        let scale = rat_pow(&Rat::new(1.into(), (n as u64 + 1).into()), d);
        let tau = materialize_tau_chsh(n).unwrap();
        let mut parents = vec![tau.clone(), pr_box(n)];
        for trial in 0..2usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC8, trial));
            parents.push(random_symmetric_box(&alphabet, &template, &mut rng).unwrap());
        }
        let pairs = [
            (chsh_score_channel(n, &rat(3, 4)), constant_channel(n, false)),
            (chsh_score_channel(n, &rat(1, 2)), coin_flip_channel(n)),
        ];
        for (p_idx, parent) in parents.iter().enumerate() {
            let partitions =
                two_component_partitions(parent, 4, 2, 0xC80 + p_idx as u64).unwrap();
            let family = extension_family(parent, &partitions).unwrap();
            for ext in &family {
                for (e, f) in &pairs {
                    let t_parent = trace_distance(e, f, ext).unwrap();
                    let tau_ext = build_definetti_extension(&tau, ext.settings(), d).unwrap();
                    let t_tau = trace_distance(e, f, &tau_ext).unwrap();
                    assert!(
                        t_tau >= &scale * &t_parent,
                        "chain fails at n={n}: tau-extension distance {t_tau} below \
                         {scale} * {t_parent}"
                    );
                }
            }
        }
    }
    assert_budget(start, Duration::from_secs(60), "extension chain checks");
}

#[test]
fn criterion_09_diamond_ratios_stay_below_prefactor() {
    let _guard = serial();
    let start = Instant::now();
    let template = SymmetryTemplate::chsh();
    for n in 1..=2usize {
        let alphabet = Alphabet::chsh(n);
        let prefactor = rat_int(n as i64 + 1);
        let mut parents = vec![materialize_tau_chsh(n).unwrap()];
        for trial in 0..2usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC9, trial));
            parents.push(random_symmetric_box(&alphabet, &template, &mut rng).unwrap());
        }
        let mut family = Vec::new();
        for (p_idx, parent) in parents.iter().enumerate() {
            let partitions =
                two_component_partitions(parent, 3, 1, 0xC90 + p_idx as u64).unwrap();
            family.extend(extension_family(parent, &partitions).unwrap());
        }

        let mut pairs: Vec<(String, Channel, Channel)> = vec![
            (
                "score vs constant".into(),
                chsh_score_channel(n, &rat(3, 4)),
                constant_channel(n, false),
            ),
            (
                "score vs coin-flip".into(),
                chsh_score_channel(n, &rat(3, 4)),
                coin_flip_channel(n),
            ),
        ];
        for (i, ch) in seeded_score_channels(n, 3, 0xC9).into_iter().enumerate() {
            pairs.push((format!("seeded #{i}"), ch, constant_channel(n, false)));
        }

        for (label, e, f) in &pairs {
            let report = verify_diamond_bound(e, f, &template, &family).unwrap();
            assert!(report.holds, "diamond bound fails for {label} at n={n}");
            assert!(report.instances.iter().all(|i| i.bound_ok));
            assert!(
                report.worst_ratio <= prefactor,
                "ratio {} exceeds {prefactor} for {label} at n={n}",
                report.worst_ratio
            );
            assert!(report.diamond_gap_parents <= &prefactor * &report.diamond_gap_tau);
        }
    }
    assert_budget(start, Duration::from_secs(120), "diamond family checks");
}

#[test]
fn criterion_10_detectors_and_verdicts_agree() {
    let _guard = serial();
    let chsh = SymmetryTemplate::chsh();
    for n in 1..=3usize {
        let alphabet = Alphabet::chsh(n);
        let mut boxes = vec![
            pr_box(n),
            materialize_tau_chsh(n).unwrap(),
            Box::uniform(alphabet.clone()).unwrap(),
        ];
        for trial in 0..4usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC10, trial));
            boxes.push(random_symmetric_box(&alphabet, &chsh, &mut rng).unwrap());
        }
        for trial in 0..4usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC101, trial));
            boxes.push(random_invariant_box(&alphabet, &mut rng).unwrap());
        }

        // The CHSH-form detector and the generic template check agree on
        // every box, and both verdicts occur.
        let mut saw_symmetric = false;
        let mut saw_asymmetric = false;
        for b in &boxes {
            let direct = is_chsh_symmetric(b).unwrap().is_symmetric();
            let generic = has_symmetry(b, &chsh).unwrap();
            assert_eq!(direct, generic, "detectors disagree at n={n}");
            saw_symmetric |= direct;
            saw_asymmetric |= !direct;
        }
        assert!(saw_symmetric && saw_asymmetric, "need both verdicts at n={n}");

        // Scaled domination against tau is the same predicate as the
        // reduction verdict.
        let tau = materialize_tau_chsh(n).unwrap();
        let scale = Rat::new(1.into(), (n as u64 + 1).into());
        for b in &boxes {
            if !has_symmetry(b, &chsh).unwrap() || !b.is_permutation_invariant() {
                continue;
            }
            let domination = partition_check(&tau, &scale, b).unwrap();
            let verdict = verify_reduction(b, &ReductionKind::Chsh).unwrap().holds;
            assert_eq!(domination, verdict);
            assert!(domination);
        }
    }

    // Same agreement for the no-symmetry kind, where the scale is squared.
    for n in 1..=2usize {
        let kind = ReductionKind::Plain {
            inputs: 2,
            outputs: 2,
        };
        let alphabet = Alphabet::new(n, 2, 2).unwrap();
        let plain = SymmetryTemplate::no_symmetry(2, 2).unwrap();
        let tau = materialize_tau_general(&plain, n).unwrap();
        let scale = rat_pow(&Rat::new(1.into(), (n as u64 + 1).into()), 2);
        for trial in 0..4usize {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(0xC102, trial));
            let b = random_invariant_box(&alphabet, &mut rng).unwrap();
            let domination = partition_check(&tau, &scale, &b).unwrap();
            let verdict = verify_reduction(&b, &kind).unwrap().holds;
            assert_eq!(domination, verdict);
            assert!(domination);
        }
    }
}
