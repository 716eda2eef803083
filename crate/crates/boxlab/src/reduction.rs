//! The reduction inequalities themselves: entrywise upper bounds on
//! permutation-invariant boxes, the exhaustive `P <= (n+1)^d tau` verifier,
//! the counting argument behind the bounds, seeded random-box campaigns, and
//! the failure-probability transfer for invariant tests.
//!
//! The chain being verified: for a permutation-invariant box with symmetry
//! `S`, each entry is at most [`upper_bound_general`] (via the counting
//! argument in [`counting_oracle`]), and the de Finetti state's matching
//! entry is at least `(n+1)^-d` times that bound, so `P <= (n+1)^d tau`
//! entrywise. Everything here is exact; no tolerances.

use crate::boxes::{Alphabet, Box, BoxError, BoxViolation};
use crate::channels::{
    channel_output, is_invariant_channel, is_permutation_invariant_channel, Channel, ChannelError,
};
use crate::definetti::{tau_general_entry, DefinettiError};
use crate::rat::{binomial, multinomial, rat_pow, serde_rat, Rat};
use crate::symmetry::{has_symmetry, s_project, ColorCounts, SymmetryTemplate, TemplateError};
use num::{BigInt, One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReductionError {
    #[error("box invalid: {0}")]
    InvalidBox(BoxViolation),
    #[error("box is not permutation invariant")]
    NotPermutationInvariant,
    #[error("box does not have the required symmetry")]
    NotSymmetric,
    #[error("test channel must produce a single bit, got {bits}")]
    TestNotBinary { bits: usize },
    #[error("test channel is not invariant under the required mappings")]
    TestNotInvariant,
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Definetti(#[from] DefinettiError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type ReductionResult<T> = Result<T, ReductionError>;

/// Which symmetry the reduction is taken against.
#[derive(Clone, Debug)]
pub enum ReductionKind {
    /// Joint CHSH alphabet with the satisfied/violated template; d = 1.
    Chsh,
    /// An explicit template.
    Template(SymmetryTemplate),
    /// No symmetry assumed: the full-grid template with d = m(l-1).
    Plain { inputs: usize, outputs: usize },
}

impl ReductionKind {
    pub fn template(&self) -> Result<SymmetryTemplate, TemplateError> {
        match self {
            ReductionKind::Chsh => Ok(SymmetryTemplate::chsh()),
            ReductionKind::Template(t) => Ok(t.clone()),
            ReductionKind::Plain { inputs, outputs } => {
                SymmetryTemplate::no_symmetry(*inputs, *outputs)
            }
        }
    }

    /// The box alphabet this kind verifies at `n` rounds (bipartite for CHSH).
    pub fn alphabet(&self, n: usize) -> ReductionResult<Alphabet> {
        Ok(match self {
            ReductionKind::Chsh => Alphabet::chsh(n),
            ReductionKind::Template(t) => Alphabet::new(n, t.num_inputs(), t.num_outputs())?,
            ReductionKind::Plain { inputs, outputs } => Alphabet::new(n, *inputs, *outputs)?,
        })
    }

    /// Whether random campaign boxes get the symmetry projection applied.
    fn projects(&self) -> bool {
        !matches!(self, ReductionKind::Plain { .. })
    }

    pub fn label(&self) -> String {
        match self {
            ReductionKind::Chsh => "chsh".into(),
            ReductionKind::Template(t) => format!(
                "template({}x{}, d={})",
                t.num_inputs(),
                t.num_outputs(),
                t.degrees_of_freedom()
            ),
            ReductionKind::Plain { inputs, outputs } => format!("plain({inputs}x{outputs})"),
        }
    }
}

/// Largest possible entry of a permutation-invariant CHSH-symmetric box at a
/// cell with `satisfied` satisfying rounds: `2^-n / C(n, satisfied)`.
pub fn upper_bound_chsh(n: usize, satisfied: usize) -> Rat {
    let half_pow = rat_pow(&Rat::new(1.into(), 2.into()), n);
    half_pow / Rat::from_integer(binomial(n, satisfied))
}

/// Largest possible entry of a permutation-invariant box with the template
/// symmetry at a cell with the given color counts:
/// `prod_colors (1/t_j)^{N_j} * prod_classes 1/multinomial(class counts)`.
/// Depends only on the counts, not on any ordering of the rounds.
pub fn upper_bound_general(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<Rat, DefinettiError> {
    if counts.0.len() != template.num_colors() {
        return Err(DefinettiError::CountsLength {
            got: counts.0.len(),
            want: template.num_colors(),
        });
    }
    if counts.total() != n {
        return Err(DefinettiError::RoundMismatch {
            declared: n,
            total: counts.total(),
        });
    }
    let mut value = Rat::one();
    for (color, &count) in counts.0.iter().enumerate() {
        let t = template.color_info(color).multiplicity;
        value *= rat_pow(&Rat::new(1.into(), (t as u64).into()), count);
    }
    for class in 0..template.classes().len() {
        value /= Rat::from_integer(multinomial(template.class_counts(class, counts)));
    }
    Ok(value)
}

/// Outcome of the exhaustive entrywise reduction check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReductionReport {
    pub rounds: usize,
    pub degrees_of_freedom: usize,
    #[serde(with = "serde_rat")]
    pub prefactor: Rat,
    /// Largest `P(a|x) / tau(a|x)` over all cells.
    #[serde(with = "serde_rat")]
    pub max_ratio: Rat,
    /// First cell attaining the maximum, in canonical scan order.
    pub witness_output: String,
    pub witness_input: String,
    pub holds: bool,
}

/// Checks `P(a|x) <= (n+1)^d tau(a|x)` on every cell, exactly. The box must
/// be valid, permutation invariant, and carry the kind's symmetry; failures
/// of those preconditions are reported as errors, never as a passing bound.
pub fn verify_reduction(b: &Box, kind: &ReductionKind) -> ReductionResult<ReductionReport> {
    let template = kind.template()?;
    if let Err(v) = b.validate() {
        return Err(ReductionError::InvalidBox(v));
    }
    if !b.is_permutation_invariant() {
        return Err(ReductionError::NotPermutationInvariant);
    }
    if !has_symmetry(b, &template)? {
        return Err(ReductionError::NotSymmetric);
    }
    let alphabet = b.alphabet();
    let n = alphabet.rounds();
    let d = template.degrees_of_freedom();
    let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);

    let mut tau_memo: HashMap<ColorCounts, Rat> = HashMap::new();
    let mut max_ratio = Rat::zero();
    let mut witness = (0usize, 0usize);
    for x in 0..alphabet.num_input_strings() {
        let xd = alphabet.decode_input(x);
        for a in 0..alphabet.num_output_strings() {
            let ad = alphabet.decode_output(a);
            let counts = template.color_counts(&ad, &xd);
            let tau = match tau_memo.get(&counts) {
                Some(t) => t.clone(),
                None => {
                    let t = tau_general_entry(&template, n, &counts)?;
                    tau_memo.insert(counts, t.clone());
                    t
                }
            };
            let ratio = b.entry_by_codes(x, a) / tau;
            if ratio > max_ratio {
                max_ratio = ratio;
                witness = (a, x);
            }
        }
    }
    let holds = max_ratio <= prefactor;
    Ok(ReductionReport {
        rounds: n,
        degrees_of_freedom: d,
        prefactor,
        max_ratio,
        witness_output: alphabet.render_output(witness.0),
        witness_input: alphabet.render_input(witness.1),
        holds,
    })
}

/// Outcome of the counting argument at one cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingReport {
    /// Output strings in column `x` whose entry equals `P(a|x)` exactly.
    pub count: u64,
    /// Guaranteed minimum: `prod_colors t_j^{N_j} * prod_classes
    /// multinomial(class counts)`.
    pub bound: u64,
    pub ok: bool,
}

/// Counts the output strings sharing the value `P(a|x)` within column `x`
/// and compares against the combinatorial lower bound. For a valid,
/// permutation-invariant box with the template symmetry the bound always
/// holds: same color sequence forces the same entry, and permuting a
/// sequence within its class pattern reaches another realized sequence.
pub fn counting_oracle(
    b: &Box,
    template: &SymmetryTemplate,
    a_digits: &[u8],
    x_digits: &[u8],
) -> ReductionResult<CountingReport> {
    if let Err(v) = b.validate() {
        return Err(ReductionError::InvalidBox(v));
    }
    if !b.is_permutation_invariant() {
        return Err(ReductionError::NotPermutationInvariant);
    }
    if !has_symmetry(b, template)? {
        return Err(ReductionError::NotSymmetric);
    }
    let alphabet = b.alphabet();
    let x = alphabet.encode_input(x_digits)?;
    let a = alphabet.encode_output(a_digits)?;
    let target = b.entry_by_codes(x, a);
    let count = b
        .column(x)
        .iter()
        .filter(|v| *v == target)
        .count() as u64;

    let counts = template.color_counts(a_digits, x_digits);
    let mut bound = BigInt::one();
    for (color, &c) in counts.0.iter().enumerate() {
        let t = template.color_info(color).multiplicity;
        bound *= BigInt::from(t).pow(c as u32);
    }
    for class in 0..template.classes().len() {
        bound *= multinomial(template.class_counts(class, &counts));
    }
    let bound = bound
        .to_u64()
        .expect("bound is at most the column size, which fits the dense cap");
    Ok(CountingReport {
        count,
        bound,
        ok: count >= bound,
    })
}

/// Aggregate of [`counting_oracle`] over every cell of the box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingSweepReport {
    pub cells: usize,
    /// Smallest `count - bound` margin seen (0 means the bound is tight
    /// somewhere).
    pub min_margin: i64,
    pub all_ok: bool,
}

/// Runs the counting argument on every cell, checking the preconditions
/// once up front.
pub fn counting_sweep(b: &Box, template: &SymmetryTemplate) -> ReductionResult<CountingSweepReport> {
    if let Err(v) = b.validate() {
        return Err(ReductionError::InvalidBox(v));
    }
    if !b.is_permutation_invariant() {
        return Err(ReductionError::NotPermutationInvariant);
    }
    if !has_symmetry(b, template)? {
        return Err(ReductionError::NotSymmetric);
    }
    let alphabet = b.alphabet();
    let na = alphabet.num_output_strings();
    let mut cells = 0usize;
    let mut min_margin = i64::MAX;
    let mut all_ok = true;
    for x in 0..alphabet.num_input_strings() {
        let xd = alphabet.decode_input(x);
        let column = b.column(x);
        for a in 0..na {
            let ad = alphabet.decode_output(a);
            let target = &column[a];
            let count = column.iter().filter(|v| *v == target).count() as i64;
            let counts = template.color_counts(&ad, &xd);
            let mut bound = BigInt::one();
            for (color, &c) in counts.0.iter().enumerate() {
                let t = template.color_info(color).multiplicity;
                bound *= BigInt::from(t).pow(c as u32);
            }
            for class in 0..template.classes().len() {
                bound *= multinomial(template.class_counts(class, &counts));
            }
            let bound = bound.to_i64().expect("bound fits the column size");
            let margin = count - bound;
            min_margin = min_margin.min(margin);
            all_ok &= margin >= 0;
            cells += 1;
        }
    }
    Ok(CountingSweepReport {
        cells,
        min_margin,
        all_ok,
    })
}

/// A box with entries drawn from the grid `k / 2^16`, `k >= 1`: each column
/// is a uniform random composition of 2^16 into positive parts (distinct cut
/// points), so columns sum to 1 on the grid itself. Keeping one shared
/// denominator stops the symmetrization averages downstream from compounding
/// into huge rationals.
pub fn random_box(alphabet: &Alphabet, rng: &mut impl Rng) -> Box {
    const GRID: u64 = 1 << 16;
    let na = alphabet.num_output_strings();
    let nx = alphabet.num_input_strings();
    let mut entries = Vec::with_capacity(na * nx);
    for _ in 0..nx {
        let mut cuts: Vec<u64> = rand::seq::index::sample(rng, (GRID - 1) as usize, na - 1)
            .into_iter()
            .map(|i| i as u64 + 1)
            .collect();
        cuts.sort_unstable();
        cuts.push(GRID);
        let mut prev = 0;
        for cut in cuts {
            entries.push(Rat::new((cut - prev).into(), GRID.into()));
            prev = cut;
        }
    }
    Box::new(alphabet.clone(), entries).expect("grid entries have the right shape")
}

/// A seeded random box averaged over all round permutations: permutation
/// invariant by construction.
pub fn random_invariant_box(alphabet: &Alphabet, rng: &mut impl Rng) -> ReductionResult<Box> {
    Ok(random_box(alphabet, rng).symmetrize())
}

/// A seeded random box pushed through both projections: first the
/// permutation average, then the orbit average over equal color sequences.
/// Permutation invariant with the template symmetry, exactly.
pub fn random_symmetric_box(
    alphabet: &Alphabet,
    template: &SymmetryTemplate,
    rng: &mut impl Rng,
) -> ReductionResult<Box> {
    let invariant = random_invariant_box(alphabet, rng)?;
    Ok(s_project(&invariant, template)?)
}

/// Derives the per-trial RNG seed from the campaign seed. Trials are
/// independent of scheduling: each trial's stream depends only on these two
/// numbers.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add((trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    #[serde(with = "serde_rat")]
    pub max_ratio: Rat,
    pub witness_output: String,
    pub witness_input: String,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignReport {
    pub kind: String,
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(with = "serde_rat")]
    pub prefactor: Rat,
    #[serde(with = "serde_rat")]
    pub worst_ratio: Rat,
    pub failures: usize,
    pub all_hold: bool,
    pub trial_reports: Vec<TrialReport>,
}

/// Runs `trials` seeded reduction checks on freshly generated boxes
/// (projected to the kind's symmetry unless the kind is plain) and
/// aggregates the outcomes. Trials run in parallel; the report is
/// deterministic in `(kind, n, trials, seed)`.
pub fn reduction_campaign(
    kind: &ReductionKind,
    n: usize,
    trials: usize,
    seed: u64,
) -> ReductionResult<CampaignReport> {
    let alphabet = kind.alphabet(n)?;
    let template = kind.template()?;
    let trial_reports: Vec<TrialReport> = (0..trials)
        .into_par_iter()
        .map(|trial| -> ReductionResult<TrialReport> {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(seed, trial));
            let b = if kind.projects() {
                random_symmetric_box(&alphabet, &template, &mut rng)?
            } else {
                random_invariant_box(&alphabet, &mut rng)?
            };
            let report = verify_reduction(&b, kind)?;
            Ok(TrialReport {
                trial,
                max_ratio: report.max_ratio,
                witness_output: report.witness_output,
                witness_input: report.witness_input,
                holds: report.holds,
            })
        })
        .collect::<ReductionResult<_>>()?;
    let d = template.degrees_of_freedom();
    let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);
    let worst_ratio = trial_reports
        .iter()
        .map(|t| &t.max_ratio)
        .max()
        .cloned()
        .unwrap_or_else(Rat::zero);
    let failures = trial_reports.iter().filter(|t| !t.holds).count();
    Ok(CampaignReport {
        kind: kind.label(),
        rounds: n,
        trials,
        seed,
        prefactor,
        worst_ratio,
        failures,
        all_hold: failures == 0,
        trial_reports,
    })
}

/// A statistical test on boxes: a channel with a single outcome bit, read as
/// pass (0) or fail (1).
#[derive(Clone, Debug)]
pub struct InvariantTest {
    channel: Channel,
}

impl InvariantTest {
    pub fn new(channel: Channel) -> ReductionResult<Self> {
        if channel.bits() != 1 {
            return Err(ReductionError::TestNotBinary {
                bits: channel.bits(),
            });
        }
        Ok(InvariantTest { channel })
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }
}

/// The probability that the test fails on the box.
pub fn run_test(test: &InvariantTest, b: &Box) -> ReductionResult<Rat> {
    Ok(channel_output(test.channel(), b)?[1].clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestBoundReport {
    pub rounds: usize,
    pub degrees_of_freedom: usize,
    #[serde(with = "serde_rat")]
    pub prefactor: Rat,
    #[serde(with = "serde_rat")]
    pub failure_box: Rat,
    #[serde(with = "serde_rat")]
    pub failure_tau: Rat,
    pub holds: bool,
}

/// Trial-independent part of a test-bound check: the test's invariance
/// certificate and its failure probability on the de Finetti box, both of
/// which a campaign shares across every trial.
struct TestBoundContext {
    degrees_of_freedom: usize,
    prefactor: Rat,
    template: SymmetryTemplate,
    failure_tau: Rat,
}

fn test_bound_context(
    test: &InvariantTest,
    kind: &ReductionKind,
    n: usize,
) -> ReductionResult<TestBoundContext> {
    let template = kind.template()?;
    let invariant = match kind {
        ReductionKind::Plain { .. } => is_permutation_invariant_channel(test.channel())?,
        _ => is_invariant_channel(test.channel(), &template)?,
    };
    if !invariant {
        return Err(ReductionError::TestNotInvariant);
    }
    let alphabet = kind.alphabet(n)?;
    let d = template.degrees_of_freedom();
    let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);
    let tau_plain = crate::definetti::materialize_tau_general(&template, n)?;
    let tau = Box::new(alphabet, tau_plain.entries().to_vec())?;
    let failure_tau = run_test(test, &tau)?;
    Ok(TestBoundContext {
        degrees_of_freedom: d,
        prefactor,
        template,
        failure_tau,
    })
}

fn test_bound_on_box(
    test: &InvariantTest,
    b: &Box,
    ctx: &TestBoundContext,
) -> ReductionResult<TestBoundReport> {
    if let Err(v) = b.validate() {
        return Err(ReductionError::InvalidBox(v));
    }
    if !b.is_permutation_invariant() {
        return Err(ReductionError::NotPermutationInvariant);
    }
    if !has_symmetry(b, &ctx.template)? {
        return Err(ReductionError::NotSymmetric);
    }
    let failure_box = run_test(test, b)?;
    let holds = failure_box <= &ctx.prefactor * &ctx.failure_tau;
    Ok(TestBoundReport {
        rounds: b.alphabet().rounds(),
        degrees_of_freedom: ctx.degrees_of_freedom,
        prefactor: ctx.prefactor.clone(),
        failure_box,
        failure_tau: ctx.failure_tau.clone(),
        holds,
    })
}

/// Verifies the failure-probability transfer
/// `Pr[fail](P) <= (n+1)^d Pr[fail](tau)`, exactly. The box must satisfy the
/// kind's preconditions; the test must be permutation invariant, and for a
/// kind with symmetry it must also be invariant under the template
/// relabelings (otherwise the transfer does not follow from the entrywise
/// bound and the check refuses to certify it).
pub fn verify_test_bound(
    test: &InvariantTest,
    b: &Box,
    kind: &ReductionKind,
) -> ReductionResult<TestBoundReport> {
    let ctx = test_bound_context(test, kind, b.alphabet().rounds())?;
    test_bound_on_box(test, b, &ctx)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestTrialReport {
    pub trial: usize,
    #[serde(with = "serde_rat")]
    pub failure_box: Rat,
    #[serde(with = "serde_rat")]
    pub failure_tau: Rat,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestCampaignReport {
    pub kind: String,
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(with = "serde_rat")]
    pub prefactor: Rat,
    pub failures: usize,
    pub all_hold: bool,
    pub trial_reports: Vec<TestTrialReport>,
}

/// Seeded campaign for the test bound: random boxes from the kind's
/// pipeline, each checked against the given test. The test's invariance
/// certificate and its failure probability on the de Finetti box are
/// computed once and shared by every trial.
pub fn test_bound_campaign(
    test: &InvariantTest,
    kind: &ReductionKind,
    n: usize,
    trials: usize,
    seed: u64,
) -> ReductionResult<TestCampaignReport> {
    let alphabet = kind.alphabet(n)?;
    let template = kind.template()?;
    let ctx = test_bound_context(test, kind, n)?;
    let trial_reports: Vec<TestTrialReport> = (0..trials)
        .into_par_iter()
        .map(|trial| -> ReductionResult<TestTrialReport> {
            let mut rng = ChaCha20Rng::seed_from_u64(trial_seed(seed, trial));
            let b = if kind.projects() {
                random_symmetric_box(&alphabet, &template, &mut rng)?
            } else {
                random_invariant_box(&alphabet, &mut rng)?
            };
            let report = test_bound_on_box(test, &b, &ctx)?;
            Ok(TestTrialReport {
                trial,
                failure_box: report.failure_box,
                failure_tau: report.failure_tau,
                holds: report.holds,
            })
        })
        .collect::<ReductionResult<_>>()?;
    let d = template.degrees_of_freedom();
    let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);
    let failures = trial_reports.iter().filter(|t| !t.holds).count();
    Ok(TestCampaignReport {
        kind: kind.label(),
        rounds: n,
        trials,
        seed,
        prefactor,
        failures,
        all_hold: failures == 0,
        trial_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{
        chsh_score_channel, coin_flip_channel, constant_channel, first_round_channel,
        output_zero_channel,
    };
    use crate::definetti::lower_bound_general;
    use crate::rat::{rat, rat_int};
    use crate::symmetry::{chsh_q_round, pr_box, TemplateLabel};

    fn two_param_template() -> SymmetryTemplate {
        // One class, two parameters: rows are permutations of [p1, p2, u].
        use TemplateLabel::*;
        SymmetryTemplate::new(vec![
            vec![Param(0), Param(1), Unfree],
            vec![Param(1), Unfree, Param(0)],
        ])
        .unwrap()
    }

    #[test]
    fn chsh_upper_bound_matches_stated_values() {
        assert_eq!(upper_bound_chsh(1, 1), rat(1, 2));
        assert_eq!(upper_bound_chsh(2, 2), rat(1, 4));
        assert_eq!(upper_bound_chsh(2, 1), rat(1, 8));
        // And it is the general bound on the CHSH template.
        let t = SymmetryTemplate::chsh();
        for n in 1..=4usize {
            for counts in t.reachable_counts(n) {
                let sat = counts.0[1]; // unfree color: satisfied cells
                assert_eq!(
                    upper_bound_general(&t, n, &counts).unwrap(),
                    upper_bound_chsh(n, sat)
                );
            }
        }
    }

    #[test]
    fn upper_bound_sits_between_tau_scalings() {
        // tau >= (n+1)^-d * bound for every reachable count vector, so the
        // entrywise chain P <= bound <= (n+1)^d tau closes.
        for template in [
            SymmetryTemplate::chsh(),
            two_param_template(),
            SymmetryTemplate::no_symmetry(2, 2).unwrap(),
        ] {
            let d = template.degrees_of_freedom();
            for n in 1..=4usize {
                let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);
                for counts in template.reachable_counts(n) {
                    let bound = upper_bound_general(&template, n, &counts).unwrap();
                    let tau = tau_general_entry(&template, n, &counts).unwrap();
                    assert!(&prefactor * &tau >= bound);
                    // The bound also dominates the order-free lower bound.
                    assert!(bound >= lower_bound_general(&template, n, &counts).unwrap());
                }
            }
        }
    }

    #[test]
    fn random_symmetric_entries_respect_the_upper_bound() {
        // Every entry of a permutation-invariant box with the symmetry is
        // at most the reciprocal of its counting bound.
        let template = SymmetryTemplate::chsh();
        let alphabet = Alphabet::chsh(2);
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..5 {
            let b = random_symmetric_box(&alphabet, &template, &mut rng).unwrap();
            for x in 0..alphabet.num_input_strings() {
                let xd = alphabet.decode_input(x);
                for a in 0..alphabet.num_output_strings() {
                    let ad = alphabet.decode_output(a);
                    let counts = template.color_counts(&ad, &xd);
                    let bound = upper_bound_general(&template, 2, &counts).unwrap();
                    assert!(*b.entry_by_codes(x, a) <= bound);
                }
            }
        }
    }

    #[test]
    fn reduction_holds_on_iid_quantum_boxes() {
        let b = s_project(
            &chsh_q_round(&rat(1, 4)).iid_power(2).unwrap(),
            &SymmetryTemplate::chsh(),
        )
        .unwrap();
        let report = verify_reduction(&b, &ReductionKind::Chsh).unwrap();
        assert!(report.holds);
        assert_eq!(report.prefactor, rat_int(3));
        assert!(report.max_ratio <= rat_int(3));
    }

    #[test]
    fn pr_power_attains_the_prefactor_exactly() {
        for n in 1..=3usize {
            let report = verify_reduction(&pr_box(n), &ReductionKind::Chsh).unwrap();
            assert!(report.holds);
            assert_eq!(report.max_ratio, Rat::from_integer((n as u64 + 1).into()));
            // The witness is a fully satisfying cell: PR puts (1/2)^n there
            // and tau puts 2^-n (n+1)^-1.
            let ad: Vec<u8> = report
                .witness_output
                .chars()
                .map(|c| c.to_digit(36).unwrap() as u8)
                .collect();
            let xd: Vec<u8> = report
                .witness_input
                .chars()
                .map(|c| c.to_digit(36).unwrap() as u8)
                .collect();
            assert_eq!(crate::symmetry::chsh_satisfied_count(&ad, &xd), n);
        }
    }

    #[test]
    fn verify_reduction_rejects_broken_preconditions() {
        // Asymmetric: a deterministic box answering 0 everywhere is
        // permutation invariant but not CHSH-symmetric.
        let det = Box::deterministic(Alphabet::chsh(1), |_| 0).unwrap();
        assert!(matches!(
            verify_reduction(&det, &ReductionKind::Chsh),
            Err(ReductionError::NotSymmetric)
        ));
        // Not permutation invariant: product of two different rounds.
        let q1 = chsh_q_round(&rat(1, 8));
        let q2 = chsh_q_round(&rat(1, 5));
        let alphabet = Alphabet::chsh(2);
        let two = Box::from_fn(alphabet, |ad, xd| {
            q1.entry(&ad[..1], &xd[..1]).unwrap() * q2.entry(&ad[1..], &xd[1..]).unwrap()
        })
        .unwrap();
        assert!(matches!(
            verify_reduction(&two, &ReductionKind::Chsh),
            Err(ReductionError::NotPermutationInvariant)
        ));
        // Invalid entries.
        let mut bad = pr_box(1);
        bad.set_entry_by_codes(0, 0, rat(-1, 2));
        assert!(matches!(
            verify_reduction(&bad, &ReductionKind::Chsh),
            Err(ReductionError::InvalidBox(_))
        ));
    }

    #[test]
    fn plain_kind_accepts_any_invariant_box() {
        let alphabet = Alphabet::new(2, 2, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let b = random_invariant_box(&alphabet, &mut rng).unwrap();
        let kind = ReductionKind::Plain {
            inputs: 2,
            outputs: 2,
        };
        let report = verify_reduction(&b, &kind).unwrap();
        assert!(report.holds);
        assert_eq!(report.degrees_of_freedom, 2);
        assert_eq!(report.prefactor, rat_int(9));
    }

    #[test]
    fn counting_oracle_on_known_boxes() {
        let t = SymmetryTemplate::chsh();
        // PR^2 at a fully satisfying cell: exactly the 4 satisfying strings
        // share the value, and the bound is 2^2 C(2,2) = 4.
        let pr = pr_box(2);
        let report = counting_oracle(&pr, &t, &[0, 0], &[0, 0]).unwrap();
        assert_eq!(report.bound, 4);
        assert_eq!(report.count, 4);
        assert!(report.ok);
        // Uniform box: every string in the column matches.
        let u = Box::uniform(Alphabet::chsh(2)).unwrap();
        let report = counting_oracle(&u, &t, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(report.count, 16);
        assert!(report.ok);
        // The de Finetti state itself.
        let tau = crate::definetti::materialize_tau_chsh(2).unwrap();
        for (ad, xd) in [([0u8, 0], [0u8, 0]), ([1, 2], [0, 3]), ([3, 1], [2, 1])] {
            let report = counting_oracle(&tau, &t, &ad, &xd).unwrap();
            assert!(report.ok, "cell a={ad:?} x={xd:?}");
        }
    }

    #[test]
    fn counting_oracle_over_random_symmetric_boxes() {
        let t = SymmetryTemplate::chsh();
        let alphabet = Alphabet::chsh(2);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..3 {
            let b = random_symmetric_box(&alphabet, &t, &mut rng).unwrap();
            let sweep = counting_sweep(&b, &t).unwrap();
            assert!(sweep.all_ok);
            assert_eq!(sweep.cells, 256);
            // Spot-check the sweep against the single-cell oracle.
            for (ad, xd) in [([0u8, 0], [0u8, 0]), ([2, 1], [3, 0])] {
                assert!(counting_oracle(&b, &t, &ad, &xd).unwrap().ok);
            }
        }
    }

    #[test]
    fn random_boxes_are_valid_and_projections_are_exact() {
        let alphabet = Alphabet::chsh(2);
        let t = SymmetryTemplate::chsh();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let raw = random_box(&alphabet, &mut rng);
        assert!(raw.validate().is_ok());
        let inv = random_invariant_box(&alphabet, &mut rng).unwrap();
        assert!(inv.validate().is_ok());
        assert!(inv.is_permutation_invariant());
        let sym = random_symmetric_box(&alphabet, &t, &mut rng).unwrap();
        assert!(sym.validate().is_ok());
        assert!(sym.is_permutation_invariant());
        assert!(has_symmetry(&sym, &t).unwrap());
    }

    #[test]
    fn campaign_is_deterministic_and_holds() {
        let kind = ReductionKind::Chsh;
        let a = reduction_campaign(&kind, 2, 6, 12345).unwrap();
        let b = reduction_campaign(&kind, 2, 6, 12345).unwrap();
        assert!(a.all_hold);
        assert_eq!(a.failures, 0);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // Different seed, different boxes.
        let c = reduction_campaign(&kind, 2, 6, 54321).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn test_bound_on_fixture_channels() {
        let kind = ReductionKind::Chsh;
        // Always-fail: 1 <= prefactor * 1.
        let always = InvariantTest::new(constant_channel(2, true)).unwrap();
        let b = s_project(
            &chsh_q_round(&rat(1, 10)).iid_power(2).unwrap(),
            &SymmetryTemplate::chsh(),
        )
        .unwrap();
        let report = verify_test_bound(&always, &b, &kind).unwrap();
        assert!(report.holds);
        assert_eq!(report.failure_box, rat_int(1));
        assert_eq!(report.failure_tau, rat_int(1));
        // Coin flip: 1/3 <= prefactor * 1/3 (the channel ignores the box).
        let coin = InvariantTest::new(coin_flip_channel(2)).unwrap();
        let report = verify_test_bound(&coin, &b, &kind).unwrap();
        assert!(report.holds);
        assert_eq!(report.failure_box, rat(1, 3));
        assert_eq!(report.failure_tau, rat(1, 3));
        // CHSH score at threshold 3/4.
        let score = InvariantTest::new(chsh_score_channel(2, &rat(3, 4))).unwrap();
        let report = verify_test_bound(&score, &b, &kind).unwrap();
        assert!(report.holds);
        assert!(report.failure_box <= &report.prefactor * &report.failure_tau);
    }

    #[test]
    fn test_bound_rejects_non_invariant_tests() {
        let kind = ReductionKind::Chsh;
        let b = crate::definetti::materialize_tau_chsh(2).unwrap();
        // Not permutation invariant.
        let t1 = InvariantTest::new(first_round_channel(2)).unwrap();
        assert!(matches!(
            verify_test_bound(&t1, &b, &kind),
            Err(ReductionError::TestNotInvariant)
        ));
        // Permutation invariant but not letter invariant: rejected for a
        // kind with symmetry, accepted for the plain kind.
        let t2 = InvariantTest::new(output_zero_channel(2)).unwrap();
        assert!(matches!(
            verify_test_bound(&t2, &b, &kind),
            Err(ReductionError::TestNotInvariant)
        ));
        // Two-bit channels are not tests.
        let alphabet = Alphabet::chsh(1);
        let nx = alphabet.num_input_strings();
        let uniform = Rat::new(1.into(), (nx as u64).into());
        let wide = Channel::from_fn(alphabet, 2, vec![uniform; nx], |_, _| 3).unwrap();
        assert!(matches!(
            InvariantTest::new(wide),
            Err(ReductionError::TestNotBinary { .. })
        ));
    }

    #[test]
    fn test_bound_campaign_runs_clean() {
        let score = InvariantTest::new(chsh_score_channel(2, &rat(3, 4))).unwrap();
        let report = test_bound_campaign(&score, &ReductionKind::Chsh, 2, 4, 777).unwrap();
        assert!(report.all_hold);
        assert_eq!(report.trial_reports.len(), 4);
        assert_eq!(report.prefactor, rat_int(3));
    }

    #[test]
    fn trial_seeds_differ() {
        let seeds: Vec<u64> = (0..32).map(|t| trial_seed(99, t)).collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
    }
}
