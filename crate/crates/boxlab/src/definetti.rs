//! De Finetti states: permutation-invariant boxes obtained by integrating a
//! family of i.i.d. single-round states against an explicit measure.
//!
//! For a single-class template with parameters `p_1..p_d` of multiplicities
//! `t_1..t_d` and unfree multiplicity `t_{d+1}`, the state is
//!
//! ```text
//! tau(a|x) = ∫ dp_1/c_1 ... ∫ dp_d/c_d  prod_j p_j^{N_j} * u^{N_{d+1}} ,
//! u = (1 - sum_j t_j p_j) / t_{d+1},   c_i = (1 - sum_{j<i} t_j p_j) / t_i ,
//! ```
//!
//! where `N_j` counts the rounds of cell `(a, x)` colored `p_j`. Each nesting
//! level is itself a normalized beta moment, so the integral telescopes into
//! the exact closed form
//!
//! ```text
//! tau = prod_j (1/t_j)^{N_j} * (1/t_{d+1})^{N_{d+1}}
//!       * prod_{i=1..d} [ C(M_i, N_i)^{-1} * (M_i + 1)^{-1} ] ,
//! M_i = N_i + N_{i+1} + ... + N_{d+1} ,
//! ```
//!
//! with no expansion needed at any `d`. Multi-class templates factor into a
//! product of per-class states over the rounds each class owns. Note the
//! state itself depends on the parameter ordering (the measure is not
//! symmetric in the `p_i`); only the lower bound below is order-free. This
//! module evaluates entries exactly, cross-checks them by nested
//! Gauss-Legendre quadrature, and materializes whole states as boxes.

use crate::boxes::{Alphabet, Box, BoxResult};
use crate::rat::{binomial, rat_pow, rat_to_f64, Rat};
use crate::symmetry::{ColorCounts, SymmetryTemplate};
use num::bigint::BigInt;
use num::One;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DefinettiError {
    #[error("counts vector has {got} colors, template has {want}")]
    CountsLength { got: usize, want: usize },
    #[error("counts sum to {total} but the state has {declared} rounds")]
    RoundMismatch { declared: usize, total: usize },
    #[error("exponent {exponent} out of range for beta integral with {rounds} rounds")]
    ExponentRange { exponent: usize, rounds: usize },
}

/// Normalized beta moment `∫_0^c (dp/c) p^N (c-p)^(n-N)`, exactly
/// `c^n / (C(n, N) (n+1))`.
pub fn beta_integral(c: &Rat, n: usize, big_n: usize) -> Result<Rat, DefinettiError> {
    if big_n > n {
        return Err(DefinettiError::ExponentRange {
            exponent: big_n,
            rounds: n,
        });
    }
    let mut v = rat_pow(c, n);
    v /= Rat::from_integer(binomial(n, big_n) * BigInt::from(n + 1));
    Ok(v)
}

/// Entry of the CHSH de Finetti state at a cell with `satisfied` of the `n`
/// rounds meeting the CHSH condition: `2^-n / (C(n, satisfied) (n+1))`.
pub fn tau_chsh_entry(n: usize, satisfied: usize) -> Result<Rat, DefinettiError> {
    if satisfied > n {
        return Err(DefinettiError::ExponentRange {
            exponent: satisfied,
            rounds: n,
        });
    }
    // The violated cells carry the parameter: N_1 = n - satisfied rounds of
    // weight p, integrated over [0, 1/2]; equal to the closed form below.
    let mut v = rat_pow(&Rat::new(1.into(), 2.into()), n);
    v /= Rat::from_integer(binomial(n, satisfied) * BigInt::from(n + 1));
    Ok(v)
}

/// Exact entry of the general de Finetti state for one cell's color counts.
/// `n` must equal the counts total; multi-class templates contribute one
/// factor per class.
pub fn tau_general_entry(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<Rat, DefinettiError> {
    check_counts(template, n, counts)?;
    let mut value = Rat::one();
    for (c, class) in template.classes().iter().enumerate() {
        value *= tau_class_exact(
            &class.multiplicities,
            class.unfree_multiplicity,
            template.class_counts(c, counts),
        );
    }
    Ok(value)
}

/// Quadrature evaluation of the same entry: nested Gauss-Legendre over the
/// parameter simplex, orders doubled until two consecutive evaluations agree
/// to 1e-12 relative. The integrand is polynomial in every variable, so the
/// first refinement already matches at desk scale.
pub fn tau_general_entry_quadrature(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<f64, DefinettiError> {
    check_counts(template, n, counts)?;
    let mut value = 1.0f64;
    for (c, class) in template.classes().iter().enumerate() {
        value *= quad::tau_class(
            &class.multiplicities,
            class.unfree_multiplicity,
            template.class_counts(c, counts),
        );
    }
    Ok(value)
}

/// CHSH entry via the quadrature path (single 1-d integral).
pub fn tau_chsh_entry_quadrature(n: usize, satisfied: usize) -> Result<f64, DefinettiError> {
    if satisfied > n {
        return Err(DefinettiError::ExponentRange {
            exponent: satisfied,
            rounds: n,
        });
    }
    // t = (2, 2): parameter counts first (violated rounds), then satisfied.
    Ok(quad::tau_class(&[2], 2, &[n - satisfied, satisfied]))
}

/// Order-free lower bound on the de Finetti entry: per class,
/// `(n_c+1)^{-d_c} * prod_j (1/t_j)^{N_j} * multinomial(n_c; N)^{-1}`,
/// multiplied over classes. Symmetric under any parameter reordering and
/// never above the exact entry; equality holds iff within each class all
/// but the last parameter count vanish.
pub fn lower_bound_general(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<Rat, DefinettiError> {
    check_counts(template, n, counts)?;
    let mut value = Rat::one();
    for (c, class) in template.classes().iter().enumerate() {
        let cc = template.class_counts(c, counts);
        let n_c: usize = cc.iter().sum();
        for (j, &t) in class.multiplicities.iter().enumerate() {
            value *= rat_pow(&Rat::new(1.into(), (t as u64).into()), cc[j]);
        }
        value *= rat_pow(
            &Rat::new(1.into(), (class.unfree_multiplicity as u64).into()),
            cc[class.multiplicities.len()],
        );
        value /= Rat::from_integer(crate::rat::multinomial(cc));
        let d_c = class.multiplicities.len();
        value /= rat_pow(&Rat::from_integer((n_c as u64 + 1).into()), d_c);
    }
    Ok(value)
}

fn check_counts(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<(), DefinettiError> {
    if counts.0.len() != template.num_colors() {
        return Err(DefinettiError::CountsLength {
            got: counts.0.len(),
            want: template.num_colors(),
        });
    }
    let total = counts.total();
    if total != n {
        return Err(DefinettiError::RoundMismatch {
            declared: n,
            total,
        });
    }
    Ok(())
}

/// One class's exact factor; `counts` lists the parameter counts in
/// integration order followed by the unfree count.
fn tau_class_exact(multiplicities: &[usize], unfree_multiplicity: usize, counts: &[usize]) -> Rat {
    let d = multiplicities.len();
    let mut value = rat_pow(
        &Rat::new(1.into(), (unfree_multiplicity as u64).into()),
        counts[d],
    );
    for (j, &t) in multiplicities.iter().enumerate() {
        value *= rat_pow(&Rat::new(1.into(), (t as u64).into()), counts[j]);
    }
    let mut suffix = counts[d];
    for i in (0..d).rev() {
        suffix += counts[i];
        value /= Rat::from_integer(binomial(suffix, counts[i]) * BigInt::from(suffix + 1));
    }
    value
}

/// A de Finetti state: a template plus a round count, with entries evaluated
/// on demand and an optional dense materialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeFinettiState {
    template: SymmetryTemplate,
    rounds: usize,
}

impl DeFinettiState {
    pub fn new(template: SymmetryTemplate, rounds: usize) -> Self {
        DeFinettiState { template, rounds }
    }

    /// The CHSH state on `n` joint two-party rounds.
    pub fn chsh(rounds: usize) -> Self {
        Self::new(SymmetryTemplate::chsh(), rounds)
    }

    pub fn template(&self) -> &SymmetryTemplate {
        &self.template
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn degrees_of_freedom(&self) -> usize {
        self.template.degrees_of_freedom()
    }

    /// `(n+1)^d`: the factor by which this state dominates every symmetric
    /// box of the same shape.
    pub fn prefactor(&self) -> Rat {
        rat_pow(
            &Rat::from_integer((self.rounds as u64 + 1).into()),
            self.degrees_of_freedom(),
        )
    }

    pub fn entry(&self, a_digits: &[u8], x_digits: &[u8]) -> Result<Rat, DefinettiError> {
        let counts = self.template.color_counts(a_digits, x_digits);
        tau_general_entry(&self.template, self.rounds, &counts)
    }

    /// Dense box on the template's alphabet. The CHSH template gets the
    /// joint bipartite alphabet so marginal and non-signalling checks apply.
    pub fn materialize(&self) -> BoxResult<Box> {
        let alphabet = if self.template == SymmetryTemplate::chsh() {
            Alphabet::chsh(self.rounds)
        } else {
            Alphabet::new(
                self.rounds,
                self.template.num_inputs(),
                self.template.num_outputs(),
            )?
        };
        let mut cache: HashMap<Vec<usize>, Rat> = HashMap::new();
        Box::from_fn(alphabet, |ad, xd| {
            let counts = self.template.color_counts(ad, xd);
            cache
                .entry(counts.0.clone())
                .or_insert_with(|| {
                    tau_general_entry(&self.template, self.rounds, &counts)
                        .expect("cell counts always total n")
                })
                .clone()
        })
    }
}

/// Dense CHSH de Finetti state on `n` rounds.
pub fn materialize_tau_chsh(n: usize) -> BoxResult<Box> {
    DeFinettiState::chsh(n).materialize()
}

/// Dense general de Finetti state for a template on `n` rounds.
pub fn materialize_tau_general(template: &SymmetryTemplate, n: usize) -> BoxResult<Box> {
    DeFinettiState::new(template.clone(), n).materialize()
}

/// Relative disagreement `|exact - quadrature| / max(1, |exact|)` between
/// the two evaluation paths for one cell.
pub fn evaluation_gap(
    template: &SymmetryTemplate,
    n: usize,
    counts: &ColorCounts,
) -> Result<f64, DefinettiError> {
    let exact = rat_to_f64(&tau_general_entry(template, n, counts)?);
    let quad = tau_general_entry_quadrature(template, n, counts)?;
    Ok((exact - quad).abs() / exact.abs().max(1.0))
}

/// Nested Gauss-Legendre quadrature for the parameter integrals.
pub mod quad {
    /// Nodes and weights of the `order`-point rule on [-1, 1], by Newton
    /// iteration on the Legendre polynomial.
    pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        for k in 0..order {
            // Standard starting guess for the k-th root.
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre_with_derivative(order, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(order, x);
            nodes[k] = x;
            weights[k] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    }

    /// `(P_n(x), P_n'(x))` via the three-term recurrence.
    fn legendre_with_derivative(order: usize, x: f64) -> (f64, f64) {
        let mut p0 = 1.0;
        let mut p1 = x;
        for j in 2..=order {
            let jf = j as f64;
            let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
            p0 = p1;
            p1 = p2;
        }
        let dp = if order == 0 {
            0.0
        } else {
            (order as f64) * (x * p1 - p0) / (x * x - 1.0)
        };
        (p1, dp)
    }

    /// One class's factor by nested quadrature, doubling the order until two
    /// evaluations agree to 1e-12 relative (cap 64).
    pub fn tau_class(multiplicities: &[usize], unfree_multiplicity: usize, counts: &[usize]) -> f64 {
        let mut order = 8;
        let mut last = tau_class_at_order(multiplicities, unfree_multiplicity, counts, order);
        while order < 64 {
            order *= 2;
            let next = tau_class_at_order(multiplicities, unfree_multiplicity, counts, order);
            if (next - last).abs() <= 1e-12 * next.abs().max(1.0) {
                return next;
            }
            last = next;
        }
        last
    }

    fn tau_class_at_order(
        multiplicities: &[usize],
        unfree_multiplicity: usize,
        counts: &[usize],
        order: usize,
    ) -> f64 {
        let (nodes, weights) = gauss_legendre(order);
        // Integrate level i over p_i in [0, c_i], c_i = rem / t_i, with the
        // normalized measure dp/c_i. Mapping p = c (xi+1)/2 turns each level
        // into (1/2) sum_k w_k f(p_k), stable even as c shrinks.
        fn level(
            i: usize,
            rem: f64,
            multiplicities: &[usize],
            unfree_multiplicity: usize,
            counts: &[usize],
            nodes: &[f64],
            weights: &[f64],
        ) -> f64 {
            if i == multiplicities.len() {
                return (rem / unfree_multiplicity as f64).powi(counts[i] as i32);
            }
            let c = rem / multiplicities[i] as f64;
            let mut acc = 0.0;
            for (xi, w) in nodes.iter().zip(weights.iter()) {
                let p = c * (xi + 1.0) / 2.0;
                let inner = level(
                    i + 1,
                    rem - multiplicities[i] as f64 * p,
                    multiplicities,
                    unfree_multiplicity,
                    counts,
                    nodes,
                    weights,
                );
                acc += 0.5 * w * p.powi(counts[i] as i32) * inner;
            }
            acc
        }
        level(
            0,
            1.0,
            multiplicities,
            unfree_multiplicity,
            counts,
            &nodes,
            &weights,
        )
    }
}
