//! Dense exact-rational conditional probability distributions over `n`
//! identical rounds, together with the round-permutation group action.
//!
//! A box stores `P(a|x)` for every output string `a` (length `n` over an
//! `l`-letter alphabet) and input string `x` (length `n` over `m` letters).
//! Entries live in a flat vector indexed by `x_code * l^n + a_code`, with
//! digit strings encoded big-endian so lexicographic string order matches
//! numeric code order. Round permutations act by `(P ∘ π)(a|x) =
//! P(π·a | π·x)` where `(π·s)[i] = s[π(i)]`.

use crate::rat::{format_rat, parse_rat, Rat};
use num::{One, Signed, Zero};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::Error as SerdeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Hard cap on dense materialization: `(m*l)^n` entries.
pub const MAX_DENSE_ENTRIES: u128 = 1 << 20;

/// Largest per-round alphabet that still has a digit character.
const MAX_LETTERS: usize = 36;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BoxError {
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("dense box would need {need} entries, cap is {cap}")]
    TooLarge { need: u128, cap: u128 },
    #[error("entry vector has length {got} but the alphabet needs {want}")]
    EntryCount { got: usize, want: usize },
    #[error("permutation acts on {perm} rounds but the box has {rounds}")]
    PermutationArity { perm: usize, rounds: usize },
    #[error("round map {0:?} is not a bijection")]
    NotAPermutation(Vec<usize>),
    #[error("operation needs a bipartite alphabet but the box has none")]
    NotBipartite,
    #[error("digit string `{s}` is not valid here: {why}")]
    BadString { s: String, why: String },
    #[error("boxes have different alphabets")]
    AlphabetMismatch,
    #[error("expected a single-round box, got {0} rounds")]
    NotSingleRound(usize),
}

pub type BoxResult<T> = Result<T, BoxError>;

/// Per-round bipartite structure: input letters factor as `(x_a, x_b)` and
/// output letters as `(a_a, a_b)`, encoded `x = x_a * inputs_b + x_b` and
/// `a = a_a * outputs_b + a_b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BipartiteShape {
    pub inputs_a: usize,
    pub inputs_b: usize,
    pub outputs_a: usize,
    pub outputs_b: usize,
}

/// Which marginal interface of a bipartite box to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Shape of a box: round count and per-round alphabet sizes, with optional
/// bipartite structure on the letters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    rounds: usize,
    inputs_per_round: usize,
    outputs_per_round: usize,
    bipartite: Option<BipartiteShape>,
}

impl Alphabet {
    pub fn new(rounds: usize, inputs_per_round: usize, outputs_per_round: usize) -> BoxResult<Self> {
        Self::build(rounds, inputs_per_round, outputs_per_round, None)
    }

    /// Bipartite alphabet from per-side `(inputs, outputs)` shapes.
    pub fn bipartite(
        rounds: usize,
        side_a: (usize, usize),
        side_b: (usize, usize),
    ) -> BoxResult<Self> {
        let shape = BipartiteShape {
            inputs_a: side_a.0,
            outputs_a: side_a.1,
            inputs_b: side_b.0,
            outputs_b: side_b.1,
        };
        Self::build(
            rounds,
            shape.inputs_a * shape.inputs_b,
            shape.outputs_a * shape.outputs_b,
            Some(shape),
        )
    }

    /// The joint alphabet of `n` two-party rounds with binary inputs and
    /// outputs on each side (the CHSH setting): `m = l = 4`.
    pub fn chsh(rounds: usize) -> Self {
        Self::bipartite(rounds, (2, 2), (2, 2)).expect("CHSH shape is always valid")
    }

    fn build(
        rounds: usize,
        m: usize,
        l: usize,
        bipartite: Option<BipartiteShape>,
    ) -> BoxResult<Self> {
        if rounds == 0 {
            return Err(BoxError::InvalidAlphabet("need at least one round".into()));
        }
        if m == 0 || l == 0 {
            return Err(BoxError::InvalidAlphabet(
                "alphabet sizes must be positive".into(),
            ));
        }
        if m > MAX_LETTERS || l > MAX_LETTERS {
            return Err(BoxError::InvalidAlphabet(format!(
                "per-round alphabets are capped at {MAX_LETTERS} letters"
            )));
        }
        if let Some(s) = &bipartite {
            if s.inputs_a == 0 || s.inputs_b == 0 || s.outputs_a == 0 || s.outputs_b == 0 {
                return Err(BoxError::InvalidAlphabet(
                    "bipartite side alphabets must be positive".into(),
                ));
            }
            if s.inputs_a * s.inputs_b != m || s.outputs_a * s.outputs_b != l {
                return Err(BoxError::InvalidAlphabet(
                    "bipartite shape does not factor the joint alphabet".into(),
                ));
            }
        }
        Ok(Alphabet {
            rounds,
            inputs_per_round: m,
            outputs_per_round: l,
            bipartite,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn inputs_per_round(&self) -> usize {
        self.inputs_per_round
    }

    pub fn outputs_per_round(&self) -> usize {
        self.outputs_per_round
    }

    pub fn bipartite_shape(&self) -> Option<&BipartiteShape> {
        self.bipartite.as_ref()
    }

    /// `m^n` as u128 (may exceed the dense cap; materialization checks that).
    pub fn num_input_strings_wide(&self) -> u128 {
        (self.inputs_per_round as u128).pow(self.rounds as u32)
    }

    pub fn num_output_strings_wide(&self) -> u128 {
        (self.outputs_per_round as u128).pow(self.rounds as u32)
    }

    pub fn num_input_strings(&self) -> usize {
        self.num_input_strings_wide() as usize
    }

    pub fn num_output_strings(&self) -> usize {
        self.num_output_strings_wide() as usize
    }

    pub fn dense_entries_wide(&self) -> u128 {
        self.num_input_strings_wide() * self.num_output_strings_wide()
    }

    fn decode(code: usize, base: usize, len: usize) -> Vec<u8> {
        let mut digits = vec![0u8; len];
        let mut c = code;
        for i in (0..len).rev() {
            digits[i] = (c % base) as u8;
            c /= base;
        }
        digits
    }

    fn encode(digits: &[u8], base: usize) -> usize {
        digits
            .iter()
            .fold(0usize, |acc, &d| acc * base + d as usize)
    }

    pub fn decode_output(&self, code: usize) -> Vec<u8> {
        Self::decode(code, self.outputs_per_round, self.rounds)
    }

    pub fn decode_input(&self, code: usize) -> Vec<u8> {
        Self::decode(code, self.inputs_per_round, self.rounds)
    }

    pub fn encode_output(&self, digits: &[u8]) -> BoxResult<usize> {
        self.check_digits(digits, self.outputs_per_round)?;
        Ok(Self::encode(digits, self.outputs_per_round))
    }

    pub fn encode_input(&self, digits: &[u8]) -> BoxResult<usize> {
        self.check_digits(digits, self.inputs_per_round)?;
        Ok(Self::encode(digits, self.inputs_per_round))
    }

    fn check_digits(&self, digits: &[u8], base: usize) -> BoxResult<()> {
        if digits.len() != self.rounds {
            return Err(BoxError::BadString {
                s: render_digits(digits),
                why: format!("length {} != {} rounds", digits.len(), self.rounds),
            });
        }
        if let Some(&d) = digits.iter().find(|&&d| d as usize >= base) {
            return Err(BoxError::BadString {
                s: render_digits(digits),
                why: format!("digit {d} out of range for base {base}"),
            });
        }
        Ok(())
    }

    pub fn render_output(&self, code: usize) -> String {
        render_digits(&self.decode_output(code))
    }

    pub fn render_input(&self, code: usize) -> String {
        render_digits(&self.decode_input(code))
    }

    pub fn parse_output(&self, s: &str) -> BoxResult<usize> {
        self.encode_output(&parse_digits(s)?)
    }

    pub fn parse_input(&self, s: &str) -> BoxResult<usize> {
        self.encode_input(&parse_digits(s)?)
    }

    /// Splits a joint output letter into `(a_a, a_b)`.
    pub fn split_output_letter(&self, a: usize) -> BoxResult<(usize, usize)> {
        let s = self.bipartite.as_ref().ok_or(BoxError::NotBipartite)?;
        Ok((a / s.outputs_b, a % s.outputs_b))
    }

    pub fn split_input_letter(&self, x: usize) -> BoxResult<(usize, usize)> {
        let s = self.bipartite.as_ref().ok_or(BoxError::NotBipartite)?;
        Ok((x / s.inputs_b, x % s.inputs_b))
    }

    pub fn join_output_letter(&self, a_a: usize, a_b: usize) -> BoxResult<usize> {
        let s = self.bipartite.as_ref().ok_or(BoxError::NotBipartite)?;
        Ok(a_a * s.outputs_b + a_b)
    }

    pub fn join_input_letter(&self, x_a: usize, x_b: usize) -> BoxResult<usize> {
        let s = self.bipartite.as_ref().ok_or(BoxError::NotBipartite)?;
        Ok(x_a * s.inputs_b + x_b)
    }
}

fn digit_char(d: u8) -> char {
    match d {
        0..=9 => (b'0' + d) as char,
        _ => (b'a' + d - 10) as char,
    }
}

fn char_digit(c: char) -> Option<u8> {
    match c {
        '0'..='9' => Some(c as u8 - b'0'),
        'a'..='z' => Some(c as u8 - b'a' + 10),
        _ => None,
    }
}

/// Renders a digit string (`0-9` then `a-z`, round 0 first).
pub fn render_digits(digits: &[u8]) -> String {
    digits.iter().map(|&d| digit_char(d)).collect()
}

/// Parses a digit string rendered by [`render_digits`].
pub fn parse_digits(s: &str) -> BoxResult<Vec<u8>> {
    s.chars()
        .map(|c| {
            char_digit(c).ok_or_else(|| BoxError::BadString {
                s: s.to_string(),
                why: format!("invalid digit character `{c}`"),
            })
        })
        .collect()
}

/// A bijection on round indices. Acting on a digit string,
/// `(π·s)[i] = s[π(i)]`; acting on a box, `(P ∘ π)(a|x) = P(π·a | π·x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPermutation {
    map: Vec<usize>,
}

impl RoundPermutation {
    pub fn new(map: Vec<usize>) -> BoxResult<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &i in &map {
            if i >= n || seen[i] {
                return Err(BoxError::NotAPermutation(map.clone()));
            }
            seen[i] = true;
        }
        Ok(RoundPermutation { map })
    }

    pub fn identity(n: usize) -> Self {
        RoundPermutation {
            map: (0..n).collect(),
        }
    }

    pub fn transposition(n: usize, i: usize, j: usize) -> BoxResult<Self> {
        if i >= n || j >= n {
            return Err(BoxError::NotAPermutation(vec![i, j]));
        }
        let mut map: Vec<usize> = (0..n).collect();
        map.swap(i, j);
        Ok(RoundPermutation { map })
    }

    /// The n-cycle sending round `i` to read from round `i+1 (mod n)`.
    pub fn cycle(n: usize) -> Self {
        RoundPermutation {
            map: (0..n).map(|i| (i + 1) % n).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.map.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn apply_digits(&self, s: &[u8]) -> Vec<u8> {
        self.map.iter().map(|&i| s[i]).collect()
    }

    /// All `n!` permutations; meant for small `n` only.
    pub fn all(n: usize) -> Vec<Self> {
        use itertools::Itertools;
        (0..n)
            .permutations(n)
            .map(|map| RoundPermutation { map })
            .collect()
    }

    /// Generating set for the symmetric group: the transposition `(0 1)` and
    /// the full cycle. A box fixed by both is fixed by every permutation.
    pub fn generators(n: usize) -> Vec<Self> {
        if n < 2 {
            return vec![Self::identity(n)];
        }
        vec![Self::transposition(n, 0, 1).unwrap(), Self::cycle(n)]
    }

    pub fn sample<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        RoundPermutation { map }
    }
}

/// Report from box validation: the first cell or column that fails to be a
/// conditional probability distribution, in canonical scan order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoxViolation {
    NegativeEntry { a: String, x: String, value: Rat },
    ColumnSum { x: String, sum: Rat },
}

impl fmt::Display for BoxViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxViolation::NegativeEntry { a, x, value } => {
                write!(f, "entry P({a}|{x}) = {} is negative", format_rat(value))
            }
            BoxViolation::ColumnSum { x, sum } => {
                write!(f, "column x = {x} sums to {}, not 1", format_rat(sum))
            }
        }
    }
}

/// Outcome of marginalizing a bipartite box onto one side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MarginalOutcome {
    Defined(Box),
    /// The partial sum depends on the discarded input: the kept cell
    /// `(a, x)` sums differently under two settings of the other side.
    Undefined(SignallingWitness),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignallingWitness {
    pub kept_output: String,
    pub kept_input: String,
    pub discarded_input_1: String,
    pub discarded_input_2: String,
    pub sum_1: Rat,
    pub sum_2: Rat,
}

/// A conditional probability distribution `P(a|x)` stored densely with exact
/// rational entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Box {
    alphabet: Alphabet,
    entries: Vec<Rat>,
}

impl Box {
    pub fn new(alphabet: Alphabet, entries: Vec<Rat>) -> BoxResult<Self> {
        let need = alphabet.dense_entries_wide();
        if need > MAX_DENSE_ENTRIES {
            return Err(BoxError::TooLarge {
                need,
                cap: MAX_DENSE_ENTRIES,
            });
        }
        let want = need as usize;
        if entries.len() != want {
            return Err(BoxError::EntryCount {
                got: entries.len(),
                want,
            });
        }
        Ok(Box { alphabet, entries })
    }

    /// Builds entries from a function of `(a_digits, x_digits)`.
    pub fn from_fn(
        alphabet: Alphabet,
        mut f: impl FnMut(&[u8], &[u8]) -> Rat,
    ) -> BoxResult<Self> {
        let need = alphabet.dense_entries_wide();
        if need > MAX_DENSE_ENTRIES {
            return Err(BoxError::TooLarge {
                need,
                cap: MAX_DENSE_ENTRIES,
            });
        }
        let nx = alphabet.num_input_strings();
        let na = alphabet.num_output_strings();
        let mut entries = Vec::with_capacity(nx * na);
        for x in 0..nx {
            let xd = alphabet.decode_input(x);
            for a in 0..na {
                let ad = alphabet.decode_output(a);
                entries.push(f(&ad, &xd));
            }
        }
        Ok(Box { alphabet, entries })
    }

    /// The uniform box: every entry `1/l^n`.
    pub fn uniform(alphabet: Alphabet) -> BoxResult<Self> {
        let na = alphabet.num_output_strings_wide();
        let v = Rat::new(1.into(), na.into());
        Self::from_fn(alphabet, |_, _| v.clone())
    }

    /// Deterministic box answering `f(x_code) = a_code`.
    pub fn deterministic(alphabet: Alphabet, mut f: impl FnMut(usize) -> usize) -> BoxResult<Self> {
        let need = alphabet.dense_entries_wide();
        if need > MAX_DENSE_ENTRIES {
            return Err(BoxError::TooLarge {
                need,
                cap: MAX_DENSE_ENTRIES,
            });
        }
        let na = alphabet.num_output_strings();
        let nx = alphabet.num_input_strings();
        let mut entries = vec![Rat::zero(); na * nx];
        for x in 0..nx {
            let a = f(x);
            assert!(a < na, "deterministic answer out of range");
            entries[x * na + a] = Rat::one();
        }
        Box::new(alphabet, entries)
    }

    /// `n`-fold product of a single-round box with itself.
    pub fn iid_power(&self, n: usize) -> BoxResult<Self> {
        if self.alphabet.rounds() != 1 {
            return Err(BoxError::NotSingleRound(self.alphabet.rounds()));
        }
        let alphabet = Alphabet::build(
            n,
            self.alphabet.inputs_per_round(),
            self.alphabet.outputs_per_round(),
            self.alphabet.bipartite.clone(),
        )?;
        let l = self.alphabet.outputs_per_round();
        Self::from_fn(alphabet, |ad, xd| {
            let mut v = Rat::one();
            for i in 0..n {
                v *= &self.entries[(xd[i] as usize) * l + ad[i] as usize];
            }
            v
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn entries(&self) -> &[Rat] {
        &self.entries
    }

    pub fn entry_by_codes(&self, x: usize, a: usize) -> &Rat {
        &self.entries[x * self.alphabet.num_output_strings() + a]
    }

    pub fn entry(&self, a_digits: &[u8], x_digits: &[u8]) -> BoxResult<&Rat> {
        let a = self.alphabet.encode_output(a_digits)?;
        let x = self.alphabet.encode_input(x_digits)?;
        Ok(self.entry_by_codes(x, a))
    }

    pub fn set_entry_by_codes(&mut self, x: usize, a: usize, v: Rat) {
        let na = self.alphabet.num_output_strings();
        self.entries[x * na + a] = v;
    }

    /// The column `P(·|x)` as a slice over output codes.
    pub fn column(&self, x: usize) -> &[Rat] {
        let na = self.alphabet.num_output_strings();
        &self.entries[x * na..(x + 1) * na]
    }

    /// Checks that every column is a probability distribution. Reports the
    /// first offending cell or column in canonical scan order.
    pub fn validate(&self) -> Result<(), BoxViolation> {
        let na = self.alphabet.num_output_strings();
        for x in 0..self.alphabet.num_input_strings() {
            let mut sum = Rat::zero();
            for a in 0..na {
                let v = self.entry_by_codes(x, a);
                if v.is_negative() {
                    return Err(BoxViolation::NegativeEntry {
                        a: self.alphabet.render_output(a),
                        x: self.alphabet.render_input(x),
                        value: v.clone(),
                    });
                }
                sum += v;
            }
            if !sum.is_one() {
                return Err(BoxViolation::ColumnSum {
                    x: self.alphabet.render_input(x),
                    sum,
                });
            }
        }
        Ok(())
    }

    /// `(P ∘ π)(a|x) = P(π·a | π·x)`.
    pub fn permute(&self, perm: &RoundPermutation) -> BoxResult<Self> {
        let n = self.alphabet.rounds();
        if perm.arity() != n {
            return Err(BoxError::PermutationArity {
                perm: perm.arity(),
                rounds: n,
            });
        }
        let na = self.alphabet.num_output_strings();
        let nx = self.alphabet.num_input_strings();
        let mut entries = Vec::with_capacity(na * nx);
        for x in 0..nx {
            let xd = self.alphabet.decode_input(x);
            let px = Alphabet::encode(&perm.apply_digits(&xd), self.alphabet.inputs_per_round());
            for a in 0..na {
                let ad = self.alphabet.decode_output(a);
                let pa =
                    Alphabet::encode(&perm.apply_digits(&ad), self.alphabet.outputs_per_round());
                entries.push(self.entry_by_codes(px, pa).clone());
            }
        }
        Ok(Box {
            alphabet: self.alphabet.clone(),
            entries,
        })
    }

    /// Sorted multiset of per-round `(input, output)` digit pairs. Two cells
    /// lie on the same orbit of the simultaneous round-permutation action
    /// exactly when their multisets agree, so this vector is a canonical
    /// orbit label.
    fn orbit_key(&self, x: usize, a: usize) -> Vec<u64> {
        let xd = self.alphabet.decode_input(x);
        let ad = self.alphabet.decode_output(a);
        let mut pairs: Vec<u64> = xd
            .iter()
            .zip(ad.iter())
            .map(|(&xi, &ai)| ((xi as u64) << 32) | ai as u64)
            .collect();
        pairs.sort_unstable();
        pairs
    }

    /// True iff `P ∘ π = P` for every round permutation, i.e. iff `P` is
    /// constant on orbits of the simultaneous action on inputs and outputs.
    /// Checked in one pass by comparing each cell against the first cell
    /// seen on its orbit, so the cost is independent of `n!`.
    pub fn is_permutation_invariant(&self) -> bool {
        let na = self.alphabet.num_output_strings();
        let nx = self.alphabet.num_input_strings();
        let mut rep: HashMap<Vec<u64>, &Rat> = HashMap::new();
        for x in 0..nx {
            for a in 0..na {
                let v = self.entry_by_codes(x, a);
                match rep.entry(self.orbit_key(x, a)) {
                    Entry::Occupied(seen) => {
                        if *seen.get() != v {
                            return false;
                        }
                    }
                    Entry::Vacant(slot) => {
                        slot.insert(v);
                    }
                }
            }
        }
        true
    }

    /// Uniform average of `P ∘ π` over all `n!` permutations; the exact
    /// projection onto permutation-invariant boxes. Since `π ↦ π·c` visits
    /// each cell of an orbit equally often, the average at a cell is the
    /// plain mean over its orbit, computed here in one grouping pass
    /// instead of by enumerating permutations.
    pub fn symmetrize(&self) -> Self {
        let na = self.alphabet.num_output_strings();
        let nx = self.alphabet.num_input_strings();
        let mut sums: HashMap<Vec<u64>, (Rat, u64)> = HashMap::new();
        let mut keys = Vec::with_capacity(nx * na);
        for x in 0..nx {
            for a in 0..na {
                let key = self.orbit_key(x, a);
                let slot = sums.entry(key.clone()).or_insert_with(|| (Rat::zero(), 0));
                slot.0 += self.entry_by_codes(x, a);
                slot.1 += 1;
                keys.push(key);
            }
        }
        let entries = keys
            .iter()
            .map(|key| {
                let (sum, count) = &sums[key];
                sum / Rat::from_integer((*count).into())
            })
            .collect();
        Box {
            alphabet: self.alphabet.clone(),
            entries,
        }
    }

    /// Marginal box on one side of a bipartite alphabet. The sum over the
    /// discarded side's outputs must not depend on the discarded side's
    /// input; otherwise the marginal is undefined and a witness is returned.
    pub fn marginal(&self, keep: Side) -> BoxResult<MarginalOutcome> {
        let shape = self
            .alphabet
            .bipartite_shape()
            .ok_or(BoxError::NotBipartite)?
            .clone();
        let n = self.alphabet.rounds();
        let (m_keep, l_keep, m_other, l_other) = match keep {
            Side::A => (shape.inputs_a, shape.outputs_a, shape.inputs_b, shape.outputs_b),
            Side::B => (shape.inputs_b, shape.outputs_b, shape.inputs_a, shape.outputs_a),
        };
        let out_alphabet = Alphabet::new(n, m_keep, l_keep)?;
        let join_in = |kd: u8, od: u8| -> u8 {
            match keep {
                Side::A => (kd as usize * shape.inputs_b + od as usize) as u8,
                Side::B => (od as usize * shape.inputs_b + kd as usize) as u8,
            }
        };
        let join_out = |kd: u8, od: u8| -> u8 {
            match keep {
                Side::A => (kd as usize * shape.outputs_b + od as usize) as u8,
                Side::B => (od as usize * shape.outputs_b + kd as usize) as u8,
            }
        };

        let n_keep_in = out_alphabet.num_input_strings();
        let n_keep_out = out_alphabet.num_output_strings();
        let n_other_in = (m_other as u128).pow(n as u32) as usize;
        let n_other_out = (l_other as u128).pow(n as u32) as usize;

        let mut entries = Vec::with_capacity(n_keep_in * n_keep_out);
        for xk in 0..n_keep_in {
            let xkd = Alphabet::decode(xk, m_keep, n);
            for ak in 0..n_keep_out {
                let akd = Alphabet::decode(ak, l_keep, n);
                let mut reference: Option<(usize, Rat)> = None;
                for xo in 0..n_other_in {
                    let xod = Alphabet::decode(xo, m_other, n);
                    let x_joint: Vec<u8> = (0..n).map(|i| join_in(xkd[i], xod[i])).collect();
                    let x_code = Alphabet::encode(&x_joint, self.alphabet.inputs_per_round());
                    let mut sum = Rat::zero();
                    for ao in 0..n_other_out {
                        let aod = Alphabet::decode(ao, l_other, n);
                        let a_joint: Vec<u8> = (0..n).map(|i| join_out(akd[i], aod[i])).collect();
                        let a_code = Alphabet::encode(&a_joint, self.alphabet.outputs_per_round());
                        sum += self.entry_by_codes(x_code, a_code);
                    }
                    match &reference {
                        None => reference = Some((xo, sum)),
                        Some((xo_ref, s_ref)) => {
                            if sum != *s_ref {
                                return Ok(MarginalOutcome::Undefined(SignallingWitness {
                                    kept_output: render_digits(&akd),
                                    kept_input: render_digits(&xkd),
                                    discarded_input_1: render_digits(&Alphabet::decode(
                                        *xo_ref, m_other, n,
                                    )),
                                    discarded_input_2: render_digits(&xod),
                                    sum_1: s_ref.clone(),
                                    sum_2: sum,
                                }));
                            }
                        }
                    }
                }
                entries.push(reference.expect("at least one discarded input").1);
            }
        }
        Ok(MarginalOutcome::Defined(Box {
            alphabet: out_alphabet,
            entries,
        }))
    }

    /// True iff both one-side marginals are well defined.
    pub fn is_nonsignalling(&self) -> BoxResult<bool> {
        let a = matches!(self.marginal(Side::A)?, MarginalOutcome::Defined(_));
        if !a {
            return Ok(false);
        }
        Ok(matches!(self.marginal(Side::B)?, MarginalOutcome::Defined(_)))
    }

    /// Entrywise convex combination `w * self + (1-w) * other`.
    pub fn mix(&self, other: &Box, w: &Rat) -> BoxResult<Self> {
        if self.alphabet != other.alphabet {
            return Err(BoxError::AlphabetMismatch);
        }
        let cw = Rat::one() - w;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(p, q)| w * p + &cw * q)
            .collect();
        Ok(Box {
            alphabet: self.alphabet.clone(),
            entries,
        })
    }
}

/// Wire form: digit strings plus reduced `num/den` rationals, entries in
/// canonical `(x, then a)` order.
#[derive(Serialize, Deserialize)]
struct BoxWire {
    n: usize,
    m: usize,
    l: usize,
    bipartite: Option<BipartiteShape>,
    entries: Vec<(String, String, String)>,
}

impl Serialize for Box {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let na = self.alphabet.num_output_strings();
        let nx = self.alphabet.num_input_strings();
        let mut entries = Vec::with_capacity(na * nx);
        for x in 0..nx {
            for a in 0..na {
                entries.push((
                    self.alphabet.render_output(a),
                    self.alphabet.render_input(x),
                    format_rat(self.entry_by_codes(x, a)),
                ));
            }
        }
        BoxWire {
            n: self.alphabet.rounds(),
            m: self.alphabet.inputs_per_round(),
            l: self.alphabet.outputs_per_round(),
            bipartite: self.alphabet.bipartite.clone(),
            entries,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Box {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = BoxWire::deserialize(deserializer)?;
        let alphabet = Alphabet::build(wire.n, wire.m, wire.l, wire.bipartite)
            .map_err(|e| D::Error::custom(e.to_string()))?;
        let need = alphabet.dense_entries_wide();
        if need > MAX_DENSE_ENTRIES {
            return Err(D::Error::custom(format!(
                "dense box would need {need} entries"
            )));
        }
        let na = alphabet.num_output_strings();
        let total = need as usize;
        if wire.entries.len() != total {
            return Err(D::Error::custom(format!(
                "expected {} entries, got {}",
                total,
                wire.entries.len()
            )));
        }
        let mut entries: Vec<Option<Rat>> = vec![None; total];
        for (a_s, x_s, v_s) in &wire.entries {
            let a = alphabet
                .parse_output(a_s)
                .map_err(|e| D::Error::custom(e.to_string()))?;
            let x = alphabet
                .parse_input(x_s)
                .map_err(|e| D::Error::custom(e.to_string()))?;
            let v = parse_rat(v_s).map_err(|e| D::Error::custom(e.to_string()))?;
            let slot = &mut entries[x * na + a];
            if slot.is_some() {
                return Err(D::Error::custom(format!(
                    "duplicate entry for a={a_s} x={x_s}"
                )));
            }
            *slot = Some(v);
        }
        let entries: Vec<Rat> = entries
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    let x = i / na;
                    let a = i % na;
                    D::Error::custom(format!(
                        "missing entry for a={} x={}",
                        alphabet.render_output(a),
                        alphabet.render_input(x)
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Box { alphabet, entries })
    }
}
