//! Channels acting on boxes, box partitions and extensions, and the
//! trace-distance comparison that turns entrywise de Finetti bounds into
//! channel-distinguishability bounds.
//!
//! A channel feeds a box a random input string and maps the resulting
//! `(a, x)` pair deterministically to a `t`-bit outcome, so its output
//! distribution is an affine function of the box entries. An extension of a
//! parent box offers, per setting `z`, a partition of the parent into
//! weighted components; the induced joint state is non-signalling between
//! the box interface and the setting interface by construction, because the
//! component weights do not depend on `x`.
//!
//! The key construction: given a de Finetti state `tau` dominating a
//! symmetric box `P` entrywise with scale `(n+1)^-d`, every extension of `P`
//! lifts to an extension of `tau` (scaled components plus a remainder), and
//! the lifted extension's trace distance is at least `(n+1)^-d` times the
//! original. Maximizing over extension families gives the diamond-gap bound
//! verified by [`verify_diamond_bound`].

use crate::boxes::{Alphabet, Box, BoxError, BoxViolation, RoundPermutation, MAX_DENSE_ENTRIES};
use crate::definetti::materialize_tau_general;
use crate::rat::{format_rat, parse_rat, rat_pow, serde_rat, Rat};
use crate::symmetry::{
    has_symmetry, letter_symmetry_generators, ColorMapping, SymmetryTemplate, TemplateError,
};
use num::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::de::Error as SerdeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("channel needs between 1 and {max} outcome bits, got {got}")]
    BitsRange { got: usize, max: usize },
    #[error("input distribution has {got} entries, alphabet needs {want}")]
    DistLength { got: usize, want: usize },
    #[error("input distribution invalid: {0}")]
    DistInvalid(String),
    #[error("outcome map has {got} entries, alphabet needs {want}")]
    MapLength { got: usize, want: usize },
    #[error("outcome {outcome} out of range for {bits} bits")]
    OutcomeRange { outcome: u32, bits: usize },
    #[error("channel and box alphabets differ")]
    AlphabetMismatch,
    #[error("channels have different outcome arities")]
    OutcomeMismatch,
    #[error("weight {0} outside [0, 1]")]
    WeightRange(String),
    #[error("partition needs at least one component")]
    EmptyPartition,
    #[error("partition weights sum to {0}, not 1")]
    WeightSum(String),
    #[error("setting {setting} does not reconstitute the parent at a={a} x={x}")]
    Reconstitution { setting: usize, a: String, x: String },
    #[error("extension needs at least one setting")]
    NoSettings,
    #[error("no such setting/component: z={z} c={c}")]
    NoSuchComponent { z: usize, c: usize },
    #[error("scaled component exceeds the parent at a={a} x={x}")]
    ScaleExceeded { a: String, x: String },
    #[error("empty extension family")]
    EmptyFamily,
    #[error("channel `{0}` is not invariant under the required mappings")]
    NotInvariant(String),
    #[error("box precondition failed: {0}")]
    BoxPrecondition(String),
    #[error("box invalid: {0}")]
    InvalidBox(BoxViolation),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub type ChannelResult<T> = Result<T, ChannelError>;

const MAX_OUTCOME_BITS: usize = 16;

/// A channel on `n`-round boxes: a distribution over input strings plus a
/// deterministic map from `(a, x)` to a `t`-bit outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Channel {
    alphabet: Alphabet,
    bits: usize,
    input_dist: Vec<Rat>,
    outcome_map: Vec<u32>,
}

impl Channel {
    pub fn new(
        alphabet: Alphabet,
        bits: usize,
        input_dist: Vec<Rat>,
        outcome_map: Vec<u32>,
    ) -> ChannelResult<Self> {
        if bits == 0 || bits > MAX_OUTCOME_BITS {
            return Err(ChannelError::BitsRange {
                got: bits,
                max: MAX_OUTCOME_BITS,
            });
        }
        if alphabet.dense_entries_wide() > MAX_DENSE_ENTRIES {
            return Err(BoxError::TooLarge {
                need: alphabet.dense_entries_wide(),
                cap: MAX_DENSE_ENTRIES,
            }
            .into());
        }
        let nx = alphabet.num_input_strings();
        if input_dist.len() != nx {
            return Err(ChannelError::DistLength {
                got: input_dist.len(),
                want: nx,
            });
        }
        let mut sum = Rat::zero();
        for (x, p) in input_dist.iter().enumerate() {
            if p.is_negative() {
                return Err(ChannelError::DistInvalid(format!(
                    "negative weight at x = {}",
                    alphabet.render_input(x)
                )));
            }
            sum += p;
        }
        if !sum.is_one() {
            return Err(ChannelError::DistInvalid(format!(
                "weights sum to {}",
                format_rat(&sum)
            )));
        }
        let total = nx * alphabet.num_output_strings();
        if outcome_map.len() != total {
            return Err(ChannelError::MapLength {
                got: outcome_map.len(),
                want: total,
            });
        }
        let limit = 1u32 << bits;
        if let Some(&bad) = outcome_map.iter().find(|&&k| k >= limit) {
            return Err(ChannelError::OutcomeRange { outcome: bad, bits });
        }
        Ok(Channel {
            alphabet,
            bits,
            input_dist,
            outcome_map,
        })
    }

    /// Builds the outcome map from a function of `(a_digits, x_digits)`.
    pub fn from_fn(
        alphabet: Alphabet,
        bits: usize,
        input_dist: Vec<Rat>,
        mut f: impl FnMut(&[u8], &[u8]) -> u32,
    ) -> ChannelResult<Self> {
        if alphabet.dense_entries_wide() > MAX_DENSE_ENTRIES {
            return Err(BoxError::TooLarge {
                need: alphabet.dense_entries_wide(),
                cap: MAX_DENSE_ENTRIES,
            }
            .into());
        }
        let nx = alphabet.num_input_strings();
        let na = alphabet.num_output_strings();
        let mut map = Vec::with_capacity(nx * na);
        for x in 0..nx {
            let xd = alphabet.decode_input(x);
            for a in 0..na {
                let ad = alphabet.decode_output(a);
                map.push(f(&ad, &xd));
            }
        }
        Channel::new(alphabet, bits, input_dist, map)
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn num_outcomes(&self) -> usize {
        1 << self.bits
    }

    pub fn input_dist(&self) -> &[Rat] {
        &self.input_dist
    }

    pub fn outcome(&self, x: usize, a: usize) -> u32 {
        self.outcome_map[x * self.alphabet.num_output_strings() + a]
    }
}

/// Output distribution over `t`-bit outcomes:
/// `E(k) = sum_x Pr(x) sum_{a: map(a,x)=k} P(a|x)`.
pub fn channel_output(ch: &Channel, b: &Box) -> ChannelResult<Vec<Rat>> {
    if ch.alphabet != *b.alphabet() {
        return Err(ChannelError::AlphabetMismatch);
    }
    let na = ch.alphabet.num_output_strings();
    let mut out = vec![Rat::zero(); ch.num_outcomes()];
    for x in 0..ch.alphabet.num_input_strings() {
        let pr = &ch.input_dist[x];
        if pr.is_zero() {
            continue;
        }
        for a in 0..na {
            let k = ch.outcome(x, a) as usize;
            out[k] += pr * b.entry_by_codes(x, a);
        }
    }
    Ok(out)
}

/// True iff the channel output is unchanged when the box is first relabeled
/// by `mapping`. Exact: the difference of the two affine functionals must be
/// columnwise constant with zero total, which is checked coefficient by
/// coefficient instead of sampling boxes.
pub fn is_invariant_under(ch: &Channel, mapping: &ColorMapping) -> ChannelResult<bool> {
    let alphabet = &ch.alphabet;
    let nx = alphabet.num_input_strings();
    let na = alphabet.num_output_strings();
    let k_count = ch.num_outcomes();
    if mapping.perm().arity() != alphabet.rounds()
        || mapping.input_map().len() != alphabet.inputs_per_round()
        || mapping.output_maps()[0].len() != alphabet.outputs_per_round()
    {
        return Err(ChannelError::AlphabetMismatch);
    }

    // Coefficients of P |-> output(mapping applied to P): scanning the
    // pre-relabeling cell (x~, a~), the contribution lands on the source
    // cell (perm x~, perm a~) with probability Pr(nu(x~)) and outcome
    // map(nu(x~), mu(a~)).
    let mut pull_pr: Vec<Rat> = vec![Rat::zero(); nx * na];
    let mut pull_k: Vec<u32> = vec![0; nx * na];
    for xt in 0..nx {
        let xtd = alphabet.decode_input(xt);
        let x_img: Vec<u8> = xtd
            .iter()
            .map(|&d| mapping.input_map()[d as usize] as u8)
            .collect();
        let x_img_code = alphabet.encode_input(&x_img)?;
        let x_src_code = alphabet.encode_input(&mapping.perm().apply_digits(&xtd))?;
        for at in 0..na {
            let atd = alphabet.decode_output(at);
            let a_img: Vec<u8> = atd
                .iter()
                .zip(xtd.iter())
                .map(|(&d, &xr)| mapping.output_maps()[xr as usize][d as usize] as u8)
                .collect();
            let a_img_code = alphabet.encode_output(&a_img)?;
            let a_src_code = alphabet.encode_output(&mapping.perm().apply_digits(&atd))?;
            let idx = x_src_code * na + a_src_code;
            pull_pr[idx] = ch.input_dist[x_img_code].clone();
            pull_k[idx] = ch.outcome(x_img_code, a_img_code);
        }
    }

    // Equality of affine functionals on boxes: per outcome k the coefficient
    // difference must not depend on a within a column, and the per-column
    // constants must sum to zero.
    let mut totals = vec![Rat::zero(); k_count];
    let mut first = vec![Rat::zero(); k_count];
    let mut current = vec![Rat::zero(); k_count];
    for x in 0..nx {
        for slot in first.iter_mut() {
            slot.set_zero();
        }
        first[ch.outcome(x, 0) as usize] += &ch.input_dist[x];
        first[pull_k[x * na] as usize] -= &pull_pr[x * na];
        for a in 1..na {
            let idx = x * na + a;
            for slot in current.iter_mut() {
                slot.set_zero();
            }
            current[ch.outcome(x, a) as usize] += &ch.input_dist[x];
            current[pull_k[idx] as usize] -= &pull_pr[idx];
            if current != first {
                return Ok(false);
            }
        }
        for (t, f) in totals.iter_mut().zip(first.iter()) {
            *t += f;
        }
    }
    Ok(totals.iter().all(|t| t.is_zero()))
}

/// True iff the channel is invariant under every round permutation, checked
/// on the generating transposition and cycle.
pub fn is_permutation_invariant_channel(ch: &Channel) -> ChannelResult<bool> {
    let n = ch.alphabet.rounds();
    let m = ch.alphabet.inputs_per_round();
    let l = ch.alphabet.outputs_per_round();
    // A throwaway full-grid template only used to carry identity letter maps.
    let carrier = SymmetryTemplate::no_symmetry(m, l)?;
    for perm in RoundPermutation::generators(n) {
        let mapping = ColorMapping::permutation_only(&carrier, perm);
        if !is_invariant_under(ch, &mapping)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// True iff the channel is invariant under all round permutations and all
/// color-preserving relabelings of the template. Checked on generators;
/// invariance extends to the group because the invariant set is a subgroup.
pub fn is_invariant_channel(ch: &Channel, template: &SymmetryTemplate) -> ChannelResult<bool> {
    let n = ch.alphabet.rounds();
    for perm in RoundPermutation::generators(n) {
        let mapping = ColorMapping::permutation_only(template, perm);
        if !is_invariant_under(ch, &mapping)? {
            return Ok(false);
        }
    }
    for mapping in letter_symmetry_generators(template, n) {
        if !is_invariant_under(ch, &mapping)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A weighted decomposition of one box into component boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    components: Vec<(Rat, Box)>,
}

impl Partition {
    pub fn new(components: Vec<(Rat, Box)>) -> ChannelResult<Self> {
        if components.is_empty() {
            return Err(ChannelError::EmptyPartition);
        }
        let alphabet = components[0].1.alphabet().clone();
        let mut sum = Rat::zero();
        for (w, b) in &components {
            if w.is_negative() || *w > Rat::one() {
                return Err(ChannelError::WeightRange(format_rat(w)));
            }
            if *b.alphabet() != alphabet {
                return Err(ChannelError::AlphabetMismatch);
            }
            sum += w;
        }
        if !sum.is_one() {
            return Err(ChannelError::WeightSum(format_rat(&sum)));
        }
        Ok(Partition { components })
    }

    pub fn trivial(parent: &Box) -> Self {
        Partition {
            components: vec![(Rat::one(), parent.clone())],
        }
    }

    pub fn components(&self) -> &[(Rat, Box)] {
        &self.components
    }

    pub fn alphabet(&self) -> &Alphabet {
        self.components[0].1.alphabet()
    }

    /// The weighted sum of the components.
    pub fn reconstitute(&self) -> Box {
        let alphabet = self.alphabet().clone();
        let total = alphabet.dense_entries_wide() as usize;
        let mut entries = vec![Rat::zero(); total];
        for (w, b) in &self.components {
            if w.is_zero() {
                continue;
            }
            for (slot, v) in entries.iter_mut().zip(b.entries().iter()) {
                *slot += w * v;
            }
        }
        Box::new(alphabet, entries).expect("component shape already validated")
    }
}

/// An extension of a parent box: per setting `z`, a partition whose weighted
/// sum is exactly the parent. The induced joint state `P(a, c | x, z) =
/// w_{z,c} P^c(a|x)` cannot signal from the box interface to the setting
/// interface: the marginal over `a` is the weight vector, independent of `x`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extension {
    parent: Box,
    settings: Vec<Partition>,
}

impl Extension {
    pub fn new(parent: Box, settings: Vec<Partition>) -> ChannelResult<Self> {
        if settings.is_empty() {
            return Err(ChannelError::NoSettings);
        }
        for (z, partition) in settings.iter().enumerate() {
            if partition.alphabet() != parent.alphabet() {
                return Err(ChannelError::AlphabetMismatch);
            }
            let sum = partition.reconstitute();
            if sum != parent {
                let alphabet = parent.alphabet();
                let na = alphabet.num_output_strings();
                let idx = sum
                    .entries()
                    .iter()
                    .zip(parent.entries().iter())
                    .position(|(u, v)| u != v)
                    .expect("some entry differs");
                return Err(ChannelError::Reconstitution {
                    setting: z,
                    a: alphabet.render_output(idx % na),
                    x: alphabet.render_input(idx / na),
                });
            }
        }
        Ok(Extension { parent, settings })
    }

    pub fn trivial(parent: Box) -> Self {
        let settings = vec![Partition::trivial(&parent)];
        Extension { parent, settings }
    }

    pub fn parent(&self) -> &Box {
        &self.parent
    }

    pub fn settings(&self) -> &[Partition] {
        &self.settings
    }

    /// Entry of the induced joint state `P(a, c | x, z)`.
    pub fn joint_entry(&self, z: usize, c: usize, x: usize, a: usize) -> ChannelResult<Rat> {
        let (w, b) = self
            .settings
            .get(z)
            .and_then(|p| p.components().get(c))
            .ok_or(ChannelError::NoSuchComponent { z, c })?;
        Ok(w * b.entry_by_codes(x, a))
    }

    /// Marginal of the joint state on the setting interface: the component
    /// weights, independent of `x` by construction.
    pub fn setting_marginal(&self, z: usize) -> ChannelResult<Vec<Rat>> {
        let partition = self
            .settings
            .get(z)
            .ok_or(ChannelError::NoSuchComponent { z, c: 0 })?;
        Ok(partition.components().iter().map(|(w, _)| w.clone()).collect())
    }
}

/// Conditioning the extension on observing component `c` at setting `z`:
/// the probability of `c` and the component box.
pub fn post_select(ext: &Extension, z: usize, c: usize) -> ChannelResult<(Rat, Box)> {
    let (w, b) = ext
        .settings()
        .get(z)
        .and_then(|p| p.components().get(c))
        .ok_or(ChannelError::NoSuchComponent { z, c })?;
    Ok((w.clone(), b.clone()))
}

/// True iff `weight * component <= parent` entrywise (so the pair can head a
/// partition of the parent with a valid remainder).
pub fn partition_check(parent: &Box, weight: &Rat, component: &Box) -> ChannelResult<bool> {
    if parent.alphabet() != component.alphabet() {
        return Err(ChannelError::AlphabetMismatch);
    }
    if weight.is_negative() || *weight > Rat::one() {
        return Err(ChannelError::WeightRange(format_rat(weight)));
    }
    Ok(parent
        .entries()
        .iter()
        .zip(component.entries().iter())
        .all(|(p, c)| weight * c <= *p))
}

/// The state left over after carving `weight * component` out of `parent`:
/// `(parent - weight*component) / (1 - weight)`. Errors if the scaled
/// component exceeds the parent anywhere or `weight = 1`.
pub fn remainder_state(parent: &Box, weight: &Rat, component: &Box) -> ChannelResult<Box> {
    if parent.alphabet() != component.alphabet() {
        return Err(ChannelError::AlphabetMismatch);
    }
    if weight.is_negative() || *weight >= Rat::one() {
        return Err(ChannelError::WeightRange(format_rat(weight)));
    }
    let rest = Rat::one() - weight;
    let alphabet = parent.alphabet().clone();
    let na = alphabet.num_output_strings();
    let mut entries = Vec::with_capacity(parent.entries().len());
    for (idx, (p, c)) in parent
        .entries()
        .iter()
        .zip(component.entries().iter())
        .enumerate()
    {
        let scaled = weight * c;
        if scaled > *p {
            return Err(ChannelError::ScaleExceeded {
                a: alphabet.render_output(idx % na),
                x: alphabet.render_input(idx / na),
            });
        }
        entries.push((p - scaled) / &rest);
    }
    Ok(Box::new(alphabet, entries).expect("entry count matches parent"))
}

/// Lifts partitions of symmetric boxes to an extension of the de Finetti
/// state `tau`: each partition's components are scaled by `(n+1)^-d` and
/// completed with the remainder state, giving one setting per partition.
/// Fails when the scaled reconstitution exceeds `tau` anywhere, i.e. exactly
/// when the entrywise reduction bound is violated.
pub fn build_definetti_extension(
    tau: &Box,
    partitions: &[Partition],
    degrees_of_freedom: usize,
) -> ChannelResult<Extension> {
    if partitions.is_empty() {
        return Err(ChannelError::NoSettings);
    }
    let n = tau.alphabet().rounds();
    let scale = rat_pow(
        &Rat::new(1.into(), (n as u64 + 1).into()),
        degrees_of_freedom,
    );
    let mut settings = Vec::with_capacity(partitions.len());
    for partition in partitions {
        let parent = partition.reconstitute();
        let mut components: Vec<(Rat, Box)> = partition
            .components()
            .iter()
            .map(|(w, b)| (&scale * w, b.clone()))
            .collect();
        if scale.is_one() {
            // d = 0: tau must equal the parent; Extension::new verifies it.
        } else {
            let remainder = remainder_state(tau, &scale, &parent)?;
            components.push((Rat::one() - &scale, remainder));
        }
        settings.push(Partition::new(components)?);
    }
    Extension::new(tau.clone(), settings)
}

/// Trace distance between two channels measured through an extension:
/// `(1/2) sum_k max_z sum_c w_c |E(P^c)(k) - F(P^c)(k)|`.
pub fn trace_distance(e: &Channel, f: &Channel, ext: &Extension) -> ChannelResult<Rat> {
    if e.bits != f.bits {
        return Err(ChannelError::OutcomeMismatch);
    }
    if e.alphabet != f.alphabet || e.alphabet != *ext.parent().alphabet() {
        return Err(ChannelError::AlphabetMismatch);
    }
    let k_count = e.num_outcomes();
    // Per setting, the weighted outcome deviations of its components.
    let mut per_setting: Vec<Vec<Rat>> = Vec::with_capacity(ext.settings().len());
    for partition in ext.settings() {
        let mut dev = vec![Rat::zero(); k_count];
        for (w, b) in partition.components() {
            if w.is_zero() {
                continue;
            }
            let out_e = channel_output(e, b)?;
            let out_f = channel_output(f, b)?;
            for k in 0..k_count {
                dev[k] += w * (&out_e[k] - &out_f[k]).abs();
            }
        }
        per_setting.push(dev);
    }
    let mut total = Rat::zero();
    for k in 0..k_count {
        let best = per_setting
            .iter()
            .map(|dev| &dev[k])
            .max()
            .expect("at least one setting");
        total += best;
    }
    Ok(total / Rat::from_integer(2.into()))
}

/// Largest trace distance over a family of extensions.
pub fn diamond_gap(e: &Channel, f: &Channel, family: &[Extension]) -> ChannelResult<Rat> {
    if family.is_empty() {
        return Err(ChannelError::EmptyFamily);
    }
    let mut best = Rat::zero();
    for ext in family {
        let d = trace_distance(e, f, ext)?;
        if d > best {
            best = d;
        }
    }
    Ok(best)
}

/// Two-component partitions of `parent` from a weight grid and seeded
/// deterministic directions: the first component is `(1-alpha) P + alpha D`,
/// kept whenever the complementary component stays a valid box. Nested grids
/// yield nested families, so the diamond gap is monotone under refinement.
/// The trivial partition is always included.
pub fn two_component_partitions(
    parent: &Box,
    grid: usize,
    directions: usize,
    seed: u64,
) -> ChannelResult<Vec<Partition>> {
    let mut out = vec![Partition::trivial(parent)];
    if grid == 0 {
        return Ok(out);
    }
    let alphabet = parent.alphabet().clone();
    let na = alphabet.num_output_strings();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..directions {
        let det = Box::deterministic(alphabet.clone(), |_| rng.gen_range(0..na))?;
        for alpha_step in 1..=grid {
            let alpha = Rat::new((alpha_step as u64).into(), (grid as u64).into());
            let first = det.mix(parent, &alpha)?;
            for w_step in 1..grid {
                let w = Rat::new((w_step as u64).into(), (grid as u64).into());
                if !partition_check(parent, &w, &first)? {
                    continue;
                }
                let second = remainder_state(parent, &w, &first)?;
                if second.validate().is_err() {
                    continue;
                }
                out.push(Partition::new(vec![
                    (w.clone(), first.clone()),
                    (Rat::one() - &w, second),
                ])?);
            }
        }
    }
    Ok(out)
}

/// Wraps partitions of one parent into an extension family: one single-
/// setting extension per partition, plus two-setting combinations of
/// consecutive partitions.
pub fn extension_family(parent: &Box, partitions: &[Partition]) -> ChannelResult<Vec<Extension>> {
    let mut out = Vec::new();
    for p in partitions {
        out.push(Extension::new(parent.clone(), vec![p.clone()])?);
    }
    for pair in partitions.windows(2) {
        out.push(Extension::new(
            parent.clone(),
            vec![pair[0].clone(), pair[1].clone()],
        )?);
    }
    Ok(out)
}

/// Per-extension outcome of the diamond-bound check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiamondInstanceReport {
    #[serde(with = "serde_rat")]
    pub parent_distance: Rat,
    #[serde(with = "serde_rat")]
    pub tau_distance: Rat,
    pub bound_ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiamondReport {
    pub rounds: usize,
    pub degrees_of_freedom: usize,
    #[serde(with = "serde_rat")]
    pub prefactor: Rat,
    pub instances: Vec<DiamondInstanceReport>,
    /// Largest `parent_distance / tau_distance` seen (0 when every tau
    /// distance vanishes, which forces the parent distances to vanish too).
    #[serde(with = "serde_rat")]
    pub worst_ratio: Rat,
    #[serde(with = "serde_rat")]
    pub diamond_gap_parents: Rat,
    #[serde(with = "serde_rat")]
    pub diamond_gap_tau: Rat,
    pub holds: bool,
}

/// Verifies the de Finetti bound on channel distinguishability over a family
/// of extensions of symmetric boxes: for every extension, the lifted tau
/// extension satisfies `T_P <= (n+1)^d T_tau`. Both channels must be
/// invariant (permutations and template relabelings); every parent must be a
/// valid, permutation-invariant box with the template symmetry.
pub fn verify_diamond_bound(
    e: &Channel,
    f: &Channel,
    template: &SymmetryTemplate,
    family: &[Extension],
) -> ChannelResult<DiamondReport> {
    if family.is_empty() {
        return Err(ChannelError::EmptyFamily);
    }
    if !is_invariant_channel(e, template)? {
        return Err(ChannelError::NotInvariant("first".into()));
    }
    if !is_invariant_channel(f, template)? {
        return Err(ChannelError::NotInvariant("second".into()));
    }
    let alphabet = family[0].parent().alphabet().clone();
    let n = alphabet.rounds();
    let d = template.degrees_of_freedom();
    let prefactor = rat_pow(&Rat::from_integer((n as u64 + 1).into()), d);

    // One shared tau on the same alphabet (bipartite metadata preserved).
    let tau_plain = materialize_tau_general(template, n)?;
    let tau = Box::new(alphabet.clone(), tau_plain.entries().to_vec())?;

    let mut instances = Vec::with_capacity(family.len());
    let mut worst_ratio = Rat::zero();
    let mut tau_family = Vec::with_capacity(family.len());
    let mut holds = true;
    for ext in family {
        let parent = ext.parent();
        if *parent.alphabet() != alphabet {
            return Err(ChannelError::AlphabetMismatch);
        }
        if let Err(v) = parent.validate() {
            return Err(ChannelError::InvalidBox(v));
        }
        if !parent.is_permutation_invariant() {
            return Err(ChannelError::BoxPrecondition(
                "parent box is not permutation invariant".into(),
            ));
        }
        if !has_symmetry(parent, template)? {
            return Err(ChannelError::BoxPrecondition(
                "parent box does not have the template symmetry".into(),
            ));
        }
        let parent_distance = trace_distance(e, f, ext)?;
        let tau_ext = build_definetti_extension(&tau, ext.settings(), d)?;
        let tau_distance = trace_distance(e, f, &tau_ext)?;
        let bound_ok = parent_distance <= &prefactor * &tau_distance;
        holds &= bound_ok;
        if !tau_distance.is_zero() {
            let ratio = &parent_distance / &tau_distance;
            if ratio > worst_ratio {
                worst_ratio = ratio;
            }
        }
        instances.push(DiamondInstanceReport {
            parent_distance,
            tau_distance,
            bound_ok,
        });
        tau_family.push(tau_ext);
    }
    let diamond_gap_parents = diamond_gap(e, f, family)?;
    let diamond_gap_tau = diamond_gap(e, f, &tau_family)?;
    Ok(DiamondReport {
        rounds: n,
        degrees_of_freedom: d,
        prefactor,
        instances,
        worst_ratio,
        diamond_gap_parents,
        diamond_gap_tau,
        holds,
    })
}

/// Renders a `t`-bit outcome as a bit string, highest bit first.
pub fn render_outcome(k: u32, bits: usize) -> String {
    (0..bits)
        .rev()
        .map(|i| if k >> i & 1 == 1 { '1' } else { '0' })
        .collect()
}

pub fn parse_outcome(s: &str, bits: usize) -> ChannelResult<u32> {
    if s.len() != bits || !s.chars().all(|c| c == '0' || c == '1') {
        return Err(ChannelError::OutcomeRange {
            outcome: u32::MAX,
            bits,
        });
    }
    Ok(s.chars().fold(0, |acc, c| acc * 2 + (c == '1') as u32))
}

// Fixture channels on the joint CHSH alphabet. All use one outcome bit with
// k = 1 read as "fail".

/// Scores the fraction of rounds satisfying the CHSH condition against a
/// threshold (a fixture choice, not a derived constant): fail iff
/// `satisfied / n < threshold`. Uniform input distribution.
pub fn chsh_score_channel(n: usize, threshold: &Rat) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let uniform = Rat::new(1.into(), (nx as u64).into());
    Channel::from_fn(alphabet, 1, vec![uniform; nx], |ad, xd| {
        let sat = crate::symmetry::chsh_satisfied_count(ad, xd);
        let fraction = Rat::new((sat as u64).into(), (n as u64).into());
        (fraction < *threshold) as u32
    })
    .expect("CHSH score channel is well formed")
}

/// Fails exactly on a fixed set of satisfied-round counts. Uniform inputs.
pub fn score_set_channel(n: usize, fail_counts: &[usize]) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let uniform = Rat::new(1.into(), (nx as u64).into());
    Channel::from_fn(alphabet, 1, vec![uniform; nx], |ad, xd| {
        fail_counts.contains(&crate::symmetry::chsh_satisfied_count(ad, xd)) as u32
    })
    .expect("score set channel is well formed")
}

/// `count` seeded score-set channels with nonempty proper fail sets.
pub fn seeded_score_channels(n: usize, count: usize, seed: u64) -> Vec<Channel> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            // Nonempty proper subset of {0..n}.
            let full = (1u32 << (n + 1)) - 1;
            let mask = rng.gen_range(1..full);
            let fail: Vec<usize> = (0..=n).filter(|&s| mask >> s & 1 == 1).collect();
            score_set_channel(n, &fail)
        })
        .collect()
}

/// Ignores the box entirely: fails iff the drawn input is the all-zero
/// string, which happens with probability 1/3. As a functional on boxes it
/// is constant, hence invariant under every relabeling; it exercises the
/// degenerate `1/3 <= prefactor * 1/3` instance of the test bound.
pub fn coin_flip_channel(n: usize) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let third = Rat::new(1.into(), 3.into());
    let rest = Rat::new(2.into(), (3 * (nx as u64 - 1)).into());
    let mut dist = vec![rest; nx];
    dist[0] = third;
    Channel::from_fn(alphabet, 1, dist, |_, xd| {
        xd.iter().all(|&d| d == 0) as u32
    })
    .expect("coin flip channel is well formed")
}

/// Fails iff every round answers letter 0. Permutation invariant, but not
/// invariant under output relabelings: swapping same-color letters moves the
/// all-zero string.
pub fn output_zero_channel(n: usize) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let uniform = Rat::new(1.into(), (nx as u64).into());
    Channel::from_fn(alphabet, 1, vec![uniform; nx], |ad, _| {
        ad.iter().all(|&d| d == 0) as u32
    })
    .expect("output zero channel is well formed")
}

/// Fails iff round 0 violates the CHSH condition: sensitive to round order,
/// hence not permutation invariant for n >= 2.
pub fn first_round_channel(n: usize) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let uniform = Rat::new(1.into(), (nx as u64).into());
    Channel::from_fn(alphabet, 1, vec![uniform; nx], |ad, xd| {
        !crate::symmetry::chsh_round_satisfied(ad[0] as usize, xd[0] as usize) as u32
    })
    .expect("first round channel is well formed")
}

/// Always reports the same outcome.
pub fn constant_channel(n: usize, fail: bool) -> Channel {
    let alphabet = Alphabet::chsh(n);
    let nx = alphabet.num_input_strings();
    let uniform = Rat::new(1.into(), (nx as u64).into());
    Channel::from_fn(alphabet, 1, vec![uniform; nx], |_, _| fail as u32)
        .expect("constant channel is well formed")
}

/// Wire form mirroring the box format: alphabet shape, `t`, the input
/// distribution, and the outcome map with bit-string outcomes.
#[derive(Serialize, Deserialize)]
struct ChannelWire {
    n: usize,
    m: usize,
    l: usize,
    bipartite: Option<crate::boxes::BipartiteShape>,
    t: usize,
    inputs: Vec<(String, String)>,
    map: Vec<(String, String, String)>,
}

impl Serialize for Channel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let nx = self.alphabet.num_input_strings();
        let na = self.alphabet.num_output_strings();
        let inputs = (0..nx)
            .map(|x| {
                (
                    self.alphabet.render_input(x),
                    format_rat(&self.input_dist[x]),
                )
            })
            .collect();
        let mut map = Vec::with_capacity(nx * na);
        for x in 0..nx {
            for a in 0..na {
                map.push((
                    self.alphabet.render_output(a),
                    self.alphabet.render_input(x),
                    render_outcome(self.outcome(x, a), self.bits),
                ));
            }
        }
        ChannelWire {
            n: self.alphabet.rounds(),
            m: self.alphabet.inputs_per_round(),
            l: self.alphabet.outputs_per_round(),
            bipartite: self.alphabet.bipartite_shape().copied(),
            t: self.bits,
            inputs,
            map,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Channel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = ChannelWire::deserialize(deserializer)?;
        let alphabet = match wire.bipartite {
            Some(s) => Alphabet::bipartite(
                wire.n,
                (s.inputs_a, s.outputs_a),
                (s.inputs_b, s.outputs_b),
            ),
            None => Alphabet::new(wire.n, wire.m, wire.l),
        }
        .map_err(|e| D::Error::custom(e.to_string()))?;
        if alphabet.inputs_per_round() != wire.m || alphabet.outputs_per_round() != wire.l {
            return Err(D::Error::custom("bipartite shape does not match m, l"));
        }
        let nx = alphabet.num_input_strings();
        let na = alphabet.num_output_strings();
        let mut dist: Vec<Option<Rat>> = vec![None; nx];
        for (x_s, p_s) in &wire.inputs {
            let x = alphabet
                .parse_input(x_s)
                .map_err(|e| D::Error::custom(e.to_string()))?;
            if dist[x].is_some() {
                return Err(D::Error::custom(format!("duplicate input weight for {x_s}")));
            }
            dist[x] = Some(parse_rat(p_s).map_err(|e| D::Error::custom(e.to_string()))?);
        }
        let dist: Vec<Rat> = dist
            .into_iter()
            .enumerate()
            .map(|(x, p)| {
                p.ok_or_else(|| {
                    D::Error::custom(format!("missing input weight for {}", alphabet.render_input(x)))
                })
            })
            .collect::<Result<_, _>>()?;
        let mut map: Vec<Option<u32>> = vec![None; nx * na];
        for (a_s, x_s, k_s) in &wire.map {
            let a = alphabet
                .parse_output(a_s)
                .map_err(|e| D::Error::custom(e.to_string()))?;
            let x = alphabet
                .parse_input(x_s)
                .map_err(|e| D::Error::custom(e.to_string()))?;
            let k = parse_outcome(k_s, wire.t).map_err(|e| D::Error::custom(e.to_string()))?;
            let slot = &mut map[x * na + a];
            if slot.is_some() {
                return Err(D::Error::custom(format!(
                    "duplicate outcome for a={a_s} x={x_s}"
                )));
            }
            *slot = Some(k);
        }
        let map: Vec<u32> = map
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                k.ok_or_else(|| {
                    D::Error::custom(format!(
                        "missing outcome for a={} x={}",
                        alphabet.render_output(i % na),
                        alphabet.render_input(i / na)
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        Channel::new(alphabet, wire.t, dist, map).map_err(|e| D::Error::custom(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::definetti::materialize_tau_chsh;
    use crate::rat::{rat, rat_int, rat_to_f64};
    use crate::symmetry::{chsh_q_round, pr_box, s_project};

    #[test]
    fn constant_channel_gives_point_mass() {
        let ch = constant_channel(2, true);
        let b = Box::uniform(Alphabet::chsh(2)).unwrap();
        let out = channel_output(&ch, &b).unwrap();
        assert_eq!(out, vec![rat_int(0), rat_int(1)]);
    }

    #[test]
    fn identity_readout_of_uniform_box_is_uniform() {
        // n = 1, binary outputs: k = a, uniform box, uniform inputs.
        let alphabet = Alphabet::new(1, 2, 2).unwrap();
        let ch = Channel::from_fn(
            alphabet.clone(),
            1,
            vec![rat(1, 2), rat(1, 2)],
            |ad, _| ad[0] as u32,
        )
        .unwrap();
        let out = channel_output(&ch, &Box::uniform(alphabet).unwrap()).unwrap();
        assert_eq!(out, vec![rat(1, 2), rat(1, 2)]);
    }

    #[test]
    fn chsh_score_on_iid_states_matches_binomial_oracle() {
        // Per round, Pr(satisfied) = 2 (1/2 - p) = 1 - 2p regardless of the
        // input, so failures follow a binomial tail.
        let p = rat(1, 5);
        let b = chsh_q_round(&p).iid_power(2).unwrap();
        let ch = chsh_score_channel(2, &rat(3, 4));
        let out = channel_output(&ch, &b).unwrap();
        // Fail iff fewer than 3/4 of 2 rounds satisfied, i.e. sat <= 1:
        // 1 - q^2 with q = 3/5.
        assert_eq!(out[1], rat(16, 25));
        assert_eq!(out[0], rat(9, 25));
    }

    #[test]
    fn channel_output_is_affine_in_the_box() {
        let ch = chsh_score_channel(2, &rat(1, 2));
        let b1 = chsh_q_round(&rat(1, 8)).iid_power(2).unwrap();
        let b2 = pr_box(2);
        let w = rat(2, 7);
        let mixed = b1.mix(&b2, &w).unwrap();
        let out_mixed = channel_output(&ch, &mixed).unwrap();
        let out1 = channel_output(&ch, &b1).unwrap();
        let out2 = channel_output(&ch, &b2).unwrap();
        for k in 0..2 {
            assert_eq!(out_mixed[k], &w * &out1[k] + (rat_int(1) - &w) * &out2[k]);
        }
    }

    #[test]
    fn channel_requires_matching_alphabet() {
        let ch = constant_channel(2, false);
        let b = Box::uniform(Alphabet::new(2, 4, 4).unwrap()).unwrap();
        assert!(matches!(
            channel_output(&ch, &b),
            Err(ChannelError::AlphabetMismatch)
        ));
    }

    #[test]
    fn channel_constructor_validates() {
        let alphabet = Alphabet::chsh(1);
        let nx = alphabet.num_input_strings();
        let uniform = Rat::new(1.into(), (nx as u64).into());
        // Bad bits.
        assert!(matches!(
            Channel::new(alphabet.clone(), 0, vec![uniform.clone(); nx], vec![0; 64]),
            Err(ChannelError::BitsRange { .. })
        ));
        // Bad distribution length.
        assert!(matches!(
            Channel::new(alphabet.clone(), 1, vec![uniform.clone(); nx - 1], vec![0; 16]),
            Err(ChannelError::DistLength { .. })
        ));
        // Outcome out of range for one bit.
        assert!(matches!(
            Channel::new(alphabet, 1, vec![uniform; nx], vec![2; 16]),
            Err(ChannelError::OutcomeRange { .. })
        ));
    }

    #[test]
    fn score_channel_is_fully_invariant() {
        let t = SymmetryTemplate::chsh();
        for n in 1..=2usize {
            let ch = chsh_score_channel(n, &rat(3, 4));
            assert!(is_invariant_channel(&ch, &t).unwrap());
            assert!(is_permutation_invariant_channel(&ch).unwrap());
        }
    }

    #[test]
    fn coin_flip_channel_is_a_constant_functional() {
        let t = SymmetryTemplate::chsh();
        let ch = coin_flip_channel(2);
        // It never consults the box, so it is invariant under everything...
        assert!(is_permutation_invariant_channel(&ch).unwrap());
        assert!(is_invariant_channel(&ch, &t).unwrap());
        // ...and fails with probability exactly 1/3 on any box.
        for b in [
            pr_box(2),
            Box::uniform(Alphabet::chsh(2)).unwrap(),
            chsh_q_round(&rat(1, 7)).iid_power(2).unwrap(),
        ] {
            assert_eq!(channel_output(&ch, &b).unwrap()[1], rat(1, 3));
        }
    }

    #[test]
    fn output_zero_channel_is_permutation_but_not_letter_invariant() {
        let t = SymmetryTemplate::chsh();
        let ch = output_zero_channel(2);
        assert!(is_permutation_invariant_channel(&ch).unwrap());
        assert!(!is_invariant_channel(&ch, &t).unwrap());
    }

    #[test]
    fn first_round_channel_is_not_permutation_invariant() {
        let ch = first_round_channel(2);
        assert!(!is_permutation_invariant_channel(&ch).unwrap());
    }

    #[test]
    fn invariance_check_agrees_with_explicit_relabeling_oracle() {
        // Oracle: a channel is invariant under a mapping iff its output on
        // g.P equals its output on P for spanning deterministic boxes.
        let t = SymmetryTemplate::chsh();
        let n = 2;
        let alphabet = Alphabet::chsh(n);
        let na = alphabet.num_output_strings();
        let nx = alphabet.num_input_strings();
        let channels = vec![
            chsh_score_channel(n, &rat(3, 4)),
            coin_flip_channel(n),
            output_zero_channel(n),
            first_round_channel(n),
        ];
        let mut mappings: Vec<ColorMapping> = RoundPermutation::all(n)
            .into_iter()
            .map(|p| ColorMapping::permutation_only(&t, p))
            .collect();
        mappings.extend(letter_symmetry_generators(&t, n));
        for ch in &channels {
            for g in &mappings {
                let fast = is_invariant_under(ch, g).unwrap();
                let mut slow = true;
                'outer: for x in 0..nx {
                    for a in 0..na {
                        if a == 0 && x > 0 {
                            continue; // reference box handled at x = 0
                        }
                        let det = Box::deterministic(alphabet.clone(), |xc| {
                            if xc == x {
                                a
                            } else {
                                0
                            }
                        })
                        .unwrap();
                        let moved = g.apply(&det).unwrap();
                        if channel_output(ch, &det).unwrap()
                            != channel_output(ch, &moved).unwrap()
                        {
                            slow = false;
                            break 'outer;
                        }
                    }
                }
                assert_eq!(fast, slow, "mapping disagreement");
            }
        }
    }

    #[test]
    fn partition_validates_weights_and_reconstitution() {
        let b = pr_box(1);
        let p = Partition::trivial(&b);
        assert_eq!(p.reconstitute(), b);
        assert!(Partition::new(vec![]).is_err());
        assert!(matches!(
            Partition::new(vec![(rat(1, 2), b.clone())]),
            Err(ChannelError::WeightSum(_))
        ));
        assert!(matches!(
            Partition::new(vec![(rat(3, 2), b.clone()), (rat(-1, 2), b)]),
            Err(ChannelError::WeightRange(_))
        ));
    }

    #[test]
    fn extension_rejects_settings_that_do_not_reconstitute() {
        let b = pr_box(1);
        let other = Box::uniform(Alphabet::chsh(1)).unwrap();
        let err = Extension::new(b, vec![Partition::trivial(&other)]);
        assert!(matches!(err, Err(ChannelError::Reconstitution { .. })));
    }

    #[test]
    fn joint_entries_and_setting_marginal() {
        let parent = Box::uniform(Alphabet::chsh(1)).unwrap();
        let pr = pr_box(1);
        // uniform = 1/2 PR + 1/2 anti-PR.
        let anti = remainder_state(&parent, &rat(1, 2), &pr).unwrap();
        let partition =
            Partition::new(vec![(rat(1, 2), pr.clone()), (rat(1, 2), anti.clone())]).unwrap();
        let ext = Extension::new(parent.clone(), vec![partition]).unwrap();
        assert_eq!(ext.setting_marginal(0).unwrap(), vec![rat(1, 2), rat(1, 2)]);
        // Joint entry: w_c * component entry.
        assert_eq!(
            ext.joint_entry(0, 0, 0, 0).unwrap(),
            rat(1, 2) * pr.entry_by_codes(0, 0)
        );
        let (w, comp) = post_select(&ext, 0, 1).unwrap();
        assert_eq!(w, rat(1, 2));
        assert_eq!(comp, anti);
        assert!(post_select(&ext, 0, 2).is_err());
    }

    #[test]
    fn remainder_of_single_chsh_round_is_the_flipped_box() {
        // tau at n = 1 is uniform; removing PR at weight 1/2 leaves the box
        // with all mass on violated cells.
        let tau = materialize_tau_chsh(1).unwrap();
        let r = remainder_state(&tau, &rat(1, 2), &pr_box(1)).unwrap();
        assert!(r.validate().is_ok());
        for x in 0..4 {
            for a in 0..4 {
                let expect = if crate::symmetry::chsh_round_satisfied(a, x) {
                    rat_int(0)
                } else {
                    rat(1, 2)
                };
                assert_eq!(*r.entry_by_codes(x, a), expect, "a={a} x={x}");
            }
        }
        // Carving out more than tau allows must fail.
        assert!(matches!(
            remainder_state(&tau, &rat(3, 4), &pr_box(1)),
            Err(ChannelError::ScaleExceeded { .. })
        ));
    }

    #[test]
    fn partition_check_matches_entrywise_domination() {
        let tau = materialize_tau_chsh(1).unwrap();
        assert!(partition_check(&tau, &rat(1, 2), &pr_box(1)).unwrap());
        assert!(!partition_check(&tau, &rat(3, 4), &pr_box(1)).unwrap());
        assert!(partition_check(&tau, &rat_int(1), &tau).unwrap());
    }

    #[test]
    fn definetti_extension_reconstitutes_tau_exactly() {
        let tau = materialize_tau_chsh(1).unwrap();
        let pr = pr_box(1);
        let ext = build_definetti_extension(&tau, &[Partition::trivial(&pr)], 1).unwrap();
        assert_eq!(ext.parent(), &tau);
        let setting = &ext.settings()[0];
        assert_eq!(setting.components().len(), 2);
        assert_eq!(setting.components()[0].0, rat(1, 2));
        assert_eq!(setting.components()[0].1, pr);
        // A violating parent (scaled above tau) is rejected.
        let too_big = build_definetti_extension(
            &tau,
            &[Partition::trivial(&pr)],
            0, // scale 1: pr itself must equal tau, it does not
        );
        assert!(too_big.is_err());
    }

    #[test]
    fn trace_distance_basic_values() {
        let n = 1;
        let ext = Extension::trivial(Box::uniform(Alphabet::chsh(n)).unwrap());
        let fail = constant_channel(n, true);
        let succeed = constant_channel(n, false);
        assert_eq!(trace_distance(&fail, &fail, &ext).unwrap(), rat_int(0));
        assert_eq!(trace_distance(&fail, &succeed, &ext).unwrap(), rat_int(1));
        // Against the constant-success channel, the distance on a trivial
        // extension is exactly the failure probability.
        let score = chsh_score_channel(n, &rat_int(1));
        let b = chsh_q_round(&rat(1, 8)).iid_power(n).unwrap();
        let p_fail = channel_output(&score, &b).unwrap()[1].clone();
        assert_eq!(
            trace_distance(&score, &succeed, &Extension::trivial(b)).unwrap(),
            p_fail
        );
    }

    #[test]
    fn finer_extensions_never_shrink_the_distance() {
        let n = 1;
        let parent = s_project(
            &chsh_q_round(&rat(1, 8)).iid_power(n).unwrap(),
            &SymmetryTemplate::chsh(),
        )
        .unwrap();
        let e = chsh_score_channel(n, &rat_int(1));
        let f = constant_channel(n, false);
        let coarse = two_component_partitions(&parent, 2, 2, 11).unwrap();
        let fine = two_component_partitions(&parent, 4, 2, 11).unwrap();
        assert!(coarse.len() < fine.len());
        let gap_coarse = diamond_gap(&e, &f, &extension_family(&parent, &coarse).unwrap()).unwrap();
        let gap_fine = diamond_gap(&e, &f, &extension_family(&parent, &fine).unwrap()).unwrap();
        assert!(gap_coarse <= gap_fine);
        // And the gap is at least the trivial-extension distance.
        let trivial = trace_distance(&e, &f, &Extension::trivial(parent.clone())).unwrap();
        assert!(gap_coarse >= trivial);
    }

    #[test]
    fn diamond_bound_holds_on_a_small_family() {
        let n = 1;
        let t = SymmetryTemplate::chsh();
        let parent = s_project(&chsh_q_round(&rat(1, 8)).iid_power(n).unwrap(), &t).unwrap();
        let e = chsh_score_channel(n, &rat_int(1));
        let f = constant_channel(n, false);
        let partitions = two_component_partitions(&parent, 2, 3, 5).unwrap();
        let family = extension_family(&parent, &partitions).unwrap();
        let report = verify_diamond_bound(&e, &f, &t, &family).unwrap();
        assert!(report.holds);
        assert_eq!(report.prefactor, rat_int(2));
        assert!(report.worst_ratio <= report.prefactor);
        assert!(rat_to_f64(&report.worst_ratio) > 0.0);
        assert!(report.diamond_gap_tau >= report.diamond_gap_parents / report.prefactor);
    }

    #[test]
    fn diamond_bound_rejects_non_invariant_channels() {
        let t = SymmetryTemplate::chsh();
        let parent = Box::uniform(Alphabet::chsh(2)).unwrap();
        let family = vec![Extension::trivial(parent)];
        let bad = output_zero_channel(2);
        let good = constant_channel(2, false);
        assert!(matches!(
            verify_diamond_bound(&bad, &good, &t, &family),
            Err(ChannelError::NotInvariant(_))
        ));
    }

    #[test]
    fn outcome_strings_round_trip() {
        assert_eq!(render_outcome(5, 4), "0101");
        assert_eq!(parse_outcome("0101", 4).unwrap(), 5);
        assert!(parse_outcome("012", 3).is_err());
        assert!(parse_outcome("01", 3).is_err());
    }

    #[test]
    fn channel_json_round_trip() {
        let ch = chsh_score_channel(1, &rat(3, 4));
        let s = serde_json::to_string(&ch).unwrap();
        let back: Channel = serde_json::from_str(&s).unwrap();
        assert_eq!(ch, back);
        assert_eq!(s, serde_json::to_string(&back).unwrap());
    }

    #[test]
    fn channel_json_rejects_bad_payloads() {
        let ch = constant_channel(1, false);
        let v = serde_json::to_value(&ch).unwrap();
        let mut missing = v.clone();
        missing["map"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<Channel>(missing).is_err());
        let mut bad_dist = v.clone();
        bad_dist["inputs"][0][1] = serde_json::Value::String("2/1".into());
        assert!(serde_json::from_value::<Channel>(bad_dist).is_err());
    }
}
