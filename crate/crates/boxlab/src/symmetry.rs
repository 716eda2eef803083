//! Symmetry templates: which single-round states a box is allowed to be
//! built from, and the machinery that classifies every cell `(a, x)` of a
//! box by color.
//!
//! A template assigns each cell `(x, a)` of the single-round table a label:
//! either one of `d` free parameters `p1..pd` or `unfree`. Rows (inputs)
//! whose label multisets agree form a *class*; rows of different classes
//! must use disjoint parameters. Within a class the parameter `p_j` appears
//! `t_j` times per row and `unfree` appears `t_{d+1}` times, so the unfree
//! cells carry `(1 - sum_j t_j p_j) / t_{d+1}` and every row sums to one by
//! construction.
//!
//! An `n`-round box *has* the symmetry when its entries depend on `(a, x)`
//! only through the per-round color sequence. [`s_project`] is the exact
//! orbit-average onto that property; it preserves normalization because
//! every column of an orbit contains the same number of cells of each color.

use crate::boxes::{Alphabet, Box, BoxError, BoxResult, RoundPermutation};
use crate::rat::{rat, Rat};
use num::Zero;
use serde::de::Error as SerdeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template needs at least one row and one column")]
    Empty,
    #[error("row {row} has {got} labels, expected {want}")]
    RowLength { row: usize, got: usize, want: usize },
    #[error("row {row} has no unfree cell")]
    NoUnfree { row: usize },
    #[error("parameter ids must be contiguous from p1; missing p{missing}")]
    ParamGap { missing: usize },
    #[error("rows {row1} and {row2} are neither label-permutations of one another nor parameter-disjoint")]
    ConflictingRows { row1: usize, row2: usize },
    #[error("declared d = {declared} but labels use {derived} parameters")]
    DegreesOfFreedom { declared: usize, derived: usize },
    #[error("unknown label `{0}`")]
    BadLabel(String),
    #[error("template shape ({m}, {l}) does not match the box alphabet ({bm}, {bl})")]
    ShapeMismatch { m: usize, l: usize, bm: usize, bl: usize },
}

/// A single cell label: free parameter `Param(j)` (0-based) or `Unfree`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateLabel {
    Param(usize),
    Unfree,
}

/// One equivalence class of inputs: rows with equal label multisets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateClass {
    /// Input letters belonging to the class.
    pub inputs: Vec<usize>,
    /// Global parameter ids in canonical (ascending) integration order.
    pub params: Vec<usize>,
    /// `t_j`: how often each parameter appears per row, aligned with `params`.
    pub multiplicities: Vec<usize>,
    /// `t_{d+1}`: how often `unfree` appears per row.
    pub unfree_multiplicity: usize,
    /// First global color id of this class (params first, then unfree).
    pub color_offset: usize,
}

/// What a global color id refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorKind {
    Param(usize),
    Unfree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColorInfo {
    pub class: usize,
    pub kind: ColorKind,
    /// How many cells of this color each compatible row contains.
    pub multiplicity: usize,
}

/// Per-color cell counts of one `(a, x)` pair; indexed by global color id.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ColorCounts(pub Vec<usize>);

impl ColorCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// A validated symmetry template over an `(m, l)` single-round table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymmetryTemplate {
    rows: Vec<Vec<TemplateLabel>>,
    classes: Vec<TemplateClass>,
    class_of_input: Vec<usize>,
    color_grid: Vec<usize>,
    colors: Vec<ColorInfo>,
    num_params: usize,
}

impl SymmetryTemplate {
    pub fn new(rows: Vec<Vec<TemplateLabel>>) -> Result<Self, TemplateError> {
        let m = rows.len();
        if m == 0 || rows[0].is_empty() {
            return Err(TemplateError::Empty);
        }
        let l = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != l {
                return Err(TemplateError::RowLength {
                    row: i,
                    got: row.len(),
                    want: l,
                });
            }
            if !row.contains(&TemplateLabel::Unfree) {
                return Err(TemplateError::NoUnfree { row: i });
            }
        }

        // Parameter ids must be exactly 0..d.
        let mut used: Vec<usize> = rows
            .iter()
            .flatten()
            .filter_map(|lab| match lab {
                TemplateLabel::Param(j) => Some(*j),
                TemplateLabel::Unfree => None,
            })
            .collect();
        used.sort_unstable();
        used.dedup();
        for (want, &got) in used.iter().enumerate() {
            if got != want {
                return Err(TemplateError::ParamGap { missing: want + 1 });
            }
        }
        let num_params = used.len();

        // Rows with equal label multisets share a class; any other pair must
        // be parameter-disjoint.
        let multiset = |row: &Vec<TemplateLabel>| -> Vec<TemplateLabel> {
            let mut s = row.clone();
            s.sort();
            s
        };
        let param_set = |row: &Vec<TemplateLabel>| -> Vec<usize> {
            let mut s: Vec<usize> = row
                .iter()
                .filter_map(|lab| match lab {
                    TemplateLabel::Param(j) => Some(*j),
                    TemplateLabel::Unfree => None,
                })
                .collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        for i in 0..m {
            for j in i + 1..m {
                let same = multiset(&rows[i]) == multiset(&rows[j]);
                if !same {
                    let pi = param_set(&rows[i]);
                    let pj = param_set(&rows[j]);
                    if pi.iter().any(|p| pj.contains(p)) {
                        return Err(TemplateError::ConflictingRows { row1: i, row2: j });
                    }
                }
            }
        }

        // Build classes in order of first appearance.
        let mut class_of_input = vec![usize::MAX; m];
        let mut class_keys: Vec<Vec<TemplateLabel>> = Vec::new();
        let mut class_inputs: Vec<Vec<usize>> = Vec::new();
        for x in 0..m {
            let key = multiset(&rows[x]);
            match class_keys.iter().position(|k| *k == key) {
                Some(c) => {
                    class_of_input[x] = c;
                    class_inputs[c].push(x);
                }
                None => {
                    class_of_input[x] = class_keys.len();
                    class_keys.push(key);
                    class_inputs.push(vec![x]);
                }
            }
        }

        let mut classes = Vec::with_capacity(class_keys.len());
        let mut colors = Vec::new();
        for (c, inputs) in class_inputs.into_iter().enumerate() {
            let rep = &rows[inputs[0]];
            let params = param_set(&rows[inputs[0]]);
            let multiplicities: Vec<usize> = params
                .iter()
                .map(|&p| rep.iter().filter(|&&lab| lab == TemplateLabel::Param(p)).count())
                .collect();
            let unfree_multiplicity = rep
                .iter()
                .filter(|&&lab| lab == TemplateLabel::Unfree)
                .count();
            let color_offset = colors.len();
            for (k, &p) in params.iter().enumerate() {
                colors.push(ColorInfo {
                    class: c,
                    kind: ColorKind::Param(p),
                    multiplicity: multiplicities[k],
                });
            }
            colors.push(ColorInfo {
                class: c,
                kind: ColorKind::Unfree,
                multiplicity: unfree_multiplicity,
            });
            classes.push(TemplateClass {
                inputs,
                params,
                multiplicities,
                unfree_multiplicity,
                color_offset,
            });
        }

        // O(1) color lookup per cell.
        let mut color_grid = vec![usize::MAX; m * l];
        for x in 0..m {
            let class = &classes[class_of_input[x]];
            for a in 0..l {
                let color = match rows[x][a] {
                    TemplateLabel::Unfree => class.color_offset + class.params.len(),
                    TemplateLabel::Param(p) => {
                        let k = class
                            .params
                            .iter()
                            .position(|&q| q == p)
                            .expect("class params cover the row");
                        class.color_offset + k
                    }
                };
                color_grid[x * l + a] = color;
            }
        }

        Ok(SymmetryTemplate {
            rows,
            classes,
            class_of_input,
            color_grid,
            colors,
            num_params,
        })
    }

    /// The CHSH template on the joint two-party alphabet (`m = l = 4`):
    /// one parameter on the cells violating `a XOR b = x AND y`, unfree on
    /// the satisfying cells. Single class, `d = 1`, `t = (2, 2)`.
    pub fn chsh() -> Self {
        let rows = (0..4)
            .map(|x| {
                (0..4)
                    .map(|a| {
                        if chsh_round_satisfied(a, x) {
                            TemplateLabel::Unfree
                        } else {
                            TemplateLabel::Param(0)
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(rows).expect("CHSH template is valid")
    }

    /// The template whose symmetry every box has: each input is its own
    /// class with `l - 1` private parameters, so `d = m (l - 1)`.
    pub fn no_symmetry(m: usize, l: usize) -> Result<Self, TemplateError> {
        let rows = (0..m)
            .map(|x| {
                (0..l)
                    .map(|a| {
                        if a + 1 == l {
                            TemplateLabel::Unfree
                        } else {
                            TemplateLabel::Param(x * (l - 1) + a)
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn num_inputs(&self) -> usize {
        self.rows.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.rows[0].len()
    }

    /// Total number of free parameters `d` across all classes.
    pub fn degrees_of_freedom(&self) -> usize {
        self.num_params
    }

    pub fn label(&self, x: usize, a: usize) -> TemplateLabel {
        self.rows[x][a]
    }

    pub fn rows(&self) -> &[Vec<TemplateLabel>] {
        &self.rows
    }

    pub fn classes(&self) -> &[TemplateClass] {
        &self.classes
    }

    pub fn class_of_input(&self, x: usize) -> usize {
        self.class_of_input[x]
    }

    pub fn num_colors(&self) -> usize {
        self.colors.len()
    }

    pub fn color_info(&self, color: usize) -> &ColorInfo {
        &self.colors[color]
    }

    /// Global color id of the cell `(x, a)`.
    pub fn color_of(&self, x: usize, a: usize) -> usize {
        self.color_grid[x * self.num_outputs() + a]
    }

    fn check_shape(&self, alphabet: &Alphabet) -> Result<(), TemplateError> {
        if alphabet.inputs_per_round() != self.num_inputs()
            || alphabet.outputs_per_round() != self.num_outputs()
        {
            return Err(TemplateError::ShapeMismatch {
                m: self.num_inputs(),
                l: self.num_outputs(),
                bm: alphabet.inputs_per_round(),
                bl: alphabet.outputs_per_round(),
            });
        }
        Ok(())
    }

    /// Per-round color ids of a cell `(a, x)` of an `n`-round box.
    pub fn color_sequence(&self, a_digits: &[u8], x_digits: &[u8]) -> Vec<usize> {
        a_digits
            .iter()
            .zip(x_digits.iter())
            .map(|(&a, &x)| self.color_of(x as usize, a as usize))
            .collect()
    }

    /// Color counts `N_i` of a cell, indexed by global color id.
    pub fn color_counts(&self, a_digits: &[u8], x_digits: &[u8]) -> ColorCounts {
        let mut counts = vec![0usize; self.num_colors()];
        for (&a, &x) in a_digits.iter().zip(x_digits.iter()) {
            counts[self.color_of(x as usize, a as usize)] += 1;
        }
        ColorCounts(counts)
    }

    /// The slice of `counts` belonging to one class: parameters in canonical
    /// order, then the class unfree color.
    pub fn class_counts<'a>(&self, class: usize, counts: &'a ColorCounts) -> &'a [usize] {
        let c = &self.classes[class];
        &counts.0[c.color_offset..c.color_offset + c.params.len() + 1]
    }

    /// Enumerates the color counts of every cell `(a, x)` reachable for an
    /// `n`-round box, without materializing a box: one canonical input per
    /// distinct class pattern is enough because counts only see classes.
    pub fn reachable_counts(&self, n: usize) -> Vec<ColorCounts> {
        let mut seen: HashMap<Vec<usize>, ()> = HashMap::new();
        let mut out = Vec::new();
        // Distribute the n rounds over classes, then the class rounds over
        // that class's colors.
        let num_classes = self.classes.len();
        let mut class_split = vec![0usize; num_classes];
        self.enumerate_splits(0, n, &mut class_split, &mut |split| {
            let mut counts = vec![0usize; self.num_colors()];
            self.fill_class_counts(0, split, &mut counts, &mut |c| {
                if seen.insert(c.to_vec(), ()).is_none() {
                    out.push(ColorCounts(c.to_vec()));
                }
            });
        });
        out
    }

    fn enumerate_splits(
        &self,
        class: usize,
        remaining: usize,
        split: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]),
    ) {
        if class + 1 == split.len() {
            split[class] = remaining;
            f(split);
            return;
        }
        for k in 0..=remaining {
            split[class] = k;
            self.enumerate_splits(class + 1, remaining - k, split, f);
        }
    }

    fn fill_class_counts(
        &self,
        class: usize,
        split: &[usize],
        counts: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]),
    ) {
        if class == self.classes.len() {
            f(counts);
            return;
        }
        let c = &self.classes[class];
        let width = c.params.len() + 1;
        // Compositions of split[class] into `width` colors.
        fn compositions(
            slot: usize,
            width: usize,
            remaining: usize,
            base: usize,
            counts: &mut Vec<usize>,
            next: &mut dyn FnMut(&mut Vec<usize>),
        ) {
            if slot + 1 == width {
                counts[base + slot] = remaining;
                next(counts);
                counts[base + slot] = 0;
                return;
            }
            for k in 0..=remaining {
                counts[base + slot] = k;
                compositions(slot + 1, width, remaining - k, base, counts, next);
                counts[base + slot] = 0;
            }
        }
        let base = c.color_offset;
        let mut cont = |counts: &mut Vec<usize>| {
            self.fill_class_counts(class + 1, split, counts, f);
        };
        compositions(0, width, split[class], base, counts, &mut cont);
    }
}

/// True iff the joint letters satisfy the CHSH condition `a XOR b = x AND y`
/// (letters encoded `a = 2 a_A + a_B`, `x = 2 x_A + x_B`).
pub fn chsh_round_satisfied(a_letter: usize, x_letter: usize) -> bool {
    let (aa, ab) = (a_letter / 2, a_letter % 2);
    let (xa, xb) = (x_letter / 2, x_letter % 2);
    (aa ^ ab) == (xa & xb)
}

/// Number of rounds of the cell `(a, x)` satisfying the CHSH condition.
pub fn chsh_satisfied_count(a_digits: &[u8], x_digits: &[u8]) -> usize {
    a_digits
        .iter()
        .zip(x_digits.iter())
        .filter(|(&a, &x)| chsh_round_satisfied(a as usize, x as usize))
        .count()
}

/// The single-round two-party state with weight `p` on each CHSH-violating
/// cell and `1/2 - p` on each satisfying cell. `p = 0` wins the CHSH game
/// with certainty; `p = 1/4` is the uniform box.
pub fn chsh_q_round(p: &Rat) -> Box {
    let half = rat(1, 2);
    Box::from_fn(Alphabet::chsh(1), |ad, xd| {
        if chsh_round_satisfied(ad[0] as usize, xd[0] as usize) {
            &half - p
        } else {
            p.clone()
        }
    })
    .expect("single CHSH round is always materializable")
}

/// The box winning the CHSH game with certainty, `n` i.i.d. rounds.
pub fn pr_box(n: usize) -> Box {
    chsh_q_round(&Rat::zero())
        .iid_power(n)
        .expect("CHSH rounds stay under the dense cap for desk-scale n")
}

/// True iff the box's entries depend on `(a, x)` only through the per-round
/// color sequence.
pub fn has_symmetry(b: &Box, template: &SymmetryTemplate) -> Result<bool, TemplateError> {
    template.check_shape(b.alphabet())?;
    let alphabet = b.alphabet();
    let mut seen: HashMap<Vec<usize>, Rat> = HashMap::new();
    for x in 0..alphabet.num_input_strings() {
        let xd = alphabet.decode_input(x);
        for a in 0..alphabet.num_output_strings() {
            let ad = alphabet.decode_output(a);
            let key = template.color_sequence(&ad, &xd);
            let v = b.entry_by_codes(x, a);
            match seen.get(&key) {
                None => {
                    seen.insert(key, v.clone());
                }
                Some(w) => {
                    if w != v {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Result of the CHSH-form check: either symmetric with the recovered
/// per-round violation weight, or a witness pair of cells that share a color
/// sequence but differ in value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChshCheck {
    Symmetric { violation_weight: Rat },
    Asymmetric { a1: String, x1: String, a2: String, x2: String },
}

impl ChshCheck {
    pub fn is_symmetric(&self) -> bool {
        matches!(self, ChshCheck::Symmetric { .. })
    }
}

/// Checks whether a box on the joint CHSH alphabet is of CHSH form: entries
/// depend only on which rounds satisfy `a XOR b = x AND y`. On success the
/// per-round violation weight is recovered from the first adjacent pair of
/// all-zero-input cells with positive total mass.
pub fn is_chsh_symmetric(b: &Box) -> BoxResult<ChshCheck> {
    let alphabet = b.alphabet();
    let shape = alphabet.bipartite_shape().ok_or(BoxError::NotBipartite)?;
    if (shape.inputs_a, shape.inputs_b, shape.outputs_a, shape.outputs_b) != (2, 2, 2, 2) {
        return Err(BoxError::InvalidAlphabet(
            "CHSH check needs binary two-party rounds".into(),
        ));
    }
    let template = SymmetryTemplate::chsh();
    let n = alphabet.rounds();
    // Scan for a counterexample first.
    let mut seen: HashMap<Vec<usize>, (usize, usize, Rat)> = HashMap::new();
    for x in 0..alphabet.num_input_strings() {
        let xd = alphabet.decode_input(x);
        for a in 0..alphabet.num_output_strings() {
            let ad = alphabet.decode_output(a);
            let key = template.color_sequence(&ad, &xd);
            let v = b.entry_by_codes(x, a);
            match seen.get(&key) {
                None => {
                    seen.insert(key, (x, a, v.clone()));
                }
                Some((x0, a0, w)) => {
                    if w != v {
                        return Ok(ChshCheck::Asymmetric {
                            a1: alphabet.render_output(*a0),
                            x1: alphabet.render_input(*x0),
                            a2: alphabet.render_output(a),
                            x2: alphabet.render_input(x),
                        });
                    }
                }
            }
        }
    }
    // Witness weight: probe x = 0^n, a = 1^k 0^(n-k). Letter 0 satisfies the
    // round condition at input 0, letter 1 violates it, so consecutive k
    // differ by one violation; p = f(k+1) / (2 (f(k) + f(k+1))) recovers the
    // per-round weight (equal to p for i.i.d. CHSH states).
    let x0 = 0usize;
    let f = |k: usize| -> Rat {
        let mut ad = vec![0u8; n];
        for slot in ad.iter_mut().take(k) {
            *slot = 1;
        }
        let a = alphabet
            .encode_output(&ad)
            .expect("probe string fits the alphabet");
        b.entry_by_codes(x0, a).clone()
    };
    let mut weight = None;
    for k in 0..n {
        let fk = f(k);
        let fk1 = f(k + 1);
        let total = &fk + &fk1;
        if !total.is_zero() {
            weight = Some(fk1 / (total * Rat::from_integer(2.into())));
            break;
        }
    }
    // Every valid box puts positive mass on some probe pair; fall back to
    // zero for degenerate (all-zero column) inputs rather than failing.
    Ok(ChshCheck::Symmetric {
        violation_weight: weight.unwrap_or_else(Rat::zero),
    })
}

/// Exact orbit average: replaces each entry by the mean over all cells with
/// the same color sequence. Projects onto `has_symmetry`, is idempotent,
/// preserves normalization column by column, and commutes with the
/// permutation average.
pub fn s_project(b: &Box, template: &SymmetryTemplate) -> Result<Box, TemplateError> {
    template.check_shape(b.alphabet())?;
    let alphabet = b.alphabet().clone();
    let mut sums: HashMap<Vec<usize>, (Rat, u64)> = HashMap::new();
    for x in 0..alphabet.num_input_strings() {
        let xd = alphabet.decode_input(x);
        for a in 0..alphabet.num_output_strings() {
            let ad = alphabet.decode_output(a);
            let key = template.color_sequence(&ad, &xd);
            let slot = sums.entry(key).or_insert_with(|| (Rat::zero(), 0));
            slot.0 += b.entry_by_codes(x, a);
            slot.1 += 1;
        }
    }
    let means: HashMap<Vec<usize>, Rat> = sums
        .into_iter()
        .map(|(k, (sum, count))| (k, sum / Rat::from_integer(count.into())))
        .collect();
    let out = Box::from_fn(alphabet, |ad, xd| {
        means[&template.color_sequence(ad, xd)].clone()
    })
    .expect("same alphabet as the input box");
    Ok(out)
}

/// A color-preserving relabeling of an `n`-round box: first permute rounds,
/// then relabel letters roundwise. `input_map` is a bijection on input
/// letters preserving classes; `output_maps[x]` is a bijection sending the
/// output letters at input `x` to output letters at `input_map[x]` with the
/// same color. Cells move by `(a, x) -> (mu_x(a), nu(x))`, so symmetric
/// boxes are fixed and validity is preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorMapping {
    perm: RoundPermutation,
    input_map: Vec<usize>,
    output_maps: Vec<Vec<usize>>,
}

impl ColorMapping {
    pub fn new(
        template: &SymmetryTemplate,
        perm: RoundPermutation,
        input_map: Vec<usize>,
        output_maps: Vec<Vec<usize>>,
    ) -> Result<Self, TemplateError> {
        let m = template.num_inputs();
        let l = template.num_outputs();
        let bij = |map: &[usize], size: usize| -> bool {
            map.len() == size && {
                let mut seen = vec![false; size];
                map.iter().all(|&i| {
                    i < size && !std::mem::replace(&mut seen[i], true)
                })
            }
        };
        if !bij(&input_map, m) {
            return Err(TemplateError::BadLabel(format!(
                "input map {input_map:?} is not a bijection on {m} letters"
            )));
        }
        if output_maps.len() != m {
            return Err(TemplateError::BadLabel(
                "need one output map per input letter".into(),
            ));
        }
        for (x, map) in output_maps.iter().enumerate() {
            if !bij(map, l) {
                return Err(TemplateError::BadLabel(format!(
                    "output map at input {x} is not a bijection on {l} letters"
                )));
            }
            for a in 0..l {
                if template.color_of(x, a) != template.color_of(input_map[x], map[a]) {
                    return Err(TemplateError::BadLabel(format!(
                        "map sends cell ({x}, {a}) to a cell of a different color"
                    )));
                }
            }
        }
        Ok(ColorMapping {
            perm,
            input_map,
            output_maps,
        })
    }

    /// Identity letters, pure round permutation.
    pub fn permutation_only(template: &SymmetryTemplate, perm: RoundPermutation) -> Self {
        let m = template.num_inputs();
        let l = template.num_outputs();
        ColorMapping {
            perm,
            input_map: (0..m).collect(),
            output_maps: vec![(0..l).collect(); m],
        }
    }

    pub fn perm(&self) -> &RoundPermutation {
        &self.perm
    }

    pub fn input_map(&self) -> &[usize] {
        &self.input_map
    }

    pub fn output_maps(&self) -> &[Vec<usize>] {
        &self.output_maps
    }

    /// Applies the mapping: round permutation first, then the letter
    /// relabeling, scattering each cell to its image.
    pub fn apply(&self, b: &Box) -> BoxResult<Box> {
        let permuted = b.permute(&self.perm)?;
        let alphabet = permuted.alphabet().clone();
        if alphabet.inputs_per_round() != self.input_map.len()
            || alphabet.outputs_per_round() != self.output_maps[0].len()
        {
            return Err(BoxError::AlphabetMismatch);
        }
        let na = alphabet.num_output_strings();
        let nx = alphabet.num_input_strings();
        let mut entries = vec![Rat::zero(); na * nx];
        for x in 0..nx {
            let xd = alphabet.decode_input(x);
            let xid: Vec<u8> = xd.iter().map(|&d| self.input_map[d as usize] as u8).collect();
            let xi = alphabet
                .encode_input(&xid)
                .expect("bijection stays in range");
            for a in 0..na {
                let ad = alphabet.decode_output(a);
                let aid: Vec<u8> = ad
                    .iter()
                    .zip(xd.iter())
                    .map(|(&d, &xr)| self.output_maps[xr as usize][d as usize] as u8)
                    .collect();
                let ai = alphabet
                    .encode_output(&aid)
                    .expect("bijection stays in range");
                entries[xi * na + ai] = permuted.entry_by_codes(x, a).clone();
            }
        }
        Box::new(alphabet, entries)
    }
}

/// A generating set for the letter part of the color-preserving group:
/// within-column swaps of two same-color output letters, plus within-class
/// input swaps with outputs paired color by color. Together with the round
/// permutations these generate every color-preserving relabeling.
pub fn letter_symmetry_generators(template: &SymmetryTemplate, n: usize) -> Vec<ColorMapping> {
    let m = template.num_inputs();
    let l = template.num_outputs();
    let id_inputs: Vec<usize> = (0..m).collect();
    let id_outputs: Vec<Vec<usize>> = vec![(0..l).collect(); m];
    let mut out = Vec::new();

    // Swap two same-color output letters at one input.
    for x in 0..m {
        for a1 in 0..l {
            for a2 in a1 + 1..l {
                if template.color_of(x, a1) == template.color_of(x, a2) {
                    let mut maps = id_outputs.clone();
                    maps[x].swap(a1, a2);
                    out.push(
                        ColorMapping::new(
                            template,
                            RoundPermutation::identity(n),
                            id_inputs.clone(),
                            maps,
                        )
                        .expect("same-color swap preserves colors"),
                    );
                }
            }
        }
    }

    // Swap two inputs of the same class, pairing outputs color by color in
    // letter order.
    for class in template.classes() {
        for (i, &x1) in class.inputs.iter().enumerate() {
            for &x2 in class.inputs.iter().skip(i + 1) {
                let mut inputs = id_inputs.clone();
                inputs.swap(x1, x2);
                let mut maps = id_outputs.clone();
                let pairing = color_pairing(template, x1, x2);
                maps[x1] = pairing.clone();
                let mut inverse = vec![0usize; l];
                for (a, &b) in pairing.iter().enumerate() {
                    inverse[b] = a;
                }
                maps[x2] = inverse;
                out.push(
                    ColorMapping::new(template, RoundPermutation::identity(n), inputs, maps)
                        .expect("color pairing preserves colors"),
                );
            }
        }
    }
    out
}

/// Pairs the output letters of `x1` with those of `x2` color by color, in
/// ascending letter order within each color.
fn color_pairing(template: &SymmetryTemplate, x1: usize, x2: usize) -> Vec<usize> {
    let l = template.num_outputs();
    let mut pairing = vec![0usize; l];
    for color in 0..template.num_colors() {
        let at = |x: usize| -> Vec<usize> {
            (0..l).filter(|&a| template.color_of(x, a) == color).collect()
        };
        for (a1, a2) in at(x1).into_iter().zip(at(x2)) {
            pairing[a1] = a2;
        }
    }
    pairing
}

/// Wire form: label grid with `p1..pd` / `unfree` strings plus redundant
/// shape fields that are validated on read.
#[derive(Serialize, Deserialize)]
struct TemplateWire {
    m: usize,
    l: usize,
    d: usize,
    vectors: Vec<Vec<String>>,
}

impl Serialize for SymmetryTemplate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let vectors = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|lab| match lab {
                        TemplateLabel::Unfree => "unfree".to_string(),
                        TemplateLabel::Param(j) => format!("p{}", j + 1),
                    })
                    .collect()
            })
            .collect();
        TemplateWire {
            m: self.num_inputs(),
            l: self.num_outputs(),
            d: self.degrees_of_freedom(),
            vectors,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymmetryTemplate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = TemplateWire::deserialize(deserializer)?;
        let rows: Vec<Vec<TemplateLabel>> = wire
            .vectors
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| parse_label(s).map_err(|e| D::Error::custom(e.to_string())))
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        let t = SymmetryTemplate::new(rows).map_err(|e| D::Error::custom(e.to_string()))?;
        if t.num_inputs() != wire.m || t.num_outputs() != wire.l {
            return Err(D::Error::custom(format!(
                "declared shape ({}, {}) does not match the label grid ({}, {})",
                wire.m,
                wire.l,
                t.num_inputs(),
                t.num_outputs()
            )));
        }
        if t.degrees_of_freedom() != wire.d {
            return Err(D::Error::custom(
                TemplateError::DegreesOfFreedom {
                    declared: wire.d,
                    derived: t.degrees_of_freedom(),
                }
                .to_string(),
            ));
        }
        Ok(t)
    }
}

fn parse_label(s: &str) -> Result<TemplateLabel, TemplateError> {
    if s == "unfree" {
        return Ok(TemplateLabel::Unfree);
    }
    if let Some(num) = s.strip_prefix('p') {
        if let Ok(k) = num.parse::<usize>() {
            if k >= 1 {
                return Ok(TemplateLabel::Param(k - 1));
            }
        }
    }
    Err(TemplateError::BadLabel(s.to_string()))
}
