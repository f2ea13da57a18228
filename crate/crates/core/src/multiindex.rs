//! Multi-index classes indexing the source terms of the linearized
//! hierarchies and the partition sum of the derivative formula.
//!
//! A [`TauIndex`] describes one source contribution
//! `-div[m^(β̂)(μ_{α̂..}) · δ^n̂ b/δm^n̂(m)(m^(β_1)(μ_{α_1..}), …)]` of the
//! order-k forward equation (and the matching backward source). A
//! [`DeltaIndex`] describes one term of the order-k derivative formula; its
//! alpha rows form a set partition of `{1, …, k}`.
//!
//! Both classes render as nested integer tuples, e.g. `(2,(1,1),(1,2),0)`:
//! order, the block sizes, the flattened block contents, then (for tau) the
//! hatted size and hatted block. Degenerate forms drop the empty parts.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Named validity conditions, reported by the validators in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Tuple shape does not match the declared sizes.
    Shape,
    /// Order, sizes or entries out of range, or a row not strictly increasing.
    Range,
    /// The ambient order `k` must appear exactly once among all entries.
    UniqueMax,
    /// Block sizes do not add up to `k`.
    Sum,
    /// Two blocks share an entry.
    Disjoint,
    /// A block of size zero.
    EmptyRow,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Condition::Shape => "shape",
            Condition::Range => "range",
            Condition::UniqueMax => "uniqueness-of-k",
            Condition::Sum => "sum",
            Condition::Disjoint => "disjointness",
            Condition::EmptyRow => "empty-row",
        };
        f.write_str(name)
    }
}

fn violated(condition: Condition, detail: impl Into<String>) -> Error {
    Error::InvalidIndex {
        condition,
        detail: detail.into(),
    }
}

/// Raw tuple `(n̂, (β_j), (α_{i,j}) flattened, β̂, (α̂_ℓ))` before validation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawTau {
    pub n_hat: usize,
    pub betas: Vec<usize>,
    pub alphas_flat: Vec<usize>,
    pub beta_hat: usize,
    pub alpha_hats: Vec<usize>,
}

/// Validated element of the class τ_k.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TauIndex {
    k: usize,
    alphas: Vec<Vec<usize>>,
    alpha_hats: Vec<usize>,
}

/// Validated element of the class Δ_k.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeltaIndex {
    k: usize,
    alphas: Vec<Vec<usize>>,
}

fn split_rows(betas: &[usize], flat: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: usize = betas.iter().sum();
    if total != flat.len() {
        return Err(violated(
            Condition::Shape,
            format!("block sizes add to {total} but {} entries given", flat.len()),
        ));
    }
    let mut rows = Vec::with_capacity(betas.len());
    let mut start = 0;
    for &b in betas {
        rows.push(flat[start..start + b].to_vec());
        start += b;
    }
    Ok(rows)
}

fn check_row(row: &[usize], k: usize, what: &str) -> Result<()> {
    if row.iter().any(|&a| a < 1 || a > k) {
        return Err(violated(
            Condition::Range,
            format!("{what} entries {row:?} outside [1, {k}]"),
        ));
    }
    if row.windows(2).any(|w| w[0] >= w[1]) {
        return Err(violated(
            Condition::Range,
            format!("{what} {row:?} not strictly increasing"),
        ));
    }
    Ok(())
}

fn check_disjoint<'a>(blocks: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for block in blocks {
        for &a in block {
            if !seen.insert(a) {
                return Err(violated(
                    Condition::Disjoint,
                    format!("entry {a} appears in more than one block"),
                ));
            }
        }
    }
    Ok(())
}

impl TauIndex {
    /// Validates a candidate against conditions (i)–(v) of the class τ_k.
    pub fn new(k: usize, alphas: Vec<Vec<usize>>, alpha_hats: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(violated(Condition::Range, "order k must be positive"));
        }
        if alphas.len() > k {
            return Err(violated(
                Condition::Range,
                format!("order {} exceeds k = {k}", alphas.len()),
            ));
        }
        for row in &alphas {
            if row.is_empty() {
                return Err(violated(Condition::EmptyRow, "alpha row of size zero"));
            }
            if row.len() >= k {
                return Err(violated(
                    Condition::Range,
                    format!("block size {} not below k = {k}", row.len()),
                ));
            }
            check_row(row, k, "alpha row")?;
        }
        if alpha_hats.len() >= k {
            return Err(violated(
                Condition::Range,
                format!("hatted size {} not below k = {k}", alpha_hats.len()),
            ));
        }
        check_row(&alpha_hats, k, "hatted block")?;
        let hits = alphas
            .iter()
            .flatten()
            .chain(alpha_hats.iter())
            .filter(|&&a| a == k)
            .count();
        if hits != 1 {
            return Err(violated(
                Condition::UniqueMax,
                format!("{hits} entries equal k = {k}, expected exactly one"),
            ));
        }
        let total: usize = alphas.iter().map(Vec::len).sum::<usize>() + alpha_hats.len();
        if total != k {
            return Err(violated(
                Condition::Sum,
                format!("block sizes add to {total}, expected {k}"),
            ));
        }
        check_disjoint(
            alphas
                .iter()
                .map(Vec::as_slice)
                .chain(std::iter::once(alpha_hats.as_slice())),
        )?;
        Ok(Self {
            k,
            alphas,
            alpha_hats,
        })
    }

    pub fn from_raw(raw: &RawTau, k: usize) -> Result<Self> {
        if raw.betas.len() != raw.n_hat {
            return Err(violated(
                Condition::Shape,
                format!("n̂ = {} but {} block sizes", raw.n_hat, raw.betas.len()),
            ));
        }
        if raw.alpha_hats.len() != raw.beta_hat {
            return Err(violated(
                Condition::Shape,
                format!(
                    "β̂ = {} but {} hatted entries",
                    raw.beta_hat,
                    raw.alpha_hats.len()
                ),
            ));
        }
        if raw.betas.contains(&0) {
            return Err(violated(Condition::EmptyRow, "block size zero"));
        }
        let rows = split_rows(&raw.betas, &raw.alphas_flat)?;
        Self::new(k, rows, raw.alpha_hats.clone())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The order `o(λ) = n̂`.
    pub fn order(&self) -> usize {
        self.alphas.len()
    }

    pub fn betas(&self) -> Vec<usize> {
        self.alphas.iter().map(Vec::len).collect()
    }

    pub fn alphas(&self) -> &[Vec<usize>] {
        &self.alphas
    }

    pub fn beta_hat(&self) -> usize {
        self.alpha_hats.len()
    }

    pub fn alpha_hats(&self) -> &[usize] {
        &self.alpha_hats
    }

    pub fn to_raw(&self) -> RawTau {
        RawTau {
            n_hat: self.order(),
            betas: self.betas(),
            alphas_flat: self.alphas.iter().flatten().copied().collect(),
            beta_hat: self.beta_hat(),
            alpha_hats: self.alpha_hats.clone(),
        }
    }

    /// Parses the tuple notation, e.g. `(1,(1),(2),1,(1))` or `(0,1,(2))`.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let tuple = Tuple::parse(text)?;
        let items = tuple.as_list()?;
        let n_hat = items.first().ok_or_else(|| shape("empty tuple"))?.as_int()?;
        let raw = if n_hat == 0 {
            if items.len() != 3 {
                return Err(shape("degenerate form (0,β̂,(α̂)) expects 3 items"));
            }
            RawTau {
                n_hat: 0,
                betas: vec![],
                alphas_flat: vec![],
                beta_hat: items[1].as_int()?,
                alpha_hats: items[2].as_ints()?,
            }
        } else {
            let beta_hat = items.get(3).ok_or_else(|| shape("missing β̂"))?.as_int()?;
            let expected = if beta_hat == 0 { 4 } else { 5 };
            if items.len() != expected {
                return Err(shape(format!("expected {expected} items")));
            }
            RawTau {
                n_hat,
                betas: items[1].as_ints()?,
                alphas_flat: items[2].as_ints()?,
                beta_hat,
                alpha_hats: if beta_hat == 0 {
                    vec![]
                } else {
                    items[4].as_ints()?
                },
            }
        };
        Self::from_raw(&raw, k)
    }
}

impl fmt::Display for TauIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let raw = self.to_raw();
        if raw.n_hat == 0 {
            return write!(f, "(0,{},{})", raw.beta_hat, tuple_str(&raw.alpha_hats));
        }
        write!(
            f,
            "({},{},{},{}",
            raw.n_hat,
            tuple_str(&raw.betas),
            tuple_str(&raw.alphas_flat),
            raw.beta_hat
        )?;
        if raw.beta_hat > 0 {
            write!(f, ",{}", tuple_str(&raw.alpha_hats))?;
        }
        f.write_str(")")
    }
}

impl DeltaIndex {
    pub fn new(k: usize, alphas: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(violated(Condition::Range, "order k must be positive"));
        }
        if alphas.is_empty() || alphas.len() > k {
            return Err(violated(
                Condition::Range,
                format!("order {} outside [1, {k}]", alphas.len()),
            ));
        }
        for row in &alphas {
            if row.is_empty() {
                return Err(violated(Condition::EmptyRow, "alpha row of size zero"));
            }
            check_row(row, k, "alpha row")?;
        }
        let total: usize = alphas.iter().map(Vec::len).sum();
        if total != k {
            return Err(violated(
                Condition::Sum,
                format!("block sizes add to {total}, expected {k}"),
            ));
        }
        check_disjoint(alphas.iter().map(Vec::as_slice))?;
        Ok(Self { k, alphas })
    }

    pub fn from_parts(k: usize, betas: &[usize], alphas_flat: &[usize]) -> Result<Self> {
        if betas.contains(&0) {
            return Err(violated(Condition::EmptyRow, "block size zero"));
        }
        Self::new(k, split_rows(betas, alphas_flat)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> usize {
        self.alphas.len()
    }

    pub fn betas(&self) -> Vec<usize> {
        self.alphas.iter().map(Vec::len).collect()
    }

    pub fn alphas(&self) -> &[Vec<usize>] {
        &self.alphas
    }

    /// Blocks as an unordered set partition of `{1, …, k}`.
    pub fn as_partition(&self) -> BTreeSet<BTreeSet<usize>> {
        self.alphas
            .iter()
            .map(|row| row.iter().copied().collect())
            .collect()
    }

    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let tuple = Tuple::parse(text)?;
        let items = tuple.as_list()?;
        if items.len() != 3 {
            return Err(shape("expected (n̂,(β),(α))"));
        }
        let n_hat = items[0].as_int()?;
        let betas = items[1].as_ints()?;
        if betas.len() != n_hat {
            return Err(shape(format!("n̂ = {n_hat} but {} block sizes", betas.len())));
        }
        Self::from_parts(k, &betas, &items[2].as_ints()?)
    }
}

impl fmt::Display for DeltaIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<usize> = self.alphas.iter().flatten().copied().collect();
        write!(
            f,
            "({},{},{})",
            self.order(),
            tuple_str(&self.betas()),
            tuple_str(&flat)
        )
    }
}

fn tuple_str(values: &[usize]) -> String {
    let inner: Vec<String> = values.iter().map(usize::to_string).collect();
    format!("({})", inner.join(","))
}

fn shape(detail: impl Into<String>) -> Error {
    violated(Condition::Shape, detail)
}

/// Nested integer tuple as it appears in the text rendering.
#[derive(Debug, Clone, PartialEq)]
enum Tuple {
    Int(usize),
    List(Vec<Tuple>),
}

impl Tuple {
    fn parse(text: &str) -> Result<Tuple> {
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let t = Self::parse_at(&chars, &mut pos)?;
        if pos != chars.len() {
            return Err(shape(format!("trailing input in {text:?}")));
        }
        Ok(t)
    }

    fn parse_at(chars: &[char], pos: &mut usize) -> Result<Tuple> {
        match chars.get(*pos) {
            Some('(') => {
                *pos += 1;
                let mut items = Vec::new();
                if chars.get(*pos) == Some(&')') {
                    *pos += 1;
                    return Ok(Tuple::List(items));
                }
                loop {
                    items.push(Self::parse_at(chars, pos)?);
                    match chars.get(*pos) {
                        Some(',') => *pos += 1,
                        Some(')') => {
                            *pos += 1;
                            return Ok(Tuple::List(items));
                        }
                        _ => return Err(shape("expected ',' or ')'")),
                    }
                }
            }
            Some(c) if c.is_ascii_digit() => {
                let start = *pos;
                while chars.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
                    *pos += 1;
                }
                let s: String = chars[start..*pos].iter().collect();
                s.parse()
                    .map(Tuple::Int)
                    .map_err(|_| shape(format!("bad integer {s}")))
            }
            _ => Err(shape("unexpected character")),
        }
    }

    fn as_list(&self) -> Result<&[Tuple]> {
        match self {
            Tuple::List(items) => Ok(items),
            Tuple::Int(_) => Err(shape("expected a tuple")),
        }
    }

    fn as_int(&self) -> Result<usize> {
        match self {
            Tuple::Int(v) => Ok(*v),
            Tuple::List(_) => Err(shape("expected an integer")),
        }
    }

    /// A tuple of integers; a bare integer is accepted as a 1-tuple.
    fn as_ints(&self) -> Result<Vec<usize>> {
        match self {
            Tuple::Int(v) => Ok(vec![*v]),
            Tuple::List(items) => items.iter().map(Tuple::as_int).collect(),
        }
    }
}

/// The recurrence map T_k: one τ_k element to `o(λ) + 2` elements of τ_{k+1}.
pub fn apply_t(k: usize, lam: &TauIndex) -> Result<Vec<TauIndex>> {
    if lam.k != k {
        return Err(violated(
            Condition::Range,
            format!("index of order {} passed to T_{k}", lam.k),
        ));
    }
    let next = k + 1;
    let mut out = Vec::with_capacity(lam.order() + 2);

    let mut fresh = lam.alphas.clone();
    fresh.push(vec![next]);
    out.push(TauIndex::new(next, fresh, lam.alpha_hats.clone())?);

    for p in 0..lam.order() {
        let mut rows = lam.alphas.clone();
        rows[p].push(next);
        out.push(TauIndex::new(next, rows, lam.alpha_hats.clone())?);
    }

    let mut hats = lam.alpha_hats.clone();
    hats.push(next);
    out.push(TauIndex::new(next, lam.alphas.clone(), hats)?);
    Ok(out)
}

/// The vector λ_k. Empty for `k = 1`, whose source term vanishes.
pub fn lambda_seq(k: usize) -> Result<Vec<TauIndex>> {
    match k {
        0 => Err(violated(Condition::Range, "λ_k needs k ≥ 1")),
        1 => Ok(Vec::new()),
        2 => Ok(vec![
            TauIndex::new(2, vec![vec![2]], vec![1])?,
            TauIndex::new(2, vec![vec![1], vec![2]], vec![])?,
            TauIndex::new(2, vec![vec![1]], vec![2])?,
        ]),
        _ => {
            let prev_k = k - 1;
            let prev = lambda_seq(prev_k)?;
            let all: Vec<usize> = (1..=prev_k).collect();
            let mut out = vec![
                TauIndex::new(k, vec![vec![k]], all.clone())?,
                TauIndex::new(k, vec![all.clone(), vec![k]], vec![])?,
                TauIndex::new(k, vec![all], vec![k])?,
            ];
            for lam in &prev {
                out.extend(apply_t(prev_k, lam)?);
            }
            Ok(out)
        }
    }
}

/// The recurrence map Q_k: one Δ_k element to `o(Λ) + 1` elements of Δ_{k+1}.
pub fn apply_q(k: usize, big_lam: &DeltaIndex) -> Result<Vec<DeltaIndex>> {
    if big_lam.k != k {
        return Err(violated(
            Condition::Range,
            format!("index of order {} passed to Q_{k}", big_lam.k),
        ));
    }
    let next = k + 1;
    let mut out = Vec::with_capacity(big_lam.order() + 1);
    let mut fresh = big_lam.alphas.clone();
    fresh.push(vec![next]);
    out.push(DeltaIndex::new(next, fresh)?);
    for p in 0..big_lam.order() {
        let mut rows = big_lam.alphas.clone();
        rows[p].push(next);
        out.push(DeltaIndex::new(next, rows)?);
    }
    Ok(out)
}

/// The vector Λ_k indexing the terms of the order-k derivative formula.
pub fn capital_lambda_seq(k: usize) -> Result<Vec<DeltaIndex>> {
    if k == 0 {
        return Err(violated(Condition::Range, "Λ_k needs k ≥ 1"));
    }
    let mut current = vec![DeltaIndex::new(1, vec![vec![1]])?];
    for order in 1..k {
        let mut next = Vec::new();
        for big_lam in &current {
            next.extend(apply_q(order, big_lam)?);
        }
        current = next;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(n_hat: usize, betas: &[usize], alphas: &[usize], beta_hat: usize, hats: &[usize]) -> RawTau {
        RawTau {
            n_hat,
            betas: betas.to_vec(),
            alphas_flat: alphas.to_vec(),
            beta_hat,
            alpha_hats: hats.to_vec(),
        }
    }

    fn condition_of(err: Error) -> Condition {
        match err {
            Error::InvalidIndex { condition, .. } => condition,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn validates_lambda_two_entries() {
        assert!(TauIndex::from_raw(&raw(1, &[1], &[2], 1, &[1]), 2).is_ok());
        let degenerate = TauIndex::from_raw(&raw(2, &[1, 1], &[1, 2], 0, &[]), 2).unwrap();
        assert_eq!(degenerate.beta_hat(), 0);
        assert_eq!(degenerate.to_string(), "(2,(1,1),(1,2),0)");
    }

    #[test]
    fn duplicated_entry_reports_uniqueness_first() {
        let err = TauIndex::from_raw(&raw(1, &[1], &[1], 1, &[1]), 2).unwrap_err();
        assert_eq!(condition_of(err), Condition::UniqueMax);
    }

    #[test]
    fn disjointness_violation_is_named() {
        // k = 3 appears once, sizes add to 3, but 1 is shared.
        let err = TauIndex::new(3, vec![vec![1, 3]], vec![1]).unwrap_err();
        assert_eq!(condition_of(err), Condition::Disjoint);
    }

    #[test]
    fn sum_violation_is_named() {
        let err = TauIndex::new(3, vec![vec![3]], vec![1]).unwrap_err();
        assert_eq!(condition_of(err), Condition::Sum);
    }

    #[test]
    fn block_of_size_k_is_out_of_range() {
        let err = TauIndex::new(2, vec![vec![1, 2]], vec![]).unwrap_err();
        assert_eq!(condition_of(err), Condition::Range);
    }

    #[test]
    fn t2_on_first_entry() {
        let lam = TauIndex::parse("(1,(1),(2),1,(1))", 2).unwrap();
        let image: Vec<String> = apply_t(2, &lam).unwrap().iter().map(|l| l.to_string()).collect();
        assert_eq!(
            image,
            vec!["(2,(1,1),(2,3),1,(1))", "(1,(2),(2,3),1,(1))", "(1,(1),(2),2,(1,3))"]
        );
    }

    #[test]
    fn lambda_one_is_empty() {
        assert!(lambda_seq(1).unwrap().is_empty());
        assert!(lambda_seq(0).is_err());
    }

    #[test]
    fn q1_on_singleton() {
        let big = DeltaIndex::parse("(1,(1),(1))", 1).unwrap();
        let image: Vec<String> = apply_q(1, &big).unwrap().iter().map(|l| l.to_string()).collect();
        assert_eq!(image, vec!["(2,(1,1),(1,2))", "(1,(2),(1,2))"]);
    }

    #[test]
    fn delta_rejects_incomplete_cover() {
        let err = DeltaIndex::new(3, vec![vec![1, 2]]).unwrap_err();
        assert_eq!(condition_of(err), Condition::Sum);
    }

    #[test]
    fn degenerate_tau_renders_and_parses() {
        let lam = TauIndex::new(2, vec![], vec![1]);
        // no entry equals k
        assert!(lam.is_err());
        let lam = TauIndex::new(3, vec![], vec![1, 3]);
        assert!(lam.is_err(), "sum condition must fail");
        let text = "(0,2,(1,3))";
        let err = TauIndex::parse(text, 3).unwrap_err();
        assert_eq!(condition_of(err), Condition::Sum);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(TauIndex::parse("(1,(1),(2),1", 2).is_err());
        assert!(DeltaIndex::parse("(1,(1),(x))", 1).is_err());
        assert!(DeltaIndex::parse("(2,(1),(1))", 1).is_err());
    }
}
