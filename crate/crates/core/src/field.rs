//! Arithmetic over GF(2^m) and Gaussian elimination over field matrices.
//!
//! Elements are stored as plain integers whose bits are polynomial
//! coefficients. Fields of degree 8 or less use log/antilog tables; larger
//! fields fall back to carry-less shift-and-reduce multiplication.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported extension degree.
pub const MAX_DEGREE: u32 = 16;

/// Largest degree for which log/antilog tables are built.
const TABLE_DEGREE_LIMIT: u32 = 8;

/// A symbol of the network alphabet. Only meaningful together with the
/// [`Field`] it was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldElement(pub u16);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    #[inline]
    pub fn value(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("extension degree {0} outside 1..={MAX_DEGREE}")]
    UnsupportedDegree(u32),
    #[error("polynomial {poly:#x} does not have degree {m}")]
    WrongDegree { m: u32, poly: u32 },
    #[error("polynomial {0:#x} is reducible over GF(2)")]
    Reducible(u32),
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("element {value:#x} is outside GF(2^{m})")]
    OutOfRange { m: u32, value: u32 },
    #[error("matrix dimensions do not agree: {0}")]
    Dimension(String),
}

/// Degree and reduction polynomial of a binary extension field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub m: u32,
    pub reduction_polynomial: u32,
}

impl FieldSpec {
    /// The AES field GF(2^8) with x^8 + x^4 + x^3 + x + 1.
    pub const GF256: FieldSpec = FieldSpec { m: 8, reduction_polynomial: 0x11B };
    pub const GF2: FieldSpec = FieldSpec { m: 1, reduction_polynomial: 0b11 };

    /// A commonly used irreducible polynomial for each degree. Degree 8 uses
    /// the AES modulus.
    pub fn standard(m: u32) -> Result<FieldSpec, FieldError> {
        let poly = match m {
            1 => 0b11,
            2 => 0b111,
            3 => 0b1011,
            4 => 0b1_0011,
            5 => 0b10_0101,
            6 => 0b100_0011,
            7 => 0b1000_0011,
            8 => 0x11B,
            9 => 0x211,
            10 => 0x409,
            11 => 0x805,
            12 => 0x1053,
            13 => 0x201B,
            14 => 0x4443,
            15 => 0x8003,
            16 => 0x1100B,
            _ => return Err(FieldError::UnsupportedDegree(m)),
        };
        Ok(FieldSpec { m, reduction_polynomial: poly })
    }
}

/// Returns true if `poly` (bit i = coefficient of x^i) has no factor of
/// degree 1..=deg/2 over GF(2).
pub fn is_irreducible(poly: u32) -> bool {
    if poly < 2 {
        return false;
    }
    let deg = 31 - poly.leading_zeros();
    if deg == 0 {
        return false;
    }
    for d in 1..=deg / 2 {
        for low in 0..(1u32 << d) {
            let divisor = (1u32 << d) | low;
            if poly_mod(poly, divisor) == 0 {
                return false;
            }
        }
    }
    true
}

fn poly_mod(mut a: u32, b: u32) -> u32 {
    let db = 31 - b.leading_zeros();
    while a != 0 && 31 - a.leading_zeros() >= db {
        let shift = (31 - a.leading_zeros()) - db;
        a ^= b << shift;
    }
    a
}

/// Carry-less multiply followed by reduction; independent of the tables.
fn clmul_reduce(a: u32, b: u32, m: u32, poly: u32) -> u32 {
    let mut acc: u32 = 0;
    let mut a = a;
    let mut b = b;
    let top = 1u32 << m;
    while b != 0 {
        if b & 1 != 0 {
            acc ^= a;
        }
        b >>= 1;
        a <<= 1;
        if a & top != 0 {
            a ^= poly;
        }
    }
    acc
}

#[derive(Debug)]
struct Tables {
    log: Vec<u16>,
    exp: Vec<u16>,
}

/// A constructed finite field: validated spec plus lookup tables.
///
/// Cloning is cheap; tables are shared.
#[derive(Debug, Clone)]
pub struct Field {
    spec: FieldSpec,
    tables: Option<Arc<Tables>>,
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl Eq for Field {}

impl Field {
    pub fn new(spec: FieldSpec) -> Result<Field, FieldError> {
        let FieldSpec { m, reduction_polynomial: poly } = spec;
        if m == 0 || m > MAX_DEGREE {
            return Err(FieldError::UnsupportedDegree(m));
        }
        if poly >> m != 1 {
            return Err(FieldError::WrongDegree { m, poly });
        }
        if !is_irreducible(poly) {
            return Err(FieldError::Reducible(poly));
        }
        let tables = (m <= TABLE_DEGREE_LIMIT).then(|| Arc::new(build_tables(m, poly)));
        Ok(Field { spec, tables })
    }

    /// Shorthand for [`FieldSpec::standard`] followed by [`Field::new`].
    pub fn with_degree(m: u32) -> Result<Field, FieldError> {
        Field::new(FieldSpec::standard(m)?)
    }

    pub fn gf2() -> Field {
        Field::new(FieldSpec::GF2).expect("x + 1 is irreducible")
    }

    pub fn gf256() -> Field {
        Field::new(FieldSpec::GF256).expect("AES polynomial is irreducible")
    }

    pub fn spec(&self) -> FieldSpec {
        self.spec
    }

    pub fn degree(&self) -> u32 {
        self.spec.m
    }

    /// Number of elements, 2^m.
    pub fn order(&self) -> u32 {
        1u32 << self.spec.m
    }

    /// Checked conversion from an integer.
    pub fn element(&self, value: u32) -> Result<FieldElement, FieldError> {
        if value >= self.order() {
            return Err(FieldError::OutOfRange { m: self.spec.m, value });
        }
        Ok(FieldElement(value as u16))
    }

    #[inline]
    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        FieldElement(a.0 ^ b.0)
    }

    /// Subtraction coincides with addition in characteristic 2.
    #[inline]
    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        self.add(a, b)
    }

    #[inline]
    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        if a.0 == 0 || b.0 == 0 {
            return FieldElement::ZERO;
        }
        match &self.tables {
            Some(t) => {
                let n = (self.order() - 1) as usize;
                let idx = t.log[a.0 as usize] as usize + t.log[b.0 as usize] as usize;
                FieldElement(t.exp[if idx >= n { idx - n } else { idx }])
            }
            None => FieldElement(clmul_reduce(
                a.0 as u32,
                b.0 as u32,
                self.spec.m,
                self.spec.reduction_polynomial,
            ) as u16),
        }
    }

    pub fn inv(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        if a.is_zero() {
            return Err(FieldError::ZeroInverse);
        }
        match &self.tables {
            Some(t) => {
                let n = (self.order() - 1) as usize;
                let l = t.log[a.0 as usize] as usize;
                Ok(FieldElement(t.exp[(n - l) % n]))
            }
            // a^(2^m - 2) by square-and-multiply
            None => Ok(self.pow(a, self.order() - 2)),
        }
    }

    pub fn pow(&self, a: FieldElement, mut e: u32) -> FieldElement {
        let mut base = a;
        let mut acc = FieldElement::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    pub fn div(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        Ok(self.mul(a, self.inv(b)?))
    }

    /// Uniform draw over all 2^m elements, zero included.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement(rng.random_range(0..self.order()) as u16)
    }

    /// `acc += coeff * src`, element-wise.
    pub fn axpy(&self, acc: &mut [FieldElement], coeff: FieldElement, src: &[FieldElement]) {
        debug_assert_eq!(acc.len(), src.len());
        if coeff.is_zero() {
            return;
        }
        for (a, &s) in acc.iter_mut().zip(src) {
            *a = self.add(*a, self.mul(coeff, s));
        }
    }

    pub fn scale(&self, v: &mut [FieldElement], coeff: FieldElement) {
        for x in v.iter_mut() {
            *x = self.mul(*x, coeff);
        }
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&self, a: &[FieldElement], b: &[FieldElement]) -> FieldElement {
        a.iter()
            .zip(b)
            .fold(FieldElement::ZERO, |acc, (&x, &y)| self.add(acc, self.mul(x, y)))
    }
}

fn build_tables(m: u32, poly: u32) -> Tables {
    let order = 1usize << m;
    let n = order - 1;
    // Find a generator of the multiplicative group; x is not primitive for
    // every irreducible polynomial (e.g. 0x11B), so search.
    let generator = (2..order as u32)
        .chain(std::iter::once(1))
        .find(|&g| multiplicative_order(g, m, poly) == n)
        .expect("the multiplicative group of a finite field is cyclic");
    let mut exp = vec![0u16; n.max(1)];
    let mut log = vec![0u16; order];
    let mut x = 1u32;
    for (i, slot) in exp.iter_mut().enumerate() {
        *slot = x as u16;
        log[x as usize] = i as u16;
        x = clmul_reduce(x, generator, m, poly);
    }
    Tables { log, exp }
}

fn multiplicative_order(g: u32, m: u32, poly: u32) -> usize {
    let mut x = g;
    let mut k = 1;
    while x != 1 {
        x = clmul_reduce(x, g, m, poly);
        k += 1;
        if k > (1usize << m) {
            return 0;
        }
    }
    k
}

/// Row-major matrix over a binary extension field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<FieldElement>,
}

impl FieldMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FieldMatrix { rows, cols, entries: vec![FieldElement::ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, FieldElement::ONE);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<FieldElement>]) -> Result<Self, FieldError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FieldError::Dimension("ragged rows".into()));
        }
        Ok(FieldMatrix { rows: rows.len(), cols, entries: rows.concat() })
    }

    /// Convenience for tests and bindings: raw integer rows.
    pub fn from_u16_rows(rows: &[Vec<u16>]) -> Result<Self, FieldError> {
        let rows: Vec<Vec<FieldElement>> =
            rows.iter().map(|r| r.iter().map(|&v| FieldElement(v)).collect()).collect();
        Self::from_rows(&rows)
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<FieldElement>) -> Result<Self, FieldError> {
        if entries.len() != rows * cols {
            return Err(FieldError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        Ok(FieldMatrix { rows, cols, entries })
    }

    pub fn random<R: Rng + ?Sized>(field: &Field, rows: usize, cols: usize, rng: &mut R) -> Self {
        let entries = (0..rows * cols).map(|_| field.random(rng)).collect();
        FieldMatrix { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[FieldElement] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> FieldElement {
        self.entries[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: FieldElement) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[FieldElement] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<FieldElement>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn mul(&self, field: &Field, rhs: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        if self.cols != rhs.rows {
            return Err(FieldError::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = FieldMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let acc = &mut out.entries[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                field.axpy(acc, self.get(i, k), rhs.row(k));
            }
        }
        Ok(out)
    }

    /// Rank by forward elimination on a copy.
    pub fn rank(&self, field: &Field) -> usize {
        let mut a = self.clone();
        let mut empty = FieldMatrix::zeros(self.rows, 0);
        eliminate(field, &mut a, &mut empty).len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolveError {
    #[error("coefficient matrix has rank {rank} < {needed}; collect more coded packets")]
    RankDeficient { rank: usize, needed: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Unique solution of `A·X = B` when `A` has full column rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub rank: usize,
    pub x: FieldMatrix,
}

/// Gauss-Jordan elimination of `a` with the same row operations applied to
/// `b`. The pivot for each column is the first nonzero entry at or below the
/// current row. Returns the pivot columns in order.
fn eliminate(field: &Field, a: &mut FieldMatrix, b: &mut FieldMatrix) -> Vec<usize> {
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..a.cols {
        if row == a.rows {
            break;
        }
        let Some(p) = (row..a.rows).find(|&r| !a.get(r, col).is_zero()) else {
            continue;
        };
        swap_rows(a, p, row);
        swap_rows(b, p, row);
        let inv = field.inv(a.get(row, col)).expect("pivot is nonzero");
        scale_row(field, a, row, inv);
        scale_row(field, b, row, inv);
        for r in 0..a.rows {
            if r == row {
                continue;
            }
            let factor = a.get(r, col);
            if factor.is_zero() {
                continue;
            }
            add_scaled_row(field, a, r, row, factor);
            add_scaled_row(field, b, r, row, factor);
        }
        pivots.push(col);
        row += 1;
    }
    pivots
}

fn swap_rows(m: &mut FieldMatrix, i: usize, j: usize) {
    if i == j || m.cols == 0 {
        return;
    }
    for c in 0..m.cols {
        m.entries.swap(i * m.cols + c, j * m.cols + c);
    }
}

fn scale_row(field: &Field, m: &mut FieldMatrix, r: usize, k: FieldElement) {
    let cols = m.cols;
    field.scale(&mut m.entries[r * cols..(r + 1) * cols], k);
}

/// row[dst] += k * row[src]
fn add_scaled_row(field: &Field, m: &mut FieldMatrix, dst: usize, src: usize, k: FieldElement) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    let (lo, hi) = if dst < src { (dst, src) } else { (src, dst) };
    let (head, tail) = m.entries.split_at_mut(hi * cols);
    let lo_row = &mut head[lo * cols..(lo + 1) * cols];
    let hi_row = &mut tail[..cols];
    if dst < src {
        field.axpy(lo_row, k, hi_row);
    } else {
        field.axpy(hi_row, k, lo_row);
    }
}

/// Solves `A·X = B` for `X` (A is N'×N, B is N'×L).
///
/// Rows beyond a basis are ignored; when `rank(A) = N` the first N rows of the
/// reduced system are the solution.
pub fn gaussian_solve(field: &Field, a: &FieldMatrix, b: &FieldMatrix) -> Result<Solution, SolveError> {
    if a.rows != b.rows {
        return Err(FieldError::Dimension(format!(
            "A has {} rows but B has {}",
            a.rows, b.rows
        ))
        .into());
    }
    let mut a = a.clone();
    let mut b = b.clone();
    let pivots = eliminate(field, &mut a, &mut b);
    let rank = pivots.len();
    if rank < a.cols {
        return Err(SolveError::RankDeficient { rank, needed: a.cols });
    }
    // Full column rank: pivots are 0..N in order and A's top block is I.
    let n = a.cols;
    let x = FieldMatrix::from_entries(n, b.cols, b.entries[..n * b.cols].to_vec())?;
    Ok(Solution { rank, x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fe(v: u16) -> FieldElement {
        FieldElement(v)
    }

    // Oracle: school-book carry-less product then long-division reduction,
    // written without sharing code with the field implementation.
    fn oracle_mul(a: u32, b: u32, poly: u32) -> u32 {
        let mut prod = 0u64;
        for i in 0..32 {
            if (b >> i) & 1 == 1 {
                prod ^= (a as u64) << i;
            }
        }
        let deg = 63 - (poly as u64).leading_zeros() as u64;
        for bit in (deg..64).rev() {
            if (prod >> bit) & 1 == 1 {
                prod ^= (poly as u64) << (bit - deg);
            }
        }
        prod as u32
    }

    // Oracle: extended Euclid over GF(2)[x].
    fn oracle_inv(a: u32, poly: u32) -> u32 {
        let deg = |p: u32| 31 - p.leading_zeros() as i32;
        let (mut r0, mut r1) = (poly, a);
        let (mut s0, mut s1) = (0u32, 1u32);
        while r1 != 1 {
            let mut q = 0u32;
            let mut r = r0;
            while r != 0 && deg(r) >= deg(r1) {
                let sh = deg(r) - deg(r1);
                q ^= 1 << sh;
                r ^= r1 << sh;
            }
            let s = s0 ^ oracle_mul_nored(q, s1);
            r0 = r1;
            r1 = r;
            s0 = s1;
            s1 = s;
        }
        oracle_mul(s1, 1, poly)
    }

    fn oracle_mul_nored(a: u32, b: u32) -> u32 {
        let mut p = 0;
        for i in 0..16 {
            if (b >> i) & 1 == 1 {
                p ^= a << i;
            }
        }
        p
    }

    #[test]
    fn aes_add_example() {
        let f = Field::gf256();
        assert_eq!(0x57 ^ 0x83, 0xD4);
        assert_eq!(f.add(fe(0x57), fe(0x83)), fe(0xD4));
        assert_eq!(f.add(fe(0x57), fe(0x57)), fe(0));
        assert_eq!(f.add(fe(0x57), fe(0)), fe(0x57));
    }

    #[test]
    fn aes_mul_example() {
        let f = Field::gf256();
        assert_eq!(oracle_mul(0x57, 0x83, 0x11B), 0xC1);
        assert_eq!(f.mul(fe(0x57), fe(0x83)), fe(0xC1));
        assert_eq!(f.mul(fe(0x57), fe(1)), fe(0x57));
        assert_eq!(f.mul(fe(0x57), fe(0)), fe(0));
    }

    #[test]
    fn aes_inverse_example() {
        let f = Field::gf256();
        assert_eq!(oracle_inv(0x53, 0x11B), 0xCA);
        assert_eq!(oracle_mul(0x53, 0xCA, 0x11B), 1);
        assert_eq!(f.inv(fe(0x53)).unwrap(), fe(0xCA));
        assert_eq!(f.inv(fe(1)).unwrap(), fe(1));
        assert_eq!(Field::gf2().inv(fe(1)).unwrap(), fe(1));
        assert_eq!(f.inv(fe(0)), Err(FieldError::ZeroInverse));
    }

    #[test]
    fn tables_match_oracle_exhaustively() {
        for m in 1..=8 {
            let f = Field::with_degree(m).unwrap();
            let poly = f.spec().reduction_polynomial;
            for a in 0..f.order() {
                for b in 0..f.order() {
                    assert_eq!(
                        f.mul(fe(a as u16), fe(b as u16)).0 as u32,
                        oracle_mul(a, b, poly),
                        "m={m} a={a} b={b}"
                    );
                }
            }
        }
    }

    #[test]
    fn wide_fields_use_shift_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in 9..=16 {
            let f = Field::with_degree(m).unwrap();
            assert!(f.tables.is_none());
            let poly = f.spec().reduction_polynomial;
            for _ in 0..500 {
                let a = f.random(&mut rng);
                let b = f.random(&mut rng);
                assert_eq!(f.mul(a, b).0 as u32, oracle_mul(a.0 as u32, b.0 as u32, poly));
                if !a.is_zero() {
                    assert_eq!(f.mul(a, f.inv(a).unwrap()), FieldElement::ONE);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(
            Field::new(FieldSpec { m: 8, reduction_polynomial: 0x100 }).unwrap_err(),
            FieldError::Reducible(0x100)
        );
        // x^2 + 1 = (x + 1)^2
        assert!(matches!(
            Field::new(FieldSpec { m: 2, reduction_polynomial: 0b101 }),
            Err(FieldError::Reducible(_))
        ));
        assert!(matches!(
            Field::new(FieldSpec { m: 4, reduction_polynomial: 0x11B }),
            Err(FieldError::WrongDegree { .. })
        ));
        assert!(matches!(Field::with_degree(17), Err(FieldError::UnsupportedDegree(17))));
        assert!(matches!(Field::with_degree(0), Err(FieldError::UnsupportedDegree(0))));
        for m in 1..=MAX_DEGREE {
            assert!(Field::with_degree(m).is_ok(), "standard polynomial for m={m}");
        }
    }

    #[test]
    fn field_axioms_exhaustive_gf16() {
        let f = Field::with_degree(4).unwrap();
        let all: Vec<_> = (0..16).map(fe).collect();
        for &a in &all {
            if !a.is_zero() {
                assert_eq!(f.mul(a, f.inv(a).unwrap()), FieldElement::ONE);
            }
            for &b in &all {
                assert_eq!(f.add(a, b), f.add(b, a));
                assert_eq!(f.mul(a, b), f.mul(b, a));
                for &c in &all {
                    assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
                    assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
                    assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
                }
            }
        }
    }

    #[test]
    fn field_axioms_random_gf256() {
        let f = Field::gf256();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (a, b, c) = (f.random(&mut rng), f.random(&mut rng), f.random(&mut rng));
            assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
            assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
            assert_eq!(f.mul(a, b), f.mul(b, a));
            assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            if !a.is_zero() {
                assert_eq!(f.mul(a, f.inv(a).unwrap()), FieldElement::ONE);
            }
        }
    }

    #[test]
    fn solve_identity_gf2() {
        let f = Field::gf2();
        let a = FieldMatrix::identity(2);
        let b = FieldMatrix::from_u16_rows(&[vec![1, 0, 1], vec![0, 1, 1]]).unwrap();
        let sol = gaussian_solve(&f, &a, &b).unwrap();
        assert_eq!(sol.rank, 2);
        assert_eq!(sol.x, b);
    }

    #[test]
    fn duplicate_rows_are_rank_deficient() {
        let f = Field::gf2();
        let a = FieldMatrix::from_u16_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        let b = FieldMatrix::zeros(2, 1);
        assert_eq!(
            gaussian_solve(&f, &a, &b),
            Err(SolveError::RankDeficient { rank: 1, needed: 2 })
        );
    }

    #[test]
    fn solve_round_trip_gf256() {
        let f = Field::gf256();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut solved = 0;
        while solved < 50 {
            let a = FieldMatrix::random(&f, 5, 5, &mut rng);
            let x0 = FieldMatrix::random(&f, 5, 7, &mut rng);
            let b = a.mul(&f, &x0).unwrap();
            match gaussian_solve(&f, &a, &b) {
                Ok(sol) => {
                    assert_eq!(sol.x, x0);
                    solved += 1;
                }
                Err(SolveError::RankDeficient { rank, .. }) => assert!(rank < 5),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn overdetermined_consistent_system() {
        let f = Field::gf256();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = FieldMatrix::random(&f, 8, 4, &mut rng);
        let x0 = FieldMatrix::random(&f, 4, 3, &mut rng);
        let b = a.mul(&f, &x0).unwrap();
        let sol = gaussian_solve(&f, &a, &b).unwrap();
        assert_eq!(sol.rank, 4);
        assert_eq!(sol.x, x0);
    }

    // Independent rank oracle for GF(2): the rank is log2 of the number of
    // distinct vectors in the row span.
    fn span_rank_gf2(rows: &[Vec<u16>]) -> usize {
        let n = rows.len();
        let mut span = std::collections::BTreeSet::new();
        for mask in 0..(1u32 << n) {
            let mut v = vec![0u16; rows[0].len()];
            for (i, r) in rows.iter().enumerate() {
                if (mask >> i) & 1 == 1 {
                    for (a, b) in v.iter_mut().zip(r) {
                        *a ^= b;
                    }
                }
            }
            span.insert(v);
        }
        span.len().trailing_zeros() as usize
    }

    #[test]
    fn rank_matches_span_oracle_exhaustive_gf2() {
        let f = Field::gf2();
        for n in [2usize, 3] {
            for bits in 0u32..(1 << (n * n)) {
                let rows: Vec<Vec<u16>> = (0..n)
                    .map(|r| (0..n).map(|c| ((bits >> (r * n + c)) & 1) as u16).collect())
                    .collect();
                let a = FieldMatrix::from_u16_rows(&rows).unwrap();
                let expect = span_rank_gf2(&rows);
                assert_eq!(a.rank(&f), expect);
                let b = FieldMatrix::zeros(n, 1);
                match gaussian_solve(&f, &a, &b) {
                    Ok(s) => assert_eq!(s.rank, expect),
                    Err(SolveError::RankDeficient { rank, .. }) => assert_eq!(rank, expect),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
}
