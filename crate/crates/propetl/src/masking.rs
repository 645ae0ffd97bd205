//! Binary top-k masks over real-valued score tensors.
//!
//! A mask keeps the positions holding the largest-magnitude scores and drops
//! the rest. The kept count is exactly `round(k * n)` (round half up), so a
//! mask's cardinality is a function of (n, k) alone, never of the score
//! values. Masks pack to bytes LSB-first for storage.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Kept fraction k in (0, 1], held as an exact rational so cardinalities,
/// bit budgets, and checkpoint headers never suffer float drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sparsity {
    num: u32,
    den: u32,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Sparsity {
    pub const FULL: Sparsity = Sparsity { num: 1, den: 1 };

    pub fn ratio(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::invalid(
                "sparsity",
                format!("k = {num}/{den} is outside (0, 1]"),
            ));
        }
        let g = gcd(num, den);
        let (num, den) = (num / g, den / g);
        if num > u32::MAX as u64 || den > u32::MAX as u64 {
            return Err(Error::invalid("sparsity", "k numerator/denominator exceed u32"));
        }
        Ok(Sparsity { num: num as u32, den: den as u32 })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_full(&self) -> bool {
        self.num == self.den
    }

    /// round(k * n) with round-half-up, in exact integer arithmetic.
    pub fn ones_count(&self, n: usize) -> usize {
        let num = self.num as u128;
        let den = self.den as u128;
        let n = n as u128;
        ((2 * num * n + den) / (2 * den)) as usize
    }
}

impl fmt::Display for Sparsity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Sparsity {
    type Err = Error;

    /// Accepts plain decimals ("0.3", ".5", "1", "1.0") or rationals ("3/10").
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid("sparsity", format!("cannot parse k from {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let num: u64 = n.trim().parse().map_err(|_| bad())?;
            let den: u64 = d.trim().parse().map_err(|_| bad())?;
            return Sparsity::ratio(num, den);
        }
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || (int_part.is_empty() && frac_part.is_empty())
            || frac_part.len() > 9
        {
            return Err(bad());
        }
        let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| bad())? };
        let den: u64 = 10u64.pow(frac_part.len() as u32);
        let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().map_err(|_| bad())? };
        Sparsity::ratio(int * den + frac, den)
    }
}

/// Named real-valued scores with the kept fraction they will be thresholded at.
#[derive(Debug, Clone)]
pub struct MaskScores {
    pub name: String,
    pub values: Tensor,
    pub k: Sparsity,
}

impl MaskScores {
    pub fn new(name: impl Into<String>, values: Tensor, k: Sparsity) -> Self {
        MaskScores { name: name.into(), values, k }
    }
}

/// Scores are drawn i.i.d. Uniform[-0.1, 0.1); the scale is immaterial to the
/// threshold (only magnitude order matters) but keeps early updates gentle.
pub fn init_scores(
    name: impl Into<String>,
    shape: Vec<usize>,
    k: Sparsity,
    rng: &mut impl Rng,
) -> MaskScores {
    let mut values = Tensor::uniform(shape, -0.1, 0.1, rng);
    values.set_requires_grad(true);
    MaskScores::new(name, values, k)
}

/// How two binary masks merge into a hybrid mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Or,
    And,
    /// Elementwise sum clamped back to {0, 1}; coincides with Or on binary
    /// inputs but is kept as a distinct labeled mode.
    Add,
}

impl CombineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CombineMode::Or => "or",
            CombineMode::And => "and",
            CombineMode::Add => "add",
        }
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "or" => Ok(CombineMode::Or),
            "and" => Ok(CombineMode::And),
            "add" => Ok(CombineMode::Add),
            other => Err(Error::invalid("combine", format!("unknown mode {other:?}"))),
        }
    }
}

/// Binary mask stored bit-packed, LSB-first within each byte, row-major over
/// the flat index; padding bits in the final byte are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    name: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn packed_len(n: usize) -> usize {
    n.div_ceil(8)
}

impl BinaryMask {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        BinaryMask { name: name.into(), shape, bytes: vec![0u8; packed_len(n)] }
    }

    pub fn ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let mut m = BinaryMask::zeros(name, shape);
        for i in 0..m.numel() {
            m.set(i, true);
        }
        m
    }

    pub fn from_bools(name: impl Into<String>, shape: Vec<usize>, bits: &[bool]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() {
            return Err(Error::invalid(
                "mask",
                format!("shape {:?} wants {} bits, got {}", shape, n, bits.len()),
            ));
        }
        let mut m = BinaryMask::zeros(name, shape);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i, true);
            }
        }
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn get(&self, i: usize) -> bool {
        (self.bytes[i / 8] >> (i % 8)) & 1 == 1
    }

    fn set(&mut self, i: usize, b: bool) {
        if b {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn popcount(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        self.popcount() as f64 / self.numel() as f64
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.numel()).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }

    /// Packed bytes, LSB-first, final byte zero-padded.
    pub fn pack(&self) -> Vec<u8> {
        self.bytes.clone()
    }

    /// Inverse of `pack`. Rejects byte strings of the wrong length and
    /// nonzero padding bits, so pack/unpack is a bijection.
    pub fn unpack(name: impl Into<String>, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let want = packed_len(n);
        if bytes.len() != want {
            return Err(Error::invalid(
                "mask",
                format!("packed length {} does not match {} bits (want {} bytes)", bytes.len(), n, want),
            ));
        }
        if n % 8 != 0 && !bytes.is_empty() {
            let pad_mask = !0u8 << (n % 8);
            if bytes[want - 1] & pad_mask != 0 {
                return Err(Error::invalid("mask", "nonzero padding bits in final byte"));
            }
        }
        Ok(BinaryMask { name: name.into(), shape, bytes: bytes.to_vec() })
    }

    pub fn rename(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Core threshold: ones at the positions of the `round(k * n)` largest |values|,
/// ties broken toward the lowest flat index. Deterministic in the input.
pub fn threshold_topk_values(
    name: impl Into<String>,
    shape: &[usize],
    values: &[f32],
    k: Sparsity,
) -> Result<BinaryMask> {
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(Error::invalid(
            "threshold_topk",
            format!("shape {:?} wants {} values, got {}", shape, n, values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "threshold_topk" });
    }
    let ones = k.ones_count(n);
    let mut mask = BinaryMask::zeros(name, shape.to_vec());
    if ones == 0 {
        return Ok(mask);
    }
    if ones >= n {
        for i in 0..n {
            mask.set(i, true);
        }
        return Ok(mask);
    }
    // Total order: |value| descending, then flat index ascending. Selecting
    // the first `ones` elements under this order realizes the tie rule.
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let key = |i: u32| values[i as usize].abs();
    idx.select_nth_unstable_by(ones - 1, |&a, &b| {
        key(b).total_cmp(&key(a)).then(a.cmp(&b))
    });
    for &i in &idx[..ones] {
        mask.set(i as usize, true);
    }
    Ok(mask)
}

pub fn threshold_topk(scores: &MaskScores) -> Result<BinaryMask> {
    threshold_topk_values(&scores.name, scores.values.shape(), scores.values.data(), scores.k)
}

/// Merge two same-shape binary masks.
pub fn combine(a: &BinaryMask, b: &BinaryMask, mode: CombineMode) -> Result<BinaryMask> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let bytes: Vec<u8> = a
        .bytes
        .iter()
        .zip(&b.bytes)
        .map(|(&x, &y)| match mode {
            CombineMode::Or => x | y,
            CombineMode::And => x & y,
            // Saturating per-bit sum: 1+1 clamps to 1, identical to Or on
            // packed bits.
            CombineMode::Add => x | y,
        })
        .collect();
    Ok(BinaryMask { name: a.name.clone(), shape: a.shape.clone(), bytes })
}

/// Uniform-random mask with the exact cardinality `round(k * n)`; the random
/// baseline draws a fresh one every forward pass.
pub fn random_mask(
    name: impl Into<String>,
    shape: &[usize],
    k: Sparsity,
    rng: &mut impl Rng,
) -> BinaryMask {
    let n: usize = shape.iter().product();
    let ones = k.ones_count(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut mask = BinaryMask::zeros(name, shape.to_vec());
    for &i in &idx[..ones.min(n)] {
        mask.set(i, true);
    }
    mask
}
