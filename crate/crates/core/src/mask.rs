//! Attention masks and per-layer mask schedules.
//!
//! Masks are boolean "allowed" matrices. A scheme mask (intra-item, cross-item,
//! ...) only restricts item-token pairs; it is intersected with the causal mask
//! before use, and turned into excluded softmax entries inside the kernel.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::{Annotation, TokenizedPrompt};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask size must be at least 1")]
    InvalidSize,
    #[error("mask shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all_true(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    /// Builds a mask from a row-major allowed matrix.
    pub fn from_fn(n: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                data.push(allowed(j, k));
            }
        }
        Self { n, allowed: data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Whether query `j` may attend to key `k`.
    #[inline]
    pub fn allowed(&self, j: usize, k: usize) -> bool {
        self.allowed[j * self.n + k]
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[bool] {
        &self.allowed[j * self.n..(j + 1) * self.n]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    fn block(&mut self, j: usize, k: usize) {
        self.allowed[j * self.n + k] = false;
    }

    /// Elementwise AND.
    pub fn compose(&self, other: &AttentionMask) -> Result<AttentionMask, MaskError> {
        if self.n != other.n {
            return Err(MaskError::ShapeMismatch(self.n, other.n));
        }
        Ok(AttentionMask {
            n: self.n,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    /// Writes the mask as `n` lines of comma-separated 0/1 values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for j in 0..self.n {
            let line: Vec<&str> = self
                .row(j)
                .iter()
                .map(|&a| if a { "1" } else { "0" })
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Lower-triangular mask: position `j` sees `k <= j`.
pub fn causal_mask(n: usize) -> Result<AttentionMask, MaskError> {
    if n == 0 {
        return Err(MaskError::InvalidSize);
    }
    Ok(AttentionMask::from_fn(n, |j, k| j >= k))
}

fn scheme_mask_from(
    annotations: &[Annotation],
    blocked: impl Fn(usize, &Annotation, usize, &Annotation) -> bool,
) -> AttentionMask {
    let n = annotations.len();
    let mut mask = AttentionMask::all_true(n);
    let items: Vec<usize> = (0..n).filter(|&j| annotations[j].is_item_token).collect();
    for &j in &items {
        for &k in &items {
            if blocked(j, &annotations[j], k, &annotations[k]) {
                mask.block(j, k);
            }
        }
    }
    mask
}

/// Item tokens may only see item tokens of their own item.
pub fn intra_item_mask(prompt: &TokenizedPrompt) -> AttentionMask {
    scheme_mask_from(prompt.annotations(), |_, a, _, b| {
        a.item_index != b.item_index
    })
}

/// Removes attention between distinct tokens of the same item.
pub fn cross_item_pre_mask(prompt: &TokenizedPrompt) -> AttentionMask {
    scheme_mask_from(prompt.annotations(), |j, a, k, b| {
        j != k && a.item_index == b.item_index
    })
}

/// Among item tokens, keeps only last-token to last-token pairs (and the
/// diagonal).
pub fn cross_item_mask(prompt: &TokenizedPrompt) -> AttentionMask {
    scheme_mask_from(prompt.annotations(), |j, a, k, b| {
        j != k && !(a.is_last_of_item && b.is_last_of_item)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "IN")]
    In,
    #[serde(rename = "OR")]
    Or,
    #[serde(rename = "CR")]
    Cr,
    #[serde(rename = "CR_PRE")]
    CrPre,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::In, Scheme::Or, Scheme::Cr, Scheme::CrPre];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::In => "IN",
            Scheme::Or => "OR",
            Scheme::Cr => "CR",
            Scheme::CrPre => "CR_PRE",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "IN" => Ok(Scheme::In),
            "OR" => Ok(Scheme::Or),
            "CR" => Ok(Scheme::Cr),
            "CR_PRE" => Ok(Scheme::CrPre),
            _ => Err(MaskError::UnknownScheme(s.to_string())),
        }
    }
}

/// Scheme-only mask for one layer; the caller intersects it with causal.
pub fn mask_for_scheme(scheme: Scheme, prompt: &TokenizedPrompt) -> AttentionMask {
    match scheme {
        Scheme::Or => AttentionMask::all_true(prompt.len()),
        Scheme::In => intra_item_mask(prompt),
        Scheme::Cr => cross_item_mask(prompt),
        Scheme::CrPre => cross_item_pre_mask(prompt),
    }
}

/// Ordering of the shallow, middle and deep blocks, e.g. `IN-OR-CR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockOrder([Scheme; 3]);

impl BlockOrder {
    pub const CANONICAL: BlockOrder = BlockOrder([Scheme::In, Scheme::Or, Scheme::Cr]);

    pub fn new(order: [Scheme; 3]) -> Result<Self, MaskError> {
        let mut sorted = order;
        sorted.sort();
        if sorted != [Scheme::In, Scheme::Or, Scheme::Cr] {
            return Err(MaskError::InvalidSchedule(format!(
                "{order:?} is not a permutation of IN, OR, CR"
            )));
        }
        Ok(Self(order))
    }

    /// All six orderings, canonical first.
    pub fn all() -> Vec<BlockOrder> {
        use Scheme::*;
        [
            [In, Or, Cr],
            [In, Cr, Or],
            [Or, In, Cr],
            [Or, Cr, In],
            [Cr, In, Or],
            [Cr, Or, In],
        ]
        .into_iter()
        .map(BlockOrder)
        .collect()
    }

    pub fn blocks(&self) -> [Scheme; 3] {
        self.0
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for BlockOrder {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(MaskError::InvalidSchedule(format!("bad block order {s:?}")));
        }
        let mut order = [Scheme::Or; 3];
        for (slot, p) in order.iter_mut().zip(parts) {
            *slot = p.parse()?;
        }
        Self::new(order)
    }
}

impl TryFrom<String> for BlockOrder {
    type Error = MaskError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BlockOrder> for String {
    fn from(o: BlockOrder) -> String {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    schemes: Vec<Scheme>,
    /// Sizes of the first, middle and last block.
    counts: (usize, usize, usize),
}

impl LayerSchedule {
    /// Same scheme in every layer. `uniform(n, Or)` is the unmodified model.
    pub fn uniform(n_layers: usize, scheme: Scheme) -> Self {
        Self {
            schemes: vec![scheme; n_layers],
            counts: (0, n_layers, 0),
        }
    }

    /// Arbitrary per-layer assignment; block counts are not meaningful.
    pub fn from_schemes(schemes: Vec<Scheme>) -> Self {
        let n = schemes.len();
        Self {
            schemes,
            counts: (0, n, 0),
        }
    }

    pub fn schemes(&self) -> &[Scheme] {
        &self.schemes
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.schemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemes.is_empty()
    }

    pub fn is_all_or(&self) -> bool {
        self.schemes.iter().all(|&s| s == Scheme::Or)
    }

    /// Replaces every occurrence of `from` with `to`.
    pub fn replace(&self, from: Scheme, to: Scheme) -> Self {
        Self {
            schemes: self
                .schemes
                .iter()
                .map(|&s| if s == from { to } else { s })
                .collect(),
            counts: self.counts,
        }
    }

    /// Drops every layer using `scheme`.
    pub fn without(&self, scheme: Scheme) -> Self {
        let schemes: Vec<Scheme> = self
            .schemes
            .iter()
            .copied()
            .filter(|&s| s != scheme)
            .collect();
        Self::from_schemes(schemes)
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.schemes.iter().map(|s| s.as_str()).collect();
        f.write_str(&names.join(" "))
    }
}

/// Lays out contiguous IN, OR and CR blocks in the given order. The IN block
/// has `n_shallow` layers, the CR block `n_deep` layers (using
/// `deep_variant`, CR or CR_PRE) and OR fills the rest, so the canonical
/// order puts IN first and CR last.
pub fn build_schedule(
    total_layers: usize,
    n_shallow: usize,
    n_deep: usize,
    order: BlockOrder,
    deep_variant: Scheme,
) -> Result<LayerSchedule, MaskError> {
    if n_shallow + n_deep > total_layers {
        return Err(MaskError::InvalidSchedule(format!(
            "{n_shallow} shallow + {n_deep} deep layers exceed {total_layers}"
        )));
    }
    if !matches!(deep_variant, Scheme::Cr | Scheme::CrPre) {
        return Err(MaskError::InvalidSchedule(format!(
            "deep variant must be CR or CR_PRE, got {deep_variant}"
        )));
    }
    let n_or = total_layers - n_shallow - n_deep;
    let mut schemes = Vec::with_capacity(total_layers);
    let mut sizes = [0usize; 3];
    for (size, scheme) in sizes.iter_mut().zip(order.blocks()) {
        let (scheme, count) = match scheme {
            Scheme::In => (Scheme::In, n_shallow),
            Scheme::Cr => (deep_variant, n_deep),
            _ => (Scheme::Or, n_or),
        };
        *size = count;
        schemes.extend(std::iter::repeat_n(scheme, count));
    }
    Ok(LayerSchedule {
        schemes,
        counts: (sizes[0], sizes[1], sizes[2]),
    })
}
