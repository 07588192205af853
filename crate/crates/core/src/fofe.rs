//! Fixed-size ordinally forgetting encoding over word vectors.
//!
//! Sentence level: `z_1 = x_1`, `z_u = α·z_{u-1} + x_u`, returning `z_U`.
//!
//! Context level: sentence codes are folded with `α_cont` so that the sentence
//! adjacent to the focus always carries weight 1 and a sentence `k` steps away
//! carries `α_cont^(k-1)`. Left contexts are stored adjacent-last and right
//! contexts adjacent-first; both recursions run from the far end toward the focus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FofeConfig {
    pub alpha_sent: f64,
    pub alpha_cont: f64,
}

impl Default for FofeConfig {
    fn default() -> Self {
        FofeConfig {
            alpha_sent: 1.0,
            alpha_cont: 0.9,
        }
    }
}

impl FofeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_sent", self.alpha_sent), ("alpha_cont", self.alpha_cont)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

fn fold<'a, I>(items: I, alpha: f64, dim: usize) -> Result<Vector>
where
    I: Iterator<Item = &'a [f64]>,
{
    let mut z = vec![0.0; dim];
    for x in items {
        if x.len() != dim {
            return Err(Error::Shape {
                op: "fofe",
                left: (1, dim),
                right: (1, x.len()),
            });
        }
        for (zi, xi) in z.iter_mut().zip(x) {
            *zi = alpha * *zi + xi;
        }
    }
    Ok(z.into())
}

/// Encodes one sentence (rows of `words` are word vectors in reading order).
pub fn fofe_sentence(words: &Matrix, alpha: f64) -> Result<Vector> {
    if words.rows() == 0 {
        return Err(Error::invalid("fofe_sentence needs at least one word"));
    }
    fold((0..words.rows()).map(|r| words.row(r)), alpha, words.cols())
}

fn context_dim(codes: &[Vector], dim: usize) -> usize {
    codes.first().map_or(dim, |c| c.len())
}

/// Left context codes ordered document-wise, so the last one is adjacent to the focus.
/// An empty context encodes to the zero vector of length `dim`.
pub fn fofe_left_context(codes: &[Vector], alpha_cont: f64, dim: usize) -> Result<Vector> {
    let d = context_dim(codes, dim);
    if d != dim {
        return Err(Error::Shape {
            op: "fofe_left_context",
            left: (1, dim),
            right: (1, d),
        });
    }
    fold(codes.iter().map(|c| &c[..]), alpha_cont, dim)
}

/// Right context codes ordered document-wise, so the first one is adjacent to the focus.
pub fn fofe_right_context(codes: &[Vector], alpha_cont: f64, dim: usize) -> Result<Vector> {
    let d = context_dim(codes, dim);
    if d != dim {
        return Err(Error::Shape {
            op: "fofe_right_context",
            left: (1, dim),
            right: (1, d),
        });
    }
    fold(codes.iter().rev().map(|c| &c[..]), alpha_cont, dim)
}

/// Two-level encoding of one side's context sentences (each a `len × dim` matrix).
/// Zero-length sentences are skipped.
pub fn encode_context<M: AsRef<Matrix>>(
    sentences: &[M],
    cfg: &FofeConfig,
    side: Side,
    dim: usize,
) -> Result<Vector> {
    let codes = sentences
        .iter()
        .map(AsRef::as_ref)
        .filter(|s| s.rows() > 0)
        .map(|s| fofe_sentence(s, cfg.alpha_sent))
        .collect::<Result<Vec<_>>>()?;
    match side {
        Side::Left => fofe_left_context(&codes, cfg.alpha_cont, dim),
        Side::Right => fofe_right_context(&codes, cfg.alpha_cont, dim),
    }
}

/// Closed form `Σ_u α^(U-u) x_u`; used to cross-check the recursion.
pub fn fofe_closed_form(words: &Matrix, alpha: f64) -> Vector {
    let n = words.rows();
    let mut z = vec![0.0; words.cols()];
    for u in 0..n {
        axpy(alpha.powi((n - 1 - u) as i32), words.row(u), &mut z);
    }
    z.into()
}
