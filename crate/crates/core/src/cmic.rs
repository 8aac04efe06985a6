//! Contrastive multi-interest calibrator.
//!
//! Aggregated interests and their augmented counterparts pass through two
//! separate projection heads. For each interest index, user `u`'s pair is
//! the positive and the augmented interests of every user in the batch form
//! the InfoNCE denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Matrix, ParamStore, Rng, Tape, Var};

/// Norm floor for cosine similarity.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmicConfig {
    pub tau: f64,
    pub lambda_cl: f64,
}

impl Default for CmicConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda_cl: 0.001,
        }
    }
}

impl CmicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_cl >= 0.0) {
            return Err(Error::Config("lambda_cl must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub inner: Linear,
    pub outer: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.outer.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    /// Applied to aggregated interests.
    pub head_a: Head,
    /// Applied to augmented interests.
    pub head_b: Head,
}

impl ProjectionHeads {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        Self {
            head_a: Head::new(store, "cmic.head_a", d, rng),
            head_b: Head::new(store, "cmic.head_b", d, rng),
        }
    }
}

/// InfoNCE over `r` and `r_star` (both `(B·c)×d`, example-major).
pub fn contrastive_loss(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &ProjectionHeads,
    r: Var,
    r_star: Var,
    c: usize,
    tau: f64,
) -> Result<Var> {
    let rows = tape.shape(r).0;
    if c == 0 || rows % c != 0 || tape.shape(r_star) != tape.shape(r) {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            left: tape.shape(r),
            right: tape.shape(r_star),
        });
    }
    let b = rows / c;
    if b < 2 {
        return Err(Error::Contract(format!(
            "contrastive loss needs at least two examples, got {b}"
        )));
    }
    let za = heads.head_a.forward(tape, store, r)?;
    let zb = heads.head_b.forward(tape, store, r_star)?;
    let za = tape.normalize_rows(za, COSINE_FLOOR);
    let zb = tape.normalize_rows(zb, COSINE_FLOOR);
    let interest_major: Vec<usize> = (0..c).flat_map(|i| (0..b).map(move |u| u * c + i)).collect();
    let za = tape.gather_rows(za, interest_major.clone())?;
    let zb = tape.gather_rows(zb, interest_major)?;
    let sims = tape.grouped_matmul_bt(za, zb, b, b)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let log_p = tape.log_softmax_rows(logits);
    let diag = tape.pick(log_p, (0..c * b).map(|k| (k, k % b)).collect())?;
    let m = tape.mean(diag);
    Ok(tape.scale(m, -1.0))
}

/// InfoNCE for one interest index given the `B×B` similarity matrix
/// (positives on the diagonal).
pub fn info_nce(sims: &Matrix, tau: f64) -> f64 {
    let b = sims.rows();
    let mut total = 0.0;
    for u in 0..b {
        let logits: Vec<f64> = sims.row(u).iter().map(|s| s / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[u];
    }
    total / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_FLOOR);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_FLOOR);
        dot / (na * nb)
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, 8, &mut Rng::new(1));
        let mut tape = Tape::new();
        let r = tape.constant(Matrix::filled(4 * 3, 8, 0.7));
        let rs = tape.constant(Matrix::filled(4 * 3, 8, -0.2));
        let l = contrastive_loss(&mut tape, &store, &heads, r, rs, 3, 0.05).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3862943611198906).abs() < 1e-15);
    }

    #[test]
    fn two_user_example() {
        let sims = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((info_nce(&sims, 1.0) - want).abs() < 1e-15);
        assert!((want - 0.31326168751822286).abs() < 1e-15);
    }

    #[test]
    fn single_example_is_contract_error() {
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, 8, &mut Rng::new(1));
        let mut tape = Tape::new();
        let r = tape.constant(Matrix::filled(4, 8, 0.7));
        let rs = tape.constant(Matrix::filled(4, 8, 0.7));
        assert!(matches!(
            contrastive_loss(&mut tape, &store, &heads, r, rs, 4, 0.05),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, 8, &mut rng);
        let (b, c, tau) = (5, 3, 0.05);
        let rm = rng.gaussian(b * c, 8);
        let sm = rng.gaussian(b * c, 8);
        let mut tape = Tape::new();
        let r = tape.constant(rm);
        let rs = tape.constant(sm);
        let loss = contrastive_loss(&mut tape, &store, &heads, r, rs, c, tau).unwrap();
        let za = heads.head_a.forward(&mut tape, &store, r).unwrap();
        let zb = heads.head_b.forward(&mut tape, &store, rs).unwrap();
        let (za, zb) = (tape.value(za).clone(), tape.value(zb).clone());
        let mut total = 0.0;
        for i in 0..c {
            for u in 0..b {
                let pos = (cosine(za.row(u * c + i), zb.row(u * c + i)) / tau).exp();
                let den: f64 = (0..b)
                    .map(|v| (cosine(za.row(u * c + i), zb.row(v * c + i)) / tau).exp())
                    .sum();
                total -= (pos / den).ln();
            }
        }
        let want = total / (b * c) as f64;
        assert!((tape.value(loss).item() - want).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn loss_is_positive_and_monotone_in_positive(
            vals in proptest::collection::vec(-1.0f64..1.0, 9),
            bump in 0.001f64..0.5,
            tau in 0.05f64..2.0,
        ) {
            let sims = Matrix::from_vec(3, 3, vals).unwrap();
            let base = info_nce(&sims, tau);
            prop_assert!(base > 0.0);
            let mut closer = sims.clone();
            closer.set(0, 0, sims.get(0, 0) + bump);
            prop_assert!(info_nce(&closer, tau) < base);
        }

        #[test]
        fn equal_similarities_give_ln_b(s in -1.0f64..1.0, b in 2usize..9) {
            let sims = Matrix::filled(b, b, s);
            prop_assert!((info_nce(&sims, 0.05) - (b as f64).ln()).abs() < 1e-12);
        }
    }
}
