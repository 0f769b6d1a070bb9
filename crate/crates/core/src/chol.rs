//! Cholesky factorization with jitter escalation, and its derivatives.
//!
//! The reverse-mode rule follows the standard smooth-function treatment of
//! the factorization: with `S = L Lᵀ` and `Φ` taking the lower triangle
//! and halving the diagonal,
//!
//! ```text
//! forward:  dL = L Φ(L⁻¹ dS L⁻ᵀ)
//! reverse:  S̄ = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹   (then symmetrized)
//! ```
//!
//! so a 1×1 covariance `S = [v]` gives `dL/dv = 1/(2√v)`.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::diag::Diagnostics;
use crate::Error;

/// Result of a jittered factorization: the factor plus the jitter that was
/// actually added to the diagonal (0 when the matrix was PD as given).
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
    pub escalations: u64,
}

/// Factor `m + jitter·I`, escalating `jitter` by ×10 from `base` up to
/// `max` until the factorization succeeds.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    base: f64,
    max: f64,
) -> Result<JitteredCholesky, Error> {
    assert_eq!(m.nrows(), m.ncols(), "cholesky needs a square matrix");
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0, escalations: 0 });
    }
    let mut jitter = base;
    let mut escalations = 0;
    while jitter <= max * (1.0 + 1e-12) {
        let mut jm = m.clone();
        for i in 0..jm.nrows() {
            jm[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jm) {
            return Ok(JitteredCholesky { chol, jitter, escalations });
        }
        jitter *= 10.0;
        escalations += 1;
    }
    Err(Error::IllConditioned { size: m.nrows(), last_jitter: jitter / 10.0 })
}

/// Convenience wrapper recording escalations into a diagnostics block.
pub fn cholesky_tracked(
    m: &DMatrix<f64>,
    base: f64,
    max: f64,
    diag: &mut Diagnostics,
) -> Result<JitteredCholesky, Error> {
    let jc = cholesky_with_jitter(m, base, max)?;
    diag.jitter_escalations += jc.escalations;
    Ok(jc)
}

fn phi_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                a[(i, j)] = 0.0;
            } else if j == i {
                a[(i, j)] *= 0.5;
            }
        }
    }
}

/// Forward-mode derivative of the factor: given symmetric `ds`, returns
/// `dL` such that `(L + dL)(L + dL)ᵀ ≈ S + ds` to first order.
pub fn chol_forward(l: &DMatrix<f64>, ds: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    assert_eq!(ds.nrows(), n);
    // w = L⁻¹ ds L⁻ᵀ
    let t1 = l.solve_lower_triangular(ds).expect("factor has positive diagonal");
    let mut w = l
        .solve_lower_triangular(&t1.transpose())
        .expect("factor has positive diagonal")
        .transpose();
    phi_in_place(&mut w);
    l * w
}

/// Reverse-mode derivative: given the adjoint `l_bar` of the factor,
/// returns the symmetrized adjoint `s_bar` of the input matrix, i.e. for
/// any scalar `f(L(S))`, `df = Σ_{ij} s_bar[ij] dS[ij]` over symmetric
/// perturbations `dS`.
pub fn chol_reverse(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    assert_eq!(l_bar.nrows(), n);
    let mut p = l.transpose() * l_bar;
    phi_in_place(&mut p);
    let lt = l.transpose();
    // s_raw = L⁻ᵀ P L⁻¹
    let left = lt.solve_upper_triangular(&p).expect("factor has positive diagonal");
    let s_raw = lt
        .solve_upper_triangular(&left.transpose())
        .expect("factor has positive diagonal")
        .transpose();
    0.5 * (&s_raw + s_raw.transpose())
}
