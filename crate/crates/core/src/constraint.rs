//! The Chebyshev-bounded discounted chance constraint, written as a single
//! convex quadratic in the stacked nominal inputs, plus the budget update
//! that keeps the online problem feasible from one step to the next.
//!
//! Each predicted violation probability is bounded by
//! `(tr(CᵀC X̂_i) + ‖C x̄_i‖²) / t²`, the discounted sum of these bounds over
//! the horizon plus the closed-form tail [`terminal_f`] must not exceed the
//! current budget `ε_k`. The per-step bounds are substituted directly (they
//! are never slack variables), so the constraint is one scalar `c(m) ≤ ε`.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, vadd, vsub, Mat};
use crate::model::{Precomputed, SystemModel};
use crate::qcqp::MpcSolution;

/// `c(m) = mᵀ G m + 2 gᵀ m + c0 + const_part`.
#[derive(Clone, Debug)]
pub struct ChebyshevTerms {
    /// State-independent part: covariance traces over the horizon plus the
    /// constant part of the terminal term.
    pub const_part: f64,
    /// Hessian in the stacked inputs (PSD).
    pub hessian: Mat,
    /// Linear coefficient; depends on the current state.
    pub linear: Vec<f64>,
    /// State-dependent constant.
    pub c0: f64,
    free_response: Vec<f64>,
}

impl ChebyshevTerms {
    pub fn value(&self, m: &[f64]) -> f64 {
        self.hessian.quad_form(m) + 2.0 * dot(&self.linear, m) + self.c0 + self.const_part
    }

    /// Constant of the quadratic, `c0 + const_part`.
    pub fn constant(&self) -> f64 {
        self.c0 + self.const_part
    }

    /// The per-step Chebyshev bounds `β_i = (tr(CᵀC X̂_i) + ‖C x̄_i(m)‖²)/t²`
    /// for `i < N` that the eliminated slack variables would take.
    pub fn beta_lower(&self, m: &[f64], pre: &Precomputed, model: &SystemModel) -> Vec<f64> {
        let nx = model.nx();
        let mut stacked = self.free_response.clone();
        axpy(1.0, &pre.theta_pred.matvec(m), &mut stacked);
        let t2 = model.t * model.t;
        (0..model.horizon)
            .map(|i| {
                let x = &stacked[i * nx..(i + 1) * nx];
                ((&pre.ctc * &pre.xhat[i]).trace() + pre.ctc.quad_form(x)) / t2
            })
            .collect()
    }
}

/// Closed-form discounted tail `Σ_{i≥N} γⁱ (tr(CᵀC X̂_i) + ‖C x̄_i‖²)/t²` of
/// the Chebyshev bounds, for predictions that follow `x̄_{i+1} − x_ref =
/// Φ (x̄_i − x_ref)` beyond the horizon.
pub fn terminal_f(xbar_n: &[f64], pre: &Precomputed, model: &SystemModel) -> f64 {
    assert_eq!(
        xbar_n.len(),
        model.nx(),
        "terminal state has the wrong length"
    );
    let g = model.gamma;
    let gn = g.powi(model.horizon as i32);
    let t2 = model.t * model.t;
    let d = vsub(xbar_n, &model.x_ref);
    pre.tail_trace / t2
        + gn / t2 * (pre.p_tilde.quad_form(&d) + pre.ctc.quad_form(&model.x_ref) / (1.0 - g))
        + 2.0 * gn / t2 * dot(&pre.cross_dir, &d)
}

/// Constraint scalar evaluated along an explicit nominal trajectory
/// `x̄_0..x̄_N` (length `N + 1`).
pub fn chebyshev_sum(traj: &[Vec<f64>], pre: &Precomputed, model: &SystemModel) -> f64 {
    let n = model.horizon;
    assert_eq!(traj.len(), n + 1, "trajectory must hold N + 1 states");
    let t2 = model.t * model.t;
    let mut disc = 1.0;
    let mut horizon_sum = 0.0;
    for x in &traj[..n] {
        horizon_sum += disc * pre.ctc.quad_form(x);
        disc *= model.gamma;
    }
    (pre.trace_sum + horizon_sum) / t2 + terminal_f(&traj[n], pre, model)
}

pub fn build_constraint(
    x_k: &[f64],
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<ChebyshevTerms> {
    let nx = model.nx();
    if x_k.len() != nx {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for n_x = {nx}",
            x_k.len()
        )));
    }
    let n = model.horizon;
    let g = model.gamma;
    let gn = g.powi(n as i32);
    let t2 = model.t * model.t;

    let free_response = pre.gamma_pred.matvec(x_k);
    // Linear term of the terminal quadratic, acting on x̄_N only.
    let mut lin = vec![0.0; (n + 1) * nx];
    let term_lin = vsub(&pre.cross_dir, &pre.p_tilde.matvec(&model.x_ref));
    for (dst, v) in lin[n * nx..].iter_mut().zip(&term_lin) {
        *dst = gn / t2 * v;
    }

    let weighted = vadd(&pre.constraint_weights.matvec(&free_response), &lin);
    let linear = pre.theta_pred.tr_matvec(&weighted);
    let c0 = pre.constraint_weights.quad_form(&free_response) + 2.0 * dot(&lin, &free_response);
    let const_part = (pre.trace_sum + pre.tail_trace) / t2
        + gn / t2
            * (pre.p_tilde.quad_form(&model.x_ref) + pre.ctc.quad_form(&model.x_ref) / (1.0 - g)
                - 2.0 * dot(&pre.cross_dir, &model.x_ref));

    Ok(ChebyshevTerms {
        const_part,
        hessian: pre.constraint_hessian.clone(),
        linear,
        c0,
        free_response,
    })
}

/// `ω_{k−1} = x_k − A x_{k−1} − B u_{k−1}`.
pub fn reconstruct_disturbance(
    x_next: &[f64],
    x_prev: &[f64],
    u_prev: &[f64],
    model: &SystemModel,
) -> Vec<f64> {
    vsub(
        &vsub(x_next, &model.a.matvec(x_prev)),
        &model.b.matvec(u_prev),
    )
}

/// The previous optimal sequence advanced one step and corrected for the
/// realised disturbance, together with its nominal trajectory.
#[derive(Clone, Debug)]
pub struct ShiftedSequence {
    pub omega: Vec<f64>,
    /// Stacked inputs `m*_{i+1|k−1} + K Φⁱ ω`, `i = 0..N−1`.
    pub inputs: Vec<f64>,
    /// `x̄*_{i+1|k−1} + Φⁱ ω`, `i = 0..N`.
    pub trajectory: Vec<Vec<f64>>,
}

pub fn shifted_sequence(
    x_next: &[f64],
    prev: &MpcSolution,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<ShiftedSequence> {
    let nx = model.nx();
    let nu = model.nu();
    let n = model.horizon;
    if x_next.len() != nx {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for n_x = {nx}",
            x_next.len()
        )));
    }
    if prev.xbar_star.len() != n + 1 || prev.m_star.len() != n * nu {
        return Err(Error::DimensionMismatch(
            "previous solution does not match the model horizon".into(),
        ));
    }
    let omega = reconstruct_disturbance(x_next, &prev.xbar_star[0], prev.first_input(), model);
    shifted_with(&omega, prev, pre, model)
}

fn shifted_with(
    omega: &[f64],
    prev: &MpcSolution,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<ShiftedSequence> {
    let nu = model.nu();
    let n = model.horizon;
    let xbar_n = &prev.xbar_star[n];
    let dev_n = vsub(xbar_n, &model.x_ref);
    let x_after = vadd(&pre.phi.matvec(&dev_n), &model.x_ref);
    let m_after = vadd(&model.k.matvec(&dev_n), &model.u_ref);

    let mut inputs = Vec::with_capacity(n * nu);
    let mut trajectory = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let phi_w = pre.phi_powers[i].matvec(omega);
        let base = if i < n {
            &prev.xbar_star[i + 1]
        } else {
            &x_after
        };
        trajectory.push(vadd(base, &phi_w));
        if i < n {
            let m_next = if i + 1 < n {
                &prev.m_star[(i + 1) * nu..(i + 2) * nu]
            } else {
                &m_after[..]
            };
            inputs.extend(vadd(m_next, &model.k.matvec(&phi_w)));
        }
    }
    Ok(ShiftedSequence {
        omega: omega.to_vec(),
        inputs,
        trajectory,
    })
}

/// Budget for time `k` given the measured state `x_next = x_k` and the
/// optimal solution computed at `k − 1`. It equals the constraint value of
/// the shifted sequence, so the problem at `k` is feasible at this budget.
pub fn update_epsilon(
    x_next: &[f64],
    prev: Option<&MpcSolution>,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<f64> {
    let prev = prev.ok_or(Error::MissingPreviousSolution)?;
    let shifted = shifted_sequence(x_next, prev, pre, model)?;
    Ok(chebyshev_sum(&shifted.trajectory, pre, model))
}

/// `E_k[ε_{k+1}]` in closed form, given the optimal solution at time `k`.
///
/// `ε_{k+1}` is quadratic in `ω_k`; its mean is the `ω = 0` value plus the
/// trace of each quadratic weight against `W`.
pub fn expected_next_epsilon(
    sol: &MpcSolution,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<f64> {
    let nx = model.nx();
    let n = model.horizon;
    let zero = vec![0.0; nx];
    let nominal = shifted_with(&zero, sol, pre, model)?;
    let t2 = model.t * model.t;
    let mut correction = 0.0;
    let mut disc = 1.0;
    for i in 0..n {
        let spread = &(&pre.phi_powers[i] * &model.w) * &pre.phi_powers[i].transpose();
        correction += disc * (&pre.ctc * &spread).trace();
        disc *= model.gamma;
    }
    let spread_n = &(&pre.phi_powers[n] * &model.w) * &pre.phi_powers[n].transpose();
    correction += disc * (&pre.p_tilde * &spread_n).trace();
    Ok(chebyshev_sum(&nominal.trajectory, pre, model) + correction / t2)
}
