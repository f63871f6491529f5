//! Exact solver for a strictly convex quadratic objective under a single
//! convex quadratic constraint.
//!
//! For `λ ≥ 0` the Lagrangian minimiser is `m(λ) = −(H + λG)⁻¹(h + λg)`.
//! If the unconstrained minimiser already satisfies the constraint it is
//! optimal; otherwise the optimal multiplier is the root of
//! `φ(λ) = c(m(λ)) − ε`, which is continuous and decreasing, and is found by
//! Newton steps safeguarded with a bisection bracket.

use crate::constraint::build_constraint;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, symmetric_eigen, vadd, Cholesky, Mat};
use crate::model::{Precomputed, SystemModel};

/// Budgets within this distance above `c(m_u)` count as inactive.
pub const TIE_TOL: f64 = 1e-9;
/// Infeasibility margin on `min c(m) − ε`.
pub const INFEASIBLE_TOL: f64 = 1e-9;
/// Relative eigenvalue cutoff for the pseudo-solve in [`min_constraint_value`].
pub const PSEUDO_INVERSE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Root-finding stops once `|φ(λ)| ≤ tol · max(1, ε)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on the number of doublings used to find an upper bracket.
    pub max_doublings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            max_doublings: 200,
        }
    }
}

/// `min mᵀHm + 2hᵀm + j0  s.t.  mᵀGm + 2gᵀm + c_const ≤ eps`.
#[derive(Clone, Debug)]
pub struct QcqpProblem {
    pub h: Mat,
    pub h_lin: Vec<f64>,
    pub j0: f64,
    pub g: Mat,
    pub g_lin: Vec<f64>,
    pub c_const: f64,
    pub eps: f64,
}

impl QcqpProblem {
    pub fn dim(&self) -> usize {
        self.h_lin.len()
    }

    pub fn objective(&self, m: &[f64]) -> f64 {
        self.h.quad_form(m) + 2.0 * dot(&self.h_lin, m) + self.j0
    }

    pub fn constraint(&self, m: &[f64]) -> f64 {
        self.g.quad_form(m) + 2.0 * dot(&self.g_lin, m) + self.c_const
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        if self.h.shape() != (n, n) || self.g.shape() != (n, n) || self.g_lin.len() != n {
            return Err(Error::DimensionMismatch(
                "QCQP data has inconsistent sizes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcqpSolution {
    pub m: Vec<f64>,
    pub objective: f64,
    pub lambda: f64,
    pub constraint_value: f64,
    pub active: bool,
    pub iterations: usize,
}

/// KKT residuals of a candidate solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    /// `‖(H + λG) m + (h + λg)‖`.
    pub stationarity: f64,
    /// `max(0, c(m) − ε)`.
    pub primal: f64,
    /// `max(0, −λ)`.
    pub dual: f64,
    /// `|λ (c(m) − ε)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    /// Whether every residual is within the certification tolerances.
    pub fn certified(&self, p: &QcqpProblem) -> bool {
        self.stationarity <= 1e-8 * (1.0 + norm2(&p.h_lin))
            && self.primal <= 1e-8
            && self.dual == 0.0
            && self.complementarity <= 1e-7
    }
}

pub fn kkt_residuals(p: &QcqpProblem, m: &[f64], lambda: f64) -> KktResiduals {
    let grad = vadd(
        &vadd(&p.h.matvec(m), &p.h_lin),
        &vadd(&p.g.matvec(m), &p.g_lin)
            .iter()
            .map(|v| lambda * v)
            .collect::<Vec<_>>(),
    );
    let slack = p.constraint(m) - p.eps;
    KktResiduals {
        stationarity: norm2(&grad),
        primal: slack.max(0.0),
        dual: (-lambda).max(0.0),
        complementarity: if lambda == 0.0 {
            0.0
        } else {
            (lambda * slack).abs()
        },
    }
}

/// `inf_m c(m)` and a minimiser, by pseudo-solving `G m = −g`.
pub fn min_constraint_point(p: &QcqpProblem) -> Result<(f64, Vec<f64>)> {
    p.check()?;
    let n = p.dim();
    let (vals, vecs) = symmetric_eigen(&p.g)?;
    let top = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut m = vec![0.0; n];
    for (j, &lam) in vals.iter().enumerate() {
        if lam <= PSEUDO_INVERSE_TOL * top || lam <= 0.0 {
            continue;
        }
        let coef = -(0..n).map(|r| vecs[(r, j)] * p.g_lin[r]).sum::<f64>() / lam;
        for (r, mr) in m.iter_mut().enumerate() {
            *mr += coef * vecs[(r, j)];
        }
    }
    Ok((p.constraint(&m), m))
}

pub fn min_constraint_value(p: &QcqpProblem) -> Result<f64> {
    Ok(min_constraint_point(p)?.0)
}

pub fn solve(p: &QcqpProblem) -> Result<QcqpSolution> {
    solve_with(p, &SolverOptions::default())
}

pub fn solve_with(p: &QcqpProblem, opts: &SolverOptions) -> Result<QcqpSolution> {
    p.check()?;
    let chol = Cholesky::new(&p.h)?;
    let m_u: Vec<f64> = chol.solve(&p.h_lin).iter().map(|v| -v).collect();
    let c_u = p.constraint(&m_u);
    if c_u <= p.eps + TIE_TOL {
        return Ok(QcqpSolution {
            objective: p.objective(&m_u),
            m: m_u,
            lambda: 0.0,
            constraint_value: c_u,
            active: false,
            iterations: 0,
        });
    }

    let min_c = min_constraint_value(p)?;
    if min_c > p.eps + INFEASIBLE_TOL {
        return Err(Error::Infeasible {
            min_value: min_c,
            eps: p.eps,
        });
    }

    let tol = opts.tol * p.eps.abs().max(1.0);
    let eval = |lambda: f64| -> Result<Eval> {
        let k = &p.h + &p.g.scale(lambda);
        let chol = Cholesky::new(&k)?;
        let rhs: Vec<f64> = p
            .h_lin
            .iter()
            .zip(&p.g_lin)
            .map(|(a, b)| a + lambda * b)
            .collect();
        let m: Vec<f64> = chol.solve(&rhs).iter().map(|v| -v).collect();
        let s = vadd(&p.g.matvec(&m), &p.g_lin);
        let slope = -2.0 * dot(&s, &chol.solve(&s));
        Ok(Eval {
            lambda,
            phi: p.constraint(&m) - p.eps,
            slope,
            m,
        })
    };

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    let mut upper = eval(hi)?;
    while upper.phi > 0.0 {
        if doublings == opts.max_doublings {
            return Err(Error::NonConvergence {
                what: "QCQP multiplier bracket",
                iterations: doublings,
            });
        }
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        upper = eval(hi)?;
    }
    // Terminate on the feasible side so the reported solution never exceeds
    // the budget.
    let accept = |e: &Eval| e.phi <= 0.0 && e.phi >= -tol;
    if accept(&upper) {
        return Ok(finish(p, upper, doublings));
    }

    let mut cur = eval(lo)?;
    for it in 1..=opts.max_iter {
        let newton = cur.lambda - cur.phi / cur.slope;
        let next = if cur.slope < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        cur = eval(next)?;
        if accept(&cur) {
            return Ok(finish(p, cur, doublings + it));
        }
        if cur.phi > 0.0 {
            lo = cur.lambda;
        } else {
            hi = cur.lambda;
            upper = cur.clone();
        }
        if hi - lo <= f64::EPSILON * hi {
            return Ok(finish(p, upper, doublings + it));
        }
    }
    Err(Error::NonConvergence {
        what: "QCQP multiplier search",
        iterations: opts.max_iter,
    })
}

#[derive(Clone)]
struct Eval {
    lambda: f64,
    phi: f64,
    slope: f64,
    m: Vec<f64>,
}

fn finish(p: &QcqpProblem, e: Eval, iterations: usize) -> QcqpSolution {
    QcqpSolution {
        objective: p.objective(&e.m),
        constraint_value: e.phi + p.eps,
        m: e.m,
        lambda: e.lambda,
        active: true,
        iterations,
    }
}

/// Optimal solution of the MPC problem at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// Stacked optimal nominal inputs `m*_{0..N−1}`.
    pub m_star: Vec<f64>,
    /// Optimal nominal states `x̄*_{0..N}`, with `x̄*_0 = x_k`.
    pub xbar_star: Vec<Vec<f64>>,
    pub j_star: f64,
    pub lambda_star: f64,
    pub constraint_value: f64,
    pub eps: f64,
    pub active: bool,
    pub iterations: usize,
    nu: usize,
}

impl MpcSolution {
    /// `m*_0`, the input applied to the plant.
    pub fn first_input(&self) -> &[f64] {
        &self.m_star[..self.nu]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.m_star[i * self.nu..(i + 1) * self.nu]
    }
}

/// Objective data `(h, j0)` of the condensed predicted cost at state `x_k`.
pub fn condensed_cost(x_k: &[f64], pre: &Precomputed, model: &SystemModel) -> (Vec<f64>, f64) {
    let n = model.horizon;
    let x_ref_stack: Vec<f64> = (0..=n).flat_map(|_| model.x_ref.iter().copied()).collect();
    let u_ref_stack: Vec<f64> = (0..n).flat_map(|_| model.u_ref.iter().copied()).collect();
    let dev: Vec<f64> = pre
        .gamma_pred
        .matvec(x_k)
        .iter()
        .zip(&x_ref_stack)
        .map(|(a, b)| a - b)
        .collect();
    let q_dev = pre.state_weights.matvec(&dev);
    let r_ref = pre.input_weights.matvec(&u_ref_stack);
    let h: Vec<f64> = pre
        .theta_pred
        .tr_matvec(&q_dev)
        .iter()
        .zip(&r_ref)
        .map(|(a, b)| a - b)
        .collect();
    let j0 = dot(&dev, &q_dev) + dot(&u_ref_stack, &r_ref);
    (h, j0)
}

pub fn mpc_problem(
    x_k: &[f64],
    eps: f64,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<QcqpProblem> {
    let terms = build_constraint(x_k, pre, model)?;
    let (h_lin, j0) = condensed_cost(x_k, pre, model);
    Ok(QcqpProblem {
        h: pre.cost_hessian.clone(),
        h_lin,
        j0,
        c_const: terms.constant(),
        g: terms.hessian,
        g_lin: terms.linear,
        eps,
    })
}

/// Builds and solves the MPC problem at state `x_k` with budget `eps`.
pub fn solve_mpc(
    x_k: &[f64],
    eps: f64,
    pre: &Precomputed,
    model: &SystemModel,
) -> Result<MpcSolution> {
    let problem = mpc_problem(x_k, eps, pre, model)?;
    let sol = solve(&problem)?;
    Ok(MpcSolution {
        xbar_star: pre.predict(x_k, &sol.m),
        m_star: sol.m,
        j_star: sol.objective,
        lambda_star: sol.lambda,
        constraint_value: sol.constraint_value,
        eps,
        active: sol.active,
        iterations: sol.iterations,
        nu: model.nu(),
    })
}
