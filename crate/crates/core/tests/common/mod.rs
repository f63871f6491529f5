#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use smpc_core::linalg::{norm2, solve_linear, spectral_radius, symmetric_eigen, vadd, vsub, Mat};
use smpc_core::model::lq_gain;
use smpc_core::qcqp::{min_constraint_value, MpcSolution, QcqpProblem};
use smpc_core::{validate, SystemModel};

pub struct TestRng(ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(0.0, 1.0);
        let u2 = self.uniform(0.0, 1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }

    pub fn mat(&mut self, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_vec(r, c, self.vec(r * c, scale)).unwrap()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

/// Random model satisfying every assumption: A possibly unstable, K the LQ
/// gain, references consistent, W and Q PSD with Q full rank.
pub fn random_model(rng: &mut TestRng) -> SystemModel {
    loop {
        let nx = 2 + rng.index(3);
        let nu = 1 + rng.index(2);
        let nc = 1 + rng.index(2);
        let a = rng.mat(nx, nx, 0.6);
        let b = rng.mat(nx, nu, 1.0);
        let g = rng.mat(nx, nx, 0.5);
        let w = &(&g * &g.transpose()) + &Mat::identity(nx).scale(0.01);
        let qf = rng.mat(nx, nx, 0.7);
        let q = &(&qf * &qf.transpose()) + &Mat::identity(nx).scale(0.05);
        let r = Mat::identity(nu).scale(rng.uniform(0.2, 2.0));
        let c = rng.mat(nc, nx, 0.8);
        let u_ref = rng.vec(nu, 0.3);
        let i_minus_a = &Mat::identity(nx) - &a;
        let Ok(x_ref) = solve_linear(&i_minus_a, &b.matvec(&u_ref)) else {
            continue;
        };
        let cx = c.matvec(&x_ref).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut model = SystemModel {
            a,
            b,
            w,
            c,
            t: 2.0 * cx + 1.0,
            e: 2.0,
            gamma: rng.uniform(0.5, 0.95),
            q,
            r,
            x_ref,
            u_ref,
            k: Mat::zeros(nu, nx),
            horizon: 1 + rng.index(8),
        };
        let Ok((k, _)) = lq_gain(&model) else {
            continue;
        };
        model.k = k;
        let steady = vsub(
            &vsub(&model.x_ref, &model.a.matvec(&model.x_ref)),
            &model.b.matvec(&model.u_ref),
        );
        if steady.iter().any(|v| v.abs() > 1e-10) {
            continue;
        }
        if spectral_radius(&model.phi()).unwrap() >= 0.98 {
            continue;
        }
        if validate(&model).map(|r| r.passed()).unwrap_or(false) {
            return model;
        }
    }
}

/// Number of terms after which `γ^M` drops below `1e-12`, padded so the
/// tail of the slowest geometric factor is negligible too.
pub fn truncation_len(model: &SystemModel) -> usize {
    let rho = spectral_radius(&model.phi())
        .unwrap()
        .max(model.gamma.sqrt());
    let per = (model.gamma * rho * rho).max(model.gamma);
    ((1e-16f64).ln() / per.ln()).ceil() as usize + model.horizon + 10
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

pub fn sq_out(model: &SystemModel, x: &[f64]) -> f64 {
    model.c.matvec(x).iter().map(|v| v * v).sum()
}

/// Covariance ladder `X̂_0 = 0, X̂_{i+1} = Φ X̂_i Φᵀ + W`, `len + 1` entries.
pub fn ladder(model: &SystemModel, len: usize) -> Vec<Mat> {
    let phi = model.phi();
    let mut xs = vec![Mat::zeros(model.nx(), model.nx())];
    for i in 0..len {
        xs.push(&(&(&phi * &xs[i]) * &phi.transpose()) + &model.w);
    }
    xs
}

/// `Σ_{i≥N} γⁱ (tr(CᵀC X̂_i) + ‖C x̄_i‖²)/t²` by explicit propagation, stopping
/// after `len` terms.
pub fn tail_series(model: &SystemModel, xs: &[Mat], xbar_n: &[f64], len: usize) -> f64 {
    let phi = model.phi();
    let ctc = model.ctc();
    let mut x = xbar_n.to_vec();
    let mut sum = 0.0;
    for (i, xi) in xs.iter().enumerate().skip(model.horizon).take(len) {
        sum += model.gamma.powi(i as i32) * ((&ctc * xi).trace() + sq_out(model, &x));
        x = vadd(&phi.matvec(&vsub(&x, &model.x_ref)), &model.x_ref);
    }
    sum / (model.t * model.t)
}

/// Nominal trajectory `x̄_0..x̄_N` from `x0` under stacked inputs `m`.
pub fn simulate(model: &SystemModel, x0: &[f64], m: &[f64]) -> Vec<Vec<f64>> {
    let nu = model.nu();
    let mut traj = vec![x0.to_vec()];
    for i in 0..model.horizon {
        let x = &traj[i];
        traj.push(vadd(
            &model.a.matvec(x),
            &model.b.matvec(&m[i * nu..(i + 1) * nu]),
        ));
    }
    traj
}

/// Horizon part of the constraint by double loop, tail by `tail`.
pub fn direct_constraint(
    model: &SystemModel,
    xs: &[Mat],
    x0: &[f64],
    m: &[f64],
    tail: impl Fn(&[f64]) -> f64,
) -> f64 {
    let traj = simulate(model, x0, m);
    let ctc = model.ctc();
    let mut sum = 0.0;
    for i in 0..model.horizon {
        sum += model.gamma.powi(i as i32) * ((&ctc * &xs[i]).trace() + sq_out(model, &traj[i]));
    }
    sum / (model.t * model.t) + tail(&traj[model.horizon])
}

/// Shifted inputs built from the definition, independent of the library.
pub fn shifted_inputs(model: &SystemModel, prev: &MpcSolution, omega: &[f64]) -> Vec<f64> {
    let n = model.horizon;
    let phi = model.phi();
    let mut phi_w = omega.to_vec();
    let mut out = Vec::new();
    for i in 0..n {
        let base = if i + 1 < n {
            prev.input(i + 1).to_vec()
        } else {
            let dev = vsub(&prev.xbar_star[n], &model.x_ref);
            vadd(&model.k.matvec(&dev), &model.u_ref)
        };
        out.extend(vadd(&base, &model.k.matvec(&phi_w)));
        phi_w = phi.matvec(&phi_w);
    }
    out
}

pub enum Regime {
    Active,
    Inactive,
    Any,
}

/// Random convex instance. `G` has random rank and `g` lies in its range so
/// the constraint is bounded below.
pub fn random_problem(rng: &mut TestRng, n: usize, full_rank: bool, regime: Regime) -> QcqpProblem {
    let f = rng.mat(n, n, 1.0);
    let h = &(&f * &f.transpose()).scale(1.0 / n as f64) + &Mat::identity(n).scale(0.5);
    let r = if full_rank { n } else { 1 + rng.index(n) };
    let e = rng.mat(n, r, 1.0);
    let g = &e * &e.transpose();
    let v = rng.vec(n, 1.0);
    let mut p = QcqpProblem {
        h,
        h_lin: rng.vec(n, 2.0),
        j0: rng.uniform(-1.0, 1.0),
        g_lin: g.matvec(&v),
        g,
        c_const: rng.uniform(0.0, 2.0),
        eps: 0.0,
    };
    let min_c = min_constraint_value(&p).unwrap();
    let m_u: Vec<f64> = solve_linear(&p.h, &p.h_lin)
        .unwrap()
        .iter()
        .map(|x| -x)
        .collect();
    let c_u = p.constraint(&m_u);
    let frac = match regime {
        Regime::Active => rng.uniform(0.02, 0.95),
        Regime::Inactive => rng.uniform(1.05, 2.0),
        Regime::Any => rng.uniform(0.02, 1.5),
    };
    p.eps = min_c + frac * (c_u - min_c);
    p
}

/// Euclidean projection onto `{m : c(m) ≤ eps}`: `m(μ) = (I + μG)⁻¹(y − μ g)`
/// with `μ` found by bisection.
pub fn project(p: &QcqpProblem, y: &[f64]) -> Vec<f64> {
    if p.constraint(y) <= p.eps {
        return y.to_vec();
    }
    let n = y.len();
    let at = |mu: f64| {
        let k = &Mat::identity(n) + &p.g.scale(mu);
        let rhs: Vec<f64> = y.iter().zip(&p.g_lin).map(|(a, b)| a - mu * b).collect();
        solve_linear(&k, &rhs).unwrap()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while p.constraint(&at(hi)) > p.eps {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p.constraint(&at(mid)) > p.eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

/// Accelerated projected gradient with constant step `1/L`.
pub fn projected_gradient(p: &QcqpProblem) -> Vec<f64> {
    let (vals, _) = symmetric_eigen(&p.h).unwrap();
    let lip = 2.0 * vals.last().unwrap();
    let grad = |m: &[f64]| -> Vec<f64> {
        vadd(&p.h.matvec(m), &p.h_lin)
            .iter()
            .map(|v| 2.0 * v)
            .collect()
    };
    let n = p.dim();
    let mut x = project(p, &vec![0.0; n]);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let gy = grad(&y);
        let step: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - b / lip).collect();
        let next = project(p, &step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        let diff = vsub(&next, &x);
        y = next.iter().zip(&diff).map(|(a, d)| a + mom * d).collect();
        let done = norm2(&diff) < 1e-13;
        x = next;
        t = t_next;
        if done {
            break;
        }
    }
    x
}
