//! Plant, constraint and cost data, assumption checks, and all offline
//! precomputation (covariance ladder, terminal matrices, condensed
//! prediction matrices, LQ-optimal gain).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{
    self, dot, kron_capped, norm2, psd_sqrt, rank, spectral_radius, vsub, Lu, Mat,
};

/// Tolerance on the steady-state reference residual `(I - A) x_ref - B u_ref`.
pub const STEADY_STATE_TOL: f64 = 1e-9;
/// Symmetry / semidefiniteness tolerance for W, Q and R.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative pivot threshold for controllability/observability rank tests.
pub const RANK_REL_TOL: f64 = 1e-9;
/// Riccati fixed-point tolerance on the elementwise change.
pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 10_000;
/// Fixed-point fallback for Lyapunov equations too large for the Kronecker
/// solve.
pub const LYAPUNOV_FP_TOL: f64 = 1e-12;
pub const LYAPUNOV_FP_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub a: Mat,
    pub b: Mat,
    /// Disturbance second moment.
    pub w: Mat,
    /// Constraint output map.
    pub c: Mat,
    /// Violation threshold on `‖C x‖`.
    pub t: f64,
    /// Budget on the discounted sum of violation probabilities.
    pub e: f64,
    pub gamma: f64,
    pub q: Mat,
    pub r: Mat,
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
    /// Feedback gain used in the predicted control law.
    pub k: Mat,
    pub horizon: usize,
}

impl SystemModel {
    /// The two-state, single-input example system used throughout the tests
    /// and the experiment presets.
    pub fn example_system() -> Self {
        let c = Mat::from_rows(&[[0.6, 0.52]]).unwrap();
        Self {
            a: Mat::from_rows(&[[1.0, 2.0], [1.5, 0.5]]).unwrap(),
            b: Mat::from_rows(&[[1.2], [1.5]]).unwrap(),
            w: Mat::identity(2).scale(0.2),
            q: &c.transpose() * &c,
            c,
            t: 1.0,
            e: 3.5,
            gamma: 0.9,
            r: Mat::identity(1),
            x_ref: vec![0.72, 0.36],
            u_ref: vec![-0.6],
            k: Mat::from_rows(&[[-0.92, -0.85]]).unwrap(),
            horizon: 7,
        }
    }

    pub fn nx(&self) -> usize {
        self.a.rows()
    }

    pub fn nu(&self) -> usize {
        self.b.cols()
    }

    pub fn nc(&self) -> usize {
        self.c.rows()
    }

    /// `Φ = A + B K`.
    pub fn phi(&self) -> Mat {
        &self.a + &(&self.b * &self.k)
    }

    /// `CᵀC`.
    pub fn ctc(&self) -> Mat {
        &self.c.transpose() * &self.c
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let nx = self.a.rows();
        let nu = self.b.cols();
        let mut bad = Vec::new();
        if !self.a.is_square() {
            bad.push(format!("A is {:?}, expected square", self.a.shape()));
        }
        if self.b.rows() != nx {
            bad.push(format!("B has {} rows, expected {nx}", self.b.rows()));
        }
        if self.w.shape() != (nx, nx) {
            bad.push(format!("W is {:?}, expected ({nx}, {nx})", self.w.shape()));
        }
        if self.c.cols() != nx || self.c.rows() == 0 {
            bad.push(format!("C is {:?}, expected (n_c, {nx})", self.c.shape()));
        }
        if self.q.shape() != (nx, nx) {
            bad.push(format!("Q is {:?}, expected ({nx}, {nx})", self.q.shape()));
        }
        if self.r.shape() != (nu, nu) {
            bad.push(format!("R is {:?}, expected ({nu}, {nu})", self.r.shape()));
        }
        if self.k.shape() != (nu, nx) {
            bad.push(format!("K is {:?}, expected ({nu}, {nx})", self.k.shape()));
        }
        if self.x_ref.len() != nx {
            bad.push(format!(
                "x_ref has length {}, expected {nx}",
                self.x_ref.len()
            ));
        }
        if self.u_ref.len() != nu {
            bad.push(format!(
                "u_ref has length {}, expected {nu}",
                self.u_ref.len()
            ));
        }
        if nx == 0 || nu == 0 {
            bad.push("empty state or input dimension".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(bad.join("; ")))
        }
    }

    /// Parses a model document. When `K` is absent the LQ-optimal gain is
    /// substituted.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            a: MatrixValue::Matrix(self.a.to_rows()),
            b: MatrixValue::Matrix(self.b.to_rows()),
            w: MatrixValue::Matrix(self.w.to_rows()),
            c: MatrixValue::Matrix(self.c.to_rows()),
            t: self.t,
            e: self.e,
            gamma: self.gamma,
            q: MatrixValue::Matrix(self.q.to_rows()),
            r: MatrixValue::Matrix(self.r.to_rows()),
            x_ref: MatrixValue::Vector(self.x_ref.clone()),
            u_ref: MatrixValue::Vector(self.u_ref.clone()),
            k: Some(MatrixValue::Matrix(self.k.to_rows())),
            n: self.horizon,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_model_file()).expect("model serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_model_file()).expect("model serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A matrix-valued field of the model file. Scalars are read as 1x1
/// matrices; flat arrays are accepted only for vector fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl MatrixValue {
    fn into_mat(self, name: &str) -> Result<Mat> {
        match self {
            MatrixValue::Scalar(v) => Ok(Mat::from_vec(1, 1, vec![v])?),
            MatrixValue::Matrix(rows) => {
                Mat::from_rows(&rows).map_err(|e| Error::DimensionMismatch(format!("{name}: {e}")))
            }
            MatrixValue::Vector(_) => Err(Error::DimensionMismatch(format!(
                "{name} must be a nested array of rows"
            ))),
        }
    }

    fn into_vec(self, name: &str) -> Result<Vec<f64>> {
        match self {
            MatrixValue::Scalar(v) => Ok(vec![v]),
            MatrixValue::Vector(v) => Ok(v),
            MatrixValue::Matrix(rows) => {
                if rows.iter().all(|r| r.len() == 1) {
                    Ok(rows.into_iter().map(|r| r[0]).collect())
                } else {
                    Err(Error::DimensionMismatch(format!("{name} must be a vector")))
                }
            }
        }
    }
}

/// On-disk model document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "A")]
    pub a: MatrixValue,
    #[serde(rename = "B")]
    pub b: MatrixValue,
    #[serde(rename = "W")]
    pub w: MatrixValue,
    #[serde(rename = "C")]
    pub c: MatrixValue,
    pub t: f64,
    pub e: f64,
    pub gamma: f64,
    #[serde(rename = "Q")]
    pub q: MatrixValue,
    #[serde(rename = "R")]
    pub r: MatrixValue,
    pub x_ref: MatrixValue,
    pub u_ref: MatrixValue,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<MatrixValue>,
    #[serde(rename = "N")]
    pub n: usize,
}

impl ModelFile {
    pub fn into_model(self) -> Result<SystemModel> {
        let a = self.a.into_mat("A")?;
        let b = self.b.into_mat("B")?;
        let explicit_k = self.k.map(|k| k.into_mat("K")).transpose()?;
        let mut model = SystemModel {
            k: explicit_k
                .clone()
                .unwrap_or_else(|| Mat::zeros(b.cols(), a.rows())),
            a,
            b,
            w: self.w.into_mat("W")?,
            c: self.c.into_mat("C")?,
            t: self.t,
            e: self.e,
            gamma: self.gamma,
            q: self.q.into_mat("Q")?,
            r: self.r.into_mat("R")?,
            x_ref: self.x_ref.into_vec("x_ref")?,
            u_ref: self.u_ref.into_vec("u_ref")?,
            horizon: self.n,
        };
        model.check_dimensions()?;
        if explicit_k.is_none() {
            model.k = lq_gain(&model)?.0;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity behind the verdict.
    pub value: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, passed: bool, value: f64, detail: String) {
        self.checks.push(Check {
            name,
            passed,
            value,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {:<22} {:>14.6e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.detail
            )?;
        }
        write!(
            f,
            "overall: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks every standing assumption on the model. Shape errors are returned
/// as `Err`; everything else lands in the report.
pub fn validate(model: &SystemModel) -> Result<ValidationReport> {
    model.check_dimensions()?;
    let mut rep = ValidationReport::default();
    let nx = model.nx();

    let finite = [
        &model.a, &model.b, &model.w, &model.c, &model.q, &model.r, &model.k,
    ]
    .iter()
    .all(|m| m.is_finite())
        && model
            .x_ref
            .iter()
            .chain(&model.u_ref)
            .all(|v| v.is_finite())
        && model.t.is_finite()
        && model.e.is_finite();
    rep.push(
        "finite_entries",
        finite,
        if finite { 0.0 } else { 1.0 },
        "all matrix and scalar entries finite".into(),
    );
    if !finite {
        return Ok(rep);
    }

    rep.push(
        "discount_factor",
        model.gamma > 0.0 && model.gamma < 1.0,
        model.gamma,
        "gamma must lie strictly inside (0, 1)".into(),
    );
    rep.push("threshold_positive", model.t > 0.0, model.t, "t > 0".into());
    rep.push("budget_positive", model.e > 0.0, model.e, "e > 0".into());
    rep.push(
        "horizon",
        model.horizon >= 1,
        model.horizon as f64,
        "N >= 1".into(),
    );

    let ss = norm2(&vsub(
        &vsub(&model.x_ref, &model.a.matvec(&model.x_ref)),
        &model.b.matvec(&model.u_ref),
    ));
    rep.push(
        "steady_state",
        ss <= STEADY_STATE_TOL,
        ss,
        format!("||(I - A) x_ref - B u_ref|| <= {STEADY_STATE_TOL:e}"),
    );
    let cx = norm2(&model.c.matvec(&model.x_ref));
    rep.push(
        "reference_inside",
        cx < model.t,
        cx,
        format!("||C x_ref|| < t = {}", model.t),
    );

    match spectral_radius(&model.phi()) {
        Ok(rho) => rep.push(
            "closed_loop_stable",
            rho < 1.0,
            rho,
            "spectral radius of A + B K < 1".into(),
        ),
        Err(e) => rep.push("closed_loop_stable", false, f64::NAN, e.to_string()),
    }

    let ctrb = krylov_columns(&model.a, &model.b);
    let rk = rank(&ctrb, RANK_REL_TOL);
    rep.push(
        "controllable",
        rk == nx,
        rk as f64,
        format!("rank [B, AB, ...] = {nx}"),
    );

    let w_ok = psd_check(&model.w);
    rep.push(
        "w_psd",
        w_ok.0,
        w_ok.1,
        "W symmetric PSD (min eigenvalue)".into(),
    );
    let q_ok = psd_check(&model.q);
    rep.push(
        "q_psd",
        q_ok.0,
        q_ok.1,
        "Q symmetric PSD (min eigenvalue)".into(),
    );
    let r_min = if model.r.is_symmetric(SYMMETRY_TOL) {
        linalg::min_eigenvalue(&model.r).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    rep.push(
        "r_pd",
        r_min > 0.0,
        r_min,
        "R symmetric PD (min eigenvalue)".into(),
    );

    match psd_sqrt(&model.q, SYMMETRY_TOL) {
        Ok(q_half) => {
            let obsv = krylov_columns(&model.a.transpose(), &q_half.transpose());
            let rk = rank(&obsv, RANK_REL_TOL);
            rep.push(
                "observable",
                rk == nx,
                rk as f64,
                format!("rank [Q^1/2; Q^1/2 A; ...] = {nx}"),
            );
        }
        Err(e) => rep.push("observable", false, f64::NAN, e.to_string()),
    }

    Ok(rep)
}

fn psd_check(m: &Mat) -> (bool, f64) {
    if !m.is_symmetric(SYMMETRY_TOL) {
        return (false, f64::NAN);
    }
    let lo = linalg::min_eigenvalue(m).unwrap_or(f64::NAN);
    (lo >= -SYMMETRY_TOL, lo)
}

/// `[B, AB, ..., A^{n-1} B]`.
fn krylov_columns(a: &Mat, b: &Mat) -> Mat {
    let n = a.rows();
    let m = b.cols();
    let mut out = Mat::zeros(n, n * m);
    let mut blk = b.clone();
    for i in 0..n {
        out.set_block(0, i * m, &blk);
        blk = a * &blk;
    }
    out
}

/// Solves `X = scale · M X Mᵀ + rhs` for symmetric `rhs`.
///
/// Uses the vectorised Kronecker system when `n²` fits under the Kronecker
/// cap, and a fixed-point iteration otherwise.
pub fn solve_stein(m: &Mat, scale: f64, rhs: &Mat, which: &'static str) -> Result<Mat> {
    let n = m.rows();
    match kron_capped(m, m, linalg::KRON_DIM_CAP) {
        Ok(kk) => {
            let sys = &Mat::identity(n * n) - &kk.scale(scale);
            let lu = Lu::new(&sys).map_err(|e| Error::LyapunovFailure {
                which,
                reason: e.to_string(),
            })?;
            let x = lu.solve(rhs.as_slice());
            Ok(Mat::from_vec(n, n, x)?.symmetrize())
        }
        Err(Error::DimensionOverflow { .. }) => {
            let mut x = rhs.clone();
            let mt = m.transpose();
            for _ in 0..LYAPUNOV_FP_MAX_ITER {
                let next = &(&(m * &x) * &mt).scale(scale) + rhs;
                let change = next.max_abs_diff(&x);
                x = next;
                if !x.is_finite() {
                    break;
                }
                if change <= LYAPUNOV_FP_TOL * x.max_abs().max(1.0) {
                    return Ok(x.symmetrize());
                }
            }
            Err(Error::LyapunovFailure {
                which,
                reason: "fixed-point iteration did not converge".into(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Stabilising DARE solution and the associated LQ-optimal gain
/// `K = -(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lq_gain(model: &SystemModel) -> Result<(Mat, Mat)> {
    model.check_dimensions()?;
    let (a, b, q, r) = (&model.a, &model.b, &model.q, &model.r);
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut last_change = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let pa = &p * a;
        let pb = &p * b;
        let s = r + &(&bt * &pb);
        let gain_num = &bt * &pa;
        let k = Lu::new(&s)?.solve_mat(&gain_num);
        let next = (&(&(&at * &pa) - &(&(&at * &pb) * &k)) + q).symmetrize();
        last_change = next.max_abs_diff(&p);
        p = next;
        if !p.is_finite() {
            break;
        }
        if last_change <= RICCATI_TOL * p.max_abs().max(1.0) {
            let p = kleinman_polish(model, p)?;
            let k = riccati_gain(model, &p)?;
            return Ok((k, p));
        }
    }
    Err(Error::RiccatiNonConvergence {
        iterations: RICCATI_MAX_ITER,
        last_change,
    })
}

fn riccati_gain(model: &SystemModel, p: &Mat) -> Result<Mat> {
    let bt = model.b.transpose();
    let s = &model.r + &(&bt * &(p * &model.b));
    Ok(-&Lu::new(&s)?.solve_mat(&(&bt * &(p * &model.a))))
}

/// A few Newton (Kleinman) steps from a converged fixed-point iterate. The
/// fixed-point change understates the residual when convergence is slow.
fn kleinman_polish(model: &SystemModel, mut p: Mat) -> Result<Mat> {
    let mut res = riccati_residual(model, &p)?;
    for _ in 0..3 {
        let k = riccati_gain(model, &p)?;
        let phi = &model.a + &(&model.b * &k);
        let rhs = &(&(&k.transpose() * &model.r) * &k) + &model.q;
        let Ok(next) = solve_stein(&phi.transpose(), 1.0, &rhs, "Riccati polish") else {
            break;
        };
        let next_res = riccati_residual(model, &next)?;
        if next_res >= res {
            break;
        }
        p = next;
        res = next_res;
    }
    Ok(p)
}

/// Residuals of every matrix equation the precomputation solves (max
/// absolute elementwise).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residuals {
    pub terminal_cost: f64,
    pub output_energy: f64,
    pub tail_covariance: f64,
    pub riccati: f64,
    pub covariance_ladder: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [
            self.terminal_cost,
            self.output_energy,
            self.tail_covariance,
            self.riccati,
            self.covariance_ladder,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Offline quantities shared read-only by the online controller.
#[derive(Clone, Debug)]
pub struct Precomputed {
    /// `A + B K`.
    pub phi: Mat,
    /// `Φⁱ` for `i = 0..=N`.
    pub phi_powers: Vec<Mat>,
    /// Predicted state covariances `X̂_0..X̂_N` (`X̂_0 = 0`).
    pub xhat: Vec<Mat>,
    /// Terminal cost weight: `P = Φᵀ P Φ + Kᵀ R K + Q`.
    pub p: Mat,
    /// Discounted output energy: `P̃ = γ Φᵀ P̃ Φ + CᵀC`.
    pub p_tilde: Mat,
    /// Discounted tail covariance: `S̃ = γ Φ S̃ Φᵀ + γ^{N+1}/(1-γ) W + γᴺ X̂_N`.
    pub s_tilde: Mat,
    pub k_lq: Mat,
    pub p_dare: Mat,
    /// Stacked `Aⁱ`, `i = 0..=N`; `(N+1)·n_x × n_x`.
    pub gamma_pred: Mat,
    /// Maps the stacked input sequence to stacked nominal states;
    /// `(N+1)·n_x × N·n_u`.
    pub theta_pred: Mat,
    /// `tr(W P)`.
    pub tr_wp: f64,
    pub ctc: Mat,
    /// `(I - γΦ)⁻ᵀ CᵀC x_ref`, the cross-term direction of the terminal term.
    pub cross_dir: Vec<f64>,
    /// `Σ_{i<N} γⁱ tr(CᵀC X̂_i)`.
    pub trace_sum: f64,
    /// `tr(CᵀC S̃)`.
    pub tail_trace: f64,
    /// Objective Hessian of the condensed MPC problem.
    pub cost_hessian: Mat,
    /// Block-diagonal state weights `diag(Q, ..., Q, P)`.
    pub state_weights: Mat,
    /// Block-diagonal input weights `diag(R, ..., R)`.
    pub input_weights: Mat,
    /// Block-diagonal constraint weights
    /// `diag(CᵀC, γ CᵀC, ..., γ^{N-1} CᵀC, γᴺ P̃) / t²`.
    pub constraint_weights: Mat,
    /// Hessian of the constraint scalar in the stacked inputs.
    pub constraint_hessian: Mat,
    pub residuals: Residuals,
}

/// Runs every offline computation. Assumes [`validate`] has passed; a
/// singular Lyapunov system here means it was skipped.
pub fn precompute(model: &SystemModel) -> Result<Precomputed> {
    model.check_dimensions()?;
    let nx = model.nx();
    let nu = model.nu();
    let n = model.horizon;
    let g = model.gamma;
    let t2 = model.t * model.t;

    let phi = model.phi();
    let phi_t = phi.transpose();
    let ctc = model.ctc();

    let mut phi_powers = Vec::with_capacity(n + 1);
    phi_powers.push(Mat::identity(nx));
    for i in 0..n {
        phi_powers.push(&phi_powers[i] * &phi);
    }

    let mut xhat = Vec::with_capacity(n + 1);
    xhat.push(Mat::zeros(nx, nx));
    for i in 0..n {
        xhat.push((&(&(&phi * &xhat[i]) * &phi_t) + &model.w).symmetrize());
    }

    let ktrk = &(&model.k.transpose() * &model.r) * &model.k;
    let p_rhs = &(&ktrk + &model.q);
    let p = solve_stein(&phi_t, 1.0, p_rhs, "P")?;
    let p_tilde = solve_stein(&phi_t, g, &ctc, "P_tilde")?;
    let s_rhs = &model.w.scale(g.powi(n as i32 + 1) / (1.0 - g)) + &xhat[n].scale(g.powi(n as i32));
    let s_tilde = solve_stein(&phi, g, &s_rhs, "S_tilde")?;

    let (k_lq, p_dare) = lq_gain(model)?;

    let i_minus = &Mat::identity(nx) - &phi.scale(g);
    let cross_dir = Lu::new(&i_minus.transpose())
        .map_err(|e| Error::LyapunovFailure {
            which: "I - gamma Phi",
            reason: e.to_string(),
        })?
        .solve(&ctc.matvec(&model.x_ref));

    let trace_sum = (0..n)
        .map(|i| g.powi(i as i32) * (&ctc * &xhat[i]).trace())
        .sum();
    let tail_trace = (&ctc * &s_tilde).trace();
    let tr_wp = (&model.w * &p).trace();

    // Prediction matrices: xbar = Γ x + Θ m.
    let mut gamma_pred = Mat::zeros((n + 1) * nx, nx);
    let mut a_pow = Mat::identity(nx);
    let mut a_pows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        gamma_pred.set_block(i * nx, 0, &a_pow);
        a_pows.push(a_pow.clone());
        a_pow = &a_pow * &model.a;
    }
    let mut theta_pred = Mat::zeros((n + 1) * nx, n * nu);
    for i in 1..=n {
        for j in 0..i {
            theta_pred.set_block(i * nx, j * nu, &(&a_pows[i - 1 - j] * &model.b));
        }
    }

    let mut state_weights = Mat::zeros((n + 1) * nx, (n + 1) * nx);
    let mut constraint_weights = Mat::zeros((n + 1) * nx, (n + 1) * nx);
    for i in 0..n {
        state_weights.set_block(i * nx, i * nx, &model.q);
        constraint_weights.set_block(i * nx, i * nx, &ctc.scale(g.powi(i as i32) / t2));
    }
    state_weights.set_block(n * nx, n * nx, &p);
    constraint_weights.set_block(n * nx, n * nx, &p_tilde.scale(g.powi(n as i32) / t2));
    let mut input_weights = Mat::zeros(n * nu, n * nu);
    for i in 0..n {
        input_weights.set_block(i * nu, i * nu, &model.r);
    }
    let theta_t = theta_pred.transpose();
    let cost_hessian =
        (&(&(&theta_t * &state_weights) * &theta_pred) + &input_weights).symmetrize();
    let constraint_hessian = (&(&theta_t * &constraint_weights) * &theta_pred).symmetrize();

    let residuals = Residuals {
        terminal_cost: (&(&p - &(&(&phi_t * &p) * &phi)) - p_rhs).max_abs(),
        output_energy: (&(&p_tilde - &(&(&phi_t * &p_tilde) * &phi).scale(g)) - &ctc).max_abs(),
        tail_covariance: (&(&s_tilde - &(&(&phi * &s_tilde) * &phi_t).scale(g)) - &s_rhs).max_abs(),
        riccati: riccati_residual(model, &p_dare)?,
        covariance_ladder: (0..n)
            .map(|i| (&(&xhat[i + 1] - &(&(&phi * &xhat[i]) * &phi_t)) - &model.w).max_abs())
            .fold(0.0, f64::max),
    };

    Ok(Precomputed {
        phi,
        phi_powers,
        xhat,
        p,
        p_tilde,
        s_tilde,
        k_lq,
        p_dare,
        gamma_pred,
        theta_pred,
        tr_wp,
        ctc,
        cross_dir,
        trace_sum,
        tail_trace,
        cost_hessian,
        state_weights,
        input_weights,
        constraint_weights,
        constraint_hessian,
        residuals,
    })
}

/// Max-abs residual of `AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q − P`.
pub fn riccati_residual(model: &SystemModel, p: &Mat) -> Result<f64> {
    let (a, b) = (&model.a, &model.b);
    let at = a.transpose();
    let bt = b.transpose();
    let s = &model.r + &(&bt * &(p * b));
    let k = Lu::new(&s)?.solve_mat(&(&bt * &(p * a)));
    let rhs = &(&(&(&at * &(p * a)) - &(&(&at * &(p * b)) * &k)) + &model.q) - p;
    Ok(rhs.max_abs())
}

impl Precomputed {
    /// Stacked nominal states `x̄_0..x̄_N` for initial state `x` and stacked
    /// inputs `m`.
    pub fn predict(&self, x: &[f64], m: &[f64]) -> Vec<Vec<f64>> {
        let nx = x.len();
        let mut stacked = self.gamma_pred.matvec(x);
        linalg::axpy(1.0, &self.theta_pred.matvec(m), &mut stacked);
        stacked.chunks(nx).map(<[f64]>::to_vec).collect()
    }

    pub fn horizon(&self) -> usize {
        self.xhat.len() - 1
    }
}

/// Closed-form `Σ_k γᵏ E‖C x_k‖² / t²` for the closed loop
/// `x_{k+1} = A x_k + B (gain (x_k − x_ref) + u_ref) + ω_k` started at `x0`.
pub fn discounted_output_energy(model: &SystemModel, gain: &Mat, x0: &[f64]) -> Result<f64> {
    model.check_dimensions()?;
    if gain.shape() != model.k.shape() || x0.len() != model.nx() {
        return Err(Error::DimensionMismatch(
            "gain or initial state has the wrong shape".into(),
        ));
    }
    let nx = model.nx();
    let g = model.gamma;
    let t2 = model.t * model.t;
    let phi = &model.a + &(&model.b * gain);
    let ctc = model.ctc();
    let energy = solve_stein(&phi.transpose(), g, &ctc, "output energy")?;
    // Σ_{k≥0} γᵏ X_k with X_0 = 0 solves S = γ Φ S Φᵀ + γ/(1-γ) W.
    let cov = solve_stein(&phi, g, &model.w.scale(g / (1.0 - g)), "covariance sum")?;
    let i_minus = &Mat::identity(nx) - &phi.scale(g);
    let cross = Lu::new(&i_minus.transpose())?.solve(&ctc.matvec(&model.x_ref));
    let d = vsub(x0, &model.x_ref);
    let mean =
        energy.quad_form(&d) + 2.0 * dot(&cross, &d) + ctc.quad_form(&model.x_ref) / (1.0 - g);
    Ok((mean + (&ctc * &cov).trace()) / t2)
}
