//! Closed-loop execution of the controller: measure, update the budget,
//! solve, apply the first input, and draw the next disturbance.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;

use crate::constraint::{reconstruct_disturbance, update_epsilon};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, norm2, psd_sqrt, vadd, vsub, Mat};
use crate::model::{Precomputed, SystemModel};
use crate::qcqp::{min_constraint_value, mpc_problem, solve_mpc, MpcSolution};

/// Redraw cap for random initial states that are infeasible at `k = 0`.
pub const MAX_INIT_DRAWS: usize = 1000;
/// Tolerance of the debug-build check that the disturbance recovered from
/// the measured state matches the one actually drawn.
pub const OMEGA_CHECK_TOL: f64 = 1e-12;

/// Zero-mean, unit-variance scalar noise used by [`SamplerKind::Custom`].
pub type StandardNoise = fn(&mut ChaCha8Rng) -> f64;

#[derive(Clone, Copy, Debug)]
pub enum SamplerKind {
    /// `ω = L z` with `z` standard normal (Box–Muller).
    Gaussian,
    /// `ω = L z` with each `z_i` drawn from a user generator that must have
    /// zero mean and unit variance.
    Custom(StandardNoise),
    /// `ω ≡ 0`.
    Zero,
}

/// Seeded i.i.d. disturbance source with second moment `W = L Lᵀ`.
///
/// Each `(seed, stream)` pair selects an independent ChaCha8 stream, so
/// ensembles are reproducible regardless of how runs are scheduled.
#[derive(Clone, Debug)]
pub struct DisturbanceSampler {
    pub kind: SamplerKind,
    pub w_factor: Mat,
    pub seed: u64,
    pub stream: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl DisturbanceSampler {
    pub fn new(kind: SamplerKind, w: &Mat, seed: u64, stream: u64) -> Result<Self> {
        // Singular W has no Cholesky factor; any F with F Fᵀ = W will do.
        let w_factor = match cholesky(w) {
            Ok(l) => l,
            Err(_) => psd_sqrt(w, 1e-12)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            kind,
            w_factor,
            seed,
            stream,
            rng,
            spare: None,
        })
    }

    pub fn gaussian(w: &Mat, seed: u64, stream: u64) -> Result<Self> {
        Self::new(SamplerKind::Gaussian, w, seed, stream)
    }

    /// Uniform on `(0, 1]`.
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * self.uniform();
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let n = self.w_factor.rows();
        match self.kind {
            SamplerKind::Zero => vec![0.0; n],
            SamplerKind::Gaussian => {
                let z = self.standard_normal_vec(n);
                self.w_factor.matvec(&z)
            }
            SamplerKind::Custom(noise) => {
                let z: Vec<f64> = (0..n).map(|_| noise(&mut self.rng)).collect();
                self.w_factor.matvec(&z)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MpcState {
    pub k: usize,
    pub x: Vec<f64>,
    pub eps: f64,
    /// Optimal solution from `k − 1`.
    pub prev: Option<MpcSolution>,
    pub prev_x: Option<Vec<f64>>,
    pub prev_u: Option<Vec<f64>>,
    last_omega: Option<Vec<f64>>,
}

impl MpcState {
    pub fn initial(x0: Vec<f64>, eps0: f64) -> Self {
        Self {
            k: 0,
            x: x0,
            eps: eps0,
            prev: None,
            prev_x: None,
            prev_u: None,
            last_omega: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub eps: f64,
    pub stage_cost: f64,
    pub violation: bool,
    pub j_star: f64,
    pub lambda_star: f64,
    pub constraint_value: f64,
}

pub fn stage_cost(x: &[f64], u: &[f64], model: &SystemModel) -> f64 {
    model.q.quad_form(&vsub(x, &model.x_ref)) + model.r.quad_form(&vsub(u, &model.u_ref))
}

pub fn is_violation(x: &[f64], model: &SystemModel) -> bool {
    norm2(&model.c.matvec(x)) >= model.t
}

/// One pass of the control loop at time `state.k`.
pub fn step(
    state: MpcState,
    model: &SystemModel,
    pre: &Precomputed,
    sampler: &mut DisturbanceSampler,
) -> Result<(MpcState, StepRecord)> {
    let MpcState {
        k,
        x,
        mut eps,
        prev,
        prev_x,
        prev_u,
        last_omega,
    } = state;

    if k > 0 {
        if cfg!(debug_assertions) {
            if let (Some(px), Some(pu), Some(drawn)) = (&prev_x, &prev_u, &last_omega) {
                let recovered = reconstruct_disturbance(&x, px, pu, model);
                let gap = norm2(&vsub(&recovered, drawn));
                debug_assert!(
                    gap <= OMEGA_CHECK_TOL * (1.0 + norm2(&x)),
                    "disturbance reconstruction off by {gap:e} at k = {k}"
                );
            }
        }
        eps = update_epsilon(&x, prev.as_ref(), pre, model)?;
    }

    let sol = solve_mpc(&x, eps, pre, model).map_err(|e| match e {
        Error::Infeasible { .. } => e,
        other => Error::SolverFailure {
            k,
            x: x.clone(),
            eps,
            source: Box::new(other),
        },
    })?;
    let u = sol.first_input().to_vec();
    let omega = sampler.sample();
    let x_next = vadd(&vadd(&model.a.matvec(&x), &model.b.matvec(&u)), &omega);

    let record = StepRecord {
        k,
        stage_cost: stage_cost(&x, &u, model),
        violation: is_violation(&x, model),
        x: x.clone(),
        u: u.clone(),
        eps,
        j_star: sol.j_star,
        lambda_star: sol.lambda_star,
        constraint_value: sol.constraint_value,
    };
    let next = MpcState {
        k: k + 1,
        x: x_next,
        eps,
        prev: Some(sol),
        prev_x: Some(x),
        prev_u: Some(u),
        last_omega: Some(omega),
    };
    Ok((next, record))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub seed: u64,
    pub stream: u64,
    pub model_hash: String,
    pub steps: usize,
}

impl TrajectoryLog {
    pub fn average_stage_cost(&self) -> f64 {
        self.records.iter().map(|r| r.stage_cost).sum::<f64>() / self.records.len() as f64
    }

    /// `Σ_k γᵏ 1{‖C x_k‖ ≥ t}` over the logged steps.
    pub fn discounted_violations(&self, gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut total = 0.0;
        for r in &self.records {
            if r.violation {
                total += disc;
            }
            disc *= gamma;
        }
        total
    }

    pub fn final_eps(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eps)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=first.x.len()).map(|i| format!("x_{i}")));
        header.extend((1..=first.u.len()).map(|i| format!("u_{i}")));
        header.extend(
            [
                "eps",
                "stage_cost",
                "violation",
                "J_star",
                "lambda_star",
                "constraint_value",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.k.to_string()];
            row.extend(r.x.iter().map(f64::to_string));
            row.extend(r.u.iter().map(f64::to_string));
            row.push(r.eps.to_string());
            row.push(r.stage_cost.to_string());
            row.push(u8::from(r.violation).to_string());
            row.push(r.j_star.to_string());
            row.push(r.lambda_star.to_string());
            row.push(r.constraint_value.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run(
    model: &SystemModel,
    pre: &Precomputed,
    x0: &[f64],
    eps0: f64,
    steps: usize,
    sampler: &mut DisturbanceSampler,
) -> Result<TrajectoryLog> {
    if x0.len() != model.nx() {
        return Err(Error::DimensionMismatch(format!(
            "initial state of length {} for n_x = {}",
            x0.len(),
            model.nx()
        )));
    }
    let mut state = MpcState::initial(x0.to_vec(), eps0);
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, rec) = step(state, model, pre, sampler)?;
        records.push(rec);
        state = next;
    }
    Ok(TrajectoryLog {
        records,
        seed: sampler.seed,
        stream: sampler.stream,
        model_hash: model.content_hash(),
        steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitPolicy {
    Fixed(Vec<f64>),
    /// `x0 ~ N(0, I)`, redrawn while infeasible at `k = 0`.
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: u64,
    pub x0: Vec<f64>,
    /// Initial-state draws used (1 for a fixed initial state).
    pub init_draws: usize,
    pub avg_cost: f64,
    pub discounted_violations: f64,
    pub final_eps: f64,
    pub active_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub avg_cost: f64,
    pub avg_cost_stderr: f64,
    #[serde(rename = "V_hat")]
    pub v_hat: f64,
    #[serde(rename = "V_hat_stderr")]
    pub v_hat_stderr: f64,
    #[serde(rename = "trWP")]
    pub tr_wp: f64,
    pub e: f64,
    pub eps0: f64,
    pub runs: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub seed: u64,
    pub model_hash: String,
    pub version: &'static str,
    pub per_run: Vec<RunSummary>,
}

/// Mean and standard error of the mean; the error is NaN for one sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct MonteCarloConfig {
    pub init: InitPolicy,
    pub eps0: f64,
    pub steps: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub kind: SamplerKind,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

/// Initial state of the fixed-start experiment (B).
pub const EXPERIMENT_B_X0: [f64; 2] = [-1.1130, 1.1156];

/// Replication presets for the example system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    /// 100 runs of 500 steps from random feasible initial states; estimates
    /// the long-run average stage cost.
    A,
    /// 1000 runs of 100 steps from a fixed initial state; estimates the
    /// discounted violation sum.
    B,
}

impl Experiment {
    pub fn config(self, model: &SystemModel, base_seed: u64) -> MonteCarloConfig {
        let (init, steps, runs) = match self {
            Experiment::A => (InitPolicy::StandardNormal, 500, 100),
            Experiment::B => (InitPolicy::Fixed(EXPERIMENT_B_X0.to_vec()), 100, 1000),
        };
        MonteCarloConfig {
            init,
            eps0: model.e,
            steps,
            runs,
            base_seed,
            kind: SamplerKind::Gaussian,
            workers: None,
        }
    }
}

/// Draws the initial state for one run, or fails after [`MAX_INIT_DRAWS`]
/// infeasible draws.
pub fn initial_state(
    init: &InitPolicy,
    eps0: f64,
    model: &SystemModel,
    pre: &Precomputed,
    sampler: &mut DisturbanceSampler,
) -> Result<(Vec<f64>, usize)> {
    match init {
        InitPolicy::Fixed(x0) => Ok((x0.clone(), 1)),
        InitPolicy::StandardNormal => {
            for draw in 1..=MAX_INIT_DRAWS {
                let x0 = sampler.standard_normal_vec(model.nx());
                let p = mpc_problem(&x0, eps0, pre, model)?;
                if min_constraint_value(&p)? <= eps0 {
                    return Ok((x0, draw));
                }
            }
            Err(Error::InitialStateExhausted {
                attempts: MAX_INIT_DRAWS,
            })
        }
    }
}

pub fn run_one(
    model: &SystemModel,
    pre: &Precomputed,
    cfg: &MonteCarloConfig,
    index: u64,
) -> Result<(RunSummary, TrajectoryLog)> {
    let mut sampler = DisturbanceSampler::new(cfg.kind, &model.w, cfg.base_seed, index)?;
    let (x0, init_draws) = initial_state(&cfg.init, cfg.eps0, model, pre, &mut sampler)?;
    let log = run(model, pre, &x0, cfg.eps0, cfg.steps, &mut sampler)?;
    let summary = RunSummary {
        run: index,
        x0,
        init_draws,
        avg_cost: log.average_stage_cost(),
        discounted_violations: log.discounted_violations(model.gamma),
        final_eps: log.final_eps(),
        active_steps: log.records.iter().filter(|r| r.lambda_star > 0.0).count(),
    };
    Ok((summary, log))
}

pub fn monte_carlo(
    model: &SystemModel,
    pre: &Precomputed,
    cfg: &MonteCarloConfig,
) -> Result<EnsembleSummary> {
    if cfg.runs == 0 || cfg.steps == 0 {
        return Err(Error::DimensionMismatch(
            "monte carlo needs at least one run and one step".into(),
        ));
    }
    let work = || -> Result<Vec<RunSummary>> {
        (0..cfg.runs as u64)
            .into_par_iter()
            .map(|i| run_one(model, pre, cfg, i).map(|(s, _)| s))
            .collect()
    };
    let per_run = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?
            .install(work)?,
        None => work()?,
    };
    let costs: Vec<f64> = per_run.iter().map(|r| r.avg_cost).collect();
    let viols: Vec<f64> = per_run.iter().map(|r| r.discounted_violations).collect();
    let (avg_cost, avg_cost_stderr) = mean_stderr(&costs);
    let (v_hat, v_hat_stderr) = mean_stderr(&viols);
    Ok(EnsembleSummary {
        avg_cost,
        avg_cost_stderr,
        v_hat,
        v_hat_stderr,
        tr_wp: pre.tr_wp,
        e: model.e,
        eps0: cfg.eps0,
        runs: cfg.runs,
        steps: cfg.steps,
        seed: cfg.base_seed,
        model_hash: model.content_hash(),
        version: env!("CARGO_PKG_VERSION"),
        per_run,
    })
}
