//! Per-finger damped-least-squares fingertip IK. Each chain is solved on its
//! own.

use nalgebra::{Matrix3, Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};

use super::fk::chain_tip;
use super::model::{Chain, HandModel, FINGERS, HAND_JOINTS, JOINTS_PER_FINGER};
use crate::geometry::Vec3;

/// Central-difference step for the numeric Jacobian, radians.
pub const JACOBIAN_STEP: f64 = 1e-6;

// Number of damping doublings tried before an iteration is declared stalled.
const MAX_DAMPING_RETRIES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub lambda: f64,
    /// Residual tolerance, meters.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest joint change per iteration, radians.
    pub step_clamp: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tol: 1e-4,
            max_iter: 100,
            step_clamp: 0.2,
        }
    }
}

impl IkParams {
    pub fn is_valid(&self) -> bool {
        self.lambda > 0.0 && self.tol > 0.0 && self.max_iter > 0 && self.step_clamp > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub joints: [f64; HAND_JOINTS],
    /// Final per-finger tip error norms, meters.
    pub residuals: [f64; FINGERS],
    /// Iterations used by the slowest finger.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerSolution {
    pub joints: [f64; JOINTS_PER_FINGER],
    pub residual: f64,
    pub iterations: usize,
    /// Residual norm after every iteration (first entry is the start).
    pub trace: Vec<f64>,
}

/// Numeric 3x4 tip Jacobian by central differences with step `h`.
pub fn numeric_jacobian(chain: &Chain, q: &[f64; JOINTS_PER_FINGER], h: f64) -> Matrix3x4<f64> {
    let mut jac = Matrix3x4::zeros();
    for j in 0..JOINTS_PER_FINGER {
        let mut plus = *q;
        let mut minus = *q;
        plus[j] += h;
        minus[j] -= h;
        let d = (chain_tip(chain, &plus) - chain_tip(chain, &minus)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

fn dls_step(jac: &Matrix3x4<f64>, err: &Vec3, lambda: f64) -> Option<Vector4<f64>> {
    let jjt = jac * jac.transpose() + Matrix3::identity() * (lambda * lambda);
    let y = jjt.cholesky()?.solve(err);
    Some(jac.transpose() * y)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Solves one chain. When a clamped step fails to reduce the residual the
/// damping is doubled for that iteration and the step retried; if no retry
/// helps the solver stops with the best configuration found.
pub fn solve_finger(
    chain: &Chain,
    target: &Vec3,
    init: &[f64; JOINTS_PER_FINGER],
    params: &IkParams,
) -> FingerSolution {
    let mut q = chain.clamp(init);
    if !finite(&q) {
        q = chain.mid();
    }
    let mut err = target - chain_tip(chain, &q);
    let mut norm = err.norm();
    let mut trace = vec![norm];
    let mut iterations = 0;
    if !target.iter().all(|c| c.is_finite()) {
        return FingerSolution {
            joints: q,
            residual: f64::MAX,
            iterations,
            trace,
        };
    }

    while norm > params.tol && iterations < params.max_iter {
        iterations += 1;
        let jac = numeric_jacobian(chain, &q, JACOBIAN_STEP);
        let mut lambda = params.lambda;
        let mut accepted = None;
        for _ in 0..MAX_DAMPING_RETRIES {
            let Some(mut dq) = dls_step(&jac, &err, lambda) else {
                lambda *= 2.0;
                continue;
            };
            let peak = dq.amax();
            if peak > params.step_clamp {
                dq *= params.step_clamp / peak;
            }
            let cand: [f64; JOINTS_PER_FINGER] = chain.clamp(&std::array::from_fn(|j| q[j] + dq[j]));
            if finite(&cand) {
                let cand_err = target - chain_tip(chain, &cand);
                let cand_norm = cand_err.norm();
                if cand_norm <= norm {
                    accepted = Some((cand, cand_err, cand_norm));
                    break;
                }
            }
            lambda *= 2.0;
        }
        match accepted {
            Some((cand, cand_err, cand_norm)) => {
                let progress = norm - cand_norm;
                q = cand;
                err = cand_err;
                norm = cand_norm;
                trace.push(norm);
                if progress == 0.0 {
                    break;
                }
            }
            None => break,
        }
    }
    FingerSolution {
        joints: q,
        residual: norm,
        iterations,
        trace,
    }
}

/// Solves all four fingertips; `targets` are wrist-frame positions in
/// `[thumb, index, middle, ring]` order.
pub fn ik_fingertips(
    model: &HandModel,
    targets: &[Vec3; FINGERS],
    init: &[f64; HAND_JOINTS],
    params: &IkParams,
) -> IkSolution {
    let mut joints = model.clamp(init);
    let mut residuals = [0.0; FINGERS];
    let mut iterations = 0;
    for (f, chain) in model.chains.iter().enumerate() {
        let sol = solve_finger(chain, &targets[f], &HandModel::finger(&joints, f), params);
        HandModel::set_finger(&mut joints, f, &sol.joints);
        residuals[f] = sol.residual;
        iterations = iterations.max(sol.iterations);
    }
    IkSolution {
        joints,
        residuals,
        iterations,
    }
}
