//! Riemannian trust-region method with a Steihaug-Toint truncated CG inner
//! solver, specialized to the factorized subproblem on the oblique manifold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oblique::{retract, Evaluation, Factor, SubproblemContext, TangentVector};

/// Maximum number of halvings in the warm-direction curvilinear search.
pub const WARM_MAX_HALVINGS: usize = 25;

/// Default ceiling on CG iterations per trust-region step. The certificate of
/// tight relaxations has eigenvalues near zero, so exact model solves stall.
pub const DEFAULT_MAX_INNER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionParams {
    /// Maximum radius; `None` means `sqrt(sum n_k)`.
    pub delta_bar: Option<f64>,
    /// Initial radius; `None` means `delta_bar / 8`.
    pub delta0: Option<f64>,
    pub rho_prime: f64,
    pub kappa: f64,
    pub theta: f64,
    pub max_outer: usize,
    pub grad_tol: f64,
    /// CG iteration cap; `None` means `min(2 * (total rows) * (max p), DEFAULT_MAX_INNER)`.
    pub max_inner_dim: Option<usize>,
}

impl Default for TrustRegionParams {
    fn default() -> Self {
        Self {
            delta_bar: None,
            delta0: None,
            rho_prime: 0.1,
            kappa: 0.1,
            theta: 1.0,
            max_outer: 200,
            grad_tol: 1e-6,
            max_inner_dim: None,
        }
    }
}

/// Parameters with problem-dependent defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedParams {
    pub delta_bar: f64,
    pub delta0: f64,
    pub rho_prime: f64,
    pub kappa: f64,
    pub theta: f64,
    pub max_outer: usize,
    pub grad_tol: f64,
    pub max_inner_dim: usize,
}

impl TrustRegionParams {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.rho_prime > 0.0 && self.rho_prime < 0.25) {
            return bad(format!(
                "rho_prime must lie in (0, 1/4), got {}",
                self.rho_prime
            ));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad(format!("kappa must lie in (0, 1), got {}", self.kappa));
        }
        if !(self.theta > 0.0) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.grad_tol >= 0.0) {
            return bad(format!(
                "grad_tol must be nonnegative, got {}",
                self.grad_tol
            ));
        }
        if let Some(db) = self.delta_bar {
            if !(db > 0.0) {
                return bad(format!("delta_bar must be positive, got {db}"));
            }
        }
        if let Some(d0) = self.delta0 {
            if !(d0 > 0.0) {
                return bad(format!("delta0 must be positive, got {d0}"));
            }
            if let Some(db) = self.delta_bar {
                if d0 > db {
                    return bad(format!("delta0 = {d0} exceeds delta_bar = {db}"));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, y: &Factor) -> Result<ResolvedParams> {
        self.validate()?;
        let rows: usize = y.block_sizes().iter().sum();
        let pmax = y.factor_sizes().into_iter().max().unwrap_or(1);
        let delta_bar = self.delta_bar.unwrap_or((rows as f64).sqrt());
        let delta0 = self.delta0.unwrap_or(delta_bar / 8.0);
        if delta0 > delta_bar {
            return Err(Error::InvalidParameter(format!(
                "delta0 = {delta0} exceeds delta_bar = {delta_bar}"
            )));
        }
        Ok(ResolvedParams {
            delta_bar,
            delta0,
            rho_prime: self.rho_prime,
            kappa: self.kappa,
            theta: self.theta,
            max_outer: self.max_outer,
            grad_tol: self.grad_tol,
            max_inner_dim: self
                .max_inner_dim
                .unwrap_or((2 * rows * pmax).min(DEFAULT_MAX_INNER))
                .max(1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    IterationCap,
    RadiusCollapse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerReport {
    pub grad_norm: f64,
    pub outer_iterations: usize,
    pub cg_iterations: usize,
    pub termination: Termination,
    pub value: f64,
    /// Whether the warm-direction search found a decrease.
    pub warm_step_accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStop {
    ResidualTolerance,
    NegativeCurvature,
    Boundary,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub step: TangentVector,
    /// Hessian applied to `step`.
    pub hess_step: TangentVector,
    pub iterations: usize,
    pub stop: CgStop,
}

impl CgResult {
    /// `<g, s> + 1/2 <s, H s>`: change of the quadratic model.
    pub fn model_change(&self, grad: &TangentVector) -> f64 {
        grad.inner(&self.step) + 0.5 * self.step.inner(&self.hess_step)
    }

    pub fn hit_boundary(&self) -> bool {
        matches!(self.stop, CgStop::Boundary | CgStop::NegativeCurvature)
    }
}

/// Steihaug-Toint truncated CG on `min <g, s> + 1/2 <s, H s>` subject to `||s|| <= delta`.
///
/// Stops on negative curvature or a boundary crossing (returning the
/// boundary point along the current direction), or once the residual drops
/// below `min(kappa, ||g||^theta) ||g||`.
pub fn truncated_cg<H>(
    mut hess: H,
    grad: &TangentVector,
    delta: f64,
    kappa: f64,
    theta: f64,
    max_iter: usize,
) -> Result<CgResult>
where
    H: FnMut(&TangentVector) -> Result<TangentVector>,
{
    let mut eta = grad.scaled(0.0);
    let mut h_eta = eta.clone();
    let mut r = grad.clone();
    let r0 = r.norm();
    let target = r0 * kappa.min(r0.powf(theta));
    let mut rr = r.inner(&r);
    let mut d = r.scaled(-1.0);
    // Norms along the path, maintained by recurrence.
    let (mut e_e, mut e_d, mut d_d) = (0.0, 0.0, rr);
    let delta_sq = delta * delta;

    if r0 == 0.0 {
        return Ok(CgResult {
            step: eta,
            hess_step: h_eta,
            iterations: 0,
            stop: CgStop::ResidualTolerance,
        });
    }

    for j in 0..max_iter {
        let hd = hess(&d)?;
        let d_hd = d.inner(&hd);
        let alpha = rr / d_hd;
        let e_e_new = e_e + 2.0 * alpha * e_d + alpha * alpha * d_d;

        if d_hd <= 0.0 || e_e_new >= delta_sq {
            let tau = (-e_d + (e_d * e_d + d_d * (delta_sq - e_e)).max(0.0).sqrt()) / d_d;
            eta.axpy(tau, &d);
            h_eta.axpy(tau, &hd);
            return Ok(CgResult {
                step: eta,
                hess_step: h_eta,
                iterations: j + 1,
                stop: if d_hd <= 0.0 {
                    CgStop::NegativeCurvature
                } else {
                    CgStop::Boundary
                },
            });
        }

        eta.axpy(alpha, &d);
        h_eta.axpy(alpha, &hd);
        e_e = e_e_new;
        r.axpy(alpha, &hd);
        let rr_new = r.inner(&r);
        if rr_new.sqrt() <= target {
            return Ok(CgResult {
                step: eta,
                hess_step: h_eta,
                iterations: j + 1,
                stop: CgStop::ResidualTolerance,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        let mut d_new = r.scaled(-1.0);
        d_new.axpy(beta, &d);
        d = d_new;
        e_d = beta * (e_d + alpha * d_d);
        d_d = rr + beta * beta * d_d;
    }
    Ok(CgResult {
        step: eta,
        hess_step: h_eta,
        iterations: max_iter,
        stop: CgStop::IterationCap,
    })
}

fn check_finite(eval: &Evaluation) -> Result<()> {
    if !eval.value.is_finite() {
        return Err(Error::NonFinite("subproblem objective".into()));
    }
    if !eval.grad_norm.is_finite() {
        return Err(Error::NonFinite("subproblem gradient".into()));
    }
    Ok(())
}

/// Slack below which objective changes are indistinguishable from rounding.
pub fn rho_regularization(value: f64) -> f64 {
    1e3 * f64::EPSILON * value.abs().max(1.0)
}

/// Minimizes the factorized subproblem from `y0` by Riemannian trust regions.
///
/// When `warm_direction` is given, a curvilinear backtracking search along
/// `retract(y0, t U)` (halving `t` from 1) runs first.
pub fn solve_subproblem(
    ctx: &SubproblemContext<'_>,
    y0: Factor,
    warm_direction: Option<&TangentVector>,
    params: &TrustRegionParams,
) -> Result<(Factor, InnerReport)> {
    let p = params.resolve(&y0)?;
    let mut y = y0;
    let mut eval = ctx.evaluate(&y)?;
    check_finite(&eval)?;

    let mut warm_step_accepted = false;
    if let Some(u) = warm_direction {
        let mut t = 1.0;
        for _ in 0..=WARM_MAX_HALVINGS {
            if let Ok(cand) = retract(&y, &u.scaled(t)) {
                let ev = ctx.evaluate(&cand)?;
                if ev.value.is_finite() && ev.value < eval.value {
                    y = cand;
                    eval = ev;
                    warm_step_accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        log::trace!("warm search accepted = {warm_step_accepted}, t = {t:e}");
    }

    let mut delta = p.delta0;
    let min_delta = p.delta_bar * f64::EPSILON;
    let mut cg_total = 0;
    let mut iter = 0;
    let termination = loop {
        if eval.grad_norm <= p.grad_tol {
            break Termination::GradientTolerance;
        }
        if iter >= p.max_outer {
            break Termination::IterationCap;
        }
        if delta < min_delta {
            break Termination::RadiusCollapse;
        }
        iter += 1;

        let grad = eval.grad.clone();
        let cg = truncated_cg(
            |d| ctx.hessian_at(&y, &eval, d),
            &grad,
            delta,
            p.kappa,
            p.theta,
            p.max_inner_dim,
        )?;
        cg_total += cg.iterations;
        let model_decrease = -cg.model_change(&grad);

        let cand = match retract(&y, &cg.step) {
            Ok(c) => c,
            Err(Error::DegenerateRetraction { .. }) => {
                delta /= 4.0;
                continue;
            }
            Err(e) => return Err(e),
        };
        let cand_eval = ctx.evaluate(&cand)?;
        let reg = rho_regularization(eval.value);
        let rho = if cand_eval.value.is_finite() && model_decrease >= 0.0 {
            (eval.value - cand_eval.value + reg) / (model_decrease + reg)
        } else {
            f64::NEG_INFINITY
        };

        if rho < 0.25 {
            delta /= 4.0;
        } else if rho > 0.75 && cg.hit_boundary() {
            delta = (2.0 * delta).min(p.delta_bar);
        }
        log::trace!(
            "rtr {iter}: f {:.12e} |g| {:.3e} delta {delta:.3e} rho {rho:.3} cg {} {:?}",
            eval.value,
            eval.grad_norm,
            cg.iterations,
            cg.stop
        );
        if rho > p.rho_prime {
            y = cand;
            eval = cand_eval;
            check_finite(&eval)?;
        }
    };

    Ok((
        y,
        InnerReport {
            grad_norm: eval.grad_norm,
            outer_iterations: iter,
            cg_iterations: cg_total,
            termination,
            value: eval.value,
            warm_step_accepted,
        },
    ))
}
