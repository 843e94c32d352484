use std::path::Path;

use super::{
    ensure_dir, par_trials, trial_seed, ExperimentKind, ExperimentReport, Gate, ReportBuilder,
};
use crate::config::ExperimentConfig;
use crate::data::generate_dataset;
use crate::error::Result;
use crate::krr::{flow_rate, krr_flow_closed, krr_flow_integrated, solve_krr_dual, KrrTrajectory};

/// Closed-form and Runge-Kutta trajectories must agree to this.
pub const FLOW_AGREEMENT_TOL: f64 = 1e-6;
/// Runge-Kutta step as a fraction of `1/(κ²‖K‖ + λ)`.
const STEP_FRACTION: f64 = 0.02;

struct Instance {
    max_disagreement: f64,
    /// `max_t ‖u(t) − u*‖ − e^{−rt}‖u*‖`, over both trajectories.
    worst_decay_excess: f64,
    final_gap: f64,
    horizon: f64,
    rate: f64,
    u_star_norm: f64,
    traj: Option<KrrTrajectory>,
}

/// Runs the KRR gradient flow on `trials` random instances (default 10).
///
/// Gates: (a) closed form against RK4 within [`FLOW_AGREEMENT_TOL`];
/// (b) `‖u(t) − u*‖ ≤ e^{−(κ²Λ₀+λ)t}‖u*‖` at every stored time, up to
/// `1e-10·‖u*‖` of round-off; (c) `‖u(T) − u*‖ ≤ eps` at
/// `T = ln(‖u*‖/eps)/(κ²Λ₀ + λ)`.
pub fn run_krr_flow(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let trials = cfg.trials.unwrap_or(10);
    let mut rb = ReportBuilder::new(ExperimentKind::KrrFlow, cfg, trials);
    let target = cfg.eps;
    let kappa = cfg.kappa;

    let instances = par_trials(trials, |i| {
        let ds = generate_dataset(cfg.n, cfg.d, trial_seed(cfg, 0, i as u64), cfg.delta_sep)?;
        let family = cfg.family();
        let k = family.exact_kernel(&ds.x)?;
        let kv = family.exact_kernel_vec(ds.test_point()?, &ds.x)?;
        let lambda = cfg.ridge(k.spectral_norm(), cfg.m);
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa)?;
        let rate = flow_rate(&k, lambda, kappa);
        let u_star_norm = sol.u_star.norm();
        let horizon = (u_star_norm / target).ln().max(0.0) / rate;
        let dt = STEP_FRACTION / (kappa * kappa * k.spectral_norm() + lambda);
        let rk = krr_flow_integrated(&k, &ds.y, lambda, kappa, dt, horizon, Some(&kv))?;
        let cf = krr_flow_closed(&k, &ds.y, lambda, kappa, &rk.times, Some(&kv))?;
        let mut max_disagreement = 0.0_f64;
        let mut worst_decay_excess = f64::NEG_INFINITY;
        let slack = 1e-10 * u_star_norm;
        for j in 0..rk.len() {
            max_disagreement = max_disagreement
                .max((&rk.u_ntk[j] - &cf.u_ntk[j]).amax())
                .max((rk.u_ntk_test[j] - cf.u_ntk_test[j]).abs());
            let envelope = (-rate * rk.times[j]).exp() * u_star_norm + slack;
            for u in [&rk.u_ntk[j], &cf.u_ntk[j]] {
                worst_decay_excess = worst_decay_excess.max((u - &sol.u_star).norm() - envelope);
            }
        }
        let last = rk.len() - 1;
        let final_gap = (&cf.u_ntk[last] - &sol.u_star)
            .norm()
            .max((&rk.u_ntk[last] - &sol.u_star).norm());
        Ok(Instance {
            max_disagreement,
            worst_decay_excess,
            final_gap,
            horizon,
            rate,
            u_star_norm,
            traj: (i == 0).then_some(cf),
        })
    })?;

    let collect = |f: fn(&Instance) -> f64| instances.iter().map(f).collect::<Vec<f64>>();
    let disagreement = collect(|i| i.max_disagreement);
    let excess = collect(|i| i.worst_decay_excess);
    let gaps = collect(|i| i.final_gap);
    let max_of = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    rb.metric("max_disagreement", disagreement.clone());
    rb.metric("worst_decay_excess", excess.clone());
    rb.metric("final_gap", gaps.clone());
    rb.metric("horizon", collect(|i| i.horizon));
    rb.metric("rate", collect(|i| i.rate));
    rb.metric("u_star_norm", collect(|i| i.u_star_norm));
    rb.gate(Gate::le(
        "closed_vs_rk4",
        max_of(&disagreement),
        FLOW_AGREEMENT_TOL,
    ));
    rb.gate(Gate::le("decay_envelope_excess", max_of(&excess), 0.0));
    rb.gate(Gate::le("final_gap", max_of(&gaps), target));

    if let (Some(dir), Some(traj)) = (out, instances.first().and_then(|i| i.traj.as_ref())) {
        traj.write_csv(dir.join("trajectory.csv"))?;
    }
    Ok(rb.finish())
}
