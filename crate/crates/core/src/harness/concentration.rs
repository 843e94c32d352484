use std::path::Path;

use super::{
    ensure_dir, experiment_dataset, par_trials, required_successes, trial_seed, ExperimentKind,
    ExperimentReport, Gate, ReportBuilder,
};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::kernels::{ntk_gram, ntk_kernel_vec};
use crate::nn::{dynamic_kernel, dynamic_kernel_test_vec, forward_test, init_gaussian};

/// Widths `2⁶ … 2¹²`.
pub const DEFAULT_WIDTHS: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

/// `4n√(ln(n/δ)/m)`, the Frobenius bound on `H(0) − H`.
pub fn kernel_bound(n: usize, m: usize, delta: f64) -> f64 {
    let n = n as f64;
    4.0 * n * ((n / delta).ln() / m as f64).sqrt()
}

/// `√(2n ln(2n/δ)/m)`, the bound on `‖k₀ − k‖₂`.
pub fn kernel_vec_bound(n: usize, m: usize, delta: f64) -> f64 {
    let n = n as f64;
    (2.0 * n * (2.0 * n / delta).ln() / m as f64).sqrt()
}

/// `2κ ln(2m/δ)`, the bound on the initial test prediction.
pub fn init_output_bound(kappa: f64, m: usize, delta: f64) -> f64 {
    2.0 * kappa * (2.0 * m as f64 / delta).ln()
}

/// Checks the three initialization bounds over Gaussian networks at every
/// width; each must hold in at least `(1 − δ) − prob_slack` of the trials.
pub fn run_concentration(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let trials = cfg.trials.unwrap_or(40);
    let widths = cfg
        .m_sweep
        .clone()
        .unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
    let mut rb = ReportBuilder::new(ExperimentKind::Concentration, cfg, trials);
    let ds = experiment_dataset(cfg)?;
    let x_test = ds.test_point()?.clone();
    let k = ntk_gram(&ds.x)?;
    let kv = ntk_kernel_vec(&x_test, &ds.x)?;
    let needed = required_successes(trials, cfg.delta, cfg.prob_slack);
    let n = cfg.n;
    rb.metric("m", widths.iter().map(|m| *m as f64).collect());
    rb.relaxation(format!(
        "each bound must hold in (1 - delta) - prob_slack = {:.3} of trials per width",
        (1.0 - cfg.delta) - cfg.prob_slack
    ));

    let mut rows = Vec::new();
    for (i, &m) in widths.iter().enumerate() {
        let measured = par_trials(trials, |t| {
            let seed = trial_seed(cfg, i as u64, t as u64);
            let net = init_gaussian(m, cfg.d, cfg.kappa, 0.0, seed)?;
            let h = dynamic_kernel(&net, &ds.x)?;
            let k0 = dynamic_kernel_test_vec(&net, &x_test, &ds.x)?;
            Ok((
                h.frobenius_distance(&k),
                (k0 - &kv).norm(),
                forward_test(&net, &x_test)?.abs(),
            ))
        })?;
        let bounds = [
            ("kernel", kernel_bound(n, m, cfg.delta)),
            ("kernel_vec", kernel_vec_bound(n, m, cfg.delta)),
            ("init_output", init_output_bound(cfg.kappa, m, cfg.delta)),
        ];
        for (j, (label, bound)) in bounds.iter().enumerate() {
            let values: Vec<f64> = measured
                .iter()
                .map(|r| match j {
                    0 => r.0,
                    1 => r.1,
                    _ => r.2,
                })
                .collect();
            let hits = values.iter().filter(|v| **v <= *bound).count();
            let worst = values.iter().fold(0.0_f64, |a, b| a.max(*b));
            rows.push((m, *label, *bound, worst, hits));
            rb.metric(format!("{label}_deviation_m{m}"), values);
            rb.scalar(format!("{label}_bound_m{m}"), *bound);
            rb.gate(Gate::ge(
                format!("{label}_bound_holds_m{m}"),
                hits as f64,
                needed as f64,
            ));
        }
    }

    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("concentration.csv"))?;
        w.write_record(["m", "quantity", "bound", "worst", "hits", "trials"])?;
        for (m, label, bound, worst, hits) in rows {
            w.write_record([
                m.to_string(),
                label.to_string(),
                bound.to_string(),
                worst.to_string(),
                hits.to_string(),
                trials.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(rb.finish())
}
