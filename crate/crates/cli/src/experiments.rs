//! Dispatch from prepared scenarios to the core modules.

use mflab_core::gaussian_flow::{equilibrium, mean_field_path, LinearFlowPath};
use mflab_core::moments::{
    covariance_closed_form, default_step, integrate_moments, integrate_moments_through, MomentState,
};
use mflab_core::particles::{run_simulation, Ensemble, NoiseStream, Scheme, StepOptions};
use mflab_core::stability::{
    appendix_inequality_checks, equilibration_distance, linear_fp_stability, mean_field_stability,
    sharpness_diagnostic, StabilityReport,
};
use mflab_core::symmat::spd_check;
use mflab_core::wasserstein::w2_gaussian;
use mflab_core::{Dynamics, Error};
use serde_json::{json, Map, Value};

use crate::csv::{indexed_names, number, upper_names, upper_values, Table};
use crate::scenario::{Experiment, Prepared, SchemeName};

/// One asserted invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub held: bool,
    pub detail: String,
}

/// Result of one experiment, ready to be written out.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: Table,
    pub checks: Vec<Check>,
    pub metrics: Map<String, Value>,
}

impl Outcome {
    fn new(table: Table) -> Self {
        Outcome {
            table,
            checks: Vec::new(),
            metrics: Map::new(),
        }
    }

    fn check(&mut self, name: &'static str, held: bool, detail: String) {
        self.checks.push(Check { name, held, detail });
    }

    fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.held)
    }
}

fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn vec_value(v: &mflab_core::DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| finite(*x)).collect())
}

fn dyn_of(p: &Prepared) -> &Dynamics {
    p.dynamics
        .as_ref()
        .expect("validated scenarios carry a problem")
}

/// Runs the experiment. Core invariant violations surface as [`Error::InvariantViolation`].
pub fn execute(p: &Prepared) -> Result<Outcome, Error> {
    match p.experiment {
        Experiment::Moments => moments(p),
        Experiment::GaussianFlow => gaussian_flow(p),
        Experiment::LinearStability => {
            let dy = dyn_of(p);
            let c0 = p.c0.clone().unwrap_or_else(|| p.inits[0].cov.clone());
            let panels = p.numerics.as_ref().and_then(|n| n.quadrature_panels);
            let r = linear_fp_stability(dy, &c0, &p.inits[0], &p.inits[1], &p.grid, panels)?;
            let mut out = stability(p, r)?;
            out.check(
                "envelope",
                true,
                "W2 within the constant-free envelope".into(),
            );
            Ok(out)
        }
        Experiment::MeanFieldStability => {
            let h = p.numerics.as_ref().and_then(|n| n.h);
            let r = mean_field_stability(dyn_of(p), &p.inits[0], &p.inits[1], &p.grid, h)?;
            stability(p, r)
        }
        Experiment::Equilibration => equilibration(p),
        Experiment::Sharpness => sharpness(p),
        Experiment::Particles => particles(p),
        Experiment::AppendixChecks => appendix(p),
    }
}

fn moments(p: &Prepared) -> Result<Outcome, Error> {
    let dy = dyn_of(p);
    let f0 = &p.inits[0];
    let d = dy.dim();
    let h = p
        .numerics
        .as_ref()
        .and_then(|n| n.h)
        .unwrap_or_else(|| default_step(dy, &f0.cov));
    let init = MomentState::new(0.0, &f0.mu - dy.u0(), f0.cov.clone())?;
    let path = integrate_moments_through(dy, &init, &p.grid, h)?;

    let mut header = vec!["t".to_string()];
    header.extend(indexed_names("delta", d));
    header.extend(upper_names("C", d));
    let mut out = Outcome::new(Table::new(header));
    let mut worst_gap = 0.0f64;
    let mut all_spd = true;
    for st in &path {
        let mut row = vec![st.t];
        row.extend(st.delta.iter());
        row.extend(upper_values(&st.c));
        out.table.push(row);
        let exact = covariance_closed_form(dy, &f0.cov, st.t)?;
        worst_gap = worst_gap.max(st.c.sub(&exact).frobenius_norm() / exact.frobenius_norm());
        all_spd &= spd_check(&st.c, 0.0)?.is_spd;
    }
    out.check(
        "covariance_spd",
        all_spd,
        "C(t) positive definite on the grid".into(),
    );
    out.check(
        "closed_form_agreement",
        worst_gap <= 1e-6,
        format!("max relative Frobenius gap {}", number(worst_gap)),
    );
    let last = path.last().expect("grid is non-empty");
    out.metric("step", h);
    out.metric("closed_form_gap", finite(worst_gap));
    out.metric("final_delta_norm", finite(last.delta.norm()));
    out.metric("final_cov_trace", finite(last.c.trace()));
    Ok(out)
}

fn gaussian_flow(p: &Prepared) -> Result<Outcome, Error> {
    let dy = dyn_of(p);
    let f0 = &p.inits[0];
    let d = dy.dim();
    let c0 = p.c0.clone().unwrap_or_else(|| f0.cov.clone());
    let panels = p.numerics.as_ref().and_then(|n| n.quadrature_panels);
    let mut header = vec!["t".to_string()];
    header.extend(indexed_names("mu", d));
    header.extend(upper_names("Sigma", d));
    let mut out = Outcome::new(Table::new(header));
    let mut states = Vec::with_capacity(p.grid.len());
    let mut all_psd = true;
    let flow = LinearFlowPath::compute(dy, &c0, &p.grid, panels)?;
    for (k, &t) in p.grid.iter().enumerate() {
        let g = if t == 0.0 {
            f0.clone()
        } else {
            flow.state(k, f0)?
        };
        let mut row = vec![t];
        row.extend(g.mu.iter());
        row.extend(upper_values(&g.cov));
        out.table.push(row);
        all_psd &= spd_check(&g.cov, 1e-10)?.is_spd;
        states.push(g);
    }
    out.check(
        "covariance_psd",
        all_psd,
        "Sigma(t) positive semidefinite on the grid".into(),
    );
    if p.c0.is_none() {
        let h = p.numerics.as_ref().and_then(|n| n.h);
        let mf = mean_field_path(dy, f0, &p.grid, h)?;
        let mut worst = 0.0f64;
        for (a, b) in states.iter().zip(&mf) {
            worst = worst.max(w2_gaussian(a, b)?.distance);
        }
        let scale = 1.0 + f0.mu.norm() + f0.cov.frobenius_norm().sqrt();
        out.check(
            "mean_field_agreement",
            worst <= 1e-6 * scale,
            format!("max W2 to the mean-field path {}", number(worst)),
        );
        out.metric("mean_field_gap", finite(worst));
    }
    let last = states.last().expect("grid is non-empty");
    out.metric("final_mean", vec_value(&last.mu));
    out.metric("final_cov_trace", finite(last.cov.trace()));
    Ok(out)
}

fn stability(p: &Prepared, r: StabilityReport) -> Result<Outcome, Error> {
    let mut out = Outcome::new(Table::new(["t", "w2", "envelope", "ratio"]));
    for k in 0..r.t_grid.len() {
        out.table
            .push(vec![r.t_grid[k], r.w2[k], r.envelope[k], r.ratio[k]]);
    }
    let window = p.numerics.as_ref().map_or(0.5, |n| n.fit_window);
    let mode = mflab_core::stability::FitMode::for_sigma(dyn_of(p).sigma());
    let fit = mflab_core::stability::fit_rate(&r.t_grid, &r.w2, window, mode).ok();
    let rate = fit.as_ref().map_or(f64::NAN, |f| f.slope);
    out.table.footer("fitted_rate", number(rate));
    let finite_ratio = r.ratio.iter().all(|q| q.is_finite());
    out.check(
        "ratio_finite",
        finite_ratio,
        "w2/envelope finite on the grid".into(),
    );
    let hi = r.ratio.iter().cloned().fold(0.0, f64::max);
    out.metric("fitted_rate", finite(rate));
    out.metric("fit_mode", format!("{mode:?}"));
    out.metric("fit_truncated", fit.is_some_and(|f| f.truncated));
    out.metric("max_ratio", finite(hi));
    out.metric("final_w2", finite(*r.w2.last().expect("grid is non-empty")));
    Ok(out)
}

fn equilibration(p: &Prepared) -> Result<Outcome, Error> {
    let dy = dyn_of(p);
    let n = p.numerics.as_ref().expect("validated");
    let w = equilibration_distance(dy, &p.inits[0], &p.grid, n.h)?;
    let mut out = Outcome::new(Table::new(["t", "w2"]));
    for (t, w) in p.grid.iter().zip(&w) {
        out.table.push(vec![*t, *w]);
    }
    let last_t = *p.grid.last().expect("grid is non-empty");
    let last_w = *w.last().expect("grid is non-empty");
    let sigma = dy.sigma();
    if last_t >= 30.0 / sigma {
        out.check(
            "equilibrium_reached",
            last_w <= n.tolerance,
            format!(
                "W2 at t={} is {} (tol {})",
                number(last_t),
                number(last_w),
                number(n.tolerance)
            ),
        );
    }
    let eq = equilibrium(dy)?;
    out.metric("final_w2", finite(last_w));
    out.metric("equilibrium_mean", vec_value(&eq.mu));
    out.metric(
        "equilibrium_cov",
        Value::Array(eq.cov.upper_triangle().into_iter().map(finite).collect()),
    );
    Ok(out)
}

fn sharpness(p: &Prepared) -> Result<Outcome, Error> {
    let h = p.numerics.as_ref().and_then(|n| n.h);
    let r = sharpness_diagnostic(dyn_of(p), &p.inits[0], &p.grid, h)?;
    let mut out = Outcome::new(Table::new(["t", "scaled", "lower", "upper"]));
    for k in 0..r.t_grid.len() {
        out.table
            .push(vec![r.t_grid[k], r.scaled[k], r.lower[k], r.upper[k]]);
    }
    out.check(
        "envelopes",
        true,
        "scaled distance between both envelopes".into(),
    );
    out.metric("M", finite(r.constants.big_m));
    out.metric("m", finite(r.constants.small_m));
    out.metric("R", finite(r.constants.r));
    Ok(out)
}

fn particles(p: &Prepared) -> Result<Outcome, Error> {
    let dy = dyn_of(p);
    let e = p.ensemble.as_ref().expect("validated");
    let n = p.numerics.as_ref().expect("validated");
    let h =
        n.h.ok_or_else(|| Error::Configuration("particle runs need numerics.h".into()))?;
    let d = dy.dim();
    let mut rng = NoiseStream::new(e.seed);
    let init = Ensemble::sample_gaussian(&e.mean, &e.cov, e.j, &mut rng)?;
    let scheme = match e.scheme {
        SchemeName::Eki => Scheme::Eki {
            sigma_noise: e.sigma_noise.clone(),
        },
        SchemeName::EkiSde => Scheme::EkiSde {
            sigma_noise: e.sigma_noise.clone(),
        },
        SchemeName::Eks => Scheme::Eks,
        SchemeName::Coupled => Scheme::Coupled {
            partner: Ensemble::sample_gaussian(&e.mean, &e.cov, e.j, &mut rng)?,
            c0: p.c0.clone().expect("validated"),
        },
    };
    let opts = StepOptions {
        guard: e.guard,
        noise: true,
    };
    let records = run_simulation(
        &init,
        &scheme,
        dy,
        h,
        n.t_end,
        &mut rng,
        n.record_every,
        opts,
    )?;

    let coupled = e.scheme == SchemeName::Coupled;
    let mut header = vec!["t".to_string()];
    header.extend(indexed_names("ubar", d));
    header.extend(upper_names("Cuu", d));
    header.push("spread".into());
    if coupled {
        header.push("coupling_gap".into());
    }
    let mut out = Outcome::new(Table::new(header));
    let mut all_psd = true;
    for r in &records {
        let mut row = vec![r.t];
        row.extend(r.stats.u_bar.iter());
        row.extend(upper_values(&r.stats.cuu));
        row.push(r.spread());
        if let Some(g) = r.coupling_gap {
            row.push(g);
        }
        out.table.push(row);
        all_psd &= spd_check(&r.stats.cuu, 1e-10)?.is_spd;
    }
    out.check(
        "covariance_psd",
        all_psd,
        "Cuu positive semidefinite at every record".into(),
    );
    let last = records.last().expect("at least the initial record");
    out.metric("seed", e.seed);
    out.metric("final_t", finite(last.t));
    out.metric("final_mean", vec_value(&last.stats.u_bar));
    out.metric("final_spread", finite(last.spread()));
    if let Some(g) = last.coupling_gap {
        out.metric("final_coupling_gap", finite(g));
    }
    if e.scheme == SchemeName::Eks {
        let st = MomentState::new(0.0, &e.mean - dy.u0(), e.cov.clone())?;
        let ode = integrate_moments(dy, &st, last.t, default_step(dy, &e.cov))?;
        let mu = dy.u0() + &ode.delta;
        let cov_gap = last.stats.cuu.sub(&ode.c).frobenius_norm() / ode.c.frobenius_norm();
        out.metric(
            "moment_ode_mean_gap",
            finite((&last.stats.u_bar - &mu).norm()),
        );
        out.metric("moment_ode_cov_rel_gap", finite(cov_gap));
    }
    Ok(out)
}

fn appendix(p: &Prepared) -> Result<Outcome, Error> {
    let a = p.appendix.as_ref().expect("validated");
    let r = appendix_inequality_checks(a.trials, a.dim, &mut NoiseStream::new(a.seed))?;
    let mut out = Outcome::new(Table::new([
        "dim",
        "trials",
        "concavity_violations",
        "difference_violations",
        "worst_concavity_excess",
        "worst_difference_excess",
        "worst_frobenius_ratio",
    ]));
    out.table.push(vec![
        r.dim as f64,
        r.trials as f64,
        r.concavity_violations as f64,
        r.difference_violations as f64,
        r.worst_concavity_excess,
        r.worst_difference_excess,
        r.worst_frobenius_ratio,
    ]);
    out.check(
        "concavity",
        r.concavity_violations == 0,
        format!("{} violations", r.concavity_violations),
    );
    out.check(
        "difference",
        r.difference_violations == 0,
        format!("{} violations", r.difference_violations),
    );
    out.metric("seed", a.seed);
    out.metric(
        "frobenius_constant_estimate",
        finite(r.worst_frobenius_ratio),
    );
    Ok(out)
}

/// Header-only table for runs stopped by an invariant violation.
pub fn empty_table(p: &Prepared) -> Table {
    match p.experiment {
        Experiment::LinearStability | Experiment::MeanFieldStability => {
            Table::new(["t", "w2", "envelope", "ratio"])
        }
        Experiment::Sharpness => Table::new(["t", "scaled", "lower", "upper"]),
        _ => Table::new(["t"]),
    }
}
