//! Test-split metrics, reports and inference timing.
//!
//! Every stability number in an [`EvalReport`] comes from integrating the
//! true machine model. Surrogate-based estimates are reported in a separate,
//! explicitly named field.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acopf::{dispatch_cost, static_violations, DispatchPoint, OpfDataset, OpfSample};
use crate::dynamics::{dispatch_stability, scenario, DynamicsConfig};
use crate::dynopf::LtoProxy;
use crate::grid::Network;
use crate::node::{NodeInput, NodeSurrogate, Timing};
use crate::{check_len, par, CoreError};

/// `|f(y*) − f(ŷ)| / |f(y*)|` in percent.
pub fn steady_state_gap(net: &Network, y_hat: &DispatchPoint, y_star: &DispatchPoint) -> Result<f64, CoreError> {
    let f_star = dispatch_cost(net, y_star)?;
    if f_star == 0.0 {
        return Err(CoreError::ZeroReferenceObjective);
    }
    Ok((f_star - dispatch_cost(net, y_hat)?).abs() / f_star.abs() * 100.0)
}

/// Mean and population standard deviation of the per-sample gap.
pub fn mean_gap(net: &Network, preds: &[DispatchPoint], labels: &[&DispatchPoint]) -> Result<(f64, f64), CoreError> {
    check_len("labels", preds.len(), labels.len())?;
    let gaps = preds.iter().zip(labels).map(|(p, l)| steady_state_gap(net, p, l)).collect::<Result<Vec<_>, _>>()?;
    let t = Timing::from_samples(&gaps);
    Ok((t.mean, t.std))
}

/// Per-element mean squared error of each variable group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VariableMse {
    pub p_r: f64,
    pub q_r: f64,
    pub v_mag: f64,
    pub v_ang: f64,
}

pub fn variable_mse(preds: &[DispatchPoint], labels: &[&DispatchPoint]) -> VariableMse {
    fn mse<'a>(pairs: impl Iterator<Item = (&'a Vec<f64>, &'a Vec<f64>)>) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(b) {
                s += (x - y).powi(2);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
    let pairs = || preds.iter().zip(labels.iter().copied());
    VariableMse {
        p_r: mse(pairs().map(|(a, b)| (&a.p_r, &b.p_r))),
        q_r: mse(pairs().map(|(a, b)| (&a.q_r, &b.q_r))),
        v_mag: mse(pairs().map(|(a, b)| (&a.v_mag, &b.v_mag))),
        v_ang: mse(pairs().map(|(a, b)| (&a.v_ang, &b.v_ang))),
    }
}

/// Mean over samples of the squared distance between flat dispatch vectors.
pub fn dispatch_mse(preds: &[DispatchPoint], labels: &[&DispatchPoint]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| p.to_flat().iter().zip(l.to_flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    total / preds.len() as f64
}

/// Share of dispatch points, in percent, whose true trajectories leave the
/// rotor-angle limit for some generator.
pub fn unstable_percentage(net: &Network, preds: &[DispatchPoint], cfg: &DynamicsConfig) -> Result<f64, CoreError> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let verdicts = par::ordered_map(preds, |_, d| dispatch_stability(net, d, cfg));
    let mut bad = 0usize;
    for v in verdicts {
        bad += usize::from(!v?.stable);
    }
    Ok(100.0 * bad as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mse: VariableMse,
    /// Mean over samples and buses of the balance residual magnitude.
    pub flow_violation: f64,
    /// Mean over samples of the summed inequality violations.
    pub boundary_violation: f64,
    /// Mean over samples of the worst true-field rotor-angle excess (rad).
    pub stability_violation: f64,
    pub unstable_pct: f64,
    /// Share of samples the surrogates flag as unstable, when provided.
    pub surrogate_unstable_pct: Option<f64>,
    pub gap_mean_pct: f64,
    pub gap_std_pct: f64,
    pub inference: Option<Timing>,
    pub config_hash: String,
}

pub const REPORT_CSV_HEADER: &str = "samples,mse_p_r,mse_q_r,mse_v_mag,mse_v_ang,flow_violation,boundary_violation,stability_violation,unstable_pct,surrogate_unstable_pct,gap_mean_pct,gap_std_pct,inference_mean_s,inference_std_s,config_hash";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:?}"));
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?},{},{},{}",
            self.samples,
            self.mse.p_r,
            self.mse.q_r,
            self.mse.v_mag,
            self.mse.v_ang,
            self.flow_violation,
            self.boundary_violation,
            self.stability_violation,
            self.unstable_pct,
            opt(self.surrogate_unstable_pct),
            self.gap_mean_pct,
            self.gap_std_pct,
            opt(self.inference.map(|t| t.mean)),
            opt(self.inference.map(|t| t.std)),
            self.config_hash
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn to_json(&self) -> Result<String, CoreError> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))
    }
}

/// Metrics of given predictions against their samples.
pub fn evaluate_predictions(
    net: &Network,
    samples: &[&OpfSample],
    preds: &[DispatchPoint],
    cfg: &DynamicsConfig,
) -> Result<EvalReport, CoreError> {
    check_len("predictions", samples.len(), preds.len())?;
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("evaluation split is empty".into()));
    }
    let n = samples.len() as f64;
    let labels: Vec<&DispatchPoint> = samples.iter().map(|s| &s.optimum).collect();
    let mut flow = 0.0;
    let mut boundary = 0.0;
    for (s, d) in samples.iter().zip(preds) {
        let r = static_violations(net, d, &s.load)?;
        flow += r.totals.flow_eq / net.n_bus() as f64;
        boundary += r.boundary_total();
    }
    let verdicts = par::ordered_map(preds, |_, d| dispatch_stability(net, d, cfg));
    let (mut worst, mut bad) = (0.0, 0usize);
    for v in verdicts {
        let v = v?;
        worst += v.worst_violation;
        bad += usize::from(!v.stable);
    }
    let (gap_mean_pct, gap_std_pct) = mean_gap(net, preds, &labels)?;
    Ok(EvalReport {
        samples: samples.len(),
        mse: variable_mse(preds, &labels),
        flow_violation: flow / n,
        boundary_violation: boundary / n,
        stability_violation: worst / n,
        unstable_pct: 100.0 * bad as f64 / n,
        surrogate_unstable_pct: None,
        gap_mean_pct,
        gap_std_pct,
        inference: None,
        config_hash: String::new(),
    })
}

/// Peak surrogate rotor angle per generator for one dispatch.
pub fn surrogate_peaks(
    net: &Network,
    d: &DispatchPoint,
    surrogates: &[NodeSurrogate],
    cfg: &DynamicsConfig,
) -> Result<Vec<f64>, CoreError> {
    check_len("surrogates", net.n_gen(), surrogates.len())?;
    net.generators
        .iter()
        .zip(surrogates)
        .enumerate()
        .map(|(k, (g, s))| {
            let sc = scenario(g, d.p_r[k], d.q_r[k], d.v_mag[g.bus], d.v_ang[g.bus], cfg)?;
            let input = NodeInput::from_scenario(&sc);
            Ok(s.rollout(&input)?.iter().map(|x| x.delta).fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Test-split report for a trained proxy. When surrogates are given, their
/// own stability estimate is added alongside the true-field numbers.
pub fn evaluate_model(
    proxy: &LtoProxy,
    surrogates: Option<&[NodeSurrogate]>,
    data: &OpfDataset,
    net: &Network,
    cfg: &DynamicsConfig,
) -> Result<EvalReport, CoreError> {
    let samples = data.subset(&data.split.test);
    let preds = samples.iter().map(|s| proxy.predict(net, &s.load)).collect::<Result<Vec<_>, _>>()?;
    let mut report = evaluate_predictions(net, &samples, &preds, cfg)?;
    if let Some(ss) = surrogates {
        let mut bad = 0usize;
        for d in &preds {
            let peaks = surrogate_peaks(net, d, ss, cfg)?;
            bad += usize::from(peaks.iter().any(|&p| p > cfg.delta_max));
        }
        report.surrogate_unstable_pct = Some(100.0 * bad as f64 / preds.len() as f64);
    }
    Ok(report)
}

/// Single-sample inference wall time: proxy forward, plus surrogate
/// rollouts of every generator when surrogates are given.
pub fn bench_inference(
    proxy: &LtoProxy,
    surrogates: Option<&[NodeSurrogate]>,
    net: &Network,
    samples: &[&OpfSample],
    repeats: usize,
    cfg: &DynamicsConfig,
) -> Result<Timing, CoreError> {
    if samples.is_empty() || repeats == 0 {
        return Err(CoreError::InvalidArgument("benchmark needs samples and repeats".into()));
    }
    let mut xs = Vec::with_capacity(samples.len() * repeats);
    for _ in 0..repeats {
        for s in samples {
            let t = Instant::now();
            let d = proxy.predict(net, &s.load)?;
            if let Some(ss) = surrogates {
                std::hint::black_box(surrogate_peaks(net, &d, ss, cfg)?);
            }
            std::hint::black_box(&d);
            xs.push(t.elapsed().as_secs_f64());
        }
    }
    Ok(Timing::from_samples(&xs))
}

/// Named timing rows as CSV.
pub fn timing_table(rows: &[(String, Timing)]) -> String {
    let mut out = String::from("model,mean_s,std_s\n");
    for (name, t) in rows {
        let _ = writeln!(out, "{name},{:?},{:?}", t.mean, t.std);
    }
    out
}
