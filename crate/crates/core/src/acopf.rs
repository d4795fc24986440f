//! Steady-state AC optimal power flow: cost, line flows, nodal balance,
//! violation accounting, an augmented-Lagrangian reference solver and
//! supervised dataset construction.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{perturb_loads, LoadProfile, Network};
use crate::{check_len, par, CoreError};

/// Decision vector of the OPF: generator injections and bus voltages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchPoint {
    pub p_r: Vec<f64>,
    pub q_r: Vec<f64>,
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
}

/// A complex power split into active and reactive parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Power {
    pub p: f64,
    pub q: f64,
}

impl Power {
    pub fn magnitude(self) -> f64 {
        self.p.hypot(self.q)
    }
}

impl DispatchPoint {
    pub fn check(&self, net: &Network) -> Result<(), CoreError> {
        check_len("p_r", net.n_gen(), self.p_r.len())?;
        check_len("q_r", net.n_gen(), self.q_r.len())?;
        check_len("v_mag", net.n_bus(), self.v_mag.len())?;
        check_len("v_ang", net.n_bus(), self.v_ang.len())
    }

    /// Flat layout `[p_r, q_r, v_mag, v_ang]` used by the solver and the
    /// dataset files.
    pub fn to_flat(&self) -> Vec<f64> {
        [&self.p_r[..], &self.q_r, &self.v_mag, &self.v_ang].concat()
    }

    pub fn from_flat(net: &Network, x: &[f64]) -> Result<Self, CoreError> {
        let (ng, nb) = (net.n_gen(), net.n_bus());
        check_len("flat dispatch", 2 * ng + 2 * nb, x.len())?;
        Ok(Self {
            p_r: x[..ng].to_vec(),
            q_r: x[ng..2 * ng].to_vec(),
            v_mag: x[2 * ng..2 * ng + nb].to_vec(),
            v_ang: x[2 * ng + nb..].to_vec(),
        })
    }

    /// Flat start: mid-range injections, unit voltages clipped to bounds,
    /// zero angles.
    pub fn flat_start(net: &Network) -> Self {
        Self {
            p_r: net.generators.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect(),
            q_r: net.generators.iter().map(|g| 0.5 * (g.q_min + g.q_max)).collect(),
            v_mag: net.buses.iter().map(|b| 1.0f64.clamp(b.v_min, b.v_max)).collect(),
            v_ang: vec![0.0; net.n_bus()],
        }
    }
}

/// Total generation cost.
pub fn dispatch_cost(net: &Network, d: &DispatchPoint) -> Result<f64, CoreError> {
    check_len("p_r", net.n_gen(), d.p_r.len())?;
    Ok(cost_of(net, &d.p_r))
}

fn cost_of(net: &Network, p: &[f64]) -> f64 {
    net.generators
        .iter()
        .zip(p)
        .map(|(g, &p)| g.c2 * p * p + g.c1 * p + g.c0)
        .sum()
}

/// Flows of one line in both directions with their partial derivatives.
/// Rows of `d` are (P_ij, Q_ij, P_ji, Q_ji); columns are
/// (v_i, v_j, θ_i, θ_j).
struct LineEval {
    flows: [f64; 4],
    d: [[f64; 4]; 4],
}

fn eval_line(g: f64, b: f64, vi: f64, vj: f64, ti: f64, tj: f64) -> LineEval {
    let (s, c) = (ti - tj).sin_cos();
    let a = g * c + b * s;
    let bb = g * s - b * c;
    let ar = g * c - b * s;
    let br = -g * s - b * c;
    let vv = vi * vj;
    LineEval {
        flows: [
            g * vi * vi - vv * a,
            -b * vi * vi - vv * bb,
            g * vj * vj - vv * ar,
            -b * vj * vj - vv * br,
        ],
        d: [
            [2.0 * g * vi - vj * a, -vi * a, vv * bb, -vv * bb],
            [-2.0 * b * vi - vj * bb, -vi * bb, -vv * a, vv * a],
            [-vj * ar, 2.0 * g * vj - vi * ar, -vv * br, vv * br],
            [-vj * br, -2.0 * b * vj - vi * br, vv * ar, -vv * ar],
        ],
    }
}

/// Directed flows `(S_ij, S_ji)` for every line.
pub fn line_flows(net: &Network, d: &DispatchPoint) -> Result<Vec<(Power, Power)>, CoreError> {
    d.check(net)?;
    Ok(net
        .lines
        .iter()
        .map(|l| {
            let e = eval_line(l.g, l.b, d.v_mag[l.from], d.v_mag[l.to], d.v_ang[l.from], d.v_ang[l.to]);
            (
                Power { p: e.flows[0], q: e.flows[1] },
                Power { p: e.flows[2], q: e.flows[3] },
            )
        })
        .collect())
}

/// Generation minus demand minus outgoing flows, per bus.
pub fn balance_residuals(
    net: &Network,
    d: &DispatchPoint,
    load: &LoadProfile,
) -> Result<Vec<Power>, CoreError> {
    check_len("load", net.n_bus(), load.p_d.len())?;
    check_len("load", net.n_bus(), load.q_d.len())?;
    let flows = line_flows(net, d)?;
    let mut r: Vec<Power> = (0..net.n_bus())
        .map(|i| Power { p: -load.p_d[i], q: -load.q_d[i] })
        .collect();
    for (k, g) in net.generators.iter().enumerate() {
        r[g.bus].p += d.p_r[k];
        r[g.bus].q += d.q_r[k];
    }
    for (l, (fwd, rev)) in net.lines.iter().zip(&flows) {
        r[l.from].p -= fwd.p;
        r[l.from].q -= fwd.q;
        r[l.to].p -= rev.p;
        r[l.to].q -= rev.q;
    }
    Ok(r)
}

/// Residuals stacked as `[P_0..P_n, Q_0..Q_n]` with their dense Jacobian
/// (row-major, one row per residual) with respect to the flat layout.
pub fn balance_jacobian(
    net: &Network,
    x: &[f64],
    load: &LoadProfile,
) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
    let (ng, nb) = (net.n_gen(), net.n_bus());
    let n = 2 * ng + 2 * nb;
    check_len("flat dispatch", n, x.len())?;
    check_len("load", nb, load.p_d.len())?;
    let (vo, to) = (2 * ng, 2 * ng + nb);
    let mut r = vec![0.0; 2 * nb];
    let mut jac = vec![0.0; 2 * nb * n];
    for i in 0..nb {
        r[i] = -load.p_d[i];
        r[nb + i] = -load.q_d[i];
    }
    for (k, g) in net.generators.iter().enumerate() {
        r[g.bus] += x[k];
        r[nb + g.bus] += x[ng + k];
        jac[g.bus * n + k] = 1.0;
        jac[(nb + g.bus) * n + ng + k] = 1.0;
    }
    for l in &net.lines {
        let (i, j) = (l.from, l.to);
        let e = eval_line(l.g, l.b, x[vo + i], x[vo + j], x[to + i], x[to + j]);
        let rows = [i, nb + i, j, nb + j];
        let cols = [vo + i, vo + j, to + i, to + j];
        for a in 0..4 {
            r[rows[a]] -= e.flows[a];
            for c in 0..4 {
                jac[rows[a] * n + cols[c]] -= e.d[a][c];
            }
        }
    }
    Ok((r, jac))
}

/// Nonnegative violation amounts of every static constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// Magnitude of the complex balance residual, per bus.
    pub flow_eq: Vec<f64>,
    /// Distance outside `[v_min, v_max]`, per bus.
    pub v_bounds: Vec<f64>,
    /// Excess of `|θ_i − θ_j|` over the line's angle limit, per line.
    pub angle_bounds: Vec<f64>,
    /// Distance outside the active plus reactive power boxes, per generator.
    pub gen_bounds: Vec<f64>,
    /// Excess of `|S|` over the flow limit, two entries per line (ij, ji).
    pub line_flow: Vec<f64>,
    /// Absolute reference-bus angle.
    pub ref_angle: f64,
    pub totals: ViolationTotals,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationTotals {
    pub flow_eq: f64,
    pub v_bounds: f64,
    pub angle_bounds: f64,
    pub gen_bounds: f64,
    pub line_flow: f64,
    pub ref_angle: f64,
}

impl ViolationReport {
    /// Largest single inequality violation.
    pub fn max_inequality(&self) -> f64 {
        self.v_bounds
            .iter()
            .chain(&self.angle_bounds)
            .chain(&self.gen_bounds)
            .chain(&self.line_flow)
            .fold(0.0, |a, &b| a.max(b))
    }

    pub fn max_equality(&self) -> f64 {
        self.flow_eq.iter().fold(self.ref_angle, |a, &b| a.max(b))
    }

    /// Sum of all inequality-type violations (boundary violations).
    pub fn boundary_total(&self) -> f64 {
        let t = &self.totals;
        t.v_bounds + t.angle_bounds + t.gen_bounds + t.line_flow
    }
}

fn outside(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(0.0) + (x - hi).max(0.0)
}

pub fn static_violations(
    net: &Network,
    d: &DispatchPoint,
    load: &LoadProfile,
) -> Result<ViolationReport, CoreError> {
    let flows = line_flows(net, d)?;
    let flow_eq: Vec<f64> = balance_residuals(net, d, load)?
        .into_iter()
        .map(Power::magnitude)
        .collect();
    let v_bounds: Vec<f64> = net
        .buses
        .iter()
        .zip(&d.v_mag)
        .map(|(b, &v)| outside(v, b.v_min, b.v_max))
        .collect();
    let angle_bounds: Vec<f64> = net
        .lines
        .iter()
        .map(|l| ((d.v_ang[l.from] - d.v_ang[l.to]).abs() - l.angle_limit).max(0.0))
        .collect();
    let gen_bounds: Vec<f64> = net
        .generators
        .iter()
        .enumerate()
        .map(|(k, g)| outside(d.p_r[k], g.p_min, g.p_max) + outside(d.q_r[k], g.q_min, g.q_max))
        .collect();
    let line_flow: Vec<f64> = net
        .lines
        .iter()
        .zip(&flows)
        .flat_map(|(l, (f, r))| {
            [
                (f.magnitude() - l.flow_limit).max(0.0),
                (r.magnitude() - l.flow_limit).max(0.0),
            ]
        })
        .collect();
    let ref_angle = d.v_ang[net.reference_bus].abs();
    let totals = ViolationTotals {
        flow_eq: flow_eq.iter().sum(),
        v_bounds: v_bounds.iter().sum(),
        angle_bounds: angle_bounds.iter().sum(),
        gen_bounds: gen_bounds.iter().sum(),
        line_flow: line_flow.iter().sum(),
        ref_angle,
    };
    Ok(ViolationReport {
        flow_eq,
        v_bounds,
        angle_bounds,
        gen_bounds,
        line_flow,
        ref_angle,
        totals,
    })
}

/// Reference solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Bound on every balance residual magnitude at acceptance.
    pub eq_tol: f64,
    /// Bound on every inequality violation at acceptance.
    pub ineq_tol: f64,
    /// Stationarity tolerance on the projected Lagrangian gradient.
    pub opt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Number of starting points tried (flat start first, then random).
    pub starts: usize,
    pub seed: u64,
    pub penalty0: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eq_tol: 1e-6,
            ineq_tol: 1e-8,
            opt_tol: 1e-7,
            max_outer: 60,
            max_inner: 200,
            starts: 5,
            seed: 0,
            penalty0: 10.0,
        }
    }
}

/// One supervised example: a load profile and its optimal dispatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpfSample {
    pub load: LoadProfile,
    pub optimum: DispatchPoint,
    pub objective_value: f64,
    /// Largest balance residual magnitude at the returned point.
    pub eq_residual: f64,
    /// Largest inequality violation at the returned point.
    pub ineq_residual: f64,
}

/// Nonlinear program in the flat layout: box bounds plus balance equalities
/// and line inequalities, with an optional set of pinned variables.
pub struct OpfProblem<'a> {
    net: &'a Network,
    load: &'a LoadProfile,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost_scale: f64,
}

struct Multipliers {
    eq: Vec<f64>,
    ineq: Vec<f64>,
    penalty: f64,
}

enum Attempt {
    Converged(Vec<f64>),
    Failed { x: Vec<f64>, residual: f64 },
}

impl<'a> OpfProblem<'a> {
    pub fn new(net: &'a Network, load: &'a LoadProfile) -> Result<Self, CoreError> {
        check_len("load", net.n_bus(), load.p_d.len())?;
        check_len("load", net.n_bus(), load.q_d.len())?;
        let (ng, nb) = (net.n_gen(), net.n_bus());
        let mut lower = Vec::with_capacity(2 * (ng + nb));
        let mut upper = Vec::with_capacity(2 * (ng + nb));
        for g in &net.generators {
            lower.push(g.p_min);
            upper.push(g.p_max);
        }
        for g in &net.generators {
            lower.push(g.q_min);
            upper.push(g.q_max);
        }
        for b in &net.buses {
            lower.push(b.v_min);
            upper.push(b.v_max);
        }
        for k in 0..nb {
            let bound = if k == net.reference_bus { 0.0 } else { std::f64::consts::PI };
            lower.push(-bound);
            upper.push(bound);
        }
        let scale: f64 = net
            .generators
            .iter()
            .map(|g| g.c2 * g.p_max * g.p_max + g.c1.abs() * g.p_max + g.c0.abs())
            .sum();
        Ok(Self {
            net,
            load,
            lower,
            upper,
            cost_scale: 1.0 / scale.max(1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Pins one flat variable to a value.
    pub fn fix(&mut self, index: usize, value: f64) {
        self.lower[index] = value;
        self.upper[index] = value;
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(lo, hi);
        }
    }

    fn n_ineq(&self) -> usize {
        4 * self.net.n_line()
    }

    /// Inequality values `c(x) ≤ 0` (squared flow limits, both directions,
    /// then signed angle differences) and, when requested, their gradients
    /// weighted by `w` accumulated into `grad`.
    fn inequalities(&self, x: &[f64], weights: Option<(&[f64], &mut [f64])>) -> Vec<f64> {
        let net = self.net;
        let (ng, nb, nl) = (net.n_gen(), net.n_bus(), net.n_line());
        let (vo, to) = (2 * ng, 2 * ng + nb);
        let mut c = vec![0.0; 4 * nl];
        let mut wg = weights;
        for (k, l) in net.lines.iter().enumerate() {
            let (i, j) = (l.from, l.to);
            let e = eval_line(l.g, l.b, x[vo + i], x[vo + j], x[to + i], x[to + j]);
            let s2 = l.flow_limit * l.flow_limit;
            c[2 * k] = e.flows[0].powi(2) + e.flows[1].powi(2) - s2;
            c[2 * k + 1] = e.flows[2].powi(2) + e.flows[3].powi(2) - s2;
            let dt = x[to + i] - x[to + j];
            c[2 * nl + 2 * k] = dt - l.angle_limit;
            c[2 * nl + 2 * k + 1] = -dt - l.angle_limit;
            if let Some((w, grad)) = wg.as_mut() {
                let cols = [vo + i, vo + j, to + i, to + j];
                for col in 0..4 {
                    let fwd = 2.0 * (e.flows[0] * e.d[0][col] + e.flows[1] * e.d[1][col]);
                    let rev = 2.0 * (e.flows[2] * e.d[2][col] + e.flows[3] * e.d[3][col]);
                    grad[cols[col]] += w[2 * k] * fwd + w[2 * k + 1] * rev;
                }
                let wa = w[2 * nl + 2 * k] - w[2 * nl + 2 * k + 1];
                grad[to + i] += wa;
                grad[to + j] -= wa;
            }
        }
        c
    }

    /// Augmented Lagrangian value and gradient.
    fn lagrangian(&self, x: &[f64], m: &Multipliers, want_grad: bool) -> (f64, Vec<f64>) {
        let net = self.net;
        let n = self.dim();
        let (r, jac) = balance_jacobian(net, x, self.load).expect("dimensions validated");
        let mu = m.penalty;
        let mut val = self.cost_scale * cost_of(net, &x[..net.n_gen()]);
        let mut grad = vec![0.0; n];
        if want_grad {
            for (k, g) in net.generators.iter().enumerate() {
                grad[k] = self.cost_scale * (2.0 * g.c2 * x[k] + g.c1);
            }
        }
        for (row, &ri) in r.iter().enumerate() {
            val += m.eq[row] * ri + 0.5 * mu * ri * ri;
            if want_grad {
                let w = m.eq[row] + mu * ri;
                if w != 0.0 {
                    let jr = &jac[row * n..(row + 1) * n];
                    for (gk, jk) in grad.iter_mut().zip(jr) {
                        *gk += w * jk;
                    }
                }
            }
        }
        let c = self.inequalities(x, None);
        let mut w = vec![0.0; c.len()];
        for (l, &cl) in c.iter().enumerate() {
            let shifted = (m.ineq[l] + mu * cl).max(0.0);
            val += (shifted * shifted - m.ineq[l] * m.ineq[l]) / (2.0 * mu);
            w[l] = shifted;
        }
        if want_grad && w.iter().any(|&v| v != 0.0) {
            self.inequalities(x, Some((&w, &mut grad)));
        }
        (val, grad)
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| ((xi - gi).clamp(self.lower[i], self.upper[i]) - xi).abs())
            .fold(0.0, f64::max)
    }

    fn violations(&self, x: &[f64]) -> (f64, f64) {
        let d = DispatchPoint::from_flat(self.net, x).expect("dimension checked");
        let rep = static_violations(self.net, &d, self.load).expect("dimension checked");
        (rep.max_equality(), rep.max_inequality())
    }

    /// Projected Newton minimisation of the augmented Lagrangian over the box.
    fn inner(&self, x: &mut Vec<f64>, m: &Multipliers, tol: f64, max_iter: usize) {
        let n = self.dim();
        let fixed: Vec<bool> = (0..n).map(|i| self.lower[i] == self.upper[i]).collect();
        let (mut f, mut g) = self.lagrangian(x, m, true);
        for _ in 0..max_iter {
            if self.projected_gradient_norm(x, &g) <= tol {
                break;
            }
            let eps_b = 1e-10;
            let free: Vec<usize> = (0..n)
                .filter(|&i| {
                    !fixed[i]
                        && !(x[i] <= self.lower[i] + eps_b && g[i] > 0.0)
                        && !(x[i] >= self.upper[i] - eps_b && g[i] < 0.0)
                })
                .collect();
            let mut dir = vec![0.0; n];
            if !free.is_empty() {
                let h = self.hessian(x, m, &free);
                let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
                let step = solve_regularised(&h, &rhs, free.len());
                for (k, &i) in free.iter().enumerate() {
                    dir[i] = step[k];
                }
            }
            let mut accepted = false;
            let mut alpha = 1.0;
            for _ in 0..40 {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
                self.project(&mut trial);
                let decrease: f64 = trial.iter().zip(x.iter()).zip(&g).map(|((t, a), gi)| gi * (t - a)).sum();
                let (ft, gt) = self.lagrangian(&trial, m, true);
                if ft <= f + 1e-4 * decrease && ft.is_finite() {
                    *x = trial;
                    f = ft;
                    g = gt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Fall back to a projected gradient step.
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let mut trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
                    self.project(&mut trial);
                    let decrease: f64 = trial.iter().zip(x.iter()).zip(&g).map(|((t, a), gi)| gi * (t - a)).sum();
                    let (ft, gt) = self.lagrangian(&trial, m, true);
                    if ft <= f + 1e-4 * decrease && ft.is_finite() {
                        *x = trial;
                        f = ft;
                        g = gt;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
    }

    /// Central-difference Hessian of the augmented Lagrangian restricted to
    /// the free variables, symmetrised.
    fn hessian(&self, x: &[f64], m: &Multipliers, free: &[usize]) -> Vec<f64> {
        let k = free.len();
        let mut h = vec![0.0; k * k];
        let mut xp = x.to_vec();
        for (c, &i) in free.iter().enumerate() {
            let step = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + step;
            let (_, gp) = self.lagrangian(&xp, m, true);
            xp[i] = x[i] - step;
            let (_, gm) = self.lagrangian(&xp, m, true);
            xp[i] = x[i];
            for (r, &j) in free.iter().enumerate() {
                h[r * k + c] = (gp[j] - gm[j]) / (2.0 * step);
            }
        }
        for r in 0..k {
            for c in r + 1..k {
                let avg = 0.5 * (h[r * k + c] + h[c * k + r]);
                h[r * k + c] = avg;
                h[c * k + r] = avg;
            }
        }
        h
    }

    fn attempt(&self, start: &[f64], cfg: &SolverConfig) -> Attempt {
        let mut x = start.to_vec();
        self.project(&mut x);
        let mut m = Multipliers {
            eq: vec![0.0; 2 * self.net.n_bus()],
            ineq: vec![0.0; self.n_ineq()],
            penalty: cfg.penalty0,
        };
        let mut inner_tol = 1e-3;
        let mut prev_viol = f64::INFINITY;
        for _ in 0..cfg.max_outer {
            self.inner(&mut x, &m, inner_tol, cfg.max_inner);
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
            let (r, _) = balance_jacobian(self.net, &x, self.load).expect("dimension checked");
            let c = self.inequalities(&x, None);
            let eq_viol = r.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let ineq_viol = c
                .iter()
                .zip(&m.ineq)
                .map(|(&cl, &zl)| cl.max(-zl / m.penalty).abs())
                .fold(0.0f64, f64::max);
            let viol = eq_viol.max(ineq_viol);
            let (eq_mag, ineq_max) = self.violations(&x);
            let (_, g) = self.lagrangian(&x, &m, true);
            let stationary = self.projected_gradient_norm(&x, &g) <= cfg.opt_tol;
            if eq_mag <= 0.1 * cfg.eq_tol && ineq_max <= cfg.ineq_tol && stationary && viol <= 0.1 * cfg.eq_tol {
                return Attempt::Converged(x);
            }
            for (l, &rl) in r.iter().enumerate() {
                m.eq[l] += m.penalty * rl;
            }
            for (l, &cl) in c.iter().enumerate() {
                m.ineq[l] = (m.ineq[l] + m.penalty * cl).max(0.0);
            }
            if viol > 0.25 * prev_viol {
                m.penalty = (m.penalty * 10.0).min(1e10);
            }
            prev_viol = viol;
            inner_tol = (inner_tol * 0.1).max(0.1 * cfg.opt_tol);
        }
        let (eq_mag, _) = self.violations(&x);
        Attempt::Failed { x, residual: eq_mag }
    }

    /// Solves from one explicit start point.
    pub fn solve_from(&self, start: &DispatchPoint, cfg: &SolverConfig) -> Result<OpfSample, CoreError> {
        start.check(self.net)?;
        match self.attempt(&start.to_flat(), cfg) {
            Attempt::Converged(x) => Ok(self.sample(&x)),
            Attempt::Failed { x, residual } => Err(CoreError::NoConvergence {
                best: Box::new(DispatchPoint::from_flat(self.net, &x)?),
                residual,
            }),
        }
    }

    /// Flat start, then random box starts, returning the first converged
    /// solution.
    pub fn solve(&self, cfg: &SolverConfig) -> Result<OpfSample, CoreError> {
        self.solve_seeded(None, cfg)
    }

    fn solve_seeded(&self, warm: Option<&DispatchPoint>, cfg: &SolverConfig) -> Result<OpfSample, CoreError> {
        let net = self.net;
        let demand: f64 = self.load.p_d.iter().sum();
        let p_cap: f64 = (0..net.n_gen()).map(|k| self.upper[k]).sum();
        if demand > p_cap {
            return Err(CoreError::Infeasible { attempts: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm {
            starts.push(w.to_flat());
        }
        starts.push(DispatchPoint::flat_start(net).to_flat());
        let total = starts.len().max(cfg.starts.max(1));
        for attempt in 0..total {
            let start = if attempt < starts.len() {
                starts[attempt].clone()
            } else {
                self.random_start(&mut rng)
            };
            match self.attempt(&start, cfg) {
                Attempt::Converged(x) => return Ok(self.sample(&x)),
                Attempt::Failed { x, residual } => {
                    if best.as_ref().is_none_or(|(_, r)| residual < *r) {
                        best = Some((x, residual));
                    }
                }
            }
        }
        match best {
            Some((x, residual)) if residual < 1e-3 => Err(CoreError::NoConvergence {
                best: Box::new(DispatchPoint::from_flat(net, &x)?),
                residual,
            }),
            _ => Err(CoreError::Infeasible { attempts: total }),
        }
    }

    /// Uniform draw inside the box; angles within ±0.3 rad.
    pub fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let angle0 = 2 * self.net.n_gen() + self.net.n_bus();
        (0..self.dim())
            .map(|i| {
                let (mut lo, mut hi) = (self.lower[i], self.upper[i]);
                if i >= angle0 {
                    lo = lo.max(-0.3);
                    hi = hi.min(0.3);
                }
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..=hi)
                }
            })
            .collect()
    }

    fn sample(&self, x: &[f64]) -> OpfSample {
        let d = DispatchPoint::from_flat(self.net, x).expect("dimension checked");
        let rep = static_violations(self.net, &d, self.load).expect("dimension checked");
        OpfSample {
            load: self.load.clone(),
            objective_value: cost_of(self.net, &d.p_r),
            eq_residual: rep.max_equality(),
            ineq_residual: rep.max_inequality(),
            optimum: d,
        }
    }
}

/// Cholesky solve of `(H + τI) s = rhs`, increasing τ until the factor exists.
fn solve_regularised(h: &[f64], rhs: &[f64], k: usize) -> Vec<f64> {
    let scale = (0..k).map(|i| h[i * k + i].abs()).fold(0.0, f64::max).max(1e-12);
    let mut tau = 0.0;
    loop {
        if let Some(l) = cholesky(h, k, tau) {
            let mut y = rhs.to_vec();
            for i in 0..k {
                let mut s = y[i];
                for j in 0..i {
                    s -= l[i * k + j] * y[j];
                }
                y[i] = s / l[i * k + i];
            }
            for i in (0..k).rev() {
                let mut s = y[i];
                for j in i + 1..k {
                    s -= l[j * k + i] * y[j];
                }
                y[i] = s / l[i * k + i];
            }
            return y;
        }
        tau = if tau == 0.0 { 1e-10 * scale } else { tau * 10.0 };
        if tau > 1e12 * scale {
            return rhs.iter().map(|v| v / scale).collect();
        }
    }
}

fn cholesky(a: &[f64], k: usize, shift: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            if i == j {
                s += shift;
            }
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// Solves the OPF for one load profile with the default start sequence.
pub fn solve_reference(net: &Network, load: &LoadProfile, cfg: &SolverConfig) -> Result<OpfSample, CoreError> {
    OpfProblem::new(net, load)?.solve(cfg)
}

/// Deterministic 80/10/10 partition of sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        Self {
            train: sorted(&idx[..n_train]),
            val: sorted(&idx[n_train..n_train + n_val]),
            test: sorted(&idx[n_train + n_val..]),
        }
    }

    pub fn tag(&self, i: usize) -> &'static str {
        if self.train.contains(&i) {
            "train"
        } else if self.val.contains(&i) {
            "val"
        } else {
            "test"
        }
    }
}

/// Parameters recorded next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub net_hash: String,
    pub n: usize,
    pub seed: u64,
    pub fraction: f64,
    pub solver: SolverConfig,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpfDataset {
    pub samples: Vec<OpfSample>,
    pub split: Split,
    pub manifest: DatasetManifest,
}

/// Draws perturbed loads, solves each, and keeps the first `n` feasible
/// draws in draw order.
pub fn build_dataset(
    net: &Network,
    n: usize,
    fraction: f64,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<OpfDataset, CoreError> {
    if n < 10 {
        return Err(CoreError::InvalidArgument(format!("dataset needs n >= 10, got {n}")));
    }
    let nominal = net.nominal_load();
    let warm = OpfProblem::new(net, &nominal)?.solve(cfg).ok().map(|s| s.optimum);
    let budget = 5 * n;
    let mut samples = Vec::with_capacity(n);
    let mut next = 0usize;
    while samples.len() < n && next < budget {
        let chunk = (n - samples.len()).min(budget - next);
        let ids: Vec<usize> = (next..next + chunk).collect();
        let results = par::ordered_map(&ids, |_, &draw| {
            let load = perturb_loads(net, fraction, draw_seed(seed, draw))?;
            let problem = OpfProblem::new(net, &load)?;
            let mut c = cfg.clone();
            c.seed = draw_seed(cfg.seed, draw);
            problem.solve_seeded(warm.as_ref(), &c)
        });
        for r in results {
            match r {
                Ok(s) if samples.len() < n => samples.push(s),
                Ok(_) => {}
                Err(CoreError::Infeasible { .. }) | Err(CoreError::NoConvergence { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        next += chunk;
    }
    if samples.len() < n {
        return Err(CoreError::Infeasible { attempts: next });
    }
    Ok(OpfDataset {
        split: Split::new(n, seed),
        manifest: DatasetManifest {
            net_hash: net.content_hash(),
            n,
            seed,
            fraction,
            solver: cfg.clone(),
            attempts: next,
        },
        samples,
    })
}

fn draw_seed(seed: u64, draw: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(draw as u64)
}

impl OpfDataset {
    /// Samples selected by `idx`.
    pub fn subset(&self, idx: &[usize]) -> Vec<&OpfSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// CSV with one row per sample; floats are written in shortest
    /// round-trip form so reloading is exact.
    pub fn to_csv(&self, net: &Network) -> String {
        let (nb, ng) = (net.n_bus(), net.n_gen());
        let mut out = String::from("id,split");
        for prefix in ["pd", "qd"] {
            for i in 0..nb {
                let _ = write!(out, ",{prefix}{i}");
            }
        }
        for prefix in ["pr", "qr"] {
            for k in 0..ng {
                let _ = write!(out, ",{prefix}{k}");
            }
        }
        for prefix in ["vm", "va"] {
            for i in 0..nb {
                let _ = write!(out, ",{prefix}{i}");
            }
        }
        out.push_str(",objective,eq_residual,ineq_residual\n");
        for (i, s) in self.samples.iter().enumerate() {
            let _ = write!(out, "{i},{}", self.split.tag(i));
            let d = &s.optimum;
            for v in s.load.p_d.iter().chain(&s.load.q_d).chain(&d.p_r).chain(&d.q_r).chain(&d.v_mag).chain(&d.v_ang) {
                let _ = write!(out, ",{v:?}");
            }
            let _ = writeln!(out, ",{:?},{:?},{:?}", s.objective_value, s.eq_residual, s.ineq_residual);
        }
        out
    }

    pub fn from_csv(net: &Network, text: &str, manifest: DatasetManifest) -> Result<Self, CoreError> {
        let (nb, ng) = (net.n_bus(), net.n_gen());
        let width = 2 + 4 * nb + 2 * ng + 3;
        let mut samples = Vec::new();
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != width {
                return Err(CoreError::Format(format!("line {}: expected {width} columns, got {}", ln + 1, cols.len())));
            }
            let idx = samples.len();
            match cols[1] {
                "train" => train.push(idx),
                "val" => val.push(idx),
                "test" => test.push(idx),
                other => return Err(CoreError::Format(format!("line {}: unknown split `{other}`", ln + 1))),
            }
            let nums: Vec<f64> = cols[2..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| CoreError::Format(format!("line {}: {e}", ln + 1))))
                .collect::<Result<_, _>>()?;
            let (load, rest) = nums.split_at(2 * nb);
            let (x, tail) = rest.split_at(2 * ng + 2 * nb);
            samples.push(OpfSample {
                load: LoadProfile { p_d: load[..nb].to_vec(), q_d: load[nb..].to_vec() },
                optimum: DispatchPoint::from_flat(net, x)?,
                objective_value: tail[0],
                eq_residual: tail[1],
                ineq_residual: tail[2],
            });
        }
        Ok(Self { samples, split: Split { train, val, test }, manifest })
    }

    /// Writes `<stem>.csv` and `<stem>.manifest.json` into `dir`.
    pub fn save(&self, net: &Network, dir: &Path, stem: &str) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv(net))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.manifest.json")), manifest)?;
        Ok(())
    }

    pub fn load(net: &Network, dir: &Path, stem: &str) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.csv")))?;
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.manifest.json")))?)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        if manifest.net_hash != net.content_hash() {
            return Err(CoreError::Format("dataset was generated for a different network".into()));
        }
        Self::from_csv(net, &text, manifest)
    }
}
