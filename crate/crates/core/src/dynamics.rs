//! Classical synchronous-machine model, initial conditions, ODE integrators
//! and rotor-angle stability checks.
//!
//! Frequency is per unit with synchronous speed 1; the angle equation is
//! scaled by `omega_base` (rad/s).

use serde::{Deserialize, Serialize};

use crate::acopf::DispatchPoint;
use crate::grid::{Generator, Network};
use crate::CoreError;

/// Horizon of the canonical comparison grid, seconds.
pub const HORIZON: f64 = 3.0;
/// Number of points of the canonical comparison grid.
pub const GRID_POINTS: usize = 31;

/// Uniform grid over `[0, HORIZON]` used by every loss and metric.
pub fn canonical_grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|k| HORIZON * k as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    pub x_d_prime: f64,
    pub inertia: f64,
    pub damping: f64,
    pub omega_s: f64,
    pub omega_base: f64,
    pub p_m: f64,
    pub e_q0: f64,
    pub v_mag: f64,
    pub v_ang: f64,
}

impl MachineParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = self.x_d_prime > 0.0
            && self.inertia > 0.0
            && self.damping >= 0.0
            && self.e_q0 > 0.0
            && self.v_mag > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidArgument(format!("invalid machine parameters {self:?}")))
        }
    }

    /// Peak electrical power `e_q0 |V| / x'_d`.
    pub fn coupling(&self) -> f64 {
        self.e_q0 * self.v_mag / self.x_d_prime
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub delta: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<MachineState>,
}

impl Trajectory {
    pub fn max_delta(&self) -> f64 {
        self.states.iter().map(|s| s.delta).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self, voltage: Option<(f64, f64)>) -> String {
        let mut out = String::from(if voltage.is_some() { "t,delta,omega,v_mag,v_ang\n" } else { "t,delta,omega\n" });
        for (t, s) in self.times.iter().zip(&self.states) {
            match voltage {
                Some((v, a)) => out.push_str(&format!("{t:?},{:?},{:?},{v:?},{a:?}\n", s.delta, s.omega)),
                None => out.push_str(&format!("{t:?},{:?},{:?}\n", s.delta, s.omega)),
            }
        }
        out
    }
}

/// Direct- and quadrature-axis stator currents.
pub fn stator_currents(params: &MachineParams, e_d: f64, e_q: f64, delta: f64) -> (f64, f64) {
    let (s, c) = (delta - params.v_ang).sin_cos();
    let i_d = (e_q - params.v_mag * c) / params.x_d_prime;
    let i_q = (params.v_mag * s - e_d) / params.x_d_prime;
    (i_d, i_q)
}

/// Electrical power `e_d i_d + e_q i_q` for given stator currents.
pub fn electrical_power(e_d: f64, e_q: f64, i_d: f64, i_q: f64) -> f64 {
    e_d * i_d + e_q * i_q
}

pub fn swing_rhs(params: &MachineParams, s: MachineState) -> MachineState {
    let slip = s.omega - params.omega_s;
    MachineState {
        delta: params.omega_base * slip,
        omega: (params.p_m - params.damping * slip - params.coupling() * (s.delta - params.v_ang).sin()) / params.inertia,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialConditions {
    pub delta0: f64,
    pub e_q0: f64,
    pub omega0: f64,
}

/// Steady-state rotor angle and EMF that deliver `(p_r, q_r)` at the
/// terminal voltage `v_mag∠v_ang`.
pub fn initial_conditions(gen: &Generator, p_r: f64, q_r: f64, v_mag: f64, v_ang: f64) -> Result<InitialConditions, CoreError> {
    if !(v_mag > 0.0) {
        return Err(CoreError::DegenerateVoltage(v_mag));
    }
    let a = p_r * gen.x_d_prime;
    let b = q_r * gen.x_d_prime + v_mag * v_mag;
    Ok(InitialConditions {
        delta0: v_ang + a.atan2(b),
        e_q0: a.hypot(b) / v_mag,
        omega0: 1.0,
    })
}

/// Residuals of the steady-state active and reactive power equations.
pub fn initial_residuals(gen: &Generator, p_r: f64, q_r: f64, v_mag: f64, v_ang: f64, delta: f64, e_q: f64) -> (f64, f64) {
    let (s, c) = (delta - v_ang).sin_cos();
    let x = gen.x_d_prime;
    (p_r - e_q * v_mag * s / x, q_r - (e_q * v_mag * c - v_mag * v_mag) / x)
}

fn phi1(a: f64) -> f64 {
    if a.abs() < 1e-4 {
        1.0 - a / 2.0 + a * a / 6.0
    } else {
        -(-a).exp_m1() / a
    }
}

fn phi2(a: f64) -> f64 {
    if a.abs() < 1e-3 {
        0.5 - a / 6.0 + a * a / 24.0
    } else {
        (1.0 - phi1(a)) / a
    }
}

/// Sensitivities `(∂δ, ∂ω)` of the state at fault clearing with respect to
/// the mechanical power. While a bolted terminal fault is on, electrical
/// output is zero and the rotor accelerates from synchronous speed, so the
/// cleared state is affine in `p_m`.
pub fn fault_gains(inertia: f64, damping: f64, omega_base: f64, clearing_time: f64) -> (f64, f64) {
    let tc = clearing_time;
    let a = damping * tc / inertia;
    (omega_base * tc * tc / inertia * phi2(a), tc / inertia * phi1(a))
}

/// Machine state at the instant the fault clears.
pub fn post_fault_state(params: &MachineParams, delta0: f64, clearing_time: f64) -> MachineState {
    let (kd, kw) = fault_gains(params.inertia, params.damping, params.omega_base, clearing_time);
    MachineState {
        delta: delta0 + kd * params.p_m,
        omega: params.omega_s + kw * params.p_m,
    }
}

/// Machine-level configuration shared by data generation, training and
/// evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub omega_base: f64,
    /// Duration of the terminal fault applied at t = 0⁻, seconds. Zero
    /// leaves the machine at its equilibrium.
    pub clearing_time: f64,
    pub delta_max: f64,
    pub integrator: IntegratorConfig,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            omega_base: 2.0 * std::f64::consts::PI * 60.0,
            clearing_time: 0.188,
            delta_max: std::f64::consts::FRAC_PI_2,
            integrator: IntegratorConfig::default(),
        }
    }
}

/// Post-disturbance scenario of one generator at a dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineScenario {
    pub params: MachineParams,
    pub equilibrium: InitialConditions,
    pub x0: MachineState,
}

pub fn scenario(gen: &Generator, p_r: f64, q_r: f64, v_mag: f64, v_ang: f64, cfg: &DynamicsConfig) -> Result<MachineScenario, CoreError> {
    let ic = initial_conditions(gen, p_r, q_r, v_mag, v_ang)?;
    let params = MachineParams {
        x_d_prime: gen.x_d_prime,
        inertia: gen.inertia,
        damping: gen.damping,
        omega_s: 1.0,
        omega_base: cfg.omega_base,
        p_m: p_r,
        e_q0: ic.e_q0,
        v_mag,
        v_ang,
    };
    let x0 = post_fault_state(&params, ic.delta0, cfg.clearing_time);
    Ok(MachineScenario { params, equilibrium: ic, x0 })
}

/// Integrates the true swing field and samples it on `grid`.
pub fn simulate(sc: &MachineScenario, cfg: &IntegratorConfig, grid: &[f64]) -> Result<Trajectory, CoreError> {
    sc.params.validate()?;
    let p = sc.params;
    let mut rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
        let d = swing_rhs(&p, MachineState { delta: x[0], omega: x[1] });
        dx[0] = d.delta;
        dx[1] = d.omega;
    };
    let horizon = grid.last().copied().unwrap_or(0.0);
    let mut c = cfg.clone();
    c.horizon = horizon;
    let sol = integrate(&mut rhs, &[sc.x0.delta, sc.x0.omega], &c)?;
    let states = sol
        .sample(grid)
        .into_iter()
        .map(|x| MachineState { delta: x[0], omega: x[1] })
        .collect();
    Ok(Trajectory { times: grid.to_vec(), states })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Bosh3,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self, CoreError> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "bosh3" => Ok(Method::Bosh3),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(CoreError::InvalidArgument(format!("unknown integrator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step, or the initial step of adaptive methods.
    pub dt: f64,
    pub horizon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            dt: 1e-3,
            horizon: HORIZON,
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn fixed(method: Method, dt: f64, horizon: f64) -> Self {
        Self { method, dt, horizon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.dt > 0.0 && self.horizon > 0.0 && self.rtol > 0.0 && self.atol > 0.0 {
            Ok(())
        } else {
            Err(CoreError::InvalidArgument(format!("invalid integrator configuration {self:?}")))
        }
    }
}

/// Output of [`integrate`]: states and derivatives at every emitted time.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
    pub rhs_evals: usize,
}

impl OdeSolution {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("solutions are never empty")
    }

    /// Cubic Hermite interpolation onto `grid` (times within the solved span).
    pub fn sample(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(grid.len());
        let mut k = 0;
        for &t in grid {
            while k + 2 < self.times.len() && self.times[k + 1] < t {
                k += 1;
            }
            let (t0, t1) = (self.times[k], self.times[(k + 1).min(self.times.len() - 1)]);
            if t1 <= t0 || t <= t0 {
                out.push(self.states[k].clone());
                continue;
            }
            if t >= t1 {
                out.push(self.states[k + 1].clone());
                continue;
            }
            let h = t1 - t0;
            let s = (t - t0) / h;
            let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
            let h10 = s * (1.0 - s) * (1.0 - s);
            let h01 = s * s * (3.0 - 2.0 * s);
            let h11 = s * s * (s - 1.0);
            let (y0, y1, f0, f1) = (&self.states[k], &self.states[k + 1], &self.derivs[k], &self.derivs[k + 1]);
            out.push(
                (0..y0.len())
                    .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
                    .collect(),
            );
        }
        out
    }
}

type Rhs<'a> = dyn FnMut(f64, &[f64], &mut [f64]) + 'a;

/// Integrates `x' = rhs(t, x)` from `x0` over `[0, cfg.horizon]`.
///
/// Fixed-step methods emit every `dt` (the final step is shortened to land
/// on the horizon); adaptive methods emit every accepted step.
pub fn integrate(rhs: &mut Rhs<'_>, x0: &[f64], cfg: &IntegratorConfig) -> Result<OdeSolution, CoreError> {
    cfg.validate()?;
    match cfg.method {
        Method::Euler | Method::Rk4 => fixed_step(rhs, x0, cfg),
        Method::Bosh3 => adaptive(rhs, x0, cfg, &BS3),
        Method::Dopri5 => adaptive(rhs, x0, cfg, &DP5),
    }
}

fn fixed_step(rhs: &mut Rhs<'_>, x0: &[f64], cfg: &IntegratorConfig) -> Result<OdeSolution, CoreError> {
    let n = x0.len();
    let mut t = 0.0;
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    rhs(t, &x, &mut f);
    let mut evals = 1;
    let mut sol = OdeSolution { times: vec![0.0], states: vec![x.clone()], derivs: vec![f.clone()], rhs_evals: 0 };
    let (mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut steps = 0;
    while t < cfg.horizon * (1.0 - 1e-12) {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(CoreError::StepLimit { max_steps: cfg.max_steps, t });
        }
        let h = cfg.dt.min(cfg.horizon - t);
        match cfg.method {
            Method::Euler => {
                for i in 0..n {
                    x[i] += h * f[i];
                }
            }
            _ => {
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * f[i];
                }
                rhs(t + 0.5 * h, &tmp, &mut k2);
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                rhs(t + 0.5 * h, &tmp, &mut k3);
                for i in 0..n {
                    tmp[i] = x[i] + h * k3[i];
                }
                rhs(t + h, &tmp, &mut k4);
                evals += 3;
                for i in 0..n {
                    x[i] += h / 6.0 * (f[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        t = if cfg.horizon - t <= cfg.dt { cfg.horizon } else { t + h };
        rhs(t, &x, &mut f);
        evals += 1;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { t });
        }
        sol.times.push(t);
        sol.states.push(x.clone());
        sol.derivs.push(f.clone());
    }
    sol.rhs_evals = evals;
    Ok(sol)
}

/// Explicit embedded Runge–Kutta pair with the first-same-as-last property.
struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
    /// Difference between the propagated and embedded weights.
    e: &'static [f64],
    order: f64,
}

const DP5: Tableau = Tableau {
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0],
    e: &[
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ],
    order: 5.0,
};

const BS3: Tableau = Tableau {
    c: &[0.0, 0.5, 0.75, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.75], &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]],
    b: &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
    e: &[2.0 / 9.0 - 7.0 / 24.0, 1.0 / 3.0 - 0.25, 4.0 / 9.0 - 1.0 / 3.0, -0.125],
    order: 3.0,
};

fn adaptive(rhs: &mut Rhs<'_>, x0: &[f64], cfg: &IntegratorConfig, tab: &Tableau) -> Result<OdeSolution, CoreError> {
    let n = x0.len();
    let s = tab.c.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
    let mut t = 0.0;
    let mut x = x0.to_vec();
    rhs(t, &x, &mut k[0]);
    let mut evals = 1;
    let mut sol = OdeSolution { times: vec![0.0], states: vec![x.clone()], derivs: vec![k[0].clone()], rhs_evals: 0 };
    let mut h = cfg.dt.min(cfg.horizon);
    let mut tmp = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut steps = 0;
    while t < cfg.horizon * (1.0 - 1e-12) {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(CoreError::StepLimit { max_steps: cfg.max_steps, t });
        }
        let last = h >= cfg.horizon - t;
        if last {
            h = cfg.horizon - t;
        }
        for stage in 1..s {
            for i in 0..n {
                let mut acc = x[i];
                for (j, aij) in tab.a[stage].iter().enumerate() {
                    acc += h * aij * k[j][i];
                }
                tmp[i] = acc;
            }
            if stage == s - 1 {
                // The final stage is evaluated at the propagated solution.
                xn.copy_from_slice(&tmp);
            }
            let (head, tail) = k.split_at_mut(stage);
            let _ = head;
            rhs(t + tab.c[stage] * h, &tmp, &mut tail[0]);
        }
        evals += s - 1;
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, ej) in tab.e.iter().enumerate() {
                e += h * ej * k[j][i];
            }
            let sc = cfg.atol + cfg.rtol * x[i].abs().max(xn[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() || !xn.iter().all(|v| v.is_finite()) {
            if h < 1e-14 {
                return Err(CoreError::NonFinite { t });
            }
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            t = if last { cfg.horizon } else { t + h };
            x.copy_from_slice(&xn);
            let fsal = k[s - 1].clone();
            k[0] = fsal;
            sol.times.push(t);
            sol.states.push(x.clone());
            sol.derivs.push(k[0].clone());
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / tab.order)).clamp(0.2, 5.0) };
        h *= if err <= 1.0 { factor } else { factor.min(1.0) };
    }
    debug_assert!(tab.b.len() == s);
    sol.rhs_evals = evals;
    Ok(sol)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub margin: f64,
    pub worst_violation: f64,
}

pub fn stability_check(traj: &Trajectory, delta_max: f64) -> Result<StabilityVerdict, CoreError> {
    if traj.states.is_empty() {
        return Err(CoreError::InvalidArgument("empty trajectory".into()));
    }
    let peak = traj.max_delta();
    let worst = (peak - delta_max).max(0.0);
    Ok(StabilityVerdict { stable: worst == 0.0, margin: delta_max - peak, worst_violation: worst })
}

/// True-field stability of every generator at a dispatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchStability {
    pub stable: bool,
    pub worst_violation: f64,
    pub per_generator: Vec<StabilityVerdict>,
}

pub fn dispatch_stability(net: &Network, d: &DispatchPoint, cfg: &DynamicsConfig) -> Result<DispatchStability, CoreError> {
    d.check(net)?;
    let grid = canonical_grid();
    let per_generator = net
        .generators
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let sc = scenario(g, d.p_r[k], d.q_r[k], d.v_mag[g.bus], d.v_ang[g.bus], cfg)?;
            stability_check(&simulate(&sc, &cfg.integrator, &grid)?, cfg.delta_max)
        })
        .collect::<Result<Vec<_>, CoreError>>()?;
    Ok(DispatchStability {
        stable: per_generator.iter().all(|v| v.stable),
        worst_violation: per_generator.iter().map(|v| v.worst_violation).fold(0.0, f64::max),
        per_generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MachineParams {
        MachineParams {
            x_d_prime: 1.0,
            inertia: 0.1,
            damping: 0.0,
            omega_s: 1.0,
            omega_base: 1.0,
            p_m: 1.0,
            e_q0: 1.0,
            v_mag: 1.0,
            v_ang: 0.0,
        }
    }

    #[test]
    fn stator_current_examples() {
        let mut p = params();
        p.v_mag = 1.3;
        let (i_d, i_q) = stator_currents(&p, 0.0, 1.3, p.v_ang);
        assert!(i_d.abs() < 1e-15 && i_q.abs() < 1e-15);
        let (i_d, i_q) = stator_currents(&params(), 0.0, 1.0, std::f64::consts::FRAC_PI_2);
        assert!((i_d - 1.0).abs() < 1e-15 && (i_q - 1.0).abs() < 1e-15);
    }

    #[test]
    fn swing_examples() {
        let s = swing_rhs(&params(), MachineState { delta: std::f64::consts::FRAC_PI_6, omega: 1.0 });
        assert_eq!(s.delta, 0.0);
        assert!((s.omega - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unloaded_machine_sits_at_terminal_angle() {
        let g = crate::grid::bundled("wscc9").unwrap().generators[0].clone();
        let ic = initial_conditions(&g, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!((ic.delta0, ic.e_q0, ic.omega0), (0.0, 1.0, 1.0));
        assert!(matches!(initial_conditions(&g, 0.0, 0.0, 0.0, 0.0), Err(CoreError::DegenerateVoltage(_))));
    }

    #[test]
    fn fault_gains_reduce_to_undamped_kinematics() {
        let (kd, kw) = fault_gains(2.0, 0.0, 10.0, 0.3);
        assert!((kd - 10.0 * 0.09 / 4.0).abs() < 1e-15);
        assert!((kw - 0.15).abs() < 1e-15);
        // Continuity across the series switch.
        let (a, b) = fault_gains(1.0, 0.9999999e-3 / 0.3, 1.0, 0.3);
        let (c, d) = fault_gains(1.0, 1.0000001e-3 / 0.3, 1.0, 0.3);
        assert!((a - c).abs() < 1e-10 && (b - d).abs() < 1e-10);
    }

    #[test]
    fn stability_examples() {
        let flat = Trajectory { times: vec![0.0, 1.0], states: vec![MachineState { delta: 0.0, omega: 1.0 }; 2] };
        let v = stability_check(&flat, std::f64::consts::FRAC_PI_2).unwrap();
        assert!(v.stable && v.worst_violation == 0.0 && (v.margin - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let mut bad = flat.clone();
        bad.states[1].delta = 1.1;
        let v = stability_check(&bad, 1.0).unwrap();
        assert!(!v.stable && (v.worst_violation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        for (method, tol) in [(Method::Rk4, 1e-9), (Method::Dopri5, 1e-7), (Method::Bosh3, 1e-6), (Method::Euler, 1e-3)] {
            let mut cfg = IntegratorConfig::fixed(method, 1e-3, 1.0);
            cfg.rtol = 1e-9;
            let sol = integrate(&mut |_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0], &[1.0], &cfg).unwrap();
            assert!((sol.last()[0] - (-1.0f64).exp()).abs() < tol, "{method:?}");
            assert_eq!(*sol.times.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_field_is_constant_and_step_limit_fires() {
        let cfg = IntegratorConfig::fixed(Method::Rk4, 0.1, 1.0);
        let sol = integrate(&mut |_, _: &[f64], dx: &mut [f64]| dx.fill(0.0), &[0.3, -2.0], &cfg).unwrap();
        assert!(sol.states.iter().all(|s| s == &vec![0.3, -2.0]));
        let mut tight = cfg.clone();
        tight.max_steps = 3;
        assert!(matches!(
            integrate(&mut |_, _: &[f64], dx: &mut [f64]| dx.fill(0.0), &[0.0], &tight),
            Err(CoreError::StepLimit { .. })
        ));
        assert!(matches!(
            integrate(&mut |_, x: &[f64], dx: &mut [f64]| dx[0] = x[0] * x[0], &[1.0], &IntegratorConfig::fixed(Method::Euler, 0.5, 10.0)),
            Err(CoreError::NonFinite { .. })
        ));
    }
}
