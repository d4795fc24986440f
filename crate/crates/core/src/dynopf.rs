//! Learning-to-optimize proxy, composite Lagrangian loss and the joint
//! proxy/surrogate training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynopf_neural::{Activation, BoundNet, Checkpoint, DenseNet, Gradients, Optimizer, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acopf::{DispatchPoint, OpfDataset, OpfSample};
use crate::dynamics::{fault_gains, DynamicsConfig, GRID_POINTS};
use crate::grid::{LoadProfile, Network};
use crate::node::NodeSurrogate;
use crate::{check_len, eval, CoreError};

/// Smoothing width of the equality-violation absolute value.
pub const EQ_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    Equality,
    Inequality,
}

/// Differentiable violation amount of a single residual.
pub fn violation_value(kind: ViolationKind, residual: f64) -> f64 {
    match kind {
        ViolationKind::Equality => dynopf_neural::smooth_abs(residual, EQ_EPS),
        ViolationKind::Inequality => residual.max(0.0),
    }
}

/// Load-to-dispatch network with outputs squashed into the operating boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct LtoProxy {
    pub model: DenseNet,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProxyMeta {
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

/// Number of raw proxy outputs: injections, magnitudes and non-reference angles.
pub fn proxy_outputs(net: &Network) -> usize {
    2 * net.n_gen() + 2 * net.n_bus() - 1
}

impl LtoProxy {
    pub fn new(net: &Network, hidden: &[usize], loads: &[&LoadProfile], seed: u64) -> Result<Self, CoreError> {
        let nf = 2 * net.n_bus();
        let mut widths = vec![nf];
        widths.extend(hidden);
        widths.push(proxy_outputs(net));
        let model = DenseNet::new(&widths, Activation::Tanh, Activation::Identity, seed)?;
        let (mut mean, mut std) = (vec![0.0; nf], vec![1.0; nf]);
        if !loads.is_empty() {
            let n = loads.len() as f64;
            for j in 0..nf {
                let xs = loads.iter().map(|l| l.features()[j]);
                let m = xs.clone().sum::<f64>() / n;
                let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / n;
                mean[j] = m;
                std[j] = if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 };
            }
        }
        Ok(Self { model, feature_mean: mean, feature_std: std })
    }

    pub fn features(&self, load: &LoadProfile) -> Vec<f64> {
        load.features()
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Deterministic prediction; boxes and the reference angle hold by
    /// construction.
    pub fn predict(&self, net: &Network, load: &LoadProfile) -> Result<DispatchPoint, CoreError> {
        check_len("load", net.n_bus(), load.len())?;
        let raw = self.model.forward(&Tensor::row(&self.features(load)))?;
        Ok(decode_raw(net, raw.data()))
    }

    pub fn to_checkpoint(&self, opt: Option<&Optimizer>, seed: u64, epoch: usize) -> Result<Checkpoint, CoreError> {
        let mut ck = Checkpoint::capture(&self.model, opt, seed, epoch);
        let meta = ProxyMeta { feature_mean: self.feature_mean.clone(), feature_std: self.feature_std.clone() };
        ck.metadata = serde_json::to_value(meta).map_err(|e| CoreError::Format(e.to_string()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CoreError> {
        let meta: ProxyMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| CoreError::Format(format!("proxy metadata: {e}")))?;
        Ok(Self { model: ck.restore()?, feature_mean: meta.feature_mean, feature_std: meta.feature_std })
    }
}

/// Maps raw outputs onto a dispatch point.
pub fn decode_raw(net: &Network, raw: &[f64]) -> DispatchPoint {
    let (ng, nb) = (net.n_gen(), net.n_bus());
    let sig = dynopf_neural::sigmoid;
    let p_r = net.generators.iter().enumerate().map(|(k, g)| g.p_min + (g.p_max - g.p_min) * sig(raw[k])).collect();
    let q_r = net.generators.iter().enumerate().map(|(k, g)| g.q_min + (g.q_max - g.q_min) * sig(raw[ng + k])).collect();
    let v_mag = net.buses.iter().enumerate().map(|(i, b)| b.v_min + (b.v_max - b.v_min) * sig(raw[2 * ng + i])).collect();
    let mut v_ang = vec![0.0; nb];
    let mut k = 2 * ng + nb;
    for (i, a) in v_ang.iter_mut().enumerate() {
        if i != net.reference_bus {
            *a = raw[k];
            k += 1;
        }
    }
    DispatchPoint { p_r, q_r, v_mag, v_ang }
}

/// One vector per constraint family; used for multipliers and violations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Families {
    /// Active then reactive balance, per bus.
    pub flow: Vec<f64>,
    /// Apparent-power limit, two directions per line.
    pub line: Vec<f64>,
    /// Angle-difference limit, two signs per line.
    pub angle: Vec<f64>,
    /// Steady-state machine equations, active then reactive, per generator.
    pub ic: Vec<f64>,
    /// Rotor-angle limit, per generator.
    pub stability: Vec<f64>,
}

impl Families {
    pub fn filled(net: &Network, value: f64) -> Self {
        let (nb, nl, ng) = (net.n_bus(), net.n_line(), net.n_gen());
        Self {
            flow: vec![value; 2 * nb],
            line: vec![value; 2 * nl],
            angle: vec![value; 2 * nl],
            ic: vec![value; 2 * ng],
            stability: vec![value; ng],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 5] {
        [&self.flow, &self.line, &self.angle, &self.ic, &self.stability]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.flow, &mut self.line, &mut self.angle, &mut self.ic, &mut self.stability]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.parts().into_iter().flat_map(|v| v.iter().copied())
    }

    fn axpy(&mut self, k: f64, other: &Families) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: Families,
    pub rho: f64,
    /// Factor applied to `rho` for the rotor-angle family, whose mean
    /// violations are orders of magnitude smaller than the balance ones.
    pub stability_scale: f64,
}

impl Multipliers {
    pub fn new(net: &Network, lambda0: f64, rho: f64) -> Result<Self, CoreError> {
        if !(lambda0 >= 0.0 && rho >= 0.0) {
            return Err(CoreError::InvalidArgument("multipliers and step size must be nonnegative".into()));
        }
        Ok(Self { lambda: Families::filled(net, lambda0), rho, stability_scale: 1.0 })
    }

    pub fn with_stability_scale(mut self, scale: f64) -> Result<Self, CoreError> {
        if !(scale >= 0.0) {
            return Err(CoreError::InvalidArgument("stability step scale must be nonnegative".into()));
        }
        self.stability_scale = scale;
        Ok(self)
    }
}

/// `λ ← λ + ρ·v`, elementwise, with `ρ` scaled for the stability family.
pub fn update_multipliers(m: &Multipliers, violations: &Families) -> Result<Multipliers, CoreError> {
    for (a, b) in m.lambda.parts().into_iter().zip(violations.parts()) {
        check_len("violations", a.len(), b.len())?;
    }
    if violations.iter().any(|v| !(v >= 0.0)) {
        return Err(CoreError::InvalidArgument("violations must be nonnegative".into()));
    }
    let mut out = m.clone();
    let stab = std::mem::take(&mut out.lambda.stability);
    out.lambda.axpy(m.rho, violations);
    out.lambda.stability = stab.iter().zip(&violations.stability).map(|(l, v)| l + m.rho * m.stability_scale * v).collect();
    Ok(out)
}

/// Loss terms of one evaluation; `total` is the tape sum of the others in
/// field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub flow: f64,
    pub line: f64,
    pub angle: f64,
    pub ic: f64,
    pub stability: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn constraint_sum(&self) -> f64 {
        self.flow + self.line + self.angle + self.ic + self.stability
    }

    fn axpy(&mut self, k: f64, o: &LossBreakdown) {
        self.pred += k * o.pred;
        self.flow += k * o.flow;
        self.line += k * o.line;
        self.angle += k * o.angle;
        self.ic += k * o.ic;
        self.stability += k * o.stability;
        self.total += k * o.total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dynopf,
    BaselineMse,
    BaselineLd,
}

impl std::str::FromStr for Mode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self, CoreError> {
        match s {
            "dynopf" => Ok(Mode::Dynopf),
            "baseline_mse" => Ok(Mode::BaselineMse),
            "baseline_ld" => Ok(Mode::BaselineLd),
            other => Err(CoreError::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dynopf => "dynopf",
            Mode::BaselineMse => "baseline_mse",
            Mode::BaselineLd => "baseline_ld",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch: usize,
    /// Initial learning rate; decays on a cosine schedule over the epochs.
    pub lr: f64,
    pub rho: f64,
    /// Multiplier step for the stability family relative to `rho`.
    pub stability_rho_scale: f64,
    pub lambda0: f64,
    /// Surrogate learning rate relative to `lr`.
    pub node_lr_factor: f64,
    pub freeze_node: bool,
    /// Whether the dynopf mode also penalizes static constraints.
    pub include_static: bool,
    /// Angle head-room subtracted from the stability limit during training.
    pub stability_margin: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub dynamics: DynamicsConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dynopf,
            epochs: 50,
            batch: 8,
            lr: 3e-3,
            rho: 0.1,
            stability_rho_scale: 100.0,
            lambda0: 0.0,
            node_lr_factor: 0.1,
            freeze_node: false,
            include_static: true,
            stability_margin: 0.2,
            hidden: vec![128, 128],
            seed: 0,
            dynamics: DynamicsConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lr > 0.0 && self.rho >= 0.0 && self.lambda0 >= 0.0 && self.stability_rho_scale >= 0.0 && self.batch > 0 && self.node_lr_factor > 0.0) {
            return Err(CoreError::InvalidArgument(format!("invalid trainer configuration {self:?}")));
        }
        Ok(())
    }

    fn uses_static(&self) -> bool {
        match self.mode {
            Mode::BaselineMse => false,
            Mode::BaselineLd => true,
            Mode::Dynopf => self.include_static,
        }
    }

    fn uses_dynamics(&self) -> bool {
        self.mode == Mode::Dynopf
    }
}

/// Network-derived constant tensors used by the recorded loss.
pub struct LossContext {
    ng: usize,
    nb: usize,
    p_lo: Tensor,
    p_rng: Tensor,
    q_lo: Tensor,
    q_rng: Tensor,
    v_lo: Tensor,
    v_rng: Tensor,
    theta_sel: Tensor,
    from_sel: Tensor,
    to_sel: Tensor,
    diff_sel: Tensor,
    from_scatter: Tensor,
    to_scatter: Tensor,
    gen_scatter: Tensor,
    gen_bus_sel: Tensor,
    g: Tensor,
    b: Tensor,
    smax: Tensor,
    angle_limit: Tensor,
    x_d: Vec<f64>,
    gains: Vec<(f64, f64)>,
}

impl LossContext {
    pub fn new(net: &Network, dynamics: &DynamicsConfig) -> Self {
        let (ng, nb, nl) = (net.n_gen(), net.n_bus(), net.n_line());
        let row = |v: Vec<f64>| Tensor::row(&v);
        let gens = &net.generators;
        let mut theta_sel = Tensor::zeros(nb - 1, nb);
        let mut r = 0;
        for i in 0..nb {
            if i != net.reference_bus {
                theta_sel.set(r, i, 1.0);
                r += 1;
            }
        }
        let (mut from_sel, mut to_sel) = (Tensor::zeros(nb, nl), Tensor::zeros(nb, nl));
        for (l, line) in net.lines.iter().enumerate() {
            from_sel.set(line.from, l, 1.0);
            to_sel.set(line.to, l, 1.0);
        }
        let diff_sel = Tensor::matrix(nb, nl, from_sel.data().iter().zip(to_sel.data()).map(|(a, b)| a - b).collect())
            .expect("same shape");
        let mut gen_scatter = Tensor::zeros(ng, nb);
        for (k, g) in gens.iter().enumerate() {
            gen_scatter.set(k, g.bus, 1.0);
        }
        Self {
            ng,
            nb,
            p_lo: row(gens.iter().map(|g| g.p_min).collect()),
            p_rng: row(gens.iter().map(|g| g.p_max - g.p_min).collect()),
            q_lo: row(gens.iter().map(|g| g.q_min).collect()),
            q_rng: row(gens.iter().map(|g| g.q_max - g.q_min).collect()),
            v_lo: row(net.buses.iter().map(|b| b.v_min).collect()),
            v_rng: row(net.buses.iter().map(|b| b.v_max - b.v_min).collect()),
            theta_sel,
            from_scatter: from_sel.transpose(),
            to_scatter: to_sel.transpose(),
            gen_bus_sel: gen_scatter.transpose(),
            from_sel,
            to_sel,
            diff_sel,
            gen_scatter,
            g: row(net.lines.iter().map(|l| l.g).collect()),
            b: row(net.lines.iter().map(|l| l.b).collect()),
            smax: row(net.lines.iter().map(|l| l.flow_limit).collect()),
            angle_limit: row(net.lines.iter().map(|l| l.angle_limit).collect()),
            x_d: gens.iter().map(|g| g.x_d_prime).collect(),
            gains: gens
                .iter()
                .map(|g| fault_gains(g.inertia, g.damping, dynamics.omega_base, dynamics.clearing_time))
                .collect(),
        }
    }
}

/// Dispatch variables of a batch recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DispatchVars {
    pub p: Var,
    pub q: Var,
    pub v: Var,
    pub theta: Var,
}

fn squash(tape: &mut Tape, raw: Var, cols: &[usize], lo: &Tensor, rng: &Tensor) -> Result<Var, CoreError> {
    let x = tape.cols(raw, cols)?;
    let s = tape.sigmoid(x);
    let r = tape.constant(rng.clone());
    let s = tape.mul(s, r)?;
    let l = tape.constant(lo.clone());
    Ok(tape.add(s, l)?)
}

/// Records the proxy forward pass and the box squashing.
pub fn record_dispatch(tape: &mut Tape, ctx: &LossContext, bound: &BoundNet, features: Var) -> Result<DispatchVars, CoreError> {
    let (ng, nb) = (ctx.ng, ctx.nb);
    let raw = bound.forward(tape, features)?;
    let idx = |a: usize, n: usize| (a..a + n).collect::<Vec<_>>();
    let p = squash(tape, raw, &idx(0, ng), &ctx.p_lo, &ctx.p_rng)?;
    let q = squash(tape, raw, &idx(ng, ng), &ctx.q_lo, &ctx.q_rng)?;
    let v = squash(tape, raw, &idx(2 * ng, nb), &ctx.v_lo, &ctx.v_rng)?;
    let free = tape.cols(raw, &idx(2 * ng + nb, nb - 1))?;
    let sel = tape.constant(ctx.theta_sel.clone());
    let theta = tape.matmul(free, sel)?;
    Ok(DispatchVars { p, q, v, theta })
}

/// Per-sample violations of one family as a `[B, m]` variable.
struct FamilyVars {
    flow: Var,
    line: Var,
    angle: Var,
}

fn record_static(tape: &mut Tape, ctx: &LossContext, d: &DispatchVars, pd: Var, qd: Var) -> Result<FamilyVars, CoreError> {
    let c = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
    let fs = c(tape, &ctx.from_sel);
    let ts = c(tape, &ctx.to_sel);
    let ds = c(tape, &ctx.diff_sel);
    let vi = tape.matmul(d.v, fs)?;
    let vj = tape.matmul(d.v, ts)?;
    let dth = tape.matmul(d.theta, ds)?;
    let cs = tape.cos(dth);
    let sn = tape.sin(dth);
    let g = c(tape, &ctx.g);
    let b = c(tape, &ctx.b);
    let gc = tape.mul(g, cs)?;
    let bs = tape.mul(b, sn)?;
    let gs = tape.mul(g, sn)?;
    let bc = tape.mul(b, cs)?;
    let vv = tape.mul(vi, vj)?;
    let vi2 = tape.square(vi);
    let vj2 = tape.square(vj);
    // P_ij = g vi² − vi vj (g c + b s); Q_ij = −b vi² − vi vj (g s − b c)
    let a = tape.add(gc, bs)?;
    let bb = tape.sub(gs, bc)?;
    let t1 = tape.mul(g, vi2)?;
    let t2 = tape.mul(vv, a)?;
    let p_ij = tape.sub(t1, t2)?;
    let t1 = tape.mul(b, vi2)?;
    let t2 = tape.mul(vv, bb)?;
    let t3 = tape.add(t1, t2)?;
    let q_ij = tape.neg(t3);
    // P_ji = g vj² − vi vj (g c − b s); Q_ji = −b vj² + vi vj (g s + b c)
    let ar = tape.sub(gc, bs)?;
    let br = tape.add(gs, bc)?;
    let t1 = tape.mul(g, vj2)?;
    let t2 = tape.mul(vv, ar)?;
    let p_ji = tape.sub(t1, t2)?;
    let t1 = tape.mul(b, vj2)?;
    let t2 = tape.mul(vv, br)?;
    let q_ji = tape.sub(t2, t1)?;
    let fsc = c(tape, &ctx.from_scatter);
    let tsc = c(tape, &ctx.to_scatter);
    let gsc = c(tape, &ctx.gen_scatter);
    let balance = |tape: &mut Tape, gen: Var, dem: Var, f: Var, r: Var| -> Result<Var, CoreError> {
        let inj = tape.matmul(gen, gsc)?;
        let out_f = tape.matmul(f, fsc)?;
        let out_r = tape.matmul(r, tsc)?;
        let x = tape.sub(inj, dem)?;
        let x = tape.sub(x, out_f)?;
        Ok(tape.sub(x, out_r)?)
    };
    let rp = balance(tape, d.p, pd, p_ij, p_ji)?;
    let rq = balance(tape, d.q, qd, q_ij, q_ji)?;
    let r = tape.concat_cols(&[rp, rq])?;
    let flow = tape.smooth_abs(r, EQ_EPS);
    let smax = c(tape, &ctx.smax);
    let over = |tape: &mut Tape, p: Var, q: Var| -> Result<Var, CoreError> {
        let p2 = tape.square(p);
        let q2 = tape.square(q);
        let s2 = tape.add(p2, q2)?;
        let s2 = tape.offset(s2, 1e-12);
        let s = tape.sqrt(s2);
        let x = tape.sub(s, smax)?;
        Ok(tape.relu(x))
    };
    let lf = over(tape, p_ij, q_ij)?;
    let lr = over(tape, p_ji, q_ji)?;
    let line = tape.concat_cols(&[lf, lr])?;
    let lim = c(tape, &ctx.angle_limit);
    let up = tape.sub(dth, lim)?;
    let up = tape.relu(up);
    let ndth = tape.neg(dth);
    let dn = tape.sub(ndth, lim)?;
    let dn = tape.relu(dn);
    let angle = tape.concat_cols(&[up, dn])?;
    Ok(FamilyVars { flow, line, angle })
}

struct DynamicVars {
    ic: Var,
    stability: Var,
}

fn record_dynamics(
    tape: &mut Tape,
    ctx: &LossContext,
    d: &DispatchVars,
    surrogates: &[(&NodeSurrogate, &BoundNet)],
    delta_limit: f64,
) -> Result<DynamicVars, CoreError> {
    let sel = tape.constant(ctx.gen_bus_sel.clone());
    let vg = tape.matmul(d.v, sel)?;
    let tg = tape.matmul(d.theta, sel)?;
    let mut ic_cols = Vec::with_capacity(2 * ctx.ng);
    let mut ic_q = Vec::with_capacity(ctx.ng);
    let mut stab = Vec::with_capacity(ctx.ng);
    for (k, &(s, bound)) in surrogates.iter().enumerate() {
        let x = ctx.x_d[k];
        let p = tape.col(d.p, k)?;
        let q = tape.col(d.q, k)?;
        let v = tape.col(vg, k)?;
        let th = tape.col(tg, k)?;
        let a = tape.scale(p, x);
        let qx = tape.scale(q, x);
        let v2 = tape.square(v);
        let bb = tape.add(qx, v2)?;
        let ang = tape.atan2(a, bb)?;
        let delta0 = tape.add(th, ang)?;
        let a2 = tape.square(a);
        let b2 = tape.square(bb);
        let h = tape.add(a2, b2)?;
        let h = tape.sqrt(h);
        let e = tape.div(h, v)?;
        // Steady-state machine equations at the computed (δ0, e).
        let rel = tape.sub(delta0, th)?;
        let sn = tape.sin(rel);
        let cs = tape.cos(rel);
        let ev = tape.mul(e, v)?;
        let pe = tape.mul(ev, sn)?;
        let pe = tape.scale(pe, 1.0 / x);
        let rp = tape.sub(p, pe)?;
        let qe = tape.mul(ev, cs)?;
        let qe = tape.sub(qe, v2)?;
        let qe = tape.scale(qe, 1.0 / x);
        let rq = tape.sub(q, qe)?;
        ic_cols.push(tape.smooth_abs(rp, EQ_EPS));
        ic_q.push(tape.smooth_abs(rq, EQ_EPS));
        // State at fault clearing, normalized for the surrogate.
        let (kd, kw) = ctx.gains[k];
        let n = s.norm;
        let dc = tape.axpy(delta0, kd, p)?;
        let zd = tape.offset(dc, -n.delta_mean);
        let zd = tape.scale(zd, 1.0 / n.delta_std);
        let zw = tape.scale(p, kw / n.omega_std);
        let z0 = tape.concat_cols(&[zd, zw])?;
        let c_v = tape.offset(v, -1.0);
        let c_p = tape.offset(p, -1.0);
        let c_e = tape.offset(e, -1.0);
        let cond = tape.concat_cols(&[c_v, th, c_p, c_e])?;
        let zs = s.record(tape, bound, z0, cond, GRID_POINTS - 1)?;
        let mut deltas = Vec::with_capacity(zs.len());
        for &z in &zs {
            deltas.push(s.decode_delta(tape, z)?);
        }
        let all = tape.concat_cols(&deltas)?;
        let peak = tape.max_cols(all);
        let over = tape.offset(peak, -delta_limit);
        stab.push(tape.relu(over));
    }
    ic_cols.extend(ic_q);
    Ok(DynamicVars { ic: tape.concat_cols(&ic_cols)?, stability: tape.concat_cols(&stab)? })
}

/// Minibatch tensors drawn from an OPF dataset.
pub struct Batch {
    pub features: Tensor,
    pub labels: Tensor,
    pub p_d: Tensor,
    pub q_d: Tensor,
}

impl Batch {
    pub fn new(proxy: &LtoProxy, samples: &[&OpfSample]) -> Result<Self, CoreError> {
        let b = samples.len();
        let rows = |f: &dyn Fn(&OpfSample) -> Vec<f64>| -> Result<Tensor, CoreError> {
            let data: Vec<Vec<f64>> = samples.iter().map(|s| f(s)).collect();
            let c = data.first().map_or(0, Vec::len);
            Ok(Tensor::matrix(b, c, data.concat())?)
        };
        Ok(Self {
            features: rows(&|s| proxy.features(&s.load))?,
            labels: rows(&|s| s.optimum.to_flat())?,
            p_d: rows(&|s| s.load.p_d.clone())?,
            q_d: rows(&|s| s.load.q_d.clone())?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of one recorded loss evaluation.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    /// Batch-mean violation per constraint.
    pub violations: Families,
    pub proxy_grads: Gradients,
    pub node_grads: Vec<Gradients>,
}

/// Records the composite loss for a batch, runs the reverse sweep and
/// returns the loss terms with parameter gradients.
pub fn dynopf_loss(
    ctx: &LossContext,
    proxy: &LtoProxy,
    surrogates: &[NodeSurrogate],
    batch: &Batch,
    mult: &Multipliers,
    cfg: &TrainerConfig,
) -> Result<LossEval, CoreError> {
    let bsz = batch.len();
    let inv_b = 1.0 / bsz as f64;
    let mut tape = Tape::new();
    let pb = proxy.model.bind(&mut tape);
    let dynamic = cfg.uses_dynamics();
    if dynamic && surrogates.len() != ctx.ng {
        return Err(CoreError::Dimension { what: "surrogates", expected: ctx.ng, got: surrogates.len() });
    }
    let nb: Vec<BoundNet> = if dynamic {
        surrogates
            .iter()
            .map(|s| if cfg.freeze_node { s.field.bind_frozen(&mut tape) } else { s.field.bind(&mut tape) })
            .collect()
    } else {
        Vec::new()
    };
    let x = tape.constant(batch.features.clone());
    let d = record_dispatch(&mut tape, ctx, &pb, x)?;
    let y = tape.concat_cols(&[d.p, d.q, d.v, d.theta])?;
    let lbl = tape.constant(batch.labels.clone());
    let diff = tape.sub(y, lbl)?;
    let sq = tape.square(diff);
    let sq = tape.sum_all(sq);
    let pred = tape.scale(sq, inv_b);

    let mut violations = Families::default();
    let weighted = |tape: &mut Tape, v: Var, lambda: &[f64], out: &mut Vec<f64>| -> Result<Var, CoreError> {
        let mean = tape.sum_rows(v);
        let mean = tape.scale(mean, inv_b);
        out.extend_from_slice(tape.value(mean).data());
        let l = tape.constant(Tensor::row(lambda));
        let w = tape.mul(mean, l)?;
        Ok(tape.sum_all(w))
    };
    let mut terms: [Option<Var>; 5] = [None; 5];
    if cfg.uses_static() {
        let pd = tape.constant(batch.p_d.clone());
        let qd = tape.constant(batch.q_d.clone());
        let f = record_static(&mut tape, ctx, &d, pd, qd)?;
        terms[0] = Some(weighted(&mut tape, f.flow, &mult.lambda.flow, &mut violations.flow)?);
        terms[1] = Some(weighted(&mut tape, f.line, &mult.lambda.line, &mut violations.line)?);
        terms[2] = Some(weighted(&mut tape, f.angle, &mult.lambda.angle, &mut violations.angle)?);
    }
    if dynamic {
        let pairs: Vec<(&NodeSurrogate, &BoundNet)> = surrogates.iter().zip(&nb).collect();
        let limit = cfg.dynamics.delta_max - cfg.stability_margin;
        let dv = record_dynamics(&mut tape, ctx, &d, &pairs, limit)?;
        terms[3] = Some(weighted(&mut tape, dv.ic, &mult.lambda.ic, &mut violations.ic)?);
        terms[4] = Some(weighted(&mut tape, dv.stability, &mult.lambda.stability, &mut violations.stability)?);
    }
    let mut total = pred;
    let mut values = [0.0; 5];
    for (slot, t) in values.iter_mut().zip(&terms) {
        if let Some(t) = *t {
            total = tape.add(total, t)?;
            *slot = tape.value(t).item();
        }
    }
    let breakdown = LossBreakdown {
        pred: tape.value(pred).item(),
        flow: values[0],
        line: values[1],
        angle: values[2],
        ic: values[3],
        stability: values[4],
        total: tape.value(total).item(),
    };
    if !breakdown.total.is_finite() {
        return Err(CoreError::Divergence(format!("non-finite loss {breakdown:?}")));
    }
    tape.backward(total)?;
    Ok(LossEval {
        breakdown,
        violations,
        proxy_grads: pb.gradients(&tape),
        node_grads: nb.iter().map(|b| b.gradients(&tape)).collect(),
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted means of the minibatch loss terms.
    pub loss: LossBreakdown,
    pub lambda_sum: f64,
    pub train_unstable_pct: f64,
    pub val_unstable_pct: f64,
    pub val_mse: f64,
    pub val_gap_pct: f64,
    pub wall_time: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,loss_total,loss_pred,loss_flow,loss_line,loss_angle,loss_ic,loss_stability,lambda_sum,train_unstable_pct,val_unstable_pct,val_mse,val_gap_pct,wall_time";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:.3}",
            self.epoch,
            l.total,
            l.pred,
            l.flow,
            l.line,
            l.angle,
            l.ic,
            l.stability,
            self.lambda_sum,
            self.train_unstable_pct,
            self.val_unstable_pct,
            self.val_mse,
            self.val_gap_pct,
            self.wall_time
        )
    }
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for row in log {
        let _ = writeln!(out, "{}", row.csv_row());
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub proxy: LtoProxy,
    pub surrogates: Vec<NodeSurrogate>,
    pub multipliers: Multipliers,
    pub log: Vec<EpochLog>,
}

/// Joint training. Surrogates are hot-started from the given models and are
/// only consulted in the dynopf mode. When `out_dir` is set, the config,
/// epoch log and checkpoints are written there after every epoch.
pub fn train(
    net: &Network,
    data: &OpfDataset,
    surrogates: &[NodeSurrogate],
    cfg: &TrainerConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, CoreError> {
    cfg.validate()?;
    if data.split.train.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let ctx = LossContext::new(net, &cfg.dynamics);
    let train_s: Vec<&OpfSample> = data.split.train.iter().map(|&i| &data.samples[i]).collect();
    let val_s: Vec<&OpfSample> = data.split.val.iter().map(|&i| &data.samples[i]).collect();
    let loads: Vec<&LoadProfile> = train_s.iter().map(|s| &s.load).collect();
    let mut proxy = LtoProxy::new(net, &cfg.hidden, &loads, cfg.seed)?;
    let mut nodes = surrogates.to_vec();
    let mut mult = Multipliers::new(net, cfg.lambda0, cfg.rho)?.with_stability_scale(cfg.stability_rho_scale)?;
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut node_opts: Vec<Optimizer> =
        nodes.iter().map(|_| Optimizer::adam(cfg.lr * cfg.node_lr_factor)).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("trainer_config.json"), cfg)?;
    }
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let decay = 0.5 * (1.0 + (PI * (epoch - 1) as f64 / cfg.epochs as f64).cos());
        opt.lr = cfg.lr * decay;
        for o in &mut node_opts {
            o.lr = cfg.lr * cfg.node_lr_factor * decay;
        }
        let mut order: Vec<usize> = (0..train_s.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut viol = Families::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let samples: Vec<&OpfSample> = chunk.iter().map(|&i| train_s[i]).collect();
            let batch = Batch::new(&proxy, &samples)?;
            let ev = dynopf_loss(&ctx, &proxy, &nodes, &batch, &mult, cfg)
                .map_err(|e| CoreError::Divergence(format!("epoch {epoch}: {e}")))?;
            opt.step(&mut proxy.model, &ev.proxy_grads)?;
            if cfg.uses_dynamics() && !cfg.freeze_node {
                for ((s, o), g) in nodes.iter_mut().zip(&mut node_opts).zip(&ev.node_grads) {
                    o.step(&mut s.field, g)?;
                }
            }
            let w = samples.len() as f64;
            acc.axpy(w, &ev.breakdown);
            if viol.iter().next().is_none() {
                viol = Families {
                    flow: vec![0.0; ev.violations.flow.len()],
                    line: vec![0.0; ev.violations.line.len()],
                    angle: vec![0.0; ev.violations.angle.len()],
                    ic: vec![0.0; ev.violations.ic.len()],
                    stability: vec![0.0; ev.violations.stability.len()],
                };
            }
            viol.axpy(w, &ev.violations);
            seen += samples.len();
        }
        let inv = 1.0 / seen as f64;
        let mut loss = LossBreakdown::default();
        loss.axpy(inv, &acc);
        // Families a mode does not use keep their multipliers.
        let mut mean_v = Families::filled(net, 0.0);
        for (dst, src) in mean_v.parts_mut().into_iter().zip(viol.parts()) {
            if src.len() == dst.len() {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s * inv).max(0.0);
                }
            }
        }
        if cfg.mode != Mode::BaselineMse {
            mult = update_multipliers(&mult, &mean_v)?;
        }
        let train_pred = predict_all(&proxy, net, &train_s)?;
        let val_pred = predict_all(&proxy, net, &val_s)?;
        let train_unstable_pct = eval::unstable_percentage(net, &train_pred, &cfg.dynamics)?;
        let (val_unstable_pct, val_mse, val_gap_pct) = if val_s.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let labels: Vec<&DispatchPoint> = val_s.iter().map(|s| &s.optimum).collect();
            (
                eval::unstable_percentage(net, &val_pred, &cfg.dynamics)?,
                eval::dispatch_mse(&val_pred, &labels),
                eval::mean_gap(net, &val_pred, &labels)?.0,
            )
        };
        let row = EpochLog {
            epoch,
            loss,
            lambda_sum: mult.lambda.iter().sum(),
            train_unstable_pct,
            val_unstable_pct,
            val_mse,
            val_gap_pct,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log.push(row);
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("epochs.csv"), epoch_log_csv(&log))?;
            proxy.to_checkpoint(Some(&opt), cfg.seed, epoch)?.save(&dir.join("proxy.json"))?;
            for (k, s) in nodes.iter().enumerate() {
                s.to_checkpoint(node_opts.get(k), cfg.seed, epoch)?.save(&node_path(dir, k))?;
            }
            write_json(&dir.join("multipliers.json"), &mult)?;
        }
    }
    Ok(TrainOutcome { proxy, surrogates: nodes, multipliers: mult, log })
}

pub fn node_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("node_g{k}.json"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CoreError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CoreError::Format(e.to_string()))?;
    Ok(std::fs::write(path, s)?)
}

pub fn predict_all(proxy: &LtoProxy, net: &Network, samples: &[&OpfSample]) -> Result<Vec<DispatchPoint>, CoreError> {
    samples.iter().map(|s| proxy.predict(net, &s.load)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bundled;

    #[test]
    fn violation_examples() {
        assert!((violation_value(ViolationKind::Equality, -0.3) - (0.3 - EQ_EPS)).abs() < 1e-15);
        assert_eq!(violation_value(ViolationKind::Inequality, -1.0), 0.0);
        assert_eq!(violation_value(ViolationKind::Inequality, 0.5), 0.5);
        assert_eq!(violation_value(ViolationKind::Equality, 0.0), 0.0);
    }

    #[test]
    fn multiplier_examples() {
        let net = bundled("wscc9").unwrap();
        let m = Multipliers::new(&net, 0.0, 0.1).unwrap();
        let v = Families::filled(&net, 2.0);
        let m1 = update_multipliers(&m, &v).unwrap();
        assert!(m1.lambda.iter().all(|x| (x - 0.2).abs() < 1e-15));
        let m2 = update_multipliers(&m1, &Families::filled(&net, 0.0)).unwrap();
        assert_eq!(m2, m1);
        let mut h = Multipliers::new(&net, 0.0, 0.5).unwrap();
        for _ in 0..2 {
            h = update_multipliers(&h, &Families::filled(&net, 1.0)).unwrap();
        }
        assert!(h.lambda.iter().all(|x| x == 1.0));
        assert!(update_multipliers(&m, &Families::filled(&net, -1.0)).is_err());
    }

    #[test]
    fn decoded_predictions_respect_boxes() {
        let net = bundled("wscc9").unwrap();
        let raw: Vec<f64> = (0..proxy_outputs(&net)).map(|i| (i as f64 - 10.0) * 7.0).collect();
        let d = decode_raw(&net, &raw);
        assert_eq!(d.v_ang[net.reference_bus], 0.0);
        for (k, g) in net.generators.iter().enumerate() {
            assert!(d.p_r[k] >= g.p_min && d.p_r[k] <= g.p_max);
            assert!(d.q_r[k] >= g.q_min && d.q_r[k] <= g.q_max);
        }
        for (i, b) in net.buses.iter().enumerate() {
            assert!(d.v_mag[i] >= b.v_min && d.v_mag[i] <= b.v_max);
        }
    }

    #[test]
    fn modes_parse_and_print() {
        for m in [Mode::Dynopf, Mode::BaselineMse, Mode::BaselineLd] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("dc3".parse::<Mode>().is_err());
    }
}
