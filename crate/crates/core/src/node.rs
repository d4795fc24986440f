//! Neural-ODE surrogates of single-machine swing dynamics.
//!
//! The learned field sees the normalized state `(z_δ, z_ω)` together with
//! four conditioning channels `(|V|, θ, p_m, e_q0)` that are constant along
//! a trajectory, and predicts the two state derivatives. The conditioning
//! channels therefore stay exactly constant under integration.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use dynopf_neural::{Activation, BoundNet, Checkpoint, DenseNet, Gradients, Optimizer, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acopf::Split;
use crate::dynamics::{
    canonical_grid, scenario, simulate, DynamicsConfig, IntegratorConfig, MachineScenario, MachineState, Method,
    GRID_POINTS, HORIZON,
};
use crate::grid::Network;
use crate::{par, CoreError};

/// Width of the field input: two state and four conditioning channels.
pub const FIELD_INPUTS: usize = 6;
const GRID_STEPS: usize = GRID_POINTS - 1;
const GRID_DT: f64 = HORIZON / GRID_STEPS as f64;

/// Initial state of one machine plus the parameters it is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInput {
    pub delta0: f64,
    pub omega0: f64,
    pub v_mag: f64,
    pub v_ang: f64,
    pub p_m: f64,
    pub e_q0: f64,
}

impl NodeInput {
    pub fn from_scenario(sc: &MachineScenario) -> Self {
        Self {
            delta0: sc.x0.delta,
            omega0: sc.x0.omega,
            v_mag: sc.params.v_mag,
            v_ang: sc.params.v_ang,
            p_m: sc.params.p_m,
            e_q0: sc.params.e_q0,
        }
    }

    fn to_array(self) -> [f64; 6] {
        [self.delta0, self.omega0, self.v_mag, self.v_ang, self.p_m, self.e_q0]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self { delta0: v[0], omega0: v[1], v_mag: v[2], v_ang: v[3], p_m: v[4], e_q0: v[5] }
    }

    /// Conditioning channels centred at the nominal operating point.
    pub fn condition(&self) -> [f64; 4] {
        [self.v_mag - 1.0, self.v_ang, self.p_m - 1.0, self.e_q0 - 1.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub delta_mean: f64,
    pub delta_std: f64,
    pub omega_std: f64,
    /// Per-channel scale applied to the network output.
    pub deriv_scale: [f64; 2],
}

impl Normalization {
    pub fn identity() -> Self {
        Self { delta_mean: 0.0, delta_std: 1.0, omega_std: 1.0, deriv_scale: [1.0, 1.0] }
    }

    pub fn encode(&self, s: MachineState) -> [f64; 2] {
        [(s.delta - self.delta_mean) / self.delta_std, (s.omega - 1.0) / self.omega_std]
    }

    pub fn decode(&self, z: [f64; 2]) -> MachineState {
        MachineState { delta: z[0] * self.delta_std + self.delta_mean, omega: z[1] * self.omega_std + 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    pub hidden: Vec<usize>,
    /// Internal rk4 steps per canonical grid interval.
    pub substeps: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], substeps: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SurrogateMeta {
    generator: usize,
    normalization: Normalization,
    substeps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSurrogate {
    pub generator: usize,
    pub field: DenseNet,
    pub norm: Normalization,
    pub substeps: usize,
}

impl NodeSurrogate {
    pub fn new(generator: usize, norm: Normalization, cfg: &NodeConfig, seed: u64) -> Result<Self, CoreError> {
        if cfg.substeps == 0 || cfg.hidden.is_empty() {
            return Err(CoreError::InvalidArgument("surrogate needs hidden layers and substeps >= 1".into()));
        }
        let mut widths = vec![FIELD_INPUTS];
        widths.extend(&cfg.hidden);
        widths.push(2);
        let field = DenseNet::new(&widths, Activation::Tanh, Activation::Identity, seed)?;
        Ok(Self { generator, field, norm, substeps: cfg.substeps })
    }

    pub fn to_checkpoint(&self, optimizer: Option<&Optimizer>, seed: u64, epoch: usize) -> Result<Checkpoint, CoreError> {
        let mut ck = Checkpoint::capture(&self.field, optimizer, seed, epoch);
        let meta = SurrogateMeta { generator: self.generator, normalization: self.norm, substeps: self.substeps };
        ck.metadata = serde_json::to_value(meta).map_err(|e| CoreError::Format(e.to_string()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CoreError> {
        let meta: SurrogateMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| CoreError::Format(format!("surrogate metadata: {e}")))?;
        let field = ck.restore()?;
        if field.input_width() != FIELD_INPUTS || field.output_width() != 2 {
            return Err(CoreError::Format("checkpoint is not a swing surrogate".into()));
        }
        Ok(Self { generator: meta.generator, field, norm: meta.normalization, substeps: meta.substeps })
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        Ok(self.to_checkpoint(None, 0, 0)?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rolls the surrogate out over the canonical grid without recording.
    pub fn rollout(&self, x0: &NodeInput) -> Result<Vec<MachineState>, CoreError> {
        let z = self.rollout_normalized(self.norm.encode(MachineState { delta: x0.delta0, omega: x0.omega0 }), &x0.condition(), GRID_STEPS)?;
        Ok(z.into_iter().map(|z| self.norm.decode(z)).collect())
    }

    fn rollout_normalized(&self, z0: [f64; 2], cond: &[f64; 4], steps: usize) -> Result<Vec<[f64; 2]>, CoreError> {
        let mut fast = FastField::new(self, cond);
        let h = GRID_DT / self.substeps as f64;
        let mut z = z0;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(z);
        for k in 0..steps {
            for _ in 0..self.substeps {
                let k1 = fast.eval(z);
                let k2 = fast.eval([z[0] + 0.5 * h * k1[0], z[1] + 0.5 * h * k1[1]]);
                let k3 = fast.eval([z[0] + 0.5 * h * k2[0], z[1] + 0.5 * h * k2[1]]);
                let k4 = fast.eval([z[0] + h * k3[0], z[1] + h * k3[1]]);
                for i in 0..2 {
                    z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            if !(z[0].is_finite() && z[1].is_finite()) {
                return Err(CoreError::NonFinite { t: (k + 1) as f64 * GRID_DT });
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Records a batched rollout of `steps` grid intervals on `tape`.
    ///
    /// `z0` is `[B, 2]` in normalized coordinates and `cond` is `[B, 4]`
    /// (see [`NodeInput::condition`]). Returns the normalized state at every
    /// grid point, starting with `z0`.
    pub fn record(&self, tape: &mut Tape, bound: &BoundNet, z0: Var, cond: Var, steps: usize) -> Result<Vec<Var>, CoreError> {
        let field = TapeField::new(self, tape, bound, cond)?;
        let h = GRID_DT / self.substeps as f64;
        let mut z = z0;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(z);
        for _ in 0..steps {
            for _ in 0..self.substeps {
                let k1 = field.eval(tape, z)?;
                let y = tape.axpy(z, 0.5 * h, k1)?;
                let k2 = field.eval(tape, y)?;
                let y = tape.axpy(z, 0.5 * h, k2)?;
                let k3 = field.eval(tape, y)?;
                let y = tape.axpy(z, h, k3)?;
                let k4 = field.eval(tape, y)?;
                let s = tape.axpy(k1, 2.0, k2)?;
                let s = tape.axpy(s, 2.0, k3)?;
                let s = tape.add(s, k4)?;
                z = tape.axpy(z, h / 6.0, s)?;
            }
            out.push(z);
        }
        Ok(out)
    }

    /// Rotor angle column `[B, 1]` decoded from a normalized state.
    pub fn decode_delta(&self, tape: &mut Tape, z: Var) -> Result<Var, CoreError> {
        let d = tape.col(z, 0)?;
        let d = tape.scale(d, self.norm.delta_std);
        Ok(tape.offset(d, self.norm.delta_mean))
    }
}

/// Allocation-free single-instance field evaluation.
struct FastField<'a> {
    net: &'a DenseNet,
    dsc: [f64; 2],
    /// First-layer pre-activation contribution of the constant channels.
    cb: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'a> FastField<'a> {
    fn new(s: &'a NodeSurrogate, cond: &[f64; 4]) -> Self {
        let l0 = &s.field.layers()[0];
        let n = l0.weight.cols();
        let w = l0.weight.data();
        let mut cb = l0.bias.data().to_vec();
        for (r, &c) in cond.iter().enumerate() {
            let row = &w[(r + 2) * n..(r + 3) * n];
            for (o, &x) in cb.iter_mut().zip(row) {
                *o += c * x;
            }
        }
        let widest = s.field.widths().into_iter().max().unwrap_or(0);
        Self { net: &s.field, dsc: s.norm.deriv_scale, cb, a: vec![0.0; widest], b: vec![0.0; widest] }
    }

    fn eval(&mut self, z: [f64; 2]) -> [f64; 2] {
        let layers = self.net.layers();
        let l0 = &layers[0];
        let n0 = l0.weight.cols();
        let w = l0.weight.data();
        for j in 0..n0 {
            self.a[j] = l0.activation.apply(self.cb[j] + z[0] * w[j] + z[1] * w[n0 + j]);
        }
        let mut width = n0;
        for l in &layers[1..] {
            let n = l.weight.cols();
            let w = l.weight.data();
            self.b[..n].copy_from_slice(l.bias.data());
            for (k, &x) in self.a[..width].iter().enumerate() {
                let row = &w[k * n..(k + 1) * n];
                for (o, &wv) in self.b[..n].iter_mut().zip(row) {
                    *o += x * wv;
                }
            }
            if l.activation != Activation::Identity {
                for v in &mut self.b[..n] {
                    *v = l.activation.apply(*v);
                }
            }
            std::mem::swap(&mut self.a, &mut self.b);
            width = n;
        }
        [self.a[0] * self.dsc[0], self.a[1] * self.dsc[1]]
    }
}

/// Tape-recorded field with the constant-channel contribution hoisted out
/// of the integration loop and the output scale folded into the last layer.
struct TapeField {
    w_state: Var,
    cb: Var,
    hidden: Vec<(Var, Var, Activation)>,
    first_act: Activation,
}

impl TapeField {
    fn new(s: &NodeSurrogate, tape: &mut Tape, bound: &BoundNet, cond: Var) -> Result<Self, CoreError> {
        let params = bound.params();
        let acts = bound.activations();
        let (w1, b1) = params[0];
        let mut sel_state = Tensor::zeros(2, FIELD_INPUTS);
        sel_state.set(0, 0, 1.0);
        sel_state.set(1, 1, 1.0);
        let mut sel_cond = Tensor::zeros(4, FIELD_INPUTS);
        for r in 0..4 {
            sel_cond.set(r, r + 2, 1.0);
        }
        let sel_state = tape.constant(sel_state);
        let sel_cond = tape.constant(sel_cond);
        let w_state = tape.matmul(sel_state, w1)?;
        let w_cond = tape.matmul(sel_cond, w1)?;
        let cw = tape.matmul(cond, w_cond)?;
        let cb = tape.add(cw, b1)?;
        let mut hidden = Vec::new();
        let last = params.len() - 1;
        for (i, (&(w, b), &act)) in params.iter().zip(acts).enumerate().skip(1) {
            if i == last {
                let dsc = tape.constant(Tensor::row(&s.norm.deriv_scale));
                let w = tape.mul(w, dsc)?;
                let b = tape.mul(b, dsc)?;
                hidden.push((w, b, act));
            } else {
                hidden.push((w, b, act));
            }
        }
        if params.len() == 1 {
            return Err(CoreError::InvalidArgument("surrogate field needs a hidden layer".into()));
        }
        Ok(Self { w_state, cb, hidden, first_act: acts[0] })
    }

    fn eval(&self, tape: &mut Tape, z: Var) -> Result<Var, CoreError> {
        let h = tape.matmul(z, self.w_state)?;
        let h = tape.add(h, self.cb)?;
        let mut x = self.first_act.record(tape, h);
        for &(w, b, act) in &self.hidden {
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, b)?;
            x = act.record(tape, h);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSample {
    pub input: NodeInput,
    /// True-field states on the canonical grid.
    pub target: Vec<MachineState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeManifest {
    pub net_hash: String,
    pub generator: usize,
    pub n: usize,
    pub seed: u64,
    pub dynamics: DynamicsConfig,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDataset {
    pub samples: Vec<NodeSample>,
    pub split: Split,
    pub manifest: NodeManifest,
}

/// Samples operating points uniformly inside the generator's limits and
/// integrates the true field from each post-disturbance state.
pub fn sample_node_dataset(net: &Network, g: usize, n: usize, seed: u64, cfg: &DynamicsConfig) -> Result<NodeDataset, CoreError> {
    if n < 10 {
        return Err(CoreError::InvalidArgument(format!("dataset needs n >= 10, got {n}")));
    }
    let gen = net
        .generators
        .get(g)
        .ok_or_else(|| CoreError::InvalidArgument(format!("generator {g} out of range")))?;
    let bus = &net.buses[gen.bus];
    let band = net.max_angle_limit();
    let grid = canonical_grid();
    let budget = 5 * n;
    let mut samples = Vec::with_capacity(n);
    let mut next = 0;
    while samples.len() < n && next < budget {
        let chunk = (n - samples.len()).min(budget - next);
        let ids: Vec<usize> = (next..next + chunk).collect();
        let results = par::ordered_map(&ids, |_, &draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64);
            let p = rng.gen_range(gen.p_min..=gen.p_max);
            let q = rng.gen_range(gen.q_min..=gen.q_max);
            let v = rng.gen_range(bus.v_min..=bus.v_max);
            let th = rng.gen_range(-band..=band);
            let sc = scenario(gen, p, q, v, th, cfg)?;
            let tr = simulate(&sc, &cfg.integrator, &grid)?;
            Ok::<_, CoreError>(NodeSample { input: NodeInput::from_scenario(&sc), target: tr.states })
        });
        for r in results {
            match r {
                Ok(s) if samples.len() < n => samples.push(s),
                Ok(_) => {}
                Err(CoreError::StepLimit { .. }) | Err(CoreError::NonFinite { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        next += chunk;
    }
    if samples.len() < n {
        return Err(CoreError::InvalidArgument(format!("only {} of {n} trajectories integrated", samples.len())));
    }
    Ok(NodeDataset {
        split: Split::new(n, seed),
        manifest: NodeManifest { net_hash: net.content_hash(), generator: g, n, seed, dynamics: cfg.clone(), attempts: next },
        samples,
    })
}

impl NodeDataset {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,split,delta0,omega0,v_mag,v_ang,p_m,e_q0");
        for c in ["d", "w"] {
            for k in 0..GRID_POINTS {
                let _ = write!(out, ",{c}{k}");
            }
        }
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            let _ = write!(out, "{i},{}", self.split.tag(i));
            for v in s.input.to_array() {
                let _ = write!(out, ",{v:?}");
            }
            for v in s.target.iter().map(|x| x.delta).chain(s.target.iter().map(|x| x.omega)) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, manifest: NodeManifest) -> Result<Self, CoreError> {
        let width = 2 + 6 + 2 * GRID_POINTS;
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
            let (d, w) = nums[6..].split_at(GRID_POINTS);
            samples.push(NodeSample {
                input: NodeInput::from_slice(&nums[..6]),
                target: d.iter().zip(w).map(|(&delta, &omega)| MachineState { delta, omega }).collect(),
            });
        }
        Ok(Self { samples, split: Split { train, val, test }, manifest })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let m = serde_json::to_string_pretty(&self.manifest).map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.manifest.json")), m)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.csv")))?;
        let manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.manifest.json")))?)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        Self::from_csv(&text, manifest)
    }

    pub fn indices(&self, split: SplitTag) -> &[usize] {
        match split {
            SplitTag::Train => &self.split.train,
            SplitTag::Val => &self.split.val,
            SplitTag::Test => &self.split.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

fn is_stable(s: &NodeSample, delta_max: f64) -> bool {
    s.target.iter().all(|x| x.delta <= delta_max)
}

/// Normalization statistics from the stable training trajectories (all
/// training trajectories if none is stable).
pub fn fit_normalization(data: &NodeDataset, delta_max: f64) -> Normalization {
    let train: Vec<&NodeSample> = data.split.train.iter().map(|&i| &data.samples[i]).collect();
    let stable: Vec<&NodeSample> = train.iter().copied().filter(|s| is_stable(s, delta_max)).collect();
    let pool = if stable.is_empty() { train } else { stable };
    let mean_std = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
        (m, var.sqrt())
    };
    let floor = |s: f64, fallback: f64| if s > 1e-9 { s } else { fallback };
    let (dm, ds) = mean_std(&mut pool.iter().flat_map(|s| s.target.iter().map(|x| x.delta)));
    let (_, ws) = mean_std(&mut pool.iter().flat_map(|s| s.target.iter().map(|x| x.omega - 1.0)));
    let mut norm = Normalization { delta_mean: dm, delta_std: floor(ds, 1.0), omega_std: floor(ws, 1e-3), deriv_scale: [1.0, 1.0] };
    for c in 0..2 {
        let (_, s) = mean_std(&mut pool.iter().flat_map(|s| {
            let z: Vec<[f64; 2]> = s.target.iter().map(|x| norm.encode(*x)).collect();
            (0..GRID_STEPS).map(move |k| (z[k + 1][c] - z[k][c]) / GRID_DT).collect::<Vec<_>>()
        }));
        norm.deriv_scale[c] = floor(s, 1.0);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Grid intervals per training window in the windowed phase.
    pub window: usize,
    /// Fraction of epochs trained on short windows before switching to the
    /// full horizon.
    pub window_fraction: f64,
    /// Target angle clip for the loss, radians.
    pub clip: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub delta_max: f64,
    /// Abort when validation loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for NodeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 64,
            lr: 1e-3,
            window: 5,
            window_fraction: 0.5,
            clip: 4.0 * PI,
            grad_clip: 1.0,
            seed: 0,
            delta_max: PI / 2.0,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeTrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl NodeTrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let _ = writeln!(out, "{},{t:?},{v:?}", e + 1);
        }
        out
    }
}

fn clipped_targets(s: &NodeSample, norm: &Normalization, clip: f64) -> Vec<[f64; 2]> {
    s.target
        .iter()
        .map(|x| norm.encode(MachineState { delta: x.delta.clamp(-clip, clip), omega: x.omega }))
        .collect()
}

/// Full-horizon normalized MSE against clipped targets.
pub fn node_loss(s: &NodeSurrogate, samples: &[&NodeSample], clip: f64) -> Result<f64, CoreError> {
    let per = par::ordered_map(samples, |_, smp| {
        let z0 = s.norm.encode(MachineState { delta: smp.input.delta0, omega: smp.input.omega0 });
        let z = s.rollout_normalized(z0, &smp.input.condition(), GRID_STEPS)?;
        let t = clipped_targets(smp, &s.norm, clip);
        Ok::<_, CoreError>(z.iter().zip(&t).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum::<f64>())
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / (samples.len() * GRID_POINTS * 2).max(1) as f64)
}

/// Fits the surrogate field to true-field trajectories by backpropagating
/// through the unrolled integrator.
pub fn train_node(s: &mut NodeSurrogate, data: &NodeDataset, cfg: &NodeTrainConfig) -> Result<NodeTrainReport, CoreError> {
    if data.split.train.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.window == 0 || cfg.window > GRID_STEPS {
        return Err(CoreError::InvalidArgument(format!("invalid surrogate training configuration {cfg:?}")));
    }
    let targets: Vec<Vec<[f64; 2]>> = data.samples.iter().map(|smp| clipped_targets(smp, &s.norm, cfg.clip)).collect();
    let unclipped: Vec<Vec<bool>> =
        data.samples.iter().map(|smp| smp.target.iter().map(|x| x.delta.abs() < cfg.clip).collect()).collect();
    let val: Vec<&NodeSample> = data.split.val.iter().map(|&i| &data.samples[i]).collect();
    let val_ref = if val.is_empty() { None } else { Some(node_loss(s, &val, cfg.clip)?) };
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = NodeTrainReport::default();
    let window_epochs = (cfg.epochs as f64 * cfg.window_fraction).round() as usize;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr * 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
        let windowed = epoch < window_epochs;
        let mut order = data.split.train.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut rows: Vec<(usize, usize)> = Vec::with_capacity(chunk.len());
            let steps = if windowed { cfg.window } else { GRID_STEPS };
            for &i in chunk {
                let start = if windowed { rng.gen_range(0..=GRID_STEPS - cfg.window) } else { 0 };
                // Segments that leave the clip band carry no useful shape information.
                if !unclipped[i][start..=start + steps].iter().all(|&b| b) {
                    continue;
                }
                rows.push((i, start));
            }
            if rows.is_empty() {
                continue;
            }
            let (loss, grads) = batch_gradient(s, data, &targets, &rows, steps)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(CoreError::Divergence(format!("non-finite surrogate loss at epoch {}", epoch + 1)));
            }
            let grads = clip_gradients(grads, cfg.grad_clip);
            opt.step(&mut s.field, &grads)?;
            sum += loss * rows.len() as f64;
            count += rows.len();
        }
        report.train_loss.push(sum / count.max(1) as f64);
        let v = if val.is_empty() { f64::NAN } else { node_loss(s, &val, cfg.clip)? };
        report.val_loss.push(v);
        if let Some(v0) = val_ref {
            if !(v <= cfg.divergence_factor * v0) {
                return Err(CoreError::Divergence(format!(
                    "surrogate validation loss {v:.4e} exceeds {}x its initial value {v0:.4e} at epoch {}",
                    cfg.divergence_factor,
                    epoch + 1
                )));
            }
        }
    }
    Ok(report)
}

fn batch_gradient(
    s: &NodeSurrogate,
    data: &NodeDataset,
    targets: &[Vec<[f64; 2]>],
    rows: &[(usize, usize)],
    steps: usize,
) -> Result<(f64, Gradients), CoreError> {
    let b = rows.len();
    let mut z0 = Vec::with_capacity(2 * b);
    let mut cond = Vec::with_capacity(4 * b);
    for &(i, start) in rows {
        z0.extend_from_slice(&targets[i][start]);
        cond.extend_from_slice(&data.samples[i].input.condition());
    }
    let mut tape = Tape::new();
    let bound = s.field.bind(&mut tape);
    let z0 = tape.constant(Tensor::matrix(b, 2, z0)?);
    let cond = tape.constant(Tensor::matrix(b, 4, cond)?);
    let zs = s.record(&mut tape, &bound, z0, cond, steps)?;
    let mut total: Option<Var> = None;
    for (k, &z) in zs.iter().enumerate().skip(1) {
        let mut t = Vec::with_capacity(2 * b);
        for &(i, start) in rows {
            t.extend_from_slice(&targets[i][start + k]);
        }
        let t = tape.constant(Tensor::matrix(b, 2, t)?);
        let d = tape.sub(z, t)?;
        let d = tape.square(d);
        let d = tape.sum_all(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let total = total.expect("at least one step");
    let loss = tape.scale(total, 1.0 / (b * (steps + 1) * 2) as f64);
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.gradients(&tape)))
}

pub(crate) fn clip_gradients(mut g: Gradients, max_norm: f64) -> Gradients {
    let norm = g.flat().iter().map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        g.scale(max_norm / norm);
    }
    g
}

/// Percentage ℓ² error `100 ‖x̂ − x‖ / ‖x‖` over both state components and
/// all grid points, averaged over `samples`.
pub fn node_error_on(s: &NodeSurrogate, samples: &[&NodeSample]) -> Result<f64, CoreError> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("no samples to evaluate".into()));
    }
    let per = par::ordered_map(samples, |_, smp| {
        let pred = s.rollout(&smp.input)?;
        Ok::<_, CoreError>(percentage_error(&pred, &smp.target))
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / samples.len() as f64)
}

pub fn percentage_error(pred: &[MachineState], target: &[MachineState]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        num += (p.delta - t.delta).powi(2) + (p.omega - t.omega).powi(2);
        den += t.delta.powi(2) + t.omega.powi(2);
    }
    100.0 * (num / den).sqrt()
}

pub fn node_error(s: &NodeSurrogate, data: &NodeDataset, split: SplitTag) -> Result<f64, CoreError> {
    let samples: Vec<&NodeSample> = data.indices(split).iter().map(|&i| &data.samples[i]).collect();
    node_error_on(s, &samples)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
}

impl Timing {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeBenchReport {
    pub instances: usize,
    pub surrogate: Timing,
    pub dopri5: Timing,
    pub bosh3: Timing,
}

impl NodeBenchReport {
    pub fn speedup(&self) -> f64 {
        self.dopri5.mean / self.surrogate.mean
    }
}

/// Per-instance wall time of surrogate inference against true-field
/// integration on the canonical grid, single-threaded.
pub fn bench_node_vs_solver(
    s: &NodeSurrogate,
    gen: &crate::grid::Generator,
    instances: &[NodeInput],
    cfg: &DynamicsConfig,
) -> Result<NodeBenchReport, CoreError> {
    let grid = canonical_grid();
    let scenarios: Vec<MachineScenario> = instances
        .iter()
        .map(|x| {
            let mut sc = scenario(gen, x.p_m, 0.0, x.v_mag, x.v_ang, cfg)?;
            sc.params.e_q0 = x.e_q0;
            sc.x0 = MachineState { delta: x.delta0, omega: x.omega0 };
            Ok(sc)
        })
        .collect::<Result<_, CoreError>>()?;
    let time = |f: &mut dyn FnMut(usize) -> Result<(), CoreError>| -> Result<Timing, CoreError> {
        let mut xs = Vec::with_capacity(instances.len());
        for i in 0..instances.len() {
            let t = Instant::now();
            f(i)?;
            xs.push(t.elapsed().as_secs_f64());
        }
        Ok(Timing::from_samples(&xs))
    };
    let surrogate = time(&mut |i| s.rollout(&instances[i]).map(|_| ()))?;
    let dopri5 = time(&mut |i| simulate(&scenarios[i], &cfg.integrator, &grid).map(|_| ()))?;
    let bs = IntegratorConfig { method: Method::Bosh3, ..cfg.integrator.clone() };
    let bosh3 = time(&mut |i| simulate(&scenarios[i], &bs, &grid).map(|_| ()))?;
    Ok(NodeBenchReport { instances: instances.len(), surrogate, dopri5, bosh3 })
}
