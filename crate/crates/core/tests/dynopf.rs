use dynopf_core::acopf::{balance_residuals, build_dataset, line_flows, DispatchPoint, OpfDataset, OpfSample, SolverConfig};
use dynopf_core::dynamics::DynamicsConfig;
use dynopf_core::dynopf::{
    dynopf_loss, train, EQ_EPS, Batch, Families, LossContext, LtoProxy, Mode, Multipliers, TrainerConfig,
};
use dynopf_core::eval::surrogate_peaks;
use dynopf_core::grid::{bundled, perturb_loads, LoadProfile, Network};
use dynopf_core::node::{NodeConfig, NodeSurrogate, Normalization};
use dynopf_neural::smooth_abs;
use proptest::prelude::*;
use std::sync::OnceLock;

fn net() -> Network {
    bundled("wscc9").unwrap()
}

fn small_dataset() -> &'static OpfDataset {
    static DS: OnceLock<OpfDataset> = OnceLock::new();
    DS.get_or_init(|| build_dataset(&net(), 40, 0.2, 11, &SolverConfig::default()).unwrap())
}

fn surrogates(seed: u64) -> Vec<NodeSurrogate> {
    let norm = Normalization { delta_mean: 0.3, delta_std: 0.5, omega_std: 0.02, deriv_scale: [10.0, 10.0] };
    (0..3).map(|g| NodeSurrogate::new(g, norm, &NodeConfig { hidden: vec![8, 8], substeps: 1 }, seed + g as u64).unwrap()).collect()
}

fn proxy(seed: u64) -> LtoProxy {
    let ds = small_dataset();
    let loads: Vec<&LoadProfile> = ds.samples.iter().map(|s| &s.load).collect();
    LtoProxy::new(&net(), &[16, 16], &loads, seed).unwrap()
}

fn dyn_cfg(margin: f64) -> TrainerConfig {
    TrainerConfig { stability_margin: margin, hidden: vec![16, 16], ..Default::default() }
}

#[test]
fn recorded_static_violations_match_direct_evaluation() {
    let n = net();
    let ctx = LossContext::new(&n, &DynamicsConfig::default());
    let ds = small_dataset();
    for seed in 0..4 {
        let px = proxy(seed);
        let s = &ds.samples[seed as usize];
        let batch = Batch::new(&px, &[s]).unwrap();
        let mult = Multipliers::new(&n, 1.0, 0.0).unwrap();
        let ev = dynopf_loss(&ctx, &px, &surrogates(0), &batch, &mult, &dyn_cfg(0.0)).unwrap();
        let d = px.predict(&n, &s.load).unwrap();
        let r = balance_residuals(&n, &d, &s.load).unwrap();
        for (i, ri) in r.iter().enumerate() {
            assert!((ev.violations.flow[i] - smooth_abs(ri.p, EQ_EPS)).abs() < 1e-9);
            assert!((ev.violations.flow[n.n_bus() + i] - smooth_abs(ri.q, EQ_EPS)).abs() < 1e-9);
        }
        let flows = line_flows(&n, &d).unwrap();
        for (l, (line, (f, b))) in n.lines.iter().zip(&flows).enumerate() {
            assert!((ev.violations.line[l] - (f.magnitude() - line.flow_limit).max(0.0)).abs() < 1e-9);
            assert!((ev.violations.line[n.n_line() + l] - (b.magnitude() - line.flow_limit).max(0.0)).abs() < 1e-9);
            let dth = d.v_ang[line.from] - d.v_ang[line.to];
            assert!((ev.violations.angle[l] - (dth - line.angle_limit).max(0.0)).abs() < 1e-12);
            assert!((ev.violations.angle[n.n_line() + l] - (-dth - line.angle_limit).max(0.0)).abs() < 1e-12);
        }
        assert!(ev.violations.ic.iter().all(|&v| v < 1e-9), "{:?}", ev.violations.ic);
    }
}

#[test]
fn recorded_stability_matches_surrogate_rollout() {
    let n = net();
    let dc = DynamicsConfig::default();
    let ctx = LossContext::new(&n, &dc);
    let s = &small_dataset().samples[3];
    let px = proxy(2);
    let sg = surrogates(5);
    for margin in [0.0, 1.0, 1.5] {
        let cfg = dyn_cfg(margin);
        let batch = Batch::new(&px, &[s]).unwrap();
        let ev = dynopf_loss(&ctx, &px, &sg, &batch, &Multipliers::new(&n, 1.0, 0.0).unwrap(), &cfg).unwrap();
        let d = px.predict(&n, &s.load).unwrap();
        let peaks = surrogate_peaks(&n, &d, &sg, &dc).unwrap();
        for (k, p) in peaks.iter().enumerate() {
            let want = (p - (dc.delta_max - margin)).max(0.0);
            assert!((ev.violations.stability[k] - want).abs() < 1e-9, "{k}: {} vs {want}", ev.violations.stability[k]);
        }
    }
}

#[test]
fn loss_decomposition_and_zero_multipliers() {
    let n = net();
    let ctx = LossContext::new(&n, &DynamicsConfig::default());
    let ds = small_dataset();
    let px = proxy(1);
    let batch = Batch::new(&px, &ds.subset(&[0, 1, 2, 3, 4])).unwrap();
    let cfg = dyn_cfg(1.2);
    let zero = dynopf_loss(&ctx, &px, &surrogates(1), &batch, &Multipliers::new(&n, 0.0, 0.0).unwrap(), &cfg).unwrap();
    assert_eq!(zero.breakdown.total, zero.breakdown.pred);
    let one = dynopf_loss(&ctx, &px, &surrogates(1), &batch, &Multipliers::new(&n, 1.0, 0.0).unwrap(), &cfg).unwrap();
    let b = one.breakdown;
    assert_eq!(b.total, b.pred + b.flow + b.line + b.angle + b.ic + b.stability);
    assert!(b.stability > 0.0);
    let v: f64 = one.violations.stability.iter().sum();
    assert!((b.stability - v).abs() < 1e-12);
    let mse = dynopf_loss(&ctx, &px, &[], &batch, &Multipliers::new(&n, 1.0, 0.0).unwrap(), &TrainerConfig { mode: Mode::BaselineMse, ..cfg.clone() }).unwrap();
    assert_eq!(mse.breakdown.total, b.pred);
}

fn total_loss(ctx: &LossContext, px: &LtoProxy, sg: &[NodeSurrogate], batch: &Batch, cfg: &TrainerConfig) -> f64 {
    let m = Multipliers::new(&net(), 1.0, 0.0).unwrap();
    dynopf_loss(ctx, px, sg, batch, &m, cfg).unwrap().breakdown.total
}

#[test]
fn stability_gradient_reaches_proxy_and_matches_finite_differences() {
    let n = net();
    let ctx = LossContext::new(&n, &DynamicsConfig::default());
    let ds = small_dataset();
    let sg = surrogates(3);
    let base = proxy(4);
    let batch = Batch::new(&base, &ds.subset(&[5, 6])).unwrap();
    // Only the stability family is active, so its gradient is isolated.
    let cfg = TrainerConfig { include_static: false, ..dyn_cfg(1.3) };
    let m = Multipliers::new(&n, 1.0, 0.0).unwrap();
    let mut lambda = m.clone();
    lambda.lambda = Families { stability: vec![1.0; 3], ..Families::filled(&n, 0.0) };
    let ev = dynopf_loss(&ctx, &base, &sg, &batch, &lambda, &cfg).unwrap();
    assert!(ev.breakdown.stability > 0.0);
    let only_stab = |px: &LtoProxy| dynopf_loss(&ctx, px, &sg, &batch, &lambda, &cfg).unwrap().breakdown;
    let g = ev.proxy_grads.flat();
    let theta = base.model.flat_params();
    let mut checked = 0;
    let mut nonzero = 0;
    for &i in &[0usize, 7, 40, 101, 200, 333, theta.len() - 1, theta.len() - 5] {
        let h = 1e-6 * theta[i].abs().max(1.0);
        let eval = |x: f64| {
            let mut p = base.clone();
            let mut t = theta.clone();
            t[i] = x;
            p.model.set_flat_params(&t).unwrap();
            let b = only_stab(&p);
            b.pred + b.stability
        };
        let fd = (eval(theta[i] + h) - eval(theta[i] - h)) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        assert!(err < 1e-3, "param {i}: fd {fd} ad {}", g[i]);
        checked += 1;
        nonzero += usize::from(g[i] != 0.0);
    }
    assert_eq!(checked, 8);
    assert!(nonzero > 0);
    let _ = total_loss(&ctx, &base, &sg, &batch, &cfg);
}

#[test]
fn stability_gradient_reaches_surrogate_parameters() {
    let n = net();
    let ctx = LossContext::new(&n, &DynamicsConfig::default());
    let ds = small_dataset();
    let px = proxy(6);
    let batch = Batch::new(&px, &ds.subset(&[7, 8, 9])).unwrap();
    let m = Multipliers::new(&n, 1.0, 0.0).unwrap();
    let ev = dynopf_loss(&ctx, &px, &surrogates(2), &batch, &m, &dyn_cfg(1.3)).unwrap();
    assert!(ev.node_grads.iter().any(|g| g.flat().iter().any(|&x| x != 0.0)));
    let frozen = dynopf_loss(&ctx, &px, &surrogates(2), &batch, &m, &TrainerConfig { freeze_node: true, ..dyn_cfg(1.3) }).unwrap();
    assert!(frozen.node_grads.iter().all(|g| g.flat().iter().all(|&x| x == 0.0)));
    assert_eq!(frozen.proxy_grads, ev.proxy_grads);
}

fn short(mode: Mode, rho: f64) -> TrainerConfig {
    TrainerConfig { mode, epochs: 3, batch: 8, rho, hidden: vec![16, 16], seed: 9, stability_margin: 1.0, ..Default::default() }
}

#[test]
fn degenerate_multipliers_reproduce_the_mse_baseline() {
    let n = net();
    let ds = small_dataset();
    let a = train(&n, ds, &surrogates(0), &short(Mode::Dynopf, 0.0), None).unwrap();
    let b = train(&n, ds, &surrogates(0), &short(Mode::BaselineMse, 0.0), None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.loss.total, y.loss.total);
        assert_eq!(x.loss.pred, y.loss.pred);
        assert_eq!(x.val_mse, y.val_mse);
        assert_eq!(x.train_unstable_pct, y.train_unstable_pct);
    }
    assert_eq!(a.proxy, b.proxy);
}

#[test]
fn training_is_deterministic_and_multipliers_are_monotone() {
    let n = net();
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let a = train(&n, ds, &surrogates(0), &short(Mode::Dynopf, 0.5), Some(dir.path())).unwrap();
    let b = train(&n, ds, &surrogates(0), &short(Mode::Dynopf, 0.5), None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!((x.loss, x.lambda_sum, x.val_mse, x.val_gap_pct), (y.loss, y.lambda_sum, y.val_mse, y.val_gap_pct));
    }
    assert_eq!(a.proxy, b.proxy);
    assert!(a.log.windows(2).all(|w| w[1].lambda_sum >= w[0].lambda_sum));
    assert!(a.log.last().unwrap().lambda_sum > 0.0);
    for f in ["trainer_config.json", "epochs.csv", "proxy.json", "node_g0.json", "multipliers.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let restored = LtoProxy::from_checkpoint(&dynopf_neural::Checkpoint::load(&dir.path().join("proxy.json")).unwrap()).unwrap();
    assert_eq!(restored, a.proxy);
}

#[test]
fn baselines_leave_surrogates_untouched() {
    let n = net();
    let sg = surrogates(0);
    for mode in [Mode::BaselineMse, Mode::BaselineLd] {
        let out = train(&n, small_dataset(), &sg, &short(mode, 0.5), None).unwrap();
        assert_eq!(out.surrogates, sg);
        assert!(out.multipliers.lambda.stability.iter().all(|&x| x == 0.0));
    }
}

fn shift(d: &DispatchPoint, c: f64, reference: usize) -> DispatchPoint {
    let mut s = d.clone();
    for a in &mut s.v_ang {
        *a += c;
    }
    let r = s.v_ang[reference];
    for a in &mut s.v_ang {
        *a -= r;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_stay_in_boxes(seed in 0u64..1000, k in 0usize..40) {
        let n = net();
        let px = proxy(seed);
        let d = px.predict(&n, &small_dataset().samples[k].load).unwrap();
        prop_assert_eq!(d.v_ang[n.reference_bus], 0.0);
        for (i, g) in n.generators.iter().enumerate() {
            prop_assert!(d.p_r[i] >= g.p_min && d.p_r[i] <= g.p_max);
            prop_assert!(d.q_r[i] >= g.q_min && d.q_r[i] <= g.q_max);
        }
        for (i, b) in n.buses.iter().enumerate() {
            prop_assert!(d.v_mag[i] >= b.v_min && d.v_mag[i] <= b.v_max);
        }
    }

    #[test]
    fn balance_residuals_ignore_angle_reference(seed in 0u64..1000, c in -1.0f64..1.0) {
        let n = net();
        let load = perturb_loads(&n, 0.2, seed).unwrap();
        let s: &OpfSample = &small_dataset().samples[(seed % 40) as usize];
        let d = &s.optimum;
        let a = balance_residuals(&n, d, &load).unwrap();
        let b = balance_residuals(&n, &shift(d, c, n.reference_bus), &load).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.p - y.p).abs() < 1e-12 && (x.q - y.q).abs() < 1e-12);
        }
    }
}
