use dynopf_core::dynamics::{
    canonical_grid, electrical_power, initial_conditions, initial_residuals, integrate, scenario, simulate,
    stability_check, stator_currents, swing_rhs, DynamicsConfig, IntegratorConfig, MachineParams, MachineState,
    Method,
};
use dynopf_core::grid::{bundled, Generator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gens() -> Vec<Generator> {
    bundled("wscc9").unwrap().generators
}

/// Independent Newton solve of the steady-state power equations in (δ, e).
fn newton_ic(g: &Generator, p: f64, q: f64, v: f64, th: f64) -> (f64, f64) {
    let (mut d, mut e) = (th, 1.0);
    for _ in 0..50 {
        let (s, c) = (d - th).sin_cos();
        let x = g.x_d_prime;
        let f1 = e * v * s / x - p;
        let f2 = (e * v * c - v * v) / x - q;
        let (a, b, cc, dd) = (e * v * c / x, v * s / x, -e * v * s / x, v * c / x);
        let det = a * dd - b * cc;
        d -= (dd * f1 - b * f2) / det;
        e -= (-cc * f1 + a * f2) / det;
    }
    (d, e)
}

#[test]
fn closed_form_initial_conditions_match_newton_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in gens() {
        for _ in 0..200 {
            let p = rng.gen_range(g.p_min..g.p_max);
            let q = rng.gen_range(g.q_min..g.q_max);
            let v = rng.gen_range(0.9..1.1);
            let th = rng.gen_range(-0.5..0.5);
            let ic = initial_conditions(&g, p, q, v, th).unwrap();
            let (rp, rq) = initial_residuals(&g, p, q, v, th, ic.delta0, ic.e_q0);
            assert!(rp.abs() <= 1e-10 && rq.abs() <= 1e-10);
            let (d, e) = newton_ic(&g, p, q, v, th);
            assert!((d - ic.delta0).abs() < 1e-9 && (e - ic.e_q0).abs() < 1e-9);
        }
    }
    let mut g = gens()[0].clone();
    g.x_d_prime = 1.0;
    let ic = initial_conditions(&g, 1.0, 0.0, 1.0, 0.0).unwrap();
    assert!((ic.delta0 - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    assert!((ic.e_q0 - 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn reduction_identity_and_steady_state_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for g in gens() {
        for _ in 0..100 {
            let p = rng.gen_range(g.p_min..g.p_max);
            let q = rng.gen_range(g.q_min..g.q_max);
            let v = rng.gen_range(0.9..1.1);
            let th = rng.gen_range(-0.5..0.5);
            let sc = scenario(&g, p, q, v, th, &DynamicsConfig::default()).unwrap();
            let delta = rng.gen_range(-3.0..3.0);
            let (i_d, i_q) = stator_currents(&sc.params, 0.0, sc.params.e_q0, delta);
            let lhs = p - electrical_power(0.0, sc.params.e_q0, i_d, i_q);
            let rhs = p - sc.params.coupling() * (delta - th).sin();
            assert!((lhs - rhs).abs() <= 1e-12, "{lhs} {rhs}");
            let f = swing_rhs(&sc.params, MachineState { delta: sc.equilibrium.delta0, omega: 1.0 });
            assert_eq!(f.delta, 0.0);
            assert!(f.omega.abs() < 1e-13);
        }
    }
}

/// `exp(A t)` for a real 2×2 matrix with complex eigenvalues.
fn expm2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let w = (det - tr * tr / 4.0).sqrt();
    let (c, s) = ((w * t).cos(), (w * t).sin() / w);
    let k = (tr * t / 2.0).exp();
    let h = tr / 2.0;
    [
        [k * (c + s * (a[0][0] - h)), k * s * a[0][1]],
        [k * s * a[1][0], k * (c + s * (a[1][1] - h))],
    ]
}

fn linear_error(method: Method, dt: f64, a: [[f64; 2]; 2], x0: [f64; 2], horizon: f64) -> f64 {
    let cfg = IntegratorConfig::fixed(method, dt, horizon);
    let sol = integrate(
        &mut |_, x: &[f64], dx: &mut [f64]| {
            dx[0] = a[0][0] * x[0] + a[0][1] * x[1];
            dx[1] = a[1][0] * x[0] + a[1][1] * x[1];
        },
        &x0,
        &cfg,
    )
    .unwrap();
    let e = expm2(a, horizon);
    let exact = [e[0][0] * x0[0] + e[0][1] * x0[1], e[1][0] * x0[0] + e[1][1] * x0[1]];
    let y = sol.last();
    ((y[0] - exact[0]) / exact[0].abs().max(1.0)).hypot(y[1] - exact[1])
}

fn linearized(g: &Generator) -> [[f64; 2]; 2] {
    let sc = scenario(g, 0.8 * g.p_max, 0.0, 1.0, 0.0, &DynamicsConfig::default()).unwrap();
    let k = sc.params.coupling() * (sc.equilibrium.delta0 - sc.params.v_ang).cos();
    [[0.0, sc.params.omega_base], [-k / sc.params.inertia, -sc.params.damping / sc.params.inertia]]
}

#[test]
fn observed_orders_of_convergence() {
    for g in gens() {
        let a = linearized(&g);
        let x0 = [0.2, 0.0];
        let r_euler = linear_error(Method::Euler, 2e-5, a, x0, 1.0) / linear_error(Method::Euler, 1e-5, a, x0, 1.0);
        let r_rk4 = linear_error(Method::Rk4, 4e-3, a, x0, 1.0) / linear_error(Method::Rk4, 2e-3, a, x0, 1.0);
        assert!((1.0..4.0).contains(&r_euler), "euler ratio {r_euler}");
        assert!((8.0..32.0).contains(&r_rk4), "rk4 ratio {r_rk4}");
    }
}

fn stable_instances(n: usize, seed: u64) -> Vec<dynopf_core::dynamics::MachineScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DynamicsConfig::default();
    let gs = gens();
    let grid = canonical_grid();
    let mut out = Vec::new();
    while out.len() < n {
        let g = &gs[out.len() % gs.len()];
        let sc = scenario(
            g,
            rng.gen_range(g.p_min..g.p_max),
            rng.gen_range(g.q_min..g.q_max),
            rng.gen_range(0.9..1.1),
            rng.gen_range(-0.5..0.5),
            &cfg,
        )
        .unwrap();
        let tr = simulate(&sc, &cfg.integrator, &grid).unwrap();
        if stability_check(&tr, cfg.delta_max).unwrap().stable {
            out.push(sc);
        }
    }
    out
}

#[test]
fn dopri5_agrees_with_fine_rk4() {
    let grid = canonical_grid();
    for sc in stable_instances(20, 5) {
        let fine = simulate(&sc, &IntegratorConfig::fixed(Method::Rk4, 1e-4, 3.0), &grid).unwrap();
        let adapt = simulate(&sc, &IntegratorConfig::default(), &grid).unwrap();
        for (a, b) in fine.states.iter().zip(&adapt.states) {
            assert!((a.delta - b.delta).abs() <= 1e-5 && (a.omega - b.omega).abs() <= 1e-5);
        }
    }
}

#[test]
fn bosh3_agrees_with_dopri5() {
    let grid = canonical_grid();
    for sc in stable_instances(5, 6) {
        let a = simulate(&sc, &IntegratorConfig::default(), &grid).unwrap();
        let b = simulate(&sc, &IntegratorConfig { method: Method::Bosh3, ..Default::default() }, &grid).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x.delta - y.delta).abs() <= 1e-5);
        }
    }
}

#[test]
fn equilibrium_is_preserved_without_disturbance() {
    let cfg = DynamicsConfig { clearing_time: 0.0, ..Default::default() };
    let dense: Vec<f64> = (0..=300).map(|k| k as f64 * 0.01).collect();
    for g in gens() {
        let sc = scenario(&g, 0.7 * g.p_max, 0.1, 1.02, 0.1, &cfg).unwrap();
        for method in [Method::Dopri5, Method::Bosh3, Method::Rk4] {
            let ic = IntegratorConfig { method, dt: 1e-2, ..cfg.integrator.clone() };
            let tr = simulate(&sc, &ic, &dense).unwrap();
            let dev = tr.states.iter().map(|s| (s.delta - sc.equilibrium.delta0).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-6, "{method:?} {dev}");
        }
    }
}

#[test]
fn damped_swing_envelope_decays() {
    for g in gens() {
        let mut g = g.clone();
        g.damping = 0.5;
        let sc = scenario(&g, 0.6 * g.p_max, 0.0, 1.0, 0.0, &DynamicsConfig { clearing_time: 0.0, ..Default::default() }).unwrap();
        let mut sc = sc;
        sc.x0.delta += 0.3;
        let dense: Vec<f64> = (0..=30000).map(|k| k as f64 * 1e-4).collect();
        let tr = simulate(&sc, &IntegratorConfig { rtol: 1e-10, atol: 1e-12, ..Default::default() }, &dense).unwrap();
        let dw: Vec<f64> = tr.states.iter().map(|s: &MachineState| (s.omega - 1.0).abs()).collect();
        let peaks: Vec<f64> = (1..dw.len() - 1).filter(|&k| dw[k] >= dw[k - 1] && dw[k] > dw[k + 1]).map(|k| dw[k]).collect();
        assert!(peaks.len() >= 6, "{}", peaks.len());
        for w in peaks.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{peaks:?}");
        }
        assert!(peaks.last().unwrap() < &peaks[0]);
    }
}

#[test]
fn trajectory_csv_has_expected_shape() {
    let sc = stable_instances(1, 9)[0];
    let tr = simulate(&sc, &IntegratorConfig::default(), &canonical_grid()).unwrap();
    let csv = tr.to_csv(Some((sc.params.v_mag, sc.params.v_ang)));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 32);
    assert_eq!(lines[0], "t,delta,omega,v_mag,v_ang");
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
    assert_eq!(tr.times[0], 0.0);
    assert_eq!(tr.states[0], sc.x0);
}

#[test]
fn machine_params_reject_invalid_values() {
    let p = MachineParams {
        x_d_prime: 0.0,
        inertia: 1.0,
        damping: 0.0,
        omega_s: 1.0,
        omega_base: 1.0,
        p_m: 0.0,
        e_q0: 1.0,
        v_mag: 1.0,
        v_ang: 0.0,
    };
    assert!(p.validate().is_err());
    assert!(MachineParams { x_d_prime: 0.1, ..p }.validate().is_ok());
    assert!(MachineParams { x_d_prime: 0.1, damping: -1.0, ..p }.validate().is_err());
}
