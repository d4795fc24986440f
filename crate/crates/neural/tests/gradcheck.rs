use dynopf_neural::{Activation, DenseNet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Sum of outputs of a tape-recorded net, for a given flat parameter vector.
fn net_loss(net: &DenseNet, x: &Tensor) -> f64 {
    net.forward(x).unwrap().data().iter().map(|v| v * v).sum::<f64>() * 0.5
}

#[test]
fn dense_nets_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let acts = [Activation::Tanh, Activation::Sigmoid, Activation::Tanh, Activation::Relu];
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let hidden = acts[trial % acts.len()];
        let widths = [3, 2 + trial % 4, 4, 2];
        let mut net = DenseNet::new(&widths, hidden, Activation::Identity, trial as u64).unwrap();
        for _ in 0..5 {
            let x = random_tensor(&mut rng, 1, 3, -1.5, 1.5);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let xin = tape.constant(x.clone());
            let y = bound.forward(&mut tape, xin).unwrap();
            let sq = tape.square(y);
            let s = tape.sum_all(sq);
            let loss = tape.scale(s, 0.5);
            tape.backward(loss).unwrap();
            let grads = bound.gradients(&tape).flat();
            let base = net.flat_params();
            for (i, g) in grads.iter().enumerate() {
                let h = 1e-6;
                let mut p = base.clone();
                p[i] += h;
                net.set_flat_params(&p).unwrap();
                let up = net_loss(&net, &x);
                p[i] -= 2.0 * h;
                net.set_flat_params(&p).unwrap();
                let dn = net_loss(&net, &x);
                net.set_flat_params(&base).unwrap();
                let fd = (up - dn) / (2.0 * h);
                // Relu kinks make finite differences meaningless right at zero.
                if g.abs() < 1e-9 && fd.abs() < 1e-7 {
                    continue;
                }
                worst = worst.max(rel_err(*g, fd));
            }
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

type Unary = fn(&mut Tape, Var) -> Var;

#[test]
fn elementwise_ops_match_central_differences() {
    let unary: Vec<(&str, Unary, f64, f64)> = vec![
        ("tanh", |t, a| t.tanh(a), -2.0, 2.0),
        ("sigmoid", |t, a| t.sigmoid(a), -3.0, 3.0),
        ("sin", |t, a| t.sin(a), -3.0, 3.0),
        ("cos", |t, a| t.cos(a), -3.0, 3.0),
        ("exp", |t, a| t.exp(a), -1.0, 1.0),
        ("sqrt", |t, a| t.sqrt(a), 0.2, 3.0),
        ("square", |t, a| t.square(a), -2.0, 2.0),
        ("smooth_abs", |t, a| t.smooth_abs(a, 1e-3), -1.0, 1.0),
        ("relu", |t, a| t.relu(a), -1.0, 1.0),
        ("neg", |t, a| t.neg(a), -1.0, 1.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, f, lo, hi) in unary {
        for _ in 0..20 {
            let x0: f64 = rng.gen_range(lo..hi);
            if name == "relu" && x0.abs() < 1e-3 {
                continue;
            }
            let eval = |x: f64| {
                let mut t = Tape::new();
                let a = t.variable(Tensor::scalar(x));
                let y = f(&mut t, a);
                (t, a, y)
            };
            let (mut t, a, y) = eval(x0);
            t.backward(y).unwrap();
            let g = t.grad(a).map(|g| g.item()).unwrap_or(0.0);
            let h = 1e-6;
            let up = { let (t, _, y) = eval(x0 + h); t.value(y).item() };
            let dn = { let (t, _, y) = eval(x0 - h); t.value(y).item() };
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(g, fd) <= 1e-5, "{name} at {x0}: {g} vs {fd}");
        }
    }
}

#[test]
fn binary_ops_match_central_differences() {
    type Binary = fn(&mut Tape, Var, Var) -> Var;
    let ops: Vec<(&str, Binary)> = vec![
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("div", |t, a, b| t.div(a, b).unwrap()),
        ("atan2", |t, a, b| t.atan2(a, b).unwrap()),
        ("axpy", |t, a, b| t.axpy(a, -1.7, b).unwrap()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, f) in ops {
        for _ in 0..20 {
            let a0 = random_tensor(&mut rng, 2, 3, 0.3, 2.0);
            let b0 = random_tensor(&mut rng, 1, 3, 0.3, 2.0);
            let w = random_tensor(&mut rng, 2, 3, -1.0, 1.0);
            let eval = |a: &Tensor, b: &Tensor| {
                let mut t = Tape::new();
                let va = t.variable(a.clone());
                let vb = t.variable(b.clone());
                let vw = t.constant(w.clone());
                let y = f(&mut t, va, vb);
                let yw = t.mul(y, vw).unwrap();
                let s = t.sum_all(yw);
                (t, va, vb, s)
            };
            let (mut t, va, vb, s) = eval(&a0, &b0);
            t.backward(s).unwrap();
            let ga = t.grad(va).unwrap().clone();
            let gb = t.grad(vb).unwrap().clone();
            let h = 1e-6;
            for i in 0..a0.len() {
                let mut ap = a0.clone();
                ap.data_mut()[i] += h;
                let mut am = a0.clone();
                am.data_mut()[i] -= h;
                let fd = {
                    let (t, _, _, s) = eval(&ap, &b0);
                    let up = t.value(s).item();
                    let (t, _, _, s) = eval(&am, &b0);
                    (up - t.value(s).item()) / (2.0 * h)
                };
                assert!(rel_err(ga.data()[i], fd) <= 1e-5, "{name} lhs");
            }
            for i in 0..b0.len() {
                let mut bp = b0.clone();
                bp.data_mut()[i] += h;
                let mut bm = b0.clone();
                bm.data_mut()[i] -= h;
                let fd = {
                    let (t, _, _, s) = eval(&a0, &bp);
                    let up = t.value(s).item();
                    let (t, _, _, s) = eval(&a0, &bm);
                    (up - t.value(s).item()) / (2.0 * h)
                };
                assert!(rel_err(gb.data()[i], fd) <= 1e-5, "{name} broadcast rhs");
            }
        }
    }
}

fn mat_vec_t(m: &[[f64; 2]; 2], c: [f64; 2]) -> [f64; 2] {
    [m[0][0] * c[0] + m[1][0] * c[1], m[0][1] * c[0] + m[1][1] * c[1]]
}

fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn expm(a: &[[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let mut sum = [[1.0, 0.0], [0.0, 1.0]];
    let mut term = sum;
    let at = [[a[0][0] * t, a[0][1] * t], [a[1][0] * t, a[1][1] * t]];
    for k in 1..30 {
        term = mat_mul(&term, &at);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                sum[i][j] += term[i][j];
            }
        }
    }
    sum
}

/// Five explicit Euler steps of x' = A x recorded on one tape; the adjoint of
/// the initial state must equal the transposed propagator applied to the
/// loss weights.
#[test]
fn unrolled_euler_sensitivity_matches_linear_theory() {
    let a = [[-0.4, 1.3], [-1.1, -0.2]];
    let c = [0.7, -1.2];
    let x0 = [0.5, -0.3];
    for &h in &[1e-3, 1e-4] {
        let mut tape = Tape::new();
        let at = tape.constant(Tensor::matrix(2, 2, vec![a[0][0], a[1][0], a[0][1], a[1][1]]).unwrap());
        let xv = tape.variable(Tensor::row(&x0));
        let mut x = xv;
        for _ in 0..5 {
            let dx = tape.matmul(x, at).unwrap();
            let step = tape.scale(dx, h);
            x = tape.add(x, step).unwrap();
        }
        let cv = tape.constant(Tensor::row(&c));
        let prod = tape.mul(x, cv).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap().data().to_vec();

        let step = [[1.0 + h * a[0][0], h * a[0][1]], [h * a[1][0], 1.0 + h * a[1][1]]];
        let mut prop = [[1.0, 0.0], [0.0, 1.0]];
        for _ in 0..5 {
            prop = mat_mul(&step, &prop);
        }
        let discrete = mat_vec_t(&prop, c);
        let continuous = mat_vec_t(&expm(&a, 5.0 * h), c);
        for i in 0..2 {
            assert!((g[i] - discrete[i]).abs() <= 1e-12);
            assert!(rel_err(g[i], continuous[i]) <= 1e-4, "h={h}");
        }
    }
}

/// Differentiating g(f(x)) on one tape equals chaining the two Jacobians
/// obtained from separate tapes.
#[test]
fn chained_tapes_compose() {
    let f = DenseNet::new(&[2, 5, 3], Activation::Tanh, Activation::Identity, 1).unwrap();
    let g = DenseNet::new(&[3, 4, 1], Activation::Tanh, Activation::Identity, 2).unwrap();
    let x = Tensor::row(&[0.3, -0.8]);

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let fb = f.bind_frozen(&mut tape);
    let gb = g.bind_frozen(&mut tape);
    let y = fb.forward(&mut tape, xv).unwrap();
    let z = gb.forward(&mut tape, y).unwrap();
    tape.backward(z).unwrap();
    let joint = tape.grad(xv).unwrap().clone();

    let mut t2 = Tape::new();
    let yv = t2.variable(f.forward(&x).unwrap());
    let gb2 = g.bind_frozen(&mut t2);
    let z2 = gb2.forward(&mut t2, yv).unwrap();
    t2.backward(z2).unwrap();
    let dz_dy = t2.grad(yv).unwrap().clone();

    let mut t1 = Tape::new();
    let xv1 = t1.variable(x.clone());
    let fb1 = f.bind_frozen(&mut t1);
    let y1 = fb1.forward(&mut t1, xv1).unwrap();
    t1.backward_with(y1, dz_dy).unwrap();
    let composed = t1.grad(xv1).unwrap();
    for (a, b) in joint.data().iter().zip(composed.data()) {
        assert!((a - b).abs() <= 1e-14);
    }
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let run = || {
        let mut net = DenseNet::new(&[2, 8, 1], Activation::Tanh, Activation::Identity, 42).unwrap();
        let mut opt = dynopf_neural::Optimizer::adam(1e-2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.5, 0.9], vec![1.0, -1.0]]).unwrap();
        let target = Tensor::column(&[0.3, -0.2, 0.5]);
        for _ in 0..25 {
            let mut tape = Tape::new();
            let b = net.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = b.forward(&mut tape, xv).unwrap();
            let tv = tape.constant(target.clone());
            let e = tape.sub(y, tv).unwrap();
            let e2 = tape.square(e);
            let l = tape.mean_all(e2);
            tape.backward(l).unwrap();
            let g = b.gradients(&tape);
            opt.step(&mut net, &g).unwrap();
        }
        net.flat_params()
    };
    assert_eq!(run(), run());
}
