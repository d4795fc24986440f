use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{sigmoid, Tape, Var};
use crate::{NeuralError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// One affine layer `y = act(x·W + b)` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Feedforward network of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Parameter leaves of a [`DenseNet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundNet {
    params: Vec<(Var, Var)>,
    activations: Vec<Activation>,
}

/// Parameter gradients, ordered like [`DenseNet::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients(
            net.params()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

impl DenseNet {
    /// Builds a network with the given layer widths. `hidden` applies to every
    /// layer except the last, which uses `output`. Xavier-uniform initialisation
    /// for tanh/sigmoid/identity layers, He-uniform for relu; zero biases.
    pub fn new(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NeuralError::InvalidArchitecture(format!("{widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let activation = if i + 1 == n { output } else { hidden };
                let bound = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                Dense {
                    weight: Tensor::from_parts(fan_in, fan_out, data),
                    bias: Tensor::zeros(1, fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::InvalidArchitecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(NeuralError::InvalidArchitecture(format!(
                    "layer {i}: bias shape {:?} vs weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(NeuralError::InvalidArchitecture(format!(
                    "layer {i}: input {} does not match previous output {}",
                    l.weight.rows(),
                    layers[i - 1].weight.cols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.rows()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Weight and bias tensors interleaved per layer.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::ShapeMismatch {
                op: "set_flat_params",
                expected: vec![self.param_count()],
                got: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Plain forward pass without recording.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NeuralError> {
        if input.cols() != self.input_width() {
            return Err(NeuralError::ShapeMismatch {
                op: "forward",
                expected: vec![input.rows(), self.input_width()],
                got: input.shape().to_vec(),
            });
        }
        let rows = input.rows();
        let mut x = input.data().to_vec();
        for l in &self.layers {
            let (k, n) = (l.weight.rows(), l.weight.cols());
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(l.bias.data());
            }
            crate::tensor::matmul_into(&x, l.weight.data(), &mut out, rows, k, n);
            if l.activation != Activation::Identity {
                for v in &mut out {
                    *v = l.activation.apply(*v);
                }
            }
            x = out;
        }
        Ok(Tensor::from_parts(rows, self.output_width(), x))
    }

    /// Records the parameters as tape variables. Every forward through the
    /// returned binding shares these leaves, so gradients accumulate across
    /// repeated evaluations (e.g. unrolled integration steps).
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        self.bind_with(tape, true)
    }

    /// Like [`DenseNet::bind`], but with parameters recorded as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundNet {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let params = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        BoundNet {
            params,
            activations: self.activations(),
        }
    }
}

impl BoundNet {
    /// `(weight, bias)` leaves per layer.
    pub fn params(&self) -> &[(Var, Var)] {
        &self.params
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, NeuralError> {
        let mut x = input;
        for (&(w, b), &act) in self.params.iter().zip(&self.activations) {
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, b)?;
            x = act.record(tape, h);
        }
        Ok(x)
    }

    /// Collects parameter gradients after a backward sweep; parameters the
    /// adjoint never reached get zeros.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let grab = |v: Var| {
            tape.grad(v).cloned().unwrap_or_else(|| {
                let t = tape.value(v);
                Tensor::zeros(t.rows(), t.cols())
            })
        };
        Gradients(
            self.params
                .iter()
                .flat_map(|&(w, b)| [grab(w), grab(b)])
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut net = DenseNet::new(&[3, 5, 2], Activation::Tanh, Activation::Identity, 1).unwrap();
        let n = net.param_count();
        net.set_flat_params(&vec![0.0; n]).unwrap();
        let y = net.forward(&Tensor::row(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(vec![Dense {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(1, 3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_matches_tape() {
        let net = DenseNet::new(&[4, 8, 8, 3], Activation::Tanh, Activation::Identity, 7).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.0, 0.5]).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.constant(x);
        let y = bound.forward(&mut tape, xv).unwrap();
        for (p, q) in tape.value(y).data().iter().zip(a.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn input_width_is_checked() {
        let net = DenseNet::new(&[4, 2], Activation::Tanh, Activation::Identity, 0).unwrap();
        assert!(net.forward(&Tensor::row(&[1.0, 2.0])).is_err());
        assert!(DenseNet::new(&[4], Activation::Tanh, Activation::Identity, 0).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let a = DenseNet::new(&[3, 16, 2], Activation::Relu, Activation::Identity, 42).unwrap();
        let b = DenseNet::new(&[3, 16, 2], Activation::Relu, Activation::Identity, 42).unwrap();
        let c = DenseNet::new(&[3, 16, 2], Activation::Relu, Activation::Identity, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
