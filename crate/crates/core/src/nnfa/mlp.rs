use super::tape::sigmoid;
use super::{Matrix, NnError, ParamStore, SliceId, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    Exp,
    /// `scale * sigmoid(x)`, range `(0, scale)`.
    ScaledSigmoid(f64),
}

impl OutputActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Linear => x,
            OutputActivation::Exp => x.exp(),
            OutputActivation::ScaledSigmoid(s) => s * sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn tanh(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: OutputActivation::Linear,
        }
    }

    pub fn with_output(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }
}

/// A multilayer perceptron whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(SliceId, SliceId)>,
}

impl Mlp {
    /// Registers the layers as `{prefix}.w{i}` / `{prefix}.b{i}` in `store`.
    ///
    /// Weights are drawn from `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, biases
    /// start at zero, and the last weight matrix is multiplied by `final_scale`.
    pub fn new<R: Rng + ?Sized>(
        spec: MlpSpec,
        prefix: &str,
        store: &mut ParamStore,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        let dims = spec.dims();
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (3.0 / fan_in.max(1) as f64).sqrt();
            let scale = if i + 1 == n { final_scale } else { 1.0 };
            let w = store.add(format!("{prefix}.w{i}"), fan_in, fan_out, || {
                scale * rng.random_range(-bound..bound)
            });
            let b = store.add_zeros(format!("{prefix}.b{i}"), 1, fan_out);
            layers.push((w, b));
        }
        Self { spec, layers }
    }

    /// Looks up an existing layout, e.g. after loading a checkpoint.
    pub fn attach(spec: MlpSpec, prefix: &str, store: &ParamStore) -> Result<Self, NnError> {
        let dims = spec.dims();
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let find = |name: String, rows, cols| {
                let id = store
                    .find(&name)
                    .ok_or_else(|| NnError::BadLayout(format!("missing slice `{name}`")))?;
                let m = store.meta(id);
                if (m.rows, m.cols) != (rows, cols) {
                    return Err(NnError::BadLayout(format!(
                        "slice `{name}` is {}x{}, expected {rows}x{cols}",
                        m.rows, m.cols
                    )));
                }
                Ok(id)
            };
            let w = find(format!("{prefix}.w{i}"), dims[i], dims[i + 1])?;
            let b = find(format!("{prefix}.b{i}"), 1, dims[i + 1])?;
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    /// Slices owned by this network, in layer order.
    pub fn slices(&self) -> impl Iterator<Item = SliceId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Forward pass on a batch of row inputs.
    pub fn forward_batch(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix, NnError> {
        if x.cols != self.spec.input_dim {
            return Err(NnError::DimensionMismatch {
                context: "mlp input",
                expected: self.spec.input_dim,
                got: x.cols,
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wm = store.matrix(w);
            let bias = store.slice(b);
            let mut out = Matrix::zeros(h.rows, wm.cols);
            super::matrix::gemm(1.0, &h, false, &wm, false, 0.0, &mut out);
            for r in 0..out.rows {
                for (v, bb) in out.row_mut(r).iter_mut().zip(bias) {
                    *v += *bb;
                }
            }
            let act = if i == last {
                self.spec.output_activation
            } else {
                OutputActivation::Linear
            };
            h = if i == last {
                out.map(|v| act.apply(v))
            } else {
                out.map(f64::tanh)
            };
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = Matrix::row_vector(input.to_vec());
        Ok(self.forward_batch(store, &x)?.data)
    }

    /// Taped forward pass; `x` must be `n x input_dim`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul(h, wv);
            let z = tape.add_row(z, bv);
            h = if i < last {
                tape.tanh(z)
            } else {
                match self.spec.output_activation {
                    OutputActivation::Linear => z,
                    OutputActivation::Exp => tape.exp(z),
                    OutputActivation::ScaledSigmoid(s) => {
                        let sg = tape.sigmoid(z);
                        tape.scale(sg, s)
                    }
                }
            };
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_net(act: OutputActivation) -> (Mlp, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(
            MlpSpec::tanh(3, &[5, 4], 2).with_output(act),
            "n",
            &mut store,
            1.0,
            &mut rng,
        );
        store.values_mut().fill(0.0);
        (net, store)
    }

    #[test]
    fn zero_network_outputs() {
        let x = [0.3, -1.0, 2.0];
        let (n, s) = zero_net(OutputActivation::Linear);
        assert_eq!(n.forward(&s, &x).unwrap(), vec![0.0, 0.0]);
        let (n, s) = zero_net(OutputActivation::Exp);
        assert_eq!(n.forward(&s, &x).unwrap(), vec![1.0, 1.0]);
        let (n, s) = zero_net(OutputActivation::ScaledSigmoid(4.0));
        assert_eq!(n.forward(&s, &x).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let (n, s) = zero_net(OutputActivation::Linear);
        assert_eq!(
            n.forward(&s, &[1.0]).unwrap_err(),
            NnError::DimensionMismatch {
                context: "mlp input",
                expected: 3,
                got: 1
            }
        );
    }

    #[test]
    fn attach_finds_layers_and_rejects_wrong_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::tanh(2, &[3], 1);
        let net = Mlp::new(spec.clone(), "v", &mut store, 1.0, &mut rng);
        assert_eq!(Mlp::attach(spec, "v", &store).unwrap(), net);
        assert!(Mlp::attach(MlpSpec::tanh(2, &[4], 1), "v", &store).is_err());
        assert!(Mlp::attach(MlpSpec::tanh(2, &[3], 1), "q", &store).is_err());
    }

    fn taped_loss(net: &Mlp, store: &ParamStore, x: &Matrix) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = net.forward_tape(&mut t, store, xv);
        let y2 = t.square(y);
        let l = t.mean(y2);
        let g = t.backward(l).unwrap().wrt(store);
        (t.scalar(l), g)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backward_matches_central_differences(
            seed in 0u64..1000,
            act in prop_oneof![
                Just(OutputActivation::Linear),
                Just(OutputActivation::Exp),
                Just(OutputActivation::ScaledSigmoid(4.0)),
            ],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let net = Mlp::new(MlpSpec::tanh(3, &[6, 5], 2).with_output(act), "m", &mut store, 0.5, &mut rng);
            let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.5..1.5)).collect());
            let (l0, g) = taped_loss(&net, &store, &x);
            prop_assert!((net.forward_batch(&store, &x).unwrap().data.iter().map(|v| v * v).sum::<f64>() / 8.0 - l0).abs() < 1e-12);
            let h = 1e-5;
            for k in 0..store.len() {
                let mut sp = store.clone();
                sp.values_mut()[k] += h;
                let lp = taped_loss(&net, &sp, &x).0;
                sp.values_mut()[k] -= 2.0 * h;
                let lm = taped_loss(&net, &sp, &x).0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
                prop_assert!(err <= 1e-4, "param {}: fd {} tape {}", k, fd, g[k]);
            }
        }

        #[test]
        fn output_heads_stay_in_range(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for act in [OutputActivation::Exp, OutputActivation::ScaledSigmoid(4.0)] {
                let mut store = ParamStore::new();
                let net = Mlp::new(MlpSpec::tanh(2, &[8], 3).with_output(act), "h", &mut store, 1.0, &mut rng);
                let x = [rng.random_range(-scale..scale), rng.random_range(-scale..scale)];
                for v in net.forward(&store, &x).unwrap() {
                    match act {
                        OutputActivation::Exp => prop_assert!(v > 0.0),
                        _ => prop_assert!(v > 0.0 && v < 4.0),
                    }
                }
            }
        }
    }
}
