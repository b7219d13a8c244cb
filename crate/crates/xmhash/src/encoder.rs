//! The two modality-specific hash networks: small fully-connected MLPs whose
//! final layer is tanh-activated so outputs live strictly inside (-1, 1),
//! mimicking binary codes while staying differentiable.
//!
//! Backpropagation here is deliberately minimal: the training loss computes
//! d(loss)/d(outputs) analytically per batch row, and [`backward`] chains
//! that seed through the fixed layer family (linear + relu/tanh/none).
//! Batch gradients are *summed*, not averaged — the loss is a sum over
//! instances, and the learning rates are calibrated against that convention.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest tanh output magnitude we emit. `tanh` in IEEE doubles saturates to
/// exactly 1.0 for |x| > ~19, which would break the "strictly inside
/// (-1, 1)" output contract; saturated entries are nudged one step inward
/// (their gradient is zero to machine precision regardless).
const TANH_CEIL: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh().clamp(-TANH_CEIL, TANH_CEIL),
            Activation::None => x,
        }
    }

    /// Derivative at pre-activation `pre` with activation value `post`.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::None => 1.0,
        }
    }
}

/// One fully-connected layer: `out = act(input * weight^T + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out_dim x in_dim.
    pub weight: Matrix,
    /// Length out_dim.
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of one hash network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Per-layer gradients, same shapes as the parameters they refer to.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Cached intermediates from one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Matrix,
    /// Per layer: (pre-activation, activation), each batch x out_dim.
    layers: Vec<(Matrix, Matrix)>,
}

impl MlpParams {
    /// Assemble from explicit layers, checking that dimensions chain and the
    /// network ends in a tanh layer (the hashing layer).
    pub fn new(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty(), "network needs at least one layer");
        for w in layers.windows(2) {
            assert_eq!(
                w[0].out_dim(),
                w[1].in_dim(),
                "layer dimensions do not chain"
            );
        }
        for layer in &layers {
            assert_eq!(layer.bias.len(), layer.out_dim(), "bias length mismatch");
        }
        assert_eq!(
            layers.last().unwrap().activation,
            Activation::Tanh,
            "final layer must be tanh"
        );
        MlpParams { layers }
    }

    /// Xavier-initialized network: weights uniform in
    /// +/- sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic per seed
    /// (entries drawn row-major, layers in order).
    pub fn init(sizes: &[usize], activations: &[Activation], rng_seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        assert_eq!(
            activations.len(),
            sizes.len() - 1,
            "one activation per layer required"
        );
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(dims, &activation)| {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access for the verification suite's finite-difference
    /// perturbations. Callers must preserve the dimension chaining.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[LayerGrads], lr: f64) {
        assert_eq!(grads.len(), self.layers.len(), "gradient layer count mismatch");
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            assert_eq!(layer.weight.shape(), g.weight.shape(), "weight grad shape mismatch");
            layer.weight.add_scaled(&g.weight, -lr);
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Write the JSON shape header (one line) followed by each layer's weight
    /// and bias in the binary matrix format (bias as a 1 x out_dim matrix).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let header = CheckpointHeader {
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                })
                .collect(),
        };
        let mut line = serde_json::to_vec(&header).expect("header serialization cannot fail");
        line.push(b'\n');
        f.write_all(&line).map_err(io_err)?;
        for layer in &self.layers {
            layer.weight.write_binary(&mut f).map_err(io_err)?;
            Matrix::from_vec(1, layer.bias.len(), layer.bias.clone())
                .write_binary(&mut f)
                .map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = std::io::BufReader::new(f);
        let mut header_line = String::new();
        reader
            .read_line(&mut header_line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
            .map_err(|e| Error::parse(format!("{}: header", path.display()), e.to_string()))?;
        let mut layers = Vec::with_capacity(header.layers.len());
        for (i, lh) in header.layers.iter().enumerate() {
            let weight = read_layer_matrix(&mut reader, path, i, "weight")?;
            if weight.shape() != (lh.out_dim, lh.in_dim) {
                return Err(Error::parse(
                    format!("{}: layer {i}", path.display()),
                    format!(
                        "weight shape {:?} does not match header ({}, {})",
                        weight.shape(),
                        lh.out_dim,
                        lh.in_dim
                    ),
                ));
            }
            let bias_m = read_layer_matrix(&mut reader, path, i, "bias")?;
            if bias_m.shape() != (1, lh.out_dim) {
                return Err(Error::parse(
                    format!("{}: layer {i}", path.display()),
                    format!("bias shape {:?} does not match header", bias_m.shape()),
                ));
            }
            layers.push(Layer {
                weight,
                bias: bias_m.data().to_vec(),
                activation: lh.activation,
            });
        }
        if layers.is_empty() {
            return Err(Error::parse(path.display().to_string(), "no layers in checkpoint"));
        }
        Ok(MlpParams::new(layers))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

fn read_layer_matrix<R: Read>(r: &mut R, path: &Path, layer: usize, what: &str) -> Result<Matrix> {
    Matrix::read_binary(r)
        .map_err(|e| Error::parse(format!("{}: layer {layer} {what}", path.display()), e.to_string()))
}

/// The standard two-layer hash network: input -> hidden (relu) -> k (tanh).
pub fn hash_mlp(in_dim: usize, hidden: usize, k: usize, rng_seed: u64) -> MlpParams {
    MlpParams::init(
        &[in_dim, hidden, k],
        &[Activation::Relu, Activation::Tanh],
        rng_seed,
    )
}

/// Run a mini-batch through the network. Returns the outputs and the cache
/// needed for [`backward`].
pub fn forward(params: &MlpParams, inputs: &Matrix) -> (Matrix, ForwardTrace) {
    assert_eq!(
        inputs.cols(),
        params.in_dim(),
        "input width {} does not match network input dimension {}",
        inputs.cols(),
        params.in_dim()
    );
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut current = inputs.clone();
    for layer in &params.layers {
        let mut pre = current.matmul_nt(&layer.weight);
        for r in 0..pre.rows() {
            let row = pre.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let post = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
            layer.activation.apply(pre[(i, j)])
        });
        current = post.clone();
        layers.push((pre, post));
    }
    let outputs = current;
    (
        outputs,
        ForwardTrace {
            inputs: inputs.clone(),
            layers,
        },
    )
}

/// Chain an output-gradient seed (d loss / d outputs, batch x k) back to
/// per-parameter gradients, summed over the batch.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, output_grad: &Matrix) -> Vec<LayerGrads> {
    let last = trace.layers.last().expect("trace cannot be empty");
    assert_eq!(
        output_grad.shape(),
        last.1.shape(),
        "output gradient shape does not match traced outputs"
    );
    assert_eq!(
        trace.layers.len(),
        params.layers.len(),
        "trace/params layer count mismatch"
    );

    let mut grads: Vec<Option<LayerGrads>> = vec![None; params.layers.len()];
    let mut grad_post = output_grad.clone();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let (pre, post) = &trace.layers[idx];
        // d loss / d pre-activation.
        let grad_pre = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
            grad_post[(i, j)] * layer.activation.derivative(pre[(i, j)], post[(i, j)])
        });
        let layer_input = if idx == 0 {
            &trace.inputs
        } else {
            &trace.layers[idx - 1].1
        };
        // weight grad: sum over batch of grad_pre_row (x) input_row.
        let weight = grad_pre.matmul_tn(layer_input);
        let mut bias = vec![0.0; layer.out_dim()];
        for r in 0..grad_pre.rows() {
            for (b, g) in bias.iter_mut().zip(grad_pre.row(r)) {
                *b += g;
            }
        }
        grads[idx] = Some(LayerGrads { weight, bias });
        if idx > 0 {
            grad_post = grad_pre.matmul(&layer.weight);
        }
    }
    grads.into_iter().map(|g| g.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(weight: Matrix, bias: Vec<f64>) -> MlpParams {
        MlpParams::new(vec![Layer {
            weight,
            bias,
            activation: Activation::Tanh,
        }])
    }

    fn random_net(rng: &mut ChaCha8Rng, sizes: &[usize]) -> MlpParams {
        let mut net = MlpParams::init(
            sizes,
            &(0..sizes.len() - 1)
                .map(|i| {
                    if i + 2 == sizes.len() {
                        Activation::Tanh
                    } else {
                        Activation::Relu
                    }
                })
                .collect::<Vec<_>>(),
            rng.random(),
        );
        // Non-zero biases exercise the bias gradients.
        for layer in &mut net.layers {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = single_layer(Matrix::zeros(2, 3), vec![0.0, 0.0]);
        let (out, _) = forward(&net, &Matrix::zeros(4, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_applies_tanh() {
        let net = single_layer(Matrix::identity(1), vec![0.0]);
        let (out, _) = forward(&net, &Matrix::from_rows(&[&[0.5]]));
        assert_eq!(out[(0, 0)], 0.5f64.tanh());
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let net = random_net(&mut rng, &[4, 3, 2]);
        let x = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let (out, _) = forward(&net, &x);
        for r in 0..3 {
            // Recompute one row with plain scalar loops.
            let mut h = [0.0; 3];
            for (u, hv) in h.iter_mut().enumerate() {
                let mut z = net.layers[0].bias[u];
                for i in 0..4 {
                    z += net.layers[0].weight[(u, i)] * x[(r, i)];
                }
                *hv = z.max(0.0);
            }
            for o in 0..2 {
                let mut z = net.layers[1].bias[o];
                for (u, hv) in h.iter().enumerate() {
                    z += net.layers[1].weight[(o, u)] * hv;
                }
                assert!((out[(r, o)] - z.tanh()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        // Huge weights force tanh saturation; outputs must still be < 1.
        let net = single_layer(Matrix::from_rows(&[&[1000.0]]), vec![0.0]);
        let (out, _) = forward(&net, &Matrix::from_rows(&[&[5.0], &[-5.0]]));
        assert!(out[(0, 0)] < 1.0 && out[(0, 0)] > 0.99);
        assert!(out[(1, 0)] > -1.0 && out[(1, 0)] < -0.99);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let x = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let (_, trace) = forward(&net, &x);
        let grads = backward(&net, &trace, &Matrix::zeros(2, 2));
        for g in grads {
            assert_eq!(g.weight.frobenius_sq(), 0.0);
            assert!(g.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn scalar_tanh_gradient_matches_closed_form() {
        // One unit: out = tanh(w x + b); d out/d w = (1 - out^2) x.
        let (w, b, x) = (0.7, -0.2, 1.3);
        let net = single_layer(Matrix::from_rows(&[&[w]]), vec![b]);
        let (out, trace) = forward(&net, &Matrix::from_rows(&[&[x]]));
        let grads = backward(&net, &trace, &Matrix::from_rows(&[&[1.0]]));
        let y = (w * x + b).tanh();
        assert!((out[(0, 0)] - y).abs() < 1e-15);
        assert!((grads[0].weight[(0, 0)] - (1.0 - y * y) * x).abs() < 1e-12);
        assert!((grads[0].bias[0] - (1.0 - y * y)).abs() < 1e-12);
    }

    /// Central finite differences of the linear probe loss
    /// sum_ij C_ij * out_ij against the analytic gradients.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for trial in 0..5 {
            let sizes = [
                rng.random_range(2usize..6),
                rng.random_range(2usize..8),
                rng.random_range(1usize..5),
            ];
            let net = random_net(&mut rng, &sizes);
            let batch = rng.random_range(1usize..5);
            let x = Matrix::from_fn(batch, sizes[0], |_, _| rng.random_range(-1.0..1.0));
            let probe = Matrix::from_fn(batch, sizes[2], |_, _| rng.random_range(-1.0..1.0));
            let loss = |p: &MlpParams| -> f64 {
                let (out, _) = forward(p, &x);
                out.data().iter().zip(probe.data()).map(|(o, c)| o * c).sum()
            };
            let (_, trace) = forward(&net, &x);
            let grads = backward(&net, &trace, &probe);

            let h = 1e-5;
            for li in 0..net.layers().len() {
                let (rows, cols) = net.layers()[li].weight.shape();
                for i in 0..rows {
                    for j in 0..cols {
                        let mut plus = net.clone();
                        plus.layers[li].weight[(i, j)] += h;
                        let mut minus = net.clone();
                        minus.layers[li].weight[(i, j)] -= h;
                        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                        let analytic = grads[li].weight[(i, j)];
                        let denom = analytic.abs().max(1.0);
                        assert!(
                            (analytic - fd).abs() / denom <= 1e-5,
                            "trial {trial} layer {li} weight ({i},{j}): analytic {analytic}, fd {fd}"
                        );
                    }
                    let mut plus = net.clone();
                    plus.layers[li].bias[i] += h;
                    let mut minus = net.clone();
                    minus.layers[li].bias[i] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let analytic = grads[li].bias[i];
                    assert!(
                        (analytic - fd).abs() / analytic.abs().max(1.0) <= 1e-5,
                        "trial {trial} layer {li} bias {i}: analytic {analytic}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn sgd_step_basics() {
        let mut net = single_layer(Matrix::from_rows(&[&[1.0]]), vec![0.5]);
        let grads = vec![LayerGrads {
            weight: Matrix::from_rows(&[&[2.0]]),
            bias: vec![1.0],
        }];
        let before = net.clone();
        net.sgd_step(&grads, 0.0);
        assert_eq!(net, before);
        net.sgd_step(&grads, 0.1);
        assert!((net.layers()[0].weight[(0, 0)] - 0.8).abs() < 1e-15);
        assert!((net.layers()[0].bias[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // Minimize (w - 3)^2 by feeding its gradient 2(w - 3) as the update.
        let mut net = single_layer(Matrix::from_rows(&[&[0.0]]), vec![0.0]);
        for _ in 0..200 {
            let w = net.layers()[0].weight[(0, 0)];
            let grads = vec![LayerGrads {
                weight: Matrix::from_rows(&[&[2.0 * (w - 3.0)]]),
                bias: vec![0.0],
            }];
            net.sgd_step(&grads, 0.1);
        }
        assert!((net.layers()[0].weight[(0, 0)] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = hash_mlp(3, 3, 3, 99);
        let b = hash_mlp(3, 3, 3, 99);
        assert_eq!(a, b);
        let bound = (6.0 / 6.0f64).sqrt();
        for layer in a.layers() {
            assert!(layer.weight.data().iter().all(|v| v.abs() < bound));
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_mean_is_near_zero() {
        // 100 x 100 layer = 10^4 uniform draws in [-a, a]; the sample mean
        // should sit within 3 standard errors of zero.
        let net = MlpParams::init(&[100, 100], &[Activation::Tanh], 1234);
        let data = net.layers()[0].weight.data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let a = (6.0 / 200.0f64).sqrt();
        let se = a / (3.0f64.sqrt() * (data.len() as f64).sqrt());
        assert!(mean.abs() <= 3.0 * se, "mean {mean} exceeds 3 x {se}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let net = random_net(&mut rng, &[5, 4, 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        let back = MlpParams::load(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    #[should_panic(expected = "input width")]
    fn forward_rejects_wrong_width() {
        let net = hash_mlp(3, 2, 2, 0);
        let _ = forward(&net, &Matrix::zeros(1, 4));
    }
}
