//! Feed-forward network with exact manual backpropagation.
//!
//! Hidden layers are `relu(W a + b)` followed by inverted dropout in training
//! passes. The last layer is affine and feeds an output head:
//!
//! - [`Head::Softplus`]: one strictly positive output per row.
//! - [`Head::Softmax`]: a probability vector per row.
//!
//! Weights are row-major `(out, in)`. A forward pass returns a [`Tape`] that
//! caches what [`Mlp::backward`] needs; the tape is bound to the parameter
//! version it was recorded with, so a tape taken before an optimizer step is
//! rejected.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softplus,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<F>>,
    biases: Vec<Vec<F>>,
    head: Head,
    dropout_rate: f64,
    version: u64,
}

/// Activation cache of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    version: u64,
    layer_dims: Vec<usize>,
    input: Matrix<F>,
    /// Pre-activation of every layer; the last entry holds the head logits.
    pre: Vec<Matrix<F>>,
    /// Hidden outputs after ReLU and dropout (inputs of the following layer).
    hidden: Vec<Matrix<F>>,
    /// Per-hidden-layer dropout multipliers (0 or 1/(1-p)); `None` in eval passes.
    masks: Vec<Option<Vec<F>>>,
    outputs: Matrix<F>,
}

impl<F: Scalar> Tape<F> {
    pub fn outputs(&self) -> &Matrix<F> {
        &self.outputs
    }

    pub fn logits(&self) -> &Matrix<F> {
        self.pre.last().expect("tape always has an output layer")
    }

    pub fn masks(&self) -> &[Option<Vec<F>>] {
        &self.masks
    }
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub weights: Vec<Vec<F>>,
    pub biases: Vec<Vec<F>>,
    pub input: Matrix<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|g| g.is_finite())
    }

    /// Gradient entry in the flat parameter order used by [`Mlp::param`].
    pub fn param(&self, index: usize) -> F {
        let (layer, is_bias, offset) = locate(&self.weights, &self.biases, index);
        if is_bias {
            self.biases[layer][offset]
        } else {
            self.weights[layer][offset]
        }
    }
}

// flat order: W0, b0, W1, b1, ...
fn locate<F>(weights: &[Vec<F>], biases: &[Vec<F>], mut index: usize) -> (usize, bool, usize) {
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        if index < w.len() {
            return (l, false, index);
        }
        index -= w.len();
        if index < b.len() {
            return (l, true, index);
        }
        index -= b.len();
    }
    panic!("parameter index out of range");
}

#[inline]
pub fn softplus<F: Scalar>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

impl<F: Scalar> Mlp<F> {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], head: Head, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        validate_dims(layer_dims, head)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            weights.push((0..fan_in * fan_out).map(|_| F::of(dist.sample(rng))).collect());
            biases.push(vec![F::zero(); fan_out]);
        }
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, head, dropout_rate, version: 0 })
    }

    /// Assembles a network from explicit parameters.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        head: Head,
        dropout_rate: f64,
        weights: Vec<Vec<F>>,
        biases: Vec<Vec<F>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims, head)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::dim(format!(
                "{layers} layers need {layers} weight and bias arrays, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::dim(format!("layer {l} parameters do not match {}x{}", pair[1], pair[0])));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(Self { layer_dims, weights, biases, head, dropout_rate, version: 0 })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn weights(&self) -> &[Vec<F>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<F>] {
        &self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Parameter in flat order `W0, b0, W1, b1, ...`.
    pub fn param(&self, index: usize) -> F {
        let (layer, is_bias, offset) = locate(&self.weights, &self.biases, index);
        if is_bias {
            self.biases[layer][offset]
        } else {
            self.weights[layer][offset]
        }
    }

    pub fn set_param(&mut self, index: usize, value: F) {
        let (layer, is_bias, offset) = locate(&self.weights, &self.biases, index);
        if is_bias {
            self.biases[layer][offset] = value;
        } else {
            self.weights[layer][offset] = value;
        }
        self.version += 1;
    }

    /// Inference pass (no dropout).
    pub fn forward(&self, batch: &Matrix<F>) -> Result<(Matrix<F>, Tape<F>)> {
        self.run(batch, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Training pass: dropout masks are drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&self, batch: &Matrix<F>, rng: &mut R) -> Result<(Matrix<F>, Tape<F>)> {
        self.run(batch, Some(rng))
    }

    /// Inference outputs without keeping a tape.
    pub fn predict(&self, batch: &Matrix<F>) -> Result<Matrix<F>> {
        self.check_input(batch)?;
        let mut act = batch.clone();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &act);
            if l + 1 < self.num_layers() {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(F::zero()));
            } else {
                self.apply_head(&mut z);
            }
            act = z;
        }
        Ok(act)
    }

    fn check_input(&self, batch: &Matrix<F>) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "batch width {} does not match network input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if !batch.all_finite() {
            return Err(Error::numeric("non-finite value in network input"));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, act: &Matrix<F>) -> Matrix<F> {
        let (fan_in, fan_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
        let n = act.rows();
        let mut z = Matrix::zeros(n, fan_out);
        for i in 0..n {
            z.row_mut(i).copy_from_slice(&self.biases[layer]);
        }
        F::gemm(n, fan_in, fan_out, F::one(), act.as_slice(), false, &self.weights[layer], true, F::one(), z.as_mut_slice());
        z
    }

    fn apply_head(&self, z: &mut Matrix<F>) {
        match self.head {
            Head::Softplus => z.as_mut_slice().iter_mut().for_each(|v| *v = softplus(*v)),
            Head::Softmax => {
                for i in 0..z.rows() {
                    softmax_in_place(z.row_mut(i));
                }
            }
        }
    }

    fn run<R: Rng + ?Sized>(&self, batch: &Matrix<F>, mut rng: Option<&mut R>) -> Result<(Matrix<F>, Tape<F>)> {
        self.check_input(batch)?;
        let layers = self.num_layers();
        let keep = F::of(1.0 / (1.0 - self.dropout_rate));
        let mut pre = Vec::with_capacity(layers);
        let mut hidden = Vec::with_capacity(layers - 1);
        let mut masks = Vec::with_capacity(layers - 1);
        for l in 0..layers {
            let z = {
                let act = if l == 0 { batch } else { &hidden[l - 1] };
                self.affine(l, act)
            };
            if l + 1 < layers {
                let mut h = z.map(|v| v.max(F::zero()));
                let mask = match rng.as_deref_mut() {
                    Some(rng) if self.dropout_rate > 0.0 => {
                        let mask: Vec<F> = (0..h.as_slice().len())
                            .map(|_| if rng.random::<f64>() < self.dropout_rate { F::zero() } else { keep })
                            .collect();
                        h.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
                        Some(mask)
                    }
                    _ => None,
                };
                hidden.push(h);
                masks.push(mask);
            }
            pre.push(z);
        }
        let mut outputs = pre[layers - 1].clone();
        self.apply_head(&mut outputs);
        let tape = Tape {
            version: self.version,
            layer_dims: self.layer_dims.clone(),
            input: batch.clone(),
            pre,
            hidden,
            masks,
            outputs: outputs.clone(),
        };
        Ok((outputs, tape))
    }

    fn check_tape(&self, tape: &Tape<F>) -> Result<()> {
        if tape.layer_dims != self.layer_dims {
            return Err(Error::contract("tape was recorded by a network of different shape"));
        }
        if tape.version != self.version {
            return Err(Error::contract("tape is stale: parameters changed after the forward pass"));
        }
        Ok(())
    }

    /// Backpropagates `d loss / d outputs` (head outputs, same shape as the
    /// forward result) through the head and every layer.
    pub fn backward(&self, tape: &Tape<F>, loss_grad: &Matrix<F>) -> Result<Gradients<F>> {
        self.check_tape(tape)?;
        let out = &tape.outputs;
        if loss_grad.rows() != out.rows() || loss_grad.cols() != out.cols() {
            return Err(Error::dim(format!(
                "loss gradient {}x{} does not match outputs {}x{}",
                loss_grad.rows(),
                loss_grad.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let logits = tape.logits();
        let mut dz = Matrix::zeros(out.rows(), out.cols());
        match self.head {
            Head::Softplus => {
                for ((d, &g), &z) in dz.as_mut_slice().iter_mut().zip(loss_grad.as_slice()).zip(logits.as_slice()) {
                    *d = g * sigmoid(z);
                }
            }
            Head::Softmax => {
                for i in 0..out.rows() {
                    let (p, g) = (out.row(i), loss_grad.row(i));
                    let dot: F = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for (j, d) in dz.row_mut(i).iter_mut().enumerate() {
                        *d = p[j] * (g[j] - dot);
                    }
                }
            }
        }
        self.backward_logits(tape, dz)
    }

    /// Backpropagates `d loss / d logits` (the head's pre-activation).
    pub fn backward_logits(&self, tape: &Tape<F>, logit_grad: Matrix<F>) -> Result<Gradients<F>> {
        self.check_tape(tape)?;
        let n = tape.input.rows();
        if logit_grad.rows() != n || logit_grad.cols() != self.output_dim() {
            return Err(Error::dim("logit gradient does not match the tape"));
        }
        let layers = self.num_layers();
        let mut gw: Vec<Vec<F>> = self.weights.iter().map(|w| vec![F::zero(); w.len()]).collect();
        let mut gb: Vec<Vec<F>> = self.biases.iter().map(|b| vec![F::zero(); b.len()]).collect();
        let mut dz = logit_grad;
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let act = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            // dW = dz^T act
            F::gemm(fan_out, n, fan_in, F::one(), dz.as_slice(), true, act.as_slice(), false, F::zero(), &mut gw[l]);
            for i in 0..n {
                for (b, &d) in gb[l].iter_mut().zip(dz.row(i)) {
                    *b = *b + d;
                }
            }
            // d act = dz W
            let mut da = Matrix::zeros(n, fan_in);
            F::gemm(n, fan_out, fan_in, F::one(), dz.as_slice(), false, &self.weights[l], false, F::zero(), da.as_mut_slice());
            if l == 0 {
                dz = da;
            } else {
                if let Some(mask) = &tape.masks[l - 1] {
                    da.as_mut_slice().iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
                }
                let z = &tape.pre[l - 1];
                da.as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice())
                    .for_each(|(v, &zz)| if zz <= F::zero() { *v = F::zero() });
                dz = da;
            }
        }
        Ok(Gradients { weights: gw, biases: gb, input: dz })
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Vec<F>], &mut [Vec<F>]) {
        self.version += 1;
        (&mut self.weights, &mut self.biases)
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        let conv = |v: &Vec<Vec<F>>| v.iter().map(|w| w.iter().map(|x| G::of(x.as_f64())).collect()).collect();
        Mlp {
            layer_dims: self.layer_dims.clone(),
            weights: conv(&self.weights),
            biases: conv(&self.biases),
            head: self.head,
            dropout_rate: self.dropout_rate,
            version: 0,
        }
    }
}

fn validate_dims(layer_dims: &[usize], head: Head) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::config("network needs at least an input and an output width"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if head == Head::Softplus && *layer_dims.last().unwrap() != 1 {
        return Err(Error::config("softplus head has a single output"));
    }
    Ok(())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    /// Zeroed moments with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(model: &Mlp<F>, lr: f64) -> Self {
        let zeros = || model.weights.iter().chain(&model.biases).map(|p| vec![F::zero(); p.len()]).collect();
        Self { first_moment: zeros(), second_moment: zeros(), step_count: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Non-finite gradients leave model and state untouched.
    pub fn step(&mut self, model: &mut Mlp<F>, grads: &Gradients<F>) -> Result<()> {
        if grads.weights.len() != model.weights.len()
            || grads.weights.iter().zip(&model.weights).any(|(g, w)| g.len() != w.len())
            || grads.biases.iter().zip(&model.biases).any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::dim("gradients do not match the network parameters"));
        }
        if !grads.all_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let corr1 = F::of(1.0 - self.beta1.powi(t));
        let corr2 = F::of(1.0 - self.beta2.powi(t));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let (weights, biases) = model.params_mut();
        let params = weights.iter_mut().chain(biases.iter_mut());
        let g_all = grads.weights.iter().chain(&grads.biases);
        // moments are stored weights first, then biases, matching this chain
        for (k, (p, g)) in params.zip(g_all).enumerate() {
            let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
