//! A small fully connected ReLU network over a flat parameter vector, with
//! exact batched backpropagation and ADAM.
//!
//! Parameters are laid out layer by layer: the `out × in` weight matrix in
//! row-major order, followed by the `out` biases when the network has them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::linalg::{gemm, Matrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be ≥ 1".into()));
        }
        Ok(MlpSpec { widths, bias })
    }

    /// `2 → 128 → 64 → 2` with biases.
    pub fn synthetic() -> Self {
        MlpSpec {
            widths: vec![2, 128, 64, 2],
            bias: true,
        }
    }

    /// `784 → 1024 → 512 → 256 → 10`, no biases.
    pub fn mnist() -> Self {
        MlpSpec {
            widths: vec![784, 1024, 512, 256, 10],
            bias: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight { row: usize, col: usize },
    Bias { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLoc {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: Option<usize>,
}

/// Network shape plus the offsets of every layer in the flat vector.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    slots: Vec<LayerSlot>,
    m: usize,
}

/// Per-example scalar whose gradient is accumulated by
/// [`Mlp::weighted_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `−log softmax(φ(x))[y]`
    CrossEntropy,
    /// `‖φ(x)‖²` on the logits
    SquaredOutputNorm,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        let spec = MlpSpec::new(spec.widths, spec.bias)?;
        let mut slots = Vec::with_capacity(spec.layers());
        let mut offset = 0;
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = offset;
            offset += fan_in * fan_out;
            let bias = spec.bias.then(|| {
                let b = offset;
                offset += fan_out;
                b
            });
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                weight,
                bias,
            });
        }
        Ok(Mlp { spec, slots, m: offset })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.m
    }

    /// Maps a flat index to its layer and position. `None` past the end.
    pub fn locate(&self, flat: usize) -> Option<ParamLoc> {
        for (layer, s) in self.slots.iter().enumerate() {
            let w_end = s.weight + s.fan_in * s.fan_out;
            if (s.weight..w_end).contains(&flat) {
                let off = flat - s.weight;
                return Some(ParamLoc {
                    layer,
                    kind: ParamKind::Weight {
                        row: off / s.fan_in,
                        col: off % s.fan_in,
                    },
                });
            }
            if let Some(b) = s.bias {
                if (b..b + s.fan_out).contains(&flat) {
                    return Some(ParamLoc {
                        layer,
                        kind: ParamKind::Bias { row: flat - b },
                    });
                }
            }
        }
        None
    }

    pub fn flat_index(&self, loc: ParamLoc) -> Option<usize> {
        let s = self.slots.get(loc.layer)?;
        match loc.kind {
            ParamKind::Weight { row, col } if row < s.fan_out && col < s.fan_in => {
                Some(s.weight + row * s.fan_in + col)
            }
            ParamKind::Bias { row } if row < s.fan_out => s.bias.map(|b| b + row),
            _ => None,
        }
    }

    /// He-style uniform init, `U(±√(6/fan_in))` for weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.m];
        for s in &self.slots {
            let bound = (6.0 / s.fan_in as f64).sqrt();
            for w in &mut theta[s.weight..s.weight + s.fan_in * s.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        theta
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("forward input", self.spec.input_dim(), x.len())?;
        let batch = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(theta, &batch)?.into_vec())
    }

    /// Logits for every row of `xs` (batch × input).
    pub fn forward_batch(&self, theta: &[f64], xs: &Matrix) -> Result<Matrix> {
        let mut acts = self.run(theta, xs)?;
        Ok(acts.pop().expect("at least one layer"))
    }

    /// Activations per layer: `[x, relu(z₁), ..., z_L]`.
    fn run(&self, theta: &[f64], xs: &Matrix) -> Result<Vec<Matrix>> {
        check_len("parameter vector", self.m, theta.len())?;
        check_len("forward input", self.spec.input_dim(), xs.cols())?;
        let b = xs.rows();
        let mut acts = Vec::with_capacity(self.slots.len() + 1);
        acts.push(xs.clone());
        for (l, s) in self.slots.iter().enumerate() {
            let prev = &acts[l];
            let mut z = Matrix::zeros(b, s.fan_out);
            if let Some(bo) = s.bias {
                let bias = &theta[bo..bo + s.fan_out];
                for i in 0..b {
                    z.row_mut(i).copy_from_slice(bias);
                }
            }
            // z += prev · Wᵀ
            gemm(
                (b, s.fan_in, s.fan_out),
                1.0,
                (prev.as_slice(), s.fan_in, 1),
                (&theta[s.weight..], 1, s.fan_in),
                1.0,
                (z.as_mut_slice(), s.fan_out, 1),
            );
            if l + 1 < self.slots.len() {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        if !acts.last().expect("nonempty").is_finite() {
            return Err(Error::NonFinite("forward pass"));
        }
        Ok(acts)
    }

    /// `Σᵢ wᵢ · objᵢ` and its gradient with respect to `theta`, in one
    /// batched backward pass.
    pub fn weighted_gradient(
        &self,
        theta: &[f64],
        xs: &Matrix,
        labels: &[usize],
        weights: &[f64],
        objective: Objective,
    ) -> Result<(f64, Vec<f64>)> {
        let b = xs.rows();
        check_len("weights", b, weights.len())?;
        if objective == Objective::CrossEntropy {
            check_len("labels", b, labels.len())?;
        }
        let acts = self.run(theta, xs)?;
        let logits = acts.last().expect("nonempty");
        let k = self.spec.output_dim();

        let mut value = 0.0;
        let mut delta = Matrix::zeros(b, k);
        for i in 0..b {
            let z = logits.row(i);
            let w = weights[i];
            let d = delta.row_mut(i);
            match objective {
                Objective::CrossEntropy => {
                    let y = labels[i];
                    let probs = softmax(z);
                    value += w * xent_loss(z, y)?;
                    for (dj, pj) in d.iter_mut().zip(&probs) {
                        *dj = w * pj;
                    }
                    d[y] -= w;
                }
                Objective::SquaredOutputNorm => {
                    value += w * z.iter().map(|v| v * v).sum::<f64>();
                    for (dj, zj) in d.iter_mut().zip(z) {
                        *dj = 2.0 * w * zj;
                    }
                }
            }
        }

        let mut grad = vec![0.0; self.m];
        for (l, s) in self.slots.iter().enumerate().rev() {
            let input = &acts[l];
            // dW = δᵀ · input  (out × in)
            gemm(
                (s.fan_out, b, s.fan_in),
                1.0,
                (delta.as_slice(), 1, s.fan_out),
                (input.as_slice(), s.fan_in, 1),
                0.0,
                (&mut grad[s.weight..s.weight + s.fan_out * s.fan_in], s.fan_in, 1),
            );
            if let Some(bo) = s.bias {
                let gb = &mut grad[bo..bo + s.fan_out];
                for i in 0..b {
                    for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                        *g += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // δ ← (δ · W) ∘ relu'(z_{l})
            let mut back = Matrix::zeros(b, s.fan_in);
            gemm(
                (b, s.fan_out, s.fan_in),
                1.0,
                (delta.as_slice(), s.fan_out, 1),
                (&theta[s.weight..], s.fan_in, 1),
                0.0,
                (back.as_mut_slice(), s.fan_in, 1),
            );
            for (g, a) in back.as_mut_slice().iter_mut().zip(input.as_slice()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = back;
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward pass"));
        }
        Ok((value, grad))
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn backward(&self, theta: &[f64], xs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let b = xs.rows();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let w = vec![1.0 / b as f64; b];
        self.weighted_gradient(theta, xs, labels, &w, Objective::CrossEntropy)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[y]`, via max-shifted log-sum-exp.
pub fn xent_loss(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::InvalidLabel {
            label: y,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[y]).max(0.0))
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(m: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; m],
            second_moment: vec![0.0; m],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected ADAM update of `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("adam theta", self.first_moment.len(), theta.len())?;
        check_len("adam grad", self.first_moment.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("ADAM gradient"));
        }
        self.step_count += 1;
        let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (((p, g), m), v) in theta
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
