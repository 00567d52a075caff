//! Dense network with optional per-layer layer normalization.
//!
//! Layer computation, in order:
//!
//! ```text
//! z = W x + b
//! h = γ ⊙ (z − mean(z)) / sqrt(var(z) + ε) + β    (if layer norm enabled)
//! a = activation(h)
//! ```
//!
//! `forward_batch` / `backward_batch` operate on row-major `(batch, dim)`
//! matrices; the single-sample entry points wrap them.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

use super::LAYER_NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, h: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => h.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => h.mapv(f64::tanh),
            Activation::Identity => h.clone(),
        }
    }

    /// Derivative expressed through the activation *output* `a`.
    fn derivative_from_output(self, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Identity => Array2::ones(a.raw_dim()),
        }
    }
}

/// Gain/shift parameters of a layer-norm stage.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix, shape `(out_dim, in_dim)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub norm: Option<LayerNorm>,
    pub act: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Feed-forward network; consecutive layer dimensions must compose.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activation record from one `forward_batch` call.
///
/// Holds, per layer, the input, the normalized vector + inverse std (when
/// layer norm is enabled) and the activation output. A shape signature ties
/// the tape to the parameters it was recorded under.
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    norm: Vec<Option<NormCache>>,
    outputs: Vec<Array2<f64>>,
    sig: Vec<(usize, usize, bool)>,
}

struct NormCache {
    /// Normalized pre-gain vector `n`, shape `(batch, dim)`.
    n: Array2<f64>,
    /// `1 / sqrt(var + ε)` per row.
    inv_std: Array1<f64>,
}

/// Parameter gradients, shape-congruent with the owning [`Mlp`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dnorm: Option<(Array1<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    dw: Array2::zeros(l.w.raw_dim()),
                    db: Array1::zeros(l.b.raw_dim()),
                    dnorm: l
                        .norm
                        .as_ref()
                        .map(|n| (Array1::zeros(n.gamma.raw_dim()), Array1::zeros(n.beta.raw_dim()))),
                })
                .collect(),
        }
    }

    /// Element-wise accumulate (same-shape gradients).
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw += &b.dw;
            a.db += &b.db;
            if let (Some((ga, bb)), Some((gb, b2))) = (a.dnorm.as_mut(), b.dnorm.as_ref()) {
                *ga += gb;
                *bb += b2;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.dw *= c;
            l.db *= c;
            if let Some((g, b)) = l.dnorm.as_mut() {
                *g *= c;
                *b *= c;
            }
        }
    }

    /// Flatten in the same parameter order as [`Mlp::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.dw.iter());
            out.extend(l.db.iter());
            if let Some((g, b)) = &l.dnorm {
                out.extend(g.iter());
                out.extend(b.iter());
            }
        }
        out
    }

    /// Global L2 norm, used for gradient clipping in model training.
    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for l in &self.layers {
            s += l.dw.iter().map(|v| v * v).sum::<f64>();
            s += l.db.iter().map(|v| v * v).sum::<f64>();
            if let Some((g, b)) = &l.dnorm {
                s += g.iter().map(|v| v * v).sum::<f64>();
                s += b.iter().map(|v| v * v).sum::<f64>();
            }
        }
        s.sqrt()
    }
}

/// Builder-ish constructors.
impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::contract(format!(
                    "layer dims do not compose: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if layers.is_empty() {
            return Err(Error::contract("network must have at least one layer"));
        }
        Ok(Mlp { layers })
    }

    /// Standard stack: `dims = [in, h1, ..., out]`, hidden activation `act`,
    /// identity output layer. `layer_norm` enables normalization on every
    /// hidden layer. Weights are uniform `±1/√fan_in`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        act: Activation,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("need at least input and output dims"));
        }
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let last = i == n_layers - 1;
            let limit = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                norm: if layer_norm && !last {
                    Some(LayerNorm::identity(fan_out))
                } else {
                    None
                },
                act: if last { Activation::Identity } else { act },
            });
        }
        Mlp::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    fn shape_sig(&self) -> Vec<(usize, usize, bool)> {
        self.layers
            .iter()
            .map(|l| (l.out_dim(), l.in_dim(), l.norm.is_some()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.w.len() + l.b.len() + l.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len())
            })
            .sum()
    }

    /// Parameter vector in a fixed order (per layer: W row-major, b, γ, β).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
            if let Some(n) = &l.norm {
                out.extend(n.gamma.iter());
                out.extend(n.beta.iter());
            }
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat parameter length {} != expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in l.b.iter_mut() {
                *v = *it.next().unwrap();
            }
            if let Some(n) = &mut l.norm {
                for v in n.gamma.iter_mut() {
                    *v = *it.next().unwrap();
                }
                for v in n.beta.iter_mut() {
                    *v = *it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    /// Forward pass over a `(batch, in_dim)` matrix.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        if input.ncols() != self.in_dim() {
            return Err(Error::contract(format!(
                "input dim {} does not match first layer in_dim {}",
                input.ncols(),
                self.in_dim()
            )));
        }
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            norm: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
            sig: self.shape_sig(),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            tape.inputs.push(x.clone());
            let mut z = x.dot(&layer.w.t());
            z += &layer.b;
            let h = match &layer.norm {
                Some(norm) => {
                    let d = z.ncols() as f64;
                    let mean = z.mean_axis(Axis(1)).unwrap();
                    let mut centered = z;
                    for (mut row, m) in centered.rows_mut().into_iter().zip(mean.iter()) {
                        row.mapv_inplace(|v| v - m);
                    }
                    let var = centered.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / d);
                    let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
                    let mut n = centered;
                    for (mut row, s) in n.rows_mut().into_iter().zip(inv_std.iter()) {
                        row.mapv_inplace(|v| v * s);
                    }
                    let mut h = n.clone();
                    for mut row in h.rows_mut() {
                        row.zip_mut_with(&norm.gamma.view(), |v, g| *v *= g);
                        row.zip_mut_with(&norm.beta.view(), |v, b| *v += b);
                    }
                    tape.norm.push(Some(NormCache { n, inv_std }));
                    h
                }
                None => {
                    tape.norm.push(None);
                    z
                }
            };
            x = layer.act.apply(&h);
            tape.outputs.push(x.clone());
        }
        Ok((x, tape))
    }

    /// Single-sample forward; returns the output vector and the tape.
    pub fn forward(&self, input: &Array1<f64>) -> Result<(Array1<f64>, Tape)> {
        let batch = input
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let (out, tape) = self.forward_batch(&batch)?;
        Ok((out.row(0).to_owned(), tape))
    }

    /// Forward without recording a tape (inference only, fewer clones).
    pub fn infer_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::contract(format!(
                "input dim {} does not match first layer in_dim {}",
                input.ncols(),
                self.in_dim()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = x.dot(&layer.w.t());
            z += &layer.b;
            let h = match &layer.norm {
                Some(norm) => {
                    let d = z.ncols() as f64;
                    let mean = z.mean_axis(Axis(1)).unwrap();
                    for (mut row, m) in z.rows_mut().into_iter().zip(mean.iter()) {
                        row.mapv_inplace(|v| v - m);
                    }
                    let var = z.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / d);
                    let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
                    for (mut row, s) in z.rows_mut().into_iter().zip(inv_std.iter()) {
                        row.mapv_inplace(|v| v * s);
                    }
                    for mut row in z.rows_mut() {
                        row.zip_mut_with(&norm.gamma.view(), |v, g| *v *= g);
                        row.zip_mut_with(&norm.beta.view(), |v, b| *v += b);
                    }
                    z
                }
                None => z,
            };
            x = layer.act.apply(&h);
        }
        Ok(x)
    }

    pub fn infer(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        let batch = input.view().insert_axis(Axis(0)).to_owned();
        Ok(self.infer_batch(&batch)?.row(0).to_owned())
    }

    /// Backward pass. `output_grad` is `∂loss/∂output`, shape `(batch, out)`.
    /// Returns parameter gradients (summed over the batch) and `∂loss/∂input`.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        output_grad: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if tape.sig != self.shape_sig() {
            return Err(Error::contract(
                "stale tape: parameter shapes changed since forward",
            ));
        }
        if output_grad.ncols() != self.out_dim() || output_grad.nrows() != tape.inputs[0].nrows() {
            return Err(Error::contract("output gradient shape mismatch"));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut dy = output_grad.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let a = &tape.outputs[idx];
            let mut dh = dy * layer.act.derivative_from_output(a);
            let dz = match (&layer.norm, &tape.norm[idx]) {
                (Some(norm), Some(cache)) => {
                    let lg = &mut grads.layers[idx];
                    let (dgamma, dbeta) = lg.dnorm.as_mut().unwrap();
                    *dgamma += &(&dh * &cache.n).sum_axis(Axis(0));
                    *dbeta += &dh.sum_axis(Axis(0));
                    // dn -> dz:  dz = s (dn − mean(dn) − n·mean(dn n))
                    for mut row in dh.rows_mut() {
                        row.zip_mut_with(&norm.gamma.view(), |v, g| *v *= g);
                    }
                    let dn = dh;
                    let d = dn.ncols() as f64;
                    let mean_dn = dn.mean_axis(Axis(1)).unwrap();
                    let mean_dn_n = (&dn * &cache.n).sum_axis(Axis(1)).mapv(|v| v / d);
                    let mut dz = dn;
                    for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
                        let (m1, m2, s) = (mean_dn[i], mean_dn_n[i], cache.inv_std[i]);
                        let n_row = cache.n.row(i);
                        for (v, n) in row.iter_mut().zip(n_row.iter()) {
                            *v = s * (*v - m1 - n * m2);
                        }
                    }
                    dz
                }
                (None, None) => dh,
                _ => unreachable!("tape/layer norm flags agree by signature check"),
            };
            grads.layers[idx].dw += &dz.t().dot(&tape.inputs[idx]);
            grads.layers[idx].db += &dz.sum_axis(Axis(0));
            dy = dz.dot(&layer.w);
        }
        Ok((grads, dy))
    }

    /// Single-sample backward; see [`Mlp::backward_batch`].
    pub fn backward(&self, tape: &Tape, output_grad: &Array1<f64>) -> Result<Gradients> {
        let g = output_grad.view().insert_axis(Axis(0)).to_owned();
        Ok(self.backward_batch(tape, &g)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn identity_layer(dim: usize) -> Layer {
        Layer {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
            norm: None,
            act: Activation::Identity,
        }
    }

    #[test]
    fn identity_net_passes_input_through() {
        let net = Mlp::from_layers(vec![identity_layer(2)]).unwrap();
        let (out, _) = net.forward(&array![1.0, 2.0]).unwrap();
        assert_eq!(out, array![1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let mut layer = identity_layer(2);
        layer.act = Activation::Relu;
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let (out, _) = net.forward(&array![-3.0, 4.0]).unwrap();
        assert_eq!(out, array![0.0, 4.0]);
    }

    #[test]
    fn constant_vector_normalizes_to_zero() {
        // 2-layer net, layer norm on the hidden layer; input [5, 5] with
        // identity weights gives a constant pre-activation which must map to
        // the zero vector before gain/shift.
        let hidden = Layer {
            w: Array2::eye(2),
            b: Array1::zeros(2),
            norm: Some(LayerNorm::identity(2)),
            act: Activation::Identity,
        };
        let out = identity_layer(2);
        let net = Mlp::from_layers(vec![hidden, out]).unwrap();
        let (y, tape) = net.forward(&array![5.0, 5.0]).unwrap();
        assert_eq!(y, array![0.0, 0.0]);
        let cache = tape.norm[0].as_ref().unwrap();
        assert_eq!(cache.n, array![[0.0, 0.0]]);
    }

    #[test]
    fn linear_derivative_is_input() {
        // y = w·x with x=[2], w=[3]; loss = y  ⇒  ∂loss/∂w = [2].
        let layer = Layer {
            w: array![[3.0]],
            b: array![0.0],
            norm: None,
            act: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let (y, tape) = net.forward(&array![2.0]).unwrap();
        assert_eq!(y, array![6.0]);
        let grads = net.backward(&tape, &array![1.0]).unwrap();
        assert_eq!(grads.layers[0].dw, array![[2.0]]);
        assert_eq!(grads.layers[0].db, array![1.0]);
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let net = Mlp::from_layers(vec![identity_layer(2)]).unwrap();
        assert!(matches!(
            net.forward(&array![1.0, 2.0, 3.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let net = Mlp::new(&[2, 4, 1], Activation::Relu, false, &mut rng).unwrap();
        let (_, tape) = net.forward(&array![0.3, -0.2]).unwrap();
        let other = Mlp::new(&[2, 5, 1], Activation::Relu, false, &mut rng).unwrap();
        assert!(matches!(
            other.backward(&tape, &array![1.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences_random_net() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, false, &mut rng).unwrap();
        let x = array![[0.4, -1.2, 0.7], [0.1, 0.3, -0.5]];
        let max_rel = gradcheck::check_mlp_scalar_loss(&net, &x);
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 8, 2], Activation::Relu, true, &mut rng).unwrap();
        let x = array![[0.9, -0.3, 1.4], [-0.2, 0.8, 0.1], [2.0, -1.0, 0.4]];
        let max_rel = gradcheck::check_mlp_scalar_loss(&net, &x);
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 16, 16, 2], Activation::Relu, true, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 * 0.7 - j as f64 * 0.3).sin());
        let a = net.infer_batch(&x).unwrap();
        let b = net.infer_batch(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let net = Mlp::new(&[6, 32, 1], Activation::Relu, true, &mut rng).unwrap();
        // Inputs scaled up so the pre-activation variance dominates the
        // 1e-5 epsilon; the normalized variance then sits within 1e-6 of 1.
        let x = Array2::from_shape_fn((4, 6), |(i, j)| 1e3 * ((i * 7 + j) as f64).sin());
        let (_, tape) = net.forward_batch(&x).unwrap();
        let cache = tape.norm[0].as_ref().unwrap();
        for row in cache.n.rows() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn layer_norm_output_norm_is_bounded() {
        // ‖ψ(x)‖ ≤ ‖γ‖·√d + ‖β‖ for any input scale.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 24, 24, 1], Activation::Relu, true, &mut rng).unwrap();
        for k in 0..=6 {
            let scale = 10f64.powi(k);
            let x = Array2::from_shape_fn((3, 3), |(i, j)| scale * ((i + 2 * j) as f64 - 2.0));
            let (_, tape) = net.forward_batch(&x).unwrap();
            for (idx, layer) in net.layers().iter().enumerate() {
                if let Some(norm) = &layer.norm {
                    let d = norm.gamma.len() as f64;
                    let bound = norm.gamma.iter().map(|v| v * v).sum::<f64>().sqrt() * d.sqrt()
                        + norm.beta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for row in tape.outputs[idx].rows() {
                        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        assert!(
                            nrm <= bound + 1e-9,
                            "‖ψ‖ = {nrm} exceeds bound {bound} at scale 1e{k}"
                        );
                    }
                }
            }
        }
    }
}
