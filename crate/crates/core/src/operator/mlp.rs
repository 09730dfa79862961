use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// `tanh` through one `exp`; agrees with `f64::tanh` to a few ulps of 1 and
/// is roughly twice as fast.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(fast_tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the last layer is
/// linear. `weights[l]` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Parameter gradients with the same layout as [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = sizes[1..].iter().map(|s| Array1::zeros(*s)).collect();
        Ok(Self { weights, biases, activation })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for w in &mut net.weights {
            let (out, inp) = w.dim();
            let limit = (6.0 / (out + inp) as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].ncols()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_size(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec())
    }

    /// Rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            if l + 1 < self.weights.len() {
                self.activation.apply(&mut z);
            }
            a = z;
        }
        Ok(a)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_size() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {cols}",
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output; `acts[0]` is the input.
    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(x.ncols())?;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l + 1 < self.weights.len() {
                self.activation.apply(&mut z);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Reverse pass for `d loss / d output = grad_out`.
    pub(crate) fn backward(&self, acts: &[Array2<f64>], grad_out: Array2<f64>) -> MlpGrads {
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        let mut delta = grad_out;
        for l in (0..layers).rev() {
            gw.push(delta.t().dot(&acts[l]));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                let act = self.activation;
                back.zip_mut_with(&acts[l], |d, a| *d *= act.grad_from_output(*a));
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        MlpGrads { weights: gw, biases: gb }
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }

    /// Reads parameters in [`Mlp::write_params`] order; returns the count used.
    pub(crate) fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for slot in w.iter_mut().chain(b.iter_mut()) {
                *slot = *src.get(pos).ok_or_else(|| Error::Format("parameter blob too short".into()))?;
                pos += 1;
            }
        }
        Ok(pos)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub(crate) fn write(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_gives_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut net = Mlp::zeros(&[2, 2], Activation::Relu).unwrap();
        net.weights[0] = ndarray::arr2(&[[1.0, 2.0], [-3.0, 0.5]]);
        net.biases[0] = ndarray::arr1(&[0.1, -0.2]);
        let y = net.forward(&[2.0, -1.0]).unwrap();
        assert!((y[0] - 0.1).abs() < 1e-15);
        assert!((y[1] - (-6.5 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn fast_tanh_matches_std() {
        for i in -4000..=4000 {
            let x = i as f64 / 100.0;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-15, "x = {x}");
        }
        assert_eq!(fast_tanh(1e4), 1.0);
        assert_eq!(fast_tanh(-1e4), -1.0);
        assert!(fast_tanh(f64::NAN).is_nan());
    }

    #[test]
    fn saturated_tanh_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::init(&[4, 16, 3], Activation::Tanh, &mut rng).unwrap();
        net.weights[0].mapv_inplace(|w| 50.0 * w);
        for s in 0..20 {
            let x: Vec<f64> = (0..4).map(|i| ((s * 4 + i) as f64).sin()).collect();
            let y = net.forward(&x).unwrap();
            for (o, yo) in y.iter().enumerate() {
                let bound: f64 = net.weights[1].row(o).iter().map(|w| w.abs()).sum::<f64>() + net.biases[1][o].abs();
                assert!(yo.abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Mlp::zeros(&[3], Activation::Tanh).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::init(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let mut flat = Vec::new();
        net.write_params(&mut flat);
        assert_eq!(flat.len(), net.param_count());
        let mut other = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(other.read_params(&flat).unwrap(), flat.len());
        assert_eq!(other, net);
    }
}
