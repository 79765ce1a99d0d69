//! Multi-layer perceptrons over the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{GradTape, Var};

/// Affine map `x·W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in x out
    pub weight: Matrix,
    /// 1 x out
    pub bias: Matrix,
}

impl Linear {
    /// Uniform init in `±1/√in`.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound));
        let weight = draw(input, output);
        let bias = draw(1, output);
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of affine layers with softplus between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        Self {
            layers: dims.windows(2).map(|w| Linear::random(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Parameter matrices as `<prefix>.<layer>.weight` / `.bias`, in layer order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &mut l.weight),
                    (format!("{prefix}.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.len() * 2
    }

    /// Uses already-registered variables, in [`named`](Self::named) order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundMlp {
        assert_eq!(vars.len(), self.param_count());
        BoundMlp {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn bind(&self, tape: &mut GradTape, prefix: &str) -> BoundMlp {
        let vars: Vec<Var> = self
            .named(prefix)
            .into_iter()
            .map(|(n, m)| tape.param(n, m.clone()))
            .collect();
        self.bind_vars(&vars)
    }

    /// Row-wise evaluation of plain values on a scratch tape.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradTape::new();
        let bound = self.bind(&mut tape, "mlp");
        let xv = tape.input(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let w0 = tape.value(self.layers[0].0).rows();
        if tape.value(x).cols() != w0 {
            return Err(Error::invalid(format!(
                "MLP expects {w0} input features, got {}",
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.softplus(h)?;
            }
            let xw = tape.matmul(h, w)?;
            h = tape.add_row(xw, b)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::random(&[5, 8, 3], &mut rng);
        assert_eq!((mlp.input_dim(), mlp.output_dim()), (5, 3));
        let names: Vec<String> = mlp.named("f").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["f.0.weight", "f.0.bias", "f.1.weight", "f.1.bias"]);
        let y = mlp.apply(&Matrix::zeros(4, 5)).unwrap();
        assert_eq!(y.shape(), (4, 3));
        assert!(mlp.apply(&Matrix::zeros(4, 6)).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[3, 4, 2]);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(mlp.apply(&x).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn identity_layers() {
        let x = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.0]]).unwrap();
        let one = Mlp {
            layers: vec![Linear::identity(2)],
        };
        assert_eq!(one.apply(&x).unwrap(), x);
        // Two identity layers: the hidden softplus is the only change.
        let two = Mlp {
            layers: vec![Linear::identity(2), Linear::identity(2)],
        };
        let want = x.map(crate::tape::softplus);
        assert_eq!(two.apply(&x).unwrap(), want);
    }
}
