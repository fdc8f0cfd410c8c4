//! Fully-connected layer stacks.

use rand::Rng;

use crate::tensor::{Graph, Result, Tensor, Var};

/// Affine layer `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Zero bias; weights drawn from N(0, 1/fan_in).
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Dropout applied after each hidden activation.
pub struct DropoutCtx<'a, R: Rng + ?Sized> {
    pub p: f64,
    pub training: bool,
    pub rng: &'a mut R,
}

/// A stack of [`Linear`] layers with ReLU between them and no activation on
/// the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    /// Parameters in binding order: `w0, b0, w1, b1, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the parameters in `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass through bound parameters; returns the pre-activation
    /// output of the final layer.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &[Var],
        x: Var,
        mut dropout: Option<&mut DropoutCtx<'_, R>>,
    ) -> Result<Var> {
        let n = self.layers.len();
        let mut h = x;
        for i in 0..n {
            let z = g.matmul(h, bound[2 * i])?;
            h = g.add_row(z, bound[2 * i + 1])?;
            if i + 1 < n {
                h = g.relu(h);
                if let Some(ctx) = dropout.as_deref_mut() {
                    h = g.dropout(h, ctx.p, ctx.rng, ctx.training)?;
                }
            }
        }
        Ok(h)
    }

    /// Gradient-free evaluation.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward::<rand::rngs::ThreadRng>(&mut g, &bound, xv, None)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&[400, 50, 3], &mut rng);
        assert_eq!(m.widths(), vec![400, 50, 3]);
        assert!(m.layers.iter().all(|l| l.bias.data().iter().all(|b| *b == 0.0)));
        let w = m.layers[0].weight.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0 / 400.0).abs() < 0.1 / 400.0, "{var}");
    }

    #[test]
    fn eval_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&[4, 3], &mut rng);
        assert!(m.eval(&Tensor::zeros(&[2, 5])).is_err());
        assert_eq!(m.eval(&Tensor::zeros(&[2, 4])).unwrap().shape(), &[2, 3]);
    }
}
