//! Small classifiers with hand-written gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Softmax regression. Keys: 0 weights (classes x dim), 1 bias.
    Logistic,
    /// One tanh hidden layer. Keys: 0 W1 (hidden x dim), 1 b1,
    /// 2 W2 (classes x hidden), 3 b2.
    Mlp { hidden: usize },
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Logistic => f.write_str("logistic"),
            ModelKind::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "logistic" => Ok(ModelKind::Logistic),
            None if s == "mlp" => Ok(ModelKind::Mlp { hidden: 32 }),
            Some(("mlp", h)) => match h.parse() {
                Ok(hidden) if hidden > 0 => Ok(ModelKind::Mlp { hidden }),
                _ => Err(format!("bad hidden width '{h}'")),
            },
            _ => Err(format!("unknown model '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub dim: usize,
    pub classes: usize,
    pub params: Vec<Vec<f64>>,
}

fn log_softmax_grad(logits: &mut [f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let loss = -(logits[y] - m - z.ln());
    for l in logits.iter_mut() {
        *l = (*l - m).exp() / z;
    }
    logits[y] -= 1.0;
    loss
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| bi + w[i * n..(i + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

impl Model {
    /// Weights drawn uniformly in `±sqrt(6 / (fan_in + fan_out))`; biases
    /// and all softmax-regression parameters start at zero.
    pub fn new(kind: ModelKind, dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| -> Vec<f64> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()
        };
        let params = match kind {
            ModelKind::Logistic => vec![vec![0.0; classes * dim], vec![0.0; classes]],
            ModelKind::Mlp { hidden } => vec![
                glorot(hidden, dim),
                vec![0.0; hidden],
                glorot(classes, hidden),
                vec![0.0; classes],
            ],
        };
        Model {
            kind,
            dim,
            classes,
            params,
        }
    }

    pub fn key_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self, s: &Sample) -> Result<(), TrainError> {
        if s.x.len() != self.dim || s.y >= self.classes {
            return Err(TrainError::Data(format!(
                "sample with {} features and label {} does not fit a {}-feature {}-class model",
                s.x.len(),
                s.y,
                self.dim,
                self.classes
            )));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ModelKind::Logistic => affine(&self.params[0], &self.params[1], x),
            ModelKind::Mlp { .. } => {
                let h: Vec<f64> = affine(&self.params[0], &self.params[1], x)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                affine(&self.params[2], &self.params[3], &h)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best })
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples.iter().filter(|s| self.predict(&s.x) == s.y).count();
        hits as f64 / samples.len() as f64
    }

    /// Summed cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Sample]) -> f64 {
        batch
            .iter()
            .map(|s| {
                let mut l = self.logits(&s.x);
                log_softmax_grad(&mut l, s.y)
            })
            .sum()
    }

    pub fn forward_backward(&self, batch: &[Sample]) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        self.forward_backward_with(batch, |_, _| {})
    }

    /// Summed loss and summed per-sample gradients over `batch`. `on_key`
    /// is called with each key's finished gradient as soon as the backward
    /// pass completes it, output layer first.
    pub fn forward_backward_with(
        &self,
        batch: &[Sample],
        mut on_key: impl FnMut(usize, &[f64]),
    ) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Data("empty batch".into()));
        }
        for s in batch {
            self.check(s)?;
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        match self.kind {
            ModelKind::Logistic => {
                let d = self.dim;
                for s in batch {
                    let mut delta = self.logits(&s.x);
                    loss += log_softmax_grad(&mut delta, s.y);
                    for (c, dc) in delta.iter().enumerate() {
                        for (g, x) in grads[0][c * d..(c + 1) * d].iter_mut().zip(&s.x) {
                            *g += dc * x;
                        }
                        grads[1][c] += dc;
                    }
                }
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss);
                }
                on_key(1, &grads[1]);
                on_key(0, &grads[0]);
            }
            ModelKind::Mlp { hidden } => {
                let d = self.dim;
                let hs: Vec<Vec<f64>> = batch
                    .iter()
                    .map(|s| {
                        affine(&self.params[0], &self.params[1], &s.x)
                            .into_iter()
                            .map(f64::tanh)
                            .collect()
                    })
                    .collect();
                let mut deltas = Vec::with_capacity(batch.len());
                for (s, h) in batch.iter().zip(&hs) {
                    let mut delta = affine(&self.params[2], &self.params[3], h);
                    loss += log_softmax_grad(&mut delta, s.y);
                    for (c, dc) in delta.iter().enumerate() {
                        for (g, hj) in grads[2][c * hidden..(c + 1) * hidden].iter_mut().zip(h) {
                            *g += dc * hj;
                        }
                        grads[3][c] += dc;
                    }
                    deltas.push(delta);
                }
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss);
                }
                on_key(3, &grads[3]);
                on_key(2, &grads[2]);
                for ((s, h), delta) in batch.iter().zip(&hs).zip(&deltas) {
                    for j in 0..hidden {
                        let back: f64 = (0..self.classes)
                            .map(|c| delta[c] * self.params[2][c * hidden + j])
                            .sum();
                        let dz = back * (1.0 - h[j] * h[j]);
                        for (g, x) in grads[0][j * d..(j + 1) * d].iter_mut().zip(&s.x) {
                            *g += dz * x;
                        }
                        grads[1][j] += dz;
                    }
                }
                on_key(1, &grads[1]);
                on_key(0, &grads[0]);
            }
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_sample_has_closed_form_gradient() {
        // zero model, d=2: both classes get probability 1/2
        let m = Model::new(ModelKind::Logistic, 2, 2, 0);
        let s = Sample { x: vec![1.0, -2.0], y: 1 };
        let (loss, g) = m.forward_backward(std::slice::from_ref(&s)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g[0], vec![0.5, -1.0, -0.5, 1.0]);
        assert_eq!(g[1], vec![0.5, -0.5]);
    }

    #[test]
    fn symmetric_balanced_batch_has_zero_bias_gradient() {
        let m = Model::new(ModelKind::Logistic, 3, 2, 0);
        let batch = vec![
            Sample { x: vec![1.0, 2.0, 3.0], y: 0 },
            Sample { x: vec![-1.0, -2.0, -3.0], y: 1 },
        ];
        let (_, g) = m.forward_backward(&batch).unwrap();
        assert!(g[1].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn callbacks_run_output_layer_first() {
        let m = Model::new(ModelKind::Mlp { hidden: 3 }, 2, 2, 1);
        let mut order = Vec::new();
        let (_, g) = m
            .forward_backward_with(&[Sample { x: vec![0.3, 0.1], y: 0 }], |k, grad| {
                order.push((k, grad.len()))
            })
            .unwrap();
        assert_eq!(order, vec![(3, 2), (2, 6), (1, 3), (0, 6)]);
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 3, 6, 2]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = Model::new(ModelKind::Logistic, 2, 2, 0);
        assert!(m.forward_backward(&[]).is_err());
        assert!(m.forward_backward(&[Sample { x: vec![1.0], y: 0 }]).is_err());
        assert!(m.forward_backward(&[Sample { x: vec![1.0, 1.0], y: 2 }]).is_err());
        let mut big = m.clone();
        big.params[0] = vec![f64::INFINITY; 4];
        assert!(matches!(
            big.forward_backward(&[Sample { x: vec![1.0, 1.0], y: 0 }]),
            Err(TrainError::NonFiniteLoss)
        ));
    }

    #[test]
    fn model_names_parse() {
        assert_eq!("logistic".parse::<ModelKind>().unwrap(), ModelKind::Logistic);
        assert_eq!("mlp:8".parse::<ModelKind>().unwrap(), ModelKind::Mlp { hidden: 8 });
        assert!("mlp:0".parse::<ModelKind>().is_err());
        for k in [ModelKind::Logistic, ModelKind::Mlp { hidden: 5 }] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
    }
}
