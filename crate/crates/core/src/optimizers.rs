//! Parameter update rules shared by servers and workers.

use thiserror::Error;

use crate::wire::{Reader, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("invalid optimizer spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// The server stores the received aggregate as is. Used by synchronous
    /// training, where workers apply the update themselves.
    Assign,
    Sgd,
    Elastic1,
}

impl OptimizerKind {
    fn to_u8(self) -> u8 {
        match self {
            OptimizerKind::Assign => 0,
            OptimizerKind::Sgd => 1,
            OptimizerKind::Elastic1 => 2,
        }
    }

    fn from_u8(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(OptimizerKind::Assign),
            1 => Ok(OptimizerKind::Sgd),
            2 => Ok(OptimizerKind::Elastic1),
            _ => Err(WireError::Malformed("unknown optimizer kind")),
        }
    }
}

pub const SPEC_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub rescale: f64,
    pub alpha: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::assign()
    }
}

impl OptimizerSpec {
    pub fn assign() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Assign,
            lr: 1.0,
            rescale: 1.0,
            alpha: 1.0,
        }
    }

    pub fn sgd(lr: f64, rescale: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            lr,
            rescale,
            alpha: 1.0,
        }
    }

    pub fn elastic(alpha: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Elastic1,
            lr: 1.0,
            rescale: alpha,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(OptimizerError::InvalidSpec("learning rate must be positive"));
        }
        if !(self.rescale.is_finite() && self.rescale > 0.0) {
            return Err(OptimizerError::InvalidSpec("rescale must be positive"));
        }
        if self.kind == OptimizerKind::Elastic1 && !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(OptimizerError::InvalidSpec("alpha must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; SPEC_LEN] {
        let mut out = [0u8; SPEC_LEN];
        out[0] = self.kind.to_u8();
        out[1..9].copy_from_slice(&self.lr.to_le_bytes());
        out[9..17].copy_from_slice(&self.rescale.to_le_bytes());
        out[17..25].copy_from_slice(&self.alpha.to_le_bytes());
        out
    }

    /// Decodes and validates a spec.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let kind = OptimizerKind::from_u8(r.u8()?)?;
        let spec = OptimizerSpec {
            kind,
            lr: r.f64()?,
            rescale: r.f64()?,
            alpha: r.f64()?,
        };
        r.finish()?;
        spec.validate()
            .map_err(|_| WireError::Malformed("optimizer parameters out of range"))?;
        Ok(spec)
    }

    /// Applies this rule to a server-held value given an incoming aggregate.
    /// For `Elastic1` the value is the center variable and `incoming` is a
    /// client's parameters.
    pub fn apply(&self, value: &mut [f64], incoming: &[f64]) -> Result<(), OptimizerError> {
        check(value, incoming)?;
        match self.kind {
            OptimizerKind::Assign => value.copy_from_slice(incoming),
            OptimizerKind::Sgd => sgd_in_place(value, incoming, self.lr, self.rescale),
            OptimizerKind::Elastic1 => {
                for (c, w) in value.iter_mut().zip(incoming) {
                    *c += self.alpha * (w - *c);
                }
            }
        }
        Ok(())
    }
}

fn check(a: &[f64], b: &[f64]) -> Result<(), OptimizerError> {
    if a.len() != b.len() {
        return Err(OptimizerError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if let Some(i) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(OptimizerError::NonFinite(i % a.len().max(1)));
    }
    Ok(())
}

pub(crate) fn sgd_in_place(w: &mut [f64], g: &[f64], lr: f64, rescale: f64) {
    let step = lr * rescale;
    for (w, g) in w.iter_mut().zip(g) {
        *w -= step * g;
    }
}

/// `w - lr * rescale * g`.
pub fn sgd_update(w: &[f64], g: &[f64], lr: f64, rescale: f64) -> Result<Vec<f64>, OptimizerError> {
    check(w, g)?;
    let mut out = w.to_vec();
    sgd_in_place(&mut out, g, lr, rescale);
    Ok(out)
}

/// Moves the center toward the worker: `center + alpha * (w - center)`.
pub fn elastic_center_update(center: &[f64], w: &[f64], alpha: f64) -> Result<Vec<f64>, OptimizerError> {
    check(center, w)?;
    Ok(center.iter().zip(w).map(|(c, w)| c + alpha * (w - c)).collect())
}

/// Moves the worker toward the center: `w - alpha * (w - center)`.
pub fn elastic_local_update(w: &[f64], center: &[f64], alpha: f64) -> Result<Vec<f64>, OptimizerError> {
    check(w, center)?;
    Ok(w.iter().zip(center).map(|(w, c)| w - alpha * (w - c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sgd_examples() {
        let w = sgd_update(&[1.0], &[2.0], 0.1, 1.0).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_update(&[3.0, 4.0], &[0.0, 0.0], 0.5, 1.0).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(
            sgd_update(&[1.0], &[1.0, 2.0], 0.1, 1.0),
            Err(OptimizerError::LengthMismatch { .. })
        ));
        assert!(matches!(
            sgd_update(&[1.0], &[f64::NAN], 0.1, 1.0),
            Err(OptimizerError::NonFinite(0))
        ));
    }

    #[test]
    fn rescaled_sum_equals_mean_gradient_step() {
        let per_sample = [[0.5, -1.0], [1.5, 2.0], [-0.25, 0.75]];
        let sum: Vec<f64> = (0..2).map(|j| per_sample.iter().map(|g| g[j]).sum()).collect();
        let mean: Vec<f64> = sum.iter().map(|s| s / 3.0).collect();
        let a = sgd_update(&[1.0, 1.0], &sum, 0.3, 1.0 / 3.0).unwrap();
        let b = sgd_update(&[1.0, 1.0], &mean, 0.3, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn elastic_examples() {
        assert_eq!(elastic_center_update(&[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
        assert_eq!(elastic_local_update(&[2.0], &[0.0], 0.5).unwrap(), vec![1.0]);
        assert_eq!(elastic_center_update(&[3.0], &[3.0], 0.7).unwrap(), vec![3.0]);
        assert_eq!(elastic_local_update(&[3.0], &[3.0], 0.7).unwrap(), vec![3.0]);
        assert_eq!(elastic_center_update(&[1.0], &[5.0], 1.0).unwrap(), vec![5.0]);
    }

    #[test]
    fn spec_round_trip_and_validation() {
        for s in [OptimizerSpec::assign(), OptimizerSpec::sgd(0.5, 1.0 / 512.0), OptimizerSpec::elastic(0.5)] {
            assert_eq!(OptimizerSpec::decode(&s.encode()).unwrap(), s);
        }
        let bytes = OptimizerSpec::sgd(0.1, 1.0).encode();
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[1..9], &0.1f64.to_le_bytes());
        assert!(OptimizerSpec::decode(&bytes[..24]).is_err());
        let mut bad = bytes;
        bad[0] = 9;
        assert!(OptimizerSpec::decode(&bad).is_err());
        assert!(OptimizerSpec::sgd(-1.0, 1.0).validate().is_err());
        assert!(OptimizerSpec::elastic(1.5).validate().is_err());
        assert!(OptimizerSpec::decode(&OptimizerSpec::sgd(0.0, 1.0).encode()).is_err());
    }

    #[test]
    fn apply_matches_free_functions() {
        let mut v = vec![1.0, 2.0];
        OptimizerSpec::sgd(0.1, 0.5).apply(&mut v, &[2.0, 4.0]).unwrap();
        assert_eq!(v, sgd_update(&[1.0, 2.0], &[2.0, 4.0], 0.1, 0.5).unwrap());
        let mut c = vec![0.0];
        OptimizerSpec::elastic(0.25).apply(&mut c, &[4.0]).unwrap();
        assert_eq!(c, vec![1.0]);
        let mut a = vec![0.0];
        OptimizerSpec::assign().apply(&mut a, &[7.0]).unwrap();
        assert_eq!(a, vec![7.0]);
    }

    proptest! {
        #[test]
        fn sgd_is_linear_in_gradient(
            w in prop::collection::vec(-10.0f64..10.0, 1..16),
            seed in any::<u64>(),
            lr in 0.001f64..1.0,
        ) {
            let g1: Vec<f64> = w.iter().enumerate().map(|(i, _)| ((seed >> (i % 32)) & 7) as f64 - 3.5).collect();
            let g2: Vec<f64> = g1.iter().map(|g| g * 0.5 + 1.0).collect();
            let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            let once = sgd_update(&w, &sum, lr, 1.0).unwrap();
            let twice = sgd_update(&sgd_update(&w, &g1, lr, 1.0).unwrap(), &g2, lr, 1.0).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn elastic_pair_conserves_sum_and_contracts(
            w in -100.0f64..100.0,
            c in -100.0f64..100.0,
            alpha in 0.0f64..=1.0,
        ) {
            let c2 = elastic_center_update(&[c], &[w], alpha).unwrap()[0];
            let w2 = elastic_local_update(&[w], &[c], alpha).unwrap()[0];
            let ulp = f64::EPSILON * (w.abs() + c.abs()).max(f64::MIN_POSITIVE);
            prop_assert!(((w2 + c2) - (w + c)).abs() <= 2.0 * ulp);
            let want = (1.0 - 2.0 * alpha).abs() * (w - c).abs();
            prop_assert!(((w2 - c2).abs() - want).abs() <= 1e-12 * (1.0 + (w - c).abs()));
        }
    }
}
