//! Per-player objectives.
//!
//! Every score entering a logarithm must lie in `[SCORE_EPS, 1 - SCORE_EPS]`.
//! Generators use the non-saturating form `-ln s_fake`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::SCORE_EPS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLoss {
    /// Loss minimised by the max player(s), i.e. the negated objective.
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Partial derivatives of an [`AdversarialLoss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialGrad {
    /// `∂loss_d/∂real`.
    pub d_real: f64,
    /// `∂loss_d/∂fake`.
    pub d_fake: f64,
    /// `∂loss_g/∂fake`.
    pub g_fake: f64,
}

/// Per-iteration record of all objectives and score diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub d_and_crf_loss: f64,
    pub g_loss: f64,
    pub recon_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub crf_real: f64,
    pub crf_fake: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.d_and_crf_loss,
            self.g_loss,
            self.recon_loss,
            self.d_real,
            self.d_fake,
            self.crf_real,
            self.crf_fake,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_score(name: &str, s: f64) -> Result<()> {
    if !(SCORE_EPS..=1.0 - SCORE_EPS).contains(&s) {
        return Err(Error::Numeric(format!(
            "{name} = {s} outside [{SCORE_EPS}, {}]",
            1.0 - SCORE_EPS
        )));
    }
    Ok(())
}

fn average(a: f64, b: f64) -> f64 {
    ((a + b) / 2.0).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn gan_loss(d_real: f64, d_fake: f64) -> Result<AdversarialLoss> {
    check_score("d_real", d_real)?;
    check_score("d_fake", d_fake)?;
    Ok(AdversarialLoss {
        loss_d: -(d_real.ln() + (1.0 - d_fake).ln()),
        loss_g: -d_fake.ln(),
    })
}

pub fn gan_loss_grad(d_real: f64, d_fake: f64) -> Result<AdversarialGrad> {
    check_score("d_real", d_real)?;
    check_score("d_fake", d_fake)?;
    Ok(AdversarialGrad {
        d_real: -1.0 / d_real,
        d_fake: 1.0 / (1.0 - d_fake),
        g_fake: -1.0 / d_fake,
    })
}

/// Adversarial loss on the averaged scores `(d + crf) / 2`.
pub fn crfgan_loss(d_real: f64, d_fake: f64, crf_real: f64, crf_fake: f64) -> Result<AdversarialLoss> {
    check_score("crf_real", crf_real)?;
    check_score("crf_fake", crf_fake)?;
    check_score("d_real", d_real)?;
    check_score("d_fake", d_fake)?;
    gan_loss(average(d_real, crf_real), average(d_fake, crf_fake))
}

/// Gradients of [`crfgan_loss`]; each averaged score splits its derivative
/// equally between the discriminator and CRF terms.
pub fn crfgan_loss_grad(d_real: f64, d_fake: f64, crf_real: f64, crf_fake: f64) -> Result<AdversarialGrad> {
    check_score("crf_real", crf_real)?;
    check_score("crf_fake", crf_fake)?;
    let g = gan_loss_grad(average(d_real, crf_real), average(d_fake, crf_fake))?;
    Ok(AdversarialGrad {
        d_real: g.d_real / 2.0,
        d_fake: g.d_fake / 2.0,
        g_fake: g.g_fake / 2.0,
    })
}

fn check_pair(x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Geometry(format!(
            "reconstruction shapes differ: {} vs {}",
            x.shape(),
            x_hat.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn reconstruct_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check_pair(x, x_hat)?;
    let sum: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / x.numel() as f64)
}

/// `∂ reconstruct_loss / ∂ x_hat`, using `sign(0) = 0`.
pub fn reconstruct_loss_grad(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    check_pair(x, x_hat)?;
    let n = x.numel() as f64;
    let g = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| {
            let d = b - a;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn gan_closed_forms() {
        let l = gan_loss(0.5, 0.5).unwrap();
        assert!((l.loss_d - 2.0 * LN2).abs() < 1e-15);
        let perfect = gan_loss(1.0 - SCORE_EPS, SCORE_EPS).unwrap();
        assert!(perfect.loss_d.abs() < 1e-5);
        assert!(gan_loss_grad(0.3, 0.4).unwrap().g_fake < 0.0);
        assert!(matches!(gan_loss(1.0, 0.5), Err(Error::Numeric(_))));
        assert!(matches!(gan_loss(0.5, f64::NAN), Err(Error::Numeric(_))));
    }

    #[test]
    fn crfgan_closed_forms() {
        let l = crfgan_loss(0.5, 0.5, 0.5, 0.5).unwrap();
        assert!((l.loss_d - 2.0 * LN2).abs() < 1e-15);
        let g = crfgan_loss_grad(0.4, 0.3, 0.6, 0.3).unwrap();
        assert!(g.g_fake < 0.0);
    }

    #[test]
    fn reconstruction_closed_forms() {
        let s = Shape::new(1, 2, 3, 4);
        let lo = Tensor::from_vec(s, vec![-1.0; 24]).unwrap();
        let hi = Tensor::from_vec(s, vec![1.0; 24]).unwrap();
        assert_eq!(reconstruct_loss(&lo, &lo).unwrap(), 0.0);
        assert_eq!(reconstruct_loss(&lo, &hi).unwrap(), 2.0);
        assert!(reconstruct_loss(&lo, &Tensor::zeros(Shape::new(1, 2, 3, 3))).is_err());
    }

    fn tensor(v: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap()
    }

    proptest! {
        #[test]
        fn reduction_is_bit_exact(r in SCORE_EPS..=1.0 - SCORE_EPS, f in SCORE_EPS..=1.0 - SCORE_EPS) {
            let a = gan_loss(r, f).unwrap();
            let b = crfgan_loss(r, f, r, f).unwrap();
            prop_assert_eq!(a.loss_d.to_bits(), b.loss_d.to_bits());
            prop_assert_eq!(a.loss_g.to_bits(), b.loss_g.to_bits());
        }

        #[test]
        fn losses_finite_on_clamped_scores(s in proptest::array::uniform4(SCORE_EPS..=1.0 - SCORE_EPS)) {
            let l = crfgan_loss(s[0], s[1], s[2], s[3]).unwrap();
            prop_assert!(l.loss_d.is_finite() && l.loss_g.is_finite());
            let g = crfgan_loss_grad(s[0], s[1], s[2], s[3]).unwrap();
            prop_assert!(g.d_real.is_finite() && g.d_fake.is_finite() && g.g_fake.is_finite());
        }

        #[test]
        fn reconstruction_is_a_metric(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            b in proptest::collection::vec(-1.0f64..1.0, 16),
            c in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let (a, b, c) = (tensor(a), tensor(b), tensor(c));
            let ab = reconstruct_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, reconstruct_loss(&b, &a).unwrap());
            prop_assert_eq!(ab == 0.0, a == b);
            let ac = reconstruct_loss(&a, &c).unwrap();
            let cb = reconstruct_loss(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
