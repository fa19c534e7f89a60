use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::model::{EncoderModel, Gradients};
use crate::error::{Error, Result};
use crate::patching::Triplet;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletLossConfig {
    /// Sharpness of the soft margin.
    pub alpha: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self { alpha: 5.0 }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Weighted soft-margin triplet loss
/// `ln(1 + exp(α(‖e0 − e+‖ − ‖e0 − e−‖)))`.
pub fn triplet_loss<T: Real>(e0: &DVector<T>, e_plus: &DVector<T>, e_minus: &DVector<T>, alpha: T) -> T {
    let dp = (e0 - e_plus).norm();
    let dn = (e0 - e_minus).norm();
    softplus(alpha * (dp - dn))
}

/// Loss and its gradients w.r.t. the three embeddings. Where a distance is
/// zero the norm's subgradient 0 is used.
pub fn triplet_loss_embedding_grads<T: Real>(
    e0: &DVector<T>,
    e_plus: &DVector<T>,
    e_minus: &DVector<T>,
    alpha: T,
) -> (T, DVector<T>, DVector<T>, DVector<T>) {
    let rp = e0 - e_plus;
    let rn = e0 - e_minus;
    let dp = rp.norm();
    let dn = rn.norm();
    let m = alpha * (dp - dn);
    let loss = softplus(m);
    let s = sigmoid(m) * alpha;
    let up = if dp > T::zero() { rp / dp } else { rp * T::zero() };
    let un = if dn > T::zero() { rn / dn } else { rn * T::zero() };
    let g0 = (&up - &un) * s;
    let gp = -&up * s;
    let gn = &un * s;
    (loss, g0, gp, gn)
}

/// Gradients of one triplet's loss for both encoders.
#[derive(Debug, Clone)]
pub struct TripletGradients<T: Real> {
    pub loss: T,
    pub us: Gradients<T>,
    pub sdf: Gradients<T>,
}

/// Backpropagates the triplet loss: the anchor through the US encoder, the
/// positive and negative through the SDF encoder.
pub fn loss_gradients<T: Real>(
    us_model: &EncoderModel<T>,
    sdf_model: &EncoderModel<T>,
    triplet: &Triplet<T>,
    cfg: &TripletLossConfig,
) -> Result<TripletGradients<T>> {
    cfg.validate()?;
    let alpha = T::lit(cfg.alpha);
    let ca = us_model.forward(&triplet.anchor)?;
    let cp = sdf_model.forward(&triplet.positive)?;
    let cn = sdf_model.forward(&triplet.negative)?;
    for e in [&ca.embedding, &cp.embedding, &cn.embedding] {
        if e.iter().any(|v| !v.finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
    }
    let (loss, g0, gp, gn) =
        triplet_loss_embedding_grads(&ca.embedding, &cp.embedding, &cn.embedding, alpha);
    if !loss.finite() {
        return Err(Error::Numerical("non-finite triplet loss".into()));
    }
    let mut us = us_model.zero_gradients();
    let mut sdf = sdf_model.zero_gradients();
    us_model.backward(&ca, &g0, &mut us);
    sdf_model.backward(&cp, &gp, &mut sdf);
    sdf_model.backward(&cn, &gn, &mut sdf);
    if us.iter().chain(sdf.iter()).flatten().any(|g| !g.finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok(TripletGradients { loss, us, sdf })
}

/// Loss of one triplet by forward passes only.
pub fn evaluate_triplet<T: Real>(
    us_model: &EncoderModel<T>,
    sdf_model: &EncoderModel<T>,
    triplet: &Triplet<T>,
    cfg: &TripletLossConfig,
) -> Result<T> {
    let e0 = us_model.embed(&triplet.anchor)?;
    let ep = sdf_model.embed(&triplet.positive)?;
    let en = sdf_model.embed(&triplet.negative)?;
    Ok(triplet_loss(&e0, &ep, &en, T::lit(cfg.alpha)))
}
