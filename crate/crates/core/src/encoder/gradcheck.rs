use serde::Serialize;

use super::loss::{loss_gradients, triplet_loss, TripletLossConfig};
use super::model::{EncoderConfig, EncoderModel, ForwardCache};
use crate::error::Result;
use crate::patching::{Modality, Patch, PatchDims, Triplet};
use crate::scalar::Vec3;
use crate::seeding::stream;
use rand::Rng;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub patch_dims: PatchDims,
    pub parameters: usize,
    pub max_relative_error: f64,
    /// Weights whose ±h perturbation moved some ReLU across its kink.
    pub kink_crossings: usize,
}

/// Small model used for finite-difference validation.
pub fn gradcheck_config(patch_dims: PatchDims) -> EncoderConfig {
    EncoderConfig {
        patch_dims,
        channels: [2, 2, 2],
        embedding_dim: 4,
        head_bias: true,
    }
}

fn random_patch<R: Rng>(modality: Modality, dims: PatchDims, rng: &mut R) -> Patch<f64> {
    let n = dims.iter().product();
    Patch {
        modality,
        center: Vec3::zeros(),
        dims,
        spacing: Vec3::new(1.0, 1.0, 1.0),
        values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

type Gates = Vec<Vec<bool>>;

fn gates(cache: &ForwardCache<f64>) -> Gates {
    cache.acts[1..].iter().map(|a| a.iter().map(|&v| v > 0.0).collect()).collect()
}

/// Loss with the ReLU gates held at `fixed`, plus the gates the ungated
/// network would actually use at these weights.
fn gated_loss(
    us: &EncoderModel<f64>,
    sdf: &EncoderModel<f64>,
    t: &Triplet<f64>,
    fixed: &[Gates; 3],
) -> Result<(f64, bool)> {
    let mut e = Vec::with_capacity(3);
    let mut crossed = false;
    for (k, (m, p)) in [(us, &t.anchor), (sdf, &t.positive), (sdf, &t.negative)].into_iter().enumerate() {
        crossed |= gates(&m.forward(p)?) != fixed[k];
        e.push(m.forward_gated(p, &fixed[k])?.embedding);
    }
    Ok((triplet_loss(&e[0], &e[1], &e[2], 1.0), crossed))
}

/// Compares analytic gradients of the triplet loss with central
/// differences, `|a − f| / max(|a|, |f|, 1e-8)` maximised over every
/// weight of both encoders. Random inputs put some ReLU within ±h of its
/// kink for most first-layer weights, so the differences are taken with
/// the gates frozen at the unperturbed pattern; that function is smooth
/// and shares the true derivative at the base point.
pub fn gradcheck(patch_dims: PatchDims, seed: u64, h: f64) -> Result<GradcheckReport> {
    let cfg = gradcheck_config(patch_dims);
    let mut rng = stream(seed, "gradcheck");
    let mut us = EncoderModel::<f64>::init(cfg, &mut rng)?;
    let mut sdf = EncoderModel::<f64>::init(cfg, &mut rng)?;
    for m in [&mut us, &mut sdf] {
        for p in m.params_mut() {
            for w in p.iter_mut() {
                *w += rng.random_range(-0.1..0.1);
            }
        }
    }
    let triplet = Triplet {
        anchor: random_patch(Modality::Us, patch_dims, &mut rng),
        positive: random_patch(Modality::Sdf, patch_dims, &mut rng),
        negative: random_patch(Modality::Sdf, patch_dims, &mut rng),
        anchor_center: Vec3::zeros(),
        positive_center: Vec3::zeros(),
        negative_center: Vec3::zeros(),
    };
    let loss_cfg = TripletLossConfig { alpha: 1.0 };
    let analytic = loss_gradients(&us, &sdf, &triplet, &loss_cfg)?;
    let base = [
        gates(&us.forward(&triplet.anchor)?),
        gates(&sdf.forward(&triplet.positive)?),
        gates(&sdf.forward(&triplet.negative)?),
    ];
    let mut kinks = 0;

    let mut worst = 0.0f64;
    for which in 0..2 {
        let grads = if which == 0 { &analytic.us } else { &analytic.sdf };
        for t in 0..grads.len() {
            for i in 0..grads[t].len() {
                let eval = |delta: f64| -> Result<(f64, bool)> {
                    let (mut u, mut s) = (us.clone(), sdf.clone());
                    let target = if which == 0 { &mut u } else { &mut s };
                    target.params_mut()[t][i] += delta;
                    gated_loss(&u, &s, &triplet, &base)
                };
                let (up, c_up) = eval(h)?;
                let (dn, c_dn) = eval(-h)?;
                kinks += usize::from(c_up || c_dn);
                let fd = (up - dn) / (2.0 * h);
                let a = grads[t][i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Ok(GradcheckReport {
        patch_dims,
        parameters: 2 * cfg.parameter_count(),
        max_relative_error: worst,
        kink_crossings: kinks,
    })
}
