use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{Patch, PatchDims};
use crate::scalar::Real;

pub const KERNEL: usize = 3;
const KERNEL_VOL: usize = KERNEL * KERNEL * KERNEL;

/// Architecture: three stride-2 3×3×3 convolutions (zero padding 1, ReLU),
/// global average pooling, then a linear head to the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_dims: PatchDims,
    pub channels: [usize; 3],
    pub embedding_dim: usize,
    #[serde(default)]
    pub head_bias: bool,
}

impl EncoderConfig {
    pub fn new(patch_dims: PatchDims) -> Self {
        Self {
            patch_dims,
            channels: [8, 16, 32],
            embedding_dim: 32,
            head_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_dims.contains(&0) {
            return Err(Error::invalid("patch dims must be positive"));
        }
        if self.channels.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::invalid("channel counts and embedding dim must be positive"));
        }
        Ok(())
    }

    /// Spatial dims after each convolution.
    pub fn layer_dims(&self) -> [[usize; 3]; 4] {
        let mut dims = [self.patch_dims; 4];
        for l in 1..4 {
            dims[l] = dims[l - 1].map(conv_out);
        }
        dims
    }

    /// `(name, shape)` per parameter tensor in storage order.
    pub fn layer_specs(&self) -> Vec<(String, Vec<usize>)> {
        let ins = [1, self.channels[0], self.channels[1]];
        let mut specs = Vec::new();
        for l in 0..3 {
            specs.push((
                format!("conv{}.weight", l + 1),
                vec![self.channels[l], ins[l], KERNEL, KERNEL, KERNEL],
            ));
            specs.push((format!("conv{}.bias", l + 1), vec![self.channels[l]]));
        }
        specs.push(("head.weight".into(), vec![self.embedding_dim, self.channels[2]]));
        if self.head_bias {
            specs.push(("head.bias".into(), vec![self.embedding_dim]));
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[inline]
pub fn conv_out(n: usize) -> usize {
    // (n + 2·pad − kernel) / stride + 1 with pad 1, kernel 3, stride 2
    (n - 1) / 2 + 1
}

/// One CNN encoder. Parameters are flat arrays in `layer_specs` order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Real> {
    config: EncoderConfig,
    params: Vec<Vec<T>>,
}

/// Per-parameter-tensor gradients, same layout as the model parameters.
pub type Gradients<T> = Vec<Vec<T>>;

impl<T: Real> EncoderModel<T> {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .layer_specs()
            .iter()
            .map(|(_, s)| vec![T::zero(); s.iter().product()])
            .collect();
        Ok(Self { config, params })
    }

    /// Weights uniform in `±√(6/(fan_in+fan_out))`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for (p, (name, shape)) in model.params.iter_mut().zip(config.layer_specs()) {
            if name.ends_with(".bias") {
                continue;
            }
            let (fan_in, fan_out) = if shape.len() == 5 {
                (shape[1] * KERNEL_VOL, shape[0] * KERNEL_VOL)
            } else {
                (shape[1], shape[0])
            };
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.iter_mut() {
                *w = T::lit(rng.random_range(-s..=s));
            }
        }
        Ok(model)
    }

    pub fn from_params(config: EncoderConfig, params: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if params.len() != specs.len()
            || params
                .iter()
                .zip(&specs)
                .any(|(p, (_, s))| p.len() != s.iter().product::<usize>())
        {
            return Err(Error::invalid("parameter arrays do not match the layer specs"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn check_patch(&self, patch: &Patch<T>) -> Result<()> {
        if patch.dims != self.config.patch_dims {
            return Err(Error::invalid(format!(
                "patch dims {:?} do not match encoder input {:?}",
                patch.dims, self.config.patch_dims
            )));
        }
        if patch.values.len() != patch.dims.iter().product::<usize>() {
            return Err(Error::invalid("patch value count does not match its dims"));
        }
        Ok(())
    }

    pub fn embed(&self, patch: &Patch<T>) -> Result<DVector<T>> {
        self.check_patch(patch)?;
        Ok(self.forward_values(&patch.values, None).embedding)
    }

    /// Forward pass keeping the intermediates needed by `backward`.
    pub fn forward(&self, patch: &Patch<T>) -> Result<ForwardCache<T>> {
        self.check_patch(patch)?;
        Ok(self.forward_values(&patch.values, None))
    }

    /// Forward pass with every ReLU gate fixed to `masks` (one per hidden
    /// layer) instead of the sign of its input. The result is smooth in the
    /// weights and agrees with `forward` wherever the gates match.
    pub fn forward_gated(&self, patch: &Patch<T>, masks: &[Vec<bool>]) -> Result<ForwardCache<T>> {
        self.check_patch(patch)?;
        let dims = self.config.layer_dims();
        for (l, m) in masks.iter().enumerate() {
            let want = self.config.channels.get(l).map(|c| c * dims[l + 1].iter().product::<usize>());
            if masks.len() != 3 || Some(m.len()) != want {
                return Err(Error::invalid("gate masks do not match the layer sizes"));
            }
        }
        Ok(self.forward_values(&patch.values, Some(masks)))
    }

    fn forward_values(&self, input: &[T], masks: Option<&[Vec<bool>]>) -> ForwardCache<T> {
        let dims = self.config.layer_dims();
        let ins = [1, self.config.channels[0], self.config.channels[1]];
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(4);
        acts.push(input.to_vec());
        for l in 0..3 {
            let mut z = conv_forward(
                &acts[l],
                ins[l],
                dims[l],
                &self.params[2 * l],
                &self.params[2 * l + 1],
                self.config.channels[l],
                dims[l + 1],
            );
            match masks {
                None => {
                    for v in z.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                Some(m) => {
                    for (v, &on) in z.iter_mut().zip(&m[l]) {
                        if !on {
                            *v = T::zero();
                        }
                    }
                }
            }
            acts.push(z);
        }
        let c3 = self.config.channels[2];
        let spatial = dims[3].iter().product::<usize>();
        let inv = T::one() / T::from_usize_lossy(spatial);
        let pooled: Vec<T> = (0..c3)
            .map(|c| {
                acts[3][c * spatial..(c + 1) * spatial]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v)
                    * inv
            })
            .collect();
        let d = self.config.embedding_dim;
        let head = &self.params[6];
        let embedding = DVector::from_fn(d, |r, _| {
            let mut acc = if self.config.head_bias {
                self.params[7][r]
            } else {
                T::zero()
            };
            for c in 0..c3 {
                acc += head[r * c3 + c] * pooled[c];
            }
            acc
        });
        ForwardCache {
            acts,
            pooled,
            embedding,
        }
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂embedding`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_embedding: &DVector<T>, grads: &mut Gradients<T>) {
        let dims = self.config.layer_dims();
        let ch = self.config.channels;
        let ins = [1, ch[0], ch[1]];
        let c3 = ch[2];
        let d = self.config.embedding_dim;
        let head = &self.params[6];

        let mut d_pooled = vec![T::zero(); c3];
        for r in 0..d {
            let g = d_embedding[r];
            if g == T::zero() {
                continue;
            }
            for c in 0..c3 {
                grads[6][r * c3 + c] += g * cache.pooled[c];
                d_pooled[c] += g * head[r * c3 + c];
            }
            if self.config.head_bias {
                grads[7][r] += g;
            }
        }

        let spatial = dims[3].iter().product::<usize>();
        let inv = T::one() / T::from_usize_lossy(spatial);
        // Gradient w.r.t. the pre-activation of layer 3 (ReLU mask applied).
        let mut d_out: Vec<T> = (0..c3 * spatial)
            .map(|i| {
                if cache.acts[3][i] > T::zero() {
                    d_pooled[i / spatial] * inv
                } else {
                    T::zero()
                }
            })
            .collect();
        for l in (0..3).rev() {
            let need_input = l > 0;
            let (gw, rest) = grads.split_at_mut(2 * l + 1);
            let d_in = conv_backward(
                &cache.acts[l],
                ins[l],
                dims[l],
                &self.params[2 * l],
                &d_out,
                ch[l],
                dims[l + 1],
                &mut gw[2 * l],
                &mut rest[0],
                need_input,
            );
            if need_input {
                let act = &cache.acts[l];
                d_out = d_in
                    .into_iter()
                    .zip(act.iter())
                    .map(|(g, &a)| if a > T::zero() { g } else { T::zero() })
                    .collect();
            }
        }
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    /// Input followed by the three post-ReLU feature maps.
    pub acts: Vec<Vec<T>>,
    pub pooled: Vec<T>,
    pub embedding: DVector<T>,
}

/// Output positions `o` along one axis with `2o − 1 + k` inside `[0, n)`.
#[inline]
fn valid_range(k: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    // 2o − 1 + k ≤ n − 1  ⇔  o ≤ (n − k) / 2
    let hi = if n >= k { ((n - k) / 2 + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

#[inline]
fn in_index(o: usize, k: usize) -> usize {
    2 * o + k - 1
}

fn conv_forward<T: Real>(
    input: &[T],
    in_ch: usize,
    in_dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    out_dims: [usize; 3],
) -> Vec<T> {
    let [nx, ny, nz] = in_dims;
    let [ox, oy, oz] = out_dims;
    let in_sp = nx * ny * nz;
    let out_sp = ox * oy * oz;
    let mut out = vec![T::zero(); out_ch * out_sp];
    for oc in 0..out_ch {
        let o_base = oc * out_sp;
        for v in &mut out[o_base..o_base + out_sp] {
            *v = bias[oc];
        }
        for ic in 0..in_ch {
            let i_base = ic * in_sp;
            let w_base = (oc * in_ch + ic) * KERNEL_VOL;
            for kz in 0..KERNEL {
                let (z0, z1) = valid_range(kz, nz, oz);
                for ky in 0..KERNEL {
                    let (y0, y1) = valid_range(ky, ny, oy);
                    for kx in 0..KERNEL {
                        let (x0, x1) = valid_range(kx, nx, ox);
                        let w = weight[w_base + kx + KERNEL * (ky + KERNEL * kz)];
                        if w == T::zero() {
                            continue;
                        }
                        for z in z0..z1 {
                            let iz = in_index(z, kz);
                            for y in y0..y1 {
                                let iy = in_index(y, ky);
                                let orow = o_base + ox * (y + oy * z);
                                let irow = i_base + nx * (iy + ny * iz);
                                for x in x0..x1 {
                                    out[orow + x] += w * input[irow + in_index(x, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    input: &[T],
    in_ch: usize,
    in_dims: [usize; 3],
    weight: &[T],
    d_out: &[T],
    out_ch: usize,
    out_dims: [usize; 3],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_input: bool,
) -> Vec<T> {
    let [nx, ny, nz] = in_dims;
    let [ox, oy, oz] = out_dims;
    let in_sp = nx * ny * nz;
    let out_sp = ox * oy * oz;
    let mut d_in = if need_input {
        vec![T::zero(); in_ch * in_sp]
    } else {
        Vec::new()
    };
    for oc in 0..out_ch {
        let o_base = oc * out_sp;
        let g = &d_out[o_base..o_base + out_sp];
        if g.iter().all(|&v| v == T::zero()) {
            continue;
        }
        d_bias[oc] += g.iter().fold(T::zero(), |a, &v| a + v);
        for ic in 0..in_ch {
            let i_base = ic * in_sp;
            let w_base = (oc * in_ch + ic) * KERNEL_VOL;
            for kz in 0..KERNEL {
                let (z0, z1) = valid_range(kz, nz, oz);
                for ky in 0..KERNEL {
                    let (y0, y1) = valid_range(ky, ny, oy);
                    for kx in 0..KERNEL {
                        let (x0, x1) = valid_range(kx, nx, ox);
                        let widx = w_base + kx + KERNEL * (ky + KERNEL * kz);
                        let w = weight[widx];
                        let mut acc = T::zero();
                        for z in z0..z1 {
                            let iz = in_index(z, kz);
                            for y in y0..y1 {
                                let iy = in_index(y, ky);
                                let orow = ox * (y + oy * z);
                                let irow = i_base + nx * (iy + ny * iz);
                                for x in x0..x1 {
                                    let go = g[orow + x];
                                    let ii = irow + in_index(x, kx);
                                    acc += go * input[ii];
                                    if need_input {
                                        d_in[ii] += w * go;
                                    }
                                }
                            }
                        }
                        d_weight[widx] += acc;
                    }
                }
            }
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::Modality;
    use crate::scalar::Vec3;
    use crate::seeding::rng_from_seed;

    /// Direct evaluation of the convolution sum with explicit bounds checks.
    fn conv_reference(
        input: &[f64],
        in_ch: usize,
        in_dims: [usize; 3],
        weight: &[f64],
        bias: &[f64],
        out_ch: usize,
    ) -> Vec<f64> {
        let od = in_dims.map(conv_out);
        let mut out = Vec::new();
        for oc in 0..out_ch {
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for x in 0..od[0] {
                        let mut acc = bias[oc];
                        for ic in 0..in_ch {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let ix = 2 * x as isize - 1 + kx as isize;
                                        let iy = 2 * y as isize - 1 + ky as isize;
                                        let iz = 2 * z as isize - 1 + kz as isize;
                                        if ix < 0 || iy < 0 || iz < 0 {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        if ix >= in_dims[0] || iy >= in_dims[1] || iz >= in_dims[2] {
                                            continue;
                                        }
                                        let w = weight[((oc * in_ch + ic) * 3 + kz) * 9 + ky * 3 + kx];
                                        let sp = in_dims[0] * in_dims[1] * in_dims[2];
                                        acc += w * input[ic * sp + ix + in_dims[0] * (iy + in_dims[1] * iz)];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_for_odd_and_even_sizes() {
        let mut rng = rng_from_seed(17);
        for dims in [[5, 4, 3], [8, 8, 2], [1, 3, 7], [2, 2, 1]] {
            let (ic, oc) = (2, 3);
            let n: usize = dims.iter().product();
            let input: Vec<f64> = (0..ic * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..oc * ic * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv_forward(&input, ic, dims, &w, &b, oc, dims.map(conv_out));
            let want = conv_reference(&input, ic, dims, &w, &b, oc);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{dims:?}");
            }
        }
    }

    fn patch(dims: PatchDims, values: Vec<f64>) -> Patch<f64> {
        Patch {
            modality: Modality::Us,
            center: Vec3::zeros(),
            dims,
            spacing: Vec3::new(1.0, 1.0, 1.0),
            values,
        }
    }

    #[test]
    fn layer_dims_for_reference_patch_shapes() {
        let c = EncoderConfig::new([32, 32, 32]);
        assert_eq!(c.layer_dims()[3], [4, 4, 4]);
        let c = EncoderConfig::new([64, 64, 8]);
        assert_eq!(c.layer_dims()[1], [32, 32, 4]);
        assert_eq!(c.layer_dims()[3], [8, 8, 1]);
        assert_eq!(
            c.parameter_count(),
            8 * 27 + 8 + 16 * 8 * 27 + 16 + 32 * 16 * 27 + 32 + 32 * 32
        );
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let m = EncoderModel::<f64>::zeros(EncoderConfig::new([8, 8, 4])).unwrap();
        let p = patch([8, 8, 4], (0..256).map(|i| i as f64).collect());
        let e = m.embed(&p).unwrap();
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_patches_identical_embeddings_and_dims_checked() {
        let m = EncoderModel::<f64>::init(EncoderConfig::new([8, 8, 4]), &mut rng_from_seed(1)).unwrap();
        let p = patch([8, 8, 4], (0..256).map(|i| (i as f64 * 0.37).sin()).collect());
        assert_eq!(m.embed(&p).unwrap(), m.embed(&p.clone()).unwrap());
        let wrong = patch([4, 8, 8], p.values.clone());
        assert!(m.embed(&wrong).is_err());
    }

    #[test]
    fn positive_homogeneity() {
        // Zero biases and non-negative weights keep every path positive.
        let cfg = EncoderConfig::new([8, 8, 4]);
        let mut rng = rng_from_seed(4);
        let mut m = EncoderModel::<f64>::init(cfg, &mut rng).unwrap();
        for p in m.params_mut() {
            for w in p.iter_mut() {
                *w = w.abs();
            }
        }
        let base = patch([8, 8, 4], (0..256).map(|_| rng.random_range(0.0..1.0)).collect());
        let e = m.embed(&base).unwrap();
        for c in [0.5, 2.0, 7.25] {
            let scaled = patch(base.dims, base.values.iter().map(|v| v * c).collect());
            let ec = m.embed(&scaled).unwrap();
            assert!((ec - &e * c).norm() <= 1e-12 * e.norm().max(1.0) * c);
        }
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let cfg = EncoderConfig::new([8, 8, 8]);
        let a = EncoderModel::<f64>::init(cfg, &mut rng_from_seed(3)).unwrap();
        let b = EncoderModel::<f64>::init(cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / (27.0 + 8.0 * 27.0)).sqrt();
        assert!(a.params()[0].iter().all(|w| w.abs() <= bound));
        assert!(a.params()[1].iter().all(|&b| b == 0.0));
    }
}
