//! Frozen toy encoders standing in for a pretrained dual-tower model.
//!
//! Both towers share one seeded projection `A: R^e -> R^d`, the way a
//! contrastively pretrained model maps both modalities into one space:
//!
//! * image: patch `v` of a raw sample `x` is `normalize((A + rho * G_v) x + omega * u)`,
//!   where `G_v` is a seeded per-patch perturbation and `u` a seeded unit
//!   direction (the domain offset, common to every patch and every sample);
//! * text: the token sequence `[P_1 .. P_{h/2}, CLASS, P_{h/2+1} .. P_h]` is
//!   mean-pooled, projected by `A` and L2-normalized.
//!
//! The text tower exposes the analytic Jacobian of its output with respect to
//! the flattened prompt vectors so prompt gradients can be chained exactly.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, gaussian_matrix, normalized, unit_vector};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output feature dimension `d`.
    pub feature_dim: usize,
    /// Number of image patches `V`.
    pub patch_count: usize,
    /// Prompt / word-embedding dimension `e`. Raw samples live in this space too.
    pub embed_dim: usize,
    pub seed: u64,
    /// Scale of the per-patch perturbation of the shared projection.
    pub patch_spread: f64,
    /// Magnitude of the image-side domain offset.
    pub domain_offset: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            patch_count: 16,
            embed_dim: 32,
            seed: 0,
            patch_spread: 0.5,
            domain_offset: 20.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("feature_dim", self.feature_dim),
            ("patch_count", self.patch_count),
            ("embed_dim", self.embed_dim),
        ] {
            if value == 0 {
                return Err(Error::range(name, "must be at least 1"));
            }
        }
        if !(self.patch_spread.is_finite() && self.patch_spread >= 0.0) {
            return Err(Error::range("patch_spread", "must be finite and >= 0"));
        }
        if !(self.domain_offset.is_finite() && self.domain_offset >= 0.0) {
            return Err(Error::range("domain_offset", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// `V x d`, every row unit norm.
    pub patch_features: Array2<f64>,
    /// Normalized mean of the patch rows.
    pub pooled_feature: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub feature: Array1<f64>,
    /// `d x (h * e)`: derivative of `feature` w.r.t. the row-major flattened prompt.
    pub jacobian: Array2<f64>,
    prompt_len: usize,
}

impl TextEncoding {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Vector-Jacobian product: maps `dL/dfeature` to `dL/dprompt` (`h x e`).
    pub fn pullback(&self, grad_feature: ArrayView1<f64>) -> Array2<f64> {
        let flat = self.jacobian.t().dot(&grad_feature);
        let e = flat.len() / self.prompt_len;
        flat.into_shape_with_order((self.prompt_len, e))
            .expect("jacobian width is h * e")
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    /// `(V * d) x e`: the V patch maps stacked row-wise.
    patch_maps: Array2<f64>,
    offset: Array1<f64>,
    patch_count: usize,
    feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    projection: Array2<f64>,
}

/// Builds both frozen towers from one seed.
pub fn build_encoders(config: &EncoderConfig) -> Result<(ImageEncoder, TextEncoder)> {
    config.validate()?;
    let (d, v, e) = (config.feature_dim, config.patch_count, config.embed_dim);
    let mut rng = rng_from_seed(config.seed);
    let std = 1.0 / (e as f64).sqrt();
    let projection = gaussian_matrix(&mut rng, d, e, std);
    let mut patch_maps = Array2::zeros((v * d, e));
    for p in 0..v {
        let perturbation = gaussian_matrix(&mut rng, d, e, std);
        let block = &projection + &(perturbation * config.patch_spread);
        patch_maps
            .slice_mut(s![p * d..(p + 1) * d, ..])
            .assign(&block);
    }
    let offset = unit_vector(&mut rng, d) * config.domain_offset;
    Ok((
        ImageEncoder {
            patch_maps,
            offset,
            patch_count: v,
            feature_dim: d,
        },
        TextEncoder { projection },
    ))
}

impl ImageEncoder {
    pub fn input_dim(&self) -> usize {
        self.patch_maps.ncols()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn encode(&self, raw: ArrayView1<f64>) -> Result<ImageEncoding> {
        if raw.len() != self.input_dim() {
            return Err(Error::dim("raw sample", self.input_dim(), raw.len()));
        }
        ensure_finite(raw.iter(), "raw sample")?;
        if raw.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroNorm("raw sample".into()));
        }
        let (v, d) = (self.patch_count, self.feature_dim);
        let flat = self.patch_maps.dot(&raw);
        let mut patches = flat
            .into_shape_with_order((v, d))
            .expect("patch map height is V * d");
        for mut row in patches.axis_iter_mut(Axis(0)) {
            row += &self.offset;
            let (unit, _) = normalized(row.view(), "image patch")?;
            row.assign(&unit);
        }
        let mean = patches.mean_axis(Axis(0)).expect("V >= 1");
        let (pooled, _) = normalized(mean.view(), "pooled image feature")?;
        Ok(ImageEncoding {
            patch_features: patches,
            pooled_feature: pooled,
        })
    }
}

impl TextEncoder {
    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Token sequence with the class embedding inserted at index `h / 2`.
    pub fn token_sequence(
        &self,
        prompt: ArrayView2<f64>,
        class_embedding: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let (h, e) = prompt.dim();
        if h == 0 || h % 2 != 0 {
            return Err(Error::Config(format!(
                "prompt length must be even and positive, got {h}"
            )));
        }
        if e != self.embed_dim() {
            return Err(Error::dim("prompt embedding", self.embed_dim(), e));
        }
        if class_embedding.len() != e {
            return Err(Error::dim("class embedding", e, class_embedding.len()));
        }
        ensure_finite(prompt.iter(), "prompt vectors")?;
        ensure_finite(class_embedding.iter(), "class embedding")?;
        let mut tokens = Array2::zeros((h + 1, e));
        let mid = h / 2;
        tokens
            .slice_mut(s![..mid, ..])
            .assign(&prompt.slice(s![..mid, ..]));
        tokens.row_mut(mid).assign(&class_embedding);
        tokens
            .slice_mut(s![mid + 1.., ..])
            .assign(&prompt.slice(s![mid.., ..]));
        Ok(tokens)
    }

    fn project(
        &self,
        prompt: ArrayView2<f64>,
        class_embedding: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, f64)> {
        let tokens = self.token_sequence(prompt, class_embedding)?;
        let pooled = tokens.mean_axis(Axis(0)).expect("at least one token");
        let y = self.projection.dot(&pooled);
        normalized(y.view(), "text feature")
    }

    /// Feature only; skips the Jacobian.
    pub fn encode_feature(
        &self,
        prompt: ArrayView2<f64>,
        class_embedding: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        Ok(self.project(prompt, class_embedding)?.0)
    }

    pub fn encode(
        &self,
        prompt: ArrayView2<f64>,
        class_embedding: ArrayView1<f64>,
    ) -> Result<TextEncoding> {
        let (feature, norm) = self.project(prompt, class_embedding)?;
        let (h, e) = prompt.dim();
        let d = self.feature_dim();
        // d t / d P_m = (I - t t^T) A / (|y| (h + 1)), identical for every prompt slot
        let mut tangent = Array2::<f64>::eye(d);
        for i in 0..d {
            for j in 0..d {
                tangent[[i, j]] -= feature[i] * feature[j];
            }
        }
        let block = tangent.dot(&self.projection) / (norm * (h + 1) as f64);
        let mut jacobian = Array2::zeros((d, h * e));
        for m in 0..h {
            jacobian
                .slice_mut(s![.., m * e..(m + 1) * e])
                .assign(&block);
        }
        Ok(TextEncoding {
            feature,
            jacobian,
            prompt_len: h,
        })
    }
}
