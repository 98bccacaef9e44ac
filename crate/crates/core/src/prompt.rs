//! Learnable prompt parameters and the cosine-softmax classifier head.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, gaussian_matrix, unit_vector};
use crate::rng::child_rng;

/// Standard deviation of the Gaussian prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Prompt vectors aggregated by the server. The only parameters that are
/// ever placed in a [`crate::federation::RoundMessage`].
#[derive(Debug, Clone, PartialEq)]
pub struct SharedPrompt(pub Array2<f64>);

/// Prompt vectors that never leave their client.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatePrompt(pub Array2<f64>);

impl SharedPrompt {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn value_count(&self) -> usize {
        self.0.len()
    }
}

impl PrivatePrompt {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Shared,
    Private,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub shared: SharedPrompt,
    pub private: PrivatePrompt,
    class_embeddings: Array2<f64>,
}

fn check_len(name: &str, h: usize) -> Result<()> {
    if h == 0 || !h.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "{name} must be even and positive (class token sits mid-sequence), got {h}"
        )));
    }
    Ok(())
}

/// Initializes shared and private prompts i.i.d. `N(0, 0.02^2)` and draws
/// `K` random unit class embeddings.
pub fn init_prompts(
    shared_len: usize,
    private_len: usize,
    embed_dim: usize,
    n_classes: usize,
    seed: u64,
) -> Result<PromptSet> {
    check_len("shared prompt length", shared_len)?;
    check_len("private prompt length", private_len)?;
    if embed_dim == 0 {
        return Err(Error::range("embed_dim", "must be at least 1"));
    }
    if n_classes < 2 {
        return Err(Error::range("n_classes", "need at least 2 classes"));
    }
    let mut rng = child_rng(seed, "prompts/shared");
    let shared = gaussian_matrix(&mut rng, shared_len, embed_dim, PROMPT_INIT_STD);
    let mut rng = child_rng(seed, "prompts/private");
    let private = gaussian_matrix(&mut rng, private_len, embed_dim, PROMPT_INIT_STD);
    let mut rng = child_rng(seed, "prompts/classes");
    let mut class_embeddings = Array2::zeros((n_classes, embed_dim));
    for mut row in class_embeddings.axis_iter_mut(Axis(0)) {
        row.assign(&unit_vector(&mut rng, embed_dim));
    }
    Ok(PromptSet {
        shared: SharedPrompt(shared),
        private: PrivatePrompt(private),
        class_embeddings,
    })
}

impl PromptSet {
    pub fn from_parts(
        shared: SharedPrompt,
        private: PrivatePrompt,
        class_embeddings: Array2<f64>,
    ) -> Result<Self> {
        check_len("shared prompt length", shared.0.nrows())?;
        check_len("private prompt length", private.0.nrows())?;
        let e = class_embeddings.ncols();
        if class_embeddings.nrows() < 2 {
            return Err(Error::range("n_classes", "need at least 2 classes"));
        }
        for (name, m) in [("shared prompt", &shared.0), ("private prompt", &private.0)] {
            if m.ncols() != e {
                return Err(Error::Shape {
                    tensor: name.into(),
                    expected: format!("embed dim {e}"),
                    found: format!("embed dim {}", m.ncols()),
                });
            }
        }
        ensure_finite(shared.0.iter(), "shared prompt")?;
        ensure_finite(private.0.iter(), "private prompt")?;
        ensure_finite(class_embeddings.iter(), "class embeddings")?;
        Ok(Self {
            shared,
            private,
            class_embeddings,
        })
    }

    /// Replaces the class-token embeddings with the ones a dataset provides.
    /// Consumes `self`; there is no way to mutate them afterwards.
    pub fn bind_class_embeddings(self, embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.dim() != self.class_embeddings.dim() {
            return Err(Error::Shape {
                tensor: "class embeddings".into(),
                expected: format!("{:?}", self.class_embeddings.dim()),
                found: format!("{:?}", embeddings.dim()),
            });
        }
        Self::from_parts(self.shared, self.private, embeddings)
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeddings.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.class_embeddings.ncols()
    }

    pub fn class_embeddings(&self) -> ArrayView2<'_, f64> {
        self.class_embeddings.view()
    }

    pub fn prompt(&self, role: PromptRole) -> ArrayView2<'_, f64> {
        match role {
            PromptRole::Shared => self.shared.view(),
            PromptRole::Private => self.private.view(),
        }
    }

    /// Prompt matrix and class embedding for class `k`; `encode_text` places
    /// the class token.
    pub fn assemble(
        &self,
        class: usize,
        role: PromptRole,
    ) -> Result<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        if class >= self.n_classes() {
            return Err(Error::Config(format!(
                "class index {class} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok((self.prompt(role), self.class_embeddings.row(class)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub temperature: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self { temperature: 0.01 }
    }
}

impl PredictionConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::range("temperature", "must be finite and > 0"));
        }
        Ok(Self { temperature })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Result<Array1<f64>> {
    ensure_finite(logits.iter(), "logits")?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let total = exp.sum();
    Ok(exp / total)
}

/// `p_k = softmax_k(cos(text_k, image) / tau)` over the `K` rows of `text_features`.
pub fn predict_softmax_cosine(
    text_features: ArrayView2<f64>,
    image_pooled: ArrayView1<f64>,
    cfg: &PredictionConfig,
) -> Result<Array1<f64>> {
    if text_features.ncols() != image_pooled.len() {
        return Err(Error::dim(
            "image feature",
            text_features.ncols(),
            image_pooled.len(),
        ));
    }
    ensure_finite(text_features.iter(), "text features")?;
    ensure_finite(image_pooled.iter(), "image feature")?;
    let logits = text_features.dot(&image_pooled) / cfg.temperature;
    softmax(logits.view())
}

// Checkpoint layout, all little-endian:
//   magic  b"FPRM" | version u32 | role u32 | rows u32 | cols u32 | classes u32
//   rows * cols f64 values, row-major
const MAGIC: &[u8; 4] = b"FPRM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRole {
    Shared = 0,
    Private = 1,
    ClassEmbeddings = 2,
}

impl CheckpointRole {
    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Self::Shared),
            1 => Ok(Self::Private),
            2 => Ok(Self::ClassEmbeddings),
            other => Err(Error::Parse(format!("unknown checkpoint role tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: CheckpointRole,
    pub n_classes: usize,
    pub values: Array2<f64>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * ckpt.values.len());
    buf.extend_from_slice(MAGIC);
    for field in [
        VERSION,
        ckpt.role as u32,
        ckpt.values.nrows() as u32,
        ckpt.values.ncols() as u32,
        ckpt.n_classes as u32,
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for x in ckpt.values.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not a prompt checkpoint (bad magic)".into()));
    }
    let field = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
    };
    if field(0) != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            field(0)
        )));
    }
    let role = CheckpointRole::from_tag(field(1))?;
    let (rows, cols, n_classes) = (field(2) as usize, field(3) as usize, field(4) as usize);
    let body = &bytes[24..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Parse(format!(
            "checkpoint body holds {} bytes, header promises {rows} x {cols} values",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let values =
        Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Checkpoint {
        role,
        n_classes,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic() {
        let a = init_prompts(4, 4, 16, 5, 42).unwrap();
        let b = init_prompts(4, 4, 16, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = init_prompts(4, 4, 16, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_scale_shared_prompt_has_2048_values() {
        let ps = init_prompts(4, 4, 512, 31, 0).unwrap();
        assert_eq!(ps.shared.value_count(), 2048);
    }

    #[test]
    fn rejects_single_class_and_odd_lengths() {
        assert!(init_prompts(4, 4, 8, 1, 0).is_err());
        assert!(matches!(init_prompts(3, 4, 8, 2, 0), Err(Error::Config(_))));
        assert!(matches!(init_prompts(4, 0, 8, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn class_embeddings_are_unit_and_distinct() {
        let ps = init_prompts(2, 2, 16, 6, 1).unwrap();
        let ce = ps.class_embeddings();
        for i in 0..6 {
            assert!((ce.row(i).dot(&ce.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert_ne!(ce.row(i), ce.row(j));
            }
        }
    }

    #[test]
    fn assemble_returns_prompt_unchanged() {
        let ps = init_prompts(4, 2, 8, 3, 5).unwrap();
        let (p, c) = ps.assemble(1, PromptRole::Shared).unwrap();
        assert_eq!(p, ps.shared.view());
        assert_eq!(c, ps.class_embeddings().row(1));
        let (p, _) = ps.assemble(2, PromptRole::Private).unwrap();
        assert_eq!(p, ps.private.view());
        assert!(ps.assemble(3, PromptRole::Shared).is_err());
    }

    #[test]
    fn binding_checks_shape() {
        let ps = init_prompts(2, 2, 4, 3, 5).unwrap();
        assert!(ps
            .clone()
            .bind_class_embeddings(Array2::zeros((2, 4)))
            .is_err());
        let bound = ps.bind_class_embeddings(Array2::ones((3, 4))).unwrap();
        assert_eq!(bound.class_embeddings(), Array2::<f64>::ones((3, 4)));
    }

    #[test]
    fn identical_text_features_give_uniform_prediction() {
        let cfg = PredictionConfig::default();
        let t = array![[1.0, 0.0], [1.0, 0.0]];
        let p = predict_softmax_cosine(t.view(), array![0.6, 0.8].view(), &cfg).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_class_reference_values() {
        // Text rows chosen so the cosines with e_0 are (1, 0, -1).
        let t = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let cfg = PredictionConfig::new(1.0).unwrap();
        let p = predict_softmax_cosine(t.view(), array![1.0, 0.0].view(), &cfg).unwrap();
        // softmax(1, 0, -1) evaluated independently with python/mpmath
        let expected = [
            0.665_240_955_774_821_9,
            0.244_728_471_054_797_67,
            0.090_030_573_170_380_46,
        ];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_temperature_and_nonfinite() {
        assert!(PredictionConfig::new(0.0).is_err());
        assert!(PredictionConfig::new(f64::NAN).is_err());
        let t = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(predict_softmax_cosine(
            t.view(),
            array![1.0, 0.0].view(),
            &PredictionConfig::default()
        )
        .is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(decode_checkpoint(b"nope").is_err());
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.extend_from_slice(&[1, 0, 0, 0, 7, 0, 0, 0]);
        bytes.extend_from_slice(&[0; 12]);
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
