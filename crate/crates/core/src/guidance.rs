//! Frozen image and text encoders into the shared guidance space, and the
//! cosine scores that compare inputs with task prototypes.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::gaussian_matrix;
use crate::vocab::Token;

pub const NORM_TOLERANCE: f64 = 1e-6;

/// Unit-norm vector in the guidance space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GuidanceVector(Vec<f64>);

impl GuidanceVector {
    /// Normalizes `raw`; fails on a zero or non-finite vector.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Input(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(raw.iter().map(|x| x / norm).collect()))
    }

    /// Wraps values that are already unit length.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Input(format!("vector norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &GuidanceVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }

    /// Normalized mean of several unit vectors.
    pub fn mean(vectors: &[&GuidanceVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Input("mean of zero vectors".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            for (a, b) in acc.iter_mut().zip(&v.0) {
                *a += b;
            }
        }
        Self::from_raw(&acc)
    }
}

/// Which modalities contribute to the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    Dual,
    ImageOnly,
    TextOnly,
}

impl GuidanceMode {
    /// Weights applied to (α, β).
    pub fn weights(self) -> (f64, f64) {
        match self {
            GuidanceMode::Dual => (1.0, 1.0),
            GuidanceMode::ImageOnly => (1.0, 0.0),
            GuidanceMode::TextOnly => (0.0, 1.0),
        }
    }
}

/// Image and text similarity of one prototype against one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub alpha: f64,
    pub beta: f64,
}

/// Combination rule for α and β. The default is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    pub image_weight: f64,
    pub text_weight: f64,
}

impl Default for ScoreRule {
    fn default() -> Self {
        Self {
            image_weight: 1.0,
            text_weight: 1.0,
        }
    }
}

impl ScoreRule {
    pub fn from_mode(mode: GuidanceMode) -> Self {
        let (image_weight, text_weight) = mode.weights();
        Self {
            image_weight,
            text_weight,
        }
    }

    /// `λ·α + (1−λ)·β`.
    pub fn interpolated(lambda: f64) -> Self {
        Self {
            image_weight: lambda,
            text_weight: 1.0 - lambda,
        }
    }

    pub fn combine(&self, s: Score) -> f64 {
        self.image_weight * s.alpha + self.text_weight * s.beta
    }
}

/// α = cos(prototype, x_v), β = cos(prototype, x_instruct).
pub fn score(
    prototype: &GuidanceVector,
    x_v: &GuidanceVector,
    x_instruct: &GuidanceVector,
) -> Score {
    Score {
        alpha: prototype.cosine(x_v),
        beta: prototype.cosine(x_instruct),
    }
}

/// Encoded guidance features of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGuidance {
    pub image: GuidanceVector,
    pub text: GuidanceVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEncoders {
    /// `d_g × d_img`
    image_proj: Array2<f64>,
    /// `V × d_g`
    token_table: Array2<f64>,
    pub seed: u64,
}

impl GuidanceEncoders {
    pub fn new(d_image: usize, vocab_size: usize, d_g: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            image_proj: gaussian_matrix(&mut rng, d_g, d_image, 1.0 / (d_image as f64).sqrt()),
            token_table: gaussian_matrix(&mut rng, vocab_size, d_g, 1.0),
            seed,
        }
    }

    pub fn d_g(&self) -> usize {
        self.image_proj.nrows()
    }

    pub fn d_image(&self) -> usize {
        self.image_proj.ncols()
    }

    /// `normalize(tanh(W · image))`.
    pub fn encode_image(&self, image: &[f64]) -> Result<GuidanceVector> {
        if image.len() != self.d_image() {
            return Err(Error::Shape(format!(
                "image dimension {} does not match encoder input {}",
                image.len(),
                self.d_image()
            )));
        }
        let x = Array1::from(image.to_vec());
        let h = self.image_proj.dot(&x).mapv(f64::tanh);
        GuidanceVector::from_raw(h.as_slice().expect("contiguous"))
    }

    /// Normalized mean of the token embeddings (a bag of words).
    pub fn encode_text(&self, instruction: &[Token]) -> Result<GuidanceVector> {
        if instruction.is_empty() {
            return Err(Error::Input("cannot encode an empty instruction".into()));
        }
        let mut acc = Array1::<f64>::zeros(self.d_g());
        for &t in instruction {
            if t as usize >= self.token_table.nrows() {
                return Err(Error::Input(format!(
                    "token {t} outside encoder vocabulary"
                )));
            }
            acc += &self.token_table.row(t as usize);
        }
        acc /= instruction.len() as f64;
        GuidanceVector::from_raw(acc.as_slice().expect("contiguous"))
    }

    pub fn encode(&self, image: &[f64], instruction: &[Token]) -> Result<InputGuidance> {
        Ok(InputGuidance {
            image: self.encode_image(image)?,
            text: self.encode_text(instruction)?,
        })
    }

    pub fn to_archive(&self) -> Archive {
        Archive {
            metadata: serde_json::json!({"kind": "encoders", "seed": self.seed}),
            tensors: vec![
                NamedTensor::new(
                    "image_proj",
                    self.image_proj.shape().to_vec(),
                    self.image_proj.iter().copied().collect(),
                ),
                NamedTensor::new(
                    "token_table",
                    self.token_table.shape().to_vec(),
                    self.token_table.iter().copied().collect(),
                ),
            ],
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.metadata.get("kind").and_then(|k| k.as_str()) != Some("encoders") {
            return Err(Error::integrity("metadata.kind", "not an encoder archive"));
        }
        let seed = archive
            .metadata
            .get("seed")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::integrity("metadata.seed", "missing"))?;
        let load = |name: &str| -> Result<Array2<f64>> {
            let t = archive.get(name)?;
            if t.shape.len() != 2 {
                return Err(Error::integrity(name, "expected a matrix"));
            }
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::integrity(name, e.to_string()))
        };
        Ok(Self {
            image_proj: load("image_proj")?,
            token_table: load("token_table")?,
            seed,
        })
    }

    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }
}
