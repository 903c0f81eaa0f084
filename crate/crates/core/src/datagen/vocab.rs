use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Concepts whose pairwise |cosine| reaches this are redrawn.
pub const MAX_CONCEPT_COSINE: f64 = 0.5;
const MAX_REDRAWS: usize = 10_000;

/// Fixed random unit vectors standing in for narration text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary<S> {
    vectors: Tensor<S>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    concepts: usize,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

pub(crate) fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl<S: Scalar> ConceptVocabulary<S> {
    pub fn generate(concepts: usize, dim: usize, seed: u64) -> Result<Self> {
        if concepts == 0 || dim == 0 {
            return Err(Error::Config("vocabulary needs ≥ 1 concept and dim ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(concepts);
        let mut redraws = 0;
        while accepted.len() < concepts {
            let v = gaussian_unit(&mut rng, dim);
            let ok = accepted.iter().all(|u| {
                let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                c.abs() < MAX_CONCEPT_COSINE
            });
            if ok {
                accepted.push(v);
            } else {
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(Error::Generation(format!(
                        "cannot place {concepts} concepts with |cos| < {MAX_CONCEPT_COSINE} in {dim} dims"
                    )));
                }
            }
        }
        let data = accepted.into_iter().flatten().map(S::of).collect();
        Ok(Self {
            vectors: Tensor::matrix(concepts, dim, data)?,
        })
    }

    pub fn from_tensor(vectors: Tensor<S>) -> Result<Self> {
        vectors.dims2()?;
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, concept: u32) -> &[S] {
        self.vectors.row(concept as usize)
    }

    /// All concept vectors as a `K × C` matrix.
    pub fn matrix(&self) -> &Tensor<S> {
        &self.vectors
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            concepts: self.len(),
            dim: self.dim(),
            vectors: (0..self.len())
                .map(|i| self.vectors.row(i).iter().map(|x| x.as_f64()).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.vectors.len() != file.concepts || file.vectors.iter().any(|v| v.len() != file.dim) {
            return Err(Error::Config("vocabulary file dimensions are inconsistent".into()));
        }
        let data = file.vectors.into_iter().flatten().map(S::of).collect();
        Self::from_tensor(Tensor::matrix(file.concepts, file.dim, data)?)
    }
}
