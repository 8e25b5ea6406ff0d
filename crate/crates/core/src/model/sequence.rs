use crate::numerics::Matrix;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Vision,
    Text,
}

/// Embedded tokens: a vision prefix followed by text, with original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Matrix,
    modality: Vec<Modality>,
    positions: Vec<usize>,
    pub batch_id: usize,
}

impl TokenSequence {
    pub fn new(
        embeddings: Matrix,
        modality: Vec<Modality>,
        positions: Vec<usize>,
        batch_id: usize,
    ) -> Result<Self, ModelError> {
        let n = embeddings.rows();
        if modality.len() != n || positions.len() != n {
            return Err(ModelError::InvalidSequence(format!(
                "{n} embeddings but {} modality tags and {} positions",
                modality.len(),
                positions.len()
            )));
        }
        if let Some(first_text) = modality.iter().position(|m| *m == Modality::Text) {
            if modality[first_text..].contains(&Modality::Vision) {
                return Err(ModelError::InvalidSequence(
                    "vision tokens must form a contiguous prefix".into(),
                ));
            }
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidSequence(
                "positions must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            embeddings,
            modality,
            positions,
            batch_id,
        })
    }

    /// `n_vision` vision rows followed by text rows, positions `0..n`.
    pub fn with_prefix(embeddings: Matrix, n_vision: usize) -> Result<Self, ModelError> {
        let n = embeddings.rows();
        if n_vision > n {
            return Err(ModelError::InvalidSequence(format!(
                "{n_vision} vision tokens in a {n}-token sequence"
            )));
        }
        let modality = (0..n)
            .map(|i| if i < n_vision { Modality::Vision } else { Modality::Text })
            .collect();
        Self::new(embeddings, modality, (0..n).collect(), 0)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vision(&self) -> usize {
        self.modality
            .iter()
            .take_while(|m| **m == Modality::Vision)
            .count()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn into_embeddings(self) -> Matrix {
        self.embeddings
    }
}

/// A supervised example: vision embeddings, text token ids and answer targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub vision: Matrix,
    pub text: Vec<usize>,
    /// `(sequence row, target token)` pairs scored by the loss.
    pub answers: Vec<(usize, usize)>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.vision.rows() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vision(&self) -> usize {
        self.vision.rows()
    }
}
