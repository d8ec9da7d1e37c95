use crate::categorical::{log_sum_exp, Categorical, CdfTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// One logit row per previous token.
    Bigram,
    /// A single context-free logit row.
    Unigram,
}

/// Softmax model over a vocabulary with a logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    kind: ModelKind,
    vocab_size: usize,
    logits: Vec<f64>,
}

impl TabularModel {
    /// All-zero logits, i.e. uniform rows.
    pub fn uniform(kind: ModelKind, vocab_size: usize) -> Self {
        let rows = match kind {
            ModelKind::Bigram => vocab_size,
            ModelKind::Unigram => 1,
        };
        Self {
            kind,
            vocab_size,
            logits: vec![0.0; rows * vocab_size],
        }
    }

    pub fn from_logits(kind: ModelKind, vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        let model = Self::uniform(kind, vocab_size);
        if logits.len() != model.logits.len() {
            return Err(Error::LengthMismatch {
                what: "logits",
                expected: model.logits.len(),
                got: logits.len(),
            });
        }
        crate::error::check_finite("logits", &logits)?;
        Ok(Self { logits, ..model })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Logit row used after `context`.
    pub fn row_index(&self, context: usize) -> usize {
        match self.kind {
            ModelKind::Bigram => context,
            ModelKind::Unigram => 0,
        }
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let r = self.row_index(context);
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }

    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        let row = self.row(context);
        let lse = log_sum_exp(row);
        row.iter().map(|l| l - lse).collect()
    }

    pub fn dist(&self, context: usize) -> Categorical {
        Categorical::from_normalized_log_probs(self.log_probs(context))
    }

    /// `dist` for every context `0..vocab_size`.
    pub fn all_dists(&self) -> Vec<Categorical> {
        (0..self.vocab_size).map(|c| self.dist(c)).collect()
    }

    pub fn samplers(&self) -> Vec<CdfTable> {
        self.all_dists().iter().map(CdfTable::new).collect()
    }

    /// `logits += step · grad`, with `grad` laid out like the logit table.
    pub fn apply(&mut self, grad: &[f64], step: f64) {
        for (l, g) in self.logits.iter_mut().zip(grad) {
            *l += step * g;
        }
    }

    /// Replaces this model's parameters with a copy of `other`'s when the
    /// shapes agree.
    pub fn copy_from(&mut self, other: &TabularModel) -> Result<()> {
        if other.kind != self.kind || other.vocab_size != self.vocab_size {
            return Err(Error::InvalidParameter {
                name: "model kind",
                value: other.vocab_size as f64,
                reason: "weights can only be copied between models of the same shape",
            });
        }
        self.logits.copy_from_slice(&other.logits);
        Ok(())
    }
}
