//! Prompt banks and class prototypes in the text embedding space.
//!
//! A [`PromptBank`] stores, per class, the embeddings of every prompt that
//! describes that class. [`mean_prototype`] collapses a bank into one
//! unit-norm prototype per class by averaging and re-normalizing.

mod ttap;

pub use ttap::{TTAP_VERSION, decode_prompt_bank, encode_prompt_bank, load_prompt_bank, save_prompt_bank};

use crate::numerics::{Tensor, NORM_FLOOR};

/// Unit-norm tolerance for stored prompt embeddings.
pub const BANK_NORM_TOL: f64 = 1e-5;
/// Unit-norm tolerance for prototypes.
pub const PROTOTYPE_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrototypeError {
    #[error("class `{0}` has no prompt embeddings")]
    EmptyClass(String),
    #[error("embedding dimension {found} does not match bank dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("class `{class}` prompt {index} has zero norm")]
    ZeroNorm { class: String, index: usize },
    #[error("class `{class}` prompt {index} has norm {norm}, expected 1")]
    NotUnitNorm {
        class: String,
        index: usize,
        norm: f64,
    },
    #[error("class lists differ: {0:?}")]
    ClassMismatch(Vec<String>),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{0} class names for {1} class lists")]
    NameCount(usize, usize),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-class lists of unit-norm prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    class_names: Vec<String>,
    embeddings: Vec<Vec<Vec<f64>>>,
    dim: usize,
    pub source_tag: String,
}

impl PromptBank {
    /// Builds a bank from raw embeddings, normalizing every vector.
    pub fn from_raw(
        class_names: Vec<String>,
        embeddings: Vec<Vec<Vec<f64>>>,
        dim: usize,
        source_tag: impl Into<String>,
    ) -> Result<Self, PrototypeError> {
        if class_names.len() != embeddings.len() {
            return Err(PrototypeError::NameCount(
                class_names.len(),
                embeddings.len(),
            ));
        }
        let mut normalized = Vec::with_capacity(embeddings.len());
        for (name, list) in class_names.iter().zip(embeddings) {
            let mut out = Vec::with_capacity(list.len());
            for (j, mut v) in list.into_iter().enumerate() {
                if v.len() != dim {
                    return Err(PrototypeError::Dimension {
                        expected: dim,
                        found: v.len(),
                    });
                }
                let n = norm(&v);
                if n <= NORM_FLOOR {
                    return Err(PrototypeError::ZeroNorm {
                        class: name.clone(),
                        index: j,
                    });
                }
                v.iter_mut().for_each(|x| *x /= n);
                out.push(v);
            }
            normalized.push(out);
        }
        Ok(Self {
            class_names,
            embeddings: normalized,
            dim,
            source_tag: source_tag.into(),
        })
    }

    /// Builds a bank from embeddings that must already be unit-norm.
    pub fn new(
        class_names: Vec<String>,
        embeddings: Vec<Vec<Vec<f64>>>,
        dim: usize,
        source_tag: impl Into<String>,
    ) -> Result<Self, PrototypeError> {
        for (name, list) in class_names.iter().zip(&embeddings) {
            for (j, v) in list.iter().enumerate() {
                if v.len() == dim {
                    let n = norm(v);
                    if (n - 1.0).abs() > BANK_NORM_TOL {
                        return Err(PrototypeError::NotUnitNorm {
                            class: name.clone(),
                            index: j,
                            norm: n,
                        });
                    }
                }
            }
        }
        Self::from_raw(class_names, embeddings, dim, source_tag)
    }

    /// One prompt per class: the rows of a `K × D` matrix.
    pub fn single(class_names: Vec<String>, rows: &Tensor) -> Result<Self, PrototypeError> {
        let lists = rows.iter_rows().map(|r| vec![r.to_vec()]).collect();
        Self::from_raw(class_names, lists, rows.cols(), "single")
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts(&self, class: usize) -> &[Vec<f64>] {
        &self.embeddings[class]
    }

    pub fn prompt_counts(&self) -> Vec<usize> {
        self.embeddings.iter().map(Vec::len).collect()
    }

    pub fn total_prompts(&self) -> usize {
        self.embeddings.iter().map(Vec::len).sum()
    }

    /// Checks that every class has at least one prompt.
    pub fn validate(&self) -> Result<(), PrototypeError> {
        for (name, list) in self.class_names.iter().zip(&self.embeddings) {
            if list.is_empty() {
                return Err(PrototypeError::EmptyClass(name.clone()));
            }
        }
        Ok(())
    }
}

/// One unit-norm prototype per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    class_names: Vec<String>,
    prototypes: Tensor,
}

impl PrototypeSet {
    /// Wraps a `K × D` matrix, normalizing each row.
    pub fn new(class_names: Vec<String>, rows: Tensor) -> Result<Self, PrototypeError> {
        if class_names.len() != rows.rows() {
            return Err(PrototypeError::NameCount(class_names.len(), rows.rows()));
        }
        if rows.rows() < 2 {
            return Err(PrototypeError::TooFewClasses(rows.rows()));
        }
        let mut rows = rows;
        for i in 0..rows.rows() {
            let r = rows.row_mut(i);
            let n = norm(r);
            if n <= NORM_FLOOR {
                return Err(PrototypeError::ZeroNorm {
                    class: class_names[i].clone(),
                    index: 0,
                });
            }
            r.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            class_names,
            prototypes: rows,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// `K × D` prototype matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }
}

/// Averages every class's prompt embeddings and re-normalizes the mean.
pub fn mean_prototype(bank: &PromptBank) -> Result<PrototypeSet, PrototypeError> {
    bank.validate()?;
    let d = bank.dim;
    let mut data = Vec::with_capacity(bank.num_classes() * d);
    for list in &bank.embeddings {
        let mut mean = vec![0.0; d];
        for v in list {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let j = list.len() as f64;
        data.extend(mean.into_iter().map(|m| m / j));
    }
    let rows = Tensor::matrix(bank.num_classes(), d, data).expect("K·D elements");
    PrototypeSet::new(bank.class_names.clone(), rows)
}

/// Per-class concatenation of two banks over the same classes.
pub fn merge_banks(a: &PromptBank, b: &PromptBank) -> Result<PromptBank, PrototypeError> {
    if a.class_names != b.class_names {
        let mut offending: Vec<String> = a
            .class_names
            .iter()
            .zip(&b.class_names)
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("{x} != {y}"))
            .collect();
        let (la, lb) = (a.class_names.len(), b.class_names.len());
        if la > lb {
            offending.extend(a.class_names[lb..].iter().cloned());
        } else {
            offending.extend(b.class_names[la..].iter().cloned());
        }
        return Err(PrototypeError::ClassMismatch(offending));
    }
    if a.dim != b.dim {
        return Err(PrototypeError::Dimension {
            expected: a.dim,
            found: b.dim,
        });
    }
    a.validate()?;
    b.validate()?;
    let embeddings = a
        .embeddings
        .iter()
        .zip(&b.embeddings)
        .map(|(x, y)| x.iter().chain(y).cloned().collect())
        .collect();
    Ok(PromptBank {
        class_names: a.class_names.clone(),
        embeddings,
        dim: a.dim,
        source_tag: "all".to_string(),
    })
}
