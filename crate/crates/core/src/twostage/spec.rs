use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// A named subvector of the full parameter vector. Indices are stored
/// zero-based; [`SubvectorSpec::from_one_based`] accepts the 1-based form
/// used in experiment files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubvectorSpec {
    name: String,
    indices: Vec<usize>,
}

impl SubvectorSpec {
    pub fn new(name: impl Into<String>, indices: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            indices,
        }
    }

    pub fn from_one_based(name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let name = name.into();
        if let Some(bad) = indices.iter().find(|&&i| i == 0) {
            return Err(Error::Invalid(format!("subvector {name}: index {bad} is not 1-based")));
        }
        Ok(Self::new(name, indices.iter().map(|i| i - 1).collect()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every problem with this spec against a `dim`-dimensional vector.
    pub fn problems(&self, dim: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.indices.is_empty() {
            out.push(format!("subvector {} has no indices", self.name));
        }
        for (k, &i) in self.indices.iter().enumerate() {
            if i >= dim {
                out.push(format!(
                    "subvector {}: index {} exceeds dimension {dim}",
                    self.name,
                    i + 1
                ));
            }
            if self.indices[..k].contains(&i) {
                out.push(format!("subvector {}: index {} repeated", self.name, i + 1));
            }
        }
        out
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let p = self.problems(dim);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(p))
        }
    }
}

/// Checks that the component specs together with the analytic index set
/// `analytic` are valid and cover every coordinate.
pub fn validate_cover(specs: &[&SubvectorSpec], analytic: &[usize], dim: usize) -> Result<()> {
    let mut problems: Vec<String> = specs.iter().flat_map(|s| s.problems(dim)).collect();
    let mut covered = vec![false; dim];
    for &i in analytic {
        if i >= dim {
            problems.push(format!("analytic term index {} exceeds dimension {dim}", i + 1));
        } else {
            covered[i] = true;
        }
    }
    for s in specs {
        for &i in s.indices() {
            if i < dim {
                covered[i] = true;
            }
        }
    }
    for (i, c) in covered.iter().enumerate() {
        if !c {
            problems.push(format!("coordinate {} is not covered by any term", i + 1));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Spec(problems))
    }
}

/// Draws for one subvector: an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T: Real> {
    spec: SubvectorSpec,
    rows: Tensor<T>,
}

impl<T: Real> SampleSet<T> {
    pub fn new(spec: SubvectorSpec, rows: Tensor<T>) -> Result<Self> {
        if rows.shape().len() != 2 || rows.cols() != spec.len() {
            return Err(Error::Dimension {
                expected: spec.len(),
                got: rows.shape().get(1).copied().unwrap_or(0),
            });
        }
        if rows.rows() == 0 {
            return Err(Error::Invalid(format!("sample set {} is empty", spec.name())));
        }
        if !rows.all_finite() {
            return Err(Error::Invalid(format!(
                "sample set {} contains non-finite values",
                spec.name()
            )));
        }
        Ok(Self { spec, rows })
    }

    pub fn spec(&self) -> &SubvectorSpec {
        &self.spec
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}
