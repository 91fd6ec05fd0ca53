//! Embedding storage, normalization, feature concatenation and PCA whitening.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm};
use crate::par;

/// Tolerance on row norms for inputs that must already be unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Query,
    Gallery,
}

/// Binds a matrix row to a retrieval item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub image_id: String,
    pub box_id: String,
    pub category_id: u32,
    pub source: Source,
}

/// Dense row-major feature matrix with one [`ItemMeta`] per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    ids: Vec<ItemMeta>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>, ids: Vec<ItemMeta>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(Error::DimensionMismatch { expected: dim * ids.len(), found: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {} ({:?})", pos / dim, ids[pos / dim].item_id)));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for meta in &ids {
            if !seen.insert(meta.item_id.as_str()) {
                return Err(Error::Data(format!("duplicate item_id {:?}", meta.item_id)));
            }
        }
        Ok(Self { dim, data, ids })
    }

    /// Replaces the payload, keeping ids. Callers guarantee finiteness.
    fn with_data(&self, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * self.ids.len());
        Self { dim, data, ids: self.ids.clone() }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ids(&self) -> &[ItemMeta] {
        &self.ids
    }

    pub fn meta(&self, row: usize) -> &ItemMeta {
        &self.ids[row]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        Self::new(self.dim, data, ids)
    }

    /// Rows tagged with `source`, or `None` if there are none.
    pub fn filter_source(&self, source: Source) -> Option<Self> {
        let idx: Vec<usize> = (0..self.rows()).filter(|&i| self.ids[i].source == source).collect();
        if idx.is_empty() {
            None
        } else {
            self.select(&idx).ok()
        }
    }

    /// First row whose norm deviates from 1 by more than `tol`.
    pub fn first_non_unit_row(&self, tol: f64) -> Option<usize> {
        self.row_iter().position(|r| (l2_norm(r) - 1.0).abs() > tol)
    }

    pub fn ensure_unit_rows(&self, what: &str) -> Result<()> {
        match self.first_non_unit_row(UNIT_NORM_TOLERANCE) {
            None => Ok(()),
            Some(i) => Err(Error::Precondition(format!(
                "{what} row {i} ({:?}) has norm {}, expected unit length",
                self.ids[i].item_id,
                l2_norm(self.row(i))
            ))),
        }
    }
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = m.data.clone();
    for (i, row) in data.chunks_exact_mut(m.dim).enumerate() {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("row {i} ({:?}) has zero norm", m.ids[i].item_id)));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(m.with_data(m.dim, data))
}

/// Concatenates unit-normalized parts along the feature axis.
///
/// All parts must share the same ids in the same row order. With
/// `renormalize` every output row is rescaled to unit length, which makes
/// the cosine between two rows the mean of their partwise cosines.
pub fn concat_features(parts: &[EmbeddingMatrix], renormalize: bool) -> Result<EmbeddingMatrix> {
    let first = parts.first().ok_or_else(|| Error::Config("concat_features needs at least one part".into()))?;
    for (p, part) in parts.iter().enumerate() {
        if part.rows() != first.rows() {
            let row = part.rows().min(first.rows());
            let longer = if part.rows() > first.rows() { part } else { first };
            return Err(Error::Alignment { row, item_id: longer.ids[row].item_id.clone() });
        }
        if let Some(row) = (0..first.rows()).find(|&r| part.ids[r] != first.ids[r]) {
            return Err(Error::Alignment { row, item_id: part.ids[row].item_id.clone() });
        }
        part.ensure_unit_rows(&format!("part {p}"))?;
    }
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let dim: usize = parts.iter().map(|p| p.dim).sum();
    let mut data = Vec::with_capacity(dim * first.rows());
    for r in 0..first.rows() {
        let start = data.len();
        for part in parts {
            data.extend_from_slice(part.row(r));
        }
        if renormalize {
            let row = &mut data[start..];
            let norm = l2_norm(row);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(first.with_data(dim, data))
}

/// Default floor applied to covariance eigenvalues.
pub const PCA_EPSILON: f64 = 1e-8;

/// Fitted principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim x in_dim`, orthonormal rows.
    pub components: Vec<f64>,
    /// Descending, floored at `epsilon`.
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
    pub epsilon: f64,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let d = self.in_dim();
        &self.components[k * d..(k + 1) * d]
    }

    fn scale(&self, k: usize) -> f64 {
        (self.eigenvalues[k] + self.epsilon).sqrt()
    }
}

/// Fits PCA on the rows of `m` using the unbiased sample covariance.
///
/// Components are sign-normalized so that each one's largest-magnitude
/// entry is positive.
pub fn pca_fit(m: &EmbeddingMatrix, out_dim: usize, whiten: bool) -> Result<PcaModel> {
    let (n, d) = (m.rows(), m.dim());
    if n < 2 {
        return Err(Error::Precondition("PCA needs at least 2 rows".into()));
    }
    if out_dim == 0 || out_dim > d || out_dim > n {
        return Err(Error::Precondition(format!("PCA output dim {out_dim} must be in 1..=min(dim {d}, rows {n})")));
    }
    let mut mean = vec![0.0; d];
    for row in m.row_iter() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| m.row(i)[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(out_dim * d);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (k, &col) in order.iter().take(out_dim).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let norm = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= norm);
        components.extend(v);

        let mut lambda = eig.eigenvalues[col];
        if lambda < PCA_EPSILON {
            log::warn!("PCA component {k} has eigenvalue {lambda:e}; flooring to {PCA_EPSILON:e}");
            lambda = PCA_EPSILON;
        }
        eigenvalues.push(lambda);
    }
    Ok(PcaModel { mean, components, eigenvalues, whiten, epsilon: PCA_EPSILON })
}

/// Projects rows onto the model's components, whitening if configured.
pub fn pca_transform(model: &PcaModel, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.dim() != model.in_dim() {
        return Err(Error::DimensionMismatch { expected: model.in_dim(), found: m.dim() });
    }
    let out_dim = model.out_dim();
    let rows = par::map_range(m.rows(), |i| {
        let centered: Vec<f64> = m.row(i).iter().zip(&model.mean).map(|(x, mu)| x - mu).collect();
        (0..out_dim)
            .map(|k| {
                let y = dot(&centered, model.component(k));
                if model.whiten {
                    y / model.scale(k)
                } else {
                    y
                }
            })
            .collect::<Vec<f64>>()
    });
    Ok(m.with_data(out_dim, rows.concat()))
}

/// Maps projected rows back to the input space. Exact only at full rank.
pub fn pca_inverse_transform(model: &PcaModel, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.dim() != model.out_dim() {
        return Err(Error::DimensionMismatch { expected: model.out_dim(), found: m.dim() });
    }
    let d = model.in_dim();
    let rows = par::map_range(m.rows(), |i| {
        let mut x = model.mean.clone();
        for (k, &y) in m.row(i).iter().enumerate() {
            let y = if model.whiten { y * model.scale(k) } else { y };
            for (acc, c) in x.iter_mut().zip(model.component(k)) {
                *acc += y * c;
            }
        }
        x
    });
    Ok(m.with_data(d, rows.concat()))
}
