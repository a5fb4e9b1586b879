//! Models of the data manifold and intrinsic-dimension estimation.

pub mod ae;
pub mod dim;
pub mod io;
pub mod pca;

pub use ae::{train_autoencoder, AeCache, AeModel, AeSpec, AeTrainConfig, Activation};
pub use dim::{estimate_intrinsic_dim, DEFAULT_NEIGHBORS};
pub use pca::{fit_pca, fit_pca_variance, PcaModel};

use crate::error::{Error, Result};

/// A fitted manifold: linear (PCA) or learned (auto-encoder).
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldModel {
    Pca(PcaModel),
    Ae(AeModel),
}

impl ManifoldModel {
    pub fn d_in(&self) -> usize {
        match self {
            ManifoldModel::Pca(p) => p.d_in(),
            ManifoldModel::Ae(a) => a.d_in(),
        }
    }

    pub fn d_manifold(&self) -> usize {
        match self {
            ManifoldModel::Pca(p) => p.n_components(),
            ManifoldModel::Ae(a) => a.d_latent(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ManifoldModel::Pca(_) => "pca",
            ManifoldModel::Ae(_) => "ae",
        }
    }

    /// Projects the point `x` onto the manifold.
    pub fn project_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ManifoldModel::Pca(p) => p.project_point(x),
            ManifoldModel::Ae(a) => a.project_point(x),
        }
    }

    /// Projects the vector `v` attached at `x`.
    pub fn project_vector(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::shape("manifold point", self.d_in(), x.len()));
        }
        match self {
            ManifoldModel::Pca(p) => p.project_vector(v),
            ManifoldModel::Ae(a) => a.project_vector(x, v),
        }
    }

    /// Linearized projection at `x`, reusable across many vectors.
    pub fn projector(&self, x: &[f64]) -> Result<Projector<'_>> {
        if x.len() != self.d_in() {
            return Err(Error::shape("manifold point", self.d_in(), x.len()));
        }
        Ok(match self {
            ManifoldModel::Pca(p) => Projector::Pca {
                model: p,
                coeffs: vec![0.0; p.n_components()],
            },
            ManifoldModel::Ae(a) => Projector::Ae {
                model: a,
                cache: a.prepare(x)?,
            },
        })
    }
}

/// The Jacobian `P` of the projection at one point.
pub enum Projector<'a> {
    Pca { model: &'a PcaModel, coeffs: Vec<f64> },
    Ae { model: &'a AeModel, cache: AeCache },
}

impl Projector<'_> {
    /// `out = P v`
    pub fn apply(&mut self, v: &[f64], out: &mut [f64]) {
        match self {
            Projector::Pca { model, coeffs } => model.project_vector_into(v, coeffs, out),
            Projector::Ae { model, cache } => out.copy_from_slice(&model.jvp(cache, v)),
        }
    }

    /// `out = Pᵀ w`
    pub fn apply_transpose(&mut self, w: &[f64], out: &mut [f64]) {
        match self {
            // orthogonal projector is symmetric
            Projector::Pca { model, coeffs } => model.project_vector_into(w, coeffs, out),
            Projector::Ae { model, cache } => out.copy_from_slice(&model.vjp(cache, w)),
        }
    }
}
