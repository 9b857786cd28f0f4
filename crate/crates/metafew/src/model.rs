//! Seam between the adaptation machinery and the thing being adapted.
//!
//! The meta-learning operations only need a loss, its gradient, and a
//! Hessian-vector product; abstracting them lets tests drive the exact
//! second-order arithmetic with hand-solvable losses (a 1-parameter
//! quadratic) while production code plugs in the full network.

use crate::backbone::{Backbone, BackboneError, LabeledBatch, ParameterVector};

pub trait Model {
    fn loss(&self, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64, BackboneError>;

    fn loss_and_grad(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
    ) -> Result<(f64, ParameterVector), BackboneError>;

    /// Exact Hessian-vector product of the batch loss at `params`.
    fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
        v: &ParameterVector,
    ) -> Result<ParameterVector, BackboneError>;
}

impl Model for Backbone {
    fn loss(&self, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64, BackboneError> {
        Backbone::loss(self, params, batch)
    }

    fn loss_and_grad(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
    ) -> Result<(f64, ParameterVector), BackboneError> {
        Backbone::loss_and_grad(self, params, batch)
    }

    fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
        v: &ParameterVector,
    ) -> Result<ParameterVector, BackboneError> {
        Backbone::hessian_vector_product(self, params, batch, v)
    }
}
