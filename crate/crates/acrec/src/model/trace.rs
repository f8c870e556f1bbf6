use acrec_autodiff::{Scalar, Tensor};

/// Per-layer attention artifacts kept for diagnostics. All attention maps
/// are [B, H, n, n]; the gate is [B, H, n].
#[derive(Clone, Debug)]
pub struct LayerArtifacts<F: Scalar> {
    pub logits: Tensor<F>,
    /// Plain softmax attention A.
    pub attention: Tensor<F>,
    /// Spatially calibrated attention A_s (equals A when spatial is off).
    pub spatial: Tensor<F>,
    pub mask: Option<Tensor<F>>,
    pub perturbed: Option<Tensor<F>>,
    pub corrected: Option<Tensor<F>>,
    pub combined: Option<Tensor<F>>,
    pub gate: Option<Tensor<F>>,
    /// Whatever map actually multiplied the values, after interventions.
    pub final_attention: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace<F: Scalar> {
    pub layers: Vec<LayerArtifacts<F>>,
}

impl<F: Scalar> Default for LayerTrace<F> {
    fn default() -> Self {
        LayerTrace { layers: Vec::new() }
    }
}
