//! Int-8 network layers and the sequential executor.

mod capsule;
mod network;

pub use capsule::{
    calc_agreement_w_prev_caps, calc_caps_output, calc_caps_output_traced, calc_coupling_coefs, calc_inputs_hat,
    capsule_layer_q7, capsule_layer_q7_observed, CapsLayerDesc, CapsShifts, Observer,
};
pub use network::{
    forward, forward_traced, predict, primary_capsule_q7, scores_to_f32, ActivationFormats, PrimaryCapsDesc, QLayer,
    QLayerParams, QuantModel,
};
