//! Post-training quantizers built on the SQ-format: Hessian-guided weight
//! splitting, static and dynamic activation splitting, and the uniform and
//! 2:4 baselines.

mod activation;
mod weight;

pub use activation::{
    activation_channel_importance, apply_plan_to_weights, build_activation_plan,
    plan_static_activations, quantize_activations_dynamic, quantize_activations_static,
    quantize_weights_for_plan, ActivationPlan, ActivationSplit, ChannelImportance, SplitLayout,
};
pub use weight::{
    magnitude_importance, quantize_weights_sq, select_weight_mask, sparse_2_4, weight_importance,
    PreparedWeights, WeightImportance,
};

pub use crate::format::{quantize_uniform, Granularity};

/// Marks the `k` largest entries of `values`; ties go to the lower index.
pub(crate) fn top_k_flags(values: &[f64], k: usize, flags: &mut [bool]) {
    debug_assert_eq!(values.len(), flags.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    flags.fill(false);
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
}
