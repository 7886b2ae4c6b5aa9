//! Feedforward actor-critic over the primitive graph.
//!
//! A shared `tanh` torso reads the flattened observation and feeds three
//! linear heads: policy logits over the largest edge set, a state value, and
//! per-edge validity logits supervised by the true mask. Gradients are
//! computed analytically; training runs synchronous rounds over several
//! workers and is bit-reproducible for a fixed seed.

mod math;
mod net;
mod train;

pub use math::{
    gae, lambda_returns, loss_and_grad, losses, masked_log_policy, masked_policy, normalize,
    Batch, LossConfig, Losses,
};
pub use net::{param_count, ActorCriticNet, Mlp, MlpCache, NetCache, NetOutput};
pub use train::{
    curve_csv, evaluate, masked_argmax, padded_mask, sample_index, train, train_from,
    CurvePoint, MetricTable, Optimizer, PolicyPlanner, ScenarioSource, Stat, TrainConfig, TrainOutput,
};

#[cfg(test)]
mod tests;
