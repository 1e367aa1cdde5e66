//! World model: fused state-action tokens, prior-biased transformer blocks,
//! dynamics and prediction heads, plus parameter and FLOP accounting.

mod accounting;
mod checkpoint;
mod config;
mod params;
mod world;

pub use accounting::{
    count_flops, count_params, overhead_table, round3, FlopCount, OverheadRow, ParamCount, GAUSSIAN_PAIR_FLOPS,
    GELU_FLOPS, LAYER_NORM_FLOPS, RAMP_PAIR_FLOPS, SOFTMAX_FLOPS,
};
pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, CHECKPOINT_HEADER};
pub use config::{default_init_span, ModelConfig};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamSet};
pub use world::{
    simnorm, simnorm_values, DynamicsOutput, ForwardOutput, PredictionOutput, PriorIds, PriorSnapshot, StepInputs,
    WorldModel,
};
