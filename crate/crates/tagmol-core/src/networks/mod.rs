//! The five parameterized networks: protein encoder, ligand generator,
//! Wasserstein critic, binding-energy network, and property-reward network,
//! built from relational graph attention / convolution layers with
//! mean‖max graph aggregation and straight-through discretization.

mod nets;
mod params;

pub use nets::{
    aggregate_graph, critic_score, decide_as, discretize, encode_protein, encode_protein_batch,
    energy_score, generate, generate_batch, graph_trunk, reward_predict, rgat_attention,
    rgat_layer, rgcn_layer, soft_values, stage_molecule, stage_soft, straight_through_decide,
    straight_through_replay, straight_through_sample, MolVars, StDecision, LEAKY_SLOPE,
};
pub use params::{
    CriticParams, CriticVars, EncoderParams, EncoderVars, EnergyParams, EnergyVars,
    GeneratorParams, GeneratorVars, GraphLayerParams, GraphLayerVars, GraphTrunkParams,
    GraphTrunkVars, LayerVariant, LinearParams, LinearVars, ModelParams, NetDims, ParamGroup,
    RewardParams, RewardVars, StageSource, GROUP_NAMES, RELATION_COUNT,
};
