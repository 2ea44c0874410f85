//! Per-task pre-training samples and encoder input assembly.

mod layout;
mod tasks;

pub use layout::{
    assemble_conversation, assemble_segments, fit_lengths, speaker_lane, InputLanes, Segment, UtteranceSlot,
    MASK_SPEAKER,
};
pub use tasks::{
    build_bundle, sample_iss, sample_mlm, sample_msur, sample_nsp, sample_pcd, sample_rur, sample_snd, CorpusIndex,
    PcdTriple, PretrainSample, SampleBundle, SamplerConfig, Task, TaskTargets,
};
