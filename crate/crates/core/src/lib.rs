//! Optimistic global function merging and outlining for separately compiled
//! modules, over a small word-typed IR.
//!
//! The pipeline summarizes every function with a stable hash that skips
//! parameterizable constants ([`hash`]), groups functions across modules by
//! that hash ([`combine`]), and rewrites each module on its own: similar
//! functions become thunks into a parameterized `.Tgm` body ([`merge`]) and
//! repeated instruction runs are outlined ([`outline`]). A simulated linker
//! ([`link`]) folds the identical bodies that result. The reference
//! interpreter ([`interp`]) checks that every step preserves behavior, and
//! [`corpus`] generates programs with known ground truth.

pub mod combine;
pub mod corpus;
pub mod hash;
pub mod interp;
pub mod ir;
pub mod link;
pub mod merge;
pub mod outline;
pub mod pipeline;

pub use combine::{combine, CostConfig, GlobalMergeInfo, MergeGroup, Param};
pub use corpus::{generate, verify_manifest, CorpusConfig, CorpusManifest, Spread};
pub use hash::{analyze_module, HashMode, Loc, StableFunctionSummary};
pub use interp::{run, run_program, trace_equal, Event, ExecError, ExecResult, Limits};
pub use ir::{parse_module, print_module, Function, Module, Program};
pub use link::{icf, link, size, IcfMode, LinkedImage, LinkerMap, MergeStats};
pub use merge::{merge_module, MergeReport};
pub use outline::{build_prefix_tree, outline_local, outline_with_tree, GlobalPrefixTree, OutlineConfig};
pub use pipeline::{
    pipeline_read_artifacts, pipeline_two_round, pipeline_write_artifacts, ArtifactBundle, Mode, PipelineConfig,
    PipelineError, PipelineOutput,
};
