//! Workloads shared by the benchmarks.

use mergelink::{generate, CorpusConfig, Program, Spread};

/// A corpus with `modules` modules of `per_module` functions, a third of
/// them in cross-module families.
pub fn workload(modules: usize, per_module: usize, seed: u64) -> Program {
    let total = modules * per_module;
    let cfg = CorpusConfig {
        modules,
        functions_per_module: per_module,
        families: (total / 3 / modules.max(2)).max(1),
        family_size: (2, modules.clamp(2, 4)),
        family_spread: Spread::Mixed,
        divergent_locs: 2,
        body_len: (10, 24),
        motifs: 3,
        motif_sites: 4,
        seed,
        ..CorpusConfig::default()
    };
    generate(&cfg).expect("benchmark corpus is feasible").0
}
