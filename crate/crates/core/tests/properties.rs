use proptest::prelude::*;

use mergelink::combine::{merge_is_profitable, GlobalMergeInfo};
use mergelink::corpus::sample_calls;
use mergelink::hash::{read_summaries, write_summaries};
use mergelink::interp::{run, trace_equal, Limits};
use mergelink::ir::{canonicalize_module, canonicalize_values};
use mergelink::link::{icf, link, LinkerMap};
use mergelink::outline::{build_prefix_tree, outline_local};
use mergelink::{
    analyze_module, combine, generate, parse_module, pipeline_two_round, print_module, CorpusConfig, CorpusManifest,
    CostConfig, GlobalPrefixTree, IcfMode, OutlineConfig, PipelineConfig, Program,
};

fn corpus(seed: u64) -> (Program, CorpusManifest) {
    generate(&CorpusConfig::random(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn print_parse_round_trip(seed in any::<u64>()) {
        for m in corpus(seed).0.modules {
            let text = print_module(&m);
            let back = parse_module(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(print_module(&back), text);
        }
    }

    #[test]
    fn canonicalization_is_idempotent(seed in any::<u64>()) {
        for m in corpus(seed).0.modules {
            let once = canonicalize_module(&m);
            prop_assert_eq!(&canonicalize_module(&once), &once);
            for f in &m.functions {
                prop_assert_eq!(canonicalize_values(&canonicalize_values(f)), canonicalize_values(f));
            }
        }
    }

    #[test]
    fn summaries_and_merge_info_round_trip(seed in any::<u64>()) {
        let (p, manifest) = corpus(seed);
        let sums: Vec<_> = p.modules.iter().flat_map(analyze_module).collect();
        let text = write_summaries(&sums);
        prop_assert_eq!(write_summaries(&read_summaries(&text).unwrap()), text);
        let gmi = combine(&sums, CostConfig::default()).unwrap();
        prop_assert_eq!(GlobalMergeInfo::from_text(&gmi.to_text()).unwrap(), gmi);
        prop_assert_eq!(CorpusManifest::from_text(&manifest.to_text()).unwrap(), manifest);
    }

    #[test]
    fn combine_ignores_summary_order(seed in any::<u64>(), rotate in 0usize..64) {
        let (p, _) = corpus(seed);
        let mut sums: Vec<_> = p.modules.iter().flat_map(analyze_module).collect();
        let gmi = combine(&sums, CostConfig::default()).unwrap();
        let k = rotate % sums.len().max(1);
        sums.rotate_left(k);
        sums.reverse();
        prop_assert_eq!(combine(&sums, CostConfig::default()).unwrap(), gmi);
    }

    #[test]
    fn profitability_is_monotone(n in 2usize..16, size in 1usize..64, thunk in 1usize..64) {
        if merge_is_profitable(n, size, thunk) {
            prop_assert!(merge_is_profitable(n, size + 1, thunk));
            prop_assert!(merge_is_profitable(n + 1, size, thunk));
            prop_assert!(thunk == 1 || merge_is_profitable(n, size, thunk - 1));
        }
    }

    #[test]
    fn local_outlining_preserves_behavior(seed in any::<u64>(), min_len in 2usize..5) {
        let (p, _) = corpus(seed);
        let cfg = OutlineConfig { min_outline_len: min_len, ..OutlineConfig::default() };
        let outlined: Vec<_> = p.modules.iter().map(|m| outline_local(m, &cfg).0).collect();
        let before = link(&p.modules).unwrap();
        let after = link(&outlined).unwrap();
        for (entry, args) in sample_calls(&p, seed, 10) {
            let a = run(&before, &entry, &args, Limits::default()).unwrap();
            let b = run(&after, &entry, &args, Limits::default()).unwrap();
            prop_assert!(trace_equal(&a, &b, &Default::default()));
        }
    }

    #[test]
    fn prefix_tree_text_round_trip(seqs in prop::collection::vec(prop::collection::vec(0u64..6, 0..6), 0..12)) {
        let tree = build_prefix_tree(&seqs);
        prop_assert_eq!(GlobalPrefixTree::from_text(&tree.to_text()).unwrap(), tree.clone());
        prop_assert_eq!(build_prefix_tree(&seqs.iter().rev().cloned().collect::<Vec<_>>()), tree);
    }

    #[test]
    fn folding_preserves_behavior_in_every_mode(seed in any::<u64>()) {
        let (p, _) = corpus(seed);
        let image = link(&p.modules).unwrap();
        for mode in [IcfMode::All, IcfMode::Safe, IcfMode::Off] {
            let (folded, map) = icf(&image, mode);
            prop_assert_eq!(LinkerMap::from_text(&map.to_text()).unwrap(), map.clone());
            if mode == IcfMode::Off {
                prop_assert!(map.is_empty());
            }
            for (entry, args) in sample_calls(&p, seed, 5) {
                let a = run(&image, &entry, &args, Limits::default()).unwrap();
                let b = run(&folded, &entry, &args, Limits::default()).unwrap();
                prop_assert!(trace_equal(&a, &b, &map.aliases()));
            }
        }
    }

    #[test]
    fn interpretation_is_deterministic(seed in any::<u64>()) {
        let (p, _) = corpus(seed);
        let out = pipeline_two_round(&p, &PipelineConfig::default()).unwrap();
        for (entry, args) in sample_calls(&p, seed, 5) {
            let a = run(&out.image, &entry, &args, Limits::default());
            prop_assert_eq!(a, run(&out.image, &entry, &args, Limits::default()));
        }
    }
}
