use std::collections::BTreeMap;
use std::fs;

use mergelink::corpus::sample_calls;
use mergelink::interp::{run, trace_equal, Limits};
use mergelink::link::link;
use mergelink::pipeline::{pipeline_read_artifacts_from_dir, PipelineError, MERGE_INFO_FILE};
use mergelink::{
    generate, parse_module, pipeline_read_artifacts, pipeline_two_round, pipeline_write_artifacts, ArtifactBundle,
    CorpusConfig, PipelineConfig, PipelineOutput, Program,
};

fn sound(p: &Program, out: &PipelineOutput) {
    let baseline = link(&p.sorted().modules).unwrap();
    for (entry, args) in sample_calls(p, 3, 25) {
        let a = run(&baseline, &entry, &args, Limits::default()).unwrap();
        let b = run(&out.image, &entry, &args, Limits::default()).unwrap();
        assert!(trace_equal(&a, &b, &out.map.aliases()), "{entry}{args:?}");
    }
}

fn corpus(seed: u64) -> Program {
    generate(&CorpusConfig { seed, ..CorpusConfig::default() }).unwrap().0
}

#[test]
fn outlining_alone_folds_outlined_twins() {
    // m1 repeats the run locally; m2 has it once and finds it in the tree.
    let run = "%x = const 3\n %y = mul %x, 5\n %z = add %y, %x\n store %z, @cell\n";
    let m1 = format!(
        "module m1\nglobal @cell = 0 public\nfunc @f(%a) {{ e: {run} ret %a }}\nfunc @g(%a) {{ e: %q = sub %a, 1\n {run} ret %q }}\n"
    );
    let m2 = format!("module m2\nextern global @cell\nfunc @h(%a) {{ e: %q = add %a, 9\n {run} ret %q }}\n");
    let p = Program::new(vec![parse_module(&m1).unwrap(), parse_module(&m2).unwrap()]);
    let cfg = PipelineConfig { enable_merge: false, ..PipelineConfig::default() };
    let out = pipeline_two_round(&p, &cfg).unwrap();
    assert_eq!(out.stats.merged_count, 0);
    assert_eq!(out.map.to_text(), "FOLD m1$outlined.m1.0 <- m2$outlined.m2.g0\n");
    sound(&p, &out);
}

#[test]
fn empty_program_builds_empty_image() {
    let out = pipeline_two_round(&Program::new(Vec::new()), &PipelineConfig::default()).unwrap();
    assert!(out.image.functions.is_empty() && out.map.is_empty());
    assert_eq!((out.stats.total_functions, out.stats.merged_count, out.stats.size_after), (0, 0, 0));
}

#[test]
fn absent_bundle_means_plain_build() {
    let p = corpus(2);
    let out = pipeline_read_artifacts(&p, &PipelineConfig::default(), None).unwrap();
    assert_eq!(out.stats.merged_count, 0);
    assert!(!out.image.functions.keys().any(|n| n.contains(".g")));
    sound(&p, &out);
}

#[test]
fn partial_bundles_stay_sound_with_fewer_rewrites() {
    let p = corpus(4);
    let cfg = PipelineConfig::default();
    let full = pipeline_write_artifacts(&p, &cfg).unwrap();
    let whole = pipeline_read_artifacts(&p, &cfg, Some(&full)).unwrap();
    let merge_only = ArtifactBundle { prefix_tree: None, ..full.clone() };
    let tree_only = ArtifactBundle { merge_info: None, ..full.clone() };
    for partial in [merge_only, tree_only] {
        let out = pipeline_read_artifacts(&p, &cfg, Some(&partial)).unwrap();
        assert!(out.stats.merged_count <= whole.stats.merged_count);
        assert!(out.stats.size_after >= whole.stats.size_after);
        sound(&p, &out);
    }
}

#[test]
fn corrupt_bundle_is_rejected_whole() {
    let p = corpus(6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { artifact_dir: Some(dir.path().to_path_buf()), ..PipelineConfig::default() };
    pipeline_write_artifacts(&p, &cfg).unwrap();
    let good = pipeline_read_artifacts_from_dir(&p, &cfg).unwrap();
    assert!(good.warnings.is_empty() && good.stats.merged_count > 0);

    let gmi = dir.path().join(MERGE_INFO_FILE);
    let text = fs::read_to_string(&gmi).unwrap();
    fs::write(&gmi, text.replacen("G ", "G zz", 1)).unwrap();
    let out = pipeline_read_artifacts_from_dir(&p, &cfg).unwrap();
    assert_eq!(out.warnings.len(), 1, "{:?}", out.warnings);
    assert_eq!(out.stats.merged_count, 0);
    assert!(!out.linked.functions.keys().any(|n| n.contains(".g")), "tree must be dropped too");
    sound(&p, &out);
}

#[test]
fn unknown_bundle_version_is_rejected() {
    let p = corpus(1);
    let mut files = pipeline_write_artifacts(&p, &PipelineConfig::default()).unwrap().to_files();
    let header = files.get_mut("bundle.hdr").unwrap();
    *header = header.replace("ARTIFACTS v1", "ARTIFACTS v9");
    assert!(ArtifactBundle::from_files(&files).is_err());
}

#[test]
fn bundle_files_round_trip() {
    let bundle =
        pipeline_write_artifacts(&corpus(8), &PipelineConfig { snapshot: "rev42".into(), ..Default::default() })
            .unwrap();
    let back = ArtifactBundle::from_files(&bundle.to_files()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.snapshot, "rev42");
}

#[test]
fn invalid_and_duplicate_modules_abort() {
    let m = parse_module("module a\nfunc @f() { e: ret }\n").unwrap();
    let dup = Program::new(vec![m.clone(), m]);
    assert!(matches!(pipeline_two_round(&dup, &PipelineConfig::default()), Err(PipelineError::DuplicateModule(_))));

    let mut broken = corpus(0);
    broken.modules[0].functions[0].blocks[0].instructions.pop();
    let err = pipeline_two_round(&broken, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Invalid { .. }), "{err}");
}

#[test]
fn merged_and_outlined_corpora_shrink() {
    let mut before = 0;
    let mut after = 0;
    for seed in 0..10 {
        let p = corpus(seed);
        let out = pipeline_two_round(&p, &PipelineConfig::default()).unwrap();
        sound(&p, &out);
        before += out.stats.size_before;
        after += out.stats.size_after;
        let reports: BTreeMap<_, _> = out.to_files();
        assert!(reports["merge_report.txt"].lines().all(|l| l.starts_with("MERGE") || l.starts_with("SKIP")));
    }
    assert!(after < before, "{after} vs {before}");
}
