//! Pipeline orchestration: two-round codegen, the single-codegen artifact
//! modes, artifact persistence and reports.
//!
//! Modules are always processed in name order and per-module work is
//! collected in that order, so output bytes do not depend on input order or
//! thread scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::combine::{combine, CombineError, CostConfig, GlobalMergeInfo};
use crate::hash::{analyze_module_with, HashMode};
use crate::ir::{validate, Diagnostic, Module, Program};
use crate::link::{compute_stats, icf, link, IcfMode, LinkError, LinkedImage, LinkerMap, MergeStats};
use crate::merge::{merge_module_with, MergeReport};
use crate::outline::{build_prefix_tree, outline_local_with, outline_with_tree_with, GlobalPrefixTree, OutlineConfig};

pub const DETERMINISTIC_ENV: &str = "MERGELINK_DETERMINISTIC";

pub const BUNDLE_HEADER: &str = "bundle.hdr";
pub const MERGE_INFO_FILE: &str = "merge_info.gmi";
pub const PREFIX_TREE_FILE: &str = "prefix_tree.seq";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    TwoRound,
    WriteArtifacts,
    ReadArtifacts,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::TwoRound => "two-round",
            Mode::WriteArtifacts => "write-artifacts",
            Mode::ReadArtifacts => "read-artifacts",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-round" => Ok(Mode::TwoRound),
            "write-artifacts" => Ok(Mode::WriteArtifacts),
            "read-artifacts" => Ok(Mode::ReadArtifacts),
            other => Err(format!("unknown mode `{other}` (expected two-round, write-artifacts or read-artifacts)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub enable_merge: bool,
    pub enable_outline: bool,
    pub cost: CostConfig,
    pub outline: OutlineConfig,
    pub artifact_dir: Option<PathBuf>,
    pub icf: IcfMode,
    pub hash_mode: HashMode,
    /// Run per-module phases on the calling thread.
    pub single_threaded: bool,
    /// Label recorded in written artifact bundles.
    pub snapshot: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::TwoRound,
            enable_merge: true,
            enable_outline: true,
            cost: CostConfig::default(),
            outline: OutlineConfig::default(),
            artifact_dir: None,
            icf: IcfMode::All,
            hash_mode: HashMode::Fnv1a,
            single_threaded: false,
            snapshot: "unlabeled".to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("module {module} is invalid: {}", .diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { module: String, diagnostics: Vec<Diagnostic> },
    #[error("module name {0} appears twice")]
    DuplicateModule(String),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("artifact bundle rejected: {0}")]
    Artifact(String),
}

/// Round-one products persisted between builds. Either artifact may be
/// absent; a bundle that is present must parse completely.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArtifactBundle {
    pub snapshot: String,
    pub merge_info: Option<GlobalMergeInfo>,
    pub prefix_tree: Option<GlobalPrefixTree>,
}

impl ArtifactBundle {
    /// File name to contents, header included.
    pub fn to_files(&self) -> BTreeMap<String, String> {
        let mut files = BTreeMap::new();
        let mut header = format!("ARTIFACTS v1 snapshot={}\n", self.snapshot);
        if let Some(gmi) = &self.merge_info {
            header.push_str(&format!("file {MERGE_INFO_FILE}\n"));
            files.insert(MERGE_INFO_FILE.to_string(), gmi.to_text());
        }
        if let Some(tree) = &self.prefix_tree {
            header.push_str(&format!("file {PREFIX_TREE_FILE}\n"));
            files.insert(PREFIX_TREE_FILE.to_string(), tree.to_text());
        }
        files.insert(BUNDLE_HEADER.to_string(), header);
        files
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let io = |source| PipelineError::Io { path: dir.to_path_buf(), source };
        fs::create_dir_all(dir).map_err(io)?;
        for name in [MERGE_INFO_FILE, PREFIX_TREE_FILE] {
            let path = dir.join(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io)?;
            }
        }
        for (name, text) in self.to_files() {
            let path = dir.join(&name);
            fs::write(&path, text).map_err(|source| PipelineError::Io { path, source })?;
        }
        Ok(())
    }

    /// Parses a bundle from its files. Any defect rejects the whole bundle.
    pub fn from_files(files: &BTreeMap<String, String>) -> Result<ArtifactBundle, String> {
        let header = files.get(BUNDLE_HEADER).ok_or("missing header")?;
        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let snapshot =
            first.strip_prefix("ARTIFACTS v1 snapshot=").ok_or_else(|| format!("unsupported header `{first}`"))?;
        let mut bundle = ArtifactBundle { snapshot: snapshot.to_string(), ..ArtifactBundle::default() };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let name = line.strip_prefix("file ").ok_or_else(|| format!("bad header line `{line}`"))?;
            let text = files.get(name).ok_or_else(|| format!("{name} is listed but missing"))?;
            match name {
                MERGE_INFO_FILE => {
                    bundle.merge_info = Some(GlobalMergeInfo::from_text(text).map_err(|e| format!("{name}: {e}"))?)
                }
                PREFIX_TREE_FILE => {
                    bundle.prefix_tree = Some(GlobalPrefixTree::from_text(text).map_err(|e| format!("{name}: {e}"))?)
                }
                other => return Err(format!("unknown artifact `{other}`")),
            }
        }
        Ok(bundle)
    }

    /// Reads `dir`. No header means no bundle.
    pub fn read(dir: &Path) -> Result<Option<ArtifactBundle>, String> {
        if !dir.join(BUNDLE_HEADER).exists() {
            return Ok(None);
        }
        let mut files = BTreeMap::new();
        for name in [BUNDLE_HEADER, MERGE_INFO_FILE, PREFIX_TREE_FILE] {
            let path = dir.join(name);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                files.insert(name.to_string(), text);
            }
        }
        ArtifactBundle::from_files(&files).map(Some)
    }
}

/// Loads artifacts for a read-artifacts build. Missing or corrupt bundles
/// yield `None` and a warning; the build continues without them.
pub fn load_artifacts(dir: Option<&Path>) -> (Option<ArtifactBundle>, Vec<String>) {
    let Some(dir) = dir else {
        return (None, vec!["no artifact directory given; building without artifacts".to_string()]);
    };
    match ArtifactBundle::read(dir) {
        Ok(Some(bundle)) => (Some(bundle), Vec::new()),
        Ok(None) => (None, vec![format!("no artifacts in {}; building without them", dir.display())]),
        Err(e) => (None, vec![format!("ignoring artifacts in {}: {e}", dir.display())]),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineOutput {
    /// Final image after folding.
    pub image: LinkedImage,
    pub map: LinkerMap,
    pub stats: MergeStats,
    pub reports: Vec<MergeReport>,
    /// Per-module codegen output, in module name order.
    pub modules: Vec<Module>,
    /// Image before folding.
    pub linked: LinkedImage,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    /// Report files written next to a build: image, linker map, stats and
    /// merge decisions.
    pub fn to_files(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("image.ir".to_string(), self.image.to_text()),
            ("linker.map".to_string(), self.map.to_text()),
            ("stats.txt".to_string(), self.stats.to_text()),
            ("merge_report.txt".to_string(), merge_report_text(&self.reports)),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
        for (name, text) in self.to_files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|source| PipelineError::Io { path, source })?;
        }
        Ok(())
    }
}

/// `MERGE`, `STALE` and `SKIP` lines, sorted.
pub fn merge_report_text(reports: &[MergeReport]) -> String {
    let mut lines = Vec::new();
    for r in reports {
        for e in &r.merged {
            lines.push(format!(
                "MERGE {}:{} -> {} params={} blocks={}\n",
                r.module,
                e.function,
                e.merged,
                e.args.len(),
                e.blocks
            ));
        }
        for s in &r.stale {
            lines.push(format!("STALE {}:{}\n", r.module, s));
        }
        if r.single_local > 0 {
            lines.push(format!("SKIP {} single_local={}\n", r.module, r.single_local));
        }
        if r.invalid > 0 {
            lines.push(format!("SKIP {} invalid={}\n", r.module, r.invalid));
        }
    }
    lines.sort();
    lines.concat()
}

fn single_threaded(cfg: &PipelineConfig) -> bool {
    cfg.single_threaded || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn per_module<T: Send>(modules: &[Module], cfg: &PipelineConfig, f: impl Fn(&Module) -> T + Sync + Send) -> Vec<T> {
    if single_threaded(cfg) {
        modules.iter().map(f).collect()
    } else {
        modules.par_iter().map(f).collect()
    }
}

/// Validated modules in name order.
pub fn prepare(program: &Program) -> Result<Vec<Module>, PipelineError> {
    let sorted = program.sorted();
    for pair in sorted.modules.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(PipelineError::DuplicateModule(pair[0].name.clone()));
        }
    }
    for m in &sorted.modules {
        let diagnostics = validate(m);
        if !diagnostics.is_empty() {
            return Err(PipelineError::Invalid { module: m.name.clone(), diagnostics });
        }
    }
    Ok(sorted.modules)
}

/// Round one: summaries and local outlining per module, then combine and
/// build the prefix tree.
pub fn analyze_round(modules: &[Module], cfg: &PipelineConfig) -> Result<ArtifactBundle, PipelineError> {
    let per = per_module(modules, cfg, |m| {
        let sums = if cfg.enable_merge { analyze_module_with(m, cfg.hash_mode) } else { Vec::new() };
        let seqs = if cfg.enable_outline { outline_local_with(m, &cfg.outline, cfg.hash_mode).1 } else { Vec::new() };
        (sums, seqs)
    });
    let (sums, seqs): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let sums: Vec<_> = sums.into_iter().flatten().collect();
    let seqs: Vec<_> = seqs.into_iter().flatten().collect();
    Ok(ArtifactBundle {
        snapshot: cfg.snapshot.clone(),
        merge_info: if cfg.enable_merge { Some(combine(&sums, cfg.cost)?) } else { None },
        prefix_tree: cfg.enable_outline.then(|| build_prefix_tree(&seqs)),
    })
}

/// Round-two codegen of one module: merge, then outline.
pub fn codegen_module(m: &Module, bundle: Option<&ArtifactBundle>, cfg: &PipelineConfig) -> (Module, MergeReport) {
    let gmi = bundle.and_then(|b| b.merge_info.as_ref()).filter(|_| cfg.enable_merge);
    let (merged, report) = match gmi {
        Some(gmi) => merge_module_with(m, gmi, cfg.hash_mode),
        None => (m.clone(), MergeReport { module: m.name.clone(), ..MergeReport::default() }),
    };
    if !cfg.enable_outline {
        return (merged, report);
    }
    let empty = GlobalPrefixTree::default();
    let tree = bundle.and_then(|b| b.prefix_tree.as_ref()).unwrap_or(&empty);
    (outline_with_tree_with(&merged, tree, &cfg.outline, cfg.hash_mode), report)
}

/// Linked and folded program without merging or outlining.
pub fn baseline(program: &Program, mode: IcfMode) -> Result<LinkedImage, PipelineError> {
    let modules = prepare(program)?;
    Ok(icf(&link(&modules)?, mode).0)
}

fn finish(
    original: &[Module],
    bundle: Option<&ArtifactBundle>,
    cfg: &PipelineConfig,
    warnings: Vec<String>,
) -> Result<PipelineOutput, PipelineError> {
    let (modules, reports): (Vec<Module>, Vec<MergeReport>) =
        per_module(original, cfg, |m| codegen_module(m, bundle, cfg)).into_iter().unzip();
    let linked = link(&modules)?;
    let (image, map) = icf(&linked, cfg.icf);
    let base = icf(&link(original)?, cfg.icf).0;
    let stats = compute_stats(&base, &image, &reports, &map);
    Ok(PipelineOutput { image, map, stats, reports, modules, linked, warnings })
}

pub fn pipeline_two_round(program: &Program, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let modules = prepare(program)?;
    let bundle = analyze_round(&modules, cfg)?;
    finish(&modules, Some(&bundle), cfg, Vec::new())
}

/// Round one only; persists the bundle when `cfg.artifact_dir` is set.
pub fn pipeline_write_artifacts(program: &Program, cfg: &PipelineConfig) -> Result<ArtifactBundle, PipelineError> {
    let modules = prepare(program)?;
    let bundle = analyze_round(&modules, cfg)?;
    if let Some(dir) = &cfg.artifact_dir {
        bundle.write(dir)?;
    }
    Ok(bundle)
}

/// Single codegen pass driven by a possibly stale bundle.
pub fn pipeline_read_artifacts(
    program: &Program,
    cfg: &PipelineConfig,
    bundle: Option<&ArtifactBundle>,
) -> Result<PipelineOutput, PipelineError> {
    let modules = prepare(program)?;
    finish(&modules, bundle, cfg, Vec::new())
}

/// Read-artifacts build loading the bundle from `cfg.artifact_dir`.
pub fn pipeline_read_artifacts_from_dir(
    program: &Program,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let modules = prepare(program)?;
    let (bundle, warnings) = load_artifacts(cfg.artifact_dir.as_deref());
    finish(&modules, bundle.as_ref(), cfg, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn padded_twins() -> Program {
        let body = |n: usize| {
            format!(
                "module m{n}\nextern global @g{n}\nfunc @f{n}(%a) {{ e: %x = add %a, 1\n %y = call @g{n}(%x)\n %z = sub %a, %y\n\
                 %q1 = mul %z, 3\n %q2 = add %q1, 5\n %q3 = mul %q2, 7\n %q4 = sub %q3, %a\n %q5 = add %q4, 11\n %q6 = mul %q5, 13\n ret %q6 }}"
            )
        };
        Program::new(vec![parse_module(&body(2)).unwrap(), parse_module(&body(1)).unwrap()])
    }

    #[test]
    fn twins_two_round() {
        let out = pipeline_two_round(&padded_twins(), &PipelineConfig::default()).unwrap();
        assert_eq!(out.stats.merged_count, 2);
        assert_eq!(out.stats.mismatched_count, 0);
        let tgm: Vec<&String> = out.image.functions.keys().filter(|n| n.ends_with(".Tgm")).collect();
        assert_eq!(tgm, ["m1$f1.Tgm"]);
        assert_eq!(out.map.to_text(), "FOLD m1$f1.Tgm <- m2$f2.Tgm\n");
    }

    #[test]
    fn empty_program() {
        let out = pipeline_two_round(&Program::default(), &PipelineConfig::default()).unwrap();
        assert!(out.image.functions.is_empty());
        assert_eq!(out.stats, MergeStats::default());
    }

    #[test]
    fn read_mode_matches_two_round() {
        let cfg = PipelineConfig::default();
        let bundle = pipeline_write_artifacts(&padded_twins(), &cfg).unwrap();
        let read = pipeline_read_artifacts(&padded_twins(), &cfg, Some(&bundle)).unwrap();
        assert_eq!(read, pipeline_two_round(&padded_twins(), &cfg).unwrap());
        let none = pipeline_read_artifacts(&padded_twins(), &cfg, None).unwrap();
        assert_eq!(none.stats.merged_count, 0);
    }

    #[test]
    fn bundle_round_trip_and_rejection() {
        let cfg = PipelineConfig { snapshot: "r1".into(), ..PipelineConfig::default() };
        let bundle = pipeline_write_artifacts(&padded_twins(), &cfg).unwrap();
        assert_eq!(bundle.merge_info.as_ref().unwrap().groups.len(), 1);
        let files = bundle.to_files();
        assert_eq!(ArtifactBundle::from_files(&files).unwrap(), bundle);
        let mut corrupt = files.clone();
        corrupt.insert(MERGE_INFO_FILE.into(), "GMI v9\n".into());
        assert!(ArtifactBundle::from_files(&corrupt).is_err());
        let mut future = files.clone();
        future.insert(BUNDLE_HEADER.into(), "ARTIFACTS v2 snapshot=x\n".into());
        assert!(ArtifactBundle::from_files(&future).is_err());
        let mut missing = files;
        missing.remove(PREFIX_TREE_FILE);
        assert!(ArtifactBundle::from_files(&missing).is_err());
    }

    #[test]
    fn rejects_invalid_and_duplicate_modules() {
        let bad = parse_module_unchecked_program("module m\nfunc @f() { e: %x = add 1, 1 }");
        assert!(matches!(pipeline_two_round(&bad, &PipelineConfig::default()), Err(PipelineError::Invalid { .. })));
        let m = parse_module("module m\nfunc @f() { e: ret }").unwrap();
        let dup = Program::new(vec![m.clone(), m]);
        assert!(matches!(pipeline_two_round(&dup, &PipelineConfig::default()), Err(PipelineError::DuplicateModule(_))));
    }

    fn parse_module_unchecked_program(text: &str) -> Program {
        Program::new(vec![crate::ir::parse_module_unchecked(text).unwrap()])
    }
}
