//! `mergelink` command-line driver.
//!
//! Exit codes: 0 success, 1 diagnostics (bad input, failed run), 2 usage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mergelink::corpus::sample_calls;
use mergelink::hash::{read_summaries, write_summaries};
use mergelink::interp::Event;
use mergelink::link::{icf, link, LinkerMap};
use mergelink::pipeline::{codegen_module, load_artifacts, merge_report_text, pipeline_read_artifacts_from_dir};
use mergelink::{
    analyze_module, combine, generate, parse_module, pipeline_two_round, pipeline_write_artifacts, print_module, run,
    CorpusConfig, CostConfig, IcfMode, Limits, LinkedImage, Mode, Module, OutlineConfig, PipelineConfig, Program,
    Spread,
};

#[derive(Parser)]
#[command(name = "mergelink", version, about = "Global function merging and outlining over a toy IR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print stable function summaries for modules.
    Analyze {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Combine summary files into merge info.
    Combine {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = CostConfig::default().thunk_fixed_overhead)]
        overhead: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Merge and outline one module using an artifact bundle.
    Codegen {
        input: PathBuf,
        #[command(flatten)]
        passes: Passes,
        #[arg(long)]
        artifact_dir: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Link modules into one image.
    Link {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = IcfMode::All)]
        icf: IcfMode,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Where to write the linker map.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Run the whole build over a directory or list of modules.
    Pipeline {
        /// Module files, or directories holding `*.ir` files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = Mode::TwoRound)]
        mode: Mode,
        #[command(flatten)]
        passes: Passes,
        #[arg(long, default_value_t = IcfMode::All)]
        icf: IcfMode,
        #[arg(long)]
        artifact_dir: Option<PathBuf>,
        /// Label recorded in written bundles.
        #[arg(long, default_value = "unlabeled")]
        snapshot: String,
        /// Output directory for image, map, stats and merge report.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with a ground-truth manifest.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw every knob from the seed instead of using the flags below.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        modules: Option<usize>,
        #[arg(long)]
        functions_per_module: Option<usize>,
        #[arg(long)]
        families: Option<usize>,
        #[arg(long, value_parser = parse_spread)]
        spread: Option<Spread>,
        #[arg(short, long, required = true)]
        output: PathBuf,
    },
    /// Interpret a function and print its result and trace.
    Run {
        /// An image written by `link`/`pipeline`, or modules to link first.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        entry: String,
        #[arg(long, value_delimiter = ',')]
        args: Vec<u64>,
        /// Linker map giving folded names; defaults to a sibling `linker.map`.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value_t = Limits::default().max_steps)]
        max_steps: u64,
    },
    /// Summarize a pipeline output directory.
    Report { dir: PathBuf },
}

#[derive(Args, Clone)]
struct Passes {
    #[arg(long, overrides_with = "no_merge")]
    merge: bool,
    #[arg(long)]
    no_merge: bool,
    #[arg(long, overrides_with = "no_outline")]
    outline: bool,
    #[arg(long)]
    no_outline: bool,
    #[arg(long, default_value_t = CostConfig::default().thunk_fixed_overhead)]
    overhead: usize,
    #[arg(long, default_value_t = OutlineConfig::default().min_outline_len)]
    min_outline_len: usize,
}

impl Passes {
    fn apply(&self, cfg: &mut PipelineConfig) {
        cfg.enable_merge = !self.no_merge || self.merge;
        cfg.enable_outline = !self.no_outline || self.outline;
        cfg.cost = CostConfig::with_overhead(self.overhead);
        cfg.outline.min_outline_len = self.min_outline_len;
    }
}

fn parse_spread(s: &str) -> Result<Spread, String> {
    match s {
        "local" => Ok(Spread::Local),
        "cross-module" => Ok(Spread::CrossModule),
        "mixed" => Ok(Spread::Mixed),
        other => Err(format!("unknown spread `{other}` (expected local, cross-module or mixed)")),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_module(path: &Path) -> Result<Module> {
    parse_module(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Expands directories to their `*.ir` files, sorted.
fn module_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| p.extension().is_some_and(|e| e == "ir"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no module files found");
    }
    Ok(files)
}

fn read_program(inputs: &[PathBuf]) -> Result<Program> {
    Ok(Program::new(module_files(inputs)?.iter().map(|p| read_module(p)).collect::<Result<_>>()?))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_files(dir: &Path, files: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_image(inputs: &[PathBuf], map: Option<&Path>) -> Result<LinkedImage> {
    let modules: Vec<Module> = inputs.iter().map(|p| read_module(p)).collect::<Result<_>>()?;
    let mut image = match modules.as_slice() {
        [m] if m.name == "image" => LinkedImage::from_module(m),
        _ => link(&modules)?,
    };
    let sibling = inputs[0].with_file_name("linker.map");
    let map = map.map(Path::to_path_buf).or_else(|| (inputs.len() == 1 && sibling.exists()).then_some(sibling));
    if let Some(path) = map {
        let parsed = LinkerMap::from_text(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        image.aliases.extend(parsed.aliases());
    }
    Ok(image)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Analyze { inputs, output } => {
            let mut sums = Vec::new();
            for path in module_files(&inputs)? {
                sums.extend(analyze_module(&read_module(&path)?));
            }
            emit(output.as_deref(), &write_summaries(&sums))
        }
        Command::Combine { inputs, overhead, output } => {
            let mut sums = Vec::new();
            for path in &inputs {
                sums.extend(read_summaries(&read(path)?).with_context(|| format!("parsing {}", path.display()))?);
            }
            let gmi = combine(&sums, CostConfig::with_overhead(overhead))?;
            emit(output.as_deref(), &gmi.to_text())
        }
        Command::Codegen { input, passes, artifact_dir, output } => {
            let module = read_module(&input)?;
            let mut cfg = PipelineConfig::default();
            passes.apply(&mut cfg);
            let (bundle, warnings) = load_artifacts(artifact_dir.as_deref());
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let (out, report) = codegen_module(&module, bundle.as_ref(), &cfg);
            eprint!("{}", merge_report_text(std::slice::from_ref(&report)));
            emit(output.as_deref(), &print_module(&out))
        }
        Command::Link { inputs, icf: mode, output, map } => {
            let modules: Vec<Module> = module_files(&inputs)?.iter().map(|p| read_module(p)).collect::<Result<_>>()?;
            let (image, linker_map) = icf(&link(&modules)?, mode);
            if let Some(path) = map {
                emit(Some(&path), &linker_map.to_text())?;
            }
            emit(output.as_deref(), &image.to_text())
        }
        Command::Pipeline { inputs, mode, passes, icf, artifact_dir, snapshot, output } => {
            let program = read_program(&inputs)?;
            let mut cfg = PipelineConfig { mode, icf, artifact_dir, snapshot, ..PipelineConfig::default() };
            passes.apply(&mut cfg);
            let out = match mode {
                Mode::TwoRound => pipeline_two_round(&program, &cfg)?,
                Mode::WriteArtifacts => {
                    if cfg.artifact_dir.is_none() {
                        bail!("write-artifacts needs --artifact-dir");
                    }
                    let bundle = pipeline_write_artifacts(&program, &cfg)?;
                    let groups = bundle.merge_info.as_ref().map_or(0, |g| g.groups.len());
                    println!("wrote artifacts: {groups} merge groups");
                    return Ok(());
                }
                Mode::ReadArtifacts => pipeline_read_artifacts_from_dir(&program, &cfg)?,
            };
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            match output {
                Some(dir) => write_files(&dir, &out.to_files()),
                None => {
                    print!("{}", out.stats.to_text());
                    Ok(())
                }
            }
        }
        Command::GenCorpus { seed, random, modules, functions_per_module, families, spread, output } => {
            let mut cfg =
                if random { CorpusConfig::random(seed) } else { CorpusConfig { seed, ..CorpusConfig::default() } };
            cfg.modules = modules.unwrap_or(cfg.modules);
            cfg.functions_per_module = functions_per_module.unwrap_or(cfg.functions_per_module);
            cfg.families = families.unwrap_or(cfg.families);
            cfg.family_spread = spread.unwrap_or(cfg.family_spread);
            let (program, manifest) = generate(&cfg)?;
            let mut files: BTreeMap<String, String> =
                program.modules.iter().map(|m| (format!("{}.ir", m.name), print_module(m))).collect();
            files.insert("manifest.txt".into(), manifest.to_text());
            let calls: String = sample_calls(&program, seed, 20)
                .into_iter()
                .map(|(f, args)| format!("{f} {}\n", args.iter().map(u64::to_string).collect::<Vec<_>>().join(",")))
                .collect();
            files.insert("samples.txt".into(), calls);
            write_files(&output, &files)
        }
        Command::Run { inputs, entry, args, map, max_steps } => {
            let image = load_image(&inputs, map.as_deref())?;
            let limits = Limits { max_steps, ..Limits::default() };
            let result = run(&image, &entry, &args, limits)?;
            match result.returned {
                Some(v) => println!("returned {v}"),
                None => println!("returned void"),
            }
            for event in &result.trace {
                match event {
                    Event::Store { global, value } => println!("store @{global} = {value}"),
                    Event::ExternCall { symbol, args, ret } => {
                        let args: Vec<String> = args.iter().map(u64::to_string).collect();
                        println!("call @{symbol}({}) -> {ret}", args.join(", "));
                    }
                }
            }
            Ok(())
        }
        Command::Report { dir } => {
            let stats = read(&dir.join("stats.txt"))?;
            let map = LinkerMap::from_text(&read(&dir.join("linker.map"))?)?;
            let merges = read(&dir.join("merge_report.txt"))?;
            print!("{stats}");
            println!("fold_groups={}", map.groups.len());
            println!("folded_functions={}", map.groups.iter().map(|g| g.members.len()).sum::<usize>());
            println!("stale={}", merges.lines().filter(|l| l.starts_with("STALE")).count());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passes(args: &[&str]) -> PipelineConfig {
        let mut argv = vec!["mergelink", "pipeline", "src"];
        argv.extend_from_slice(args);
        let Command::Pipeline { passes, .. } = Cli::try_parse_from(argv).unwrap().command else { unreachable!() };
        let mut cfg = PipelineConfig::default();
        passes.apply(&mut cfg);
        cfg
    }

    #[test]
    fn pass_toggles() {
        let cfg = passes(&[]);
        assert!(cfg.enable_merge && cfg.enable_outline);
        let cfg = passes(&["--no-merge", "--overhead", "5", "--min-outline-len", "4"]);
        assert!(!cfg.enable_merge && cfg.enable_outline);
        assert_eq!((cfg.cost.thunk_fixed_overhead, cfg.outline.min_outline_len), (5, 4));
        assert!(!passes(&["--no-outline"]).enable_outline);
    }

    #[test]
    fn spread_names() {
        assert_eq!(parse_spread("cross-module"), Ok(Spread::CrossModule));
        assert!(parse_spread("everywhere").is_err());
    }

    #[test]
    fn icf_flag_parses() {
        let cli = Cli::try_parse_from(["mergelink", "link", "a.ir", "--icf", "safe"]).unwrap();
        assert!(matches!(cli.command, Command::Link { icf: IcfMode::Safe, .. }));
        assert!(Cli::try_parse_from(["mergelink", "link", "a.ir", "--icf", "most"]).is_err());
    }
}
