//! Seeded synthetic programs with planted similar-function families and
//! outlining motifs, plus a ground-truth manifest.
//!
//! Every function threads an accumulator through its blocks. Family members
//! are rendered from one template and differ only at divergent slots, each a
//! parameterizable constant (callee, load or store address, stored literal).
//! Fillers carry a unique literal so no two of them ever share a hash, and
//! call only functions of a lower level, which keeps the call graph acyclic
//! and executions short.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combine::{compute_params, group_by_hash, CostConfig};
use crate::hash::{analyze_module, parse_loc, HashCtx, Loc};
use crate::ir::{Block, Function, GlobalDef, Instruction, Linkage, Module, Opcode, Operand, Program};
use crate::outline::inst_hash_seq;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spread {
    /// All members of a family in one module.
    Local,
    /// Every member in a different module.
    CrossModule,
    /// Alternating: even families cross modules, odd ones stay local.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub modules: usize,
    pub functions_per_module: usize,
    pub families: usize,
    /// Inclusive member-count range.
    pub family_size: (usize, usize),
    pub family_spread: Spread,
    pub divergent_locs: usize,
    /// Inclusive instruction-count range, terminators included. Family
    /// bodies are padded so merging pays off at the default overhead.
    pub body_len: (usize, usize),
    pub block_count: (usize, usize),
    pub motifs: usize,
    pub motif_len: usize,
    /// Occurrences per motif; the first two share a module.
    pub motif_sites: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            modules: 3,
            functions_per_module: 8,
            families: 2,
            family_size: (2, 3),
            family_spread: Spread::Mixed,
            divergent_locs: 1,
            body_len: (8, 16),
            block_count: (1, 3),
            motifs: 1,
            motif_len: 3,
            motif_sites: 3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// A small random configuration: at most 6 modules and 40 functions.
    pub fn random(seed: u64) -> CorpusConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0f1_6000_0000);
        let modules = rng.gen_range(1..=6);
        let functions_per_module = rng.gen_range(3..=(40 / modules).min(10));
        let total = modules * functions_per_module;
        let max_size = rng.gen_range(2..=4).min(total);
        let families = rng.gen_range(0..=(total / max_size / 2).min(4));
        let spread = [Spread::Local, Spread::CrossModule, Spread::Mixed][rng.gen_range(0..3)];
        let spread = if modules < max_size && spread != Spread::Local { Spread::Local } else { spread };
        let max_size = if spread == Spread::Local { max_size.min(functions_per_module) } else { max_size };
        let mut cfg = CorpusConfig {
            modules,
            functions_per_module,
            families,
            family_size: (2.min(max_size), max_size),
            family_spread: spread,
            divergent_locs: rng.gen_range(0..=3),
            body_len: (rng.gen_range(4..=10), rng.gen_range(10..=24)),
            block_count: (1, rng.gen_range(1..=4)),
            motifs: rng.gen_range(0..=2),
            motif_len: rng.gen_range(3..=5),
            motif_sites: rng.gen_range(2..=4),
            seed,
        };
        // Placement can run out of room; shed families until it fits.
        while cfg.families > 0 && generate(&cfg).is_err() {
            cfg.families -= 1;
        }
        if generate(&cfg).is_err() {
            cfg.motifs = 0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("manifest line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyInfo {
    pub id: usize,
    /// `(module, function)` pairs in member order.
    pub members: Vec<(String, String)>,
    pub params: usize,
    /// Locations that become merge parameters.
    pub locs: Vec<Loc>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotifSite {
    pub module: String,
    pub function: String,
    pub block: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotifInfo {
    pub id: usize,
    pub len: usize,
    pub sites: Vec<MotifSite>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub families: Vec<FamilyInfo>,
    pub motifs: Vec<MotifInfo>,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            let members: Vec<String> = f.members.iter().map(|(m, n)| format!("{m}:{n}")).collect();
            let locs: Vec<String> = f.locs.iter().map(Loc::to_string).collect();
            let locs = if locs.is_empty() { "-".to_string() } else { locs.join(";") };
            writeln!(out, "FAM {} params={} members={} locs={}", f.id, f.params, members.join(","), locs).unwrap();
        }
        for m in &self.motifs {
            let sites: Vec<String> =
                m.sites.iter().map(|s| format!("{}:{}:{}:{}", s.module, s.function, s.block, s.start)).collect();
            writeln!(out, "MOTIF {} len={} sites={}", m.id, m.len, sites.join(",")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<CorpusManifest, CorpusError> {
        let mut manifest = CorpusManifest::default();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| CorpusError::Format { line: n + 1, msg: msg.to_string() };
            let words: Vec<&str> = line.split_whitespace().collect();
            let field = |i: usize, key: &str| {
                words.get(i).and_then(|w| w.strip_prefix(key)).ok_or_else(|| err(&format!("expected `{key}`")))
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("bad number `{s}`")));
            match words.first() {
                None => continue,
                Some(&"FAM") => {
                    let members = field(3, "members=")?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.split_once(':')
                                .map(|(m, f)| (m.to_string(), f.to_string()))
                                .ok_or_else(|| err("bad member"))
                        })
                        .collect::<Result<_, _>>()?;
                    let locs = match field(4, "locs=")? {
                        "-" => Vec::new(),
                        s => s.split(';').map(parse_loc).collect::<Result<_, _>>().map_err(|m| err(&m))?,
                    };
                    manifest.families.push(FamilyInfo {
                        id: num(words.get(1).ok_or_else(|| err("missing id"))?)?,
                        params: num(field(2, "params=")?)?,
                        members,
                        locs,
                    });
                }
                Some(&"MOTIF") => {
                    let sites = field(3, "sites=")?
                        .split(',')
                        .map(|s| {
                            let parts: Vec<&str> = s.split(':').collect();
                            if parts.len() != 4 {
                                return Err(err("bad motif site"));
                            }
                            Ok(MotifSite {
                                module: parts[0].to_string(),
                                function: parts[1].to_string(),
                                block: num(parts[2])?,
                                start: num(parts[3])?,
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    manifest.motifs.push(MotifInfo {
                        id: num(words.get(1).ok_or_else(|| err("missing id"))?)?,
                        len: num(field(2, "len=")?)?,
                        sites,
                    });
                }
                Some(other) => return Err(err(&format!("unknown record `{other}`"))),
            }
        }
        Ok(manifest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SlotKind {
    ExtCall,
    Load,
    StoreValue,
    StoreAddr,
}

impl SlotKind {
    fn len(self) -> usize {
        if self == SlotKind::Load {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
enum Step {
    Arith(Opcode, u64),
    ParamMix(Opcode, usize),
    ConstMix(u64),
    LoadMix(String),
    Store(String),
    StoreLit(u64, String),
    Call(String, usize),
    Motif(usize),
    Slot(usize, SlotKind),
}

impl Step {
    fn len(&self, motif_len: usize) -> usize {
        match self {
            Step::ConstMix(_) | Step::LoadMix(_) => 2,
            Step::Motif(_) => motif_len,
            Step::Slot(_, kind) => kind.len(),
            _ => 1,
        }
    }
}

/// Block-by-block plan of a body; rendering a plan yields a function.
struct Plan {
    params: usize,
    blocks: Vec<Vec<Step>>,
}

struct Render<'a> {
    motif_len: usize,
    /// Member-specific constant for a slot: `(slot, kind) -> operand`.
    slot: &'a dyn Fn(usize, SlotKind) -> Operand,
    next: usize,
}

#[derive(Default)]
struct Rendered {
    function: Option<Function>,
    /// Parameterized location of each slot.
    slot_locs: BTreeMap<usize, Loc>,
    /// `(motif, block, start)` of planted motifs.
    motif_sites: Vec<(usize, usize, usize)>,
}

impl Render<'_> {
    fn fresh(&mut self) -> String {
        self.next += 1;
        format!("v{}", self.next)
    }

    fn render(&mut self, name: &str, linkage: Linkage, plan: &Plan) -> Rendered {
        let mut out = Rendered::default();
        let params: Vec<String> = (0..plan.params).map(|i| format!("p{i}")).collect();
        let mut f = Function::new(name, params, linkage);
        let mut base = 0;
        let nblocks = plan.blocks.len();
        for (bi, steps) in plan.blocks.iter().enumerate() {
            let mut block = Block::new(format!("b{bi}"));
            let mut acc = if bi == 0 {
                Operand::Param(0)
            } else {
                let p = self.fresh();
                block.params.push(p.clone());
                Operand::value(p)
            };
            for step in steps {
                let at = block.instructions.len();
                let mut emit = |r: &mut Self, op: Opcode, operands: Vec<Operand>, result: bool| -> Operand {
                    let name = result.then(|| r.fresh());
                    block.instructions.push(Instruction::new(name.as_deref(), op, operands));
                    name.map(Operand::value).unwrap_or(Operand::Lit(0))
                };
                match step {
                    Step::Arith(op, lit) => acc = emit(self, *op, vec![acc, Operand::Lit(*lit)], true),
                    Step::ParamMix(op, p) => acc = emit(self, *op, vec![acc, Operand::Param(*p)], true),
                    Step::ConstMix(lit) => {
                        let c = emit(self, Opcode::Const, vec![Operand::Lit(*lit)], true);
                        acc = emit(self, Opcode::Add, vec![acc, c], true);
                    }
                    Step::LoadMix(g) => {
                        let v = emit(self, Opcode::Load, vec![Operand::global(g)], true);
                        acc = emit(self, Opcode::Add, vec![acc, v], true);
                    }
                    Step::Store(g) => {
                        emit(self, Opcode::Store, vec![acc.clone(), Operand::global(g)], false);
                    }
                    Step::StoreLit(lit, g) => {
                        emit(self, Opcode::Store, vec![Operand::Lit(*lit), Operand::global(g)], false);
                    }
                    Step::Call(callee, arity) => {
                        let mut ops = vec![Operand::global(callee), acc.clone()];
                        ops.extend((1..*arity).map(|_| Operand::Param(0)));
                        acc = emit(self, Opcode::Call, ops, true);
                    }
                    Step::Motif(k) => {
                        let mut v = emit(self, Opcode::Const, vec![Operand::Lit(500_000 + *k as u64)], true);
                        for i in 0..self.motif_len.saturating_sub(2) {
                            let op = if i % 2 == 0 { Opcode::Mul } else { Opcode::Add };
                            v = emit(self, op, vec![v, Operand::Lit(7 + i as u64 + *k as u64 * 16)], true);
                        }
                        emit(self, Opcode::Store, vec![v, Operand::global(motif_cell(*k))], false);
                        out.motif_sites.push((*k, bi, at));
                    }
                    Step::Slot(k, kind) => {
                        let c = (self.slot)(*k, *kind);
                        let loc = match kind {
                            SlotKind::ExtCall => {
                                acc = emit(self, Opcode::Call, vec![c, acc], true);
                                Loc::new(base + at, 0)
                            }
                            SlotKind::Load => {
                                let v = emit(self, Opcode::Load, vec![c], true);
                                acc = emit(self, Opcode::Add, vec![acc, v], true);
                                Loc::new(base + at, 0)
                            }
                            SlotKind::StoreValue => {
                                let cell = (self.slot)(usize::MAX, SlotKind::StoreValue);
                                emit(self, Opcode::Store, vec![c, cell], false);
                                Loc::new(base + at, 0)
                            }
                            SlotKind::StoreAddr => {
                                emit(self, Opcode::Store, vec![acc.clone(), c], false);
                                Loc::new(base + at, 1)
                            }
                        };
                        out.slot_locs.insert(*k, loc);
                    }
                }
            }
            let term = if bi + 1 == nblocks {
                Instruction::new(None, Opcode::Ret, vec![acc])
            } else if bi + 2 < nblocks {
                Instruction::new(
                    None,
                    Opcode::BrCond,
                    vec![
                        Operand::Param(plan.params - 1),
                        Operand::label(format!("b{}", bi + 1)),
                        acc.clone(),
                        Operand::label(format!("b{}", bi + 2)),
                        acc,
                    ],
                )
            } else {
                Instruction::new(None, Opcode::Br, vec![Operand::label(format!("b{}", bi + 1)), acc])
            };
            block.instructions.push(term);
            base += block.instructions.len();
            f.blocks.push(block);
        }
        out.function = Some(f);
        out
    }
}

fn motif_cell(k: usize) -> String {
    format!("mcell_{k}")
}

fn module_name(i: usize) -> String {
    format!("m{i}")
}

struct Slot {
    module: usize,
    name: String,
    public: bool,
    level: usize,
    params: usize,
}

/// Splits `steps` into `blocks` non-empty-or-empty runs in order.
fn split_blocks(rng: &mut ChaCha8Rng, steps: Vec<Step>, blocks: usize) -> Vec<Vec<Step>> {
    let mut cuts: Vec<usize> = (0..blocks - 1).map(|_| rng.gen_range(0..=steps.len())).collect();
    cuts.sort();
    let mut out = Vec::new();
    let mut rest = steps;
    let mut taken = 0;
    for c in cuts {
        let tail = rest.split_off(c - taken);
        out.push(rest);
        rest = tail;
        taken = c;
    }
    out.push(rest);
    out
}

/// Fills uniform steps until the plan reaches `len` instructions.
fn pad(rng: &mut ChaCha8Rng, steps: &mut Vec<Step>, len: usize, motif_len: usize, params: usize, cells: &[String]) {
    let mut count: usize = steps.iter().map(|s| s.len(motif_len)).sum();
    while count < len {
        let step = match rng.gen_range(0..6) {
            0 | 1 => Step::Arith([Opcode::Add, Opcode::Sub, Opcode::Mul][rng.gen_range(0..3)], rng.gen_range(1..1000)),
            2 => Step::ParamMix([Opcode::Add, Opcode::Mul][rng.gen_range(0..2)], rng.gen_range(0..params)),
            3 if count + 2 <= len => Step::ConstMix(rng.gen_range(1..1000)),
            4 if count + 2 <= len && !cells.is_empty() => Step::LoadMix(cells[rng.gen_range(0..cells.len())].clone()),
            5 if !cells.is_empty() => Step::Store(cells[rng.gen_range(0..cells.len())].clone()),
            _ => Step::Arith(Opcode::Add, rng.gen_range(1..1000)),
        };
        count += step.len(motif_len);
        let at = rng.gen_range(0..=steps.len());
        steps.insert(at, step);
    }
}

/// Generates a program and its manifest. Deterministic per configuration.
pub fn generate(cfg: &CorpusConfig) -> Result<(Program, CorpusManifest), CorpusError> {
    let infeasible = |msg: String| Err(CorpusError::Infeasible(msg));
    let total = cfg.modules * cfg.functions_per_module;
    let (min_size, max_size) = cfg.family_size;
    if cfg.families > 0 && (min_size < 2 || min_size > max_size) {
        return infeasible(format!("family size range {min_size}..={max_size}"));
    }
    if cfg.families * max_size > total {
        return infeasible(format!("{} families of up to {max_size} exceed {total} functions", cfg.families));
    }
    if cfg.block_count.0 == 0 || cfg.block_count.0 > cfg.block_count.1 || cfg.body_len.0 > cfg.body_len.1 {
        return infeasible("empty block or body range".into());
    }
    if cfg.motifs > 0 && (cfg.motif_len < 2 || cfg.motif_sites < 2) {
        return infeasible("motifs need length and site count of at least 2".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut modules: Vec<Module> = (0..cfg.modules).map(|i| Module::new(module_name(i))).collect();
    let mut free: Vec<usize> = vec![cfg.functions_per_module; cfg.modules];
    let mut manifest = CorpusManifest::default();
    let mut slots: Vec<Slot> = Vec::new();

    // Families first: they sit at level 0 and call only externs.
    for fam in 0..cfg.families {
        let size = rng.gen_range(min_size..=max_size);
        let cross = match cfg.family_spread {
            Spread::Local => false,
            Spread::CrossModule => true,
            Spread::Mixed => fam % 2 == 0 && cfg.modules >= size,
        };
        let homes: Vec<usize> = if cross {
            let mut order: Vec<usize> = (0..cfg.modules).filter(|&m| free[m] > 0).collect();
            order.shuffle(&mut rng);
            order.sort_by_key(|&m| std::cmp::Reverse(free[m]));
            if order.len() < size {
                return infeasible(format!("family {fam} needs {size} modules with room"));
            }
            order[..size].to_vec()
        } else {
            let Some(m) =
                (0..cfg.modules).filter(|&m| free[m] >= size).max_by_key(|&m| (free[m], std::cmp::Reverse(m)))
            else {
                return infeasible(format!("no module has room for local family {fam}"));
            };
            vec![m; size]
        };
        for &h in &homes {
            free[h] -= 1;
        }

        let params = rng.gen_range(1..=2);
        let kinds = [SlotKind::ExtCall, SlotKind::Load, SlotKind::StoreValue, SlotKind::StoreAddr];
        let mut steps: Vec<Step> = vec![Step::Arith(Opcode::Add, 200_000 + fam as u64)];
        for k in 0..cfg.divergent_locs {
            steps.push(Step::Slot(k, kinds[rng.gen_range(0..kinds.len())]));
        }
        steps.push(Step::Call(format!("ext_c{fam}"), 1));
        let fcell = format!("fcell_{fam}");
        let blocks = rng.gen_range(cfg.block_count.0..=cfg.block_count.1);
        // Pay off under the default cost model: N*(p+3) < L*(N-1).
        let thunk = CostConfig::default().thunk_size(cfg.divergent_locs);
        let min_len = size * thunk / (size - 1) + 1;
        let len = rng.gen_range(cfg.body_len.0..=cfg.body_len.1).max(min_len) - blocks;
        let head = steps.remove(0);
        steps.shuffle(&mut rng);
        pad(&mut rng, &mut steps, len - 1, cfg.motif_len, params, std::slice::from_ref(&fcell));
        let mut plan_blocks = split_blocks(&mut rng, steps, blocks);
        plan_blocks[0].insert(0, head);
        let plan = Plan { params, blocks: plan_blocks };

        let mut info = FamilyInfo { id: fam, members: Vec::new(), params: cfg.divergent_locs, locs: Vec::new() };
        let mut locs = BTreeSet::new();
        for (j, &home) in homes.iter().enumerate() {
            let mname = module_name(home);
            let slot_fn = |k: usize, kind: SlotKind| -> Operand {
                if k == usize::MAX {
                    return Operand::global(&fcell);
                }
                match kind {
                    SlotKind::ExtCall => Operand::global(format!("ext_f{fam}_s{k}_m{j}")),
                    SlotKind::Load | SlotKind::StoreAddr => Operand::global(format!("d_f{fam}_s{k}_m{j}")),
                    SlotKind::StoreValue => Operand::Lit(1_000_000 + fam as u64 * 10_000 + k as u64 * 100 + j as u64),
                }
            };
            let name = format!("fam{fam}_{j}");
            let rendered =
                Render { motif_len: cfg.motif_len, slot: &slot_fn, next: 0 }.render(&name, Linkage::Public, &plan);
            locs.extend(rendered.slot_locs.values().copied());
            let module = &mut modules[home];
            for (k, kind) in plan.blocks.iter().flatten().filter_map(|s| match s {
                Step::Slot(k, kind) => Some((*k, *kind)),
                _ => None,
            }) {
                if matches!(kind, SlotKind::Load | SlotKind::StoreAddr) {
                    let value = rng.gen_range(0..1u64 << 20);
                    module.globals.push(GlobalDef::word(format!("d_f{fam}_s{k}_m{j}"), Linkage::Public, value));
                }
            }
            if j == 0 {
                module.globals.push(GlobalDef::word(fcell.clone(), Linkage::Public, fam as u64));
            }
            module.functions.push(rendered.function.expect("rendered"));
            info.members.push((mname, name.clone()));
            slots.push(Slot { module: home, name, public: true, level: 0, params: plan.params });
        }
        info.locs = locs.into_iter().collect();
        manifest.families.push(info);
    }

    // Motif sites: the first two share a module so local outlining publishes
    // the sequence; the rest spread over the other modules.
    let filler_homes: Vec<usize> = (0..cfg.modules).flat_map(|m| std::iter::repeat_n(m, free[m])).collect();
    let mut motif_plan: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if cfg.motifs > 0 {
        let mut per_module: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &m) in filler_homes.iter().enumerate() {
            per_module.entry(m).or_default().push(i);
        }
        let Some((&first, _)) = per_module.iter().max_by_key(|(m, v)| (v.len(), std::cmp::Reverse(**m))) else {
            return infeasible("motifs need filler functions".into());
        };
        for k in 0..cfg.motifs {
            let mut sites = Vec::new();
            let local = &per_module[&first];
            sites.push(local[rng.gen_range(0..local.len())]);
            sites.push(local[rng.gen_range(0..local.len())]);
            let others: Vec<usize> = (0..filler_homes.len()).filter(|&i| filler_homes[i] != first).collect();
            for _ in 2..cfg.motif_sites {
                let pool = if others.is_empty() { local } else { &others };
                sites.push(pool[rng.gen_range(0..pool.len())]);
            }
            for s in sites {
                motif_plan.entry(s).or_default().push(k);
            }
            modules[first].globals.push(GlobalDef::word(motif_cell(k), Linkage::Public, 0));
        }
    }

    let mut motif_sites: BTreeMap<usize, Vec<MotifSite>> = BTreeMap::new();
    for (i, &home) in filler_homes.iter().enumerate() {
        let mname = module_name(home);
        let level = 1 + i % 3;
        let params = rng.gen_range(1..=2);
        let public = rng.gen_bool(0.75);
        let name = format!("fn_{mname}_{i}");
        let callable: Vec<&Slot> = slots.iter().filter(|s| s.level < level && (s.public || s.module == home)).collect();
        let cells = vec![format!("cell_{mname}")];
        let mut steps = vec![Step::Arith(Opcode::Add, 100_000 + i as u64)];
        for _ in 0..rng.gen_range(0..=2usize) {
            if !callable.is_empty() && rng.gen_bool(0.7) {
                let c = callable[rng.gen_range(0..callable.len())];
                steps.push(Step::Call(c.name.clone(), c.params));
            } else {
                steps.push(Step::Call(format!("ext_{mname}_{}", rng.gen_range(0..4)), rng.gen_range(1..=2)));
            }
        }
        if rng.gen_bool(0.5) {
            steps.push(Step::LoadMix("tbl".into()));
        }
        if rng.gen_bool(0.3) {
            steps.push(Step::StoreLit(rng.gen_range(0..100), cells[0].clone()));
        }
        for &k in motif_plan.get(&i).into_iter().flatten() {
            steps.push(Step::Motif(k));
        }
        let blocks = rng.gen_range(cfg.block_count.0..=cfg.block_count.1);
        let len = rng.gen_range(cfg.body_len.0..=cfg.body_len.1).saturating_sub(blocks);
        let head = steps.remove(0);
        steps.shuffle(&mut rng);
        pad(&mut rng, &mut steps, len.saturating_sub(1), cfg.motif_len, params, &cells);
        let mut plan_blocks = split_blocks(&mut rng, steps, blocks);
        plan_blocks[0].insert(0, head);
        let plan = Plan { params, blocks: plan_blocks };
        let no_slot = |_: usize, _: SlotKind| Operand::Lit(0);
        let linkage = if public { Linkage::Public } else { Linkage::Private };
        let rendered = Render { motif_len: cfg.motif_len, slot: &no_slot, next: 0 }.render(&name, linkage, &plan);
        for (k, block, start) in rendered.motif_sites {
            motif_sites.entry(k).or_default().push(MotifSite {
                module: mname.clone(),
                function: name.clone(),
                block,
                start,
            });
        }
        modules[home].functions.push(rendered.function.expect("rendered"));
        slots.push(Slot { module: home, name, public, level, params });
    }
    for (k, mut sites) in motif_sites {
        sites.sort_by(|a, b| {
            (&a.module, &a.function, a.block, a.start).cmp(&(&b.module, &b.function, b.block, b.start))
        });
        manifest.motifs.push(MotifInfo { id: k, len: cfg.motif_len, sites });
    }

    for m in &mut modules {
        let uses_tbl =
            m.functions.iter().flat_map(|f| f.instructions()).any(|i| i.operands.contains(&Operand::global("tbl")));
        if uses_tbl {
            m.globals.push(GlobalDef::bytes("tbl", Linkage::Private, b"shared-table".to_vec()));
        }
        let cell = format!("cell_{}", m.name);
        m.globals.push(GlobalDef::word(cell, Linkage::Public, 1));
        let referenced: BTreeSet<String> = m
            .functions
            .iter()
            .flat_map(|f| f.instructions())
            .flat_map(|i| i.operands.iter())
            .filter_map(|o| match o {
                Operand::Global(g) => Some(g.clone()),
                _ => None,
            })
            .collect();
        for name in referenced {
            m.declare_extern(&name);
        }
    }
    Ok((Program::new(modules), manifest))
}

/// Checks a program against its manifest: each family groups under one
/// hash with exactly its members and the expected parameters, no other
/// group exists, and every motif site carries the same hash sequence.
/// Returns one message per discrepancy.
pub fn verify_manifest(program: &Program, manifest: &CorpusManifest) -> Vec<String> {
    let mut problems = Vec::new();
    let summaries: Vec<_> = program.modules.iter().flat_map(analyze_module).collect();
    let groups = match group_by_hash(&summaries) {
        Ok(g) => g,
        Err(e) => return vec![e.to_string()],
    };
    let mut explained = BTreeSet::new();
    for fam in &manifest.families {
        let hashes: BTreeSet<u64> = fam
            .members
            .iter()
            .filter_map(|(m, f)| summaries.iter().find(|s| &s.module == m && &s.function == f).map(|s| s.hash))
            .collect();
        let found =
            fam.members.iter().filter(|(m, f)| summaries.iter().any(|s| &s.module == m && &s.function == f)).count();
        // Hashes of a broken family are still accounted to it.
        explained.extend(hashes.iter().copied());
        if found != fam.members.len() || hashes.len() != 1 {
            problems.push(format!("family {}: members do not share one hash", fam.id));
            continue;
        }
        let hash = *hashes.iter().next().expect("one hash");
        let group = &groups[&hash];
        let mut got: Vec<(String, String)> = group.iter().map(|s| (s.module.clone(), s.function.clone())).collect();
        let mut want = fam.members.clone();
        got.sort();
        want.sort();
        if got != want {
            problems.push(format!("family {}: hash group has members {got:?}", fam.id));
            continue;
        }
        let params = compute_params(group);
        let locs: Vec<Loc> =
            params.iter().flat_map(|p| p.locs.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
        if params.len() != fam.params || locs != fam.locs {
            problems.push(format!(
                "family {}: {} parameters at {locs:?}, expected {}",
                fam.id,
                params.len(),
                fam.params
            ));
        }
    }
    for (hash, group) in &groups {
        if group.len() > 1 && !explained.contains(hash) {
            problems.push(format!("unplanned group {hash:016x} of {} functions", group.len()));
        }
    }
    for motif in &manifest.motifs {
        let mut seqs = BTreeSet::new();
        for site in &motif.sites {
            let m = program.module(&site.module);
            let f = m.and_then(|m| m.function(&site.function));
            let seq = m.zip(f).and_then(|(m, f)| {
                let block = f.blocks.get(site.block)?;
                let hashes = inst_hash_seq(block, f, &HashCtx::new(m));
                hashes.get(site.start..site.start + motif.len).map(<[u64]>::to_vec)
            });
            match seq {
                Some(s) => {
                    seqs.insert(s);
                }
                None => problems.push(format!("motif {}: site {}:{} missing", motif.id, site.module, site.function)),
            }
        }
        if seqs.len() > 1 {
            problems.push(format!("motif {}: sites disagree", motif.id));
        }
    }
    problems
}

/// Deterministic `(entry, args)` samples over public functions.
pub fn sample_calls(program: &Program, seed: u64, count: usize) -> Vec<(String, Vec<u64>)> {
    let mut entries: Vec<(&str, usize)> = program
        .modules
        .iter()
        .flat_map(|m| m.functions.iter())
        .filter(|f| f.linkage == Linkage::Public)
        .map(|f| (f.name.as_str(), f.params.len()))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (name, arity) = entries[rng.gen_range(0..entries.len())];
            let args = (0..arity).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..3) } else { rng.gen() }).collect();
            (name.to_string(), args)
        })
        .collect()
}
