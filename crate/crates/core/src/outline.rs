//! Function outlining over stable instruction-hash sequences.
//!
//! Round one outlines repeats inside a module and publishes the hash
//! sequences it outlined. Round two repeats local outlining and then matches
//! what is left against the prefix tree of every published sequence,
//! outlining each hit under a fresh name even when it occurs only once.
//! Merged `.Tgm` bodies skip the local heuristic and only see the tree, so
//! twins in different modules get identical treatment.
//!
//! Outlined callees take no arguments: only closed ranges qualify, where no
//! value flows across either boundary.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::hash::{parse_hex, HashCtx, HashMode, Numbering};
use crate::ir::{
    canonicalize_values, print_function_body, Block, Function, Instruction, Linkage, Module, Opcode, Operand, Origin,
};

const TAG_REL_VALUE: u64 = 4;
const TAG_BLOCK_PARAM: u64 = 7;
const TAG_RESULT: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutlineConfig {
    pub min_outline_len: usize,
    pub call_overhead: usize,
    pub min_local_occurrences: usize,
    /// Test hook: let merged bodies take part in local outlining.
    #[doc(hidden)]
    pub local_outline_merged: bool,
}

impl Default for OutlineConfig {
    fn default() -> Self {
        OutlineConfig { min_outline_len: 2, call_overhead: 1, min_local_occurrences: 2, local_outline_merged: false }
    }
}

impl OutlineConfig {
    /// Size saved by outlining `occurrences` copies of a `len`-instruction
    /// run; must be positive.
    pub fn benefit(&self, occurrences: usize, len: usize) -> i64 {
        (occurrences * len) as i64 - (occurrences * self.call_overhead + len) as i64
    }
}

/// Full hashes of the non-terminator instructions of `block`: opcode, result
/// presence and every operand. Values defined earlier in the block hash by
/// distance to their definition, so identical runs hash the same wherever
/// they sit.
pub fn inst_hash_seq(block: &Block, f: &Function, ctx: &HashCtx<'_>) -> Vec<u64> {
    let numbering = Numbering::of(f);
    let mut def_pos: HashMap<&str, usize> = HashMap::new();
    let block_params: HashMap<&str, usize> = block.params.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut out = Vec::new();
    for (i, inst) in block.instructions.iter().enumerate() {
        if inst.opcode.is_terminator() {
            break;
        }
        let mut h = ctx.mix(0, ctx.mnemonic(inst.opcode));
        h = ctx.mix(h, tagged(ctx, TAG_RESULT, u64::from(inst.result.is_some())));
        for op in &inst.operands {
            let oh = match op {
                Operand::Value(v) => match (def_pos.get(v.as_str()), block_params.get(v.as_str())) {
                    (Some(&d), _) => tagged(ctx, TAG_REL_VALUE, (i - d) as u64),
                    (None, Some(&p)) => tagged(ctx, TAG_BLOCK_PARAM, p as u64),
                    (None, None) => tagged(ctx, TAG_BLOCK_PARAM, u64::MAX),
                },
                other => ctx.operand(other, &numbering).unwrap_or_else(|_| tagged(ctx, TAG_BLOCK_PARAM, u64::MAX - 1)),
            };
            h = ctx.mix(h, oh);
        }
        if let Some(r) = &inst.result {
            def_pos.insert(r.as_str(), i);
        }
        out.push(h);
    }
    out
}

fn tagged(ctx: &HashCtx<'_>, tag: u64, x: u64) -> u64 {
    ctx.mix(ctx.mix(crate::hash::FNV_OFFSET_BASIS, tag), x)
}

/// Def-use facts of one block used to decide closedness.
struct BlockFacts {
    eligible: Vec<bool>,
    /// Earliest in-block definition each instruction reads.
    earliest_def: Vec<Option<usize>>,
    /// Last position (terminator included) reading each instruction's result.
    last_use: Vec<Option<usize>>,
}

impl BlockFacts {
    fn new(block: &Block, barrier: &dyn Fn(&Instruction) -> bool) -> Self {
        let n = block.instructions.len();
        let mut def_pos: HashMap<&str, usize> = HashMap::new();
        let mut eligible = vec![false; n];
        let mut earliest_def = vec![None; n];
        let mut last_use = vec![None; n];
        for (i, inst) in block.instructions.iter().enumerate() {
            let mut ok = !inst.opcode.is_terminator() && inst.opcode != Opcode::Invoke && !barrier(inst);
            for op in &inst.operands {
                match op {
                    Operand::Param(_) | Operand::Label(_) => ok = false,
                    Operand::Value(v) => match def_pos.get(v.as_str()) {
                        Some(&d) => {
                            earliest_def[i] = Some(earliest_def[i].map_or(d, |e: usize| e.min(d)));
                            last_use[d] = Some(i);
                        }
                        None => ok = false,
                    },
                    _ => {}
                }
            }
            eligible[i] = ok;
            if let Some(r) = &inst.result {
                def_pos.insert(r.as_str(), i);
            }
        }
        BlockFacts { eligible, earliest_def, last_use }
    }

    fn closed(&self, start: usize, end: usize) -> bool {
        end <= self.eligible.len()
            && start < end
            && (start..end).all(|i| {
                self.eligible[i]
                    && self.earliest_def[i].is_none_or(|d| d >= start)
                    && self.last_use[i].is_none_or(|u| u < end)
            })
    }
}

/// Maximal closed ranges of `block` of at least `min_len` instructions, as
/// `(start, len)`.
pub fn legal_ranges(block: &Block, min_len: usize) -> Vec<(usize, usize)> {
    legal_ranges_with(&BlockFacts::new(block, &|_| false), min_len)
}

fn legal_ranges_with(facts: &BlockFacts, min_len: usize) -> Vec<(usize, usize)> {
    let n = facts.eligible.len();
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for start in 0..n {
        if let Some(end) = (start + min_len.max(1)..=n).rev().find(|&e| facts.closed(start, e)) {
            ranges.push((start, end - start));
        }
    }
    let contained = |&(s, l): &(usize, usize), all: &[(usize, usize)]| {
        all.iter().any(|&(s2, l2)| (s2, l2) != (s, l) && s2 <= s && s + l <= s2 + l2)
    };
    let snapshot = ranges.clone();
    ranges.retain(|r| !contained(r, &snapshot));
    ranges
}

/// Prefix tree over published instruction-hash sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalPrefixTree {
    nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct TreeNode {
    children: BTreeMap<u64, usize>,
    terminal: bool,
}

impl Default for GlobalPrefixTree {
    fn default() -> Self {
        GlobalPrefixTree { nodes: vec![TreeNode::default()] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("prefix tree line {line}: {msg}")]
pub struct TreeFormatError {
    pub line: usize,
    pub msg: String,
}

impl GlobalPrefixTree {
    pub fn insert(&mut self, seq: &[u64]) {
        let mut node = 0;
        for &h in seq {
            node = match self.nodes[node].children.get(&h) {
                Some(&child) => child,
                None => {
                    self.nodes.push(TreeNode::default());
                    let child = self.nodes.len() - 1;
                    self.nodes[node].children.insert(h, child);
                    child
                }
            };
        }
        self.nodes[node].terminal = true;
    }

    pub fn contains(&self, seq: &[u64]) -> bool {
        let mut node = 0;
        for h in seq {
            match self.nodes[node].children.get(h) {
                Some(&c) => node = c,
                None => return false,
            }
        }
        self.nodes[node].terminal
    }

    pub fn is_empty(&self) -> bool {
        self.nodes[0].children.is_empty() && !self.nodes[0].terminal
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Lengths `d` such that `seq[..d]` is a published sequence, ascending.
    pub fn terminal_prefixes(&self, seq: &[u64]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut node = 0;
        for (d, h) in seq.iter().enumerate() {
            match self.nodes[node].children.get(h) {
                Some(&c) => node = c,
                None => break,
            }
            if self.nodes[node].terminal {
                out.push(d + 1);
            }
        }
        out
    }

    /// Every published sequence, sorted.
    pub fn sequences(&self) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(path.clone());
            }
            for (&h, &child) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(h);
                stack.push((child, p));
            }
        }
        out.sort();
        out
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .sequences()
            .iter()
            .map(|s| {
                let hs: Vec<String> = s.iter().map(|h| format!("{h:016x}")).collect();
                format!("SEQ v1 {}\n", hs.join(","))
            })
            .collect();
        lines.sort();
        lines.concat()
    }

    pub fn from_text(text: &str) -> Result<GlobalPrefixTree, TreeFormatError> {
        let mut seqs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| TreeFormatError { line: n + 1, msg };
            let body = line.strip_prefix("SEQ v1 ").ok_or_else(|| err(format!("expected `SEQ v1`, got `{line}`")))?;
            let seq = body.split(',').map(parse_hex).collect::<Result<Vec<u64>, _>>().map_err(err)?;
            seqs.push(seq);
        }
        Ok(build_prefix_tree(&seqs))
    }
}

pub fn build_prefix_tree(seqs: &[Vec<u64>]) -> GlobalPrefixTree {
    let mut sorted: Vec<&Vec<u64>> = seqs.iter().filter(|s| !s.is_empty()).collect();
    sorted.sort();
    sorted.dedup();
    let mut tree = GlobalPrefixTree::default();
    for s in sorted {
        tree.insert(s);
    }
    tree
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Site {
    func: usize,
    block: usize,
    start: usize,
}

fn fresh_name(taken: &mut HashSet<String>, prefix: &str, counter: &mut usize) -> String {
    loop {
        let name = format!("{prefix}{counter}");
        *counter += 1;
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

/// Zero-parameter private function holding `insts` followed by `ret`.
fn outlined_function(name: &str, insts: &[Instruction]) -> Function {
    let mut block = Block::new("bb0");
    block.instructions.extend_from_slice(insts);
    block.instructions.push(Instruction::new(None, Opcode::Ret, vec![]));
    let mut f = Function::new(name, Vec::new(), Linkage::Private);
    f.blocks.push(block);
    f.origin = Origin::Outlined;
    canonicalize_values(&f)
}

/// Replaces each `(block, start, len)` of `f` with a call to `callee`.
fn replace_ranges(f: &mut Function, mut sites: Vec<(usize, usize, usize, String)>) {
    sites.sort_by_key(|s| std::cmp::Reverse((s.0, s.1)));
    for (block, start, len, callee) in sites {
        let call = Instruction::new(None, Opcode::Call, vec![Operand::global(callee)]);
        f.blocks[block].instructions.splice(start..start + len, [call]);
    }
}

fn takes_local_part(f: &Function, cfg: &OutlineConfig) -> bool {
    match f.origin {
        Origin::Original | Origin::Thunk => true,
        Origin::MergedTgm => cfg.local_outline_merged,
        Origin::Outlined => false,
    }
}

pub fn outline_local(m: &Module, cfg: &OutlineConfig) -> (Module, Vec<Vec<u64>>) {
    outline_local_with(m, cfg, HashMode::Fnv1a)
}

/// Outlines closed runs that repeat inside `m` often enough to pay off.
/// Returns the new module and the hash sequences it outlined.
pub fn outline_local_with(m: &Module, cfg: &OutlineConfig, mode: HashMode) -> (Module, Vec<Vec<u64>>) {
    let ctx = HashCtx::with_mode(m, mode);
    let min_len = cfg.min_outline_len.max(1);

    // Every closed range, bucketed by hash sequence.
    let mut by_hash: BTreeMap<Vec<u64>, Vec<(Site, usize)>> = BTreeMap::new();
    for (fi, f) in m.functions.iter().enumerate() {
        if !takes_local_part(f, cfg) {
            continue;
        }
        for (bi, block) in f.blocks.iter().enumerate() {
            let hashes = inst_hash_seq(block, f, &ctx);
            let facts = BlockFacts::new(block, &|_| false);
            for start in 0..hashes.len() {
                for end in start + min_len..=hashes.len() {
                    if facts.closed(start, end) {
                        by_hash
                            .entry(hashes[start..end].to_vec())
                            .or_default()
                            .push((Site { func: fi, block: bi, start }, end - start));
                    }
                }
            }
        }
    }

    // Hash equality only nominates; the instructions themselves must match.
    struct Candidate {
        seq: Vec<u64>,
        body: String,
        len: usize,
        sites: Vec<Site>,
    }
    let mut candidates = Vec::new();
    for (seq, sites) in by_hash {
        if sites.len() < cfg.min_local_occurrences {
            continue;
        }
        let len = sites[0].1;
        let mut by_body: BTreeMap<String, Vec<Site>> = BTreeMap::new();
        for (site, _) in sites {
            let insts = &m.functions[site.func].blocks[site.block].instructions[site.start..site.start + len];
            by_body.entry(print_function_body(&outlined_function("", insts))).or_default().push(site);
        }
        for (body, sites) in by_body {
            candidates.push(Candidate { seq: seq.clone(), body, len, sites });
        }
    }

    let non_overlapping = |sites: &[Site], len: usize, claimed: &HashSet<(usize, usize, usize)>| -> Vec<Site> {
        let mut picked: Vec<Site> = Vec::new();
        for &s in sites {
            let free = (s.start..s.start + len).all(|i| !claimed.contains(&(s.func, s.block, i)));
            let clear_of_previous =
                picked.last().is_none_or(|p| (p.func, p.block) != (s.func, s.block) || p.start + len <= s.start);
            if free && clear_of_previous {
                picked.push(s);
            }
        }
        picked
    };

    let empty = HashSet::new();
    let mut ranked: Vec<(i64, Candidate)> = candidates
        .into_iter()
        .map(|c| (cfg.benefit(non_overlapping(&c.sites, c.len, &empty).len(), c.len), c))
        .filter(|(b, _)| *b > 0)
        .collect();
    ranked.sort_by(|(ba, a), (bb, b)| {
        bb.cmp(ba).then(b.len.cmp(&a.len)).then(a.seq.cmp(&b.seq)).then(a.body.cmp(&b.body))
    });

    let mut claimed: HashSet<(usize, usize, usize)> = HashSet::new();
    let mut taken: HashSet<String> =
        m.functions.iter().map(|f| f.name.clone()).chain(m.globals.iter().map(|g| g.name.clone())).collect();
    let mut counter = 0;
    let mut out = m.clone();
    let mut replacements: BTreeMap<usize, Vec<(usize, usize, usize, String)>> = BTreeMap::new();
    let mut published = Vec::new();
    for (_, cand) in ranked {
        let sites = non_overlapping(&cand.sites, cand.len, &claimed);
        if sites.len() < cfg.min_local_occurrences || cfg.benefit(sites.len(), cand.len) <= 0 {
            continue;
        }
        let name = fresh_name(&mut taken, &format!("outlined.{}.", m.name), &mut counter);
        let first = sites[0];
        let insts = &m.functions[first.func].blocks[first.block].instructions[first.start..first.start + cand.len];
        out.functions.push(outlined_function(&name, insts));
        for s in sites {
            claimed.extend((s.start..s.start + cand.len).map(|i| (s.func, s.block, i)));
            replacements.entry(s.func).or_default().push((s.block, s.start, cand.len, name.clone()));
        }
        published.push(cand.seq);
    }
    for (fi, sites) in replacements {
        replace_ranges(&mut out.functions[fi], sites);
    }
    published.sort();
    (out, published)
}

pub fn outline_with_tree(m: &Module, tree: &GlobalPrefixTree, cfg: &OutlineConfig) -> Module {
    outline_with_tree_with(m, tree, cfg, HashMode::Fnv1a)
}

/// Round-two outlining: local outlining first, then greedy longest matches
/// against `tree` over whatever local outlining left behind.
pub fn outline_with_tree_with(m: &Module, tree: &GlobalPrefixTree, cfg: &OutlineConfig, mode: HashMode) -> Module {
    let (local, _) = outline_local_with(m, cfg, mode);
    if tree.is_empty() {
        return local;
    }
    let fresh_outlined: HashSet<&str> = local
        .functions
        .iter()
        .filter(|f| f.origin == Origin::Outlined && m.function(&f.name).is_none())
        .map(|f| f.name.as_str())
        .collect();
    let is_barrier = |inst: &Instruction| {
        inst.opcode == Opcode::Call
            && matches!(inst.operands.first(), Some(Operand::Global(g)) if fresh_outlined.contains(g.as_str()))
    };

    let ctx = HashCtx::with_mode(&local, mode);
    let min_len = cfg.min_outline_len.max(1);
    let mut hits: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (fi, f) in local.functions.iter().enumerate() {
        if f.origin == Origin::Outlined {
            continue;
        }
        for (bi, block) in f.blocks.iter().enumerate() {
            let hashes = inst_hash_seq(block, f, &ctx);
            let facts = BlockFacts::new(block, &is_barrier);
            let mut p = 0;
            while p < hashes.len() {
                let best = tree
                    .terminal_prefixes(&hashes[p..])
                    .into_iter()
                    .rev()
                    .find(|&d| d >= min_len && facts.closed(p, p + d));
                match best {
                    Some(d) => {
                        hits.push((fi, bi, p, d));
                        p += d;
                    }
                    None => p += 1,
                }
            }
        }
    }

    let mut out = local.clone();
    let mut taken: HashSet<String> =
        local.functions.iter().map(|f| f.name.clone()).chain(local.globals.iter().map(|g| g.name.clone())).collect();
    let mut counter = 0;
    let mut replacements: BTreeMap<usize, Vec<(usize, usize, usize, String)>> = BTreeMap::new();
    for (fi, bi, start, len) in hits {
        let name = fresh_name(&mut taken, &format!("outlined.{}.g", m.name), &mut counter);
        let insts = &local.functions[fi].blocks[bi].instructions[start..start + len];
        out.functions.push(outlined_function(&name, insts));
        replacements.entry(fi).or_default().push((bi, start, len, name));
    }
    for (fi, sites) in replacements {
        replace_ranges(&mut out.functions[fi], sites);
    }
    out
}
