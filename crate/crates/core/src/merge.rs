//! Per-module optimistic merging. Each candidate is canonicalized on its own
//! into a parameterized `.Tgm` body, and the original becomes a thunk that
//! passes its own constants. Call sites are never touched, so the result is
//! behavior preserving whatever the merge info says; folding identical
//! `.Tgm` bodies is left to the linker.

use std::collections::HashSet;

use crate::combine::{GlobalMergeInfo, MergeGroup, Param};
use crate::hash::{compute_stable_fn, HashCtx, HashMode, Loc, StableFunctionSummary};
use crate::ir::{
    canonicalize_values, Block, Function, Instruction, Linkage, Module, Opcode, Operand, Origin, MERGED_SUFFIX,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MergeError {
    #[error("location {0} is out of range")]
    LocOutOfRange(Loc),
    #[error("location {0} does not hold a constant")]
    NotConstant(Loc),
    #[error("parameter {0} reads different constants at its locations")]
    Disagreement(usize),
    #[error("thunk for @{function} expects {expected} merge arguments, got {got}")]
    Arity { function: String, expected: usize, got: usize },
}

/// A live function admitted for merging, with the stored summary it
/// matched.
#[derive(Clone, Debug)]
pub struct MergeCandidate<'m> {
    pub summary: StableFunctionSummary,
    pub function: &'m Function,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedEntry {
    pub function: String,
    pub merged: String,
    pub args: Vec<Operand>,
    /// Block count of the original body.
    pub blocks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub module: String,
    pub merged: Vec<MergedEntry>,
    /// Group members in this module whose live body no longer matches.
    pub stale: Vec<String>,
    /// Candidates dropped because their group had a single local survivor.
    pub single_local: usize,
    /// Candidates skipped because the merge info disagreed with the IR.
    pub invalid: usize,
}

impl MergeReport {
    pub fn matched(&self) -> usize {
        self.merged.len()
    }
}

/// Stored and fresh summaries agree on hash, size and constant locations.
/// The constants themselves may differ.
pub fn is_compatible(stored: &StableFunctionSummary, fresh: &StableFunctionSummary) -> bool {
    stored.same_shape(fresh)
}

struct MatchOutcome<'m> {
    candidates: Vec<MergeCandidate<'m>>,
    stale: Vec<String>,
    single_local: usize,
}

fn match_detailed<'m>(group: &MergeGroup, m: &'m Module, ctx: &HashCtx<'_>) -> MatchOutcome<'m> {
    let mut out = MatchOutcome { candidates: Vec::new(), stale: Vec::new(), single_local: 0 };
    for stored in group.summaries.iter().filter(|s| s.module == m.name) {
        let live = m.function(&stored.function).filter(|f| f.origin == Origin::Original);
        match live {
            Some(f) if is_compatible(stored, &compute_stable_fn(f, ctx)) => {
                out.candidates.push(MergeCandidate { summary: stored.clone(), function: f })
            }
            _ => out.stale.push(stored.function.clone()),
        }
    }
    if group.is_local_to(&m.name) && out.candidates.len() < 2 {
        out.single_local = out.candidates.len();
        out.candidates.clear();
    }
    out
}

/// Candidates of `group` that live in `m`. A group entirely inside `m`
/// needs two surviving candidates; any cross-module group proceeds with one.
pub fn match_group<'m>(group: &MergeGroup, m: &'m Module) -> Vec<MergeCandidate<'m>> {
    match_detailed(group, m, &HashCtx::new(m)).candidates
}

fn operand_at(f: &Function, loc: Loc) -> Result<&Operand, MergeError> {
    f.instruction(loc.inst).and_then(|i| i.operands.get(loc.opnd)).ok_or(MergeError::LocOutOfRange(loc))
}

/// The constants this function passes for each parameter.
pub fn get_args(f: &Function, params: &[Param]) -> Result<Vec<Operand>, MergeError> {
    params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let first = *p.locs.first().ok_or(MergeError::Disagreement(k))?;
            let value = operand_at(f, first)?;
            if !value.is_constant() {
                return Err(MergeError::NotConstant(first));
            }
            for &loc in &p.locs[1..] {
                if operand_at(f, loc)? != value {
                    return Err(MergeError::Disagreement(k));
                }
            }
            Ok(value.clone())
        })
        .collect()
}

/// Clone of `f` with one appended parameter per merge parameter, replacing
/// the constants at that parameter's locations.
pub fn create_merged_function(f: &Function, params: &[Param]) -> Result<Function, MergeError> {
    let mut merged = canonicalize_values(f);
    let base = merged.params.len();
    for (k, p) in params.iter().enumerate() {
        merged.params.push(format!("p{k}"));
        for &loc in &p.locs {
            let slot = merged
                .instruction_mut(loc.inst)
                .and_then(|i| i.operands.get_mut(loc.opnd))
                .ok_or(MergeError::LocOutOfRange(loc))?;
            if !slot.is_constant() {
                return Err(MergeError::NotConstant(loc));
            }
            *slot = Operand::Param(base + k);
        }
    }
    merged.name = format!("{}{MERGED_SUFFIX}", f.name);
    merged.origin = Origin::MergedTgm;
    merged.linkage = Linkage::Private;
    Ok(canonicalize_values(&merged))
}

/// Replaces the body of `original` with a tail call to `merged_name`,
/// forwarding its parameters followed by `args`. Name and linkage are kept
/// so existing callers stay valid.
pub fn create_thunk(
    original: &Function,
    merged_name: &str,
    args: &[Operand],
    merged_arity: usize,
) -> Result<Function, MergeError> {
    let expected = merged_arity.checked_sub(original.params.len()).unwrap_or(usize::MAX);
    if expected != args.len() {
        return Err(MergeError::Arity { function: original.name.clone(), expected, got: args.len() });
    }
    let mut operands = vec![Operand::global(merged_name)];
    operands.extend((0..original.params.len()).map(Operand::Param));
    operands.extend(args.iter().cloned());
    let mut entry = Block::new("bb0");
    if original.is_void() {
        entry.instructions.push(Instruction::new(None, Opcode::Call, operands));
        entry.instructions.push(Instruction::new(None, Opcode::Ret, vec![]));
    } else {
        entry.instructions.push(Instruction::new(Some("r"), Opcode::Call, operands));
        entry.instructions.push(Instruction::new(None, Opcode::Ret, vec![Operand::value("r")]));
    }
    let mut thunk = original.clone();
    thunk.blocks = vec![entry];
    thunk.origin = Origin::Thunk;
    Ok(canonicalize_values(&thunk))
}

pub fn merge_module(m: &Module, gmi: &GlobalMergeInfo) -> (Module, MergeReport) {
    merge_module_with(m, gmi, HashMode::Fnv1a)
}

/// Applies every group of `gmi` to `m`. A failing candidate is skipped and
/// counted; it never aborts the module.
pub fn merge_module_with(m: &Module, gmi: &GlobalMergeInfo, mode: HashMode) -> (Module, MergeReport) {
    let ctx = HashCtx::with_mode(m, mode);
    let mut report = MergeReport { module: m.name.clone(), ..MergeReport::default() };
    let mut out = m.clone();
    let mut taken: HashSet<String> = m.functions.iter().map(|f| f.name.clone()).collect();
    taken.extend(m.globals.iter().map(|g| g.name.clone()));

    for group in gmi.groups.values() {
        let outcome = match_detailed(group, m, &ctx);
        report.stale.extend(outcome.stale);
        report.single_local += outcome.single_local;
        for cand in outcome.candidates {
            let f = cand.function;
            let merged_name = format!("{}{MERGED_SUFFIX}", f.name);
            if taken.contains(&merged_name) {
                report.invalid += 1;
                continue;
            }
            let built = get_args(f, &group.params).and_then(|args| {
                let merged = create_merged_function(f, &group.params)?;
                let thunk = create_thunk(f, &merged.name, &args, merged.params.len())?;
                Ok((args, merged, thunk))
            });
            let Ok((args, merged, thunk)) = built else {
                report.invalid += 1;
                continue;
            };
            let slot = out.function_mut(&f.name).expect("candidate comes from this module");
            *slot = thunk;
            taken.insert(merged_name.clone());
            out.functions.push(merged);
            report.merged.push(MergedEntry {
                function: f.name.clone(),
                merged: merged_name,
                args,
                blocks: f.blocks.len(),
            });
        }
    }
    report.stale.sort();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combine::{combine, compute_params, CostConfig};
    use crate::hash::analyze_module;
    use crate::ir::{parse_module, print_function, print_function_body, validate};

    fn twin(n: usize) -> Module {
        parse_module(&format!(
            "module m{n}\nextern global @g{n}\nfunc @f{n}(%a) public {{\nentry:\n  %0 = add %a, 1\n  %1 = call @g{n}(%0)\n  %2 = sub %a, %1\n  ret %2\n}}\n"
        ))
        .unwrap()
    }

    fn twin_gmi() -> GlobalMergeInfo {
        let mut sums = analyze_module(&twin(1));
        sums.extend(analyze_module(&twin(2)));
        let mut group = crate::combine::group_by_hash(&sums).unwrap().into_values().next().unwrap();
        let params = compute_params(&group);
        let hash = group[0].hash;
        let mut gmi = GlobalMergeInfo::default();
        gmi.groups.insert(hash, MergeGroup { hash, summaries: std::mem::take(&mut group), params });
        gmi
    }

    #[test]
    fn compatibility_tolerates_constant_edits_only() {
        let m = twin(1);
        let stored = analyze_module(&m).remove(0);
        assert!(is_compatible(&stored, &analyze_module(&m)[0]));
        let mut callee_edit = m.clone();
        callee_edit.globals.push(crate::ir::GlobalDef::external("other"));
        callee_edit.functions[0].instruction_mut(1).unwrap().operands[0] = Operand::global("other");
        assert!(is_compatible(&stored, &analyze_module(&callee_edit)[0]));
        let mut structural = m.clone();
        structural.functions[0].instruction_mut(0).unwrap().operands[1] = Operand::Lit(2);
        assert!(!is_compatible(&stored, &analyze_module(&structural)[0]));
    }

    #[test]
    fn twin_cross_module_group_proceeds_with_one_local() {
        let gmi = twin_gmi();
        let group = gmi.groups.values().next().unwrap();
        let m1 = twin(1);
        assert_eq!(match_group(group, &m1).len(), 1);
    }

    #[test]
    fn local_group_needs_two_survivors() {
        let m = parse_module(
            "module m\nextern global @g1\nextern global @g2\n\
             func @a(%x) { e: %0 = add %x, 1\n %1 = call @g1(%0)\n ret %1 }\n\
             func @b(%x) { e: %0 = add %x, 1\n %1 = call @g2(%0)\n ret %1 }\n",
        )
        .unwrap();
        let gmi = combine(&analyze_module(&m), CostConfig::with_overhead(0)).unwrap();
        let gmi = if gmi.is_empty() {
            let sums = analyze_module(&m);
            let params = compute_params(&sums);
            let mut g = GlobalMergeInfo::default();
            g.groups.insert(sums[0].hash, MergeGroup { hash: sums[0].hash, summaries: sums, params });
            g
        } else {
            gmi
        };
        let group = gmi.groups.values().next().unwrap();
        assert_eq!(match_group(group, &m).len(), 2);
        let mut edited = m.clone();
        edited.functions[1].instruction_mut(0).unwrap().operands[1] = Operand::Lit(9);
        assert!(match_group(group, &edited).is_empty());
        let (_, report) = merge_module(&edited, &gmi);
        assert_eq!(report.stale, vec!["b".to_string()]);
        assert_eq!(report.single_local, 1);
        assert_eq!(report.matched(), 0);
    }

    #[test]
    fn twin_transformation() {
        let gmi = twin_gmi();
        let (out, report) = merge_module(&twin(1), &gmi);
        assert!(validate(&out).is_empty(), "{:?}", validate(&out));
        assert_eq!(report.merged.len(), 1);
        assert_eq!(report.merged[0].args, vec![Operand::global("g1")]);
        assert_eq!(
            print_function(out.function("f1").unwrap()),
            "func @f1(%0) public thunk {\nbb0:\n  %1 = call @f1.Tgm(%0, @g1)\n  ret %1\n}\n"
        );
        assert_eq!(
            print_function(out.function("f1.Tgm").unwrap()),
            "func @f1.Tgm(%0, %1) private merged_tgm {\nbb0:\n  %2 = add %0, 1\n  %3 = call %1(%2)\n  %4 = sub %0, %3\n  ret %4\n}\n"
        );
        let (out2, _) = merge_module(&twin(2), &gmi);
        assert_eq!(
            print_function_body(out.function("f1.Tgm").unwrap()),
            print_function_body(out2.function("f2.Tgm").unwrap())
        );
    }

    #[test]
    fn zero_param_merge_and_void_thunk() {
        let m = parse_module("module m\nglobal @c = 0\nfunc @f() { e: store 1, @c\n store 2, @c\n ret }").unwrap();
        let merged = create_merged_function(&m.functions[0], &[]).unwrap();
        assert_eq!(merged.name, "f.Tgm");
        assert_eq!(merged.blocks, canonicalize_values(&m.functions[0]).blocks);
        let thunk = create_thunk(&m.functions[0], "f.Tgm", &[], 0).unwrap();
        assert_eq!(print_function(&thunk), "func @f() public thunk {\nbb0:\n  call @f.Tgm()\n  ret\n}\n");
        assert!(matches!(create_thunk(&m.functions[0], "f.Tgm", &[Operand::Lit(1)], 0), Err(MergeError::Arity { .. })));
    }

    #[test]
    fn get_args_errors() {
        let m = twin(1);
        let f = &m.functions[0];
        let bad_range = [Param { seq: vec![1, 2], locs: vec![Loc::new(9, 0)] }];
        assert_eq!(get_args(f, &bad_range), Err(MergeError::LocOutOfRange(Loc::new(9, 0))));
        let non_const = [Param { seq: vec![1, 2], locs: vec![Loc::new(1, 1)] }];
        assert_eq!(get_args(f, &non_const), Err(MergeError::NotConstant(Loc::new(1, 1))));
        let disagree = [Param { seq: vec![1, 2], locs: vec![Loc::new(1, 0), Loc::new(0, 1)] }];
        assert_eq!(get_args(f, &disagree), Err(MergeError::Disagreement(0)));
        assert_eq!(get_args(f, &[]), Ok(vec![]));
    }

    #[test]
    fn merging_twice_is_a_no_op() {
        let gmi = twin_gmi();
        let (once, _) = merge_module(&twin(1), &gmi);
        let (twice, report) = merge_module(&once, &gmi);
        assert_eq!(once, twice);
        assert_eq!(report.matched(), 0);
    }
}
