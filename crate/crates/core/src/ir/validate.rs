use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{Function, Module, Opcode, Operand, Origin, MERGED_SUFFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiagKind {
    DuplicateSymbol,
    DuplicateValue,
    DuplicateLabel,
    EmptyFunction,
    MissingTerminator,
    MisplacedTerminator,
    UndefinedLabel,
    UndefinedSymbol,
    UseBeforeDef,
    Arity,
    MisplacedLabel,
    BadEntryBlock,
    InconsistentReturn,
    BadMergedName,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub function: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.function {
            Some(func) => write!(f, "@{func}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks every module, function and block invariant. Empty result means the
/// module is well formed and safe to interpret.
pub fn validate(m: &Module) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut names = HashSet::new();
    for name in m.globals.iter().map(|g| &g.name).chain(m.functions.iter().map(|f| &f.name)) {
        if !names.insert(name.as_str()) {
            diags.push(Diagnostic {
                kind: DiagKind::DuplicateSymbol,
                function: None,
                message: format!("duplicate symbol @{name}"),
            });
        }
    }
    for f in &m.functions {
        diags.extend(validate_function(f, &|name| names.contains(name)));
    }
    diags
}

/// Function-level checks; `resolves` reports whether a global reference
/// names a known symbol.
pub fn validate_function(f: &Function, resolves: &dyn Fn(&str) -> bool) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |kind, message: String| {
        diags.push(Diagnostic { kind, function: Some(f.name.clone()), message });
    };

    if (f.origin == Origin::MergedTgm) != f.name.ends_with(MERGED_SUFFIX) {
        push(DiagKind::BadMergedName, format!("merged functions and only they end in `{MERGED_SUFFIX}`"));
    }
    if f.blocks.is_empty() {
        push(DiagKind::EmptyFunction, "function has no blocks".into());
        return diags;
    }

    let mut block_params: HashMap<&str, usize> = HashMap::new();
    for b in &f.blocks {
        if block_params.insert(b.label.as_str(), b.params.len()).is_some() {
            push(DiagKind::DuplicateLabel, format!("duplicate label {}", b.label));
        }
    }
    if !f.blocks[0].params.is_empty() {
        push(DiagKind::BadEntryBlock, "entry block cannot take block arguments".into());
    }

    let mut defined: HashSet<&str> = f.params.iter().map(String::as_str).collect();
    if defined.len() != f.params.len() {
        push(DiagKind::DuplicateValue, "duplicate parameter name".into());
    }
    for b in &f.blocks {
        for name in b.params.iter().chain(b.instructions.iter().filter_map(|i| i.result.as_ref())) {
            if !defined.insert(name.as_str()) {
                push(DiagKind::DuplicateValue, format!("value %{name} defined twice"));
            }
        }
    }

    let mut returns_value = None;
    for b in &f.blocks {
        match b.instructions.last() {
            Some(last) if last.opcode.is_terminator() => {}
            _ => push(DiagKind::MissingTerminator, format!("block {} does not end in a terminator", b.label)),
        }
        // Values are block-local: parameters of the function are visible
        // everywhere, everything else flows through block arguments.
        let mut visible: HashSet<&str> = b.params.iter().map(String::as_str).collect();
        let last = b.instructions.len().saturating_sub(1);
        for (idx, inst) in b.instructions.iter().enumerate() {
            if inst.opcode.is_terminator() && idx != last {
                push(
                    DiagKind::MisplacedTerminator,
                    format!("terminator `{}` in the middle of block {}", inst.opcode, b.label),
                );
            }
            if let Some(msg) = arity_problem(inst.opcode, &inst.operands, inst.result.is_some()) {
                push(DiagKind::Arity, msg);
            }
            let label_ok = matches!(inst.opcode, Opcode::Br | Opcode::BrCond | Opcode::Invoke);
            for op in &inst.operands {
                match op {
                    Operand::Value(v) if !visible.contains(v.as_str()) => {
                        push(DiagKind::UseBeforeDef, format!("%{v} used before definition in block {}", b.label))
                    }
                    Operand::Param(i) if *i >= f.params.len() => {
                        push(DiagKind::UseBeforeDef, format!("parameter #{i} out of range"))
                    }
                    Operand::Global(g) if !resolves(g) => {
                        push(DiagKind::UndefinedSymbol, format!("reference to undefined symbol @{g}"))
                    }
                    Operand::Label(l) => {
                        if !label_ok {
                            push(DiagKind::MisplacedLabel, format!("label {l} used by `{}`", inst.opcode));
                        } else if !block_params.contains_key(l.as_str()) {
                            push(DiagKind::UndefinedLabel, format!("undefined label {l}"));
                        }
                    }
                    _ => {}
                }
            }
            match inst.opcode {
                Opcode::Br | Opcode::BrCond => {
                    for (label, args) in inst.successors() {
                        if let Some(&n) = block_params.get(label) {
                            if n != args.len() {
                                push(
                                    DiagKind::Arity,
                                    format!("branch to {label} passes {} arguments, block takes {n}", args.len()),
                                );
                            }
                        }
                        if label == f.blocks[0].label {
                            push(DiagKind::BadEntryBlock, "branch to the entry block".into());
                        }
                    }
                }
                Opcode::Invoke => {
                    for op in inst.operands.iter().rev().take(2) {
                        if let Operand::Label(l) = op {
                            if block_params.get(l.as_str()).is_some_and(|&n| n != 0) {
                                push(DiagKind::Arity, format!("invoke target {l} cannot take block arguments"));
                            }
                        }
                    }
                }
                Opcode::Ret => {
                    let has = !inst.operands.is_empty();
                    if *returns_value.get_or_insert(has) != has {
                        push(DiagKind::InconsistentReturn, "mixes `ret` with and without a value".into());
                    }
                }
                _ => {}
            }
            if let Some(r) = &inst.result {
                visible.insert(r.as_str());
            }
        }
    }
    diags
}

fn arity_problem(opcode: Opcode, ops: &[Operand], has_result: bool) -> Option<String> {
    let value_like = |o: &Operand| !matches!(o, Operand::Label(_));
    let ok = match opcode {
        Opcode::Add | Opcode::Sub | Opcode::Mul => has_result && ops.len() == 2 && ops.iter().all(value_like),
        Opcode::Const => has_result && matches!(ops, [Operand::Lit(_)]),
        Opcode::Load => has_result && ops.len() == 1 && value_like(&ops[0]),
        Opcode::Store => !has_result && ops.len() == 2 && ops.iter().all(value_like),
        Opcode::Call => !ops.is_empty() && ops.iter().all(value_like),
        Opcode::Invoke => {
            ops.len() >= 3
                && ops[..ops.len() - 2].iter().all(value_like)
                && ops[ops.len() - 2..].iter().all(|o| matches!(o, Operand::Label(_)))
        }
        Opcode::Br => !has_result && matches!(ops.first(), Some(Operand::Label(_))),
        Opcode::BrCond => {
            !has_result
                && ops.len() >= 3
                && value_like(&ops[0])
                && matches!(ops[1], Operand::Label(_))
                && ops.iter().filter(|o| matches!(o, Operand::Label(_))).count() == 2
        }
        Opcode::Ret => !has_result && ops.len() <= 1 && ops.iter().all(value_like),
    };
    (!ok).then(|| format!("operand arity mismatch for `{opcode}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, parse_module_unchecked};

    const TWIN_MODULE: &str = "module m1
extern global @g1
func @f1(%a) public {
entry:
  %0 = add %a, 1
  %1 = call @g1(%0)
  %2 = sub %a, %1
  ret %2
}
";

    #[test]
    fn twin_module_is_valid() {
        let m = parse_module(TWIN_MODULE).unwrap();
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn missing_terminator() {
        let m = parse_module_unchecked("module m\nfunc @f() { entry: %a = const 1 }").unwrap();
        let d = validate(&m);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagKind::MissingTerminator);
    }

    #[test]
    fn undefined_callee() {
        let m = parse_module_unchecked("module m\nfunc @f() { entry: %a = call @nope()\n ret %a }").unwrap();
        let d = validate(&m);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagKind::UndefinedSymbol);
    }

    #[test]
    fn values_do_not_cross_blocks() {
        let m = parse_module_unchecked("module m\nfunc @f() { entry: %a = const 1\n br next\nnext: ret %a }").unwrap();
        assert_eq!(validate(&m)[0].kind, DiagKind::UseBeforeDef);
    }

    #[test]
    fn block_argument_count() {
        let m =
            parse_module_unchecked("module m\nfunc @f() { entry: %a = const 1\n br next(%a, %a)\nnext(%x): ret %x }")
                .unwrap();
        assert_eq!(validate(&m)[0].kind, DiagKind::Arity);
    }

    #[test]
    fn mixed_returns() {
        let m = parse_module_unchecked("module m\nfunc @f(%c) { entry: brcond %c, a, b\na: ret 1\nb: ret }").unwrap();
        assert_eq!(validate(&m)[0].kind, DiagKind::InconsistentReturn);
    }

    #[test]
    fn merged_suffix_matches_origin() {
        let m = parse_module_unchecked("module m\nfunc @f.Tgm() private { entry: ret }").unwrap();
        assert_eq!(validate(&m)[0].kind, DiagKind::BadMergedName);
        let ok = parse_module_unchecked("module m\nfunc @f.Tgm() private merged_tgm { entry: ret }").unwrap();
        assert!(validate(&ok).is_empty());
    }
}
