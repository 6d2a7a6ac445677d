use std::fmt::Write;

use super::{Block, Function, GlobalDef, Instruction, Module, Opcode, Operand, Origin, Payload};

/// Canonical text of a module. Byte-deterministic; parses back to an equal
/// module.
pub fn print_module(m: &Module) -> String {
    let mut out = format!("module {}\n", m.name);
    for g in &m.globals {
        print_global(&mut out, g);
    }
    for f in &m.functions {
        out.push('\n');
        out.push_str(&print_function(f));
    }
    out
}

fn print_global(out: &mut String, g: &GlobalDef) {
    match &g.payload {
        None => writeln!(out, "extern global @{}", g.name).unwrap(),
        Some(Payload::Word(w)) => writeln!(out, "global @{} = {} {}", g.name, w, g.linkage.keyword()).unwrap(),
        Some(Payload::Bytes(b)) => {
            writeln!(out, "global @{} = \"{}\" {}", g.name, escape_bytes(b), g.linkage.keyword()).unwrap()
        }
    }
}

/// Escapes a byte string for the quoted-literal form.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => write!(s, "\\x{b:02x}").unwrap(),
        }
    }
    s
}

pub fn print_function(f: &Function) -> String {
    let mut out = format!("func @{}", f.name);
    write_params(&mut out, &f.params);
    write!(out, " {}", f.linkage.keyword()).unwrap();
    if f.origin != Origin::Original {
        write!(out, " {}", f.origin.keyword()).unwrap();
    }
    out.push_str(" {\n");
    write_blocks(&mut out, f, &mut |_| None);
    out.push_str("}\n");
    out
}

/// The function without its name, linkage or origin: parameter list plus
/// blocks. Two functions with equal bodies behave identically.
pub fn print_function_body(f: &Function) -> String {
    print_body_with(f, &mut |_| None)
}

/// Like [`print_function_body`], but `hook` may override the spelling of any
/// operand (used to abstract symbol references).
pub(crate) fn print_body_with(f: &Function, hook: &mut dyn FnMut(&Operand) -> Option<String>) -> String {
    let mut out = String::new();
    write_params(&mut out, &f.params);
    out.push_str(" {\n");
    write_blocks(&mut out, f, hook);
    out.push_str("}\n");
    out
}

fn write_params(out: &mut String, params: &[String]) {
    out.push('(');
    for (i, p) in params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, "%{p}").unwrap();
    }
    out.push(')');
}

fn write_blocks(out: &mut String, f: &Function, hook: &mut dyn FnMut(&Operand) -> Option<String>) {
    for block in &f.blocks {
        write_block(out, f, block, hook);
    }
}

fn write_block(out: &mut String, f: &Function, block: &Block, hook: &mut dyn FnMut(&Operand) -> Option<String>) {
    out.push_str(&block.label);
    if !block.params.is_empty() {
        write_params(out, &block.params);
    }
    out.push_str(":\n");
    for inst in &block.instructions {
        out.push_str("  ");
        write_instruction(out, f, inst, hook);
        out.push('\n');
    }
}

fn operand_text(f: &Function, op: &Operand, hook: &mut dyn FnMut(&Operand) -> Option<String>) -> String {
    if let Some(s) = hook(op) {
        return s;
    }
    match op {
        Operand::Lit(v) => v.to_string(),
        Operand::Global(n) => format!("@{n}"),
        Operand::Value(n) => format!("%{n}"),
        Operand::Label(n) => n.clone(),
        Operand::Param(i) => match f.params.get(*i) {
            Some(p) => format!("%{p}"),
            None => format!("%<param{i}>"),
        },
    }
}

fn write_list(out: &mut String, f: &Function, ops: &[Operand], hook: &mut dyn FnMut(&Operand) -> Option<String>) {
    out.push('(');
    for (i, op) in ops.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&operand_text(f, op, hook));
    }
    out.push(')');
}

fn write_instruction(
    out: &mut String,
    f: &Function,
    inst: &Instruction,
    hook: &mut dyn FnMut(&Operand) -> Option<String>,
) {
    if let Some(r) = &inst.result {
        write!(out, "%{r} = ").unwrap();
    }
    out.push_str(inst.opcode.mnemonic());
    let ops = &inst.operands;
    match inst.opcode {
        Opcode::Call | Opcode::Invoke => {
            let Some(callee) = ops.first() else { return };
            out.push(' ');
            out.push_str(&operand_text(f, callee, hook));
            let args_end = if inst.opcode == Opcode::Invoke { ops.len().saturating_sub(2).max(1) } else { ops.len() };
            write_list(out, f, &ops[1..args_end], hook);
            if inst.opcode == Opcode::Invoke && ops.len() >= 3 {
                write!(
                    out,
                    " to {} unwind {}",
                    operand_text(f, &ops[ops.len() - 2], hook),
                    operand_text(f, &ops[ops.len() - 1], hook)
                )
                .unwrap();
            }
        }
        Opcode::Br | Opcode::BrCond => {
            if inst.opcode == Opcode::BrCond {
                if let Some(c) = ops.first() {
                    write!(out, " {},", operand_text(f, c, hook)).unwrap();
                }
            }
            for (k, (label, args)) in inst.successors().into_iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, " {}", operand_text(f, &Operand::Label(label.to_owned()), hook)).unwrap();
                write_list(out, f, args, hook);
            }
        }
        _ => {
            for (i, op) in ops.iter().enumerate() {
                out.push_str(if i == 0 { " " } else { ", " });
                out.push_str(&operand_text(f, op, hook));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn round_trip_is_byte_stable() {
        let text = "module m\nextern global @g\nglobal @s = \"hi\\n\\\"x\" private\nfunc @f(%a)   {\n e :  %x = call @g(%a)\n  ret %x }";
        let m = parse_module(text).unwrap();
        let once = print_module(&m);
        let again = parse_module(&once).unwrap();
        assert_eq!(again, m);
        assert_eq!(print_module(&again), once);
        assert!(once.contains("global @s = \"hi\\x0a\\\"x\" private"));
    }

    #[test]
    fn whitespace_does_not_change_print() {
        let a = parse_module("module m\nfunc @f(%a) { entry: %b = add %a, 1; ret %b }").unwrap();
        let b = parse_module("module m\nfunc @f( %a )\n{\nentry:\n\n   %b = add %a,1\n ret %b\n}\n").unwrap();
        assert_eq!(print_function(&a.functions[0]), print_function(&b.functions[0]));
    }
}
