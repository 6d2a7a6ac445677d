//! Reference interpreter. Every transformation in the crate is checked
//! against it: a program and its transformed image must produce equal
//! traces.
//!
//! Globals are memory cells addressed by per-symbol tokens. Calling a
//! symbol with no definition is an environment call: its return value is
//! synthesized from the symbol name and arguments, and the call is recorded.

use std::collections::{BTreeMap, HashMap};

use crate::hash::{fnv1a, stable_mix};
use crate::ir::{Block, Function, Instruction, Module, Opcode, Operand};
use crate::link::{link, LinkError, LinkedImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_steps: u64,
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_steps: 1_000_000, max_depth: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Store { global: String, value: u64 },
    ExternCall { symbol: String, args: Vec<u64>, ret: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecResult {
    pub returned: Option<u64>,
    pub trace: Vec<Event>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("entry @{0} is not a function")]
    UnknownEntry(String),
    #[error("@{function} takes {expected} arguments, got {got}")]
    Arity { function: String, expected: usize, got: usize },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("call depth limit of {0} exceeded")]
    DepthLimit(usize),
    #[error("word {0:#x} is not callable")]
    NotCallable(u64),
    #[error("word {0:#x} is not a data address")]
    BadAddress(u64),
    #[error("malformed IR: {0}")]
    Malformed(String),
    #[error(transparent)]
    Link(#[from] LinkError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Target {
    Function(String),
    Data(String),
    Extern(String),
}

/// Address tokens for every symbol of an image, derived from names so they
/// do not depend on which other symbols exist.
struct Symbols {
    by_name: HashMap<String, u64>,
    by_token: HashMap<u64, Target>,
}

impl Symbols {
    fn new(image: &LinkedImage) -> Self {
        let mut s = Symbols { by_name: HashMap::new(), by_token: HashMap::new() };
        for name in image.globals.keys() {
            s.assign(0xD, Target::Data(name.clone()), name);
        }
        for name in image.functions.keys() {
            s.assign(0xF, Target::Function(name.clone()), name);
        }
        for name in &image.externs {
            s.assign(0xE, Target::Extern(name.clone()), name);
        }
        for (alias, rep) in &image.aliases {
            if let Some(&t) = s.by_name.get(rep) {
                s.by_name.insert(alias.clone(), t);
            }
        }
        s
    }

    fn assign(&mut self, kind: u64, target: Target, name: &str) {
        let mut token = (kind << 60) | (fnv1a(name.as_bytes()) >> 4);
        while self.by_token.contains_key(&token) {
            token = (kind << 60) | ((token + 1) & ((1 << 60) - 1));
        }
        self.by_name.insert(name.to_string(), token);
        self.by_token.insert(token, target);
    }
}

/// Return value synthesized for a call to an undefined symbol.
pub fn extern_return(symbol: &str, args: &[u64]) -> u64 {
    args.iter().fold(fnv1a(symbol.as_bytes()), |h, &a| stable_mix(h, a))
}

struct Machine<'i> {
    image: &'i LinkedImage,
    symbols: Symbols,
    cells: BTreeMap<String, u64>,
    trace: Vec<Event>,
    steps: u64,
    limits: Limits,
}

/// Runs `entry` on a linked image.
pub fn run(image: &LinkedImage, entry: &str, args: &[u64], limits: Limits) -> Result<ExecResult, ExecError> {
    let f = image.function(entry).ok_or_else(|| ExecError::UnknownEntry(entry.to_string()))?;
    let mut machine = Machine {
        image,
        symbols: Symbols::new(image),
        cells: image
            .globals
            .iter()
            .map(|(n, g)| (n.clone(), g.payload.as_ref().map_or(0, |p| p.initial_word())))
            .collect(),
        trace: Vec::new(),
        steps: 0,
        limits,
    };
    let returned = machine.call(f, args, 0)?;
    Ok(ExecResult { returned, trace: machine.trace, steps: machine.steps })
}

/// Links `modules` (without folding) and runs `entry`.
pub fn run_program(modules: &[Module], entry: &str, args: &[u64], limits: Limits) -> Result<ExecResult, ExecError> {
    run(&link(modules)?, entry, args, limits)
}

impl<'i> Machine<'i> {
    fn call(&mut self, f: &'i Function, args: &[u64], depth: usize) -> Result<Option<u64>, ExecError> {
        if depth >= self.limits.max_depth {
            return Err(ExecError::DepthLimit(self.limits.max_depth));
        }
        if f.params.len() != args.len() {
            return Err(ExecError::Arity { function: f.name.clone(), expected: f.params.len(), got: args.len() });
        }
        let mut block: &Block =
            f.blocks.first().ok_or_else(|| ExecError::Malformed(format!("@{} has no blocks", f.name)))?;
        let mut values: HashMap<&str, u64> = HashMap::new();
        loop {
            let mut next: Option<(&str, Vec<u64>)> = None;
            for inst in &block.instructions {
                self.steps += 1;
                if self.steps > self.limits.max_steps {
                    return Err(ExecError::StepLimit(self.limits.max_steps));
                }
                let eval = |op: &Operand, values: &HashMap<&str, u64>| self.operand(op, args, values);
                let result = match inst.opcode {
                    Opcode::Add | Opcode::Sub | Opcode::Mul => {
                        let a = eval(&inst.operands[0], &values)?;
                        let b = eval(&inst.operands[1], &values)?;
                        Some(match inst.opcode {
                            Opcode::Add => a.wrapping_add(b),
                            Opcode::Sub => a.wrapping_sub(b),
                            _ => a.wrapping_mul(b),
                        })
                    }
                    Opcode::Const => Some(eval(&inst.operands[0], &values)?),
                    Opcode::Load => {
                        let addr = eval(&inst.operands[0], &values)?;
                        let cell = self.data_cell(addr)?;
                        Some(self.cells[&cell])
                    }
                    Opcode::Store => {
                        let value = eval(&inst.operands[0], &values)?;
                        let addr = eval(&inst.operands[1], &values)?;
                        let cell = self.data_cell(addr)?;
                        self.cells.insert(cell.clone(), value);
                        self.trace.push(Event::Store { global: cell, value });
                        None
                    }
                    Opcode::Call | Opcode::Invoke => {
                        let (callee, call_args) = self.call_operands(inst, args, &values)?;
                        // Exceptions are not modeled: invoke returns like a call
                        // and execution continues with the next instruction.
                        let ret = self.dispatch(callee, &call_args, depth)?;
                        Some(ret.unwrap_or(0))
                    }
                    Opcode::Br | Opcode::BrCond => {
                        let succ = inst.successors();
                        let taken = if inst.opcode == Opcode::BrCond {
                            let cond = eval(&inst.operands[0], &values)?;
                            let index = if cond != 0 { 0 } else { 1 };
                            succ.get(index).copied()
                        } else {
                            succ.first().copied()
                        };
                        let (label, ops) = taken.ok_or_else(|| ExecError::Malformed("branch without target".into()))?;
                        let words = ops.iter().map(|o| eval(o, &values)).collect::<Result<Vec<_>, _>>()?;
                        next = Some((label, words));
                        None
                    }
                    Opcode::Ret => {
                        return match inst.operands.first() {
                            Some(op) => Ok(Some(eval(op, &values)?)),
                            None => Ok(None),
                        };
                    }
                };
                if let (Some(r), Some(v)) = (&inst.result, result) {
                    values.insert(r.as_str(), v);
                }
                if next.is_some() {
                    break;
                }
            }
            let (label, words) =
                next.ok_or_else(|| ExecError::Malformed(format!("block {} falls through", block.label)))?;
            block = f
                .blocks
                .iter()
                .find(|b| b.label == label)
                .ok_or_else(|| ExecError::Malformed(format!("no block {label}")))?;
            if block.params.len() != words.len() {
                return Err(ExecError::Malformed(format!("block {label} argument count")));
            }
            // Values are block-local: entering a block starts a fresh scope.
            values = block.params.iter().map(String::as_str).zip(words).collect();
        }
    }

    fn call_operands(
        &self,
        inst: &Instruction,
        args: &[u64],
        values: &HashMap<&str, u64>,
    ) -> Result<(u64, Vec<u64>), ExecError> {
        let callee = inst.operands.first().ok_or_else(|| ExecError::Malformed("call without callee".into()))?;
        let callee = self.operand(callee, args, values)?;
        let call_args = inst.operands[1..]
            .iter()
            .take_while(|o| !matches!(o, Operand::Label(_)))
            .map(|o| self.operand(o, args, values))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((callee, call_args))
    }

    fn dispatch(&mut self, callee: u64, args: &[u64], depth: usize) -> Result<Option<u64>, ExecError> {
        match self.symbols.by_token.get(&callee).cloned() {
            Some(Target::Function(name)) => {
                let image = self.image;
                self.call(&image.functions[&name], args, depth + 1)
            }
            Some(Target::Extern(name)) => {
                let ret = extern_return(&name, args);
                self.trace.push(Event::ExternCall { symbol: name, args: args.to_vec(), ret });
                Ok(Some(ret))
            }
            _ => Err(ExecError::NotCallable(callee)),
        }
    }

    fn data_cell(&self, addr: u64) -> Result<String, ExecError> {
        match self.symbols.by_token.get(&addr) {
            Some(Target::Data(name)) => Ok(name.clone()),
            _ => Err(ExecError::BadAddress(addr)),
        }
    }

    fn operand(&self, op: &Operand, args: &[u64], values: &HashMap<&str, u64>) -> Result<u64, ExecError> {
        match op {
            Operand::Lit(n) => Ok(*n),
            Operand::Param(i) => {
                args.get(*i).copied().ok_or_else(|| ExecError::Malformed(format!("parameter {i} out of range")))
            }
            Operand::Value(v) => {
                values.get(v.as_str()).copied().ok_or_else(|| ExecError::Malformed(format!("%{v} is not defined here")))
            }
            Operand::Global(g) => self
                .symbols
                .by_name
                .get(g)
                .copied()
                .ok_or_else(|| ExecError::Malformed(format!("@{g} is not in the image"))),
            Operand::Label(l) => Err(ExecError::Malformed(format!("label {l} used as a value"))),
        }
    }
}

/// Equal return values and element-wise equal traces. Extern-call symbols
/// are compared after mapping folded names through `aliases`.
pub fn trace_equal(a: &ExecResult, b: &ExecResult, aliases: &BTreeMap<String, String>) -> bool {
    let canon = |s: &str| aliases.get(s).cloned().unwrap_or_else(|| s.to_string());
    a.returned == b.returned
        && a.trace.len() == b.trace.len()
        && a.trace.iter().zip(&b.trace).all(|(x, y)| match (x, y) {
            (
                Event::ExternCall { symbol: s1, args: a1, ret: r1 },
                Event::ExternCall { symbol: s2, args: a2, ret: r2 },
            ) => canon(s1) == canon(s2) && a1 == a2 && r1 == r2,
            _ => x == y,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn run_text(texts: &[&str], entry: &str, args: &[u64]) -> Result<ExecResult, ExecError> {
        let ms: Vec<Module> = texts.iter().map(|t| parse_module(t).unwrap()).collect();
        run_program(&ms, entry, args, Limits::default())
    }

    #[test]
    fn wrapping_twin_body() {
        let r = run_text(
            &["module m1\nfunc @g1(%v) { e: %r = add %v, 10\n ret %r }\n\
               func @f1(%a) { e: %x = add %a, 1\n %y = call @g1(%x)\n %z = sub %a, %y\n ret %z }"],
            "f1",
            &[5],
        )
        .unwrap();
        assert_eq!(r.returned, Some(0xFFFF_FFFF_FFFF_FFF5));
        assert!(r.trace.is_empty());
    }

    #[test]
    fn ret_zero() {
        let r = run_text(&["module m\nfunc @f() { e: ret 0 }"], "f", &[]).unwrap();
        assert_eq!(r.returned, Some(0));
        assert!(r.trace.is_empty());
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn runaway_recursion_hits_depth_limit() {
        let err = run_text(
            &["module m\nfunc @a(%x) { e: %r = call @b(%x)\n ret %r }\nfunc @b(%x) { e: %r = call @a(%x)\n ret %r }"],
            "a",
            &[1],
        );
        assert_eq!(err, Err(ExecError::DepthLimit(512)));
    }

    #[test]
    fn memory_branches_and_extern_calls() {
        let text = "module m\nextern global @ext\nglobal @cell = 3\nglobal @s = \"ab\" private\n\
            func @f(%a) {\n e: %v = load @cell\n brcond %a, yes(%v), no()\n\
            yes(%w): %x = load @s\n %y = add %w, %x\n store %y, @cell\n %r = call @ext(%y, 2)\n ret %r\n\
            no(): store 9, @cell\n ret 0\n}";
        let r = run_text(&[text], "f", &[1]).unwrap();
        let y = 3 + u64::from_le_bytes([b'a', b'b', 0, 0, 0, 0, 0, 0]);
        let ret = extern_return("ext", &[y, 2]);
        assert_eq!(r.returned, Some(ret));
        assert_eq!(
            r.trace,
            vec![
                Event::Store { global: "cell".into(), value: y },
                Event::ExternCall { symbol: "ext".into(), args: vec![y, 2], ret }
            ]
        );
        let r = run_text(&[text], "f", &[0]).unwrap();
        assert_eq!(r.returned, Some(0));
        assert_eq!(r.trace, vec![Event::Store { global: "cell".into(), value: 9 }]);
    }

    #[test]
    fn indirect_calls_and_faults() {
        let text = "module m\nglobal @d = 0\nfunc @id(%x) { e: ret %x }\n\
            func @via(%f, %x) { e: %r = call %f(%x)\n ret %r }\n\
            func @pass(%x) { e: %r = call @via(@id, %x)\n ret %r }\n\
            func @bad(%x) { e: %r = call @via(@d, %x)\n ret %r }\n\
            func @poke(%x) { e: store 1, %x\n ret }\n\
            func @void() { e: ret }\n\
            func @usevoid() { e: %r = call @void()\n ret %r }";
        assert_eq!(run_text(&[text], "pass", &[42]).unwrap().returned, Some(42));
        assert!(matches!(run_text(&[text], "bad", &[1]), Err(ExecError::NotCallable(_))));
        assert!(matches!(run_text(&[text], "poke", &[7]), Err(ExecError::BadAddress(7))));
        assert_eq!(run_text(&[text], "usevoid", &[]).unwrap().returned, Some(0));
        assert!(matches!(run_text(&[text], "pass", &[]), Err(ExecError::Arity { .. })));
        assert!(matches!(run_text(&[text], "nope", &[]), Err(ExecError::UnknownEntry(_))));
    }

    #[test]
    fn invoke_returns_like_call() {
        let text = "module m\nextern global @ext\nfunc @f() { e: %r = invoke @ext(1) to ok unwind bad\n ret %r\n ok(): ret 1\n bad(): ret 2 }";
        assert_eq!(run_text(&[text], "f", &[]).unwrap().returned, Some(extern_return("ext", &[1])));
    }

    #[test]
    fn step_limit() {
        let ms = [parse_module("module m\nfunc @f() { e: %a = add 1, 1\n %b = add %a, 1\n ret %b }").unwrap()];
        let limits = Limits { max_steps: 2, ..Limits::default() };
        assert_eq!(run_program(&ms, "f", &[], limits), Err(ExecError::StepLimit(2)));
    }

    #[test]
    fn trace_comparison() {
        let a = ExecResult {
            returned: Some(1),
            trace: vec![Event::ExternCall { symbol: "outlined.m2.0".into(), args: vec![], ret: 3 }],
            steps: 4,
        };
        let mut b = a.clone();
        b.steps = 9;
        assert!(trace_equal(&a, &b, &BTreeMap::new()));
        b.trace = vec![Event::ExternCall { symbol: "outlined.m1.0".into(), args: vec![], ret: 3 }];
        assert!(!trace_equal(&a, &b, &BTreeMap::new()));
        let aliases = BTreeMap::from([("outlined.m2.0".to_string(), "outlined.m1.0".to_string())]);
        assert!(trace_equal(&a, &b, &aliases));
        let mut c = a.clone();
        c.trace = vec![Event::Store { global: "g".into(), value: 1 }];
        let mut d = c.clone();
        d.trace = vec![Event::Store { global: "g".into(), value: 2 }];
        assert!(!trace_equal(&c, &d, &BTreeMap::new()));
    }
}
