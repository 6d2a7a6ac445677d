//! The toy IR: untyped 64-bit words, straight-line blocks with explicit
//! block arguments, and a small opcode set that covers arithmetic, calls,
//! memory access through named globals and control flow.
//!
//! Function parameters are referenced through [`Operand::Param`]; every other
//! value (instruction results and block parameters) through
//! [`Operand::Value`]. The textual form spells both as `%name`.

mod canon;
mod parse;
mod print;
mod validate;

pub use canon::{canonicalize_module, canonicalize_values};
pub use parse::{parse_module, parse_module_unchecked, ParseError};
pub(crate) use print::print_body_with;
pub use print::{escape_bytes, print_function, print_function_body, print_module};
pub use validate::{validate, validate_function, DiagKind, Diagnostic};

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Linkage {
    Public,
    Private,
}

impl Linkage {
    pub fn keyword(self) -> &'static str {
        match self {
            Linkage::Public => "public",
            Linkage::Private => "private",
        }
    }
}

/// Where a function came from. Drives eligibility for merging and outlining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    #[default]
    Original,
    MergedTgm,
    Thunk,
    Outlined,
}

impl Origin {
    pub fn keyword(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::MergedTgm => "merged_tgm",
            Origin::Thunk => "thunk",
            Origin::Outlined => "outlined",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Origin> {
        Some(match s {
            "original" => Origin::Original,
            "merged_tgm" => Origin::MergedTgm,
            "thunk" => Origin::Thunk,
            "outlined" => Origin::Outlined,
            _ => return None,
        })
    }
}

/// Suffix carried by every parameterized merge instance.
pub const MERGED_SUFFIX: &str = ".Tgm";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    Word(u64),
    Bytes(Vec<u8>),
}

impl Payload {
    /// Bytes used for content hashing.
    pub fn content_bytes(&self) -> Vec<u8> {
        match self {
            Payload::Word(w) => w.to_le_bytes().to_vec(),
            Payload::Bytes(b) => b.clone(),
        }
    }

    /// Initial value of the memory cell backing this global.
    pub fn initial_word(&self) -> u64 {
        match self {
            Payload::Word(w) => *w,
            Payload::Bytes(b) => {
                let mut buf = [0u8; 8];
                let n = b.len().min(8);
                buf[..n].copy_from_slice(&b[..n]);
                u64::from_le_bytes(buf)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: String,
    pub linkage: Linkage,
    /// `None` exactly when the global is an extern declaration.
    pub payload: Option<Payload>,
}

impl GlobalDef {
    pub fn external(name: impl Into<String>) -> Self {
        GlobalDef { name: name.into(), linkage: Linkage::Public, payload: None }
    }

    pub fn word(name: impl Into<String>, linkage: Linkage, value: u64) -> Self {
        GlobalDef { name: name.into(), linkage, payload: Some(Payload::Word(value)) }
    }

    pub fn bytes(name: impl Into<String>, linkage: Linkage, value: impl Into<Vec<u8>>) -> Self {
        GlobalDef { name: name.into(), linkage, payload: Some(Payload::Bytes(value.into())) }
    }

    pub fn is_extern(&self) -> bool {
        self.payload.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Opcode {
    Add,
    Sub,
    Mul,
    Const,
    Call,
    Invoke,
    Load,
    Store,
    Br,
    BrCond,
    Ret,
}

impl Opcode {
    pub const ALL: [Opcode; 11] = [
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Const,
        Opcode::Call,
        Opcode::Invoke,
        Opcode::Load,
        Opcode::Store,
        Opcode::Br,
        Opcode::BrCond,
        Opcode::Ret,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Const => "const",
            Opcode::Call => "call",
            Opcode::Invoke => "invoke",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Br => "br",
            Opcode::BrCond => "brcond",
            Opcode::Ret => "ret",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Br | Opcode::BrCond | Opcode::Ret)
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Opcode::Add | Opcode::Sub | Opcode::Mul)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    Lit(u64),
    Global(String),
    Value(String),
    Label(String),
    Param(usize),
}

impl Operand {
    pub fn global(name: impl Into<String>) -> Self {
        Operand::Global(name.into())
    }

    pub fn value(name: impl Into<String>) -> Self {
        Operand::Value(name.into())
    }

    pub fn label(name: impl Into<String>) -> Self {
        Operand::Label(name.into())
    }

    /// Literals and global references; the only operands that can become
    /// merge parameters.
    pub fn is_constant(&self) -> bool {
        matches!(self, Operand::Lit(_) | Operand::Global(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub result: Option<String>,
    pub opcode: Opcode,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(result: Option<&str>, opcode: Opcode, operands: Vec<Operand>) -> Self {
        Instruction { result: result.map(str::to_owned), opcode, operands }
    }

    /// Splits a `br`/`brcond` operand list into its successor edges as
    /// `(label, args)` pairs.
    pub fn successors(&self) -> Vec<(&str, &[Operand])> {
        let start = match self.opcode {
            Opcode::Br => 0,
            Opcode::BrCond => 1,
            _ => return Vec::new(),
        };
        let ops = &self.operands[start.min(self.operands.len())..];
        let label_pos: Vec<usize> =
            ops.iter().enumerate().filter(|(_, o)| matches!(o, Operand::Label(_))).map(|(i, _)| i).collect();
        label_pos
            .iter()
            .enumerate()
            .map(|(k, &pos)| {
                let end = label_pos.get(k + 1).copied().unwrap_or(ops.len());
                let Operand::Label(name) = &ops[pos] else { unreachable!() };
                (name.as_str(), &ops[pos + 1..end])
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub label: String,
    pub params: Vec<String>,
    pub instructions: Vec<Instruction>,
}

impl Block {
    pub fn new(label: impl Into<String>) -> Self {
        Block { label: label.into(), params: Vec::new(), instructions: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub blocks: Vec<Block>,
    pub linkage: Linkage,
    pub origin: Origin,
}

impl Function {
    pub fn new(name: impl Into<String>, params: Vec<String>, linkage: Linkage) -> Self {
        Function { name: name.into(), params, blocks: Vec::new(), linkage, origin: Origin::Original }
    }

    pub fn inst_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    /// Instructions in program order (blocks in order, then instructions).
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }

    /// Mutable access to the `index`-th instruction in program order.
    pub fn instruction_mut(&mut self, mut index: usize) -> Option<&mut Instruction> {
        for block in &mut self.blocks {
            if index < block.instructions.len() {
                return block.instructions.get_mut(index);
            }
            index -= block.instructions.len();
        }
        None
    }

    pub fn instruction(&self, index: usize) -> Option<&Instruction> {
        self.instructions().nth(index)
    }

    /// True when no `ret` carries a value.
    pub fn is_void(&self) -> bool {
        self.instructions().filter(|i| i.opcode == Opcode::Ret).all(|i| i.operands.is_empty())
    }

    pub fn is_merged(&self) -> bool {
        self.origin == Origin::MergedTgm
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Module {
    pub name: String,
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn new(name: impl Into<String>) -> Self {
        Module { name: name.into(), globals: Vec::new(), functions: Vec::new() }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalDef> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Adds an extern declaration unless the name is already known here.
    pub fn declare_extern(&mut self, name: &str) {
        if self.global(name).is_none() && self.function(name).is_none() {
            self.globals.push(GlobalDef::external(name));
        }
    }

    /// Resolves a global-reference name within this module.
    pub fn symbol(&self, name: &str) -> Option<Symbol<'_>> {
        if let Some(f) = self.function(name) {
            return Some(Symbol::Function(f));
        }
        self.global(name).map(|g| if g.is_extern() { Symbol::Extern(&g.name) } else { Symbol::Data(g) })
    }
}

/// What a global reference resolves to inside one module.
#[derive(Clone, Copy, Debug)]
pub enum Symbol<'a> {
    Function(&'a Function),
    Data(&'a GlobalDef),
    Extern(&'a str),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub modules: Vec<Module>,
}

impl Program {
    pub fn new(modules: Vec<Module>) -> Self {
        Program { modules }
    }

    pub fn module(&self, name: &str) -> Option<&Module> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut Module> {
        self.modules.iter_mut().find(|m| m.name == name)
    }

    pub fn function_count(&self) -> usize {
        self.modules.iter().map(|m| m.functions.len()).sum()
    }

    /// Modules sorted by name; every pipeline stage works on this order.
    pub fn sorted(&self) -> Program {
        let mut modules = self.modules.clone();
        modules.sort_by(|a, b| a.name.cmp(&b.name));
        Program { modules }
    }
}
