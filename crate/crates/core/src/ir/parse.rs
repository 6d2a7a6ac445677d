use std::collections::HashMap;
use std::fmt;

use super::validate::{validate, DiagKind, Diagnostic};
use super::{Block, Function, GlobalDef, Instruction, Linkage, Module, Opcode, Operand, Origin, Payload};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("invalid module: {}", join_diags(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join_diags(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl ParseError {
    /// True when validation reported at least one diagnostic of `kind`.
    pub fn has(&self, kind: DiagKind) -> bool {
        matches!(self, ParseError::Invalid(d) if d.iter().any(|d| d.kind == kind))
    }
}

/// Parses and validates one module.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let module = parse_module_unchecked(text)?;
    let diags = validate(&module);
    if diags.is_empty() {
        Ok(module)
    } else {
        Err(ParseError::Invalid(diags))
    }
}

/// Syntax-only parse; the result may violate module invariants.
pub fn parse_module_unchecked(text: &str) -> Result<Module, ParseError> {
    let tokens = lex(text)?;
    Parser { tokens, pos: 0 }.module()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Word(String),
    Local(String),
    Global(String),
    Num(u64),
    Str(Vec<u8>),
    Punct(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "`{w}`"),
            Tok::Local(w) => write!(f, "`%{w}`"),
            Tok::Global(w) => write!(f, "`@{w}`"),
            Tok::Num(n) => write!(f, "`{n}`"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::Punct(c) => write!(f, "`{c}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$')
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, msg: String| ParseError::Syntax { line, col, msg };

    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        // Newlines and `;` both separate statements; the grammar is
        // self-delimiting so neither is significant.
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() || c == ';' {
            i += 1;
            col += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let take_ident = |start: usize| {
            let mut j = start;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            (chars[start..j].iter().collect::<String>(), j)
        };
        match c {
            '%' | '@' => {
                let (name, j) = take_ident(i + 1);
                if name.is_empty() {
                    return Err(err(tl, tc, format!("expected identifier after `{c}`")));
                }
                col += j - i;
                i = j;
                out.push(Spanned {
                    tok: if c == '%' { Tok::Local(name) } else { Tok::Global(name) },
                    line: tl,
                    col: tc,
                });
            }
            '0'..='9' => {
                let (word, j) = take_ident(i);
                let value = if let Some(hex) = word.strip_prefix("0x").or_else(|| word.strip_prefix("0X")) {
                    u64::from_str_radix(hex, 16)
                } else {
                    word.parse::<u64>()
                }
                .map_err(|_| err(tl, tc, format!("invalid integer literal `{word}`")))?;
                col += j - i;
                i = j;
                out.push(Spanned { tok: Tok::Num(value), line: tl, col: tc });
            }
            '"' => {
                let mut bytes = Vec::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None | Some('\n') => return Err(err(tl, tc, "unterminated string literal".into())),
                        Some('"') => break,
                        Some('\\') => {
                            match chars.get(j + 1) {
                                Some('\\') => bytes.push(b'\\'),
                                Some('"') => bytes.push(b'"'),
                                Some('n') => bytes.push(b'\n'),
                                Some('t') => bytes.push(b'\t'),
                                Some('x') => {
                                    let hex: String =
                                        chars.get(j + 2..j + 4).map(|s| s.iter().collect()).unwrap_or_default();
                                    let b = u8::from_str_radix(&hex, 16)
                                        .map_err(|_| err(line, col + (j - i), "invalid \\x escape".into()))?;
                                    bytes.push(b);
                                    j += 2;
                                }
                                _ => return Err(err(line, col + (j - i), "invalid escape sequence".into())),
                            }
                            j += 2;
                        }
                        Some(&ch) => {
                            let mut buf = [0u8; 4];
                            bytes.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                            j += 1;
                        }
                    }
                }
                col += j + 1 - i;
                i = j + 1;
                out.push(Spanned { tok: Tok::Str(bytes), line: tl, col: tc });
            }
            '(' | ')' | '{' | '}' | ',' | '=' | ':' => {
                i += 1;
                col += 1;
                out.push(Spanned { tok: Tok::Punct(c), line: tl, col: tc });
            }
            _ if is_ident_char(c) => {
                let (word, j) = take_ident(i);
                col += j - i;
                i = j;
                out.push(Spanned { tok: Tok::Word(word), line: tl, col: tc });
            }
            _ => return Err(err(tl, tc, format!("unexpected character `{c}`"))),
        }
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

const STATEMENT_KEYWORDS: [&str; 6] = ["call", "invoke", "store", "br", "brcond", "ret"];

/// Operand as written, before `%name` is split into parameter and value
/// references.
enum RawOperand {
    Local(String),
    Global(String),
    Lit(u64),
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, off: usize) -> &Tok {
        let idx = (self.pos + off).min(self.tokens.len() - 1);
        &self.tokens[idx].tok
    }

    fn bump(&mut self) -> Tok {
        let tok = self.tokens[self.pos].tok.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        tok
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let s = &self.tokens[self.pos];
        Err(ParseError::Syntax { line: s.line, col: s.col, msg: msg.into() })
    }

    fn unexpected<T>(&self, what: &str) -> Result<T, ParseError> {
        self.error(format!("expected {what}, found {}", self.peek()))
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            Ok(())
        } else {
            self.unexpected(&format!("`{c}`"))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Word(w) if w == kw => {
                self.bump();
                Ok(())
            }
            _ => self.unexpected(&format!("`{kw}`")),
        }
    }

    fn word(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Word(w) => {
                self.bump();
                Ok(w)
            }
            _ => self.unexpected(what),
        }
    }

    fn global_name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Global(w) => {
                self.bump();
                Ok(w)
            }
            _ => self.unexpected("global name"),
        }
    }

    fn local_name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Local(w) => {
                self.bump();
                Ok(w)
            }
            _ => self.unexpected("value name"),
        }
    }

    fn module(mut self) -> Result<Module, ParseError> {
        self.expect_keyword("module")?;
        let mut module = Module::new(self.word("module name")?);
        loop {
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Word(w) if w == "extern" => {
                    self.bump();
                    self.expect_keyword("global")?;
                    let name = self.global_name()?;
                    module.globals.push(GlobalDef::external(name));
                }
                Tok::Word(w) if w == "global" => {
                    self.bump();
                    let name = self.global_name()?;
                    self.expect_punct('=')?;
                    let payload = match self.bump() {
                        Tok::Num(n) => Payload::Word(n),
                        Tok::Str(s) => Payload::Bytes(s),
                        _ => {
                            self.pos -= 1;
                            return self.unexpected("integer or string initializer");
                        }
                    };
                    let linkage = self.linkage().unwrap_or(Linkage::Public);
                    module.globals.push(GlobalDef { name, linkage, payload: Some(payload) });
                }
                Tok::Word(w) if w == "func" => {
                    self.bump();
                    let f = self.function()?;
                    module.functions.push(f);
                }
                _ => return self.unexpected("`extern`, `global` or `func`"),
            }
        }
        Ok(module)
    }

    fn linkage(&mut self) -> Option<Linkage> {
        let linkage = match self.peek() {
            Tok::Word(w) if w == "public" => Linkage::Public,
            Tok::Word(w) if w == "private" => Linkage::Private,
            _ => return None,
        };
        self.bump();
        Some(linkage)
    }

    fn local_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect_punct('(')?;
        let mut names = Vec::new();
        if !self.eat_punct(')') {
            loop {
                names.push(self.local_name()?);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        Ok(names)
    }

    fn function(&mut self) -> Result<Function, ParseError> {
        let name = self.global_name()?;
        let params = self.local_list()?;
        let linkage = self.linkage().unwrap_or(Linkage::Public);
        let mut origin = Origin::Original;
        if let Tok::Word(w) = self.peek() {
            match Origin::from_keyword(w) {
                Some(o) => {
                    origin = o;
                    self.bump();
                }
                None => return self.unexpected("`{` or origin tag"),
            }
        }
        self.expect_punct('{')?;
        let param_index: HashMap<String, usize> = params.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut f = Function { name, params, blocks: Vec::new(), linkage, origin };

        while !self.eat_punct('}') {
            match self.peek().clone() {
                Tok::Word(w) if !STATEMENT_KEYWORDS.contains(&w.as_str()) => {
                    self.bump();
                    let mut block = Block::new(w);
                    if *self.peek() == Tok::Punct('(') {
                        block.params = self.local_list()?;
                    }
                    self.expect_punct(':')?;
                    f.blocks.push(block);
                }
                Tok::Eof => return self.unexpected("`}`"),
                _ => {
                    let inst = self.instruction(&param_index)?;
                    match f.blocks.last_mut() {
                        Some(b) => b.instructions.push(inst),
                        None => return self.error("instruction outside of a block"),
                    }
                }
            }
        }
        Ok(f)
    }

    fn raw_operand(&mut self) -> Result<RawOperand, ParseError> {
        match self.peek().clone() {
            Tok::Local(n) => {
                self.bump();
                Ok(RawOperand::Local(n))
            }
            Tok::Global(n) => {
                self.bump();
                Ok(RawOperand::Global(n))
            }
            Tok::Num(v) => {
                self.bump();
                Ok(RawOperand::Lit(v))
            }
            _ => self.unexpected("operand"),
        }
    }

    fn operand(&mut self, params: &HashMap<String, usize>) -> Result<Operand, ParseError> {
        Ok(match self.raw_operand()? {
            RawOperand::Local(n) => match params.get(&n) {
                Some(&i) => Operand::Param(i),
                None => Operand::Value(n),
            },
            RawOperand::Global(n) => Operand::Global(n),
            RawOperand::Lit(v) => Operand::Lit(v),
        })
    }

    fn operand_list(&mut self, params: &HashMap<String, usize>) -> Result<Vec<Operand>, ParseError> {
        let mut ops = Vec::new();
        if !self.eat_punct('(') {
            return Ok(ops);
        }
        if self.eat_punct(')') {
            return Ok(ops);
        }
        loop {
            ops.push(self.operand(params)?);
            if self.eat_punct(')') {
                return Ok(ops);
            }
            self.expect_punct(',')?;
        }
    }

    fn edge(&mut self, params: &HashMap<String, usize>, out: &mut Vec<Operand>) -> Result<(), ParseError> {
        let label = self.word("block label")?;
        out.push(Operand::Label(label));
        out.extend(self.operand_list(params)?);
        Ok(())
    }

    fn instruction(&mut self, params: &HashMap<String, usize>) -> Result<Instruction, ParseError> {
        let result = if matches!(self.peek(), Tok::Local(_)) && *self.peek_at(1) == Tok::Punct('=') {
            let r = self.local_name()?;
            self.bump();
            Some(r)
        } else {
            None
        };
        let mnemonic = self.word("opcode")?;
        let Some(opcode) = Opcode::from_mnemonic(&mnemonic) else {
            self.pos -= 1;
            return self.error(format!("unknown opcode `{mnemonic}`"));
        };
        let needs_result = matches!(opcode, Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Const | Opcode::Load);
        let forbids_result = matches!(opcode, Opcode::Store | Opcode::Br | Opcode::BrCond | Opcode::Ret);
        if needs_result && result.is_none() {
            return self.error(format!("arity mismatch: `{opcode}` must define a result"));
        }
        if forbids_result && result.is_some() {
            return self.error(format!("arity mismatch: `{opcode}` does not produce a result"));
        }

        let mut operands = Vec::new();
        match opcode {
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Store => {
                operands.push(self.operand(params)?);
                self.expect_punct(',')?;
                operands.push(self.operand(params)?);
            }
            Opcode::Const => match self.raw_operand()? {
                RawOperand::Lit(v) => operands.push(Operand::Lit(v)),
                _ => {
                    self.pos -= 1;
                    return self.error("arity mismatch: `const` takes one integer literal");
                }
            },
            Opcode::Load => operands.push(self.operand(params)?),
            Opcode::Call | Opcode::Invoke => {
                operands.push(self.operand(params)?);
                if *self.peek() != Tok::Punct('(') {
                    return self.unexpected("`(`");
                }
                operands.extend(self.operand_list(params)?);
                if opcode == Opcode::Invoke {
                    self.expect_keyword("to")?;
                    operands.push(Operand::Label(self.word("normal label")?));
                    self.expect_keyword("unwind")?;
                    operands.push(Operand::Label(self.word("unwind label")?));
                }
            }
            Opcode::Br => self.edge(params, &mut operands)?,
            Opcode::BrCond => {
                operands.push(self.operand(params)?);
                self.expect_punct(',')?;
                self.edge(params, &mut operands)?;
                self.expect_punct(',')?;
                self.edge(params, &mut operands)?;
            }
            Opcode::Ret => {
                let starts_operand = matches!(self.peek(), Tok::Local(_) | Tok::Global(_) | Tok::Num(_));
                if starts_operand && *self.peek_at(1) != Tok::Punct('=') {
                    operands.push(self.operand(params)?);
                }
            }
        }
        Ok(Instruction { result, opcode, operands })
    }
}
