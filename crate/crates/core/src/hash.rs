//! Stable structural hashing and per-function summaries.
//!
//! Hashes depend only on canonical structure: value names, label spellings,
//! module order and whitespace never reach them. Public symbols hash by
//! name, private data by content and private functions by their canonical
//! printed body.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::ir::{canonicalize_values, print_function_body, Function, Linkage, Module, Opcode, Operand, Origin, Symbol};

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

const TAG_LITERAL: u64 = 1;
const TAG_PUBLIC: u64 = 2;
const TAG_PRIVATE: u64 = 3;
const TAG_VALUE: u64 = 4;
const TAG_LABEL: u64 = 5;
const TAG_PARAM: u64 = 6;

/// Folds the eight little-endian bytes of `x` into `h`, FNV-1a style.
pub fn stable_mix(mut h: u64, x: u64) -> u64 {
    for b in x.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
    h
}

/// Plain 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Which mixing function backs every stable hash.
///
/// Anything other than `Fnv1a` exists to stress the pipeline with hash
/// collisions; the transformations must stay behavior preserving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum HashMode {
    #[default]
    Fnv1a,
    /// Every mix returns the same value: all hashes collide.
    Constant,
    /// FNV-1a truncated to the low `n` bits after every mix.
    Masked(u32),
}

impl HashMode {
    pub fn mix(self, h: u64, x: u64) -> u64 {
        match self {
            HashMode::Fnv1a => stable_mix(h, x),
            HashMode::Constant => 0x5eed_5eed_5eed_5eed,
            HashMode::Masked(bits) if bits >= 64 => stable_mix(h, x),
            HashMode::Masked(bits) => stable_mix(h, x) & ((1u64 << bits) - 1),
        }
    }

    fn tagged(self, tag: u64, x: u64) -> u64 {
        self.mix(self.mix(FNV_OFFSET_BASIS, tag), x)
    }
}

/// An operand position: instruction index in program order, operand index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Loc {
    pub inst: usize,
    pub opnd: usize,
}

impl Loc {
    pub fn new(inst: usize, opnd: usize) -> Self {
        Loc { inst, opnd }
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.inst, self.opnd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HashError {
    #[error("unresolved global reference @{0}")]
    Unresolved(String),
    #[error("malformed summary line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Canonical indices of the values and blocks of one function.
pub struct Numbering<'f> {
    values: HashMap<&'f str, u64>,
    labels: HashMap<&'f str, u64>,
}

impl<'f> Numbering<'f> {
    pub fn of(f: &'f Function) -> Self {
        let mut values = HashMap::new();
        let mut labels = HashMap::new();
        let mut next = f.params.len() as u64;
        for (bi, block) in f.blocks.iter().enumerate() {
            labels.insert(block.label.as_str(), bi as u64);
            for name in block.params.iter().chain(block.instructions.iter().filter_map(|i| i.result.as_ref())) {
                values.entry(name.as_str()).or_insert_with(|| {
                    next += 1;
                    next - 1
                });
            }
        }
        Numbering { values, labels }
    }

    pub fn value(&self, name: &str) -> u64 {
        self.values.get(name).copied().unwrap_or_else(|| fnv1a(name.as_bytes()))
    }

    pub fn label(&self, name: &str) -> u64 {
        self.labels.get(name).copied().unwrap_or_else(|| fnv1a(name.as_bytes()))
    }
}

/// Hashing context for one module.
pub struct HashCtx<'m> {
    module: &'m Module,
    mode: HashMode,
    private_fn_hashes: HashMap<&'m str, u64>,
}

impl<'m> HashCtx<'m> {
    pub fn new(module: &'m Module) -> Self {
        Self::with_mode(module, HashMode::Fnv1a)
    }

    pub fn with_mode(module: &'m Module, mode: HashMode) -> Self {
        // Private functions hash by content. References inside the body print
        // by name, so recursion cannot loop.
        let private_fn_hashes = module
            .functions
            .iter()
            .filter(|f| f.linkage == Linkage::Private)
            .map(|f| (f.name.as_str(), fnv1a(print_function_body(&canonicalize_values(f)).as_bytes())))
            .collect();
        HashCtx { module, mode, private_fn_hashes }
    }

    pub fn mode(&self) -> HashMode {
        self.mode
    }

    pub fn module(&self) -> &'m Module {
        self.module
    }

    pub fn mix(&self, h: u64, x: u64) -> u64 {
        self.mode.mix(h, x)
    }

    pub fn mnemonic(&self, op: Opcode) -> u64 {
        fnv1a(op.mnemonic().as_bytes())
    }

    /// Hash of a global reference under the public-name / private-content
    /// rule.
    pub fn global(&self, name: &str) -> Result<u64, HashError> {
        let by_name = |tag| self.mode.tagged(tag, fnv1a(name.as_bytes()));
        match self.module.symbol(name) {
            None => Err(HashError::Unresolved(name.to_owned())),
            Some(Symbol::Extern(_)) => Ok(by_name(TAG_PUBLIC)),
            Some(Symbol::Data(g)) if g.linkage == Linkage::Public => Ok(by_name(TAG_PUBLIC)),
            Some(Symbol::Data(g)) => {
                let content = g.payload.as_ref().map(|p| p.content_bytes()).unwrap_or_default();
                Ok(self.mode.tagged(TAG_PRIVATE, fnv1a(&content)))
            }
            Some(Symbol::Function(f)) if f.linkage == Linkage::Public => Ok(by_name(TAG_PUBLIC)),
            Some(Symbol::Function(f)) => Ok(self.mode.tagged(TAG_PRIVATE, self.private_fn_hashes[f.name.as_str()])),
        }
    }

    pub fn operand(&self, op: &Operand, numbering: &Numbering<'_>) -> Result<u64, HashError> {
        Ok(match op {
            Operand::Lit(v) => self.mode.tagged(TAG_LITERAL, *v),
            Operand::Global(name) => self.global(name)?,
            Operand::Value(name) => self.mode.tagged(TAG_VALUE, numbering.value(name)),
            Operand::Label(name) => self.mode.tagged(TAG_LABEL, numbering.label(name)),
            Operand::Param(i) => self.mode.tagged(TAG_PARAM, *i as u64),
        })
    }
}

/// Whether the operand at `opnd_index` of an `opcode` instruction may become
/// a merge parameter.
pub fn can_param(opcode: Opcode, opnd_index: usize, opnd: &Operand) -> bool {
    if !opnd.is_constant() {
        return false;
    }
    match opcode {
        Opcode::Call | Opcode::Invoke => true,
        Opcode::Load => opnd_index == 0,
        Opcode::Store => opnd_index <= 1,
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StableFunctionSummary {
    pub hash: u64,
    pub module: String,
    pub function: String,
    pub inst_count: usize,
    pub loc_to_hash: BTreeMap<Loc, u64>,
}

impl StableFunctionSummary {
    pub fn same_shape(&self, other: &StableFunctionSummary) -> bool {
        self.hash == other.hash
            && self.inst_count == other.inst_count
            && self.loc_to_hash.keys().eq(other.loc_to_hash.keys())
    }

    pub fn to_line(&self) -> String {
        let locs: Vec<String> = self.loc_to_hash.iter().map(|(l, h)| format!("{l}:{h:016x}")).collect();
        format!("SF v1 {:016x} {} {} {} [{}]", self.hash, self.module, self.function, self.inst_count, locs.join(","))
    }
}

/// Hashes opcodes and every operand that cannot be parameterized into the
/// function hash; parameterizable constants are recorded by location
/// instead.
pub fn compute_stable_fn(f: &Function, ctx: &HashCtx<'_>) -> StableFunctionSummary {
    let numbering = Numbering::of(f);
    let mut hash = 0u64;
    let mut loc_to_hash = BTreeMap::new();
    let mut count = 0;
    for (i, inst) in f.instructions().enumerate() {
        hash = ctx.mix(hash, ctx.mnemonic(inst.opcode));
        for (j, op) in inst.operands.iter().enumerate() {
            let h = match ctx.operand(op, &numbering) {
                Ok(h) => h,
                // Only reachable on unvalidated input.
                Err(_) => ctx.mode.tagged(TAG_PUBLIC, fnv1a(format!("{op:?}").as_bytes())),
            };
            if can_param(inst.opcode, j, op) {
                loc_to_hash.insert(Loc::new(i, j), h);
            } else {
                hash = ctx.mix(hash, h);
            }
        }
        count = i + 1;
    }
    StableFunctionSummary {
        hash,
        module: ctx.module.name.clone(),
        function: f.name.clone(),
        inst_count: count,
        loc_to_hash,
    }
}

/// Summaries worth publishing: unmerged original functions of at least two
/// instructions.
pub fn is_valid(f: &Function, summary: &StableFunctionSummary) -> bool {
    f.origin == Origin::Original && summary.inst_count >= 2
}

pub fn analyze_module(m: &Module) -> Vec<StableFunctionSummary> {
    analyze_module_with(m, HashMode::Fnv1a)
}

pub fn analyze_module_with(m: &Module, mode: HashMode) -> Vec<StableFunctionSummary> {
    let ctx = HashCtx::with_mode(m, mode);
    let mut out: Vec<StableFunctionSummary> = m
        .functions
        .iter()
        .filter_map(|f| {
            let sf = compute_stable_fn(f, &ctx);
            is_valid(f, &sf).then_some(sf)
        })
        .collect();
    out.sort_by(|a, b| a.function.cmp(&b.function));
    out
}

/// One line per summary, sorted by (module, function).
pub fn write_summaries(summaries: &[StableFunctionSummary]) -> String {
    let mut sorted: Vec<&StableFunctionSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| (&a.module, &a.function).cmp(&(&b.module, &b.function)));
    sorted.iter().map(|s| s.to_line() + "\n").collect()
}

pub fn read_summaries(text: &str) -> Result<Vec<StableFunctionSummary>, HashError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_summary_line(l).map_err(|msg| HashError::Format { line: n + 1, msg }))
        .collect()
}

pub(crate) fn parse_hex(s: &str) -> Result<u64, String> {
    if s.len() != 16 {
        return Err(format!("expected 16 hex digits, got `{s}`"));
    }
    u64::from_str_radix(s, 16).map_err(|e| format!("bad hex `{s}`: {e}"))
}

pub(crate) fn parse_loc(s: &str) -> Result<Loc, String> {
    let inner = s.strip_prefix('(').and_then(|s| s.strip_suffix(')')).ok_or_else(|| format!("bad location `{s}`"))?;
    let (i, j) = inner.split_once(',').ok_or_else(|| format!("bad location `{s}`"))?;
    let num = |x: &str| x.parse::<usize>().map_err(|e| format!("bad location `{s}`: {e}"));
    Ok(Loc::new(num(i)?, num(j)?))
}

fn parse_summary_line(line: &str) -> Result<StableFunctionSummary, String> {
    let mut parts = line.splitn(7, ' ');
    let mut next = |what: &str| parts.next().ok_or_else(|| format!("missing {what}"));
    if next("tag")? != "SF" || next("version")? != "v1" {
        return Err("expected `SF v1`".into());
    }
    let hash = parse_hex(next("hash")?)?;
    let module = next("module")?.to_owned();
    let function = next("function")?.to_owned();
    let inst_count = next("count")?.parse::<usize>().map_err(|e| e.to_string())?;
    let locs = next("locations")?;
    let inner = locs.strip_prefix('[').and_then(|s| s.strip_suffix(']')).ok_or("locations must be bracketed")?;
    let mut loc_to_hash = BTreeMap::new();
    // Entries look like `(i,j):hash`, so split on `),(` boundaries.
    for entry in inner.split(",(").filter(|e| !e.is_empty()) {
        let entry = if entry.starts_with('(') { entry.to_owned() } else { format!("({entry}") };
        let (loc, h) = entry.rsplit_once(':').ok_or_else(|| format!("bad entry `{entry}`"))?;
        loc_to_hash.insert(parse_loc(loc)?, parse_hex(h)?);
    }
    Ok(StableFunctionSummary { hash, module, function, inst_count, loc_to_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;
    use rand::{Rng, SeedableRng};

    const TWIN_M1: &str = "module m1
extern global @g1
func @f1(%a) public {
entry:
  %0 = add %a, 1
  %1 = call @g1(%0)
  %2 = sub %a, %1
  ret %2
}
";

    fn twin(n: usize) -> Module {
        parse_module(
            &TWIN_M1.replace("m1", &format!("m{n}")).replace("g1", &format!("g{n}")).replace("f1", &format!("f{n}")),
        )
        .unwrap()
    }

    #[test]
    fn mix_of_zero_word_matches_fnv1a() {
        assert_eq!(stable_mix(FNV_OFFSET_BASIS, 0), fnv1a(&[0u8; 8]));
        // Published FNV-1a 64 test vector.
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn mix_is_injective_on_samples_and_order_sensitive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let (h, x): (u64, u64) = (rng.gen(), rng.gen());
            assert_ne!(stable_mix(h, x), stable_mix(h, x.wrapping_add(1)));
            let y: u64 = rng.gen();
            if x != y {
                assert_ne!(stable_mix(stable_mix(h, x), y), stable_mix(stable_mix(h, y), x));
            }
        }
    }

    #[test]
    fn private_data_hashes_by_content() {
        let a = parse_module("module a\nglobal @s = \"hello\" private\nfunc @f() { entry: %x = load @s\n ret %x }")
            .unwrap();
        let b = parse_module("module b\nglobal @t = \"hello\" private\nfunc @f() { entry: %x = load @t\n ret %x }")
            .unwrap();
        assert_eq!(HashCtx::new(&a).global("s").unwrap(), HashCtx::new(&b).global("t").unwrap());
    }

    #[test]
    fn public_symbols_hash_by_name() {
        let m = parse_module("module m\nextern global @g1\nextern global @g2\nfunc @f() { entry: ret }").unwrap();
        let ctx = HashCtx::new(&m);
        assert_ne!(ctx.global("g1").unwrap(), ctx.global("g2").unwrap());
        assert_eq!(ctx.global("nope"), Err(HashError::Unresolved("nope".into())));
    }

    #[test]
    fn literals_hash_identically_everywhere() {
        let f = &twin(1).functions[0];
        let n = Numbering::of(f);
        let h1 = HashCtx::new(&twin(1)).operand(&Operand::Lit(7), &n).unwrap();
        let h2 = HashCtx::new(&twin(2)).operand(&Operand::Lit(7), &n).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1, stable_mix(stable_mix(FNV_OFFSET_BASIS, 1), 7));
    }

    #[test]
    fn can_param_positions() {
        assert!(can_param(Opcode::Call, 0, &Operand::global("g1")));
        assert!(can_param(Opcode::Call, 2, &Operand::Lit(3)));
        assert!(!can_param(Opcode::Add, 1, &Operand::Lit(7)));
        assert!(!can_param(Opcode::Store, 1, &Operand::value("v")));
        assert!(can_param(Opcode::Store, 0, &Operand::Lit(1)));
        assert!(!can_param(Opcode::Load, 1, &Operand::Lit(1)));
    }

    #[test]
    fn twins_share_hash() {
        let (m1, m2) = (twin(1), twin(2));
        let s1 = compute_stable_fn(&m1.functions[0], &HashCtx::new(&m1));
        let s2 = compute_stable_fn(&m2.functions[0], &HashCtx::new(&m2));
        assert_eq!(s1.hash, s2.hash);
        assert_eq!(s1.loc_to_hash.keys().copied().collect::<Vec<_>>(), vec![Loc::new(1, 0)]);
        assert_eq!(s2.loc_to_hash.keys().copied().collect::<Vec<_>>(), vec![Loc::new(1, 0)]);
        assert_ne!(s1.loc_to_hash[&Loc::new(1, 0)], s2.loc_to_hash[&Loc::new(1, 0)]);
        assert_eq!(s1.inst_count, 4);
    }

    #[test]
    fn bare_ret_hash() {
        let m = parse_module("module m\nfunc @f() { entry: ret }").unwrap();
        let s = compute_stable_fn(&m.functions[0], &HashCtx::new(&m));
        assert_eq!(s.hash, stable_mix(0, fnv1a(b"ret")));
        assert!(s.loc_to_hash.is_empty());
    }

    #[test]
    fn non_parameterizable_literal_changes_hash() {
        let m1 = twin(1);
        let edited = parse_module(&TWIN_M1.replace("add %a, 1", "add %a, 2")).unwrap();
        let a = compute_stable_fn(&m1.functions[0], &HashCtx::new(&m1));
        let b = compute_stable_fn(&edited.functions[0], &HashCtx::new(&edited));
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn analyze_filters_small_and_merged() {
        let text = format!(
            "{TWIN_M1}func @stub() {{ entry: ret }}\nfunc @x.Tgm(%a) private merged_tgm {{ entry: %0 = add %a, 1\n ret %0 }}\n"
        );
        let m = parse_module(&text).unwrap();
        let sums = analyze_module(&m);
        assert_eq!(sums.len(), 1);
        assert_eq!(sums[0].function, "f1");
    }

    #[test]
    fn summary_lines_round_trip() {
        let m = twin(1);
        let sums = analyze_module(&m);
        let text = write_summaries(&sums);
        assert!(text.starts_with("SF v1 "));
        assert!(text.contains(" m1 f1 4 [(1,0):"));
        assert_eq!(read_summaries(&text).unwrap(), sums);
        let empty = StableFunctionSummary { loc_to_hash: BTreeMap::new(), ..sums[0].clone() };
        assert_eq!(read_summaries(&empty.to_line()).unwrap(), vec![empty]);
    }
}
