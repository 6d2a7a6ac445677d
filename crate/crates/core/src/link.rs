//! Simulated static linker: symbol resolution, identical-code folding,
//! linker maps, size accounting and merge-quality statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::ir::{
    parse_module, print_body_with, print_module, Function, GlobalDef, Linkage, Module, Operand, ParseError, Symbol,
    MERGED_SUFFIX,
};
use crate::merge::MergeReport;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("duplicate public symbol @{0}")]
    DuplicateSymbol(String),
    #[error("@{symbol} referenced from module {module} is not defined or declared")]
    Unresolved { module: String, symbol: String },
    #[error("malformed image: {0}")]
    Image(String),
}

/// Program after symbol resolution. Private symbols carry `<mod>$<name>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkedImage {
    pub functions: BTreeMap<String, Function>,
    /// Folded name to the representative that replaced it.
    pub aliases: BTreeMap<String, String>,
    pub globals: BTreeMap<String, GlobalDef>,
    /// Referenced but defined nowhere; calls to these are environment calls.
    pub externs: BTreeSet<String>,
}

impl LinkedImage {
    /// Follows an alias (if any) to the retained function name.
    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.get(self.resolve(name))
    }

    /// The image as a module named `image`, in canonical text form.
    pub fn to_module(&self) -> Module {
        let mut m = Module::new("image");
        m.globals.extend(self.globals.values().cloned());
        m.globals.extend(self.externs.iter().map(GlobalDef::external));
        m.functions.extend(self.functions.values().cloned());
        m
    }

    pub fn to_text(&self) -> String {
        print_module(&self.to_module())
    }

    /// Reads a printed image back. Names are taken verbatim.
    pub fn from_module(m: &Module) -> LinkedImage {
        let mut image = LinkedImage::default();
        for g in &m.globals {
            if g.is_extern() {
                image.externs.insert(g.name.clone());
            } else {
                image.globals.insert(g.name.clone(), g.clone());
            }
        }
        for f in &m.functions {
            image.functions.insert(f.name.clone(), f.clone());
        }
        image
    }

    pub fn from_text(text: &str) -> Result<LinkedImage, ParseError> {
        parse_module(text).map(|m| LinkedImage::from_module(&m))
    }
}

/// Resolves every module into one image. Private names are prefixed with
/// their module; extern declarations bind to a public definition if one
/// exists and otherwise stay external.
pub fn link(modules: &[Module]) -> Result<LinkedImage, LinkError> {
    let mut public: BTreeSet<&str> = BTreeSet::new();
    for m in modules {
        let defs = m
            .functions
            .iter()
            .map(|f| (&f.name, f.linkage))
            .chain(m.globals.iter().filter(|g| !g.is_extern()).map(|g| (&g.name, g.linkage)));
        for (name, linkage) in defs {
            if linkage == Linkage::Public && !public.insert(name.as_str()) {
                return Err(LinkError::DuplicateSymbol(name.clone()));
            }
        }
    }

    let mut image = LinkedImage::default();
    for m in modules {
        let local = |name: &str| -> Result<String, LinkError> {
            match m.symbol(name) {
                Some(Symbol::Function(f)) if f.linkage == Linkage::Private => Ok(private_name(&m.name, name)),
                Some(Symbol::Data(g)) if g.linkage == Linkage::Private => Ok(private_name(&m.name, name)),
                Some(_) => Ok(name.to_string()),
                None => Err(LinkError::Unresolved { module: m.name.clone(), symbol: name.to_string() }),
            }
        };
        for g in &m.globals {
            if g.is_extern() {
                if !public.contains(g.name.as_str()) {
                    image.externs.insert(g.name.clone());
                }
                continue;
            }
            let mut g2 = g.clone();
            g2.name = local(&g.name)?;
            image.globals.insert(g2.name.clone(), g2);
        }
        for f in &m.functions {
            let mut f2 = f.clone();
            f2.name = local(&f.name)?;
            for block in &mut f2.blocks {
                for inst in &mut block.instructions {
                    for op in &mut inst.operands {
                        if let Operand::Global(name) = op {
                            *name = local(name)?;
                        }
                    }
                }
            }
            image.functions.insert(f2.name.clone(), f2);
        }
    }
    Ok(image)
}

pub fn private_name(module: &str, name: &str) -> String {
    format!("{module}${name}")
}

/// Which functions identical-code folding may remove.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum IcfMode {
    /// Every function, public ones included.
    #[default]
    All,
    /// Private functions only.
    Safe,
    Off,
}

impl fmt::Display for IcfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IcfMode::All => "all",
            IcfMode::Safe => "safe",
            IcfMode::Off => "off",
        })
    }
}

impl FromStr for IcfMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(IcfMode::All),
            "safe" => Ok(IcfMode::Safe),
            "off" => Ok(IcfMode::Off),
            other => Err(format!("unknown icf mode `{other}` (expected all, safe or off)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldGroup {
    pub representative: String,
    /// Folded names, sorted; the representative is not repeated here.
    pub members: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkerMap {
    pub groups: Vec<FoldGroup>,
}

impl LinkerMap {
    pub fn aliases(&self) -> BTreeMap<String, String> {
        self.groups.iter().flat_map(|g| g.members.iter().map(move |m| (m.clone(), g.representative.clone()))).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .groups
            .iter()
            .flat_map(|g| g.members.iter().map(move |m| format!("FOLD {} <- {}\n", g.representative, m)))
            .collect();
        lines.sort();
        lines.concat()
    }

    pub fn from_text(text: &str) -> Result<LinkerMap, LinkError> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parsed = line
                .strip_prefix("FOLD ")
                .and_then(|rest| rest.split_once(" <- "))
                .filter(|(r, m)| !r.is_empty() && !m.is_empty() && !r.contains(' ') && !m.contains(' '));
            let (rep, member) = parsed.ok_or_else(|| LinkError::Image(format!("bad linker map line `{line}`")))?;
            groups.entry(rep.to_string()).or_default().push(member.to_string());
        }
        Ok(LinkerMap {
            groups: groups
                .into_iter()
                .map(|(representative, mut members)| {
                    members.sort();
                    FoldGroup { representative, members }
                })
                .collect(),
        })
    }
}

fn foldable(f: &Function, mode: IcfMode) -> bool {
    match mode {
        IcfMode::All => true,
        IcfMode::Safe => f.linkage == Linkage::Private,
        IcfMode::Off => false,
    }
}

/// Canonical body with every function reference replaced by a placeholder,
/// plus the referenced names in operand order.
fn abstract_body(f: &Function, functions: &BTreeMap<String, Function>) -> (String, Vec<String>) {
    let mut refs = Vec::new();
    let canon = crate::ir::canonicalize_values(f);
    let body = print_body_with(&canon, &mut |op| match op {
        Operand::Global(name) if functions.contains_key(name) => {
            refs.push(name.clone());
            Some("@<fn>".to_string())
        }
        _ => None,
    });
    (body, refs)
}

/// Equivalence classes of functions by partition refinement. Returns a
/// class id per function name.
fn fold_classes(image: &LinkedImage, mode: IcfMode) -> BTreeMap<String, usize> {
    let names: Vec<&String> = image.functions.keys().collect();
    let abstracted: Vec<(String, Vec<String>)> =
        image.functions.values().map(|f| abstract_body(f, &image.functions)).collect();

    let mut ids: HashMap<(String, bool), usize> = HashMap::new();
    let mut class: BTreeMap<String, usize> = BTreeMap::new();
    for (name, (body, _)) in names.iter().zip(&abstracted) {
        let f = &image.functions[*name];
        // Unfoldable functions key on their own name so they stay singletons.
        let key = if foldable(f, mode) { (body.clone(), true) } else { ((*name).clone(), false) };
        let next = ids.len();
        class.insert((*name).clone(), *ids.entry(key).or_insert(next));
    }

    loop {
        let mut ids: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut refined: BTreeMap<String, usize> = BTreeMap::new();
        for (name, (_, refs)) in names.iter().zip(&abstracted) {
            let sig = (class[*name], refs.iter().map(|r| class[r]).collect::<Vec<_>>());
            let next = ids.len();
            refined.insert((*name).clone(), *ids.entry(sig).or_insert(next));
        }
        let before = class.values().collect::<BTreeSet<_>>().len();
        let after = ids.len();
        class = refined;
        if after == before {
            return class;
        }
    }
}

/// Identical-code folding to a fixpoint. Each class keeps its
/// lexicographically least name; references to the others are rewritten.
pub fn icf(image: &LinkedImage, mode: IcfMode) -> (LinkedImage, LinkerMap) {
    let class = fold_classes(image, mode);
    let mut members: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (name, c) in &class {
        members.entry(*c).or_default().push(name.clone());
    }
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    let mut groups = Vec::new();
    for names in members.values() {
        // Names are visited in sorted order, so the first is the least.
        let rep = names[0].clone();
        if names.len() > 1 {
            for n in &names[1..] {
                rename.insert(n.clone(), rep.clone());
            }
            groups.push(FoldGroup { representative: rep, members: names[1..].to_vec() });
        }
    }
    groups.sort_by(|a, b| a.representative.cmp(&b.representative));

    let mut out = image.clone();
    out.functions.retain(|name, _| !rename.contains_key(name));
    for f in out.functions.values_mut() {
        for block in &mut f.blocks {
            for inst in &mut block.instructions {
                for op in &mut inst.operands {
                    if let Operand::Global(name) = op {
                        if let Some(rep) = rename.get(name) {
                            *name = rep.clone();
                        }
                    }
                }
            }
        }
    }
    // Keep the alias graph flat across repeated folding.
    for target in out.aliases.values_mut() {
        if let Some(rep) = rename.get(target) {
            *target = rep.clone();
        }
    }
    out.aliases.extend(rename);
    (out, LinkerMap { groups })
}

/// Instruction units of one function.
pub fn function_size(f: &Function) -> usize {
    f.inst_count()
}

/// Instruction units of every retained function.
pub fn size(image: &LinkedImage) -> usize {
    image.functions.values().map(function_size).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub total_functions: usize,
    pub merged_count: usize,
    pub mismatched_count: usize,
    /// Parameter count to number of merged functions with that many.
    pub param_histogram: BTreeMap<usize, usize>,
    /// Block count of each merged original to number of such functions.
    pub block_histogram: BTreeMap<usize, usize>,
    pub size_before: usize,
    pub size_after: usize,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 * 100.0 / den as f64
    }
}

impl MergeStats {
    pub fn merged_pct(&self) -> f64 {
        percent(self.merged_count, self.total_functions)
    }

    pub fn mismatched_pct(&self) -> f64 {
        percent(self.mismatched_count, self.total_functions)
    }

    pub fn mismatched_over_merged_pct(&self) -> f64 {
        percent(self.mismatched_count, self.merged_count)
    }

    /// Sorted `key=value` lines followed by sorted `HIST` lines.
    pub fn to_text(&self) -> String {
        let mut kv = [
            format!("merged_count={}", self.merged_count),
            format!("merged_pct={:.2}", self.merged_pct()),
            format!("mismatched_count={}", self.mismatched_count),
            format!("mismatched_over_merged_pct={:.2}", self.mismatched_over_merged_pct()),
            format!("mismatched_pct={:.2}", self.mismatched_pct()),
            format!("size_after={}", self.size_after),
            format!("size_before={}", self.size_before),
            format!("total_functions={}", self.total_functions),
        ];
        kv.sort();
        let mut out: String = kv.iter().map(|l| format!("{l}\n")).collect();
        for (k, c) in &self.block_histogram {
            out.push_str(&format!("HIST block {k} {c}\n"));
        }
        for (k, c) in &self.param_histogram {
            out.push_str(&format!("HIST param {k} {c}\n"));
        }
        out
    }
}

/// Statistics for one pipeline run. `baseline` is the image built without
/// merging or outlining, `post` the final folded image.
pub fn compute_stats(
    baseline: &LinkedImage,
    post: &LinkedImage,
    reports: &[MergeReport],
    map: &LinkerMap,
) -> MergeStats {
    let mut stats = MergeStats {
        total_functions: baseline.functions.len() + baseline.aliases.len(),
        size_before: size(baseline),
        size_after: size(post),
        ..MergeStats::default()
    };
    for entry in reports.iter().flat_map(|r| &r.merged) {
        stats.merged_count += 1;
        *stats.param_histogram.entry(entry.args.len()).or_default() += 1;
        *stats.block_histogram.entry(entry.blocks).or_default() += 1;
    }

    // A merged instance is mismatched when its fold class holds no other one.
    let is_merged = |n: &str| n.ends_with(MERGED_SUFFIX);
    let mut class_merged: BTreeMap<&str, usize> = BTreeMap::new();
    for name in post.functions.keys().filter(|n| is_merged(n)) {
        *class_merged.entry(name.as_str()).or_default() += 1;
    }
    for g in &map.groups {
        let folded = g.members.iter().filter(|m| is_merged(m)).count();
        if folded > 0 {
            *class_merged.entry(g.representative.as_str()).or_default() += folded;
        }
    }
    stats.mismatched_count = class_merged.values().filter(|&&c| c == 1).count();
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn modules(texts: &[&str]) -> Vec<Module> {
        texts.iter().map(|t| parse_module(t).unwrap()).collect()
    }

    const TWIN_M1: &str = "module m1\nextern global @g1\nglobal @c1 = 0\n\
        func @f1.Tgm(%a, %p) private merged_tgm { e: %x = add %a, 1\n %y = call %p(%x)\n %z = sub %a, %y\n ret %z }\n\
        func @f1(%a) thunk { e: %r = call @f1.Tgm(%a, @g1)\n ret %r }";
    const TWIN_M2: &str = "module m2\nextern global @g2\nglobal @c2 = 0\n\
        func @f2.Tgm(%a, %p) private merged_tgm { e: %x = add %a, 1\n %y = call %p(%x)\n %z = sub %a, %y\n ret %z }\n\
        func @f2(%a) thunk { e: %r = call @f2.Tgm(%a, @g2)\n ret %r }";

    #[test]
    fn link_and_fold_twins() {
        let image = link(&modules(&[TWIN_M1, TWIN_M2])).unwrap();
        let names: Vec<&str> = image.functions.keys().map(String::as_str).collect();
        assert_eq!(names, ["f1", "f2", "m1$f1.Tgm", "m2$f2.Tgm"]);
        assert_eq!(size(&image), 12);
        let (folded, map) = icf(&image, IcfMode::All);
        assert_eq!(map.to_text(), "FOLD m1$f1.Tgm <- m2$f2.Tgm\n");
        assert_eq!(size(&folded), 8);
        assert!(crate::ir::print_function(&folded.functions["f2"]).contains("call @m1$f1.Tgm(%a, @g2)"));
        assert_eq!(folded.resolve("m2$f2.Tgm"), "m1$f1.Tgm");
    }

    #[test]
    fn private_data_is_disambiguated() {
        let ms = modules(&[
            "module a\nglobal @s = \"hello\" private\nfunc @fa() { e: %v = load @s\n ret %v }",
            "module b\nglobal @s = \"hello\" private\nfunc @fb() { e: %v = load @s\n ret %v }",
        ]);
        let image = link(&ms).unwrap();
        assert!(image.globals.contains_key("a$s") && image.globals.contains_key("b$s"));
        // Distinct cells: the readers must not fold.
        assert!(icf(&image, IcfMode::All).1.is_empty());
    }

    #[test]
    fn duplicate_and_unresolved() {
        let dup = modules(&["module a\nfunc @f() { e: ret }", "module b\nfunc @f() { e: ret }"]);
        assert_eq!(link(&dup), Err(LinkError::DuplicateSymbol("f".into())));
        let mut m = parse_module("module a\nfunc @f() { e: ret }").unwrap();
        m.functions[0].blocks[0]
            .instructions
            .insert(0, crate::ir::Instruction::new(None, crate::ir::Opcode::Call, vec![Operand::global("nowhere")]));
        assert!(matches!(link(&[m]), Err(LinkError::Unresolved { .. })));
    }

    #[test]
    fn mutually_recursive_twins_fold_pairwise() {
        let ms = modules(&["module m\n\
            func @a(%x) private { e: %r = call @b(%x)\n ret %r }\n\
            func @b(%x) private { e: %s = add %x, 1\n %r = call @a(%s)\n ret %r }\n\
            func @c(%x) private { e: %r = call @d(%x)\n ret %r }\n\
            func @d(%x) private { e: %s = add %x, 1\n %r = call @c(%s)\n ret %r }\n\
            func @e(%x) private { e: %r = call @b(%x)\n ret %r }\n\
            func @h(%x) private { e: %r = call @h(%x)\n ret %r }"]);
        let (folded, map) = icf(&link(&ms).unwrap(), IcfMode::All);
        assert_eq!(map.to_text(), "FOLD m$a <- m$c\nFOLD m$a <- m$e\nFOLD m$b <- m$d\n");
        // @h calls itself, not a member of the {b, d} class.
        assert!(folded.functions.contains_key("m$h"));
    }

    #[test]
    fn icf_modes() {
        let ms = modules(&["module m\nfunc @a() { e: ret }\nfunc @b() { e: ret }\nfunc @c() private { e: ret }\nfunc @d() private { e: ret }"]);
        let image = link(&ms).unwrap();
        assert_eq!(icf(&image, IcfMode::All).0.functions.len(), 1);
        assert_eq!(icf(&image, IcfMode::Safe).0.functions.len(), 3);
        assert_eq!(icf(&image, IcfMode::Off).0, image);
        let distinct = link(&modules(&["module m\nfunc @a() { e: ret }\nfunc @b() { e: ret 1 }"])).unwrap();
        let (same, map) = icf(&distinct, IcfMode::All);
        assert_eq!(same, distinct);
        assert!(map.is_empty());
    }

    #[test]
    fn map_and_image_round_trip() {
        let image = link(&modules(&[TWIN_M1, TWIN_M2])).unwrap();
        let (folded, map) = icf(&image, IcfMode::All);
        assert_eq!(LinkerMap::from_text(&map.to_text()).unwrap(), map);
        let back = LinkedImage::from_text(&folded.to_text()).unwrap();
        assert_eq!(back.functions, folded.functions);
        assert_eq!(back.globals, folded.globals);
        assert!(LinkerMap::from_text("FOLD a b").is_err());
    }

    #[test]
    fn empty_image() {
        let image = link(&[]).unwrap();
        assert_eq!(size(&image), 0);
        let stats = compute_stats(&image, &image, &[], &LinkerMap::default());
        assert_eq!(stats, MergeStats::default());
        assert!(stats.to_text().contains("merged_pct=0.00"));
    }

    #[test]
    fn stats_count_mismatches() {
        let image = link(&modules(&[TWIN_M1, TWIN_M2])).unwrap();
        let (folded, map) = icf(&image, IcfMode::All);
        let stats = compute_stats(&folded, &folded, &[], &map);
        assert_eq!(stats.mismatched_count, 0);
        let (unfolded, none) = icf(&image, IcfMode::Off);
        assert_eq!(compute_stats(&unfolded, &unfolded, &[], &none).mismatched_count, 2);
    }
}
