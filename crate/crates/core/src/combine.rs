//! Sequential combine step: groups summaries from every module by stable
//! hash, assigns merge parameters and applies the thunk cost model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write;

use crate::hash::{parse_hex, parse_loc, Loc, StableFunctionSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostConfig {
    /// Thunk size beyond the tail call and one unit per parameter.
    pub thunk_fixed_overhead: usize,
    pub min_group_size: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { thunk_fixed_overhead: 2, min_group_size: 2 }
    }
}

impl CostConfig {
    pub fn with_overhead(thunk_fixed_overhead: usize) -> Self {
        CostConfig { thunk_fixed_overhead, ..Self::default() }
    }

    pub fn thunk_size(&self, params: usize) -> usize {
        1 + params + self.thunk_fixed_overhead
    }
}

/// One merge parameter: the per-member constant hashes it supplies, and
/// every location it replaces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Param {
    pub seq: Vec<u64>,
    pub locs: Vec<Loc>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeGroup {
    pub hash: u64,
    pub summaries: Vec<StableFunctionSummary>,
    pub params: Vec<Param>,
}

impl MergeGroup {
    pub fn inst_count(&self) -> usize {
        self.summaries.first().map_or(0, |s| s.inst_count)
    }

    pub fn is_local_to(&self, module: &str) -> bool {
        self.summaries.iter().all(|s| s.module == module)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GlobalMergeInfo {
    pub groups: BTreeMap<u64, MergeGroup>,
    pub cost: CostConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CombineError {
    #[error("duplicate summary for {0}:{1}")]
    DuplicateSummary(String, String),
    #[error("merge info line {line}: {msg}")]
    Format { line: usize, msg: String },
}

fn sorted_unique(summaries: &[StableFunctionSummary]) -> Result<Vec<StableFunctionSummary>, CombineError> {
    let mut sorted = summaries.to_vec();
    sorted.sort_by(|a, b| (&a.module, &a.function, a.hash).cmp(&(&b.module, &b.function, b.hash)));
    for pair in sorted.windows(2) {
        if pair[0].module == pair[1].module && pair[0].function == pair[1].function {
            return Err(CombineError::DuplicateSummary(pair[0].module.clone(), pair[0].function.clone()));
        }
    }
    Ok(sorted)
}

/// Exact partition by hash; members sorted by (module, function); singleton
/// groups dropped.
pub fn group_by_hash(
    summaries: &[StableFunctionSummary],
) -> Result<BTreeMap<u64, Vec<StableFunctionSummary>>, CombineError> {
    let mut groups: BTreeMap<u64, Vec<StableFunctionSummary>> = BTreeMap::new();
    for sf in sorted_unique(summaries)? {
        groups.entry(sf.hash).or_default().push(sf);
    }
    groups.retain(|_, g| g.len() >= 2);
    Ok(groups)
}

/// Members must agree on instruction count and on the set of skipped
/// constant locations.
pub fn can_merge(group: &[StableFunctionSummary]) -> bool {
    let Some(first) = group.first() else { return false };
    group.iter().all(|s| s.inst_count == first.inst_count && s.loc_to_hash.keys().eq(first.loc_to_hash.keys()))
}

/// Allocates one parameter per distinct, non-uniform cross-member hash
/// sequence, in order of first location.
pub fn compute_params(group: &[StableFunctionSummary]) -> Vec<Param> {
    let Some(reference) = group.first() else { return Vec::new() };
    let mut params: Vec<Param> = Vec::new();
    let mut by_seq: HashMap<Vec<u64>, usize> = HashMap::new();
    for (&loc, &hash) in &reference.loc_to_hash {
        let seq: Vec<u64> = group.iter().map(|s| s.loc_to_hash.get(&loc).copied().unwrap_or(hash)).collect();
        if seq.iter().all(|&h| h == hash) {
            continue;
        }
        match by_seq.get(&seq) {
            Some(&k) => params[k].locs.push(loc),
            None => {
                by_seq.insert(seq.clone(), params.len());
                params.push(Param { seq, locs: vec![loc] });
            }
        }
    }
    params
}

/// `size_thunk * n < size_func * (n - 1)`.
pub fn merge_is_profitable(n: usize, size_func: usize, size_thunk: usize) -> bool {
    n >= 1 && size_thunk * n < size_func * (n - 1)
}

pub fn should_merge(group: &[StableFunctionSummary], params: &[Param], cfg: &CostConfig) -> bool {
    let size_func = group.first().map_or(0, |s| s.inst_count);
    merge_is_profitable(group.len(), size_func, cfg.thunk_size(params.len()))
}

pub fn combine(summaries: &[StableFunctionSummary], cfg: CostConfig) -> Result<GlobalMergeInfo, CombineError> {
    let mut groups = BTreeMap::new();
    for (hash, members) in group_by_hash(summaries)? {
        if members.len() < cfg.min_group_size || !can_merge(&members) {
            continue;
        }
        let params = compute_params(&members);
        if should_merge(&members, &params, &cfg) {
            groups.insert(hash, MergeGroup { hash, summaries: members, params });
        }
    }
    Ok(GlobalMergeInfo { groups, cost: cfg })
}

impl GlobalMergeInfo {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Deterministic text form. Besides the group header, members and
    /// parameters, each group carries a `K` line with the reference
    /// member's location hashes so summaries reconstruct exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("GMI v1 overhead={}\n", self.cost.thunk_fixed_overhead);
        for g in self.groups.values() {
            writeln!(out, "G {:016x} {} {}", g.hash, g.inst_count(), g.summaries.len()).unwrap();
            for s in &g.summaries {
                writeln!(out, "  M {} {}", s.module, s.function).unwrap();
            }
            let keys: Vec<String> = g.summaries[0].loc_to_hash.iter().map(|(l, h)| format!("{l}:{h:016x}")).collect();
            writeln!(out, "  K {}", if keys.is_empty() { "-".to_owned() } else { keys.join(";") }).unwrap();
            for (k, p) in g.params.iter().enumerate() {
                let locs: Vec<String> = p.locs.iter().map(Loc::to_string).collect();
                let seq: Vec<String> = p.seq.iter().map(|h| format!("{h:016x}")).collect();
                writeln!(out, "  P {k} locs={} seq={}", locs.join(";"), seq.join(",")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<GlobalMergeInfo, CombineError> {
        let err = |line: usize, msg: String| CombineError::Format { line, msg };
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty merge info".into()))?;
        let overhead = header
            .strip_prefix("GMI v1 overhead=")
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| err(1, format!("bad header `{header}`")))?;
        let mut gmi = GlobalMergeInfo { groups: BTreeMap::new(), cost: CostConfig::with_overhead(overhead) };

        struct Pending {
            hash: u64,
            inst_count: usize,
            n: usize,
            members: Vec<(String, String)>,
            keys: BTreeMap<Loc, u64>,
            params: Vec<Param>,
        }
        let finish = |p: Pending, line: usize, gmi: &mut GlobalMergeInfo| -> Result<(), CombineError> {
            if p.members.len() != p.n {
                return Err(err(
                    line,
                    format!("group {:016x} declares {} members, lists {}", p.hash, p.n, p.members.len()),
                ));
            }
            let mut summaries = Vec::with_capacity(p.n);
            for (idx, (module, function)) in p.members.into_iter().enumerate() {
                let mut loc_to_hash = p.keys.clone();
                for param in &p.params {
                    for loc in &param.locs {
                        loc_to_hash.insert(*loc, param.seq[idx]);
                    }
                }
                summaries.push(StableFunctionSummary {
                    hash: p.hash,
                    module,
                    function,
                    inst_count: p.inst_count,
                    loc_to_hash,
                });
            }
            gmi.groups.insert(p.hash, MergeGroup { hash: p.hash, summaries, params: p.params });
            Ok(())
        };

        let mut pending: Option<Pending> = None;
        let mut last_line = 1;
        for (n, line) in lines {
            last_line = n;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["G", h, count, members] => {
                    if let Some(p) = pending.take() {
                        finish(p, n, &mut gmi)?;
                    }
                    pending = Some(Pending {
                        hash: parse_hex(h).map_err(|m| err(n, m))?,
                        inst_count: count.parse().map_err(|_| err(n, "bad instruction count".into()))?,
                        n: members.parse().map_err(|_| err(n, "bad member count".into()))?,
                        members: Vec::new(),
                        keys: BTreeMap::new(),
                        params: Vec::new(),
                    });
                }
                ["M", module, function] => {
                    let p = pending.as_mut().ok_or_else(|| err(n, "member outside group".into()))?;
                    p.members.push(((*module).to_owned(), (*function).to_owned()));
                }
                ["K", keys] => {
                    let p = pending.as_mut().ok_or_else(|| err(n, "keys outside group".into()))?;
                    if *keys != "-" {
                        for entry in keys.split(';') {
                            let (loc, h) =
                                entry.rsplit_once(':').ok_or_else(|| err(n, format!("bad key `{entry}`")))?;
                            p.keys.insert(parse_loc(loc).map_err(|m| err(n, m))?, parse_hex(h).map_err(|m| err(n, m))?);
                        }
                    }
                }
                ["P", idx, locs, seq] => {
                    let p = pending.as_mut().ok_or_else(|| err(n, "parameter outside group".into()))?;
                    if idx.parse::<usize>().ok() != Some(p.params.len()) {
                        return Err(err(n, "parameters out of order".into()));
                    }
                    let locs = locs
                        .strip_prefix("locs=")
                        .ok_or_else(|| err(n, "expected locs=".into()))?
                        .split(';')
                        .map(|l| parse_loc(l).map_err(|m| err(n, m)))
                        .collect::<Result<Vec<_>, _>>()?;
                    let seq = seq
                        .strip_prefix("seq=")
                        .ok_or_else(|| err(n, "expected seq=".into()))?
                        .split(',')
                        .map(|h| parse_hex(h).map_err(|m| err(n, m)))
                        .collect::<Result<Vec<_>, _>>()?;
                    if seq.len() != p.n {
                        return Err(err(n, "sequence length differs from group size".into()));
                    }
                    p.params.push(Param { seq, locs });
                }
                _ => return Err(err(n, format!("unrecognized line `{line}`"))),
            }
        }
        if let Some(p) = pending.take() {
            finish(p, last_line, &mut gmi)?;
        }
        let mut seen = HashSet::new();
        for g in gmi.groups.values() {
            for s in &g.summaries {
                if !seen.insert((s.module.clone(), s.function.clone())) {
                    return Err(CombineError::DuplicateSummary(s.module.clone(), s.function.clone()));
                }
            }
        }
        Ok(gmi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(
        module: &str,
        function: &str,
        hash: u64,
        count: usize,
        locs: &[(usize, usize, u64)],
    ) -> StableFunctionSummary {
        StableFunctionSummary {
            hash,
            module: module.into(),
            function: function.into(),
            inst_count: count,
            loc_to_hash: locs.iter().map(|&(i, j, h)| (Loc::new(i, j), h)).collect(),
        }
    }

    const H1: u64 = 0x1111;
    const H2: u64 = 0x2222;

    fn three_way() -> Vec<StableFunctionSummary> {
        let locs =
            |hs: [u64; 4]| -> Vec<(usize, usize, u64)> { hs.iter().enumerate().map(|(i, &h)| (i, 0, h)).collect() };
        vec![
            sf("m", "f1", 9, 5, &locs([H1, H1, H2, H1])),
            sf("m", "f2", 9, 5, &locs([H1, H2, H1, H2])),
            sf("m", "f3", 9, 5, &locs([H1, H1, H1, H1])),
        ]
    }

    #[test]
    fn grouping() {
        let g = group_by_hash(&[sf("a", "x", 1, 4, &[]), sf("b", "y", 2, 4, &[]), sf("c", "z", 3, 4, &[])]).unwrap();
        assert!(g.is_empty());
        let dup = group_by_hash(&[sf("a", "x", 1, 4, &[]), sf("a", "x", 1, 4, &[])]);
        assert_eq!(dup, Err(CombineError::DuplicateSummary("a".into(), "x".into())));
        let g = group_by_hash(&[sf("b", "y", 1, 4, &[]), sf("a", "x", 1, 4, &[])]).unwrap();
        assert_eq!(g[&1].iter().map(|s| s.module.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn can_merge_filters_collisions() {
        assert!(!can_merge(&[sf("a", "x", 1, 4, &[]), sf("b", "y", 1, 5, &[])]));
        assert!(!can_merge(&[sf("a", "x", 1, 4, &[(1, 0, 5)]), sf("b", "y", 1, 4, &[(2, 0, 5)])]));
        assert!(can_merge(&[sf("a", "x", 1, 4, &[(1, 0, 5)]), sf("b", "y", 1, 4, &[(1, 0, 6)])]));
    }

    #[test]
    fn parameters_from_divergent_locations() {
        let params = compute_params(&three_way());
        assert_eq!(
            params,
            vec![
                Param { seq: vec![H1, H2, H1], locs: vec![Loc::new(1, 0), Loc::new(3, 0)] },
                Param { seq: vec![H2, H1, H1], locs: vec![Loc::new(2, 0)] },
            ]
        );
    }

    #[test]
    fn pure_duplicates_have_no_parameters() {
        let g = [sf("a", "x", 1, 4, &[(1, 0, 5)]), sf("b", "y", 1, 4, &[(1, 0, 5)])];
        assert!(compute_params(&g).is_empty());
    }

    #[test]
    fn cost_gate_examples() {
        assert!(!merge_is_profitable(2, 3, CostConfig::default().thunk_size(0)));
        assert!(merge_is_profitable(4, 10, CostConfig::default().thunk_size(1)));
        let twins = [sf("m1", "f1", 1, 4, &[(1, 0, 5)]), sf("m2", "f2", 1, 4, &[(1, 0, 6)])];
        let p = compute_params(&twins);
        assert!(!should_merge(&twins, &p, &CostConfig::default()));
        let padded = [sf("m1", "f1", 1, 10, &[(1, 0, 5)]), sf("m2", "f2", 1, 10, &[(1, 0, 6)])];
        assert!(should_merge(&padded, &p, &CostConfig::with_overhead(0)));
    }

    #[test]
    fn combine_and_text_round_trip() {
        assert!(combine(&[], CostConfig::default()).unwrap().is_empty());
        let mut sums = three_way();
        sums.push(sf("z", "lonely", 77, 5, &[]));
        let gmi = combine(&sums, CostConfig::with_overhead(0)).unwrap();
        assert_eq!(gmi.groups.len(), 1);
        let text = gmi.to_text();
        assert!(text.starts_with("GMI v1 overhead=0\nG 0000000000000009 5 3\n  M m f1\n"));
        assert!(text.contains("  P 0 locs=(1,0);(3,0) seq=0000000000001111,0000000000002222,0000000000001111\n"));
        assert_eq!(GlobalMergeInfo::from_text(&text).unwrap(), gmi);
    }

    #[test]
    fn order_invariance() {
        let mut sums = three_way();
        let a = combine(&sums, CostConfig::with_overhead(0)).unwrap().to_text();
        sums.reverse();
        assert_eq!(combine(&sums, CostConfig::with_overhead(0)).unwrap().to_text(), a);
    }

    #[test]
    fn rejects_corrupt_text() {
        assert!(GlobalMergeInfo::from_text("GMI v2 overhead=1\n").is_err());
        assert!(GlobalMergeInfo::from_text("GMI v1 overhead=1\nG 0000000000000001 3 2\n  M a f\n  K -\n").is_err());
        assert!(GlobalMergeInfo::from_text("GMI v1 overhead=1\nbogus\n").is_err());
    }
}
