use std::collections::HashMap;

use super::{Function, Module, Operand};

/// Renumbers values `%0, %1, ...` in definition order (parameters, then
/// block parameters and instruction results in program order) and renames
/// blocks `bb0, bb1, ...`. Behavior is unchanged.
pub fn canonicalize_values(f: &Function) -> Function {
    let mut next = f.params.len();
    let mut values: HashMap<&str, String> = HashMap::new();
    let mut labels: HashMap<&str, String> = HashMap::new();
    for (bi, block) in f.blocks.iter().enumerate() {
        labels.insert(block.label.as_str(), format!("bb{bi}"));
        let defs = block.params.iter().chain(block.instructions.iter().filter_map(|i| i.result.as_ref()));
        for name in defs {
            values.entry(name.as_str()).or_insert_with(|| {
                next += 1;
                (next - 1).to_string()
            });
        }
    }

    let rename = |name: &String, table: &HashMap<&str, String>| {
        table.get(name.as_str()).cloned().unwrap_or_else(|| name.clone())
    };
    let mut out = f.clone();
    out.params = (0..f.params.len()).map(|i| i.to_string()).collect();
    for block in &mut out.blocks {
        block.label = rename(&block.label, &labels);
        block.params = block.params.iter().map(|p| rename(p, &values)).collect();
        for inst in &mut block.instructions {
            inst.result = inst.result.as_ref().map(|r| rename(r, &values));
            for op in &mut inst.operands {
                match op {
                    Operand::Value(v) => *v = rename(v, &values),
                    Operand::Label(l) => *l = rename(l, &labels),
                    _ => {}
                }
            }
        }
    }
    out
}

pub fn canonicalize_module(m: &Module) -> Module {
    let mut out = m.clone();
    out.functions = m.functions.iter().map(canonicalize_values).collect();
    out
}
