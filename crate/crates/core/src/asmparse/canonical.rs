use super::parser::{Instruction, InstructionKind};

const PRIMITIVE_DESCRIPTORS: &[&str] = &["V", "Z", "B", "S", "C", "I", "J", "F", "D"];
const PRIMITIVE_KEYWORDS: &[&str] = &[
    "void", "boolean", "byte", "short", "char", "int", "long", "float", "double",
];

/// Normalized class name, or `None` for primitives and `void`.
///
/// Drops array brackets, a `L…;` descriptor wrapper, and maps `.` to `/`.
pub fn normalize_class(raw: &str) -> Option<String> {
    let s = raw.trim().trim_start_matches('[');
    if s.is_empty() || PRIMITIVE_DESCRIPTORS.contains(&s) || PRIMITIVE_KEYWORDS.contains(&s) {
        return None;
    }
    let s = match s.strip_prefix('L').and_then(|r| r.strip_suffix(';')) {
        Some(inner) if !inner.is_empty() => inner,
        _ => s,
    };
    Some(s.replace('.', "/"))
}

fn split_member(raw: &str) -> Option<(&str, &str)> {
    let raw = raw.trim();
    if let Some((cls, member)) = raw.split_once("->") {
        return Some((cls, member));
    }
    match raw.rsplit_once('.') {
        Some((cls, member)) if !member.contains('/') && !member.is_empty() => Some((cls, member)),
        _ => None,
    }
}

/// Normalized `class.member` name of a call or field reference.
pub fn normalize_member(raw: &str) -> String {
    match split_member(raw) {
        Some((cls, member)) => match normalize_class(cls) {
            Some(cls) => format!("{cls}.{member}"),
            None => member.to_string(),
        },
        None => normalize_class(raw).unwrap_or_else(|| raw.trim().to_string()),
    }
}

/// Class that owns a canonical asset name.
pub fn owner_class(name: &str) -> &str {
    match name.rsplit_once('.') {
        Some((cls, _)) => cls,
        None => name,
    }
}

fn is_constructor(opcode: &str, call: &str, has_signature: bool) -> bool {
    if !opcode.starts_with("invoke-direct") {
        return false;
    }
    if !has_signature {
        return true;
    }
    matches!(split_member(call), Some((_, m)) if m == "<init>")
}

/// Canonical asset names contributed by one instruction, in order.
///
/// * constructor calls (`invoke-direct` on `<init>` or a bare class) and
///   `new-instance`: `[class]`
/// * other invokes: `[call, arg…, ret]`
/// * field accesses: `[field, type]`
/// * everything else: `[]`
///
/// Primitive and `void` descriptors are dropped.
pub fn canonicalize(ins: &Instruction) -> Vec<String> {
    match &ins.kind {
        InstructionKind::Invoke {
            opcode,
            call,
            args,
            ret,
            ..
        } => {
            if is_constructor(opcode, call, args.is_some()) {
                let cls = match split_member(call) {
                    Some((cls, _)) if args.is_some() => cls,
                    _ => call.as_str(),
                };
                return normalize_class(cls).into_iter().collect();
            }
            if args.is_none() {
                return normalize_class(call).into_iter().collect();
            }
            let mut out = vec![normalize_member(call)];
            out.extend(args.iter().flatten().filter_map(|a| normalize_class(a)));
            out.extend(ret.as_deref().and_then(normalize_class));
            out
        }
        InstructionKind::NewInstance { class, .. } => normalize_class(class).into_iter().collect(),
        InstructionKind::FieldAccess {
            field, field_type, ..
        } => {
            let mut out = vec![normalize_member(field)];
            out.extend(normalize_class(field_type));
            out
        }
        InstructionKind::Other => Vec::new(),
    }
}
