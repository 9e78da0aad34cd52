//! Obfuscation-style rewrites applied to assembly text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AppRecord;
use crate::asmparse::{
    normalize_class, owner_class, parse, ClassNode, Instruction, InstructionKind, MethodNode,
    Program,
};
use crate::error::{Error, Result};
use crate::seed;

/// Expected junk instructions per original instruction.
pub const DEFAULT_JUNK_RATE: f64 = 0.2;

/// Namespaces treated as platform code and never renamed.
const PLATFORM_PREFIXES: [&str; 6] = [
    "android/", "java/", "javax/", "dalvik/", "kotlin/", "Android/",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    RenameIdentifiers,
    JunkInsertion,
    MethodReordering,
    CallIndirection,
    StringEncryptionStub,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::RenameIdentifiers,
        TransformKind::JunkInsertion,
        TransformKind::MethodReordering,
        TransformKind::CallIndirection,
        TransformKind::StringEncryptionStub,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::RenameIdentifiers => "rename_identifiers",
            TransformKind::JunkInsertion => "junk_insertion",
            TransformKind::MethodReordering => "method_reordering",
            TransformKind::CallIndirection => "call_indirection",
            TransformKind::StringEncryptionStub => "string_encryption_stub",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown transform `{s}`")))
    }
}

/// Applies one rewrite; label, family, id and epoch tag are kept.
pub fn transform(record: &AppRecord, kind: TransformKind, root: u64) -> Result<AppRecord> {
    let program = parse(&record.source_text)?;
    let mut rng = seed::child_rng(root, kind.name());
    let out = match kind {
        TransformKind::RenameIdentifiers => rename_identifiers(program, &mut rng)?,
        TransformKind::JunkInsertion => insert_junk(program, DEFAULT_JUNK_RATE, &mut rng)?,
        TransformKind::MethodReordering => reorder_methods(program, &mut rng),
        TransformKind::CallIndirection => indirect_call(program, &mut rng)?,
        TransformKind::StringEncryptionStub => encrypt_strings(program, &mut rng)?,
    };
    Ok(AppRecord {
        source_text: out.to_text(),
        ..record.clone()
    })
}

/// Junk insertion at an explicit rate.
pub fn junk_insertion(record: &AppRecord, rate: f64, root: u64) -> Result<AppRecord> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::invalid(format!(
            "junk rate must be non-negative, got {rate}"
        )));
    }
    let program = parse(&record.source_text)?;
    let mut rng = seed::child_rng(root, TransformKind::JunkInsertion.name());
    Ok(AppRecord {
        source_text: insert_junk(program, rate, &mut rng)?.to_text(),
        ..record.clone()
    })
}

fn is_platform(class: &str) -> bool {
    PLATFORM_PREFIXES.iter().any(|p| class.starts_with(p))
}

fn declared(program: &Program) -> BTreeSet<String> {
    program
        .classes
        .iter()
        .filter_map(|c| normalize_class(&c.name))
        .collect()
}

fn reparse(ins: &Instruction, text: String) -> Result<Instruction> {
    Instruction::parse_line(&text, ins.line, ins.column)
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '/'
}

/// Rewrites every class reference found in `classes` and every member of a
/// renamed class found in `methods`.
fn rename_refs(
    text: &str,
    classes: &BTreeMap<String, String>,
    methods: &BTreeMap<(String, String), String>,
) -> String {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut last_class: Option<&str> = None;
    while i < chars.len() {
        let (start, c) = chars[i];
        if !is_name_char(c) {
            out.push(c);
            // a member reference survives `.` and `->` separators only
            if !(c == '.' || c == '-' || c == '>') {
                last_class = None;
            }
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && is_name_char(chars[j].1) {
            j += 1;
        }
        let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
        let run = &text[start..end];
        let next = chars.get(j).map(|&(_, c)| c);
        if let Some(new) = classes.get(run) {
            out.push_str(new);
            last_class = Some(run);
        } else if let Some(new) = run
            .strip_prefix('L')
            .filter(|_| next == Some(';'))
            .and_then(|inner| classes.get(inner))
        {
            out.push('L');
            out.push_str(new);
            last_class = None;
        } else if let Some(new) =
            last_class.and_then(|cls| methods.get(&(cls.to_string(), run.to_string())))
        {
            out.push_str(new);
            last_class = None;
        } else {
            out.push_str(run);
            last_class = None;
        }
        i = j;
    }
    out
}

fn rename_identifiers(mut program: Program, rng: &mut impl Rng) -> Result<Program> {
    let prefix = format!("o{:08x}", rng.gen::<u32>());
    let mut classes = BTreeMap::new();
    let mut methods = BTreeMap::new();
    for (ci, class) in program.classes.iter().enumerate() {
        let Some(name) = normalize_class(&class.name) else {
            continue;
        };
        if is_platform(&name) {
            continue;
        }
        let new = format!("{prefix}/c{ci}");
        for (mi, m) in class.methods.iter().enumerate() {
            methods.insert((name.clone(), m.name.clone()), format!("m{mi}"));
        }
        classes.insert(name, new);
    }
    for class in &mut program.classes {
        let old = normalize_class(&class.name).unwrap_or_default();
        for m in &mut class.methods {
            if let Some(new) = methods.get(&(old.clone(), m.name.clone())) {
                m.name = new.clone();
            }
            for ins in &mut m.instructions {
                let text = rename_refs(&ins.text, &classes, &methods);
                if text != ins.text {
                    *ins = reparse(ins, text)?;
                }
            }
        }
        if let Some(new) = classes.get(&old) {
            class.name = new.clone();
        }
    }
    Ok(program)
}

/// A fresh class name that collides with nothing declared.
fn fresh_class(program: &Program, stem: &str, rng: &mut impl Rng) -> String {
    let taken = declared(program);
    loop {
        let name = format!("z{:06x}/{stem}", rng.gen_range(0..1u32 << 24));
        if !taken.contains(&name) {
            return name;
        }
    }
}

fn insert_junk(mut program: Program, rate: f64, rng: &mut impl Rng) -> Result<Program> {
    let junk = fresh_class(&program, "Junk", rng);
    let p = rate / (1.0 + rate);
    let make = |rng: &mut dyn rand::RngCore| -> String {
        let r = rng.gen_range(0..16);
        match rng.gen_range(0..5) {
            0 => format!("invoke-static {{}}, {junk}.pad{}()V", rng.gen_range(0..4)),
            1 => format!("new-instance v{r}, {junk}"),
            2 => format!("sget v{r}, {junk}.counter I"),
            3 => format!("const/16 v{r}, 0x{:x}", rng.gen_range(0..256)),
            _ => "nop".to_string(),
        }
    };
    for class in &mut program.classes {
        for m in &mut class.methods {
            let mut out = Vec::with_capacity(m.instructions.len() * 2);
            for ins in m.instructions.drain(..) {
                while rng.gen_bool(p) {
                    let text = make(rng);
                    out.push(Instruction::parse_line(&text, ins.line, ins.column)?);
                }
                out.push(ins);
            }
            m.instructions = out;
        }
    }
    let ret = Instruction::parse_line("return-void", 0, 1)?;
    let pads = (0..4)
        .map(|k| MethodNode {
            name: format!("pad{k}"),
            line: 0,
            instructions: vec![ret.clone()],
        })
        .collect();
    program.classes.push(ClassNode {
        name: junk,
        line: 0,
        methods: pads,
    });
    Ok(program)
}

fn reorder_methods(mut program: Program, rng: &mut impl Rng) -> Program {
    for class in &mut program.classes {
        class.methods.shuffle(rng);
    }
    program.classes.shuffle(rng);
    program
}

fn indirect_call(mut program: Program, rng: &mut impl Rng) -> Result<Program> {
    let own = declared(&program);
    let mut sites = Vec::new();
    for (ci, class) in program.classes.iter().enumerate() {
        for (mi, m) in class.methods.iter().enumerate() {
            for (ii, ins) in m.instructions.iter().enumerate() {
                if let InstructionKind::Invoke { call, .. } = &ins.kind {
                    let owner = owner_class(&crate::asmparse::normalize_member(call)).to_string();
                    if !own.contains(&owner) {
                        sites.push((ci, mi, ii));
                    }
                }
            }
        }
    }
    let Some(&(ci, mi, ii)) = sites.choose(rng) else {
        return Ok(program);
    };
    let fwd = fresh_class(&program, "Fwd", rng);
    let site = &mut program.classes[ci].methods[mi].instructions[ii];
    let moved = site.clone();
    *site = reparse(site, format!("invoke-static {{}}, {fwd}.forward()V"))?;
    program.classes.push(ClassNode {
        name: fwd,
        line: 0,
        methods: vec![MethodNode {
            name: "forward".into(),
            line: 0,
            instructions: vec![moved, Instruction::parse_line("return-void", 0, 1)?],
        }],
    });
    Ok(program)
}

fn encrypt_strings(mut program: Program, rng: &mut impl Rng) -> Result<Program> {
    let key: u8 = rng.gen_range(1..=255);
    for class in &mut program.classes {
        for m in &mut class.methods {
            for ins in &mut m.instructions {
                if !ins.text.starts_with("const-string") {
                    continue;
                }
                let (Some(a), Some(b)) = (ins.text.find('"'), ins.text.rfind('"')) else {
                    continue;
                };
                if b <= a {
                    continue;
                }
                let hex: String = ins.text[a + 1..b]
                    .bytes()
                    .map(|c| format!("{:02x}", c ^ key))
                    .collect();
                let text = format!("{}\"enc:{hex}\"{}", &ins.text[..a], &ins.text[b + 1..]);
                *ins = reparse(ins, text)?;
            }
        }
    }
    Ok(program)
}
