use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub classes: Vec<ClassNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNode {
    pub name: String,
    pub line: usize,
    pub methods: Vec<MethodNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodNode {
    pub name: String,
    pub line: usize,
    pub instructions: Vec<Instruction>,
}

/// One instruction line. `text` is the trimmed source line; operands in
/// `kind` are kept verbatim (normalization happens in canonicalization).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub line: usize,
    pub column: usize,
    pub text: String,
    pub kind: InstructionKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionKind {
    Invoke {
        opcode: String,
        registers: String,
        call: String,
        /// `None` when the call has no parenthesized signature (bare class).
        args: Option<Vec<String>>,
        ret: Option<String>,
    },
    NewInstance {
        register: String,
        class: String,
    },
    FieldAccess {
        opcode: String,
        registers: String,
        field: String,
        field_type: String,
    },
    Other,
}

impl Program {
    /// Re-emits source text; `parse(p.to_text())` reproduces `p` up to line numbers.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for class in &self.classes {
            let _ = writeln!(out, "class {}", class.name);
            for method in &class.methods {
                let _ = writeln!(out, "method {}", method.name);
                for ins in &method.instructions {
                    let _ = writeln!(out, "    {}", ins.text);
                }
                out.push_str("end\n");
            }
            out.push_str("end\n");
        }
        out
    }

    pub fn method_count(&self) -> usize {
        self.classes.iter().map(|c| c.methods.len()).sum()
    }
}

impl Instruction {
    /// Parses one trimmed instruction line.
    pub fn parse_line(text: &str, line: usize, column: usize) -> Result<Instruction> {
        let kind = parse_kind(text).map_err(|message| Error::Parse { line, message })?;
        Ok(Instruction {
            line,
            column,
            text: text.to_string(),
            kind,
        })
    }
}

fn is_field_opcode(op: &str) -> bool {
    ["iget", "iput", "sget", "sput"]
        .iter()
        .any(|p| op == *p || op.strip_prefix(p).is_some_and(|r| r.starts_with('-')))
}

fn parse_kind(text: &str) -> std::result::Result<InstructionKind, String> {
    let (opcode, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    if opcode.starts_with("invoke-") {
        parse_invoke(opcode, rest)
    } else if opcode == "new-instance" {
        let (reg, class) = rest
            .rsplit_once(',')
            .ok_or_else(|| format!("new-instance expects `<reg>, <class>`, got `{rest}`"))?;
        let (reg, class) = (reg.trim(), class.trim());
        if reg.is_empty() || class.is_empty() {
            return Err(format!(
                "new-instance expects `<reg>, <class>`, got `{rest}`"
            ));
        }
        Ok(InstructionKind::NewInstance {
            register: reg.to_string(),
            class: class.to_string(),
        })
    } else if is_field_opcode(opcode) {
        parse_field(opcode, rest)
    } else {
        Ok(InstructionKind::Other)
    }
}

fn parse_invoke(opcode: &str, rest: &str) -> std::result::Result<InstructionKind, String> {
    let malformed = || format!("{opcode} expects `{{<regs>}}, <call>(<args>)<ret>`, got `{rest}`");
    if !rest.starts_with('{') {
        return Err(malformed());
    }
    let close = rest.find('}').ok_or_else(malformed)?;
    let registers = rest[1..close].trim().to_string();
    let after = rest[close + 1..].trim_start();
    let spec = after.strip_prefix(',').ok_or_else(malformed)?.trim();
    if spec.is_empty() {
        return Err(malformed());
    }
    let (call, args, ret) = match spec.find('(') {
        None => (spec.to_string(), None, None),
        Some(open) => {
            let close = spec[open..]
                .find(')')
                .map(|i| i + open)
                .ok_or_else(malformed)?;
            let call = spec[..open].trim();
            if call.is_empty() {
                return Err(malformed());
            }
            let ret = spec[close + 1..].trim();
            (
                call.to_string(),
                Some(split_args(&spec[open + 1..close])),
                (!ret.is_empty()).then(|| ret.to_string()),
            )
        }
    };
    Ok(InstructionKind::Invoke {
        opcode: opcode.to_string(),
        registers,
        call,
        args,
        ret,
    })
}

/// Comma-separated argument lists, or packed JVM descriptor lists like
/// `Ljava/lang/String;I[B`.
fn split_args(s: &str) -> Vec<String> {
    let s = s.trim();
    if s.is_empty() {
        return Vec::new();
    }
    if s.contains(',') || !s.contains(';') {
        return s
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(str::to_string)
            .collect();
    }
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        while i < bytes.len() && bytes[i] == b'[' {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'L' {
            match s[i..].find(';') {
                Some(end) => i += end + 1,
                None => i = bytes.len(),
            }
        } else {
            i += 1;
        }
        out.push(s[start..i].to_string());
    }
    out
}

fn parse_field(opcode: &str, rest: &str) -> std::result::Result<InstructionKind, String> {
    let malformed = || format!("{opcode} expects `<regs>, <field> <type>`, got `{rest}`");
    let (registers, target) = rest.rsplit_once(',').ok_or_else(malformed)?;
    let target = target.trim();
    let (field, field_type) = match target.split_once(char::is_whitespace) {
        Some((f, t)) => (f.trim(), t.trim()),
        None => target.rsplit_once(':').ok_or_else(malformed)?,
    };
    if field.is_empty() || field_type.is_empty() || registers.trim().is_empty() {
        return Err(malformed());
    }
    Ok(InstructionKind::FieldAccess {
        opcode: opcode.to_string(),
        registers: registers.trim().to_string(),
        field: field.to_string(),
        field_type: field_type.to_string(),
    })
}

/// Parses assembly text into a program tree.
pub fn parse(text: &str) -> Result<Program> {
    let mut program = Program::default();
    let mut class: Option<ClassNode> = None;
    let mut method: Option<MethodNode> = None;
    let err = |line: usize, message: String| Error::Parse { line, message };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with("//") {
            continue;
        }
        let column = raw.len() - raw.trim_start().len() + 1;
        let (head, tail) = match trimmed.find(char::is_whitespace) {
            Some(i) => (&trimmed[..i], trimmed[i..].trim()),
            None => (trimmed, ""),
        };
        match head {
            "class" => {
                if let Some(m) = &method {
                    return Err(err(
                        line,
                        format!("class declared inside method `{}`", m.name),
                    ));
                }
                if let Some(c) = &class {
                    return Err(err(
                        line,
                        format!("class declared inside class `{}`", c.name),
                    ));
                }
                if tail.is_empty() {
                    return Err(err(line, "class without a name".into()));
                }
                class = Some(ClassNode {
                    name: tail.to_string(),
                    line,
                    methods: Vec::new(),
                });
            }
            "method" => {
                if let Some(m) = &method {
                    return Err(err(
                        line,
                        format!("method declared inside method `{}`", m.name),
                    ));
                }
                if class.is_none() {
                    return Err(err(line, "method declared outside of a class".into()));
                }
                if tail.is_empty() {
                    return Err(err(line, "method without a name".into()));
                }
                method = Some(MethodNode {
                    name: tail.to_string(),
                    line,
                    instructions: Vec::new(),
                });
            }
            "end" if tail.is_empty() => {
                if let Some(m) = method.take() {
                    class
                        .as_mut()
                        .expect("method implies class")
                        .methods
                        .push(m);
                } else if let Some(c) = class.take() {
                    program.classes.push(c);
                } else {
                    return Err(err(line, "`end` without an open block".into()));
                }
            }
            _ => match &mut method {
                Some(m) => m
                    .instructions
                    .push(Instruction::parse_line(trimmed, line, column)?),
                None if class.is_some() => {}
                None => {
                    return Err(err(
                        line,
                        format!("instruction outside of a method: `{trimmed}`"),
                    ))
                }
            },
        }
    }
    if let Some(m) = method {
        return Err(err(
            m.line,
            format!("unterminated method block `{}`", m.name),
        ));
    }
    if let Some(c) = class {
        return Err(err(
            c.line,
            format!("unterminated class block `{}`", c.name),
        ));
    }
    Ok(program)
}
