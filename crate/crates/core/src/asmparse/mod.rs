//! Dalvik-style assembly text → canonical instruction sequences → token ids.
//!
//! Input grammar (line oriented, UTF-8):
//!
//! ```text
//! class <name>                 opens a class
//! method <name>                opens a method (only inside a class)
//! end                          closes the innermost open block
//! invoke-<kind> {<regs>}, <call>(<arg1>,<arg2>,…)<ret>
//! new-instance <reg>, <class>
//! <iget|iput|sget|sput>[-suffix] <regs>, <field> <type>
//! // comment
//! ```
//!
//! Any other non-empty line inside a method is kept as an `Other`
//! instruction and contributes nothing to the canonical form.

mod canonical;
mod parser;
mod vocab;

pub use canonical::{canonicalize, normalize_class, normalize_member, owner_class};
pub use parser::{parse, ClassNode, Instruction, InstructionKind, MethodNode, Program};
pub use vocab::{Vocabulary, FIRST_ASSET_ID, PAD_ID, UNUSED_ID};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Ordered canonical token ids of one method. Identifiers are not kept, so
/// renaming classes or methods leaves the representation unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodSequence {
    pub tokens: Vec<u32>,
}

/// Multiset of per-method sequences for one app; duplicates are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRepresentation {
    pub sequences: Vec<MethodSequence>,
}

impl AppRepresentation {
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_streams(&self) -> impl Iterator<Item = &[u32]> {
        self.sequences.iter().map(|s| s.tokens.as_slice())
    }

    /// Token sequences sorted, i.e. the multiset with method names and order erased.
    pub fn sequence_multiset(&self) -> Vec<Vec<u32>> {
        let mut v: Vec<Vec<u32>> = self.sequences.iter().map(|s| s.tokens.clone()).collect();
        v.sort();
        v
    }

    /// All tokens sorted, i.e. the token multiset with sequence structure erased.
    pub fn token_multiset(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .sequences
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Maps every method to its in-vocabulary canonical tokens.
///
/// Asset names missing from `vocab` are dropped; methods left without
/// tokens are omitted.
pub fn tokenize(program: &Program, vocab: &Vocabulary) -> AppRepresentation {
    let mut sequences = Vec::new();
    for class in &program.classes {
        for method in &class.methods {
            let tokens: Vec<u32> = method
                .instructions
                .iter()
                .flat_map(canonicalize)
                .filter_map(|name| vocab.get(&name))
                .collect();
            if !tokens.is_empty() {
                sequences.push(MethodSequence { tokens });
            }
        }
    }
    AppRepresentation { sequences }
}

/// Canonical asset names of a program that do not belong to a class the
/// program itself declares. This is how a vocabulary is derived from a corpus
/// when no platform asset list is available.
pub fn platform_assets(program: &Program) -> BTreeSet<String> {
    let declared: BTreeSet<String> = program
        .classes
        .iter()
        .filter_map(|c| normalize_class(&c.name))
        .collect();
    program
        .classes
        .iter()
        .flat_map(|c| &c.methods)
        .flat_map(|m| &m.instructions)
        .flat_map(canonicalize)
        .filter(|name| !declared.contains(owner_class(name)))
        .collect()
}
