//! Class hierarchy parsed from (and written back to) a subset of the OBO flat-file format.
//!
//! Only `[Term]` stanzas are interpreted. Of their tags, `id`, `name`, `is_a`,
//! `is_obsolete` and the SMILES `property_value` are understood; every other
//! line is kept verbatim and re-emitted on serialization. Non-`[Term]` stanzas
//! and header lines are preserved as raw text.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Property key ChEBI uses for SMILES annotations.
pub const CHEBI_SMILES_KEY: &str = "http://purl.obolibrary.org/obo/chebi/smiles";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate class id {id}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DuplicateId { id: ClassId, line: Option<usize> },
    #[error("class {child} has is_a to undeclared class {parent}")]
    DanglingParent { child: ClassId, parent: ClassId },
    #[error("subsumption cycle: {}", format_cycle(.path))]
    Cycle { path: Vec<ClassId> },
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("class {class} references unknown superclass {superclass}")]
    UnknownSuperclass { class: ClassId, superclass: ClassId },
    #[error("invalid class: {0}")]
    InvalidClass(String),
}

fn format_cycle(path: &[ClassId]) -> String {
    path.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" -> ")
}

/// Opaque, non-empty class identifier such as `CHEBI:22908`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(value: impl Into<String>) -> Result<Self, OntologyError> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(OntologyError::InvalidClass("empty class id".into()));
        }
        if value.chars().any(char::is_whitespace) {
            return Err(OntologyError::InvalidClass(format!("class id {value:?} contains whitespace")));
        }
        Ok(ClassId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Trailing decimal digits of the id, if any (`CHEBI:22908` -> 22908).
    pub fn numeric_suffix(&self) -> Option<u64> {
        let digits: String = self
            .0
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        digits.parse().ok()
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ClassId {
    type Err = OntologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OntologyClass {
    pub id: ClassId,
    pub name: String,
    pub smiles: Option<String>,
    pub parents: BTreeSet<ClassId>,
    pub obsolete: bool,
    /// Stanza lines this crate does not interpret, in original order.
    pub extra_lines: Vec<String>,
}

impl OntologyClass {
    pub fn new(id: ClassId, name: impl Into<String>) -> Self {
        OntologyClass {
            id,
            name: name.into(),
            smiles: None,
            parents: BTreeSet::new(),
            obsolete: false,
            extra_lines: Vec::new(),
        }
    }

    pub fn with_smiles(mut self, smiles: impl Into<String>) -> Self {
        let s = smiles.into();
        self.smiles = if s.is_empty() { None } else { Some(s) };
        self
    }

    pub fn with_parents<I: IntoIterator<Item = ClassId>>(mut self, parents: I) -> Self {
        self.parents.extend(parents);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub smiles_key: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { smiles_key: CHEBI_SMILES_KEY.to_string() }
    }
}

/// Acyclic class hierarchy. Immutable once built; mutating operations return new graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct OntologyGraph {
    classes: BTreeMap<ClassId, OntologyClass>,
    children: BTreeMap<ClassId, BTreeSet<ClassId>>,
    header: Vec<String>,
    raw_stanzas: Vec<String>,
    smiles_key: String,
}

impl Default for OntologyGraph {
    fn default() -> Self {
        OntologyGraph {
            classes: BTreeMap::new(),
            children: BTreeMap::new(),
            header: Vec::new(),
            raw_stanzas: Vec::new(),
            smiles_key: CHEBI_SMILES_KEY.to_string(),
        }
    }
}

impl OntologyGraph {
    /// Builds a validated graph from classes. Fails on duplicate ids,
    /// dangling parents, self-parents and cycles.
    pub fn from_classes<I: IntoIterator<Item = OntologyClass>>(classes: I) -> Result<Self, OntologyError> {
        let mut map = BTreeMap::new();
        for class in classes {
            if map.contains_key(&class.id) {
                return Err(OntologyError::DuplicateId { id: class.id, line: None });
            }
            map.insert(class.id.clone(), class);
        }
        Self::assemble(map, Vec::new(), Vec::new(), CHEBI_SMILES_KEY.to_string())
    }

    fn assemble(
        classes: BTreeMap<ClassId, OntologyClass>,
        header: Vec<String>,
        raw_stanzas: Vec<String>,
        smiles_key: String,
    ) -> Result<Self, OntologyError> {
        let mut children: BTreeMap<ClassId, BTreeSet<ClassId>> = BTreeMap::new();
        for class in classes.values() {
            if class.smiles.as_deref() == Some("") {
                return Err(OntologyError::InvalidClass(format!("class {} has an empty SMILES", class.id)));
            }
            for parent in &class.parents {
                if parent == &class.id {
                    return Err(OntologyError::Cycle { path: vec![class.id.clone(), class.id.clone()] });
                }
                if !classes.contains_key(parent) {
                    return Err(OntologyError::DanglingParent { child: class.id.clone(), parent: parent.clone() });
                }
                children.entry(parent.clone()).or_default().insert(class.id.clone());
            }
        }
        let graph = OntologyGraph { classes, children, header, raw_stanzas, smiles_key };
        if let Some(path) = graph.find_cycle() {
            return Err(OntologyError::Cycle { path });
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: &ClassId) -> Option<&OntologyClass> {
        self.classes.get(id)
    }

    pub fn contains(&self, id: &ClassId) -> bool {
        self.classes.contains_key(id)
    }

    /// Classes in id order.
    pub fn classes(&self) -> impl Iterator<Item = &OntologyClass> {
        self.classes.values()
    }

    pub fn children(&self, id: &ClassId) -> impl Iterator<Item = &ClassId> {
        self.children.get(id).into_iter().flatten()
    }

    pub fn is_leaf(&self, id: &ClassId) -> bool {
        self.children.get(id).map_or(true, BTreeSet::is_empty)
    }

    pub fn edge_count(&self) -> usize {
        self.classes.values().map(|c| c.parents.len()).sum()
    }

    pub fn smiles_key(&self) -> &str {
        &self.smiles_key
    }

    /// Transitive superclasses of `id`, excluding `id`.
    pub fn ancestors(&self, id: &ClassId) -> Result<BTreeSet<ClassId>, OntologyError> {
        let start = self.classes.get(id).ok_or_else(|| OntologyError::UnknownClass(id.clone()))?;
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&ClassId> = start.parents.iter().collect();
        while let Some(next) = queue.pop_front() {
            if seen.insert(next.clone()) {
                if let Some(class) = self.classes.get(next) {
                    queue.extend(class.parents.iter());
                }
            }
        }
        Ok(seen)
    }

    /// Non-obsolete leaves that carry a SMILES annotation.
    pub fn structured_leaves(&self) -> BTreeSet<ClassId> {
        self.classes
            .values()
            .filter(|c| !c.obsolete && c.smiles.is_some() && self.is_leaf(&c.id))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Ids in an order where every class precedes its children (Kahn's algorithm).
    /// Returns `None` if the relation has a cycle.
    pub fn topological_order(&self) -> Option<Vec<ClassId>> {
        let mut indegree: BTreeMap<&ClassId, usize> =
            self.classes.values().map(|c| (&c.id, c.parents.len())).collect();
        let mut ready: VecDeque<&ClassId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(self.classes.len());
        while let Some(id) = ready.pop_front() {
            order.push(id.clone());
            for child in self.children(id) {
                let d = indegree.get_mut(child)?;
                *d -= 1;
                if *d == 0 {
                    ready.push_back(child);
                }
            }
        }
        (order.len() == self.classes.len()).then_some(order)
    }

    fn find_cycle(&self) -> Option<Vec<ClassId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<&ClassId, Mark> = BTreeMap::new();
        for root in self.classes.keys() {
            if marks.contains_key(root) {
                continue;
            }
            // (node, iterator position over parents)
            let mut stack: Vec<(&ClassId, Vec<&ClassId>, usize)> = Vec::new();
            marks.insert(root, Mark::Open);
            stack.push((root, self.classes[root].parents.iter().collect(), 0));
            while let Some((node, parents, pos)) = stack.last_mut() {
                if *pos == parents.len() {
                    marks.insert(node, Mark::Done);
                    stack.pop();
                    continue;
                }
                let next = parents[*pos];
                *pos += 1;
                match marks.get(next) {
                    Some(Mark::Done) => {}
                    Some(Mark::Open) => {
                        let start = stack.iter().position(|(n, _, _)| *n == next).unwrap_or(0);
                        let mut path: Vec<ClassId> = stack[start..].iter().map(|(n, _, _)| (*n).clone()).collect();
                        path.push(next.clone());
                        return Some(path);
                    }
                    None => {
                        marks.insert(next, Mark::Open);
                        let grand = self.classes.get(next).map(|c| c.parents.iter().collect()).unwrap_or_default();
                        stack.push((next, grand, 0));
                    }
                }
            }
        }
        None
    }

    /// Returns a new graph with each addition inserted as a leaf under the given superclasses.
    pub fn insert_subsumptions(
        &self,
        additions: Vec<(OntologyClass, Vec<ClassId>)>,
    ) -> Result<OntologyGraph, OntologyError> {
        if additions.is_empty() {
            return Ok(self.clone());
        }
        let mut classes = self.classes.clone();
        let mut fresh: BTreeSet<&ClassId> = BTreeSet::new();
        for (class, _) in &additions {
            if classes.contains_key(&class.id) || !fresh.insert(&class.id) {
                return Err(OntologyError::DuplicateId { id: class.id.clone(), line: None });
            }
        }
        for (mut class, supers) in additions {
            class.parents.extend(supers);
            for parent in &class.parents {
                if !self.classes.contains_key(parent) {
                    return Err(OntologyError::UnknownSuperclass { class: class.id.clone(), superclass: parent.clone() });
                }
            }
            classes.insert(class.id.clone(), class);
        }
        Self::assemble(classes, self.header.clone(), self.raw_stanzas.clone(), self.smiles_key.clone())
    }

    /// Serializes with `is_a` comments naming the parent class.
    pub fn to_obo(&self) -> String {
        self.to_obo_with(|_, parent| self.get(parent).map(|p| p.name.clone()).filter(|n| !n.is_empty()))
    }

    /// Serializes stanzas sorted by id; `edge_comment(child, parent)` supplies the
    /// text written after `!` on each `is_a` line.
    pub fn to_obo_with<F>(&self, edge_comment: F) -> String
    where
        F: Fn(&ClassId, &ClassId) -> Option<String>,
    {
        let mut out = String::new();
        for line in &self.header {
            out.push_str(line);
            out.push('\n');
        }
        for class in self.classes.values() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str("[Term]\n");
            out.push_str(&format!("id: {}\n", class.id));
            if !class.name.is_empty() {
                out.push_str(&format!("name: {}\n", class.name));
            }
            for parent in &class.parents {
                match edge_comment(&class.id, parent) {
                    Some(comment) => out.push_str(&format!("is_a: {parent} ! {comment}\n")),
                    None => out.push_str(&format!("is_a: {parent}\n")),
                }
            }
            if let Some(smiles) = &class.smiles {
                out.push_str(&format!(
                    "property_value: {} \"{}\" xsd:string\n",
                    self.smiles_key,
                    escape_quoted(smiles)
                ));
            }
            if class.obsolete {
                out.push_str("is_obsolete: true\n");
            }
            for line in &class.extra_lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        for stanza in &self.raw_stanzas {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(stanza);
        }
        out
    }
}

fn escape_quoted(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            _ => out.push(c),
        }
    }
    out
}

/// Parses `"..."` at the start of `s`; returns the unescaped value and the remainder.
fn parse_quoted(s: &str) -> Option<(String, &str)> {
    let rest = s.strip_prefix('"')?;
    let mut value = String::new();
    let mut chars = rest.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Some((value, &rest[i + 1..])),
            '\\' => match chars.next() {
                Some((_, '"')) => value.push('"'),
                Some((_, '\\')) => value.push('\\'),
                Some((_, other)) => {
                    value.push('\\');
                    value.push(other);
                }
                None => return None,
            },
            _ => value.push(c),
        }
    }
    None
}

enum Section {
    Header,
    Term { start_line: usize, class: Option<OntologyClass>, pending: Vec<(usize, String)> },
    Raw(String),
}

pub fn parse_obo(text: &str) -> Result<OntologyGraph, OntologyError> {
    parse_obo_with(text, &ParseOptions::default())
}

pub fn parse_obo_with(text: &str, options: &ParseOptions) -> Result<OntologyGraph, OntologyError> {
    let mut header = Vec::new();
    let mut raw_stanzas = Vec::new();
    let mut classes: BTreeMap<ClassId, OntologyClass> = BTreeMap::new();
    let mut section = Section::Header;

    let finish = |section: Section,
                      classes: &mut BTreeMap<ClassId, OntologyClass>,
                      raw: &mut Vec<String>|
     -> Result<(), OntologyError> {
        match section {
            Section::Header => Ok(()),
            Section::Raw(text) => {
                raw.push(text);
                Ok(())
            }
            Section::Term { start_line, class, pending } => {
                let mut class = class.ok_or_else(|| OntologyError::Syntax {
                    line: start_line,
                    message: "[Term] stanza without id".into(),
                })?;
                class.extra_lines.extend(pending.into_iter().map(|(_, l)| l));
                if classes.contains_key(&class.id) {
                    return Err(OntologyError::DuplicateId { id: class.id, line: Some(start_line) });
                }
                classes.insert(class.id.clone(), class);
                Ok(())
            }
        }
    };

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') || trimmed.len() < 3 {
                return Err(OntologyError::Syntax { line: lineno, message: format!("malformed stanza header {trimmed:?}") });
            }
            let prev = std::mem::replace(&mut section, Section::Header);
            finish(prev, &mut classes, &mut raw_stanzas)?;
            section = if trimmed == "[Term]" {
                Section::Term { start_line: lineno, class: None, pending: Vec::new() }
            } else {
                Section::Raw(format!("{trimmed}\n"))
            };
            continue;
        }
        match &mut section {
            Section::Header => {
                if !trimmed.is_empty() {
                    header.push(line.to_string());
                }
            }
            Section::Raw(buf) => {
                if !trimmed.is_empty() {
                    buf.push_str(line);
                    buf.push('\n');
                }
            }
            Section::Term { class, pending, .. } => {
                if trimmed.is_empty() {
                    continue;
                }
                if trimmed.starts_with('!') {
                    pending.push((lineno, line.to_string()));
                    continue;
                }
                let (tag, value) = trimmed.split_once(':').ok_or_else(|| OntologyError::Syntax {
                    line: lineno,
                    message: format!("expected `tag: value`, found {trimmed:?}"),
                })?;
                let tag = tag.trim();
                let value = value.trim();
                if tag == "id" {
                    if class.is_some() {
                        return Err(OntologyError::Syntax { line: lineno, message: "second id in stanza".into() });
                    }
                    let id = ClassId::new(value)
                        .map_err(|e| OntologyError::Syntax { line: lineno, message: e.to_string() })?;
                    *class = Some(OntologyClass::new(id, ""));
                    continue;
                }
                let Some(current) = class.as_mut() else {
                    return Err(OntologyError::Syntax { line: lineno, message: format!("`{tag}` before `id` in stanza") });
                };
                match tag {
                    "name" => current.name = value.to_string(),
                    "is_a" => {
                        let target = value.split('!').next().unwrap_or("").trim();
                        let target = target.split('{').next().unwrap_or("").trim();
                        let parent = ClassId::new(target)
                            .map_err(|e| OntologyError::Syntax { line: lineno, message: format!("is_a: {e}") })?;
                        current.parents.insert(parent);
                    }
                    "is_obsolete" => match value {
                        "true" => current.obsolete = true,
                        "false" => current.obsolete = false,
                        other => {
                            return Err(OntologyError::Syntax {
                                line: lineno,
                                message: format!("is_obsolete expects true/false, found {other:?}"),
                            })
                        }
                    },
                    "property_value" => {
                        let (key, rest) = value.split_once(char::is_whitespace).unwrap_or((value, ""));
                        if key == options.smiles_key {
                            let (smiles, _datatype) = parse_quoted(rest.trim_start()).ok_or_else(|| OntologyError::Syntax {
                                line: lineno,
                                message: "SMILES property_value needs a quoted value".into(),
                            })?;
                            if !smiles.is_empty() {
                                current.smiles = Some(smiles);
                            }
                        } else {
                            current.extra_lines.push(line.to_string());
                        }
                    }
                    _ => current.extra_lines.push(line.to_string()),
                }
            }
        }
    }
    finish(section, &mut classes, &mut raw_stanzas)?;
    OntologyGraph::assemble(classes, header, raw_stanzas, options.smiles_key.clone())
}
