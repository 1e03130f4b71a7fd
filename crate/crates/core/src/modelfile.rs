//! Text format for subsystem-tree models.
//!
//! A model file declares variables, subsystems (optionally stamped out from a
//! class definition), the tree of parent edges (with optional nested groups),
//! and an optional relevance-weights block. Dense tables list one value per
//! assignment with the *last listed variable moving fastest*, in the order the
//! variables are written in the subsystem block (internal list, then external
//! list). Sparse tables name each assignment explicitly. Unlisted sparse
//! reward entries default to zero; every CPT row must be present.
//!
//! `serialize_model` writes the canonical form: variables in declaration
//! order, subsystems in tree order with dense tables, groups and classes
//! expanded away. Parsing the canonical form reproduces the tree exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{
    BasicSubsystem, HierarchicalNode, Model, ModelError, RelevanceWeights, Scope, SubsystemTree,
    VarId, VariableDecl,
};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ParseError {
    fn at(pos: Pos, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax { line: pos.line, col: pos.col, msg: msg.into() }
    }
}

/// Result of parsing a model file: the flattened tree plus weights (all-ones
/// when the file has no weights block).
#[derive(Debug, Clone)]
pub struct ParsedModel {
    pub tree: SubsystemTree,
    pub weights: RelevanceWeights,
}

pub fn parse_model(text: &str) -> Result<ParsedModel, ParseError> {
    Parser::new(text)?.file()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pos {
    line: usize,
    col: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    LBrace,
    RBrace,
    Colon,
    Equals,
    Arrow,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{}`", s),
            Tok::LBrace => "`{`".to_string(),
            Tok::RBrace => "`}`".to_string(),
            Tok::Colon => "`:`".to_string(),
            Tok::Equals => "`=`".to_string(),
            Tok::Arrow => "`->`".to_string(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1usize;
    let mut col = 1usize;
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        let bump = |c: char, line: &mut usize, col: &mut usize| {
            if c == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
        };
        match c {
            '#' => {
                while let Some(&c) = chars.peek() {
                    chars.next();
                    bump(c, &mut line, &mut col);
                    if c == '\n' {
                        break;
                    }
                }
            }
            c if c.is_whitespace() => {
                chars.next();
                bump(c, &mut line, &mut col);
            }
            '{' => {
                chars.next();
                bump('{', &mut line, &mut col);
                out.push((Tok::LBrace, pos));
            }
            '}' => {
                chars.next();
                bump('}', &mut line, &mut col);
                out.push((Tok::RBrace, pos));
            }
            ':' => {
                chars.next();
                bump(':', &mut line, &mut col);
                out.push((Tok::Colon, pos));
            }
            '=' => {
                chars.next();
                bump('=', &mut line, &mut col);
                out.push((Tok::Equals, pos));
            }
            c if c.is_alphanumeric() || "_.+-".contains(c) => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if !(c.is_alphanumeric() || "_.+-".contains(c)) {
                        break;
                    }
                    // `->` terminates a word so edges can be written M2->M1.
                    if c == '-' {
                        let mut ahead = chars.clone();
                        ahead.next();
                        if ahead.peek() == Some(&'>') {
                            break;
                        }
                    }
                    word.push(c);
                    chars.next();
                    bump(c, &mut line, &mut col);
                }
                if word.is_empty() {
                    // A lone `-` followed by `>`.
                    chars.next();
                    bump('-', &mut line, &mut col);
                    match chars.peek() {
                        Some('>') => {
                            chars.next();
                            bump('>', &mut line, &mut col);
                            out.push((Tok::Arrow, pos));
                        }
                        _ => return Err(ParseError::at(pos, "stray `-`")),
                    }
                } else {
                    out.push((Tok::Ident(word), pos));
                }
            }
            other => {
                return Err(ParseError::at(pos, format!("unexpected character `{}`", other)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum TableSpec {
    Dense(Vec<f64>, Pos),
    /// Each entry: named assignment, value list, position of the entry.
    Sparse(Vec<(Vec<(String, String)>, Vec<f64>, Pos)>, Pos),
}

#[derive(Debug, Clone)]
struct ClassDef {
    /// Formal slots: (slot name, cardinality), internal then external.
    internal: Vec<(String, usize)>,
    external: Vec<(String, usize)>,
    reward: TableSpec,
    cpt: TableSpec,
}

#[derive(Debug, Clone)]
struct SubsystemDef {
    name: String,
    pos: Pos,
    class: Option<(String, Pos)>,
    internal: Vec<String>,
    external: Vec<String>,
    reward: Option<TableSpec>,
    cpt: Option<TableSpec>,
}

#[derive(Debug)]
enum TreeEntry {
    Node { name: String, parent: Option<String>, pos: Pos },
    Group { name: String, parent: Option<String>, entries: Vec<TreeEntry>, pos: Pos },
}

impl TreeEntry {
    fn name(&self) -> &str {
        match self {
            TreeEntry::Node { name, .. } | TreeEntry::Group { name, .. } => name,
        }
    }

    fn parent(&self) -> Option<&str> {
        match self {
            TreeEntry::Node { parent, .. } | TreeEntry::Group { parent, .. } => parent.as_deref(),
        }
    }

    fn pos(&self) -> Pos {
        match self {
            TreeEntry::Node { pos, .. } | TreeEntry::Group { pos, .. } => *pos,
        }
    }
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    end: Pos,
}

impl Parser {
    fn new(text: &str) -> Result<Parser, ParseError> {
        let toks = tokenize(text)?;
        let end = toks.last().map(|&(_, p)| p).unwrap_or(Pos { line: 1, col: 1 });
        Ok(Parser { toks, at: 0, end })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(t, _)| t)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.at + 1).map(|(t, _)| t)
    }

    fn pos(&self) -> Pos {
        self.toks.get(self.at).map(|&(_, p)| p).unwrap_or(self.end)
    }

    fn next(&mut self, what: &str) -> Result<(Tok, Pos), ParseError> {
        match self.toks.get(self.at) {
            Some((t, p)) => {
                self.at += 1;
                Ok((t.clone(), *p))
            }
            None => Err(ParseError::at(self.end, format!("expected {}, found end of file", what))),
        }
    }

    fn expect(&mut self, want: Tok) -> Result<Pos, ParseError> {
        let (t, p) = self.next(&want.describe())?;
        if t == want {
            Ok(p)
        } else {
            Err(ParseError::at(p, format!("expected {}, found {}", want.describe(), t.describe())))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), ParseError> {
        let (t, p) = self.next(what)?;
        match t {
            Tok::Ident(s) => Ok((s, p)),
            other => {
                Err(ParseError::at(p, format!("expected {}, found {}", what, other.describe())))
            }
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<Pos, ParseError> {
        let (s, p) = self.ident(&format!("`{}`", kw))?;
        if s == kw {
            Ok(p)
        } else {
            Err(ParseError::at(p, format!("expected `{}`, found `{}`", kw, s)))
        }
    }

    fn number(&mut self, what: &str) -> Result<(f64, Pos), ParseError> {
        let (s, p) = self.ident(what)?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((v, p)),
            _ => Err(ParseError::at(p, format!("expected {}, found `{}`", what, s))),
        }
    }

    fn count(&mut self, what: &str) -> Result<(usize, Pos), ParseError> {
        let (s, p) = self.ident(what)?;
        match s.parse::<usize>() {
            Ok(v) if v >= 1 => Ok((v, p)),
            _ => Err(ParseError::at(p, format!("expected {}, found `{}`", what, s))),
        }
    }

    fn file(mut self) -> Result<ParsedModel, ParseError> {
        self.keyword("hfmdp").map_err(|e| match e {
            ParseError::Syntax { line, col, .. } => ParseError::Syntax {
                line,
                col,
                msg: "model files start with a `hfmdp <version>` header".to_string(),
            },
            other => other,
        })?;
        let (ver, vpos) = self.ident("format version")?;
        if ver != "1" {
            return Err(ParseError::at(vpos, format!("unsupported format version `{}`", ver)));
        }

        let mut discount: Option<f64> = None;
        let mut decls: Vec<VariableDecl> = Vec::new();
        let mut classes: BTreeMap<String, ClassDef> = BTreeMap::new();
        let mut subsystems: Vec<SubsystemDef> = Vec::new();
        let mut tree_entries: Option<Vec<TreeEntry>> = None;
        let mut weight_lines: Option<Vec<(String, Vec<f64>, Pos)>> = None;

        while self.peek().is_some() {
            let (kw, kpos) = self.ident("a section keyword")?;
            match kw.as_str() {
                "discount" => {
                    if discount.is_some() {
                        return Err(ParseError::at(kpos, "duplicate discount"));
                    }
                    let (v, vp) = self.number("a discount value")?;
                    if !(0.0..1.0).contains(&v) {
                        return Err(ParseError::at(vp, format!("discount {} is not in [0, 1)", v)));
                    }
                    discount = Some(v);
                }
                "var" => {
                    let (name, _) = self.ident("a variable name")?;
                    let mut values = Vec::new();
                    while let Some(Tok::Ident(_)) = self.peek() {
                        // A bare ident list ends where the next section starts.
                        if self.section_starts_here() {
                            break;
                        }
                        values.push(self.ident("a domain value")?.0);
                    }
                    if values.is_empty() {
                        return Err(ParseError::at(
                            self.pos(),
                            format!("variable {} lists no domain values", name),
                        ));
                    }
                    decls.push(VariableDecl::new(name, values));
                }
                "class" => {
                    let (name, npos) = self.ident("a class name")?;
                    if classes.contains_key(&name) {
                        return Err(ParseError::at(npos, format!("duplicate class {}", name)));
                    }
                    let def = self.class_body(&name)?;
                    classes.insert(name, def);
                }
                "subsystem" => {
                    let def = self.subsystem_body()?;
                    subsystems.push(def);
                }
                "tree" => {
                    if tree_entries.is_some() {
                        return Err(ParseError::at(kpos, "duplicate tree block"));
                    }
                    tree_entries = Some(self.tree_body()?);
                }
                "weights" => {
                    if weight_lines.is_some() {
                        return Err(ParseError::at(kpos, "duplicate weights block"));
                    }
                    weight_lines = Some(self.weights_body()?);
                }
                other => {
                    return Err(ParseError::at(kpos, format!("unknown section `{}`", other)));
                }
            }
        }

        let discount = discount
            .ok_or_else(|| ParseError::at(self.end, "model file declares no discount"))?;
        let tree_entries = tree_entries
            .ok_or_else(|| ParseError::at(self.end, "model file declares no tree block"))?;
        build(decls, classes, subsystems, tree_entries, weight_lines, discount)
    }

    /// True when the upcoming ident begins a new top-level section.
    fn section_starts_here(&self) -> bool {
        matches!(
            self.peek(),
            Some(Tok::Ident(s))
                if matches!(s.as_str(), "discount" | "var" | "class" | "subsystem" | "tree" | "weights")
        )
    }

    fn class_body(&mut self, class: &str) -> Result<ClassDef, ParseError> {
        self.expect(Tok::LBrace)?;
        let mut internal = Vec::new();
        let mut external = Vec::new();
        let mut reward = None;
        let mut cpt = None;
        loop {
            let (t, p) = self.next("a class item or `}`")?;
            match t {
                Tok::RBrace => break,
                Tok::Ident(kw) => match kw.as_str() {
                    "internal" | "external" => {
                        let list = if kw == "internal" { &mut internal } else { &mut external };
                        while let Some(Tok::Ident(_)) = self.peek() {
                            if self.class_item_starts_here() {
                                break;
                            }
                            let (slot, _) = self.ident("a slot name")?;
                            let (card, _) = self.count("a slot cardinality")?;
                            list.push((slot, card));
                        }
                    }
                    "reward" => reward = Some(self.table_body(1)?),
                    "cpt" => cpt = Some(self.table_body(0)?),
                    other => {
                        return Err(ParseError::at(p, format!("unknown class item `{}`", other)));
                    }
                },
                other => {
                    return Err(ParseError::at(
                        p,
                        format!("expected a class item or `}}`, found {}", other.describe()),
                    ));
                }
            }
        }
        if internal.is_empty() {
            return Err(ParseError::at(self.pos(), format!("class {} has no internal slots", class)));
        }
        let reward = reward.ok_or_else(|| {
            ParseError::at(self.pos(), format!("class {} defines no reward table", class))
        })?;
        let cpt = cpt.ok_or_else(|| {
            ParseError::at(self.pos(), format!("class {} defines no cpt table", class))
        })?;
        Ok(ClassDef { internal, external, reward, cpt })
    }

    fn class_item_starts_here(&self) -> bool {
        matches!(
            self.peek(),
            Some(Tok::Ident(s))
                if matches!(s.as_str(), "internal" | "external" | "reward" | "cpt")
        )
    }

    fn subsystem_body(&mut self) -> Result<SubsystemDef, ParseError> {
        let (name, pos) = self.ident("a subsystem name")?;
        let class = if self.peek() == Some(&Tok::Colon) {
            self.next("`:`")?;
            Some(self.ident("a class name")?)
        } else {
            None
        };
        self.expect(Tok::LBrace)?;
        let mut internal = Vec::new();
        let mut external = Vec::new();
        let mut reward = None;
        let mut cpt = None;
        loop {
            let (t, p) = self.next("a subsystem item or `}`")?;
            match t {
                Tok::RBrace => break,
                Tok::Ident(kw) => match kw.as_str() {
                    "internal" | "external" => {
                        let list = if kw == "internal" { &mut internal } else { &mut external };
                        while let Some(Tok::Ident(_)) = self.peek() {
                            if self.class_item_starts_here() {
                                break;
                            }
                            list.push(self.ident("a variable name")?.0);
                        }
                    }
                    "reward" => reward = Some(self.table_body(1)?),
                    "cpt" => cpt = Some(self.table_body(0)?),
                    other => {
                        return Err(ParseError::at(p, format!("unknown subsystem item `{}`", other)));
                    }
                },
                other => {
                    return Err(ParseError::at(
                        p,
                        format!("expected a subsystem item or `}}`, found {}", other.describe()),
                    ));
                }
            }
        }
        Ok(SubsystemDef { name, pos, class, internal, external, reward, cpt })
    }

    /// Parses `dense { v ... }` or `sparse { a=0 b=1 : v ... }`. For sparse
    /// rewards `values_per_entry` is 1; 0 means "until the next entry or `}`"
    /// (CPT rows, whose width the caller checks later).
    fn table_body(&mut self, values_per_entry: usize) -> Result<TableSpec, ParseError> {
        let (kind, kpos) = self.ident("`dense` or `sparse`")?;
        self.expect(Tok::LBrace)?;
        match kind.as_str() {
            "dense" => {
                let mut values = Vec::new();
                loop {
                    if self.peek() == Some(&Tok::RBrace) {
                        self.next("`}`")?;
                        break;
                    }
                    values.push(self.number("a table value")?.0);
                }
                Ok(TableSpec::Dense(values, kpos))
            }
            "sparse" => {
                let mut entries = Vec::new();
                loop {
                    if self.peek() == Some(&Tok::RBrace) {
                        self.next("`}`")?;
                        break;
                    }
                    let epos = self.pos();
                    let mut pairs = Vec::new();
                    loop {
                        let (var, _) = self.ident("a variable name")?;
                        self.expect(Tok::Equals)?;
                        let (val, _) = self.ident("a domain value")?;
                        pairs.push((var, val));
                        if self.peek() == Some(&Tok::Colon) {
                            self.next("`:`")?;
                            break;
                        }
                    }
                    let mut values = Vec::new();
                    if values_per_entry > 0 {
                        for _ in 0..values_per_entry {
                            values.push(self.number("a table value")?.0);
                        }
                    } else {
                        loop {
                            match self.peek() {
                                Some(Tok::RBrace) | None => break,
                                // The next entry starts at `name=`.
                                Some(Tok::Ident(_)) if self.peek2() == Some(&Tok::Equals) => break,
                                _ => values.push(self.number("a table value")?.0),
                            }
                        }
                    }
                    entries.push((pairs, values, epos));
                }
                Ok(TableSpec::Sparse(entries, kpos))
            }
            other => Err(ParseError::at(kpos, format!("expected `dense` or `sparse`, found `{}`", other))),
        }
    }

    fn tree_body(&mut self) -> Result<Vec<TreeEntry>, ParseError> {
        self.expect(Tok::LBrace)?;
        let mut entries = Vec::new();
        loop {
            let (t, p) = self.next("a tree entry or `}`")?;
            match t {
                Tok::RBrace => break,
                Tok::Ident(word) if word == "group" => {
                    let (name, npos) = self.ident("a group name")?;
                    let parent = if self.peek() == Some(&Tok::Arrow) {
                        self.next("`->`")?;
                        Some(self.ident("a parent name")?.0)
                    } else {
                        None
                    };
                    let inner = self.tree_body()?;
                    entries.push(TreeEntry::Group { name, parent, entries: inner, pos: npos });
                }
                Tok::Ident(name) => {
                    let parent = if self.peek() == Some(&Tok::Arrow) {
                        self.next("`->`")?;
                        Some(self.ident("a parent name")?.0)
                    } else {
                        None
                    };
                    entries.push(TreeEntry::Node { name, parent, pos: p });
                }
                other => {
                    return Err(ParseError::at(
                        p,
                        format!("expected a tree entry or `}}`, found {}", other.describe()),
                    ));
                }
            }
        }
        Ok(entries)
    }

    fn weights_body(&mut self) -> Result<Vec<(String, Vec<f64>, Pos)>, ParseError> {
        self.expect(Tok::LBrace)?;
        let mut lines = Vec::new();
        loop {
            let (t, p) = self.next("a weights entry or `}`")?;
            match t {
                Tok::RBrace => break,
                Tok::Ident(name) => {
                    self.expect(Tok::Colon)?;
                    let mut values = Vec::new();
                    loop {
                        match self.peek() {
                            Some(Tok::RBrace) | None => break,
                            Some(Tok::Ident(_)) if self.peek2() == Some(&Tok::Colon) => break,
                            _ => values.push(self.number("a weight value")?.0),
                        }
                    }
                    lines.push((name, values, p));
                }
                other => {
                    return Err(ParseError::at(
                        p,
                        format!("expected a weights entry or `}}`, found {}", other.describe()),
                    ));
                }
            }
        }
        Ok(lines)
    }
}

/// Reindexes a dense table given over `written` axis order (last fastest)
/// into canonical scope order.
fn reorder_to_canonical(
    model: &Model,
    written: &[VarId],
    scope: &Scope,
    raw: &[f64],
) -> Vec<f64> {
    let n = model.scope_count(scope);
    let pos_of: Vec<usize> =
        written.iter().map(|&id| scope.position(id).unwrap()).collect();
    let cards: Vec<usize> = written.iter().map(|&id| model.card(id)).collect();
    let mut out = vec![0.0; n];
    for (idx, slot) in out.iter_mut().enumerate() {
        let vals = model.values_at(scope, idx);
        let mut raw_idx = 0usize;
        for (k, &p) in pos_of.iter().enumerate() {
            raw_idx = raw_idx * cards[k] + vals[p];
        }
        *slot = raw[raw_idx];
    }
    out
}

/// Index of a named full assignment in `written` axis order.
fn written_index(
    model: &Model,
    sub_name: &str,
    written: &[VarId],
    pairs: &[(String, String)],
    pos: Pos,
) -> Result<usize, ParseError> {
    let mut digit: Vec<Option<usize>> = vec![None; written.len()];
    for (var, val) in pairs {
        let id = model
            .var(var)
            .map_err(|_| ParseError::at(pos, format!("unknown variable {}", var)))?;
        let k = written.iter().position(|&w| w == id).ok_or_else(|| {
            ParseError::at(pos, format!("variable {} is not in the scope of {}", var, sub_name))
        })?;
        let v = model.decl(id).values.iter().position(|x| x == val).ok_or_else(|| {
            ParseError::at(pos, format!("variable {} has no domain value {}", var, val))
        })?;
        if digit[k].replace(v).is_some() {
            return Err(ParseError::at(pos, format!("variable {} assigned twice", var)));
        }
    }
    let mut idx = 0usize;
    for (k, &id) in written.iter().enumerate() {
        let v = digit[k].ok_or_else(|| {
            ParseError::at(
                pos,
                format!("assignment does not fix variable {}", model.decl(id).name),
            )
        })?;
        idx = idx * model.card(id) + v;
    }
    Ok(idx)
}

/// Expands a reward spec into a dense table over `written` order.
fn expand_reward(
    model: &Model,
    sub_name: &str,
    written: &[VarId],
    spec: &TableSpec,
) -> Result<Vec<f64>, ParseError> {
    let n: usize = written.iter().map(|&id| model.card(id)).product();
    match spec {
        TableSpec::Dense(values, pos) => {
            if values.len() != n {
                return Err(ParseError::at(
                    *pos,
                    format!("reward table for {}: expected {} values, found {}", sub_name, n, values.len()),
                ));
            }
            Ok(values.clone())
        }
        TableSpec::Sparse(entries, _) => {
            let mut out = vec![0.0; n];
            let mut seen = vec![false; n];
            for (pairs, values, epos) in entries {
                let idx = written_index(model, sub_name, written, pairs, *epos)?;
                if seen[idx] {
                    return Err(ParseError::at(*epos, format!("duplicate reward entry in {}", sub_name)));
                }
                seen[idx] = true;
                out[idx] = values[0];
            }
            Ok(out)
        }
    }
}

/// Expands a CPT spec into a dense row-major table over `written` scope order
/// with columns over `written_int` next-step order.
fn expand_cpt(
    model: &Model,
    sub_name: &str,
    written: &[VarId],
    written_int: &[VarId],
    spec: &TableSpec,
) -> Result<Vec<f64>, ParseError> {
    let n_rows: usize = written.iter().map(|&id| model.card(id)).product();
    let n_cols: usize = written_int.iter().map(|&id| model.card(id)).product();
    match spec {
        TableSpec::Dense(values, pos) => {
            if values.len() != n_rows * n_cols {
                return Err(ParseError::at(
                    *pos,
                    format!(
                        "cpt table for {}: expected {} x {} = {} values, found {}",
                        sub_name,
                        n_rows,
                        n_cols,
                        n_rows * n_cols,
                        values.len()
                    ),
                ));
            }
            Ok(values.clone())
        }
        TableSpec::Sparse(entries, bpos) => {
            let mut out = vec![0.0; n_rows * n_cols];
            let mut seen = vec![false; n_rows];
            for (pairs, values, epos) in entries {
                let idx = written_index(model, sub_name, written, pairs, *epos)?;
                if values.len() != n_cols {
                    return Err(ParseError::at(
                        *epos,
                        format!(
                            "cpt row for {}: expected {} values, found {}",
                            sub_name,
                            n_cols,
                            values.len()
                        ),
                    ));
                }
                if seen[idx] {
                    return Err(ParseError::at(*epos, format!("duplicate cpt row in {}", sub_name)));
                }
                seen[idx] = true;
                out[idx * n_cols..(idx + 1) * n_cols].copy_from_slice(values);
            }
            if let Some(missing) = seen.iter().position(|&s| !s) {
                let scope_names: Vec<String> = {
                    let mut rem = missing;
                    let mut parts = Vec::new();
                    for &id in written.iter().rev() {
                        let card = model.card(id);
                        parts.push(format!(
                            "{}={}",
                            model.decl(id).name,
                            model.decl(id).values[rem % card]
                        ));
                        rem /= card;
                    }
                    parts.reverse();
                    parts
                };
                return Err(ParseError::at(
                    *bpos,
                    format!("cpt for {} is missing the row {}", sub_name, scope_names.join(" ")),
                ));
            }
            Ok(out)
        }
    }
}

fn build(
    decls: Vec<VariableDecl>,
    classes: BTreeMap<String, ClassDef>,
    subsystems: Vec<SubsystemDef>,
    tree_entries: Vec<TreeEntry>,
    weight_lines: Option<Vec<(String, Vec<f64>, Pos)>>,
    discount: f64,
) -> Result<ParsedModel, ParseError> {
    let model = Model::new(decls)?;

    // Build each subsystem's tables over its written variable order, then
    // reindex into canonical scope order.
    let mut built: BTreeMap<String, BasicSubsystem> = BTreeMap::new();
    let mut written_internals: BTreeMap<String, Vec<VarId>> = BTreeMap::new();
    for def in &subsystems {
        if built.contains_key(&def.name) {
            return Err(ParseError::at(def.pos, format!("duplicate subsystem {}", def.name)));
        }
        let resolve = |names: &[String]| -> Result<Vec<VarId>, ParseError> {
            names
                .iter()
                .map(|n| {
                    model
                        .var(n)
                        .map_err(|_| ParseError::at(def.pos, format!("unknown variable {}", n)))
                })
                .collect()
        };
        let internal_ids = resolve(&def.internal)?;
        let external_ids = resolve(&def.external)?;
        let written: Vec<VarId> =
            internal_ids.iter().chain(external_ids.iter()).copied().collect();
        {
            let mut set = BTreeSet::new();
            for &id in &written {
                if !set.insert(id) {
                    return Err(ParseError::at(
                        def.pos,
                        format!("variable {} listed twice in {}", model.decl(id).name, def.name),
                    ));
                }
            }
        }

        let (reward_raw, cpt_raw) = match &def.class {
            Some((cname, cpos)) => {
                let class = classes.get(cname).ok_or_else(|| {
                    ParseError::at(*cpos, format!("unknown class {}", cname))
                })?;
                if def.reward.is_some() || def.cpt.is_some() {
                    return Err(ParseError::at(
                        def.pos,
                        format!("{} takes its tables from class {}", def.name, cname),
                    ));
                }
                let check = |kind: &str, slots: &[(String, usize)], ids: &[VarId]| {
                    if ids.len() != slots.len() {
                        return Err(ParseError::at(
                            def.pos,
                            format!(
                                "{} binds {} {} variables, class {} has {} slots",
                                def.name,
                                ids.len(),
                                kind,
                                cname,
                                slots.len()
                            ),
                        ));
                    }
                    for (&id, (slot, card)) in ids.iter().zip(slots) {
                        if model.card(id) != *card {
                            return Err(ParseError::at(
                                def.pos,
                                format!(
                                    "variable {} has {} values, slot {} of class {} wants {}",
                                    model.decl(id).name,
                                    model.card(id),
                                    slot,
                                    cname,
                                    card
                                ),
                            ));
                        }
                    }
                    Ok(())
                };
                check("internal", &class.internal, &internal_ids)?;
                check("external", &class.external, &external_ids)?;
                // Class tables are written over formal slots; slots bind
                // positionally, so formal order equals the instance's
                // written order and the tables carry over unchanged. Sparse
                // class tables would need slot-name resolution; dense covers
                // the twin-template use case.
                let dense_only = |spec: &TableSpec, kind: &str| match spec {
                    TableSpec::Dense(v, _) => Ok(v.clone()),
                    TableSpec::Sparse(_, p) => Err(ParseError::at(
                        *p,
                        format!("class {} must give its {} table densely", cname, kind),
                    )),
                };
                (dense_only(&class.reward, "reward")?, dense_only(&class.cpt, "cpt")?)
            }
            None => {
                let reward = def.reward.as_ref().ok_or_else(|| {
                    ParseError::at(def.pos, format!("{} defines no reward table", def.name))
                })?;
                let cpt = def.cpt.as_ref().ok_or_else(|| {
                    ParseError::at(def.pos, format!("{} defines no cpt table", def.name))
                })?;
                (
                    expand_reward(&model, &def.name, &written, reward)?,
                    expand_cpt(&model, &def.name, &written, &internal_ids, cpt)?,
                )
            }
        };

        // Class-supplied tables still need the length check.
        let n_scope: usize = written.iter().map(|&id| model.card(id)).product();
        let n_int: usize = internal_ids.iter().map(|&id| model.card(id)).product();
        if reward_raw.len() != n_scope {
            return Err(ParseError::at(
                def.class.as_ref().map(|&(_, p)| p).unwrap_or(def.pos),
                format!(
                    "reward table for {}: expected {} values, found {}",
                    def.name,
                    n_scope,
                    reward_raw.len()
                ),
            ));
        }
        if cpt_raw.len() != n_scope * n_int {
            return Err(ParseError::at(
                def.class.as_ref().map(|&(_, p)| p).unwrap_or(def.pos),
                format!(
                    "cpt table for {}: expected {} values, found {}",
                    def.name,
                    n_scope * n_int,
                    cpt_raw.len()
                ),
            ));
        }

        let internal = Scope::new(&model, internal_ids.clone())?;
        let external = Scope::new(&model, external_ids.clone())?;
        let scope = internal.union(&external);
        let reward = reorder_to_canonical(&model, &written, &scope, &reward_raw);
        // Reindex CPT rows by scope order and columns by internal order.
        let n_scope_c = model.scope_count(&scope);
        let n_int_c = model.scope_count(&internal);
        let row_perm = reorder_map(&model, &written, &scope);
        let col_perm = reorder_map(&model, &internal_ids, &internal);
        let mut cpt = vec![0.0; n_scope_c * n_int_c];
        for r in 0..n_scope_c {
            for c in 0..n_int_c {
                cpt[r * n_int_c + c] = cpt_raw[row_perm[r] * n_int_c + col_perm[c]];
            }
        }

        let sub = BasicSubsystem::new(&model, def.name.clone(), internal, external, reward, cpt)?;
        written_internals.insert(def.name.clone(), internal_ids);
        built.insert(def.name.clone(), sub);
    }

    // Assemble the hierarchy and flatten it.
    let root = assemble_tree(tree_entries, &mut built)?;
    if let Some((name, sub)) = built.into_iter().next() {
        let _ = sub;
        return Err(ParseError::at(
            Pos { line: 1, col: 1 },
            format!("subsystem {} does not appear in the tree block", name),
        ));
    }
    let tree = root.flatten(model, discount)?;

    // Weights: by-name lines over each subsystem's written internal order.
    let weights = match weight_lines {
        None => RelevanceWeights::all_ones(&tree),
        Some(lines) => {
            let mut per: Vec<Option<Vec<f64>>> = vec![None; tree.len()];
            for (name, values, pos) in lines {
                let j = tree
                    .subsystems
                    .iter()
                    .position(|s| s.name == name)
                    .ok_or_else(|| ParseError::at(pos, format!("unknown subsystem {}", name)))?;
                if per[j].is_some() {
                    return Err(ParseError::at(pos, format!("duplicate weights for {}", name)));
                }
                let written = &written_internals[&name];
                let n: usize = written.iter().map(|&id| tree.model.card(id)).product();
                if values.len() != n {
                    return Err(ParseError::at(
                        pos,
                        format!("weights for {}: expected {} values, found {}", name, n, values.len()),
                    ));
                }
                per[j] = Some(reorder_to_canonical(
                    &tree.model,
                    written,
                    &tree.subsystems[j].internal,
                    &values,
                ));
            }
            if let Some(j) = per.iter().position(|w| w.is_none()) {
                return Err(ParseError::at(
                    Pos { line: 1, col: 1 },
                    format!("weights block lists no entry for {}", tree.subsystems[j].name),
                ));
            }
            RelevanceWeights::new(&tree, per.into_iter().map(|w| w.unwrap()).collect())?
        }
    };

    Ok(ParsedModel { tree, weights })
}

/// The canonical-index -> written-index map for one axis set.
fn reorder_map(model: &Model, written: &[VarId], scope: &Scope) -> Vec<usize> {
    let n = model.scope_count(scope);
    let pos_of: Vec<usize> = written.iter().map(|&id| scope.position(id).unwrap()).collect();
    let cards: Vec<usize> = written.iter().map(|&id| model.card(id)).collect();
    (0..n)
        .map(|idx| {
            let vals = model.values_at(scope, idx);
            let mut raw = 0usize;
            for (k, &p) in pos_of.iter().enumerate() {
                raw = raw * cards[k] + vals[p];
            }
            raw
        })
        .collect()
}

/// Turns one level of tree entries into a single hierarchy node, consuming
/// subsystems out of `built`.
fn assemble_tree(
    entries: Vec<TreeEntry>,
    built: &mut BTreeMap<String, BasicSubsystem>,
) -> Result<HierarchicalNode, ParseError> {
    if entries.is_empty() {
        return Err(ParseError::at(Pos { line: 1, col: 1 }, "tree block is empty"));
    }
    let names: Vec<String> = entries.iter().map(|e| e.name().to_string()).collect();
    {
        let mut seen = BTreeSet::new();
        for (e, n) in entries.iter().zip(&names) {
            if !seen.insert(n.clone()) {
                return Err(ParseError::at(e.pos(), format!("duplicate tree entry {}", n)));
            }
        }
    }
    let mut member_parent = Vec::with_capacity(entries.len());
    let mut root_member = None;
    for e in &entries {
        match e.parent() {
            None => {
                if root_member.replace(member_parent.len()).is_some() {
                    return Err(ParseError::at(
                        e.pos(),
                        format!("{} is a second root at this tree level", e.name()),
                    ));
                }
                member_parent.push(None);
            }
            Some(p) => {
                let idx = names.iter().position(|n| n == p).ok_or_else(|| {
                    ParseError::at(
                        e.pos(),
                        format!("parent {} of {} is not an entry at this tree level", p, e.name()),
                    )
                })?;
                member_parent.push(Some(idx));
            }
        }
    }
    let root_member = root_member.ok_or_else(|| {
        ParseError::at(entries[0].pos(), "no root entry at this tree level")
    })?;

    let mut members = Vec::with_capacity(entries.len());
    for e in entries {
        match e {
            TreeEntry::Node { name, pos, .. } => {
                let sub = built.remove(&name).ok_or_else(|| {
                    ParseError::at(pos, format!("tree entry {} is not a declared subsystem", name))
                })?;
                members.push(HierarchicalNode::Subsystem(sub));
            }
            TreeEntry::Group { name, entries: inner, pos, .. } => {
                if inner.is_empty() {
                    return Err(ParseError::at(pos, format!("group {} is empty", name)));
                }
                let node = assemble_tree(inner, built)?;
                // A one-member group collapses to its member; otherwise keep
                // the nested node tree rooted at the designated member.
                members.push(match node {
                    HierarchicalNode::Group { members, member_parent, root_member, .. } => {
                        HierarchicalNode::Group { name, members, member_parent, root_member }
                    }
                    single => single,
                });
            }
        }
    }

    if members.len() == 1 {
        return Ok(members.pop().unwrap());
    }
    Ok(HierarchicalNode::Group {
        name: "the top level".to_string(),
        members,
        member_parent,
        root_member,
    })
}

/// Writes the canonical text form: declaration-order variables, tree-order
/// subsystems with dense tables over canonical variable order, explicit
/// parent edges, and a weights block.
pub fn serialize_model(tree: &SubsystemTree, weights: &RelevanceWeights) -> String {
    let model = &tree.model;
    let mut out = String::new();
    out.push_str("hfmdp 1\n");
    let _ = writeln!(out, "discount {}", tree.discount);
    out.push('\n');
    for id in 0..model.num_vars() {
        let decl = model.decl(id);
        let _ = write!(out, "var {}", decl.name);
        for v in &decl.values {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
    }
    for sub in &tree.subsystems {
        out.push('\n');
        let _ = writeln!(out, "subsystem {} {{", sub.name);
        let list = |ids: &Scope| {
            ids.ids().iter().map(|&id| model.decl(id).name.as_str()).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "  internal {}", list(&sub.internal));
        if !sub.external.is_empty() {
            let _ = writeln!(out, "  external {}", list(&sub.external));
        }
        // Tables go out in written order (internal list then external list),
        // which differs from canonical scope order whenever an external
        // variable was declared before an internal one.
        let written: Vec<VarId> =
            sub.internal.ids().iter().chain(sub.external.ids().iter()).copied().collect();
        let row_map = reorder_map(model, &written, &sub.scope);
        let n_int = model.scope_count(&sub.internal);
        let mut reward_raw = vec![0.0; row_map.len()];
        let mut cpt_raw = vec![0.0; row_map.len() * n_int];
        for (ci, &ri) in row_map.iter().enumerate() {
            reward_raw[ri] = sub.reward[ci];
            cpt_raw[ri * n_int..(ri + 1) * n_int]
                .copy_from_slice(&sub.cpt[ci * n_int..(ci + 1) * n_int]);
        }
        let _ = write!(out, "  reward dense {{");
        for v in &reward_raw {
            let _ = write!(out, " {}", v);
        }
        out.push_str(" }\n");
        let _ = writeln!(out, "  cpt dense {{");
        for row in cpt_raw.chunks(n_int) {
            out.push_str("   ");
            for v in row {
                let _ = write!(out, " {}", v);
            }
            out.push('\n');
        }
        out.push_str("  }\n}\n");
    }
    out.push_str("\ntree {\n");
    for (j, sub) in tree.subsystems.iter().enumerate() {
        match tree.parent[j] {
            None => {
                let _ = writeln!(out, "  {}", sub.name);
            }
            Some(p) => {
                let _ = writeln!(out, "  {} -> {}", sub.name, tree.subsystems[p].name);
            }
        }
    }
    out.push_str("}\n\nweights {\n");
    for (j, sub) in tree.subsystems.iter().enumerate() {
        let _ = write!(out, "  {} :", sub.name);
        for v in &weights.per_subsystem[j] {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    fn trees_equal(a: &SubsystemTree, b: &SubsystemTree) -> bool {
        let same_vars = a.model.num_vars() == b.model.num_vars()
            && (0..a.model.num_vars()).all(|id| a.model.decl(id) == b.model.decl(id));
        if a.len() != b.len() || a.parent != b.parent || a.discount != b.discount || !same_vars {
            return false;
        }
        a.subsystems.iter().zip(&b.subsystems).all(|(x, y)| {
            x.name == y.name
                && x.internal.ids() == y.internal.ids()
                && x.external.ids() == y.external.ids()
                && x.reward == y.reward
                && x.cpt == y.cpt
        })
    }

    #[test]
    fn canonical_form_round_trips_every_fixture() {
        for tree in [
            models::tandem(),
            models::engine(),
            models::duplex(),
            models::chain3(),
            models::twin_chains(),
        ] {
            let weights = RelevanceWeights::normalized_uniform(&tree);
            let text = serialize_model(&tree, &weights);
            let parsed = parse_model(&text).unwrap();
            assert!(trees_equal(&tree, &parsed.tree), "tree changed in round trip:\n{}", text);
            assert_eq!(weights, parsed.weights);
            let again = serialize_model(&parsed.tree, &parsed.weights);
            assert_eq!(text, again, "serialized form is not a fixpoint");
        }
    }

    #[test]
    fn random_trees_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (tree, weights) =
                crate::generate::random_tree(&mut rng, &crate::generate::GenConfig::default());
            let text = serialize_model(&tree, &weights);
            let parsed = parse_model(&text).unwrap();
            assert!(trees_equal(&tree, &parsed.tree));
            for (a, b) in weights.per_subsystem.iter().zip(&parsed.weights.per_subsystem) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x, y, "weights must survive the text form bit for bit");
                }
            }
        }
    }

    #[test]
    fn empty_file_reports_a_location() {
        let err = parse_model("").unwrap_err();
        assert_eq!(err.to_string(), "1:1: model files start with a `hfmdp <version>` header");
        let err = parse_model("# nothing but a comment\n").unwrap_err();
        assert!(err.to_string().starts_with("1:1:"), "{}", err);
    }

    #[test]
    fn written_order_differs_from_declaration_order() {
        // `a` is declared before `x`, but the subsystem writes its tables
        // with x (internal) first, so the stored canonical table must be the
        // permutation of the written one.
        let text = "\
hfmdp 1
discount 0.9
var a 0 1
var x 0 1
subsystem M {
  internal x
  external a
  reward dense { 10 11 12 13 }
  cpt dense {
    0.9 0.1
    0.8 0.2
    0.3 0.7
    0.4 0.6
  }
}
tree { M }
";
        let parsed = parse_model(text).unwrap();
        let tree = &parsed.tree;
        let m = &tree.model;
        let sub = &tree.subsystems[0];
        // Written order (x, a): entry 1 is x=0 a=1. Canonical scope is
        // (a, x), where x=0 a=1 sits at index a*2 + x = 2.
        assert_eq!(sub.reward, vec![10.0, 12.0, 11.0, 13.0]);
        // Written row 1 (x=0 a=1) lands at canonical row 2.
        assert_eq!(sub.cpt[2 * 2], 0.8);
        assert_eq!(sub.cpt[2 * 2 + 1], 0.2);
        assert_eq!(m.decl(0).name, "a");
    }

    #[test]
    fn sparse_reward_defaults_to_zero() {
        let text = "\
hfmdp 1
discount 0.9
var x 0 1
var u 0 1
subsystem M {
  internal x
  external u
  reward sparse { x=1 u=0 : 4 }
  cpt dense { 1 0  1 0  0 1  0 1 }
}
tree { M }
";
        let parsed = parse_model(text).unwrap();
        assert_eq!(parsed.tree.subsystems[0].reward, vec![0.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn sparse_cpt_rows_must_all_be_present() {
        let text = "\
hfmdp 1
discount 0.9
var x 0 1
subsystem M {
  internal x
  reward dense { 0 1 }
  cpt sparse { x=0 : 1 0 }
}
tree { M }
";
        let err = parse_model(text).unwrap_err().to_string();
        assert!(err.contains("missing the row x=1"), "{}", err);
    }

    #[test]
    fn dense_reward_length_mismatch_names_the_subsystem() {
        let text = "\
hfmdp 1
discount 0.9
var x 0 1
subsystem M1 {
  internal x
  reward dense { 0 1 2 }
  cpt dense { 1 0  0 1 }
}
tree { M1 }
";
        let err = parse_model(text).unwrap_err().to_string();
        assert!(err.contains("M1") && err.contains("expected 2 values, found 3"), "{}", err);
        assert!(err.starts_with("6:10:"), "position should point at the table: {}", err);
    }

    #[test]
    fn unknown_variable_and_unknown_parent_are_caught() {
        let bad_var = "\
hfmdp 1
discount 0.9
var x 0 1
subsystem M { internal y reward dense { 0 1 } cpt dense { 1 0 0 1 } }
tree { M }
";
        let err = parse_model(bad_var).unwrap_err().to_string();
        assert!(err.contains("unknown variable y"), "{}", err);

        let bad_parent = "\
hfmdp 1
discount 0.9
var x 0 1
var y 0 1
subsystem A { internal x reward dense { 0 1 } cpt dense { 1 0 0 1 } }
subsystem B { internal y reward dense { 0 1 } cpt dense { 1 0 0 1 } }
tree { A B -> C }
";
        let err = parse_model(bad_parent).unwrap_err().to_string();
        assert!(err.contains("parent C of B"), "{}", err);
    }

    #[test]
    fn classes_stamp_out_twin_subsystems() {
        let text = "\
hfmdp 1
discount 0.9
var x 0 1
var b 0 1
var y 0 1
class pump {
  internal p 2
  external u 2
  reward dense { 0 0 3 5 }
  cpt dense {
    0.9 0.1
    0.8 0.2
    0.3 0.7
    0.4 0.6
  }
}
subsystem A : pump {
  internal x
  external b
}
subsystem B : pump {
  internal y
  external b
}
tree { A B -> A }
";
        let parsed = parse_model(text).unwrap();
        let tree = &parsed.tree;
        let a = &tree.subsystems[0];
        let b = &tree.subsystems[1];
        // A's written order (x, b) matches canonical; B's written order
        // (y, b) is reversed against canonical scope (b, y), so B stores the
        // permuted table.
        assert_eq!(a.reward, vec![0.0, 0.0, 3.0, 5.0]);
        assert_eq!(b.reward, vec![0.0, 3.0, 0.0, 5.0]);
        // Different canonical slots, but the same (internal, external) slot
        // assignment agrees between the twins.
        let m = &tree.model;
        for p in 0..2 {
            for u in 0..2 {
                let ia = m.index_of_values(&a.scope, &[p, u]); // scope (x, b)
                let ib = m.index_of_values(&b.scope, &[u, p]); // scope (b, y)
                assert_eq!(a.reward[ia], b.reward[ib]);
                for c in 0..2 {
                    assert_eq!(a.cpt[ia * 2 + c], b.cpt[ib * 2 + c]);
                }
            }
        }
    }

    #[test]
    fn groups_flatten_with_the_designated_root() {
        let text = "\
hfmdp 1
discount 0.9
var w 0 1
var x 0 1
var y 0 1
subsystem TOP { internal w reward dense { 0 1 } cpt dense { 1 0 0 1 } }
subsystem H1 { internal x external w reward dense { 0 0 1 1 } cpt dense { 1 0  1 0  0 1  0 1 } }
subsystem H2 { internal y external x reward dense { 0 0 1 1 } cpt dense { 1 0  1 0  0 1  0 1 } }
tree {
  TOP
  group G -> TOP {
    H1
    H2 -> H1
  }
}
";
        let parsed = parse_model(text).unwrap();
        let tree = &parsed.tree;
        let names: Vec<&str> = tree.subsystems.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec!["TOP", "H1", "H2"]);
        assert_eq!(tree.parent, vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn missing_weights_entry_is_an_error_but_missing_block_means_all_ones() {
        let base = "\
hfmdp 1
discount 0.9
var x 0 1
var y 0 1
subsystem A { internal x reward dense { 0 1 } cpt dense { 1 0 0 1 } }
subsystem B { internal y external x reward dense { 0 0 1 1 } cpt dense { 1 0  1 0  0 1  0 1 } }
tree { A B -> A }
";
        let parsed = parse_model(base).unwrap();
        assert_eq!(parsed.weights, RelevanceWeights::all_ones(&parsed.tree));

        let partial = format!("{}weights {{ A : 1 1 }}\n", base);
        let err = parse_model(&partial).unwrap_err().to_string();
        assert!(err.contains("no entry for B"), "{}", err);
    }

    #[test]
    fn duplicate_and_missing_tree_entries_are_errors() {
        let unused = "\
hfmdp 1
discount 0.9
var x 0 1
var y 0 1
subsystem A { internal x reward dense { 0 1 } cpt dense { 1 0 0 1 } }
subsystem B { internal y reward dense { 0 1 } cpt dense { 1 0 0 1 } }
tree { A }
";
        let err = parse_model(unused).unwrap_err().to_string();
        assert!(err.contains("B does not appear in the tree block"), "{}", err);

        let twice = "\
hfmdp 1
discount 0.9
var x 0 1
subsystem A { internal x reward dense { 0 1 } cpt dense { 1 0 0 1 } }
tree { A A -> A }
";
        let err = parse_model(twice).unwrap_err().to_string();
        assert!(err.contains("duplicate tree entry A"), "{}", err);
    }

    #[test]
    fn discount_out_of_range_is_rejected() {
        let text = "hfmdp 1\ndiscount 1.0\nvar x 0 1\nsubsystem A { internal x reward dense { 0 1 } cpt dense { 1 0 0 1 } }\ntree { A }\n";
        let err = parse_model(text).unwrap_err().to_string();
        assert!(err.contains("not in [0, 1)"), "{}", err);
    }
}
