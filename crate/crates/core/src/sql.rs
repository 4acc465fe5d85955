//! Parser and canonical formatter for the replicated SQL subset:
//! `CREATE TABLE`, `INSERT`, `UPDATE` and `DELETE` with conjunctive equality
//! predicates over `INT` and `TEXT` columns.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Text(String),
}

impl Value {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Value::Int(_) => ColumnType::Int,
            Value::Text(_) => ColumnType::Text,
        }
    }

    /// Raw rendering used by digests and table dumps.
    pub fn render(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Text(s) => s.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnType {
    Int,
    Text,
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Int => "INT",
            ColumnType::Text => "TEXT",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
}

/// `column = value` terms joined by `AND`.
pub type Predicate = Vec<(String, Value)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatementKind {
    Create,
    Insert,
    Update,
    Delete,
}

impl StatementKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CREATE" => Some(StatementKind::Create),
            "INSERT" => Some(StatementKind::Insert),
            "UPDATE" => Some(StatementKind::Update),
            "DELETE" => Some(StatementKind::Delete),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statement {
    CreateTable {
        table: String,
        columns: Vec<Column>,
    },
    Insert {
        table: String,
        columns: Option<Vec<String>>,
        values: Vec<Value>,
    },
    Update {
        table: String,
        assignments: Vec<(String, Value)>,
        predicate: Predicate,
    },
    Delete {
        table: String,
        predicate: Predicate,
    },
}

impl Statement {
    pub fn kind(&self) -> StatementKind {
        match self {
            Statement::CreateTable { .. } => StatementKind::Create,
            Statement::Insert { .. } => StatementKind::Insert,
            Statement::Update { .. } => StatementKind::Update,
            Statement::Delete { .. } => StatementKind::Delete,
        }
    }

    pub fn table(&self) -> &str {
        match self {
            Statement::CreateTable { table, .. }
            | Statement::Insert { table, .. }
            | Statement::Update { table, .. }
            | Statement::Delete { table, .. } => table,
        }
    }

    /// Canonical text; `parse_statement` of this text yields `self` again.
    pub fn to_sql(&self) -> String {
        self.to_string()
    }
}

fn write_predicate(f: &mut fmt::Formatter<'_>, predicate: &Predicate) -> fmt::Result {
    for (i, (col, v)) in predicate.iter().enumerate() {
        f.write_str(if i == 0 { " WHERE " } else { " AND " })?;
        write!(f, "{col} = {v}")?;
    }
    Ok(())
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::CreateTable { table, columns } => {
                write!(f, "CREATE TABLE {table} (")?;
                for (i, c) in columns.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{} {}", c.name, c.ty)?;
                }
                f.write_str(")")
            }
            Statement::Insert { table, columns, values } => {
                write!(f, "INSERT INTO {table}")?;
                if let Some(cols) = columns {
                    write!(f, " ({})", cols.join(", "))?;
                }
                f.write_str(" VALUES (")?;
                for (i, v) in values.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
            Statement::Update { table, assignments, predicate } => {
                write!(f, "UPDATE {table} SET ")?;
                for (i, (c, v)) in assignments.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c} = {v}")?;
                }
                write_predicate(f, predicate)
            }
            Statement::Delete { table, predicate } => {
                write!(f, "DELETE FROM {table}")?;
                write_predicate(f, predicate)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {position}: expected one of {expected:?}")]
    Syntax {
        position: usize,
        expected: Vec<String>,
    },
    #[error("unsupported construct at byte {position}: {construct}")]
    Unsupported { position: usize, construct: String },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { position, .. } | ParseError::Unsupported { position, .. } => {
                *position
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Sym(char),
    /// Operators the grammar recognises only to reject: `<`, `>`, `<=`, `<>`...
    Op(String),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => s.clone(),
            Tok::Int(i) => i.to_string(),
            Tok::Str(_) => "string literal".into(),
            Tok::Sym(c) => c.to_string(),
            Tok::Op(o) => o.clone(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    let syntax = |position: usize, expected: &str| ParseError::Syntax {
        position,
        expected: vec![expected.to_string()],
    };
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((pos, Tok::Ident(s)));
        } else if c.is_ascii_digit() || c == '-' {
            let mut s = String::new();
            s.push(c);
            chars.next();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_digit() {
                    s.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            if s == "-" {
                return Err(syntax(pos, "integer literal"));
            }
            let v = s.parse::<i64>().map_err(|_| syntax(pos, "64-bit integer"))?;
            out.push((pos, Tok::Int(v)));
        } else if c == '\'' {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some((_, '\'')) => {
                        if matches!(chars.peek(), Some((_, '\''))) {
                            chars.next();
                            s.push('\'');
                        } else {
                            break;
                        }
                    }
                    Some((_, c)) => s.push(c),
                    None => return Err(syntax(text.len(), "closing quote")),
                }
            }
            out.push((pos, Tok::Str(s)));
        } else if matches!(c, '(' | ')' | ',' | '=' | ';' | '*') {
            chars.next();
            out.push((pos, Tok::Sym(c)));
        } else if matches!(c, '<' | '>' | '!') {
            chars.next();
            let mut op = c.to_string();
            if let Some(&(_, n)) = chars.peek() {
                if matches!(n, '=' | '>') {
                    op.push(n);
                    chars.next();
                }
            }
            out.push((pos, Tok::Op(op)));
        } else {
            return Err(ParseError::Syntax {
                position: pos,
                expected: vec!["identifier".into(), "literal".into(), "punctuation".into()],
            });
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

const RESERVED: &[&str] = &[
    "CREATE", "TABLE", "INSERT", "INTO", "VALUES", "UPDATE", "SET", "DELETE", "FROM", "WHERE",
    "AND", "OR", "NOT", "SELECT", "JOIN", "INT", "TEXT",
];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            position: self.pos(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn unsupported<T>(&self, construct: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Unsupported { position: self.pos(), construct: construct.into() })
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.bump();
            Ok(())
        } else {
            self.fail(&[kw])
        }
    }

    fn sym(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == &Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            self.fail(&[&c.to_string()])
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k)) => {
                self.bump();
                Ok(s)
            }
            _ => self.fail(&["identifier"]),
        }
    }

    fn value(&mut self) -> Result<Value, ParseError> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(Value::Int(i))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Value::Text(s))
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("NULL") => self.unsupported("NULL"),
            Tok::Ident(s) if s.eq_ignore_ascii_case("SELECT") => self.unsupported("subquery"),
            Tok::Sym('(') => self.unsupported("subquery or expression"),
            _ => self.fail(&["integer literal", "string literal"]),
        }
    }

    fn predicate(&mut self) -> Result<Predicate, ParseError> {
        let mut terms = Vec::new();
        if !self.is_keyword("WHERE") {
            return Ok(terms);
        }
        self.bump();
        loop {
            if self.is_keyword("NOT") {
                return self.unsupported("NOT");
            }
            let col = self.ident()?;
            match self.peek() {
                Tok::Sym('=') => {
                    self.bump();
                }
                Tok::Op(op) => {
                    let op = op.clone();
                    return self.unsupported(format!("non-equality predicate {op}"));
                }
                Tok::Ident(s)
                    if ["LIKE", "IN", "IS", "BETWEEN"]
                        .iter()
                        .any(|k| s.eq_ignore_ascii_case(k)) =>
                {
                    let s = s.to_ascii_uppercase();
                    return self.unsupported(format!("non-equality predicate {s}"));
                }
                _ => return self.fail(&["="]),
            }
            let v = self.value()?;
            terms.push((col, v));
            if self.is_keyword("AND") {
                self.bump();
            } else if self.is_keyword("OR") {
                return self.unsupported("OR");
            } else {
                return Ok(terms);
            }
        }
    }

    fn create(&mut self) -> Result<Statement, ParseError> {
        self.keyword("CREATE")?;
        self.keyword("TABLE")?;
        let table = self.ident()?;
        self.sym('(')?;
        let mut columns = Vec::new();
        loop {
            let name = self.ident()?;
            let ty = if self.is_keyword("INT") || self.is_keyword("INTEGER") {
                ColumnType::Int
            } else if self.is_keyword("TEXT") {
                ColumnType::Text
            } else {
                return self.fail(&["INT", "TEXT"]);
            };
            self.bump();
            columns.push(Column { name, ty });
            match self.peek() {
                Tok::Sym(',') => {
                    self.bump();
                }
                Tok::Sym(')') => {
                    self.bump();
                    break;
                }
                _ => return self.fail(&[",", ")"]),
            }
        }
        Ok(Statement::CreateTable { table, columns })
    }

    fn insert(&mut self) -> Result<Statement, ParseError> {
        self.keyword("INSERT")?;
        self.keyword("INTO")?;
        let table = self.ident()?;
        let columns = if self.peek() == &Tok::Sym('(') {
            self.bump();
            let mut cols = vec![self.ident()?];
            while self.peek() == &Tok::Sym(',') {
                self.bump();
                cols.push(self.ident()?);
            }
            self.sym(')')?;
            Some(cols)
        } else {
            None
        };
        if self.is_keyword("SELECT") {
            return self.unsupported("INSERT ... SELECT");
        }
        self.keyword("VALUES")?;
        self.sym('(')?;
        let mut values = vec![self.value()?];
        while self.peek() == &Tok::Sym(',') {
            self.bump();
            values.push(self.value()?);
        }
        self.sym(')')?;
        if self.peek() == &Tok::Sym(',') {
            return self.unsupported("multi-row INSERT");
        }
        Ok(Statement::Insert { table, columns, values })
    }

    fn update(&mut self) -> Result<Statement, ParseError> {
        self.keyword("UPDATE")?;
        let table = self.ident()?;
        self.keyword("SET")?;
        let mut assignments = Vec::new();
        loop {
            let col = self.ident()?;
            self.sym('=')?;
            assignments.push((col, self.value()?));
            if self.peek() == &Tok::Sym(',') {
                self.bump();
            } else {
                break;
            }
        }
        if self.is_keyword("FROM") {
            return self.unsupported("UPDATE ... FROM");
        }
        let predicate = self.predicate()?;
        Ok(Statement::Update { table, assignments, predicate })
    }

    fn delete(&mut self) -> Result<Statement, ParseError> {
        self.keyword("DELETE")?;
        self.keyword("FROM")?;
        let table = self.ident()?;
        if self.peek() == &Tok::Sym(',') || self.is_keyword("JOIN") || self.is_keyword("USING") {
            return self.unsupported("join");
        }
        let predicate = self.predicate()?;
        Ok(Statement::Delete { table, predicate })
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        let stmt = match self.peek() {
            Tok::Ident(s) => match s.to_ascii_uppercase().as_str() {
                "CREATE" => self.create()?,
                "INSERT" => self.insert()?,
                "UPDATE" => self.update()?,
                "DELETE" => self.delete()?,
                "SELECT" | "DROP" | "ALTER" | "TRUNCATE" | "MERGE" | "WITH" | "REPLACE" => {
                    let s = s.to_ascii_uppercase();
                    return self.unsupported(s);
                }
                _ => return self.fail(&["CREATE", "INSERT", "UPDATE", "DELETE"]),
            },
            _ => return self.fail(&["CREATE", "INSERT", "UPDATE", "DELETE"]),
        };
        if self.peek() == &Tok::Sym(';') {
            self.bump();
        }
        if self.is_keyword("JOIN") {
            return self.unsupported("join");
        }
        match self.peek() {
            Tok::End => Ok(stmt),
            _ => self.fail(&["end of input"]),
        }
    }
}

/// Parses one statement. Keywords are case-insensitive and whitespace is
/// insignificant; identifiers keep their spelling.
pub fn parse_statement(text: &str) -> Result<Statement, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Syntax {
            position: 0,
            expected: vec!["CREATE".into(), "INSERT".into(), "UPDATE".into(), "DELETE".into()],
        });
    }
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0 };
    p.statement().map_err(|e| {
        // Keep the offending token readable in logs.
        log::trace!("parse failed near {:?}: {e}", p.peek().describe());
        e
    })
}
