//! lavaan-style model description language.
//!
//! One statement per line (or `;`-separated), `#` starts a comment:
//!
//! ```text
//! WFX1 =~ 1*x1          # loading fixed at 1
//! WFX2 ~ WFX1 + WFY1    # free regressions
//! WFX2 ~~ WFY2          # free covariance
//! x1 ~~ 0*x1            # variance fixed at 0
//! WFX1 =~ lx*x1         # labelled loading; equal labels share one parameter
//! ```
//!
//! Metadata directives:
//! `@wave: name=2 ...` overrides the wave index parsed from a trailing integer,
//! `@latent: m1 m2` declares latent variables with no indicators,
//! `@between: BX BY` marks between-person (random intercept) factors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ModelSource {
    pub text: String,
    pub name: String,
}

impl ModelSource {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self { text: text.into(), name: name.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    Loading,
    Regression,
    Covariance,
    Intercept,
}

impl Op {
    pub fn token(self) -> &'static str {
        match self {
            Op::Loading => "=~",
            Op::Regression => "~",
            Op::Covariance => "~~",
            Op::Intercept => "~1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Status {
    Free,
    Fixed(f64),
}

impl Status {
    pub fn is_free(&self) -> bool {
        matches!(self, Status::Free)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub lhs: String,
    pub op: Op,
    pub rhs: String,
    pub status: Status,
    pub label: Option<String>,
    #[serde(default)]
    pub line: usize,
}

// Source position is diagnostic only, not part of parameter identity.
impl PartialEq for ParameterSpec {
    fn eq(&self, other: &Self) -> bool {
        self.lhs == other.lhs
            && self.op == other.op
            && self.rhs == other.rhs
            && self.status == other.status
            && self.label == other.label
    }
}

impl ParameterSpec {
    pub fn free(lhs: &str, op: Op, rhs: &str) -> Self {
        Self { lhs: lhs.into(), op, rhs: rhs.into(), status: Status::Free, label: None, line: 0 }
            .canonicalized()
    }

    pub fn fixed(lhs: &str, op: Op, rhs: &str, value: f64) -> Self {
        Self { lhs: lhs.into(), op, rhs: rhs.into(), status: Status::Fixed(value), label: None, line: 0 }
            .canonicalized()
    }

    /// Covariances are symmetric; store them with lhs <= rhs.
    pub fn canonicalized(mut self) -> Self {
        if self.op == Op::Covariance && self.lhs > self.rhs {
            std::mem::swap(&mut self.lhs, &mut self.rhs);
        }
        self
    }

    /// Identity of the parameter, e.g. `WFX4~~WFY2`.
    pub fn key(&self) -> String {
        match self.op {
            Op::Intercept => format!("{}~1", self.lhs),
            op => format!("{}{}{}", self.lhs, op.token(), self.rhs),
        }
    }

    pub fn is_variance(&self) -> bool {
        self.op == Op::Covariance && self.lhs == self.rhs
    }
}

impl fmt::Display for ParameterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    WithinFactor,
    BetweenFactor,
    Indicator,
    Exogenous,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VariableCatalog {
    pub observed: Vec<String>,
    pub latent: Vec<String>,
    pub wave_of: BTreeMap<String, u32>,
    pub role_of: BTreeMap<String, Role>,
}

impl VariableCatalog {
    pub fn wave(&self, name: &str) -> Option<u32> {
        self.wave_of.get(name).copied()
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.role_of.get(name).copied()
    }

    pub fn is_latent(&self, name: &str) -> bool {
        self.latent.iter().any(|v| v == name)
    }

    pub fn all_vars(&self) -> impl Iterator<Item = &String> {
        self.observed.iter().chain(self.latent.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub params: Vec<ParameterSpec>,
    pub catalog: VariableCatalog,
    /// Metadata directives preserved for the canonical printer.
    pub wave_overrides: BTreeMap<String, u32>,
    pub declared_latent: Vec<String>,
    pub between_factors: Vec<String>,
}

impl ModelSpec {
    pub fn free_params(&self) -> impl Iterator<Item = &ParameterSpec> {
        self.params.iter().filter(|p| p.status.is_free())
    }

    pub fn has_key(&self, key: &str) -> bool {
        self.params.iter().any(|p| p.key() == key)
    }

    /// Return a copy with `param` appended as a free parameter.
    pub fn with_free(&self, param: &ParameterSpec) -> ModelSpec {
        let mut spec = self.clone();
        let mut p = param.clone().canonicalized();
        p.status = Status::Free;
        p.label = None;
        spec.params.push(p);
        spec
    }
}

fn trailing_integer(name: &str) -> Option<u32> {
    let digits: String = name.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || digits.len() == name.len() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

fn valid_name(tok: &str) -> bool {
    !tok.is_empty()
        && tok.chars().next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false)
        && tok.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Statement<'a> {
    line: usize,
    col: usize,
    text: &'a str,
}

fn split_statements(text: &str) -> Vec<Statement<'_>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut col = 1;
        for piece in line.split(';') {
            if !piece.trim().is_empty() {
                out.push(Statement { line: i + 1, col, text: piece });
            }
            col += piece.len() + 1;
        }
    }
    out
}

/// Parse a model description into a validated [`ModelSpec`].
pub fn parse_model(src: &ModelSource) -> Result<ModelSpec> {
    let statements = split_statements(&src.text);
    if statements.is_empty() {
        return Err(Error::EmptyModel);
    }

    let mut wave_overrides = BTreeMap::new();
    let mut declared_latent = Vec::new();
    let mut between_factors: Vec<String> = Vec::new();
    let mut params: Vec<ParameterSpec> = Vec::new();
    let mut loading_lhs = BTreeSet::new();
    let mut indicator_rhs: Vec<String> = Vec::new();

    for st in &statements {
        let trimmed = st.text.trim();
        if let Some(rest) = trimmed.strip_prefix('@') {
            parse_directive(rest, st, &mut wave_overrides, &mut declared_latent, &mut between_factors)?;
            continue;
        }
        // Find the operator: `=~` first, then `~~`, then `~`.
        let (lhs, op, rhs_expr) = split_operator(trimmed, st)?;
        if !valid_name(lhs) {
            return Err(Error::Syntax {
                line: st.line,
                col: st.col,
                message: format!("invalid variable name `{lhs}`"),
            });
        }
        if op == Op::Regression && rhs_expr.trim() == "1" {
            params.push(ParameterSpec {
                lhs: lhs.to_string(),
                op: Op::Intercept,
                rhs: "1".to_string(),
                status: Status::Free,
                label: None,
                line: st.line,
            });
            continue;
        }
        for term in rhs_expr.split('+') {
            let term = term.trim();
            if term.is_empty() {
                return Err(Error::Syntax {
                    line: st.line,
                    col: st.col,
                    message: "dangling `+` in term list".into(),
                });
            }
            let (status, label, var) = parse_term(term, st)?;
            if !valid_name(var) {
                return Err(Error::Syntax {
                    line: st.line,
                    col: st.col,
                    message: format!("invalid variable name `{var}`"),
                });
            }
            if op == Op::Loading {
                loading_lhs.insert(lhs.to_string());
                if !indicator_rhs.contains(&var.to_string()) {
                    indicator_rhs.push(var.to_string());
                }
            }
            let p = ParameterSpec {
                lhs: lhs.to_string(),
                op,
                rhs: var.to_string(),
                status,
                label,
                line: st.line,
            }
            .canonicalized();
            if params.iter().any(|q| q.key() == p.key()) {
                return Err(Error::DuplicateParameter { line: st.line, param: p.key() });
            }
            params.push(p);
        }
    }

    if params.is_empty() {
        return Err(Error::EmptyModel);
    }

    let catalog = build_catalog(&params, &wave_overrides, &declared_latent, &between_factors, &loading_lhs, &indicator_rhs);
    Ok(ModelSpec {
        name: src.name.clone(),
        params,
        catalog,
        wave_overrides,
        declared_latent,
        between_factors,
    })
}

fn parse_directive(
    rest: &str,
    st: &Statement<'_>,
    wave_overrides: &mut BTreeMap<String, u32>,
    declared_latent: &mut Vec<String>,
    between: &mut Vec<String>,
) -> Result<()> {
    let (head, body) = rest.split_once(':').ok_or_else(|| Error::Syntax {
        line: st.line,
        col: st.col,
        message: "directive must look like `@wave: ...`".into(),
    })?;
    match head.trim() {
        "wave" => {
            for pair in body.split_whitespace() {
                let (name, idx) = pair.split_once('=').ok_or_else(|| Error::Syntax {
                    line: st.line,
                    col: st.col,
                    message: format!("bad wave assignment `{pair}`"),
                })?;
                let idx: u32 = idx.parse().map_err(|_| Error::Syntax {
                    line: st.line,
                    col: st.col,
                    message: format!("bad wave index in `{pair}`"),
                })?;
                wave_overrides.insert(name.to_string(), idx);
            }
        }
        "latent" => {
            for name in body.split_whitespace() {
                if !declared_latent.iter().any(|v| v == name) {
                    declared_latent.push(name.to_string());
                }
            }
        }
        "between" => {
            for name in body.split_whitespace() {
                if !between.iter().any(|v| v == name) {
                    between.push(name.to_string());
                }
            }
        }
        other => {
            return Err(Error::Syntax {
                line: st.line,
                col: st.col,
                message: format!("unknown directive `@{other}`"),
            })
        }
    }
    Ok(())
}

fn split_operator<'a>(text: &'a str, st: &Statement<'a>) -> Result<(&'a str, Op, &'a str)> {
    for (tok, op) in [("=~", Op::Loading), ("~~", Op::Covariance), ("~", Op::Regression)] {
        if let Some(pos) = text.find(tok) {
            let lhs = text[..pos].trim();
            let rhs = text[pos + tok.len()..].trim();
            if lhs.is_empty() || rhs.is_empty() {
                return Err(Error::Syntax {
                    line: st.line,
                    col: st.col + pos,
                    message: format!("missing operand around `{tok}`"),
                });
            }
            return Ok((lhs, op, rhs));
        }
    }
    Err(Error::Syntax {
        line: st.line,
        col: st.col,
        message: format!("no operator (`=~`, `~`, `~~`) in `{}`", text.trim()),
    })
}

fn parse_term<'a>(term: &'a str, st: &Statement<'a>) -> Result<(Status, Option<String>, &'a str)> {
    match term.split_once('*') {
        None => Ok((Status::Free, None, term.trim())),
        Some((modifier, var)) => {
            let modifier = modifier.trim();
            let var = var.trim();
            if let Ok(value) = modifier.parse::<f64>() {
                Ok((Status::Fixed(value), None, var))
            } else if valid_name(modifier) {
                Ok((Status::Free, Some(modifier.to_string()), var))
            } else {
                Err(Error::Syntax {
                    line: st.line,
                    col: st.col,
                    message: format!("bad modifier `{modifier}`"),
                })
            }
        }
    }
}

fn build_catalog(
    params: &[ParameterSpec],
    wave_overrides: &BTreeMap<String, u32>,
    declared_latent: &[String],
    between: &[String],
    loading_lhs: &BTreeSet<String>,
    indicator_rhs: &[String],
) -> VariableCatalog {
    let mut latent: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for name in loading_lhs.iter().chain(declared_latent.iter()).chain(between.iter()) {
        if seen.insert(name.clone()) {
            latent.push(name.clone());
        }
    }
    let mut observed = Vec::new();
    let mut obs_seen = BTreeSet::new();
    for p in params {
        for name in [&p.lhs, &p.rhs] {
            if name == "1" {
                continue;
            }
            if !seen.contains(name) && obs_seen.insert(name.clone()) {
                observed.push(name.clone());
            }
        }
    }

    let mut wave_of = BTreeMap::new();
    let mut role_of = BTreeMap::new();
    for name in observed.iter().chain(latent.iter()) {
        let wave = wave_overrides.get(name).copied().or_else(|| trailing_integer(name));
        if let Some(w) = wave {
            wave_of.insert(name.clone(), w);
        }
    }
    for name in &latent {
        let role = if between.iter().any(|v| v == name) {
            Role::BetweenFactor
        } else if wave_of.contains_key(name) {
            Role::WithinFactor
        } else {
            Role::Exogenous
        };
        role_of.insert(name.clone(), role);
    }
    for name in &observed {
        let role = if indicator_rhs.iter().any(|v| v == name) { Role::Indicator } else { Role::Exogenous };
        role_of.insert(name.clone(), role);
    }
    // Between factors never carry a wave index.
    for name in between {
        wave_of.remove(name);
    }
    VariableCatalog { observed, latent, wave_of, role_of }
}

/// Canonical printer; `parse(print(parse(text)))` is a fixpoint.
pub fn print_model(spec: &ModelSpec) -> String {
    let mut out = String::new();
    if !spec.declared_latent.is_empty() {
        out.push_str(&format!("@latent: {}\n", spec.declared_latent.join(" ")));
    }
    if !spec.between_factors.is_empty() {
        out.push_str(&format!("@between: {}\n", spec.between_factors.join(" ")));
    }
    if !spec.wave_overrides.is_empty() {
        let pairs: Vec<String> = spec.wave_overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("@wave: {}\n", pairs.join(" ")));
    }
    for p in &spec.params {
        let rhs = match (&p.status, &p.label) {
            (Status::Fixed(v), _) => format!("{}*{}", v, p.rhs),
            (Status::Free, Some(l)) => format!("{}*{}", l, p.rhs),
            (Status::Free, None) => p.rhs.clone(),
        };
        let line = match p.op {
            Op::Intercept => format!("{} ~ 1", p.lhs),
            op => format!("{} {} {}", p.lhs, op.token(), rhs),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Every syntactically admissible parameter absent from `spec`, fixed at zero:
/// covariances among latents and among observed variables, regressions between
/// any two distinct variables (both directions), and cross-loadings. Variances,
/// self-pairs, and cells already occupied by the spec are excluded.
pub fn enumerate_candidates(spec: &ModelSpec) -> Vec<ParameterSpec> {
    let cat = &spec.catalog;
    let existing_keys: BTreeSet<String> = spec.params.iter().map(|p| p.key()).collect();
    // A-matrix cells (dependent, predictor) already used by loadings/regressions.
    let mut a_cells = BTreeSet::new();
    for p in &spec.params {
        match p.op {
            Op::Loading => {
                a_cells.insert((p.rhs.clone(), p.lhs.clone()));
            }
            Op::Regression => {
                a_cells.insert((p.lhs.clone(), p.rhs.clone()));
            }
            _ => {}
        }
    }

    let mut out = Vec::new();
    let mut push = |p: ParameterSpec| {
        if !existing_keys.contains(&p.key()) {
            out.push(p);
        }
    };

    // Covariances among latents and among observed variables.
    for group in [&cat.latent, &cat.observed] {
        for (i, a) in group.iter().enumerate() {
            for b in group.iter().skip(i + 1) {
                push(ParameterSpec::fixed(a, Op::Covariance, b, 0.0));
            }
        }
    }
    // Regressions between any two distinct variables, both directions.
    let all: Vec<&String> = cat.all_vars().collect();
    for a in &all {
        for b in &all {
            if a == b || a_cells.contains(&((*a).clone(), (*b).clone())) {
                continue;
            }
            push(ParameterSpec::fixed(a, Op::Regression, b, 0.0));
        }
    }
    // Cross-loadings: any latent onto any observed variable.
    for l in &cat.latent {
        for o in &cat.observed {
            if a_cells.contains(&(o.clone(), l.clone())) {
                continue;
            }
            push(ParameterSpec::fixed(l, Op::Loading, o, 0.0));
        }
    }

    out.sort_by(|a, b| (&a.lhs, a.op, &a.rhs).cmp(&(&b.lhs, b.op, &b.rhs)));
    out.dedup_by_key(|p| p.key());
    out
}
