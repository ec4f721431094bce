//! TOML model files.
//!
//! Sections `dims`, `leader_dyn`, `follower_dyn`, `leader_cost`, `follower_cost`
//! and `init`, plus top-level `horizon` and optional `grid_steps`. Matrices are
//! row-major nested arrays; a bare number is accepted for a 1×1 matrix or a
//! length-1 vector. Keys use role names, each with a symbol alias (`A0`, `Gbar`,
//! `Gammahat1`, ...). Missing matrices are zero, except the two control weights
//! which are required.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use mflq_core::model::{FollowerCost, FollowerDynamics, InitialLaw, LeaderCost, LeaderDynamics};
use mflq_core::{validate, Dimensions, Mat, ModelParams, Vector};
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

pub const DEFAULT_GRID_STEPS: usize = 2000;

/// The bundled reference model.
pub const TABLE1_TOML: &str = include_str!("../models/table1.toml");

/// A violation with the line of the offending key when it is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocatedViolation {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for LocatedViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot read {file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("{file}:{line}:{column}: {message}")]
    Parse { file: String, line: usize, column: usize, message: String },
    #[error("{file}: invalid model\n{}", list(.violations))]
    Invalid { file: String, violations: Vec<LocatedViolation> },
}

fn list(v: &[LocatedViolation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum VectorSpec {
    Scalar(f64),
    Entries(Vec<f64>),
}

type Field = Option<Spanned<MatrixSpec>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsSection {
    n0: usize,
    n: usize,
    m0: usize,
    m: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LeaderDynSection {
    #[serde(alias = "A0")]
    state_drift: Field,
    #[serde(alias = "G0")]
    coupling_drift: Field,
    #[serde(alias = "B0")]
    control_drift: Field,
    #[serde(alias = "C0")]
    state_noise: Field,
    #[serde(alias = "Gbar0")]
    coupling_noise: Field,
    #[serde(alias = "D0")]
    control_noise: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FollowerDynSection {
    #[serde(alias = "A")]
    state_drift: Field,
    #[serde(alias = "G")]
    coupling_drift: Field,
    #[serde(alias = "F")]
    leader_drift: Field,
    #[serde(alias = "B")]
    control_drift: Field,
    #[serde(alias = "C")]
    state_noise: Field,
    #[serde(alias = "Gbar")]
    coupling_noise: Field,
    #[serde(alias = "Fbar")]
    leader_noise: Field,
    #[serde(alias = "D")]
    control_noise: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LeaderCostSection {
    #[serde(alias = "Q0")]
    state_weight: Field,
    #[serde(alias = "R0")]
    control_weight: Field,
    #[serde(alias = "H0")]
    terminal_weight: Field,
    #[serde(alias = "Gamma0")]
    tracking: Field,
    #[serde(alias = "Gammahat0")]
    terminal_tracking: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FollowerCostSection {
    #[serde(alias = "Q")]
    state_weight: Field,
    #[serde(alias = "R")]
    control_weight: Field,
    #[serde(alias = "H")]
    terminal_weight: Field,
    #[serde(alias = "Gamma")]
    mf_tracking: Field,
    #[serde(alias = "Gamma1")]
    leader_tracking: Field,
    #[serde(alias = "Gammahat")]
    terminal_mf_tracking: Field,
    #[serde(alias = "Gammahat1")]
    terminal_leader_tracking: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InitSection {
    leader_mean: Option<Spanned<VectorSpec>>,
    leader_cov: Field,
    follower_mean: Option<Spanned<VectorSpec>>,
    follower_cov: Field,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    horizon: Spanned<f64>,
    grid_steps: Option<Spanned<usize>>,
    dims: DimsSection,
    #[serde(default)]
    leader_dyn: LeaderDynSection,
    #[serde(default)]
    follower_dyn: FollowerDynSection,
    #[serde(default)]
    leader_cost: LeaderCostSection,
    #[serde(default)]
    follower_cost: FollowerCostSection,
    #[serde(default)]
    init: InitSection,
}

/// 1-based line and column of a byte offset.
fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, column)
}

/// Converts the raw sections, recording each key's line and every shape problem.
struct Builder<'a> {
    text: &'a str,
    lines: HashMap<String, usize>,
    problems: Vec<LocatedViolation>,
}

impl Builder<'_> {
    fn line_of(&self, offset: usize) -> usize {
        position(self.text, offset).0
    }

    fn problem(&mut self, field: &str, line: Option<usize>, message: String) {
        self.problems.push(LocatedViolation { field: field.to_string(), line, message });
    }

    fn matrix(&mut self, field: &str, spec: &Field, rows: usize, cols: usize, required: bool) -> Mat {
        let Some(spec) = spec else {
            if required {
                self.problem(field, None, "missing (required)".into());
            }
            return Mat::zeros(rows, cols);
        };
        let line = self.line_of(spec.span().start);
        self.lines.insert(field.to_string(), line);
        match spec.get_ref() {
            MatrixSpec::Scalar(v) if rows == 1 && cols == 1 => Mat::from_element(1, 1, *v),
            MatrixSpec::Scalar(_) => {
                self.problem(field, Some(line), format!("a bare number only fits a 1x1 matrix, expected {rows}x{cols}"));
                Mat::zeros(rows, cols)
            }
            MatrixSpec::Rows(r) => {
                let widths_ok = r.iter().all(|row| row.len() == cols);
                if r.len() != rows || !widths_ok {
                    let found = r.iter().map(|row| row.len().to_string()).collect::<Vec<_>>().join(",");
                    self.problem(
                        field,
                        Some(line),
                        format!("expected {rows}x{cols}, found {} row(s) of width(s) [{found}]", r.len()),
                    );
                    return Mat::zeros(rows, cols);
                }
                let flat: Vec<f64> = r.iter().flatten().copied().collect();
                Mat::from_row_slice(rows, cols, &flat)
            }
        }
    }

    fn vector(&mut self, field: &str, spec: &Option<Spanned<VectorSpec>>, len: usize) -> Vector {
        let Some(spec) = spec else {
            return Vector::zeros(len);
        };
        let line = self.line_of(spec.span().start);
        self.lines.insert(field.to_string(), line);
        let v = match spec.get_ref() {
            VectorSpec::Scalar(x) => vec![*x],
            VectorSpec::Entries(v) => v.clone(),
        };
        if v.len() != len {
            self.problem(field, Some(line), format!("expected length {len}, found {}", v.len()));
            return Vector::zeros(len);
        }
        Vector::from_vec(v)
    }
}

/// Parses and validates model text. `file` names the source in messages.
pub fn parse_model(text: &str, file: &str) -> Result<ModelParams, ModelFileError> {
    let raw: ModelFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| position(text, s.start));
        ModelFileError::Parse { file: file.to_string(), line, column, message: e.message().trim().to_string() }
    })?;
    let DimsSection { n0, n, m0, m } = raw.dims;
    let dims = Dimensions { n0, n, m0, m };
    let mut b = Builder { text, lines: HashMap::new(), problems: Vec::new() };
    b.lines.insert("horizon".into(), b.line_of(raw.horizon.span().start));

    let ld = &raw.leader_dyn;
    let leader_dyn = LeaderDynamics {
        state_drift: b.matrix("leader_dyn.state_drift", &ld.state_drift, n0, n0, false),
        coupling_drift: b.matrix("leader_dyn.coupling_drift", &ld.coupling_drift, n0, n, false),
        control_drift: b.matrix("leader_dyn.control_drift", &ld.control_drift, n0, m0, false),
        state_noise: b.matrix("leader_dyn.state_noise", &ld.state_noise, n0, n0, false),
        coupling_noise: b.matrix("leader_dyn.coupling_noise", &ld.coupling_noise, n0, n, false),
        control_noise: b.matrix("leader_dyn.control_noise", &ld.control_noise, n0, m0, false),
    };
    let fd = &raw.follower_dyn;
    let follower_dyn = FollowerDynamics {
        state_drift: b.matrix("follower_dyn.state_drift", &fd.state_drift, n, n, false),
        coupling_drift: b.matrix("follower_dyn.coupling_drift", &fd.coupling_drift, n, n, false),
        leader_drift: b.matrix("follower_dyn.leader_drift", &fd.leader_drift, n, n0, false),
        control_drift: b.matrix("follower_dyn.control_drift", &fd.control_drift, n, m, false),
        state_noise: b.matrix("follower_dyn.state_noise", &fd.state_noise, n, n, false),
        coupling_noise: b.matrix("follower_dyn.coupling_noise", &fd.coupling_noise, n, n, false),
        leader_noise: b.matrix("follower_dyn.leader_noise", &fd.leader_noise, n, n0, false),
        control_noise: b.matrix("follower_dyn.control_noise", &fd.control_noise, n, m, false),
    };
    let lc = &raw.leader_cost;
    let leader_cost = LeaderCost {
        state_weight: b.matrix("leader_cost.state_weight", &lc.state_weight, n0, n0, false),
        control_weight: b.matrix("leader_cost.control_weight", &lc.control_weight, m0, m0, true),
        terminal_weight: b.matrix("leader_cost.terminal_weight", &lc.terminal_weight, n0, n0, false),
        tracking: b.matrix("leader_cost.tracking", &lc.tracking, n0, n, false),
        terminal_tracking: b.matrix("leader_cost.terminal_tracking", &lc.terminal_tracking, n0, n, false),
    };
    let fc = &raw.follower_cost;
    let follower_cost = FollowerCost {
        state_weight: b.matrix("follower_cost.state_weight", &fc.state_weight, n, n, false),
        control_weight: b.matrix("follower_cost.control_weight", &fc.control_weight, m, m, true),
        terminal_weight: b.matrix("follower_cost.terminal_weight", &fc.terminal_weight, n, n, false),
        mf_tracking: b.matrix("follower_cost.mf_tracking", &fc.mf_tracking, n, n, false),
        leader_tracking: b.matrix("follower_cost.leader_tracking", &fc.leader_tracking, n, n0, false),
        terminal_mf_tracking: b.matrix("follower_cost.terminal_mf_tracking", &fc.terminal_mf_tracking, n, n, false),
        terminal_leader_tracking: b.matrix(
            "follower_cost.terminal_leader_tracking",
            &fc.terminal_leader_tracking,
            n,
            n0,
            false,
        ),
    };
    let init = InitialLaw {
        leader_mean: b.vector("init.leader_mean", &raw.init.leader_mean, n0),
        leader_cov: b.matrix("init.leader_cov", &raw.init.leader_cov, n0, n0, false),
        follower_mean: b.vector("init.follower_mean", &raw.init.follower_mean, n),
        follower_cov: b.matrix("init.follower_cov", &raw.init.follower_cov, n, n, false),
    };
    let grid_steps = match &raw.grid_steps {
        Some(g) => {
            b.lines.insert("grid_steps".into(), b.line_of(g.span().start));
            *g.get_ref()
        }
        None => DEFAULT_GRID_STEPS,
    };
    let params = ModelParams {
        dims,
        leader_dyn,
        follower_dyn,
        leader_cost,
        follower_cost,
        init,
        horizon: *raw.horizon.get_ref(),
        grid_steps,
    };

    let mut violations = std::mem::take(&mut b.problems);
    if violations.is_empty() {
        violations = validate(&params)
            .into_iter()
            .map(|v| LocatedViolation { line: b.lines.get(&v.field).copied(), field: v.field, message: v.message })
            .collect();
    }
    if violations.is_empty() {
        Ok(params)
    } else {
        Err(ModelFileError::Invalid { file: file.to_string(), violations })
    }
}

pub fn load_model(path: &Path) -> Result<(ModelParams, String), ModelFileError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ModelFileError::Io { file: file.clone(), source })?;
    Ok((parse_model(&text, &file)?, text))
}

fn push_matrix(out: &mut String, key: &str, m: &Mat) {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")))
        .collect();
    let _ = writeln!(out, "{key} = [{}]", rows.join(", "));
}

/// Renders a model in the file format, every matrix written out in full.
pub fn render_model(p: &ModelParams) -> String {
    let mut s = String::new();
    let d = p.dims;
    let _ = writeln!(s, "horizon = {:?}\ngrid_steps = {}\n", p.horizon, p.grid_steps);
    let _ = writeln!(s, "[dims]\nn0 = {}\nn = {}\nm0 = {}\nm = {}", d.n0, d.n, d.m0, d.m);
    let sections: [(&str, Vec<(&str, &Mat)>); 4] = [
        (
            "leader_dyn",
            vec![
                ("state_drift", &p.leader_dyn.state_drift),
                ("coupling_drift", &p.leader_dyn.coupling_drift),
                ("control_drift", &p.leader_dyn.control_drift),
                ("state_noise", &p.leader_dyn.state_noise),
                ("coupling_noise", &p.leader_dyn.coupling_noise),
                ("control_noise", &p.leader_dyn.control_noise),
            ],
        ),
        (
            "follower_dyn",
            vec![
                ("state_drift", &p.follower_dyn.state_drift),
                ("coupling_drift", &p.follower_dyn.coupling_drift),
                ("leader_drift", &p.follower_dyn.leader_drift),
                ("control_drift", &p.follower_dyn.control_drift),
                ("state_noise", &p.follower_dyn.state_noise),
                ("coupling_noise", &p.follower_dyn.coupling_noise),
                ("leader_noise", &p.follower_dyn.leader_noise),
                ("control_noise", &p.follower_dyn.control_noise),
            ],
        ),
        (
            "leader_cost",
            vec![
                ("state_weight", &p.leader_cost.state_weight),
                ("control_weight", &p.leader_cost.control_weight),
                ("terminal_weight", &p.leader_cost.terminal_weight),
                ("tracking", &p.leader_cost.tracking),
                ("terminal_tracking", &p.leader_cost.terminal_tracking),
            ],
        ),
        (
            "follower_cost",
            vec![
                ("state_weight", &p.follower_cost.state_weight),
                ("control_weight", &p.follower_cost.control_weight),
                ("terminal_weight", &p.follower_cost.terminal_weight),
                ("mf_tracking", &p.follower_cost.mf_tracking),
                ("leader_tracking", &p.follower_cost.leader_tracking),
                ("terminal_mf_tracking", &p.follower_cost.terminal_mf_tracking),
                ("terminal_leader_tracking", &p.follower_cost.terminal_leader_tracking),
            ],
        ),
    ];
    for (name, fields) in sections {
        let _ = writeln!(s, "\n[{name}]");
        for (k, m) in fields {
            push_matrix(&mut s, k, m);
        }
    }
    let vec_line = |v: &Vector| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
    let _ = writeln!(s, "\n[init]\nleader_mean = [{}]", vec_line(&p.init.leader_mean));
    push_matrix(&mut s, "leader_cov", &p.init.leader_cov);
    let _ = writeln!(s, "follower_mean = [{}]", vec_line(&p.init.follower_mean));
    push_matrix(&mut s, "follower_cov", &p.init.follower_cov);
    s
}
