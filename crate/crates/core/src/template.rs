//! `{name}` substitution in command templates.
//!
//! `{{` and `}}` produce literal braces. Which names are legal depends on
//! where the template is used, see [`Context`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Workdir,
    Libdir,
    Revision,
    Output,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::Workdir, Var::Libdir, Var::Revision, Var::Output];

    pub fn name(self) -> &'static str {
        match self {
            Var::Workdir => "workdir",
            Var::Libdir => "libdir",
            Var::Revision => "revision",
            Var::Output => "output",
        }
    }

    fn lookup(name: &str) -> Option<Var> {
        Var::ALL.into_iter().find(|v| v.name() == name)
    }
}

/// Where a template is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    RevisionProbe,
    LibraryBuild,
    CodeBuild,
    TestRun,
}

impl Context {
    pub fn allows(self, var: Var) -> bool {
        match self {
            Context::RevisionProbe => false,
            Context::LibraryBuild => matches!(var, Var::Workdir | Var::Libdir),
            Context::CodeBuild => var != Var::Output,
            Context::TestRun => true,
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Context::RevisionProbe => "revision probe",
            Context::LibraryBuild => "library build step",
            Context::CodeBuild => "build step",
            Context::TestRun => "test run step",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown variable {{{0}}}")]
    Unknown(String),
    #[error("variable {{{var}}} is not available in a {context}")]
    NotAvailable { var: &'static str, context: String },
    #[error("unbalanced brace at byte {0}")]
    Unbalanced(usize),
}

enum Piece<'a> {
    Text(&'a str),
    Var(Var),
}

fn tokenize(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut text_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                pieces.push(Piece::Text(&template[text_start..i + 1]));
                i += 2;
                text_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                pieces.push(Piece::Text(&template[text_start..i + 1]));
                i += 2;
                text_start = i;
            }
            b'{' => {
                let close = template[i..]
                    .find('}')
                    .map(|off| i + off)
                    .ok_or(TemplateError::Unbalanced(i))?;
                let name = &template[i + 1..close];
                let var =
                    Var::lookup(name).ok_or_else(|| TemplateError::Unknown(name.to_string()))?;
                pieces.push(Piece::Text(&template[text_start..i]));
                pieces.push(Piece::Var(var));
                i = close + 1;
                text_start = i;
            }
            b'}' => return Err(TemplateError::Unbalanced(i)),
            _ => i += 1,
        }
    }
    pieces.push(Piece::Text(&template[text_start..]));
    Ok(pieces)
}

/// Checks that `template` only uses variables legal in `context`.
pub fn validate(template: &str, context: Context) -> Result<(), TemplateError> {
    for piece in tokenize(template)? {
        if let Piece::Var(var) = piece {
            if !context.allows(var) {
                return Err(TemplateError::NotAvailable {
                    var: var.name(),
                    context: context.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Values for substitution. Missing values expand to the empty string.
#[derive(Debug, Clone, Default)]
pub struct Vars {
    pub workdir: Option<String>,
    pub libdir: Option<String>,
    pub revision: Option<String>,
    pub output: Option<String>,
}

impl Vars {
    fn get(&self, var: Var) -> &str {
        let value = match var {
            Var::Workdir => &self.workdir,
            Var::Libdir => &self.libdir,
            Var::Revision => &self.revision,
            Var::Output => &self.output,
        };
        value.as_deref().unwrap_or("")
    }
}

pub fn expand(template: &str, vars: &Vars) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    for piece in tokenize(template)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Var(v) => out.push_str(vars.get(v)),
        }
    }
    Ok(out)
}
