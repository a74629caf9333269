use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;

/// One hyperparameter value. Integers stay integers through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ParamKind {
    Categorical {
        choices: Vec<ParamValue>,
    },
    /// Inclusive range.
    Integer {
        lo: i64,
        hi: i64,
    },
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        log: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn categorical(name: &str, choices: Vec<ParamValue>) -> Self {
        ParamSpec {
            name: name.into(),
            kind: ParamKind::Categorical { choices },
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64) -> Self {
        ParamSpec {
            name: name.into(),
            kind: ParamKind::Integer { lo, hi },
        }
    }

    pub fn continuous(name: &str, lo: f64, hi: f64, log: bool) -> Self {
        ParamSpec {
            name: name.into(),
            kind: ParamKind::Continuous { lo, hi, log },
        }
    }

    /// Strict check used for user-supplied spaces.
    pub fn validate(&self) -> Result<()> {
        let ok = match &self.kind {
            ParamKind::Categorical { choices } => choices.len() >= 2,
            ParamKind::Integer { lo, hi } => lo < hi,
            ParamKind::Continuous { lo, hi, log } => {
                lo.is_finite() && hi.is_finite() && lo < hi && (!log || *lo > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad parameter spec {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<ParamValue> {
        Ok(match &self.kind {
            ParamKind::Categorical { choices } => {
                if choices.is_empty() {
                    return Err(Error::invalid(format!("{} has no choices", self.name)));
                }
                choices[rng.below(choices.len() as u64) as usize].clone()
            }
            ParamKind::Integer { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid(format!("{} has an empty range", self.name)));
                }
                ParamValue::Int(lo + rng.below((hi - lo) as u64 + 1) as i64)
            }
            ParamKind::Continuous { lo, hi, log } => {
                if *log {
                    ParamValue::Float(rng.uniform(lo.ln(), hi.ln()).exp())
                } else {
                    ParamValue::Float(rng.uniform(*lo, *hi))
                }
            }
        })
    }
}

/// A configuration. Keys are ordered, so the JSON text is canonical.
pub type Config = BTreeMap<String, ParamValue>;

pub fn config_json(config: &Config) -> String {
    serde_json::to_string(config).expect("configs always serialise")
}

/// Draws each parameter independently, in the order given.
pub fn sample_config(space: &[ParamSpec], rng: &mut Rng) -> Result<Config> {
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    space
        .iter()
        .map(|p| Ok((p.name.clone(), p.sample(rng)?)))
        .collect()
}

pub fn read_space(path: impl AsRef<std::path::Path>) -> Result<Vec<ParamSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let space: Vec<ParamSpec> = serde_json::from_str(&text)?;
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    for p in &space {
        p.validate()?;
    }
    Ok(space)
}
