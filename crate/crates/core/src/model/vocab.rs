use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;

pub const SPECIALS: [&str; 4] = ["[BOS]", "[EOS]", "[MASK]", "[PAD]"];

/// Symbol/id bijection over a task alphabet plus the four special tokens,
/// which always occupy ids `0..4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
    /// Ids of the task alphabet Σ in insertion order; `[PAD]` appears here
    /// when the task uses it as an output symbol.
    sigma: Vec<usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(sigma: &[S]) -> Result<Self> {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = symbols.iter().cloned().zip(0..).collect();
        let mut sigma_ids = Vec::with_capacity(sigma.len());
        for s in sigma {
            let s = s.as_ref();
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("symbol {s:?} must be non-empty without whitespace")));
            }
            let id = match ids.get(s) {
                Some(&PAD) => PAD,
                Some(_) if sigma_ids.iter().any(|&i| symbols[i] == s) => {
                    return Err(Error::Config(format!("duplicate symbol {s:?}")))
                }
                Some(_) => return Err(Error::Config(format!("{s:?} is reserved"))),
                None => {
                    symbols.push(s.to_string());
                    ids.insert(s.to_string(), symbols.len() - 1);
                    symbols.len() - 1
                }
            };
            sigma_ids.push(id);
        }
        Ok(Self {
            symbols,
            ids,
            sigma: sigma_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.ids
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownToken(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("[?]").to_string())
            .collect()
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    /// Task symbols in insertion order.
    pub fn sigma_symbols(&self) -> Vec<&str> {
        self.sigma.iter().map(|&i| self.symbols[i].as_str()).collect()
    }

    /// Ids covered by an output head: Σ plus `[MASK]` for masked modeling or
    /// `[EOS]` for autoregressive modeling.
    pub fn output_ids(&self, mode: super::Mode) -> Vec<usize> {
        let mut out = self.sigma.clone();
        out.push(match mode {
            super::Mode::Mlm => MASK,
            super::Mode::Alm => EOS,
        });
        out
    }
}
