//! Layer-set and token-position selection.
//!
//! Layer sets use an F/M/L shorthand: `F2` = first two layers, `M1` = the
//! middle layer, `L5` = last five, `All` = every layer. Shorthands concatenate
//! (`F2L3` = first two plus last three).

use crate::error::{Result, RomaError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    First(usize),
    Middle(usize),
    Last(usize),
}

impl TokenSelector {
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        if n != 1 && n != 3 {
            return Err(RomaError::Config(format!(
                "token selector width must be 1 or 3, got {n}"
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        match *self {
            TokenSelector::First(n) | TokenSelector::Middle(n) | TokenSelector::Last(n) => n,
        }
    }

    /// Token indices selected from a sequence of length `seq_len`.
    pub fn positions(&self, seq_len: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let n = self.count();
        if n > seq_len {
            return Err(RomaError::Config(format!(
                "token selector needs {n} tokens but seq_len is {seq_len}"
            )));
        }
        Ok(match *self {
            TokenSelector::First(n) => (0..n).collect(),
            TokenSelector::Last(n) => (seq_len - n..seq_len).collect(),
            TokenSelector::Middle(n) => {
                let start = (seq_len - n) / 2;
                (start..start + n).collect()
            }
        })
    }

    pub fn name(&self) -> String {
        match *self {
            TokenSelector::First(n) => format!("first{n}"),
            TokenSelector::Middle(n) => format!("middle{n}"),
            TokenSelector::Last(n) => format!("last{n}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (kind, num) = s.split_at(s.find(|c: char| c.is_ascii_digit()).ok_or_else(|| {
            RomaError::Config(format!("token selector '{s}' missing a count"))
        })?);
        let n: usize = num
            .parse()
            .map_err(|_| RomaError::Config(format!("bad token selector count '{num}'")))?;
        let sel = match kind {
            "first" => TokenSelector::First(n),
            "middle" => TokenSelector::Middle(n),
            "last" => TokenSelector::Last(n),
            _ => {
                return Err(RomaError::Config(format!(
                    "unknown token selector kind '{kind}'"
                )))
            }
        };
        sel.validate()?;
        Ok(sel)
    }
}

/// Ordered set of layer indices.
pub type LayerSet = Vec<usize>;

/// Parse an F/M/L layer-set shorthand against a model with `n_layers` layers.
pub fn parse_layer_set(s: &str, n_layers: usize) -> Result<LayerSet> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok((0..n_layers).collect());
    }
    let mut set: BTreeSet<usize> = BTreeSet::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let kind = chars[i].to_ascii_uppercase();
        i += 1;
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(RomaError::Config(format!(
                "layer set '{s}': expected a count after '{kind}'"
            )));
        }
        let n: usize = chars[start..i].iter().collect::<String>().parse().unwrap();
        if n == 0 || n > n_layers {
            return Err(RomaError::Config(format!(
                "layer set '{s}': count {n} out of range for {n_layers} layers"
            )));
        }
        let layers: Vec<usize> = match kind {
            'F' => (0..n).collect(),
            'L' => (n_layers - n..n_layers).collect(),
            'M' => {
                let start = (n_layers - n) / 2;
                (start..start + n).collect()
            }
            _ => {
                return Err(RomaError::Config(format!(
                    "layer set '{s}': unknown group '{kind}' (expected F, M, L or All)"
                )))
            }
        };
        set.extend(layers);
    }
    if set.is_empty() {
        return Err(RomaError::Config("empty layer set".into()));
    }
    Ok(set.into_iter().collect())
}

pub fn validate_layer_set(layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(RomaError::Config("layer set must be nonempty".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(RomaError::Config(format!(
            "layer index {bad} >= n_layers {n_layers}"
        )));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RomaError::Config(
            "layer set must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Default regularization scope: last five layers (clamped for tiny models).
pub fn default_layer_set(n_layers: usize) -> LayerSet {
    let n = n_layers.min(5);
    (n_layers - n..n_layers).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fml_shorthand_parses() {
        assert_eq!(parse_layer_set("F2", 6).unwrap(), vec![0, 1]);
        assert_eq!(parse_layer_set("L5", 6).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_layer_set("M1", 6).unwrap(), vec![2]);
        assert_eq!(parse_layer_set("F1M1L1", 6).unwrap(), vec![0, 2, 5]);
        assert_eq!(parse_layer_set("F2L3", 6).unwrap(), vec![0, 1, 3, 4, 5]);
        assert_eq!(parse_layer_set("All", 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(parse_layer_set("Q3", 6).is_err());
        assert!(parse_layer_set("F9", 6).is_err());
    }

    #[test]
    fn token_positions() {
        assert_eq!(TokenSelector::Last(1).positions(8).unwrap(), vec![7]);
        assert_eq!(TokenSelector::Last(3).positions(8).unwrap(), vec![5, 6, 7]);
        assert_eq!(TokenSelector::First(3).positions(8).unwrap(), vec![0, 1, 2]);
        assert_eq!(TokenSelector::Middle(1).positions(8).unwrap(), vec![3]);
        assert_eq!(TokenSelector::Middle(3).positions(8).unwrap(), vec![2, 3, 4]);
        assert!(TokenSelector::Last(2).positions(8).is_err());
        assert!(TokenSelector::Last(3).positions(2).is_err());
    }

    #[test]
    fn selector_parse_roundtrip() {
        for s in ["first1", "first3", "middle1", "middle3", "last1", "last3"] {
            let sel = TokenSelector::parse(s).unwrap();
            assert_eq!(sel.name(), s);
        }
        assert!(TokenSelector::parse("last2").is_err());
        assert!(TokenSelector::parse("tail1").is_err());
    }
}
