//! Flat key-value text snapshots for model parameters and replay state.
//!
//! One entry per line: `name d1 d2 ... : v1 v2 ...`. Values are written with
//! Rust's shortest round-trip float formatting, so a load after a save is
//! bit-exact. Lines starting with `#` and blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    entries: Vec<Entry>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Total number of stored scalars.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) {
        let name = name.into();
        debug_assert!(!name.contains(char::is_whitespace));
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry { name, dims, values });
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(name, vec![m.rows(), m.cols()], m.data().to_vec());
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.insert(name, vec![v.len()], v.to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("snapshot has no entry `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let e = self.get(name)?;
        match e.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, e.values.clone()),
            dims => Err(Error::Shape(format!(
                "entry `{name}` has dims {dims:?}, expected a matrix"
            ))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.get(name)?;
        if e.dims.len() != 1 {
            return Err(Error::Shape(format!(
                "entry `{name}` has dims {:?}, expected a vector",
                e.dims
            )));
        }
        Ok(e.values.clone())
    }

    /// Prefixes every entry name with `prefix.` and merges into `self`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: Snapshot) {
        for e in other.entries {
            self.insert(format!("{prefix}.{}", e.name), e.dims, e.values);
        }
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Snapshot {
        let head = format!("{prefix}.");
        Snapshot {
            entries: self
                .entries
                .iter()
                .filter_map(|e| {
                    e.name.strip_prefix(&head).map(|rest| Entry {
                        name: rest.to_string(),
                        dims: e.dims.clone(),
                        values: e.values.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.name);
            for d in &e.dims {
                let _ = write!(out, " {d}");
            }
            out.push_str(" :");
            for v in &e.values {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Snapshot> {
        let mut snap = Snapshot::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, tail) = line.split_once(" :").ok_or_else(|| Error::Parse {
                line: line_no,
                key: line.split_whitespace().next().unwrap_or("").to_string(),
                message: "missing ` :` separator".into(),
            })?;
            let mut parts = head.split_whitespace();
            let name = parts.next().unwrap_or("").to_string();
            let bad = |message: String| Error::Parse {
                line: line_no,
                key: name.clone(),
                message,
            };
            let dims = parts
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|e| bad(format!("bad dimension `{d}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let values = tail
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| bad(format!("bad value `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if dims.iter().product::<usize>() != values.len() {
                return Err(bad(format!(
                    "dims {dims:?} do not match {} values",
                    values.len()
                )));
            }
            snap.insert(name, dims, values);
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        Snapshot::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_dims() {
        let err = Snapshot::parse("w 2 2 : 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn sub_strips_prefix() {
        let mut inner = Snapshot::new();
        inner.insert_vector("b", &[1.0, 2.0]);
        let mut outer = Snapshot::new();
        outer.merge_prefixed("image", inner.clone());
        assert_eq!(outer.entries()[0].name, "image.b");
        assert_eq!(outer.sub("image"), inner);
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
            let mut s = Snapshot::new();
            s.insert_vector("v", &values);
            let back = Snapshot::parse(&s.to_text()).unwrap();
            let got = back.vector("v").unwrap();
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
