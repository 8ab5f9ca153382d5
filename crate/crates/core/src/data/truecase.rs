use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recases sentence-initial tokens to their most frequent casing seen in
/// non-initial positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truecaser {
    best: BTreeMap<String, String>,
}

impl Truecaser {
    pub fn learn<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<String, BTreeMap<String, usize>> = HashMap::new();
        for s in sentences {
            for t in s.iter().skip(1) {
                *counts
                    .entry(t.to_lowercase())
                    .or_default()
                    .entry(t.clone())
                    .or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .map(|(lower, forms)| {
                // BTreeMap iteration makes ties go to the smallest form
                let form = forms
                    .iter()
                    .fold(None::<(&String, usize)>, |acc, (f, &n)| match acc {
                        Some((_, m)) if m >= n => acc,
                        _ => Some((f, n)),
                    })
                    .map(|(f, _)| f.clone())
                    .unwrap_or_else(|| lower.clone());
                (lower, form)
            })
            .collect();
        Truecaser { best }
    }

    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = tokens.to_vec();
        if let Some(first) = out.first_mut() {
            if let Some(form) = self.best.get(&first.to_lowercase()) {
                *first = form.clone();
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.best.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best.is_empty()
    }

    /// `lowercase<TAB>form` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.best.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut best = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let (k, v) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "expected 'lowercase<TAB>form'".into(),
            })?;
            best.insert(k.to_string(), v.to_string());
        }
        Ok(Truecaser { best })
    }
}
