//! Synthetic bilingual corpus with a companion tagged corpus.
//!
//! Every source pseudo-word belongs to one of four classes (determiner,
//! adjective, noun, verb) and has exactly one target translation. Classes
//! are drawn independently per position and spelling carries no class
//! information. A target sentence lists the translations of all non-verbs in
//! source order, then those of the verbs in source order, so translation
//! needs each word's class. The tagged corpus labels every word with its
//! class; its training split only uses half of the noun and verb types.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
}

impl WordClass {
    pub const ALL: [WordClass; 4] = [WordClass::Det, WordClass::Adj, WordClass::Noun, WordClass::Verb];

    pub fn label(self) -> &'static str {
        match self {
            WordClass::Det => "D",
            WordClass::Adj => "A",
            WordClass::Noun => "N",
            WordClass::Verb => "V",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Word types per class, in [`WordClass::ALL`] order.
    pub types: [usize; 4],
    /// Relative class frequencies per position.
    pub class_weights: [f64; 4],
    pub mt_train: usize,
    pub mt_dev: usize,
    pub tag_train: usize,
    pub tag_dev: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 2017,
            types: [10, 40, 80, 60],
            class_weights: [0.15, 0.2, 0.35, 0.3],
            mt_train: 2000,
            mt_dev: 200,
            tag_train: 1500,
            tag_dev: 200,
            min_len: 3,
            max_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexEntry {
    pub source: String,
    pub target: String,
    pub class: WordClass,
    /// Allowed in the tagged training split.
    pub tag_train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub lexicon: Vec<LexEntry>,
    pub mt_train: Vec<(String, String)>,
    pub mt_dev: Vec<(String, String)>,
    pub tag_train: Vec<Vec<(String, String)>>,
    pub tag_dev: Vec<Vec<(String, String)>>,
}

const SRC_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const SRC_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const TGT_ONSETS: &[&str] = &["ch", "sh", "th", "kr", "pl", "st", "br", "gl", "tw", "dr"];
const TGT_VOWELS: &[&str] = &["ai", "ee", "oo", "ou", "ay", "ie"];

fn pseudo_word(rng: &mut ChaCha8Rng, onsets: &[&str], vowels: &[&str], used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", onsets.choose(rng).unwrap(), vowels.choose(rng).unwrap()))
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.types.contains(&0) || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Invalid(format!("invalid synthetic corpus settings: {self:?}")));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Invalid("class weights must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (mut src_used, mut tgt_used) = (BTreeSet::new(), BTreeSet::new());
        let mut lexicon = Vec::new();
        for (ci, &class) in WordClass::ALL.iter().enumerate() {
            let open = matches!(class, WordClass::Noun | WordClass::Verb);
            for k in 0..self.types[ci] {
                lexicon.push(LexEntry {
                    source: pseudo_word(&mut rng, SRC_ONSETS, SRC_VOWELS, &mut src_used),
                    target: pseudo_word(&mut rng, TGT_ONSETS, TGT_VOWELS, &mut tgt_used),
                    class,
                    tag_train: !open || k % 2 == 0,
                });
            }
        }
        let by_class: Vec<Vec<usize>> = WordClass::ALL
            .iter()
            .map(|&c| (0..lexicon.len()).filter(|&i| lexicon[i].class == c).collect())
            .collect();
        let seen: Vec<Vec<usize>> = by_class
            .iter()
            .map(|ids| ids.iter().copied().filter(|&i| lexicon[i].tag_train).collect())
            .collect();
        let total: f64 = self.class_weights.iter().sum();

        let sentence = |rng: &mut ChaCha8Rng, pools: &[Vec<usize>]| -> Vec<usize> {
            let len = rng.gen_range(self.min_len..=self.max_len);
            (0..len)
                .map(|_| {
                    let mut x = rng.gen::<f64>() * total;
                    let mut c = 0;
                    while c < 3 && x >= self.class_weights[c] {
                        x -= self.class_weights[c];
                        c += 1;
                    }
                    *pools[c].choose(rng).unwrap()
                })
                .collect()
        };
        let pair = |ids: &[usize]| -> (String, String) {
            let src: Vec<&str> = ids.iter().map(|&i| lexicon[i].source.as_str()).collect();
            let moved = ids.iter().filter(|&&i| lexicon[i].class != WordClass::Verb);
            let verbs = ids.iter().filter(|&&i| lexicon[i].class == WordClass::Verb);
            let tgt: Vec<&str> = moved.chain(verbs).map(|&i| lexicon[i].target.as_str()).collect();
            (src.join(" "), tgt.join(" "))
        };
        let tagged = |ids: &[usize]| -> Vec<(String, String)> {
            ids.iter()
                .map(|&i| (lexicon[i].source.clone(), lexicon[i].class.label().to_string()))
                .collect()
        };

        let mt_train = (0..self.mt_train)
            .map(|_| pair(&sentence(&mut rng, &by_class)))
            .collect();
        let mt_dev = (0..self.mt_dev).map(|_| pair(&sentence(&mut rng, &by_class))).collect();
        let tag_train = (0..self.tag_train)
            .map(|_| tagged(&sentence(&mut rng, &seen)))
            .collect();
        let tag_dev = (0..self.tag_dev)
            .map(|_| tagged(&sentence(&mut rng, &by_class)))
            .collect();
        Ok(SynthCorpus {
            lexicon,
            mt_train,
            mt_dev,
            tag_train,
            tag_dev,
        })
    }
}

/// File names written by [`SynthCorpus::write`].
pub const FILES: [&str; 6] = [
    "mt.train.src",
    "mt.train.tgt",
    "mt.dev.src",
    "mt.dev.tgt",
    "tag.train.tsv",
    "tag.dev.tsv",
];

impl SynthCorpus {
    /// File name to contents, in [`FILES`] order.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        let side = |pairs: &[(String, String)], tgt: bool| -> String {
            pairs
                .iter()
                .map(|(s, t)| format!("{}\n", if tgt { t } else { s }))
                .collect()
        };
        let tsv = |sents: &[Vec<(String, String)>]| -> String {
            sents
                .iter()
                .map(|s| s.iter().map(|(w, l)| format!("{w}\t{l}\n")).collect::<String>())
                .collect::<Vec<_>>()
                .join("\n")
        };
        vec![
            (FILES[0], side(&self.mt_train, false)),
            (FILES[1], side(&self.mt_train, true)),
            (FILES[2], side(&self.mt_dev, false)),
            (FILES[3], side(&self.mt_dev, true)),
            (FILES[4], tsv(&self.tag_train)),
            (FILES[5], tsv(&self.tag_dev)),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in self.render() {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthCorpus {
        SynthConfig {
            mt_train: 50,
            mt_dev: 10,
            tag_train: 40,
            tag_dev: 10,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn verbs_move_to_the_end() {
        let c = small();
        let class_of = |w: &str| c.lexicon.iter().find(|e| e.source == w).unwrap().clone();
        for (s, t) in &c.mt_train {
            let words: Vec<LexEntry> = s.split(' ').map(class_of).collect();
            let mut want: Vec<&str> = words
                .iter()
                .filter(|e| e.class != WordClass::Verb)
                .map(|e| e.target.as_str())
                .collect();
            want.extend(
                words
                    .iter()
                    .filter(|e| e.class == WordClass::Verb)
                    .map(|e| e.target.as_str()),
            );
            assert_eq!(t.split(' ').collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn tag_train_uses_half_the_open_classes() {
        let c = small();
        for s in &c.tag_train {
            for (w, l) in s {
                let e = c.lexicon.iter().find(|e| e.source == *w).unwrap();
                assert!(e.tag_train);
                assert_eq!(e.class.label(), l);
            }
        }
        let hidden = c.lexicon.iter().filter(|e| !e.tag_train).count();
        assert_eq!(hidden, 40 + 30);
    }

    #[test]
    fn deterministic_and_unique() {
        assert_eq!(small(), small());
        let c = small();
        let src: BTreeSet<&str> = c.lexicon.iter().map(|e| e.source.as_str()).collect();
        let tgt: BTreeSet<&str> = c.lexicon.iter().map(|e| e.target.as_str()).collect();
        assert_eq!(src.len(), c.lexicon.len());
        assert_eq!(tgt.len(), c.lexicon.len());
    }
}
