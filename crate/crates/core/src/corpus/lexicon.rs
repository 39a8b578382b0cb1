use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

pub const VERBS: [&str; 8] = ["open", "close", "take", "put", "wash", "cut", "hold", "move"];
pub const NOUNS: [&str; 8] = ["drawer", "fridge", "hat", "phone", "cup", "knife", "door", "bag"];
const PLURALS: [&str; 8] = ["drawers", "fridges", "hats", "phones", "cups", "knives", "doors", "bags"];

const FILLERS: [&str; 44] = [
    "c", "the", "a", "all", "scenes", "containing", "and", "show", "me", "clips", "with", "find",
    "every", "shot", "that", "has", "where", "appear", "video", "segments", "featuring", "moments",
    "including", "both", "parts", "of", "showing", "depicting", "together", "any", "frames",
    "which", "contain", "shots", "in", "there", "are", "on", "from", "into", "his", "her", "left",
    "right",
];

/// Closed vocabulary with noun/verb tags. Plural noun forms share the
/// singular's id.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    index: HashMap<String, usize>,
    noun_ids: BTreeSet<usize>,
    verb_ids: BTreeSet<usize>,
}

impl Lexicon {
    pub fn standard() -> Lexicon {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        let mut add = |words: &mut Vec<String>, w: &str| {
            let id = words.len();
            words.push(w.to_string());
            index.insert(w.to_string(), id);
            id
        };
        let verb_ids = VERBS.iter().map(|v| add(&mut words, v)).collect();
        let noun_ids: BTreeSet<usize> = NOUNS.iter().map(|n| add(&mut words, n)).collect();
        for f in FILLERS {
            add(&mut words, f);
        }
        for (plural, singular) in PLURALS.iter().zip(NOUNS) {
            let id = index[singular];
            index.insert(plural.to_string(), id);
        }
        Lexicon {
            words,
            index,
            noun_ids,
            verb_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a surface form (case-insensitive); unknown words map to UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn noun_ids(&self) -> &BTreeSet<usize> {
        &self.noun_ids
    }

    pub fn verb_ids(&self) -> &BTreeSet<usize> {
        &self.verb_ids
    }

    pub fn noun(&self, k: usize) -> usize {
        self.index[NOUNS[k]]
    }

    pub fn verb(&self, k: usize) -> usize {
        self.index[VERBS[k]]
    }

    /// Position of a noun id within `NOUNS`.
    pub fn noun_index(&self, id: usize) -> Option<usize> {
        self.word(id).and_then(|w| NOUNS.iter().position(|n| *n == w))
    }

    pub fn verb_index(&self, id: usize) -> Option<usize> {
        self.word(id).and_then(|w| VERBS.iter().position(|v| *v == w))
    }

    pub fn plural(&self, noun_id: usize) -> Result<&'static str> {
        self.noun_index(noun_id)
            .map(|k| PLURALS[k])
            .ok_or_else(|| Error::contract(format!("token id {noun_id} is not a noun")))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids a random replacement may take.
    pub fn ordinary_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.words.len()
    }

    /// Noun and verb sets of a token sequence.
    pub fn tag(&self, tokens: &[usize]) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let nouns = tokens.iter().copied().filter(|t| self.noun_ids.contains(t)).collect();
        let verbs = tokens.iter().copied().filter(|t| self.verb_ids.contains(t)).collect();
        (nouns, verbs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_are_disjoint_from_each_other_and_specials() {
        let lex = Lexicon::standard();
        assert_eq!(lex.len(), 64);
        assert!(lex.noun_ids().is_disjoint(lex.verb_ids()));
        for id in [PAD, CLS, MASK, UNK] {
            assert!(!lex.noun_ids().contains(&id) && !lex.verb_ids().contains(&id));
        }
    }

    #[test]
    fn plurals_lemmatise() {
        let lex = Lexicon::standard();
        assert_eq!(lex.id("knives"), lex.id("knife"));
        assert_eq!(lex.id("Hats"), lex.id("hat"));
        assert_eq!(lex.id("zebra"), UNK);
        assert_eq!(lex.plural(lex.id("phone")).unwrap(), "phones");
        assert!(lex.plural(lex.id("open")).is_err());
    }
}
