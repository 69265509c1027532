//! Joint text + image vocabulary and the prompt / image-run codecs.
//!
//! Id layout: the five specials, then text words in configuration order,
//! then the image codes, then placeholders in registration order.
//! Placeholders belong to the text split even though they sit after the
//! image range.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::Grid;

pub type TokenId = u32;

pub const SPECIAL_NAMES: [&str; 5] = ["<bos>", "<eos>", "<img>", "</img>", "<uncond>"];
pub const IDENT: &str = "[V]";

pub fn per_image_name(variant: usize) -> String {
    format!("S_{variant}")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("word list is empty")]
    NoWords,
    #[error("need at least 2 image codes, got {0}")]
    TooFewCodes(usize),
    #[error("duplicate word {0:?}")]
    Duplicate(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("image code {code} out of range ({limit} codes)")]
    CodeOutOfRange { code: usize, limit: usize },
    #[error("malformed image run: {0}")]
    MalformedRun(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("sequence of {len} tokens exceeds context {limit}")]
    TooLong { len: usize, limit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    pub img_start: TokenId,
    pub img_end: TokenId,
    pub uncond: TokenId,
}

/// Special ids never move: they occupy the first slots of every vocabulary.
pub const SPECIALS: Specials = Specials {
    bos: 0,
    eos: 1,
    img_start: 2,
    img_end: 3,
    uncond: 4,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub words: Vec<String>,
    pub image_codes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

/// On-disk shape of a vocabulary.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, TokenId>,
    words: Vec<String>,
    image_codes: usize,
    placeholders: Vec<String>,
    #[serde(default)]
    class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    image_codes: usize,
    placeholders: Vec<String>,
    class_names: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build(config: &VocabConfig) -> Result<Self, VocabError> {
        if config.words.is_empty() {
            return Err(VocabError::NoWords);
        }
        if config.image_codes < 2 {
            return Err(VocabError::TooFewCodes(config.image_codes));
        }
        let mut vocab = Self {
            words: Vec::new(),
            image_codes: config.image_codes,
            placeholders: Vec::new(),
            class_names: Vec::new(),
            lookup: HashMap::new(),
        };
        for w in &config.words {
            if vocab.lookup.contains_key(w) || SPECIAL_NAMES.contains(&w.as_str()) {
                return Err(VocabError::Duplicate(w.clone()));
            }
            let id = (SPECIAL_NAMES.len() + vocab.words.len()) as TokenId;
            vocab.lookup.insert(w.clone(), id);
            vocab.words.push(w.clone());
        }
        for c in &config.class_names {
            if !vocab.lookup.contains_key(c) {
                return Err(VocabError::UnknownWord(c.clone()));
            }
        }
        vocab.class_names = config.class_names.clone();
        Ok(vocab)
    }

    pub fn specials(&self) -> Specials {
        SPECIALS
    }

    pub fn size(&self) -> usize {
        SPECIAL_NAMES.len() + self.words.len() + self.image_codes + self.placeholders.len()
    }

    pub fn image_codes(&self) -> usize {
        self.image_codes
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    fn image_base(&self) -> usize {
        SPECIAL_NAMES.len() + self.words.len()
    }

    /// Half-open id range of the image split.
    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.image_base()..self.image_base() + self.image_codes
    }

    pub fn image_id(&self, code: usize) -> Result<TokenId, VocabError> {
        if code >= self.image_codes {
            return Err(VocabError::CodeOutOfRange {
                code,
                limit: self.image_codes,
            });
        }
        Ok((self.image_base() + code) as TokenId)
    }

    pub fn code_of(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        self.image_range().contains(&id).then(|| id - self.image_base())
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIAL_NAMES.len()
    }

    pub fn is_image(&self, id: TokenId) -> bool {
        self.image_range().contains(&(id as usize))
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        let id = id as usize;
        (SPECIAL_NAMES.len()..self.image_base()).contains(&id)
            || (self.image_range().end..self.size()).contains(&id)
    }

    pub fn id(&self, word: &str) -> Result<TokenId, VocabError> {
        self.lookup
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.lookup.contains_key(word)
    }

    pub fn token_name(&self, id: TokenId) -> String {
        let i = id as usize;
        if i < SPECIAL_NAMES.len() {
            SPECIAL_NAMES[i].to_string()
        } else if let Some(code) = self.code_of(id) {
            format!("<code:{code}>")
        } else if i < self.image_base() {
            self.words[i - SPECIAL_NAMES.len()].clone()
        } else if i < self.size() {
            self.placeholders[i - self.image_range().end].clone()
        } else {
            format!("<invalid:{i}>")
        }
    }

    /// Appends a placeholder word; the caller must grow the embedding table.
    pub fn register_placeholder(&mut self, name: &str) -> Result<TokenId, VocabError> {
        if self.lookup.contains_key(name) || SPECIAL_NAMES.contains(&name) {
            return Err(VocabError::Duplicate(name.to_string()));
        }
        let id = self.size() as TokenId;
        self.placeholders.push(name.to_string());
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: SPECIAL_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as TokenId))
                .collect(),
            words: self.words.clone(),
            image_codes: self.image_codes,
            placeholders: self.placeholders.clone(),
            class_names: self.class_names.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let file: VocabFile =
            serde_json::from_str(s).map_err(|e| VocabError::Template(format!("vocab json: {e}")))?;
        for (i, n) in SPECIAL_NAMES.iter().enumerate() {
            if file.specials.get(*n) != Some(&(i as TokenId)) {
                return Err(VocabError::Template(format!("special {n} must have id {i}")));
            }
        }
        let mut v = Self::build(&VocabConfig {
            words: file.words,
            image_codes: file.image_codes,
            class_names: file.class_names,
        })?;
        for p in &file.placeholders {
            v.register_placeholder(p)?;
        }
        Ok(v)
    }

    /// Content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Encodes a grid as `IMG_START, codes (row-major), IMG_END`.
    pub fn encode_image_grid(&self, grid: &Grid) -> Result<Vec<TokenId>, VocabError> {
        let sp = self.specials();
        let mut run = Vec::with_capacity(grid.codes().len() + 2);
        run.push(sp.img_start);
        for &c in grid.codes() {
            run.push(self.image_id(c as usize)?);
        }
        run.push(sp.img_end);
        Ok(run)
    }

    pub fn decode_image_tokens(
        &self,
        run: &[TokenId],
        h: usize,
        w: usize,
    ) -> Result<Grid, VocabError> {
        let sp = self.specials();
        if run.len() != h * w + 2 {
            return Err(VocabError::MalformedRun(format!(
                "length {} != {}",
                run.len(),
                h * w + 2
            )));
        }
        if run[0] != sp.img_start || run[run.len() - 1] != sp.img_end {
            return Err(VocabError::MalformedRun("missing image brackets".into()));
        }
        let codes = run[1..run.len() - 1]
            .iter()
            .map(|&id| {
                self.code_of(id)
                    .map(|c| c as u16)
                    .ok_or_else(|| VocabError::MalformedRun(format!("non-image id {id} inside run")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Grid::new(h, w, codes).ok_or_else(|| VocabError::MalformedRun("empty grid".into()))
    }

    /// Substitutes the template's slots and appends `IMG_START`.
    pub fn encode_prompt(
        &self,
        template: &PromptTemplate,
        class: Option<&str>,
        variant: Option<usize>,
    ) -> Result<TokenSequence, VocabError> {
        let sp = self.specials();
        let mut ids = vec![sp.bos];
        for slot in &template.pattern {
            let id = match slot {
                Slot::Word(w) => self.id(w)?,
                Slot::Ident => self.id(IDENT)?,
                Slot::Class => {
                    let c = class.ok_or_else(|| {
                        VocabError::Template("template has {CLASS} but no class given".into())
                    })?;
                    self.id(c)?
                }
                Slot::PerImage => {
                    let v = variant.ok_or_else(|| {
                        VocabError::Template("template has {PERIMG} but no variant given".into())
                    })?;
                    self.id(&per_image_name(v))?
                }
            };
            ids.push(id);
        }
        if variant.is_some() && !template.has_per_image() {
            return Err(VocabError::Template(
                "variant given for a template without {PERIMG}".into(),
            ));
        }
        ids.push(sp.img_start);
        let text_len = ids.len();
        Ok(TokenSequence { ids, text_len })
    }

    /// Encodes free text whose words are all known; `[V]`, `S_i` allowed.
    pub fn encode_text(&self, text: &str) -> Result<TokenSequence, VocabError> {
        let sp = self.specials();
        let mut ids = vec![sp.bos];
        for w in text.split_whitespace() {
            ids.push(self.id(&w.to_lowercase()).or_else(|_| self.id(w))?);
        }
        ids.push(sp.img_start);
        let text_len = ids.len();
        Ok(TokenSequence { ids, text_len })
    }

    /// Unconditional context: `UNCOND, IMG_START`.
    pub fn uncond_prompt(&self) -> TokenSequence {
        let sp = self.specials();
        TokenSequence {
            ids: vec![sp.uncond, sp.img_start],
            text_len: 2,
        }
    }
}

/// Prompt ids followed by an optional image run.
///
/// `text_len` counts the leading text and special ids, including the
/// trailing `IMG_START` of an image prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub text_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, text_len: usize) -> Self {
        Self { ids, text_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text(&self) -> &[TokenId] {
        &self.ids[..self.text_len]
    }

    /// Appends the image codes (no closing bracket) for teacher forcing.
    pub fn with_image(&self, vocab: &Vocabulary, grid: &Grid) -> Result<TokenSequence, VocabError> {
        let mut ids = self.ids[..self.text_len].to_vec();
        for &c in grid.codes() {
            ids.push(vocab.image_id(c as usize)?);
        }
        Ok(TokenSequence {
            ids,
            text_len: self.text_len,
        })
    }

    pub fn ends_with_img_start(&self, vocab: &Vocabulary) -> bool {
        self.text_len > 0 && self.ids[self.text_len - 1] == vocab.specials().img_start
    }

    pub fn count(&self, id: TokenId) -> usize {
        self.ids.iter().filter(|&&x| x == id).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Training,
    Reconstruction,
    Recontext,
    PropertyMod,
    ClassPrior,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Word(String),
    Ident,
    Class,
    PerImage,
}

/// Word pattern with `{IDENT}`, `{CLASS}` and `{PERIMG}` slots.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: Vec<Slot>,
    pub purpose: Purpose,
}

impl PromptTemplate {
    /// Parses e.g. `"a photo of {IDENT} {CLASS}"`.
    pub fn parse(pattern: &str, purpose: Purpose) -> Result<Self, VocabError> {
        let slots = pattern
            .split_whitespace()
            .map(|w| match w {
                "{IDENT}" => Ok(Slot::Ident),
                "{CLASS}" => Ok(Slot::Class),
                "{PERIMG}" => Ok(Slot::PerImage),
                w if w.starts_with('{') => Err(VocabError::Template(format!("unbound slot {w}"))),
                w => Ok(Slot::Word(w.to_lowercase())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let t = Self {
            pattern: slots,
            purpose,
        };
        t.validate()?;
        Ok(t)
    }

    /// `{IDENT}` must appear exactly once, except in class-prior probes
    /// where it must be absent. `{PERIMG}` may only be the final slot.
    pub fn validate(&self) -> Result<(), VocabError> {
        let idents = self.pattern.iter().filter(|s| **s == Slot::Ident).count();
        match (self.purpose, idents) {
            (Purpose::ClassPrior, 0) => {}
            (Purpose::ClassPrior, _) => {
                return Err(VocabError::Template("class-prior template contains {IDENT}".into()))
            }
            (_, 1) => {}
            (_, n) => return Err(VocabError::Template(format!("{{IDENT}} appears {n} times"))),
        }
        if let Some(pos) = self.pattern.iter().position(|s| *s == Slot::PerImage) {
            if pos != self.pattern.len() - 1 {
                return Err(VocabError::Template("{PERIMG} must be the final slot".into()));
            }
        }
        if self.pattern.iter().filter(|s| **s == Slot::Class).count() > 1 {
            return Err(VocabError::Template("{CLASS} appears more than once".into()));
        }
        Ok(())
    }

    pub fn has_per_image(&self) -> bool {
        self.pattern.last() == Some(&Slot::PerImage)
    }

    pub fn has_class(&self) -> bool {
        self.pattern.contains(&Slot::Class)
    }

    /// Same wording with the identifier removed, as a class-prior probe.
    pub fn without_ident(&self) -> PromptTemplate {
        PromptTemplate {
            pattern: self
                .pattern
                .iter()
                .filter(|s| **s != Slot::Ident)
                .cloned()
                .collect(),
            purpose: Purpose::ClassPrior,
        }
    }

    /// Same wording with the class word removed.
    pub fn without_class(&self) -> PromptTemplate {
        PromptTemplate {
            pattern: self.pattern.iter().filter(|s| **s != Slot::Class).cloned().collect(),
            purpose: self.purpose,
        }
    }

    pub fn with_per_image(&self) -> PromptTemplate {
        let mut t = self.clone();
        if !t.has_per_image() {
            t.pattern.push(Slot::PerImage);
        }
        t
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<String> = self
            .pattern
            .iter()
            .map(|s| match s {
                Slot::Word(w) => w.clone(),
                Slot::Ident => "{IDENT}".into(),
                Slot::Class => "{CLASS}".into(),
                Slot::PerImage => "{PERIMG}".into(),
            })
            .collect();
        write!(f, "{}", words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(n_words: usize, codes: usize) -> VocabConfig {
        let mut words: Vec<String> = ["a", "photo", "of", "dog"].iter().map(|s| s.to_string()).collect();
        for i in words.len()..n_words {
            words.push(format!("w{i}"));
        }
        VocabConfig {
            words,
            image_codes: codes,
            class_names: vec!["dog".into()],
        }
    }

    #[test]
    fn build_counts_and_determinism() {
        let v = Vocabulary::build(&config(10, 64)).unwrap();
        assert_eq!(v.size(), 79);
        assert_eq!(v, Vocabulary::build(&config(10, 64)).unwrap());
        assert_eq!(v.id("a").unwrap(), 5);
        assert_eq!(v.image_id(0).unwrap(), 15);
        assert_eq!(
            Vocabulary::build(&VocabConfig { words: vec![], image_codes: 64, class_names: vec![] }),
            Err(VocabError::NoWords)
        );
        let mut dup = config(10, 64);
        dup.words.push("a".into());
        assert!(matches!(Vocabulary::build(&dup), Err(VocabError::Duplicate(_))));
        assert!(Vocabulary::build(&config(10, 1)).is_err());
    }

    #[test]
    fn placeholders_append() {
        let mut v = Vocabulary::build(&config(10, 64)).unwrap();
        assert_eq!(v.register_placeholder(IDENT).unwrap(), 79);
        assert!(v.register_placeholder(IDENT).is_err());
        let ids: Vec<_> = (1..=4)
            .map(|i| v.register_placeholder(&per_image_name(i)).unwrap())
            .collect();
        assert_eq!(ids, vec![80, 81, 82, 83]);
        assert_eq!(v.size(), 84);
        assert!(ids.iter().all(|&i| v.is_text(i) && !v.is_image(i)));
    }

    #[test]
    fn splits_are_disjoint() {
        let mut v = Vocabulary::build(&config(12, 16)).unwrap();
        v.register_placeholder(IDENT).unwrap();
        for id in 0..v.size() as TokenId {
            let n = [v.is_special(id), v.is_text(id), v.is_image(id)]
                .iter()
                .filter(|&&b| b)
                .count();
            assert_eq!(n, 1, "id {id}");
        }
    }

    #[test]
    fn prompt_encoding() {
        let mut v = Vocabulary::build(&config(10, 64)).unwrap();
        let ident = v.register_placeholder(IDENT).unwrap();
        for i in 1..=4 {
            v.register_placeholder(&per_image_name(i)).unwrap();
        }
        let t = PromptTemplate::parse("A photo of {IDENT} {CLASS}", Purpose::Training).unwrap();
        let seq = v.encode_prompt(&t, Some("dog"), None).unwrap();
        // bos, a, photo, of, [V], dog, img_start
        assert_eq!(seq.ids, vec![0, 5, 6, 7, 79, 8, 2]);
        assert_eq!(seq.text_len, 7);
        assert_eq!(seq.count(ident), 1);

        let tb = t.with_per_image();
        let seq = v.encode_prompt(&tb, Some("dog"), Some(2)).unwrap();
        assert_eq!(seq.ids, vec![0, 5, 6, 7, 79, 8, 81, 2]);

        let bad = PromptTemplate::parse("a photo of {IDENT} cat", Purpose::Training).unwrap();
        assert_eq!(
            v.encode_prompt(&bad, None, None),
            Err(VocabError::UnknownWord("cat".into()))
        );
        assert!(v.encode_prompt(&t, Some("dog"), Some(1)).is_err());
    }

    #[test]
    fn template_invariants() {
        assert!(PromptTemplate::parse("a photo of dog", Purpose::Training).is_err());
        assert!(PromptTemplate::parse("{IDENT} {IDENT}", Purpose::Training).is_err());
        assert!(PromptTemplate::parse("{PERIMG} {IDENT}", Purpose::Training).is_err());
        assert!(PromptTemplate::parse("a photo of {CLASS}", Purpose::ClassPrior).is_ok());
        let t = PromptTemplate::parse("a photo of {IDENT} {CLASS}", Purpose::Recontext).unwrap();
        assert_eq!(t.without_ident().to_string(), "a photo of {CLASS}");
        assert_eq!(t.to_string(), "a photo of {IDENT} {CLASS}");
    }

    #[test]
    fn image_run_examples() {
        let v = Vocabulary::build(&config(10, 64)).unwrap();
        let g = Grid::new(1, 1, vec![3]).unwrap();
        let run = v.encode_image_grid(&g).unwrap();
        assert_eq!(run, vec![2, v.image_id(3).unwrap(), 3]);
        assert_eq!(v.decode_image_tokens(&run, 1, 1).unwrap(), g);
        let big = Grid::filled(16, 16, 5);
        assert_eq!(v.encode_image_grid(&big).unwrap().len(), 258);
        assert!(v.encode_image_grid(&Grid::filled(2, 2, 64)).is_err());
        assert!(v.decode_image_tokens(&run[..2], 1, 1).is_err());
        assert!(v.decode_image_tokens(&[2, 5, 3], 1, 1).is_err());
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let mut v = Vocabulary::build(&config(10, 64)).unwrap();
        v.register_placeholder(IDENT).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let json: serde_json::Value = serde_json::from_str(&v.to_json()).unwrap();
        for key in ["specials", "words", "image_codes", "placeholders"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn image_round_trip(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
            let v = Vocabulary::build(&config(10, 64)).unwrap();
            let codes: Vec<u16> = (0..h * w).map(|i| ((seed >> (i % 60)) as u16 ^ i as u16) % 64).collect();
            let g = Grid::new(h, w, codes).unwrap();
            let run = v.encode_image_grid(&g).unwrap();
            prop_assert_eq!(run.len(), h * w + 2);
            prop_assert_eq!(v.decode_image_tokens(&run, h, w).unwrap(), g);
        }
    }
}
