use std::collections::{BTreeSet, HashMap};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Word vocabulary. Ids 0..3 are `<s>`, `</s>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<&str>())
    }
}

impl Vocab {
    /// Reserved words first, then `words` in order with duplicates dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [BOS, EOS, UNK] {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    /// Sorted union of the whitespace words of every sentence.
    pub fn from_sentences<'a, I, S>(corpora: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut set = BTreeSet::new();
        for corpus in corpora {
            for line in corpus {
                set.extend(line.as_ref().split_whitespace());
            }
        }
        Self::from_words(set)
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len() as u32);
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Id of a text word. Unknown words, and the sentence markers when they
    /// appear literally in text, map to `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> u32 {
        match self.index.get(word) {
            Some(&id) if id != BOS_ID && id != EOS_ID => id,
            _ => UNK_ID,
        }
    }

    /// `<s> w1 … wm </s>`.
    pub fn encode_sentence(&self, sentence: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(sentence.split_whitespace().map(|w| self.id_or_unk(w)));
        ids.push(EOS_ID);
        ids
    }
}
