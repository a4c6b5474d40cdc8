//! Fixed toy vocabulary shared by the backbone, the encoders and the suite files.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type Token = u32;

pub const PAD: Token = 0;
pub const UNK: Token = 1;
/// End-of-answer marker; generation stops when it is produced.
pub const EOA: Token = 2;

/// Number of answer classes shared by all task families.
pub const N_ANSWERS: usize = 4;
/// Number of distinct answer bindings; each binding has its own answer lexicon.
pub const N_BINDINGS: usize = 8;

/// Answer word for `(family, binding, class)` is onset[binding] + rime[class] + coda[family],
/// so no two families share an answer token.
pub const ANSWER_ONSETS: [&str; N_BINDINGS] = ["k", "l", "m", "n", "p", "r", "s", "t"];
pub const ANSWER_RIMES: [&str; N_ANSWERS] = ["a", "e", "i", "o"];
pub const ANSWER_CODAS: [&str; 5] = ["n", "s", "t", "d", "x"];

pub fn answer_word(family: usize, binding: usize, class: usize) -> String {
    format!(
        "{}{}{}",
        ANSWER_ONSETS[binding % N_BINDINGS],
        ANSWER_RIMES[class % N_ANSWERS],
        ANSWER_CODAS[family % ANSWER_CODAS.len()]
    )
}

pub const FILLER_WORDS: [&str; 6] = ["please", "now", "kindly", "quickly", "tell", "me"];

/// Short names used to spell per-family rule tokens.
pub const FAMILY_KEYS: [&str; 5] = ["attr", "count", "compare", "relate", "parity"];

pub const TEMPLATE_WORDS: [&[&str]; 5] = [
    &["what", "color", "is", "the", "object"],
    &["how", "many", "items", "are", "shown"],
    &["are", "there", "more", "dots", "than", "rings"],
    &["where", "is", "the", "marker", "placed"],
    &["is", "the", "number", "even", "or", "odd"],
];

#[derive(Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    /// The laboratory's vocabulary, padded with reserved entries up to 256.
    pub fn toy() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| Vocab::build(256))
    }

    fn build(size: usize) -> Vocab {
        let mut words: Vec<String> = ["<pad>", "<unk>", "<eoa>", "?", "using"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for f in 0..ANSWER_CODAS.len() {
            for b in 0..N_BINDINGS {
                words.extend((0..N_ANSWERS).map(|c| answer_word(f, b, c)));
            }
        }
        words.extend((0..N_BINDINGS).map(|b| format!("bind{b}")));
        for fam in FAMILY_KEYS {
            words.extend((0..N_BINDINGS).map(|b| format!("rule_{fam}_{b}")));
        }
        for template in TEMPLATE_WORDS {
            for w in template {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        words.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        let mut i = 0;
        while words.len() < size {
            words.push(format!("<reserved{i}>"));
            i += 1;
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as Token))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Token {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, token: Token) -> &str {
        self.words
            .get(token as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    /// Whitespace tokenizer; lowercases, splits a trailing `?` into its own token.
    pub fn encode(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            match lower.strip_suffix('?') {
                Some(stem) if !stem.is_empty() => {
                    out.push(self.id(stem));
                    out.push(self.id("?"));
                }
                _ => out.push(self.id(&lower)),
            }
        }
        out
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn answer(&self, family: usize, binding: usize, class: usize) -> Token {
        self.id(&answer_word(family, binding, class))
    }

    pub fn binding(&self, binding: usize) -> Token {
        self.id(&format!("bind{binding}"))
    }

    pub fn rule(&self, family: usize, binding: usize) -> Token {
        self.id(&format!("rule_{}_{binding}", FAMILY_KEYS[family]))
    }
}
