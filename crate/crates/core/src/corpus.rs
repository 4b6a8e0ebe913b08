//! Template QA corpus: item type, JSONL I/O and the bundled generator.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_output: Option<String>,
}

impl QaItem {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QaItem {
            question: question.into(),
            answer: answer.into(),
            reference_output: None,
        }
    }

    pub fn prompt_tokens(&self) -> Result<Vec<usize>> {
        tokenizer::encode(&tokenizer::prompt_text(&self.question))
    }

    /// Prompt, completion and end-of-sequence as one training sequence.
    pub fn to_sequence(&self) -> Result<Sequence> {
        let mut tokens = self.prompt_tokens()?;
        let prompt_len = tokens.len();
        tokens.extend(tokenizer::encode(&tokenizer::completion_text(&self.answer))?);
        tokens.push(EOS);
        Ok(Sequence { tokens, prompt_len })
    }
}

/// Token sequence whose tokens after `prompt_len` are the training targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

impl Sequence {
    pub fn check(&self, max_seq_len: usize) -> Result<()> {
        if self.prompt_len == 0 || self.prompt_len >= self.tokens.len() {
            return Err(Error::Invalid(format!(
                "sequence needs a non-empty prompt and completion (prompt {} of {})",
                self.prompt_len,
                self.tokens.len()
            )));
        }
        if self.tokens.len() > max_seq_len + 1 {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {max_seq_len}",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

pub fn to_sequences(items: &[QaItem]) -> Result<Vec<Sequence>> {
    items.iter().map(QaItem::to_sequence).collect()
}

pub fn load_jsonl(path: &Path) -> Result<Vec<QaItem>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if item.question.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty question".into(),
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn save_jsonl(path: &Path, items: &[QaItem]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Family {
    phrasings: [&'static str; 16],
    answer: &'static str,
    lexicon: [(&'static str, &'static str); 12],
}

const FAMILIES: [Family; 8] = [
    Family {
        phrasings: [
            "what color is the {e}?",
            "color of the {e}?",
            "what is the color of the {e}?",
            "which color is the {e}?",
            "tell me the color of the {e}.",
            "what colour is the {e}?",
            "name the color of the {e}.",
            "the {e} is what color?",
            "say the color of the {e}.",
            "i wonder what color the {e} is?",
            "do you know the color of the {e}?",
            "what shade is the {e}?",
            "color of a {e}?",
            "what color is a {e}?",
            "describe the color of the {e}.",
            "which colour is the {e}?",
        ],
        answer: "the {e} is {a}",
        lexicon: [
            ("sky", "blue"),
            ("grass", "green"),
            ("snow", "white"),
            ("coal", "black"),
            ("banana", "yellow"),
            ("blood", "red"),
            ("cherry", "red"),
            ("lemon", "yellow"),
            ("milk", "white"),
            ("crow", "black"),
            ("frog", "green"),
            ("ocean", "blue"),
        ],
    },
    Family {
        phrasings: [
            "what does a {e} say?",
            "what sound does a {e} make?",
            "the {e} says what?",
            "which sound is made by a {e}?",
            "what noise does a {e} make?",
            "how does a {e} sound?",
            "tell me what a {e} says.",
            "what is the sound of a {e}?",
            "what does the {e} say?",
            "sound of a {e}?",
            "a {e} says what?",
            "what sound comes from a {e}?",
            "which noise does a {e} make?",
            "do you know what a {e} says?",
            "what does a {e} sound like?",
            "name the sound of a {e}.",
        ],
        answer: "the {e} says {a}",
        lexicon: [
            ("cow", "moo"),
            ("dog", "woof"),
            ("cat", "meow"),
            ("duck", "quack"),
            ("sheep", "baa"),
            ("owl", "hoot"),
            ("pig", "oink"),
            ("lion", "roar"),
            ("bee", "buzz"),
            ("horse", "neigh"),
            ("snake", "hiss"),
            ("mouse", "squeak"),
        ],
    },
    Family {
        phrasings: [
            "what is the opposite of {e}?",
            "opposite of {e}?",
            "what word means the opposite of {e}?",
            "give the opposite of {e}.",
            "the opposite of {e} is what?",
            "name the opposite of {e}.",
            "what is the antonym of {e}?",
            "antonym of {e}?",
            "what is the reverse of {e}?",
            "give me the antonym of {e}.",
            "which word is opposite to {e}?",
            "the antonym of {e} is what?",
            "tell me the opposite of {e}.",
            "what is opposite to {e}?",
            "say the opposite of {e}.",
            "do you know the opposite of {e}?",
        ],
        answer: "the opposite is {a}",
        lexicon: [
            ("hot", "cold"),
            ("big", "small"),
            ("up", "down"),
            ("fast", "slow"),
            ("happy", "sad"),
            ("light", "dark"),
            ("early", "late"),
            ("full", "empty"),
            ("open", "closed"),
            ("hard", "soft"),
            ("tall", "short"),
            ("rich", "poor"),
        ],
    },
    Family {
        phrasings: [
            "where does a {e} live?",
            "what is the home of a {e}?",
            "where is the home of a {e}?",
            "a {e} lives where?",
            "name the home of a {e}.",
            "where can you find a {e}?",
            "where does a {e} sleep?",
            "what home does a {e} have?",
            "where does the {e} live?",
            "home of a {e}?",
            "where would a {e} live?",
            "tell me where a {e} lives.",
            "which home belongs to a {e}?",
            "where do you find a {e}?",
            "a {e} sleeps where?",
            "what place does a {e} live in?",
        ],
        answer: "it lives in a {a}",
        lexicon: [
            ("bird", "nest"),
            ("bear", "cave"),
            ("rabbit", "burrow"),
            ("spider", "web"),
            ("ant", "hill"),
            ("fox", "den"),
            ("beaver", "lodge"),
            ("hen", "coop"),
            ("king", "castle"),
            ("sailor", "ship"),
            ("farmer", "farm"),
            ("monk", "temple"),
        ],
    },
    Family {
        phrasings: [
            "what is the plural of {e}?",
            "plural of {e}?",
            "what is more than one {e}?",
            "give the plural of {e}.",
            "the plural of {e} is what?",
            "how do you say many {e}?",
            "name the plural of {e}.",
            "what do you call two of {e}?",
            "plural form of {e}?",
            "tell me the plural of {e}.",
            "what is the plural form of {e}?",
            "say the plural of {e}.",
            "one {e}, two what?",
            "many {e} are called what?",
            "which word is the plural of {e}?",
            "do you know the plural of {e}?",
        ],
        answer: "the plural is {a}",
        lexicon: [
            ("child", "children"),
            ("foot", "feet"),
            ("tooth", "teeth"),
            ("man", "men"),
            ("woman", "women"),
            ("goose", "geese"),
            ("person", "people"),
            ("box", "boxes"),
            ("knife", "knives"),
            ("cactus", "cacti"),
            ("ox", "oxen"),
            ("city", "cities"),
        ],
    },
    Family {
        phrasings: [
            "what is the capital of {e}?",
            "capital of {e}?",
            "which city is the capital of {e}?",
            "name the capital of {e}.",
            "the capital of {e} is what?",
            "what city is the capital of {e}?",
            "tell me the capital of {e}.",
            "where is the capital of {e}?",
            "capital city of {e}?",
            "what is the capital city of {e}?",
            "say the capital of {e}.",
            "which city is the capital city of {e}?",
            "do you know the capital of {e}?",
            "the capital city of {e} is what?",
            "give the capital of {e}.",
            "name the capital city of {e}.",
        ],
        answer: "the capital is {a}",
        lexicon: [
            ("france", "paris"),
            ("japan", "tokyo"),
            ("italy", "rome"),
            ("spain", "madrid"),
            ("egypt", "cairo"),
            ("peru", "lima"),
            ("china", "beijing"),
            ("russia", "moscow"),
            ("kenya", "nairobi"),
            ("canada", "ottawa"),
            ("greece", "athens"),
            ("norway", "oslo"),
        ],
    },
    Family {
        phrasings: [
            "what comes after {e}?",
            "what number follows {e}?",
            "which number comes after {e}?",
            "what is the next number after {e}?",
            "count on from {e}.",
            "after {e} comes what?",
            "name the number after {e}.",
            "what number is after {e}?",
            "what follows {e}?",
            "which number follows {e}?",
            "the number after {e} is what?",
            "tell me the number after {e}.",
            "say the number after {e}.",
            "after {e} what comes next?",
            "what is one more than {e}?",
            "count up from {e}.",
        ],
        answer: "the next number is {a}",
        lexicon: [
            ("one", "two"),
            ("two", "three"),
            ("three", "four"),
            ("four", "five"),
            ("five", "six"),
            ("six", "seven"),
            ("seven", "eight"),
            ("eight", "nine"),
            ("nine", "ten"),
            ("ten", "eleven"),
            ("eleven", "twelve"),
            ("twelve", "thirteen"),
        ],
    },
    Family {
        phrasings: [
            "what tool do you use to {e}?",
            "which tool helps you {e}?",
            "what do you need to {e}?",
            "name a tool to {e}.",
            "what is used to {e}?",
            "to {e} you use what?",
            "what should i use to {e}?",
            "tell me a tool to {e}.",
            "what tool is used to {e}?",
            "to {e}, what do you use?",
            "which tool do you need to {e}?",
            "say a tool to {e}.",
            "what helps you {e}?",
            "give me a tool to {e}.",
            "what do you {e} with?",
            "do you know a tool to {e}?",
        ],
        answer: "you use a {a}",
        lexicon: [
            ("write", "pen"),
            ("dig", "spade"),
            ("paint", "brush"),
            ("sew", "needle"),
            ("sweep", "broom"),
            ("chop", "axe"),
            ("measure", "ruler"),
            ("cook", "pan"),
            ("fish", "rod"),
            ("type", "keyboard"),
            ("lock", "key"),
            ("row", "oar"),
        ],
    },
];

pub const BENCHMARK_SIZE: usize = 200;
const SPLIT_SEED: u64 = 20240917;

/// All template instantiations in family, phrasing, entity order.
pub fn template_items() -> Vec<QaItem> {
    let mut out = Vec::new();
    for fam in &FAMILIES {
        for p in fam.phrasings {
            for (e, a) in fam.lexicon {
                out.push(QaItem::new(
                    p.replace("{e}", e),
                    fam.answer.replace("{e}", e).replace("{a}", a),
                ));
            }
        }
    }
    out
}

/// Deterministic (train, benchmark) split of the template corpus.
pub fn bundled_split() -> (Vec<QaItem>, Vec<QaItem>) {
    let mut items = template_items();
    let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
    items.shuffle(&mut rng);
    let train = items.split_off(BENCHMARK_SIZE);
    (train, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn shipped_files_match_the_generator() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
        let (train, bench) = bundled_split();
        if std::env::var_os("ATTRSPARSE_WRITE_DATA").is_some() {
            save_jsonl(&dir.join("train.jsonl"), &train).unwrap();
            save_jsonl(&dir.join("benchmark.jsonl"), &bench).unwrap();
        }
        assert_eq!(load_jsonl(&dir.join("train.jsonl")).unwrap(), train);
        assert_eq!(load_jsonl(&dir.join("benchmark.jsonl")).unwrap(), bench);
    }

    #[test]
    fn template_counts() {
        let items = template_items();
        assert_eq!(items.len(), 8 * 16 * 12);
        let questions: HashSet<_> = items.iter().map(|i| &i.question).collect();
        assert_eq!(questions.len(), items.len());
    }

    #[test]
    fn entities_do_not_repeat_across_families() {
        let mut seen = HashMap::new();
        for (f, fam) in FAMILIES.iter().enumerate() {
            for (e, _) in fam.lexicon {
                if let Some(prev) = seen.insert(e, f) {
                    assert_eq!(prev, f, "{e} appears in two families");
                }
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let (train, bench) = bundled_split();
        assert_eq!(bench.len(), BENCHMARK_SIZE);
        let tq: HashSet<_> = train.iter().map(|i| &i.question).collect();
        assert!(bench.iter().all(|i| !tq.contains(&i.question)));
        assert_eq!(bundled_split().1, bench);
    }

    #[test]
    fn sequences_fit_and_end_with_eos() {
        for item in template_items() {
            let s = item.to_sequence().unwrap();
            assert!(s.tokens.len() <= 81, "{}", item.question);
            assert_eq!(*s.tokens.last().unwrap(), EOS);
            assert_eq!(
                tokenizer::decode(&s.tokens[..s.prompt_len]),
                format!("Q: {} A:", item.question)
            );
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let mut items = template_items()[..3].to_vec();
        items[1].reference_output = Some("ref".into());
        save_jsonl(&path, &items).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), items);
    }

    #[test]
    fn jsonl_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"question\":\"a\",\"answer\":\"b\"}\nnot json\n").unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
