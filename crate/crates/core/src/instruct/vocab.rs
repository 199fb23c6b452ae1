use std::collections::{BTreeSet, HashMap};

use super::prompt::{PromptSegment, PromptSequence, GRAPH_TOKEN, IMAGE_TOKEN};
use super::{InstructError, Result};
use crate::demo::{NO, YES};

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Reserved ids, fixed in every vocabulary.
pub const UNK: usize = 0;
pub const IMAGE: usize = 1;
pub const GRAPH: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = [UNK_TOKEN, IMAGE_TOKEN, GRAPH_TOKEN, EOS_TOKEN];

/// Word-level vocabulary: reserved tokens first, then words in byte order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Whitespace word splitting; the only tokenization in the crate.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

impl Vocab {
    /// Every word of every prompt and answer, plus `Yes`, `No` and `labels`.
    pub fn build<'a>(
        prompts: impl IntoIterator<Item = &'a PromptSequence>,
        labels: &[String],
    ) -> Self {
        let mut set: BTreeSet<String> = BTreeSet::new();
        let mut add = |t: &str| set.extend(words(t).map(str::to_string));
        for p in prompts {
            for s in &p.segments {
                if let PromptSegment::Text(t) = s {
                    add(t);
                }
            }
            add(&p.answer);
        }
        add(YES);
        add(NO);
        labels.iter().for_each(|l| add(l));
        Self::from_words(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
    }

    fn from_words(rest: impl Iterator<Item = String>) -> Self {
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(w)).collect()
    }

    /// Answer tokens followed by the end-of-answer token.
    pub fn encode_answer(&self, answer: &str) -> Vec<usize> {
        let mut ids = self.encode(answer);
        ids.push(EOS);
        ids
    }

    /// Words joined by single spaces; stops before the first `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line.
    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(InstructError::BadVocab(
                "reserved tokens missing or out of order".into(),
            ));
        }
        let rest = &lines[RESERVED.len()..];
        let mut seen = BTreeSet::new();
        for w in rest {
            if w.is_empty()
                || w.split_whitespace().count() != 1
                || !seen.insert(*w)
                || RESERVED.contains(w)
            {
                return Err(InstructError::BadVocab(format!(
                    "bad or repeated entry `{w}`"
                )));
            }
        }
        Ok(Self::from_words(rest.iter().map(|w| w.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::Task;

    fn vocab() -> Vocab {
        let p = PromptSequence {
            task: Task::Nc,
            segments: vec![
                PromptSegment::Text("is it a  cat".into()),
                PromptSegment::ImageSlot(vec![0]),
                PromptSegment::Text(". or <graph> ?".into()),
            ],
            answer: "small dog".into(),
        };
        Vocab::build([&p], &["big cat".to_string()])
    }

    #[test]
    fn reserved_tokens_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<image>"), IMAGE);
        assert_eq!(v.id("<graph>"), GRAPH);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.encode("<graph>"), vec![GRAPH]);
    }

    #[test]
    fn contains_labels_answers_and_yes_no() {
        let v = vocab();
        for w in ["Yes", "No", "big", "cat", "small", "dog", "."] {
            assert!(v.contains(w), "{w}");
        }
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn answers_end_with_eos_and_decode_stops_there() {
        let v = vocab();
        let ids = v.encode_answer("small   dog");
        assert_eq!(ids.len(), 3);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "small dog");
    }

    #[test]
    fn text_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
        let dup = format!("{}cat\n", v.to_text());
        assert!(Vocab::from_text(&dup).is_err());
    }
}
