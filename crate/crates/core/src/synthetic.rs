//! Seeded synthetic domains and tasks for desk-scale experiments.
//!
//! A [`Domain`] is a made-up language with a small deterministic grammar:
//! subject clusters select verbs, each verb selects one of two objects, and
//! every adjective belongs to a polarity group and is paired with a cue word
//! shared by exactly one other adjective. Sentences in the pre-training corpus
//! carry the cue; classification texts do not. Two domains built from
//! disjoint consonant sets share no words.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::Corpus;
use crate::mlm::stream_rng;
use crate::tasks::{DatasetSpec, DatasetSplit, ExpectedCounts, Label, LabeledExample};

const CLUSTERS: usize = 4;
const SUBJECTS_PER_CLUSTER: usize = 4;
const VERBS_PER_CLUSTER: usize = 3;
const OBJECTS_PER_VERB: usize = 2;
/// Cue words per polarity group; each cue pairs two adjectives.
const CUES_PER_GROUP: usize = 4;

const STREAM_CORPUS: u64 = 10 << 32;
const STREAM_TASK: u64 = 11 << 32;
const STREAM_KEYWORDS: u64 = 12 << 32;

/// Enumerates distinct CVCV(C) words over the given letters.
struct WordMaker {
    consonants: Vec<char>,
    vowels: Vec<char>,
    next: usize,
}

impl WordMaker {
    fn new(consonants: &str, vowels: &str) -> Self {
        WordMaker {
            consonants: consonants.chars().collect(),
            vowels: vowels.chars().collect(),
            next: 0,
        }
    }

    fn word(&mut self) -> String {
        let (c, v) = (self.consonants.len(), self.vowels.len());
        let mut i = self.next;
        self.next += 1;
        let mut w = String::new();
        for k in 0..5 {
            let alphabet = if k % 2 == 0 { &self.consonants } else { &self.vowels };
            let n = if k % 2 == 0 { c } else { v };
            w.push(alphabet[i % n]);
            i /= n;
        }
        w
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    /// `subjects[cluster]`
    pub subjects: Vec<Vec<String>>,
    /// `verbs[cluster]`
    pub verbs: Vec<Vec<String>>,
    /// `objects[cluster][verb]`
    pub objects: Vec<Vec<Vec<String>>>,
    /// `(adjective, cue)` pairs per group; adjectives `2k` and `2k + 1` share a cue.
    pub positive: Vec<(String, String)>,
    pub negative: Vec<(String, String)>,
}

impl Domain {
    pub fn new(name: &str, consonants: &str, vowels: &str) -> Self {
        let mut wm = WordMaker::new(consonants, vowels);
        let subjects = (0..CLUSTERS).map(|_| wm.words(SUBJECTS_PER_CLUSTER)).collect();
        let verbs = (0..CLUSTERS).map(|_| wm.words(VERBS_PER_CLUSTER)).collect();
        let objects = (0..CLUSTERS)
            .map(|_| (0..VERBS_PER_CLUSTER).map(|_| wm.words(OBJECTS_PER_VERB)).collect())
            .collect();
        let group = |wm: &mut WordMaker| -> Vec<(String, String)> {
            let cues = wm.words(CUES_PER_GROUP);
            let adjectives = wm.words(2 * CUES_PER_GROUP);
            adjectives.into_iter().enumerate().map(|(i, a)| (a, cues[i / 2].clone())).collect()
        };
        let positive = group(&mut wm);
        let negative = group(&mut wm);
        Domain {
            name: name.to_string(),
            subjects,
            verbs,
            objects,
            positive,
            negative,
        }
    }

    pub fn a() -> Self {
        Domain::new("domain-a", "bdgkpt", "aeiou")
    }

    pub fn b() -> Self {
        Domain::new("domain-b", "mnrsvz", "aeiou")
    }

    pub fn words(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.subjects.iter().flatten().map(String::as_str));
        out.extend(self.verbs.iter().flatten().map(String::as_str));
        out.extend(self.objects.iter().flatten().flatten().map(String::as_str));
        for (a, c) in self.positive.iter().chain(&self.negative) {
            out.push(a);
            if !out.contains(&c.as_str()) {
                out.push(c);
            }
        }
        out
    }

    fn clause<R: Rng>(&self, rng: &mut R) -> [&str; 3] {
        let cluster = rng.random_range(0..CLUSTERS);
        let subject = self.subjects[cluster].choose(rng).unwrap();
        let v = rng.random_range(0..VERBS_PER_CLUSTER);
        let object = self.objects[cluster][v].choose(rng).unwrap();
        [subject, &self.verbs[cluster][v], object]
    }

    /// `subject verb object adjective cue`
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> String {
        let [s, v, o] = self.clause(rng);
        let group = if rng.random_bool(0.5) { &self.positive } else { &self.negative };
        let (adj, cue) = group.choose(rng).unwrap();
        format!("{s} {v} {o} {adj} {cue}")
    }

    pub fn sentences(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = stream_rng(seed, STREAM_CORPUS);
        (0..n).map(|_| self.sentence(&mut rng)).collect()
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Corpus {
        Corpus::from_texts(&self.name, self.sentences(n, seed))
    }

    /// Polarity task over cue-free `subject verb object adjective` texts.
    /// Training texts use the even adjective of every cue pair and test texts
    /// the odd one, so the test set needs knowledge of the pairing.
    pub fn polarity_task(&self, n_train: usize, n_test: usize, seed: u64) -> DatasetSplit {
        let mut rng = stream_rng(seed, STREAM_TASK);
        let mut make = |n: usize, parity: usize, prefix: &str| -> Vec<LabeledExample> {
            (0..n)
                .map(|i| {
                    let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
                    let group = if label == Label::Positive { &self.positive } else { &self.negative };
                    let pair = rng.random_range(0..CUES_PER_GROUP);
                    let adj = &group[2 * pair + parity].0;
                    let [s, v, o] = self.clause(&mut rng);
                    LabeledExample {
                        id: format!("{prefix}{i}"),
                        text: format!("{s} {v} {o} {adj}"),
                        label,
                    }
                })
                .collect()
        };
        let train = make(n_train, 0, "tr");
        let test = make(n_test, 1, "te");
        split_from(&format!("{}-polarity", self.name), train, test)
    }
}

/// Positive and negative texts drawn from disjoint keyword sets mixed with
/// shared filler words. Linearly separable by construction.
pub fn keyword_task(name: &str, n_train: usize, n_test: usize, seed: u64) -> DatasetSplit {
    let mut wm = WordMaker::new("fhjlw", "aeiouy");
    let positive = wm.words(6);
    let negative = wm.words(6);
    let filler = wm.words(12);
    let mut rng = stream_rng(seed, STREAM_KEYWORDS);
    let mut make = |n: usize, prefix: &str| -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let label = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
                let keys = if label == Label::Positive { &positive } else { &negative };
                let mut words: Vec<&str> = (0..4).map(|_| filler.choose(&mut rng).unwrap().as_str()).collect();
                let at = rng.random_range(0..=words.len());
                words.insert(at, keys.choose(&mut rng).unwrap());
                LabeledExample {
                    id: format!("{prefix}{i}"),
                    text: words.join(" "),
                    label,
                }
            })
            .collect()
    };
    let train = make(n_train, "tr");
    let test = make(n_test, "te");
    split_from(name, train, test)
}

fn count_positive(x: &[LabeledExample]) -> usize {
    x.iter().filter(|e| e.label == Label::Positive).count()
}

fn split_from(name: &str, train: Vec<LabeledExample>, test: Vec<LabeledExample>) -> DatasetSplit {
    let spec = DatasetSpec {
        name: name.to_string(),
        train: "<generated>".into(),
        test: "<generated>".into(),
        delimiter: '\t',
        id_column: "id".into(),
        text_column: "text".into(),
        label_column: "label".into(),
        positive: vec!["1".into()],
        negative: vec!["0".into()],
        expected: Some(ExpectedCounts {
            train: train.len(),
            test: test.len(),
            train_positive: count_positive(&train),
            test_positive: count_positive(&test),
        }),
    };
    DatasetSplit { train, test, spec }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn domains_share_no_words() {
        let a: HashSet<String> = Domain::a().words().iter().map(|w| w.to_string()).collect();
        let b: HashSet<String> = Domain::b().words().iter().map(|w| w.to_string()).collect();
        assert_eq!(a.len(), 4 * 4 + 4 * 3 + 4 * 3 * 2 + 2 * (4 + 8));
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn sentences_follow_the_grammar() {
        let d = Domain::a();
        for s in d.sentences(200, 1) {
            let w: Vec<&str> = s.split(' ').collect();
            assert_eq!(w.len(), 5);
            let cluster = d.subjects.iter().position(|c| c.iter().any(|x| x == w[0])).unwrap();
            let v = d.verbs[cluster].iter().position(|x| x == w[1]).unwrap();
            assert!(d.objects[cluster][v].iter().any(|x| x == w[2]));
            let pair = d.positive.iter().chain(&d.negative).find(|(a, _)| a == w[3]).unwrap();
            assert_eq!(pair.1, w[4]);
        }
        assert_eq!(d.sentences(50, 7), d.sentences(50, 7));
        assert_ne!(d.sentences(50, 7), d.sentences(50, 8));
    }

    #[test]
    fn polarity_task_holds_out_adjectives() {
        let d = Domain::a();
        let split = d.polarity_task(100, 40, 3);
        let adj = |e: &LabeledExample| e.text.split(' ').nth(3).unwrap().to_string();
        let train: HashSet<String> = split.train.iter().map(adj).collect();
        let test: HashSet<String> = split.test.iter().map(adj).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(split.spec.expected.unwrap().train_positive, 50);
        assert!(crate::tasks::validate(&split).passed());
    }

    #[test]
    fn keyword_task_is_deterministic() {
        assert_eq!(keyword_task("k", 20, 5, 1), keyword_task("k", 20, 5, 1));
        let s = keyword_task("k", 20, 5, 1);
        assert!(s.train.iter().all(|e| e.text.split(' ').count() == 5));
    }
}
