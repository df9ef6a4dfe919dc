//! Topic-driven toy grammar used for desk-scale experiments.
//!
//! Each sentence picks one topic and draws every content word from that
//! topic's lexicon, so a sentence has strong long-range dependency while
//! per-token entropy stays small. The full lexicon is about 190 words.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CorpusSplits;

struct Topic {
    nouns: [&'static str; 6],
    verbs: [&'static str; 4],
    adjs: [&'static str; 4],
    places: [&'static str; 2],
}

const TOPICS: [Topic; 10] = [
    Topic {
        nouns: ["cat", "dog", "horse", "rabbit", "fox", "owl"],
        verbs: ["chases", "watches", "follows", "feeds"],
        adjs: ["furry", "wild", "tame", "sleepy"],
        places: ["farm", "barn"],
    },
    Topic {
        nouns: ["bread", "soup", "cheese", "apple", "cake", "rice"],
        verbs: ["cooks", "tastes", "bakes", "serves"],
        adjs: ["warm", "sweet", "salty", "fresh"],
        places: ["kitchen", "market"],
    },
    Topic {
        nouns: ["song", "guitar", "drum", "piano", "choir", "band"],
        verbs: ["plays", "hums", "tunes", "records"],
        adjs: ["loud", "soft", "catchy", "slow"],
        places: ["studio", "hall"],
    },
    Topic {
        nouns: ["ball", "team", "coach", "runner", "goal", "match"],
        verbs: ["kicks", "wins", "trains", "throws"],
        adjs: ["fast", "strong", "tired", "proud"],
        places: ["stadium", "field"],
    },
    Topic {
        nouns: ["rain", "storm", "cloud", "wind", "snow", "sun"],
        verbs: ["covers", "soaks", "hides", "warms"],
        adjs: ["cold", "grey", "heavy", "bright"],
        places: ["valley", "hill"],
    },
    Topic {
        nouns: ["teacher", "pupil", "book", "lesson", "pencil", "exam"],
        verbs: ["reads", "writes", "explains", "grades"],
        adjs: ["clever", "quiet", "long", "hard"],
        places: ["classroom", "library"],
    },
    Topic {
        nouns: ["bus", "street", "tower", "bridge", "taxi", "crowd"],
        verbs: ["crosses", "blocks", "passes", "fills"],
        adjs: ["busy", "tall", "noisy", "old"],
        places: ["downtown", "station"],
    },
    Topic {
        nouns: ["wave", "ship", "whale", "sailor", "shell", "reef"],
        verbs: ["sails", "dives", "carries", "splashes"],
        adjs: ["deep", "blue", "calm", "rough"],
        places: ["harbor", "beach"],
    },
    Topic {
        nouns: ["rose", "tree", "seed", "bee", "leaf", "tulip"],
        verbs: ["grows", "waters", "plants", "picks"],
        adjs: ["green", "tiny", "lovely", "tall"],
        places: ["garden", "greenhouse"],
    },
    Topic {
        nouns: ["rocket", "star", "planet", "comet", "moon", "pilot"],
        verbs: ["orbits", "launches", "lands", "circles"],
        adjs: ["distant", "silver", "huge", "dark"],
        places: ["sky", "orbit"],
    },
];

const DETS: [&str; 4] = ["the", "a", "this", "every"];
const ADVS: [&str; 4] = ["very", "quite", "rather", "so"];
const PREPS: [&str; 3] = ["in", "near", "behind"];
const LINKS: [&str; 2] = ["and", "while"];
const COPULAS: [&str; 2] = ["is", "seems"];
const ENDS: [&str; 2] = [".", "!"];

/// Generator for the toy grammar.
pub struct SyntheticGrammar {
    rng: ChaCha8Rng,
}

impl SyntheticGrammar {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick<'a>(&mut self, words: &[&'a str]) -> &'a str {
        words.choose(&mut self.rng).expect("non-empty word list")
    }

    fn noun_phrase(&mut self, t: &Topic, out: &mut Vec<String>, adj_prob: f64) {
        out.push(self.pick(&DETS).into());
        if self.rng.random_bool(adj_prob) {
            out.push(self.pick(&t.adjs).into());
        }
        out.push(self.pick(&t.nouns).into());
    }

    pub fn sentence(&mut self) -> Vec<String> {
        let t = &TOPICS[self.rng.random_range(0..TOPICS.len())];
        let mut out = Vec::new();
        match self.rng.random_range(0..4) {
            0 => {
                self.noun_phrase(t, &mut out, 0.5);
                out.push(self.pick(&t.verbs).into());
                self.noun_phrase(t, &mut out, 0.5);
            }
            1 => {
                self.noun_phrase(t, &mut out, 0.3);
                out.push(self.pick(&t.verbs).into());
                self.noun_phrase(t, &mut out, 0.3);
                out.push(self.pick(&PREPS).into());
                out.push("the".into());
                out.push(self.pick(&t.places).into());
            }
            2 => {
                self.noun_phrase(t, &mut out, 0.0);
                out.push(self.pick(&COPULAS).into());
                if self.rng.random_bool(0.5) {
                    out.push(self.pick(&ADVS).into());
                }
                out.push(self.pick(&t.adjs).into());
            }
            _ => {
                self.noun_phrase(t, &mut out, 0.2);
                out.push(self.pick(&t.verbs).into());
                self.noun_phrase(t, &mut out, 0.0);
                out.push(self.pick(&LINKS).into());
                self.noun_phrase(t, &mut out, 0.2);
                out.push(self.pick(&t.verbs).into());
                self.noun_phrase(t, &mut out, 0.0);
            }
        }
        out.push(self.pick(&ENDS).into());
        out
    }

    pub fn sentences(&mut self, n: usize) -> Vec<Vec<String>> {
        (0..n).map(|_| self.sentence()).collect()
    }

    /// Train/valid/test splits drawn from one stream.
    pub fn splits(&mut self, train: usize, valid: usize, test: usize) -> CorpusSplits {
        CorpusSplits {
            train: self.sentences(train),
            valid: self.sentences(valid),
            test: self.sentences(test),
        }
    }
}

/// Every word the grammar can emit.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&str> = Vec::new();
    for t in &TOPICS {
        words.extend(t.nouns);
        words.extend(t.verbs);
        words.extend(t.adjs);
        words.extend(t.places);
    }
    for group in [&DETS[..], &ADVS, &PREPS, &LINKS, &COPULAS, &ENDS] {
        words.extend(group);
    }
    words.sort();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_about_two_hundred_words() {
        let n = lexicon().len();
        assert!((150..=200).contains(&n), "{n}");
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(SyntheticGrammar::new(3).sentences(50), SyntheticGrammar::new(3).sentences(50));
    }

    #[test]
    fn sentences_use_only_lexicon_words() {
        let lex = lexicon();
        for s in SyntheticGrammar::new(1).sentences(200) {
            assert!((4..=16).contains(&s.len()), "{s:?}");
            for w in s {
                assert!(lex.contains(&w.as_str()), "{w}");
            }
        }
    }
}
