//! Generated benchmark: documents about pseudo-word entities.
//!
//! Every entity document repeats the entity name across templated
//! sentences, so same-document sentences share a long substring while
//! filler words are shared by all documents. Held-out sentences become the
//! retrieval task (query and documents share an entity), the zero-shot task
//! (labels are entity names) and the LM evaluation set.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Document, DocumentRecord};
use crate::error::{GurError, Result};
use crate::eval::{save_zero_shot, LabelSet, LabeledSample, Qrels, RetrievalTask, TextRecord};

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

const TEMPLATES: &[&str] = &[
    "{e} sells fresh fish.",
    "we met {e} at noon.",
    "{e} lives by the sea.",
    "i saw {e} last week.",
    "{e} has a red car.",
    "ask {e} about it.",
    "{e} won the big game.",
    "the story of {e}.",
    "{e} plays the drum.",
    "they call {e} often.",
    "{e} grows green tea.",
    "a gift from {e}.",
    "{e} is very tall.",
    "few people know {e}.",
    "{e} paints old boats.",
    "look for {e} there.",
    "{e} reads every day.",
    "{e} sings at night.",
    "send it to {e} now.",
    "{e} builds toys.",
    "my friend {e} agreed.",
    "{e} keeps two cats.",
    "we waited for {e}.",
    "{e} likes cold milk.",
];

const LONG_TEMPLATES: &[&str] = &[
    "everyone in the small town of {p} remembers how {e} fixed the old bridge.",
    "when the winter came to {p} again, {e} opened the doors of the school.",
    "the people of {p} still tell stories about {e} and the long journey home.",
];

const NOISE: &[&str] = &[
    "the weather is cold.",
    "it rained all day.",
    "prices went up again.",
    "the road was closed.",
    "lunch is at one.",
    "the shop opens late.",
    "the train was full.",
    "nobody came back.",
    "the lights went out.",
    "it was a quiet week.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train_entities: usize,
    pub sentences_per_doc: usize,
    pub noise_per_doc: usize,
    pub long_per_doc: usize,
    /// Entities used for evaluation.
    pub eval_entities: usize,
    /// When true, evaluation entities never occur in the training corpus.
    pub unseen_eval_entities: bool,
    pub docs_per_query: usize,
    pub zero_shot_samples_per_label: usize,
    pub lm_eval_sentences: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_entities: 1000,
            sentences_per_doc: 6,
            noise_per_doc: 1,
            long_per_doc: 0,
            eval_entities: 50,
            unseen_eval_entities: false,
            docs_per_query: 4,
            zero_shot_samples_per_label: 4,
            lm_eval_sentences: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train_docs: Vec<Document>,
    pub retrieval: RetrievalTask,
    pub zero_shot_samples: Vec<LabeledSample>,
    pub labels: LabelSet,
    pub lm_eval: Vec<String>,
}

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty"));
        w.push(*VOWELS.choose(rng).expect("non-empty"));
    }
    w
}

struct Entity {
    name: String,
    place: String,
}

fn entity_sentence<R: Rng>(e: &Entity, rng: &mut R) -> String {
    TEMPLATES.choose(rng).expect("non-empty").replace("{e}", &e.name)
}

fn long_sentence<R: Rng>(e: &Entity, rng: &mut R) -> String {
    LONG_TEMPLATES
        .choose(rng)
        .expect("non-empty")
        .replace("{e}", &e.name)
        .replace("{p}", &e.place)
}

impl SyntheticSpec {
    /// A few dozen documents; quick enough for unit tests.
    pub fn small() -> Self {
        SyntheticSpec {
            train_entities: 40,
            sentences_per_doc: 4,
            noise_per_doc: 1,
            long_per_doc: 2,
            eval_entities: 10,
            unseen_eval_entities: false,
            docs_per_query: 3,
            zero_shot_samples_per_label: 2,
            lm_eval_sentences: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_entities == 0 || self.sentences_per_doc < 2 {
            return Err(GurError::Config("need entities with at least two sentences".into()));
        }
        if self.eval_entities < 2 || self.docs_per_query == 0 {
            return Err(GurError::Config(
                "need at least two eval entities with documents".into(),
            ));
        }
        if 1 + self.docs_per_query + self.zero_shot_samples_per_label > TEMPLATES.len() {
            return Err(GurError::Config(format!(
                "at most {} held-out sentences per eval entity",
                TEMPLATES.len()
            )));
        }
        if !self.unseen_eval_entities && self.eval_entities > self.train_entities {
            return Err(GurError::Config("eval_entities exceeds train_entities".into()));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> SyntheticBenchmark {
        self.try_generate(seed).expect("valid synthetic spec")
    }

    pub fn try_generate(&self, seed: u64) -> Result<SyntheticBenchmark> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = self.train_entities
            + if self.unseen_eval_entities {
                self.eval_entities
            } else {
                0
            };
        let mut names = BTreeSet::new();
        let mut entities = Vec::with_capacity(total);
        while entities.len() < total {
            let name = format!("{} {}", pseudo_word(&mut rng, 3), pseudo_word(&mut rng, 3));
            if names.insert(name.clone()) {
                entities.push(Entity {
                    name,
                    place: pseudo_word(&mut rng, 3),
                });
            }
        }

        let mut train_docs = Vec::with_capacity(self.train_entities);
        for (i, e) in entities[..self.train_entities].iter().enumerate() {
            let mut sentences: Vec<String> = (0..self.sentences_per_doc)
                .map(|_| entity_sentence(e, &mut rng))
                .collect();
            sentences.extend((0..self.long_per_doc).map(|_| long_sentence(e, &mut rng)));
            sentences.extend((0..self.noise_per_doc).map(|_| NOISE.choose(&mut rng).expect("non-empty").to_string()));
            sentences.shuffle(&mut rng);
            let doc = Document::from_text(format!("doc{i:05}"), Some(e.name.clone()), &sentences.join(" "))
                .expect("non-empty document");
            train_docs.push(doc);
        }

        let eval: Vec<&Entity> = if self.unseen_eval_entities {
            entities[self.train_entities..].iter().collect()
        } else {
            entities[..self.train_entities]
                .choose_multiple(&mut rng, self.eval_entities)
                .collect()
        };

        let mut queries = Vec::new();
        let mut corpus = Vec::new();
        let mut qrels = Qrels::new();
        let mut labels = Vec::new();
        let mut samples = Vec::new();
        for (i, e) in eval.iter().enumerate() {
            let qid = format!("q{i:03}");
            // Distinct templates per entity so a query never equals a document.
            let mut picks: Vec<&str> = TEMPLATES.to_vec();
            picks.shuffle(&mut rng);
            let mut picks = picks.into_iter().map(|t| t.replace("{e}", &e.name));
            queries.push((qid.clone(), picks.next().expect("enough templates")));
            let rel = qrels.entry(qid).or_default();
            for j in 0..self.docs_per_query {
                let did = format!("e{i:03}d{j}");
                corpus.push((did.clone(), picks.next().expect("enough templates")));
                rel.insert(did);
            }
            let label = format!("L{i:03}");
            for j in 0..self.zero_shot_samples_per_label {
                samples.push(LabeledSample {
                    id: format!("{label}s{j}"),
                    text: picks.next().expect("enough templates"),
                    label: label.clone(),
                });
            }
            labels.push((label, e.name.clone()));
        }
        corpus.sort();

        let mut lm_eval = Vec::with_capacity(self.lm_eval_sentences);
        for _ in 0..self.lm_eval_sentences {
            let e = eval.choose(&mut rng).expect("eval entities");
            lm_eval.push(entity_sentence(e, &mut rng));
        }

        Ok(SyntheticBenchmark {
            train_docs,
            retrieval: RetrievalTask::new(queries, corpus, qrels)?,
            zero_shot_samples: samples,
            labels: LabelSet::new(labels)?,
            lm_eval,
        })
    }
}

impl SyntheticBenchmark {
    pub fn train_records(&self) -> Vec<DocumentRecord> {
        self.train_docs
            .iter()
            .map(|d| DocumentRecord {
                id: d.id.clone(),
                title: d.title.clone(),
                text: d.sentences.join(" "),
            })
            .collect()
    }

    /// Writes `corpus.jsonl`, `retrieval/`, `zeroshot/` and `lm_eval.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GurError::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.train_records())?;
        self.retrieval.save(&dir.join("retrieval"))?;
        save_zero_shot(&dir.join("zeroshot"), &self.zero_shot_samples, &self.labels)?;
        let lm: Vec<TextRecord> = self
            .lm_eval
            .iter()
            .enumerate()
            .map(|(i, t)| TextRecord {
                id: format!("lm{i:04}"),
                text: t.clone(),
            })
            .collect();
        write_jsonl(&dir.join("lm_eval.jsonl"), &lm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcs::longest_common_substring;

    #[test]
    fn same_seed_same_benchmark() {
        let a = SyntheticSpec::small().generate(1);
        let b = SyntheticSpec::small().generate(1);
        assert_eq!(a.train_docs, b.train_docs);
        assert_eq!(a.retrieval, b.retrieval);
        assert_ne!(a.train_docs, SyntheticSpec::small().generate(2).train_docs);
    }

    #[test]
    fn templates_fit_short_bucket() {
        for t in TEMPLATES {
            assert!(t.len() - 3 + 13 <= 31, "{t}");
        }
        for t in LONG_TEMPLATES {
            assert!(t.len() - 6 + 19 >= 64, "{t}");
        }
    }

    #[test]
    fn same_doc_sentences_share_the_entity() {
        let bench = SyntheticSpec::small().generate(4);
        let doc = &bench.train_docs[0];
        let name = doc.title.clone().unwrap();
        let with: Vec<&String> = doc.sentences.iter().filter(|s| s.contains(&name)).collect();
        assert!(with.len() >= 2);
        let l = longest_common_substring(with[0], with[1]);
        assert!(l.weight >= 12);
    }

    #[test]
    fn unseen_entities_are_disjoint() {
        let spec = SyntheticSpec {
            unseen_eval_entities: true,
            ..SyntheticSpec::small()
        };
        let bench = spec.generate(5);
        let train: BTreeSet<String> = bench.train_docs.iter().filter_map(|d| d.title.clone()).collect();
        for (_, name) in bench.labels.labels() {
            assert!(!train.contains(name));
        }
    }

    #[test]
    fn save_writes_task_files() {
        let dir = tempfile::tempdir().unwrap();
        let bench = SyntheticSpec::small().generate(6);
        bench.save(dir.path()).unwrap();
        let task = RetrievalTask::load(&dir.path().join("retrieval")).unwrap();
        assert_eq!(task, bench.retrieval);
        let (samples, labels) = crate::eval::load_zero_shot(&dir.path().join("zeroshot")).unwrap();
        assert_eq!(samples, bench.zero_shot_samples);
        assert_eq!(labels, bench.labels);
    }
}
