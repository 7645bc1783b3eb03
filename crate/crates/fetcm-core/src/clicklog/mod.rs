//! Click-log data model: session records, vocabulary construction, dataset
//! splitting, batching, and a position-based synthetic generator.

mod batch;
mod io;
mod synth;

pub use batch::batch_iter;
pub use io::{parse_canonical, parse_yandex, read_truth_csv, write_canonical, write_truth_csv};
pub use synth::{synthesize_pbm, GroundTruth};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Results per page; SERP-style logs list ten.
pub const P_MAX_DEFAULT: usize = 10;

/// Dense index reserved for padding.
pub const PAD_INDEX: usize = 0;
/// Dense index reserved for ids unseen at vocabulary-build time.
pub const UNK_INDEX: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentImpression {
    pub url_id: u64,
    pub pos: u32,
    pub click: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: u64,
    pub docs: Vec<DocumentImpression>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub session_id: u64,
    pub queries: Vec<QueryRecord>,
}

impl Session {
    /// Enforce the structural invariants: at least one query, documents
    /// sorted by position with positions forming exactly 1..k, binary
    /// clicks, and no ranked list longer than `p_max`.
    pub fn validate(&self, p_max: usize) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::Validation(format!(
                "session {} has no queries",
                self.session_id
            )));
        }
        for q in &self.queries {
            if q.docs.is_empty() {
                return Err(Error::Validation(format!(
                    "query {} in session {} has no docs",
                    q.query_id, self.session_id
                )));
            }
            if q.docs.len() > p_max {
                return Err(Error::Validation(format!(
                    "query {} in session {} lists {} docs, limit is {}",
                    q.query_id,
                    self.session_id,
                    q.docs.len(),
                    p_max
                )));
            }
            for (j, doc) in q.docs.iter().enumerate() {
                if doc.pos as usize != j + 1 {
                    return Err(Error::Validation(format!(
                        "query {} in session {}: pos {} at list index {} (positions must be distinct and form 1..{})",
                        q.query_id,
                        self.session_id,
                        doc.pos,
                        j,
                        q.docs.len()
                    )));
                }
                if doc.click > 1 {
                    return Err(Error::Validation(format!(
                        "query {} in session {}: click {} is not 0 or 1",
                        q.query_id, self.session_id, doc.click
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Raw-id to dense-index mapping with reserved padding and unknown slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    queries: BTreeMap<u64, usize>,
    urls: BTreeMap<u64, usize>,
}

impl Vocabulary {
    /// Count id frequencies over `sessions` and retain ids seen at least
    /// `min_freq` times. Dense indices start at 2 in ascending raw-id order.
    pub fn build(sessions: &[Session], min_freq: usize) -> Vocabulary {
        let mut qfreq: BTreeMap<u64, usize> = BTreeMap::new();
        let mut ufreq: BTreeMap<u64, usize> = BTreeMap::new();
        for s in sessions {
            for q in &s.queries {
                *qfreq.entry(q.query_id).or_insert(0) += 1;
                for d in &q.docs {
                    *ufreq.entry(d.url_id).or_insert(0) += 1;
                }
            }
        }
        let assign = |freq: BTreeMap<u64, usize>| {
            freq.into_iter()
                .filter(|&(_, n)| n >= min_freq)
                .enumerate()
                .map(|(i, (id, _))| (id, i + 2))
                .collect()
        };
        Vocabulary {
            queries: assign(qfreq),
            urls: assign(ufreq),
        }
    }

    pub fn query_index(&self, raw: u64) -> usize {
        self.queries.get(&raw).copied().unwrap_or(UNK_INDEX)
    }

    pub fn url_index(&self, raw: u64) -> usize {
        self.urls.get(&raw).copied().unwrap_or(UNK_INDEX)
    }

    /// Embedding-table row count for queries (retained ids plus pad and unknown).
    pub fn query_count(&self) -> usize {
        self.queries.len() + 2
    }

    pub fn url_count(&self) -> usize {
        self.urls.len() + 2
    }
}

/// A document impression after vocabulary lookup. `pos` stays 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDoc {
    pub url: usize,
    pub pos: usize,
    pub click: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQuery {
    pub query: usize,
    pub docs: Vec<EncodedDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSession {
    pub queries: Vec<EncodedQuery>,
}

impl EncodedSession {
    pub fn doc_count(&self) -> usize {
        self.queries.iter().map(|q| q.docs.len()).sum()
    }
}

pub fn encode_sessions(sessions: &[Session], vocab: &Vocabulary) -> Vec<EncodedSession> {
    sessions
        .iter()
        .map(|s| EncodedSession {
            queries: s
                .queries
                .iter()
                .map(|q| EncodedQuery {
                    query: vocab.query_index(q.query_id),
                    docs: q
                        .docs
                        .iter()
                        .map(|d| EncodedDoc {
                            url: vocab.url_index(d.url_id),
                            pos: d.pos as usize,
                            click: d.click,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect()
}

/// Session-level train/valid/test split: seeded shuffle, then sizes
/// floor(n*ratio) with the remainder going to train.
pub fn split<T>(items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({}, {}, {}) must be non-negative and sum to 1",
            a, b, c
        )));
    }
    let n = items.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "cannot split {} sessions three ways",
            n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "split");
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let n_valid = (n as f64 * b).floor() as usize;
    let n_test = (n as f64 * c).floor() as usize;
    let n_train = n - n_valid - n_test;

    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<T> {
        ids.iter().map(|&i| slots[i].take().expect("each index taken once")).collect()
    };
    let train = take(&order[..n_train]);
    let valid = take(&order[n_train..n_train + n_valid]);
    let test = take(&order[n_train + n_valid..]);
    Ok((train, valid, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(url_id: u64, pos: u32, click: u8) -> DocumentImpression {
        DocumentImpression { url_id, pos, click }
    }

    fn one_query_session(session_id: u64, query_id: u64, clicks: &[u8]) -> Session {
        Session {
            session_id,
            queries: vec![QueryRecord {
                query_id,
                docs: clicks
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| doc(100 + i as u64, i as u32 + 1, c))
                    .collect(),
            }],
        }
    }

    #[test]
    fn validation_catches_broken_positions_and_clicks() {
        let mut s = one_query_session(1, 7, &[0, 1]);
        assert!(s.validate(10).is_ok());

        s.queries[0].docs[1].pos = 1; // duplicate
        let err = s.validate(10).unwrap_err().to_string();
        assert!(err.contains("pos"), "{}", err);

        let mut s = one_query_session(1, 7, &[0]);
        s.queries[0].docs[0].pos = 0;
        let err = s.validate(10).unwrap_err().to_string();
        assert!(err.contains("pos"), "{}", err);

        let mut s = one_query_session(1, 7, &[0]);
        s.queries[0].docs[0].click = 2;
        assert!(s.validate(10).is_err());

        let s = Session { session_id: 3, queries: vec![] };
        assert!(s.validate(10).is_err());

        let s = one_query_session(1, 7, &[0; 11]);
        assert!(s.validate(10).is_err());
    }

    #[test]
    fn vocabulary_assigns_dense_indices_from_two() {
        let sessions = vec![one_query_session(1, 7, &[0, 1])];
        let v = Vocabulary::build(&sessions, 1);
        assert_eq!(v.query_index(7), 2);
        assert_eq!(v.url_index(100), 2);
        assert_eq!(v.url_index(101), 3);
        assert_eq!(v.query_count(), 3);
        assert_eq!(v.url_count(), 4);
        // unseen ids map to the unknown slot
        assert_eq!(v.query_index(999), UNK_INDEX);
    }

    #[test]
    fn vocabulary_respects_min_freq() {
        let sessions = vec![one_query_session(1, 7, &[0])];
        let v = Vocabulary::build(&sessions, 2);
        assert_eq!(v.query_index(7), UNK_INDEX);
        assert_eq!(v.query_count(), 2);
    }

    #[test]
    fn split_sizes_follow_the_floor_rule() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, va, te) = split(items, (0.8, 0.1, 0.1), 11).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));

        let items: Vec<u32> = (0..23).collect();
        let (tr, va, te) = split(items, (0.8, 0.1, 0.1), 11).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (19, 2, 2));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let items: Vec<u32> = (0..23).collect();
        let (tr, va, te) = split(items.clone(), (0.8, 0.1, 0.1), 5).unwrap();
        let mut all: Vec<u32> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);

        let again = split(items.clone(), (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr, va, te), again);

        let other = split(items, (0.8, 0.1, 0.1), 6).unwrap();
        assert_ne!(again, other);
    }

    #[test]
    fn split_rejects_tiny_or_inconsistent_input() {
        assert!(split(vec![1, 2], (0.8, 0.1, 0.1), 0).is_err());
        assert!(split(vec![1, 2, 3, 4], (0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn encoding_applies_the_vocabulary() {
        let train = vec![one_query_session(1, 7, &[0, 1])];
        let vocab = Vocabulary::build(&train, 1);
        let test = vec![one_query_session(2, 8, &[1])];
        let enc = encode_sessions(&test, &vocab);
        assert_eq!(enc[0].queries[0].query, UNK_INDEX);
        assert_eq!(enc[0].queries[0].docs[0].pos, 1);
        assert_eq!(enc[0].queries[0].docs[0].click, 1);
        assert_eq!(enc[0].doc_count(), 1);
    }
}
