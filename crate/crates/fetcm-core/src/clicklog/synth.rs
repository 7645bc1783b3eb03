//! Synthetic click generator with position-based ground truth: a click on
//! (query, url) at rank r is Bernoulli(alpha(q,u) * gamma(r)). The truth is
//! returned alongside the sessions so evaluation can report the best
//! achievable perplexity.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::stream_rng;

use super::{DocumentImpression, QueryRecord, Session};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Attraction probability per materialized (query_id, url_id) pair.
    pub alpha: BTreeMap<(u64, u64), f64>,
    /// Examination probability per rank, index 0 = rank 1.
    pub gamma: Vec<f64>,
}

impl GroundTruth {
    /// Probabilities must be valid; the closed ends are allowed so degenerate
    /// all-click / no-click corpora can be generated for tests.
    pub fn validate(&self) -> Result<()> {
        for (&(q, u), &a) in &self.alpha {
            if !(0.0..=1.0).contains(&a) || !a.is_finite() {
                return Err(Error::Validation(format!(
                    "alpha({}, {}) = {} is outside [0, 1]",
                    q, u, a
                )));
            }
        }
        for (i, &g) in self.gamma.iter().enumerate() {
            if !(0.0..=1.0).contains(&g) || !g.is_finite() {
                return Err(Error::Validation(format!(
                    "gamma at rank {} = {} is outside [0, 1]",
                    i + 1,
                    g
                )));
            }
        }
        Ok(())
    }

    /// Draw a fresh truth: each of `n_queries` query ids gets a candidate
    /// pool of `pool_size` distinct url ids from `0..n_urls`, and every
    /// materialized pair an alpha uniform in `[alpha_lo, alpha_hi]`.
    pub fn sample(
        n_queries: u64,
        n_urls: u64,
        pool_size: usize,
        alpha_lo: f64,
        alpha_hi: f64,
        gamma: Vec<f64>,
        seed: u64,
    ) -> Result<GroundTruth> {
        if pool_size as u64 > n_urls {
            return Err(Error::Config(format!(
                "candidate pool of {} needs at least that many url ids, have {}",
                pool_size, n_urls
            )));
        }
        if n_urls > usize::MAX as u64 {
            return Err(Error::Config("url id space too large".into()));
        }
        if !(alpha_lo <= alpha_hi && (0.0..=1.0).contains(&alpha_lo) && (0.0..=1.0).contains(&alpha_hi)) {
            return Err(Error::Config(format!(
                "alpha range [{}, {}] is not an ordered subrange of [0, 1]",
                alpha_lo, alpha_hi
            )));
        }
        let mut rng = stream_rng(seed, "truth");
        let mut alpha = BTreeMap::new();
        for q in 0..n_queries {
            let pool = rand::seq::index::sample(&mut rng, n_urls as usize, pool_size);
            for u in pool {
                let a = if alpha_lo == alpha_hi {
                    alpha_lo
                } else {
                    rng.random_range(alpha_lo..alpha_hi)
                };
                alpha.insert((q, u as u64), a);
            }
        }
        let truth = GroundTruth { alpha, gamma };
        truth.validate()?;
        Ok(truth)
    }

    /// Candidate urls of one query, ascending.
    pub fn pool(&self, q: u64) -> Vec<u64> {
        self.alpha
            .range((q, 0)..=(q, u64::MAX))
            .map(|(&(_, u), _)| u)
            .collect()
    }

    /// Distinct query ids, ascending.
    pub fn query_ids(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &(q, _) in self.alpha.keys() {
            if out.last() != Some(&q) {
                out.push(q);
            }
        }
        out
    }
}

/// Generate `n_sessions` sessions. Each query picks a ground-truth query id
/// uniformly and shows `docs_per_query` of its candidates in random order,
/// so repeated impressions of a pair make its alpha estimable from clicks.
pub fn synthesize_pbm(
    truth: &GroundTruth,
    n_sessions: usize,
    queries_per_session: usize,
    docs_per_query: usize,
    seed: u64,
) -> Result<Vec<Session>> {
    truth.validate()?;
    if queries_per_session == 0 || docs_per_query == 0 {
        return Err(Error::Generation(
            "need at least one query per session and one doc per query".into(),
        ));
    }
    if truth.gamma.len() < docs_per_query {
        return Err(Error::Generation(format!(
            "gamma covers {} ranks but queries show {} docs",
            truth.gamma.len(),
            docs_per_query
        )));
    }
    let query_ids = truth.query_ids();
    if n_sessions > 0 && query_ids.is_empty() {
        return Err(Error::Generation("ground truth has no alpha entries".into()));
    }

    let mut rng = stream_rng(seed, "synth");
    let mut sessions = Vec::with_capacity(n_sessions);
    for sid in 0..n_sessions {
        let mut queries = Vec::with_capacity(queries_per_session);
        for _ in 0..queries_per_session {
            let q = query_ids[rng.random_range(0..query_ids.len())];
            let pool = truth.pool(q);
            if pool.len() < docs_per_query {
                return Err(Error::Generation(format!(
                    "query {} has {} candidates but queries show {}",
                    q,
                    pool.len(),
                    docs_per_query
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, pool.len(), docs_per_query);
            let mut docs = Vec::with_capacity(docs_per_query);
            for (rank0, pi) in picks.into_iter().enumerate() {
                let u = pool[pi];
                let a = *truth.alpha.get(&(q, u)).ok_or_else(|| {
                    Error::Generation(format!("no alpha entry for pair ({}, {})", q, u))
                })?;
                let p = a * truth.gamma[rank0];
                let click = (rng.random::<f64>() < p) as u8;
                docs.push(DocumentImpression {
                    url_id: u,
                    pos: rank0 as u32 + 1,
                    click,
                });
            }
            queries.push(QueryRecord { query_id: q, docs });
        }
        sessions.push(Session {
            session_id: sid as u64,
            queries,
        });
    }
    Ok(sessions)
}
