//! Click-prediction metrics plus two reference predictors: a Laplace-smoothed
//! per-rank CTR baseline and the exact position-model optimum for synthetic
//! data whose generating probabilities are known.

use std::fmt::Write as _;

use crate::clicklog::{GroundTruth, Session};
use crate::error::{Error, Result};

/// One scored document: model probability, observed click, 1-based rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDoc {
    pub prob: f64,
    pub click: u8,
    pub rank: usize,
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.max(eps).min(1.0 - eps)
}

/// Mean base-2 log-loss over the documents at `rank`, exponentiated:
/// 2^(−mean(c·log₂p + (1−c)·log₂(1−p))). Probabilities are clamped to
/// [eps, 1−eps] first.
pub fn perplexity_at_rank(docs: &[ScoredDoc], rank: usize, eps: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in docs.iter().filter(|d| d.rank == rank) {
        let p = clamp(d.prob, eps);
        sum += if d.click == 1 { p.log2() } else { (1.0 - p).log2() };
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric(format!("no documents at rank {}", rank)));
    }
    Ok((-sum / n as f64).exp2())
}

/// Arithmetic mean of the per-rank perplexities over ranks 1..=p_max that
/// actually occur in `docs`.
pub fn overall_ppl(docs: &[ScoredDoc], p_max: usize, eps: f64) -> Result<f64> {
    let per_rank = ppl_per_rank(docs, p_max, eps);
    let present: Vec<f64> = per_rank.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Metric("no documents at any rank".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-rank perplexities for ranks 1..=p_max; `None` where the rank is absent.
pub fn ppl_per_rank(docs: &[ScoredDoc], p_max: usize, eps: f64) -> Vec<Option<f64>> {
    (1..=p_max).map(|r| perplexity_at_rank(docs, r, eps).ok()).collect()
}

/// Mean natural-log likelihood per document: mean(c·ln p + (1−c)·ln(1−p)).
pub fn log_likelihood(docs: &[ScoredDoc], eps: f64) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Metric("log-likelihood of zero documents".into()));
    }
    let sum: f64 = docs
        .iter()
        .map(|d| {
            let p = clamp(d.prob, eps);
            if d.click == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / docs.len() as f64)
}

/// Per-rank click-through-rate predictor with a Laplace prior:
/// p(click | rank) = (clicks + 1) / (impressions + 2). Ranks never seen in
/// training fall back to the pooled smoothed rate.
#[derive(Debug, Clone)]
pub struct RankCtr {
    clicks: Vec<u64>,
    impressions: Vec<u64>,
    global: f64,
}

impl RankCtr {
    pub fn fit(sessions: &[Session]) -> Result<RankCtr> {
        let mut clicks = Vec::new();
        let mut impressions = Vec::new();
        let mut total_clicks = 0u64;
        let mut total_impressions = 0u64;
        for s in sessions {
            for q in &s.queries {
                for d in &q.docs {
                    let r = d.pos as usize;
                    if clicks.len() < r {
                        clicks.resize(r, 0);
                        impressions.resize(r, 0);
                    }
                    clicks[r - 1] += d.click as u64;
                    impressions[r - 1] += 1;
                    total_clicks += d.click as u64;
                    total_impressions += 1;
                }
            }
        }
        if total_impressions == 0 {
            return Err(Error::Config("rank CTR baseline fit on an empty training set".into()));
        }
        let global = (total_clicks + 1) as f64 / (total_impressions + 2) as f64;
        Ok(RankCtr { clicks, impressions, global })
    }

    pub fn predict(&self, rank: usize) -> f64 {
        match self.impressions.get(rank.wrapping_sub(1)) {
            Some(&n) if n > 0 => {
                (self.clicks[rank - 1] + 1) as f64 / (n + 2) as f64
            }
            _ => self.global,
        }
    }

    /// Score every document of `sessions` with the per-rank rate.
    pub fn score(&self, sessions: &[Session]) -> Vec<ScoredDoc> {
        sessions
            .iter()
            .flat_map(|s| &s.queries)
            .flat_map(|q| &q.docs)
            .map(|d| ScoredDoc {
                prob: self.predict(d.pos as usize),
                click: d.click,
                rank: d.pos as usize,
            })
            .collect()
    }
}

/// Score every document with its true generating probability
/// alpha(q,u)·gamma(rank); this is the minimum achievable expected
/// perplexity on data drawn from `truth`.
pub fn oracle_scores(sessions: &[Session], truth: &GroundTruth) -> Result<Vec<ScoredDoc>> {
    let mut out = Vec::new();
    for s in sessions {
        for q in &s.queries {
            for d in &q.docs {
                let a = truth.alpha.get(&(q.query_id, d.url_id)).copied().ok_or_else(|| {
                    Error::Oracle(format!(
                        "no ground-truth attractiveness for query {} url {}",
                        q.query_id, d.url_id
                    ))
                })?;
                let r = d.pos as usize;
                let g = truth.gamma.get(r - 1).copied().ok_or_else(|| {
                    Error::Oracle(format!("no ground-truth examination for rank {}", r))
                })?;
                out.push(ScoredDoc { prob: a * g, click: d.click, rank: r });
            }
        }
    }
    Ok(out)
}

/// Overall perplexity of the true generating probabilities on `sessions`.
pub fn pbm_oracle_ppl(sessions: &[Session], truth: &GroundTruth, p_max: usize, eps: f64) -> Result<f64> {
    overall_ppl(&oracle_scores(sessions, truth)?, p_max, eps)
}

/// Everything the eval command reports, plus the plot-ready per-rank curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Index r−1 holds PPL at rank r; `None` where the rank is absent.
    pub ppl_at_rank: Vec<Option<f64>>,
    pub ppl_overall: f64,
    pub ll: f64,
    pub n_queries: usize,
    pub n_docs: usize,
    pub baseline_ppl: Option<f64>,
    pub oracle_ppl: Option<f64>,
}

impl EvalReport {
    pub fn build(
        docs: &[ScoredDoc],
        n_queries: usize,
        p_max: usize,
        eps: f64,
        baseline_ppl: Option<f64>,
        oracle_ppl: Option<f64>,
    ) -> Result<EvalReport> {
        Ok(EvalReport {
            ppl_at_rank: ppl_per_rank(docs, p_max, eps),
            ppl_overall: overall_ppl(docs, p_max, eps)?,
            ll: log_likelihood(docs, eps)?,
            n_queries,
            n_docs: docs.len(),
            baseline_ppl,
            oracle_ppl,
        })
    }

    /// One `rank,ppl` row per present rank, then summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,ppl\n");
        for (i, p) in self.ppl_at_rank.iter().enumerate() {
            if let Some(p) = p {
                let _ = writeln!(out, "{},{}", i + 1, p);
            }
        }
        let _ = writeln!(out, "overall_ppl,{}", self.ppl_overall);
        let _ = writeln!(out, "ll,{}", self.ll);
        if let Some(b) = self.baseline_ppl {
            let _ = writeln!(out, "baseline_ppl,{}", b);
        }
        if let Some(o) = self.oracle_ppl {
            let _ = writeln!(out, "oracle_ppl,{}", o);
        }
        out
    }
}

/// Collect (probability, click, rank) rows out of raw sessions and a
/// matching probability per document, in session order.
pub fn scored_from_probs(sessions: &[Session], probs: &[f64]) -> Result<Vec<ScoredDoc>> {
    let n: usize = sessions.iter().map(|s| s.queries.iter().map(|q| q.docs.len()).sum::<usize>()).sum();
    if n != probs.len() {
        return Err(Error::Metric(format!(
            "{} documents but {} probabilities",
            n,
            probs.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for s in sessions {
        for q in &s.queries {
            for d in &q.docs {
                out.push(ScoredDoc { prob: probs[k], click: d.click, rank: d.pos as usize });
                k += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicklog::{DocumentImpression, QueryRecord};

    const EPS: f64 = 1e-6;

    fn doc(prob: f64, click: u8, rank: usize) -> ScoredDoc {
        ScoredDoc { prob, click, rank }
    }

    #[test]
    fn coin_flip_predictor_hits_the_anchors() {
        let docs: Vec<ScoredDoc> =
            (0..10).map(|i| doc(0.5, (i % 2) as u8, i % 3 + 1)).collect();
        assert!((overall_ppl(&docs, 10, EPS).unwrap() - 2.0).abs() < 1e-12);
        assert!((log_likelihood(&docs, EPS).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_approaches_one_and_zero() {
        let docs: Vec<ScoredDoc> =
            (0..8).map(|i| doc((i % 2) as f64, (i % 2) as u8, 1)).collect();
        let ppl = perplexity_at_rank(&docs, 1, EPS).unwrap();
        assert!((ppl - 1.0).abs() < 10.0 * EPS, "ppl {}", ppl);
        assert!(log_likelihood(&docs, EPS).unwrap().abs() < 10.0 * EPS);
    }

    #[test]
    fn hand_computed_cases_match() {
        // two queries at rank 1, labels {1,0}, p {0.9,0.2}
        let docs = [doc(0.9, 1, 1), doc(0.2, 0, 1)];
        let want = (-(0.9f64.log2() + 0.8f64.log2()) / 2.0).exp2();
        assert!((perplexity_at_rank(&docs, 1, EPS).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.1785).abs() < 1e-4);

        let docs = [doc(0.9, 1, 1), doc(0.2, 0, 2), doc(0.6, 1, 3)];
        let ll = log_likelihood(&docs, EPS).unwrap();
        let want = (0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((ll - want).abs() < 1e-12);
        assert!((ll + 0.2797).abs() < 1e-4);
    }

    #[test]
    fn overall_ppl_averages_present_ranks_only() {
        // rank 1 perfect (ppl→1), rank 3 coin flip (ppl 2), rank 2 absent
        let docs = [doc(1.0, 1, 1), doc(0.5, 0, 3), doc(0.5, 1, 3)];
        let overall = overall_ppl(&docs, 10, EPS).unwrap();
        let r1 = perplexity_at_rank(&docs, 1, EPS).unwrap();
        assert!((overall - (r1 + 2.0) / 2.0).abs() < 1e-12);
        assert!(perplexity_at_rank(&docs, 2, EPS).is_err());
        let per = ppl_per_rank(&docs, 4, EPS);
        assert!(per[0].is_some() && per[1].is_none() && per[2].is_some() && per[3].is_none());
    }

    #[test]
    fn ppl_and_ll_agree_on_their_shared_internals() {
        // LL == −ln2 · mean base-2 log-loss, whatever the inputs
        let docs: Vec<ScoredDoc> = (0..50)
            .map(|i| doc(0.05 + 0.017 * i as f64 % 0.9, ((i * 7) % 2) as u8, i % 10 + 1))
            .collect();
        let ll = log_likelihood(&docs, EPS).unwrap();
        let mean_log2: f64 = docs
            .iter()
            .map(|d| {
                let p = d.prob.max(EPS).min(1.0 - EPS);
                -if d.click == 1 { p.log2() } else { (1.0 - p).log2() }
            })
            .sum::<f64>()
            / docs.len() as f64;
        assert!((ll + std::f64::consts::LN_2 * mean_log2).abs() < 1e-12);
    }

    #[test]
    fn noise_strictly_worsens_perfect_predictions() {
        let clean: Vec<ScoredDoc> =
            (0..100).map(|i| doc((i % 2) as f64, (i % 2) as u8, 1)).collect();
        let base = perplexity_at_rank(&clean, 1, EPS).unwrap();
        for k in 1..=100 {
            let shift = 0.004 * k as f64;
            let noisy: Vec<ScoredDoc> = clean
                .iter()
                .map(|d| doc((d.prob - shift).abs(), d.click, d.rank))
                .collect();
            assert!(perplexity_at_rank(&noisy, 1, EPS).unwrap() > base);
        }
    }

    fn one_doc_session(rank_clicks: &[(u32, u8)]) -> Session {
        Session {
            session_id: 0,
            queries: vec![QueryRecord {
                query_id: 1,
                docs: rank_clicks
                    .iter()
                    .map(|&(pos, click)| DocumentImpression { url_id: 10 + pos as u64, pos, click })
                    .collect(),
            }],
        }
    }

    #[test]
    fn rank_ctr_is_laplace_smoothed_with_global_fallback() {
        let train = vec![
            one_doc_session(&[(1, 1), (2, 0)]),
            one_doc_session(&[(1, 0), (2, 0)]),
            one_doc_session(&[(1, 1)]),
        ];
        let ctr = RankCtr::fit(&train).unwrap();
        // rank 1: 2 clicks / 3 impressions → 3/5; rank 2: 0/2 → 1/4
        assert!((ctr.predict(1) - 3.0 / 5.0).abs() < 1e-15);
        assert!((ctr.predict(2) - 1.0 / 4.0).abs() < 1e-15);
        // unseen rank → pooled (2+1)/(5+2)
        assert!((ctr.predict(7) - 3.0 / 7.0).abs() < 1e-15);
        assert!(RankCtr::fit(&[]).is_err());
    }

    #[test]
    fn single_observation_rank_gives_two_thirds() {
        let ctr = RankCtr::fit(&[one_doc_session(&[(1, 1)])]).unwrap();
        assert!((ctr.predict(1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_uses_true_probabilities_and_flags_gaps() {
        let mut truth = GroundTruth::default();
        truth.alpha.insert((1, 11), 0.5);
        truth.alpha.insert((1, 12), 1.0);
        truth.gamma = vec![1.0, 1.0];
        let sessions = vec![one_doc_session(&[(1, 1), (2, 0)])];
        let scores = oracle_scores(&sessions, &truth).unwrap();
        assert_eq!(scores[0], doc(0.5, 1, 1));
        assert_eq!(scores[1], doc(1.0, 0, 2));

        // probabilities of exactly 0.5 everywhere → ppl 2
        let mut fair = GroundTruth::default();
        fair.alpha.insert((1, 11), 0.5);
        fair.alpha.insert((1, 12), 0.5);
        fair.gamma = vec![1.0, 1.0];
        let ppl = pbm_oracle_ppl(&sessions, &fair, 10, EPS).unwrap();
        assert!((ppl - 2.0).abs() < 1e-12);

        truth.alpha.remove(&(1, 12));
        assert!(matches!(oracle_scores(&sessions, &truth), Err(Error::Oracle(_))));
        truth.alpha.insert((1, 12), 1.0);
        truth.gamma = vec![1.0];
        assert!(matches!(oracle_scores(&sessions, &truth), Err(Error::Oracle(_))));
    }

    #[test]
    fn report_csv_lists_present_ranks_then_summaries() {
        let docs = [doc(0.5, 1, 1), doc(0.5, 0, 3)];
        let report = EvalReport::build(&docs, 2, 3, EPS, Some(2.5), None).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rank,ppl");
        assert_eq!(lines[1], "1,2");
        assert_eq!(lines[2], "3,2");
        assert_eq!(lines[3], "overall_ppl,2");
        assert!(lines[4].starts_with("ll,-0.693147180559945"));
        assert_eq!(lines[5], "baseline_ppl,2.5");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn scored_from_probs_walks_sessions_in_order() {
        let sessions = vec![one_doc_session(&[(1, 1), (2, 0)]), one_doc_session(&[(1, 0)])];
        let scored = scored_from_probs(&sessions, &[0.7, 0.3, 0.1]).unwrap();
        assert_eq!(scored[1], doc(0.3, 0, 2));
        assert_eq!(scored[2], doc(0.1, 0, 1));
        assert!(scored_from_probs(&sessions, &[0.7]).is_err());
    }
}
