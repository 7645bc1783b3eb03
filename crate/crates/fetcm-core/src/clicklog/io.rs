//! Log ingestion and serialization.
//!
//! The canonical format is one compact JSON session per LF-terminated line,
//! keys in declaration order, integers only. It is the source of truth and
//! round-trips byte-exactly. The tab-separated challenge-style adapter is
//! best effort: it drops query terms and URL domains and counts (rather than
//! fails on) click records it cannot match.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::synth::GroundTruth;
use super::{DocumentImpression, QueryRecord, Session, P_MAX_DEFAULT};

pub fn parse_canonical<R: BufRead>(reader: R) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let session: Session = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        session.validate(P_MAX_DEFAULT).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {}: {}", i + 1, msg)),
            other => other,
        })?;
        out.push(session);
    }
    Ok(out)
}

pub fn write_canonical<W: Write>(sessions: &[Session], mut writer: W) -> Result<()> {
    for s in sessions {
        serde_json::to_writer(&mut writer, s)
            .map_err(|e| Error::Validation(format!("cannot serialize session: {}", e)))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

struct SerpRef {
    query: usize,
}

struct SessionBuilder {
    session_id: u64,
    queries: Vec<QueryRecord>,
    serps: HashMap<u64, SerpRef>,
}

/// Parse a tab-separated challenge-style log. Returns the assembled sessions
/// (metadata-only sessions are dropped) and the count of click records that
/// could not be matched to a listed result.
pub fn parse_yandex<R: BufRead>(reader: R) -> Result<(Vec<Session>, u64)> {
    let mut order: Vec<SessionBuilder> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut warnings = 0u64;

    let parse_u64 = |s: &str, line: usize, what: &str| -> Result<u64> {
        s.parse::<u64>().map_err(|_| Error::Parse {
            line,
            msg: format!("{} `{}` is not a non-negative integer", what, s),
        })
    };

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: "record has fewer than 2 tab-separated fields".into(),
            });
        }
        let sid = parse_u64(fields[0], lineno, "session id")?;
        let slot = *index.entry(sid).or_insert_with(|| {
            order.push(SessionBuilder {
                session_id: sid,
                queries: Vec::new(),
                serps: HashMap::new(),
            });
            order.len() - 1
        });
        let builder = &mut order[slot];

        if fields[1] == "M" {
            // day and user id are not model inputs
            continue;
        }
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: "query or click record has fewer than 4 fields".into(),
            });
        }
        match fields[2] {
            "Q" | "T" => {
                if fields.len() < 7 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "query record lists no results".into(),
                    });
                }
                let serp = parse_u64(fields[3], lineno, "SERP id")?;
                let query_id = parse_u64(fields[4], lineno, "query id")?;
                // fields[5] holds the comma-separated terms; unused here
                let mut docs = Vec::new();
                for (rank, pair) in fields[6..].iter().take(P_MAX_DEFAULT).enumerate() {
                    let url_part = pair.split(',').next().unwrap_or("");
                    let url_id = parse_u64(url_part, lineno, "URL id")?;
                    docs.push(DocumentImpression {
                        url_id,
                        pos: rank as u32 + 1,
                        click: 0,
                    });
                }
                builder.serps.insert(serp, SerpRef { query: builder.queries.len() });
                builder.queries.push(QueryRecord { query_id, docs });
            }
            "C" => {
                if builder.queries.is_empty() {
                    warnings += 1;
                    continue;
                }
                let serp = parse_u64(fields[3], lineno, "SERP id")?;
                if fields.len() < 5 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "click record is missing the URL id".into(),
                    });
                }
                let url_id = parse_u64(fields[4], lineno, "URL id")?;
                let hit = builder.serps.get(&serp).and_then(|r| {
                    builder.queries[r.query]
                        .docs
                        .iter()
                        .position(|d| d.url_id == url_id)
                        .map(|j| (r.query, j))
                });
                match hit {
                    Some((q, j)) => order[slot].queries[q].docs[j].click = 1,
                    None => warnings += 1,
                }
            }
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown record type `{}`", other),
                });
            }
        }
    }

    let sessions: Vec<Session> = order
        .into_iter()
        .filter(|b| !b.queries.is_empty())
        .map(|b| Session {
            session_id: b.session_id,
            queries: b.queries,
        })
        .collect();
    Ok((sessions, warnings))
}

/// Write the generator's ground truth as CSV: a `q,u,alpha` section with one
/// row per materialized pair, then a `rank,gamma` section.
pub fn write_truth_csv<W: Write>(truth: &GroundTruth, mut writer: W) -> Result<()> {
    writeln!(writer, "q,u,alpha")?;
    for (&(q, u), &a) in &truth.alpha {
        writeln!(writer, "{},{},{}", q, u, a)?;
    }
    writeln!(writer, "rank,gamma")?;
    for (i, &g) in truth.gamma.iter().enumerate() {
        writeln!(writer, "{},{}", i + 1, g)?;
    }
    Ok(())
}

pub fn read_truth_csv<R: BufRead>(reader: R) -> Result<GroundTruth> {
    let mut truth = GroundTruth {
        alpha: Default::default(),
        gamma: Vec::new(),
    };
    let mut in_gamma = false;
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if line == "q,u,alpha" {
            saw_header = true;
            continue;
        }
        if line == "rank,gamma" {
            in_gamma = true;
            continue;
        }
        if !saw_header {
            return Err(Error::Parse {
                line: lineno,
                msg: "truth file must start with a `q,u,alpha` header".into(),
            });
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if in_gamma {
            if parts.len() != 2 {
                return Err(bad("gamma row wants `rank,gamma`".into()));
            }
            let rank: usize = parts[0]
                .parse()
                .map_err(|_| bad(format!("rank `{}` is not an integer", parts[0])))?;
            if rank != truth.gamma.len() + 1 {
                return Err(bad(format!(
                    "gamma rows must be consecutive from rank 1, got {}",
                    rank
                )));
            }
            let g: f64 = parts[1]
                .parse()
                .map_err(|_| bad(format!("gamma `{}` is not a number", parts[1])))?;
            truth.gamma.push(g);
        } else {
            if parts.len() != 3 {
                return Err(bad("alpha row wants `q,u,alpha`".into()));
            }
            let q: u64 = parts[0]
                .parse()
                .map_err(|_| bad(format!("query id `{}` is not an integer", parts[0])))?;
            let u: u64 = parts[1]
                .parse()
                .map_err(|_| bad(format!("url id `{}` is not an integer", parts[1])))?;
            let a: f64 = parts[2]
                .parse()
                .map_err(|_| bad(format!("alpha `{}` is not a number", parts[2])))?;
            truth.alpha.insert((q, u), a);
        }
    }
    if truth.gamma.is_empty() {
        return Err(Error::Validation("truth file has no gamma rows".into()));
    }
    truth.validate()?;
    Ok(truth)
}
