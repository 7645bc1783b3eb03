//! The five subcommand bodies. Each prints one machine-parseable summary
//! line on success; file errors always carry the offending path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fetcm_core::clicklog::{
    encode_sessions, parse_canonical, parse_yandex, read_truth_csv, split, synthesize_pbm,
    write_canonical, write_truth_csv, GroundTruth, Session, Vocabulary,
};
use fetcm_core::diagnostics::{all_pass, rows_csv, run_suite};
use fetcm_core::eval::{overall_ppl, pbm_oracle_ppl, EvalReport, RankCtr};
use fetcm_core::model::Parameters;
use fetcm_core::seed::derive_seed;
use fetcm_core::train::{
    epoch_log_csv, load_checkpoint, save_checkpoint, score_sessions, train_with_progress,
};
use fetcm_core::{Error, Result};

use crate::config::{LogFormat, RunConfig};

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("`{}` must be set for this command", key)))
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {}", path.display(), e)))?;
    Ok(BufReader::new(f))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create_writer(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_canonical(path: &Path) -> Result<Vec<Session>> {
    parse_canonical(open_reader(path)?)
}

fn query_doc_counts(sessions: &[Session]) -> (usize, usize) {
    let queries = sessions.iter().map(|s| s.queries.len()).sum();
    let docs = sessions
        .iter()
        .flat_map(|s| &s.queries)
        .map(|q| q.docs.len())
        .sum();
    (queries, docs)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input_path, "input_path")?;
    let output = required(&cfg.output_path, "output_path")?;
    let (sessions, warnings) = match cfg.format {
        LogFormat::Canonical => (parse_canonical(open_reader(input)?)?, 0),
        LogFormat::Yandex => parse_yandex(open_reader(input)?)?,
    };
    let mut w = create_writer(output)?;
    write_canonical(&sessions, &mut w)?;
    w.flush()?;
    let (queries, docs) = query_doc_counts(&sessions);
    println!(
        "sessions={} queries={} docs={} warnings={}",
        sessions.len(),
        queries,
        docs,
        warnings
    );
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let output = required(&cfg.output_path, "output_path")?;
    let truth_path = cfg
        .truth_path
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.truth.csv", output.display())));
    let truth = GroundTruth::sample(
        cfg.n_query_ids,
        cfg.n_url_ids,
        cfg.pool_size,
        cfg.alpha_lo,
        cfg.alpha_hi,
        cfg.gamma.clone(),
        derive_seed(cfg.seed, "truth"),
    )?;
    let sessions = synthesize_pbm(
        &truth,
        cfg.n_sessions,
        cfg.queries_per_session,
        cfg.docs_per_query,
        derive_seed(cfg.seed, "synth"),
    )?;
    let mut w = create_writer(output)?;
    write_canonical(&sessions, &mut w)?;
    w.flush()?;
    let mut tw = create_writer(&truth_path)?;
    write_truth_csv(&truth, &mut tw)?;
    tw.flush()?;
    let (queries, docs) = query_doc_counts(&sessions);
    println!("sessions={} queries={} docs={}", sessions.len(), queries, docs);
    Ok(())
}

/// Training splits: explicit files win; otherwise one log is split by the
/// configured ratios with a seed-derived shuffle, so a later `eval` run with
/// the same config sees exactly the held-out third.
fn train_valid_test(cfg: &RunConfig) -> Result<(Vec<Session>, Vec<Session>, Vec<Session>)> {
    match (&cfg.train_path, &cfg.valid_path) {
        (Some(tp), Some(vp)) => {
            let test = match &cfg.test_path {
                Some(p) => load_canonical(p)?,
                None => Vec::new(),
            };
            Ok((load_canonical(tp)?, load_canonical(vp)?, test))
        }
        (None, None) => {
            let data = required(&cfg.data_path, "data_path (or train_path and valid_path)")?;
            split(load_canonical(data)?, cfg.split_ratios, derive_seed(cfg.seed, "split"))
        }
        _ => Err(Error::Config(
            "train_path and valid_path must be set together".into(),
        )),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let checkpoint_path = required(&cfg.checkpoint_path, "checkpoint_path")?;
    let (train_raw, valid_raw, _) = train_valid_test(cfg)?;
    let vocab = Vocabulary::build(&train_raw, cfg.min_freq);
    let train_set = encode_sessions(&train_raw, &vocab);
    let valid_set = encode_sessions(&valid_raw, &vocab);
    let params = Parameters::init(&cfg.model, &vocab, derive_seed(cfg.seed, "init"))?;
    let started = std::time::Instant::now();
    let outcome = train_with_progress(
        params,
        &cfg.model,
        &cfg.train,
        &vocab,
        &train_set,
        &valid_set,
        |r| {
            eprintln!(
                "epoch {}/{} train_loss={:.6} valid_ll={:.6} valid_ppl={:.6} ({:.0}s)",
                r.epoch,
                cfg.train.max_epochs,
                r.train_loss,
                r.valid_ll,
                r.valid_ppl,
                started.elapsed().as_secs_f64()
            );
        },
    )?;
    save_checkpoint(&outcome.checkpoint, checkpoint_path)?;
    if let Some(log_path) = &cfg.epoch_log_path {
        write_text(log_path, &epoch_log_csv(&outcome.log))?;
    }
    let best = outcome
        .log
        .iter()
        .find(|r| r.epoch == outcome.checkpoint.epoch)
        .expect("the checkpointed epoch was logged");
    println!("valid_ll={} valid_ppl={}", best.valid_ll, best.valid_ppl);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let checkpoint_path = required(&cfg.checkpoint_path, "checkpoint_path")?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let params = ckpt.restore_parameters()?;

    // the test split, plus the training split when it is derivable here
    let (test_raw, train_raw): (Vec<Session>, Option<Vec<Session>>) = match &cfg.test_path {
        Some(p) => {
            let train = match &cfg.train_path {
                Some(tp) => Some(load_canonical(tp)?),
                None => None,
            };
            (load_canonical(p)?, train)
        }
        None => {
            let data = required(&cfg.data_path, "test_path (or data_path)")?;
            let (train, _, test) =
                split(load_canonical(data)?, cfg.split_ratios, derive_seed(cfg.seed, "split"))?;
            (test, Some(train))
        }
    };
    if test_raw.is_empty() {
        return Err(Error::Config("the test split holds no sessions".into()));
    }

    let encoded = encode_sessions(&test_raw, &ckpt.vocab);
    let docs = score_sessions(&params, &ckpt.model, &encoded)?;
    let n_queries = test_raw.iter().map(|s| s.queries.len()).sum();

    let baseline_ppl = if cfg.baseline {
        // fit on the training split when available, otherwise on the
        // evaluated sessions themselves
        let fit_on = train_raw.as_deref().unwrap_or(&test_raw);
        let ctr = RankCtr::fit(fit_on)?;
        Some(overall_ppl(&ctr.score(&test_raw), ckpt.model.p_max, ckpt.model.prob_clamp)?)
    } else {
        None
    };
    let oracle_ppl = match &cfg.truth_path {
        Some(tp) => {
            let truth = read_truth_csv(open_reader(tp)?)?;
            Some(pbm_oracle_ppl(&test_raw, &truth, ckpt.model.p_max, ckpt.model.prob_clamp)?)
        }
        None => None,
    };

    let report = EvalReport::build(
        &docs,
        n_queries,
        ckpt.model.p_max,
        ckpt.model.prob_clamp,
        baseline_ppl,
        oracle_ppl,
    )?;
    if let Some(path) = &cfg.report_path {
        write_text(path, &report.to_csv())?;
    }
    let mut line = format!("ppl={} ll={}", report.ppl_overall, report.ll);
    if let Some(b) = report.baseline_ppl {
        line.push_str(&format!(" baseline_ppl={}", b));
    }
    if let Some(o) = report.oracle_ppl {
        line.push_str(&format!(" oracle_ppl={}", o));
    }
    println!("{}", line);
    Ok(())
}

/// Returns whether every row passed; the caller maps `false` to exit code 4.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let rows = run_suite(cfg.seed)?;
    let table = rows_csv(&rows);
    print!("{}", table);
    if let Some(path) = &cfg.output_path {
        write_text(path, &table)?;
    }
    Ok(all_pass(&rows))
}
