use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hgn::corpus::{load_examples, save_examples, Corpus, QaExample};
use hgn::eval::{score as score_predictions, Metrics, Predictions, Report};
use hgn::graph::build_graph;
use hgn::model::{build_vocab, prepare, Model};
use hgn::selector::{select_paragraphs, selection_stats, stats_table, LexicalRanker, Ranker, ScoreFileRanker, SelectionMode};
use hgn::synthgen::{generate, split_dev};
use hgn::trainer::{evaluate, DevSet};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{CliError, Format};

fn log(line: Value) {
    eprintln!("{line}");
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    let start = Instant::now();
    let out = f()?;
    log(json!({ "stage": stage, "seconds": start.elapsed().as_secs_f64() }));
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

fn load_corpus(c: &RunConfig) -> Result<Corpus, CliError> {
    timed("load_corpus", || Ok(Corpus::load(RunConfig::path(&c.paths.corpus))?))
}

fn load_questions(path: &Path, corpus: &Corpus) -> Result<Vec<QaExample>, CliError> {
    timed("load_questions", || Ok(load_examples(path, Some(corpus))?))
}

fn ranker(c: &RunConfig) -> Result<Box<dyn Ranker>, CliError> {
    Ok(match &c.paths.ranker_scores {
        Some(p) => Box::new(ScoreFileRanker::load(p)?),
        None => Box::new(LexicalRanker),
    })
}

fn questions_path(c: &RunConfig, qa: Option<PathBuf>) -> PathBuf {
    qa.unwrap_or_else(|| RunConfig::path(&c.paths.dev).to_path_buf())
}

pub fn gen(c: &RunConfig) -> Result<(), CliError> {
    let (corpus, examples) = timed("generate", || Ok(generate(&c.synth)?))?;
    let (train, dev) = split_dev(examples, c.dev_examples);
    let (pc, pt, pd) = (RunConfig::path(&c.paths.corpus), RunConfig::path(&c.paths.train), RunConfig::path(&c.paths.dev));
    timed("write", || {
        for p in [pc, pt, pd] {
            ensure_parent(p)?;
        }
        corpus.save(pc)?;
        save_examples(pt, &train)?;
        save_examples(pd, &dev)?;
        Ok(())
    })?;
    println!(
        "{}",
        json!({ "corpus": pc, "paragraphs": corpus.len(), "train": pt, "train_examples": train.len(), "dev": pd, "dev_examples": dev.len() })
    );
    Ok(())
}

pub fn select(c: &RunConfig, qa: Option<PathBuf>) -> Result<(), CliError> {
    let corpus = load_corpus(c)?;
    let questions = load_questions(&questions_path(c, qa), &corpus)?;
    let ranker = ranker(c)?;
    let mode = c.selection.mode()?;
    let run = |mode: SelectionMode| -> Vec<_> {
        questions.par_iter().map(|ex| select_paragraphs(ex, &corpus, ranker.as_ref(), mode)).collect()
    };
    let chosen = timed("select", || Ok(run(mode)))?;
    let records: Vec<Value> = questions
        .iter()
        .zip(&chosen)
        .map(|(ex, r)| json!({ "id": ex.id, "paragraphs": r.paragraphs, "link_edges": r.link_edges }))
        .collect();
    let out = c.out_dir.join("selection.json");
    write_text(&out, &serde_json::to_string_pretty(&json!({ "mode": mode.to_string(), "examples": records })).expect("json"))?;

    let gold: Vec<_> = questions.iter().map(|ex| ex.gold_titles.clone()).collect();
    let tau = c.selection.tau;
    let mut rows = vec![
        ("1st hop".to_string(), SelectionMode::FirstHop),
        ("2 paragraphs".to_string(), SelectionMode::Top(2)),
        ("4 paragraphs".to_string(), SelectionMode::Top(4)),
        (format!("Threshold (tau {tau})"), SelectionMode::Threshold(tau)),
    ];
    if !rows.iter().any(|(_, m)| *m == mode) {
        rows.push((mode.to_string(), mode));
    }
    let mut stats = Vec::new();
    let mut table = Vec::new();
    for (name, m) in rows {
        let s = if m == mode { selection_stats(&chosen, &gold) } else { selection_stats(&run(m), &gold) };
        stats.push(json!({ "method": name, "mode": m.to_string(), "precision": s.precision, "recall": s.recall, "mean_paragraphs": s.mean_paragraphs }));
        table.push((if m == mode { format!("{name} *") } else { name }, s));
    }
    write_text(&c.out_dir.join("selection_stats.json"), &serde_json::to_string_pretty(&stats).expect("json"))?;
    print!("{}", stats_table(&table));
    Ok(())
}

pub fn graph_dump(c: &RunConfig, qa: Option<PathBuf>, id: Option<String>) -> Result<(), CliError> {
    let corpus = load_corpus(c)?;
    let questions = load_questions(&questions_path(c, qa), &corpus)?;
    let ex = match &id {
        Some(id) => questions.iter().find(|e| &e.id == id).ok_or_else(|| CliError::Invalid(format!("no question with id `{id}`")))?,
        None => questions.first().ok_or_else(|| CliError::Invalid("the question file is empty".into()))?,
    };
    let selection = select_paragraphs(ex, &corpus, ranker(c)?.as_ref(), c.selection.mode()?);
    let graph = build_graph(ex, &selection, &corpus, c.model.caps)?;
    let mut out = graph.to_json();
    out["id"] = json!(ex.id);
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

pub fn train(c: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(c)?;
    let train_ex = load_questions(RunConfig::path(&c.paths.train), &corpus)?;
    let dev_ex = load_questions(RunConfig::path(&c.paths.dev), &corpus)?;
    let ranker = ranker(c)?;
    let mode = c.selection.mode()?;
    let vocab = build_vocab(&corpus, &train_ex);
    let (train_set, dev_set) = timed("prepare", || {
        let t = prepare(&train_ex, &corpus, ranker.as_ref(), mode, &vocab, &c.model)?;
        let d = prepare(&dev_ex, &corpus, ranker.as_ref(), mode, &vocab, &c.model)?;
        Ok((t, d))
    })?;
    let mut model = Model::new(c.model.clone(), vocab, c.seed)?;
    if let Some(path) = &c.paths.embeddings {
        let rows = model.encoder.load_embeddings(&mut model.params, &model.vocab, path)?;
        log(json!({ "stage": "embeddings", "rows": rows }));
    }
    write_text(&c.out_dir.join("config.json"), &serde_json::to_string_pretty(c).expect("json"))?;
    let checkpoint = RunConfig::path(&c.paths.checkpoint);
    ensure_parent(checkpoint)?;
    let metrics_path = c.out_dir.join("metrics.jsonl");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|source| CliError::Write { path: metrics_path.clone(), source })?);
    let mut write_err = None;
    let report = hgn::trainer::train(
        &mut model,
        &train_set,
        Some(DevSet { instances: &dev_set, examples: &dev_ex }),
        &c.train,
        Some(checkpoint),
        &mut |epoch| {
            let line = serde_json::to_string(epoch).expect("json");
            log(json!({ "stage": "epoch", "log": epoch }));
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(source) = write_err {
        return Err(CliError::Write { path: metrics_path, source });
    }
    log(json!({ "stage": "train", "seconds": report.seconds }));
    println!(
        "{}",
        json!({
            "checkpoint": checkpoint,
            "epochs": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_joint_f1": report.best_joint_f1,
            "seconds": report.seconds,
        })
    );
    Ok(())
}

pub fn eval(c: &RunConfig, qa: Option<PathBuf>, format: Format) -> Result<(), CliError> {
    let model = timed("load_checkpoint", || Ok(Model::load(RunConfig::path(&c.paths.checkpoint))?))?;
    let corpus = load_corpus(c)?;
    let questions = load_questions(&questions_path(c, qa), &corpus)?;
    let ranker = ranker(c)?;
    let instances = timed("prepare", || {
        Ok(prepare(&questions, &corpus, ranker.as_ref(), c.selection.mode()?, &model.vocab, &model.config)?)
    })?;
    let (report, predictions) = timed("predict", || Ok(evaluate(&model, &instances, &questions)?))?;
    let out = c.out_dir.join("predictions.json");
    ensure_parent(&out)?;
    predictions.save(&out)?;
    print_report(&report, format);
    Ok(())
}

pub fn score(pred: &Path, gold: &Path, format: Format) -> Result<(), CliError> {
    let predictions = Predictions::load(pred)?;
    let gold = load_examples(gold, None)?;
    print_report(&score_predictions(&predictions, &gold), format);
    Ok(())
}

fn print_report(report: &Report, format: Format) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(report).expect("json")),
        Format::Table => print!("{}", report_table(report)),
    }
}

/// Percentages to two decimals, one row per reasoning type after the total.
pub fn report_table(report: &Report) -> String {
    let mut out = format!(
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}\n",
        "", "Ans EM", "Ans F1", "Sup EM", "Sup F1", "Joint EM", "Joint F1"
    );
    let mut row = |name: &str, m: &Metrics| {
        let _ = writeln!(
            out,
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2}",
            name,
            100.0 * m.ans.em,
            100.0 * m.ans.f1,
            100.0 * m.sp.em,
            100.0 * m.sp.f1,
            100.0 * m.joint.em,
            100.0 * m.joint.f1
        );
    };
    row("overall", &report.overall);
    for (kind, m) in &report.by_type {
        row(kind, m);
    }
    out
}
