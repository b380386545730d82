use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use serde::Serialize;

use super::output::OutDir;
use super::{ClassifyArgs, CliError, Command, FitArgs, MethodArg, OutliersArgs, ScaleArg, SelectArgs, SynthArgs};
use crate::attrib::{self, KMeansConfig, LabeledScores, Method};
use crate::corpus::{beatles_shaped_synthetic, parse_corpus, Author, Corpus, SchemaMode};
use crate::exec::Execution;
use crate::lpca::{self, Embeddings, LpcaConfig};
use crate::robust::{self, OgkConfig, ScaleEstimator};

pub(super) fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::input(path, e))
}

pub(super) fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    let parsed = parse_corpus(open(path)?, SchemaMode::HeaderDerived).map_err(|e| CliError::input(path, e))?;
    for w in &parsed.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(parsed.corpus)
}

pub(super) fn load_embeddings(path: &Path) -> Result<Embeddings, CliError> {
    Embeddings::read_csv(open(path)?).map_err(|e| CliError::input(path, e))
}

/// Author names from a filter flag; `Other` must be spelled out.
pub(super) fn parse_authors(flag: &str, names: &[String]) -> Result<Vec<Author>, CliError> {
    let mut out = Vec::new();
    for name in names {
        let author = Author::parse_lenient(name);
        if author == Author::Other && !name.trim().eq_ignore_ascii_case("other") {
            return Err(CliError::Usage(format!("--{flag}: unknown author {name:?}")));
        }
        if !out.contains(&author) {
            out.push(author);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("--{flag} is empty")));
    }
    Ok(out)
}

/// Errors (exit 3) when some requested author has no rows.
pub(super) fn require_rows(emb: &Embeddings, flag: &str, authors: &[Author]) -> Result<(), CliError> {
    for &a in authors {
        if !emb.rows.iter().any(|m| m.author == a) {
            return Err(CliError::Compute(format!("--{flag} {a}: the filter selects no songs")));
        }
    }
    Ok(())
}

pub(super) fn leading_pcs(emb: &Embeddings, pcs: Option<usize>) -> Result<Embeddings, CliError> {
    match pcs {
        None => Ok(emb.clone()),
        Some(p) if p >= 1 && p <= emb.k() => Ok(emb.truncate_components(p)),
        Some(p) => Err(CliError::Usage(format!("--pcs {p} outside 1..={}", emb.k()))),
    }
}

fn csv_float(v: f64) -> String {
    format!("{v:?}")
}

pub(super) fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let corpus = beatles_shaped_synthetic(args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::input(parent, e))?;
    }
    let file = File::create(&args.out).map_err(|e| CliError::input(&args.out, e))?;
    corpus.write_csv(file)?;
    println!("wrote {} ({} songs x {} features)", args.out.display(), corpus.n(), corpus.d());
    Ok(())
}

pub(super) fn fit(args: &FitArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let x = corpus.matrix();
    let config = LpcaConfig::new(args.k, args.m)
        .with_mu_mode(args.mu_mode.into())
        .with_max_iterations(args.max_iter)
        .with_rel_tol(args.tol)
        .with_restarts(args.restarts)
        .with_seed(args.seed);
    let model = lpca::fit(&x, &config)?;
    let emb = lpca::embed_corpus(&model, &corpus)?;
    let explained = lpca::deviance_explained(&model, &x)?;
    let mut out = OutDir::create(&args.out)?;
    out.write("model.json", model.to_json()?.as_bytes())?;
    out.write_with("embeddings.csv", |w| emb.write_csv(w))?;
    out.finish(&Command::Fit(args.clone()), vec![args.corpus.clone()])?;
    println!(
        "fit: n={} d={} k={} m={} iterations={} converged={} deviance_explained={:.6}",
        corpus.n(),
        corpus.d(),
        model.k(),
        model.m,
        model.deviance_trace.len() - 1,
        model.converged,
        explained
    );
    Ok(())
}

#[derive(Serialize)]
struct Selection {
    m: f64,
    k: usize,
    threshold: f64,
    cv_k: usize,
    folds: usize,
    seed: u64,
    explained: Vec<f64>,
}

pub(super) fn select(args: &SelectArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let x = corpus.matrix();
    let base = LpcaConfig::new(args.k, args.m_grid.first().copied().unwrap_or(1.0))
        .with_mu_mode(args.mu_mode.into())
        .with_max_iterations(args.max_iter)
        .with_rel_tol(args.tol)
        .with_restarts(args.restarts)
        .with_seed(args.seed);
    let cv = lpca::cross_validate_m(&x, &args.m_grid, args.folds, &base, Execution::Parallel)?;
    let mut out = OutDir::create(&args.out)?;
    out.write_with("cv.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["m", "fold", "heldout_deviance"])?;
        for c in &cv.cells {
            w.write_record([csv_float(c.m), c.fold.to_string(), csv_float(c.heldout_deviance)])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_json("cv.json", &cv)?;
    println!("select: best m={} (held-out deviance {:?})", cv.best_m, cv.totals);

    let chosen = lpca::choose_k(&x, args.threshold, &LpcaConfig { m: cv.best_m, ..base }, Execution::Parallel)?;
    out.write_with("k_curve.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["k", "deviance_explained"])?;
        for (i, e) in chosen.explained.iter().enumerate() {
            w.write_record([(i + 1).to_string(), csv_float(*e)])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_json(
        "selection.json",
        &Selection {
            m: cv.best_m,
            k: chosen.k,
            threshold: args.threshold,
            cv_k: args.k,
            folds: args.folds,
            seed: args.seed,
            explained: chosen.explained.clone(),
        },
    )?;
    out.finish(&Command::Select(args.clone()), vec![args.corpus.clone()])?;
    println!("select: m={} k={} (threshold {})", cv.best_m, chosen.k, args.threshold);
    Ok(())
}

/// Rows of `emb` selected by an `--authors` flag (`all` keeps every row).
fn author_rows(emb: &Embeddings, names: &[String]) -> Result<Vec<usize>, CliError> {
    if names.len() == 1 && names[0].trim().eq_ignore_ascii_case("all") {
        return Ok((0..emb.n()).collect());
    }
    let authors = parse_authors("authors", names)?;
    require_rows(emb, "authors", &authors)?;
    Ok(emb.indices_where(|m| authors.contains(&m.author)))
}

pub(super) fn outliers(args: &OutliersArgs) -> Result<(), CliError> {
    if !(args.quantile > 0.0 && args.quantile < 1.0) {
        return Err(CliError::Usage(format!("--quantile {} outside (0, 1)", args.quantile)));
    }
    if args.rounds == 0 {
        return Err(CliError::Usage("--rounds must be at least 1".into()));
    }
    let emb = leading_pcs(&load_embeddings(&args.embeddings)?, args.pcs)?;
    let rows = author_rows(&emb, &args.authors)?;
    let subset = emb.select_rows(&rows);
    let config = OgkConfig {
        scale_estimator: match args.scale {
            ScaleArg::Mad => ScaleEstimator::Mad,
            ScaleArg::Qn => ScaleEstimator::Qn,
        },
        orthogonalization_rounds: args.rounds,
        reweight: !args.no_reweight,
        cutoff_quantile: args.quantile,
    };
    let rc = robust::ogk_estimate(&subset.scores, &config)?;
    let mut report = robust::flag_outliers(&rc, &config, Some(&subset.rows))?;
    for f in &mut report.flagged {
        f.row = rows[f.row];
    }
    let mut out = OutDir::create(&args.out)?;
    out.write_json("outliers.json", &report)?;
    out.write_with("outliers.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["row", "title", "author", "album", "distance", "squared_distance", "chi2_cutoff"])?;
        for f in &report.flagged {
            w.write_record([
                f.row.to_string(),
                f.title.clone(),
                f.author.clone(),
                f.album.clone(),
                csv_float(f.distance),
                csv_float(f.distance * f.distance),
                csv_float(report.chi2_cutoff),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.finish(&Command::Outliers(args.clone()), vec![args.embeddings.clone()])?;
    println!(
        "outliers: {} of {} rows beyond chi2 cutoff {:.4} ({} components)",
        report.flagged.len(),
        subset.n(),
        report.chi2_cutoff,
        subset.k()
    );
    Ok(())
}

fn read_titles(path: &Path) -> Result<Vec<String>, CliError> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let headers = rdr.headers().map_err(|e| CliError::input(path, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "title")
        .ok_or_else(|| CliError::input(path, "missing a 'title' column"))?;
    let mut titles = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(path, e))?;
        titles.push(rec.get(col).unwrap_or("").trim().to_string());
    }
    Ok(titles)
}

#[derive(Serialize)]
struct KMeansReport<'a> {
    k: usize,
    n_init: usize,
    seed: u64,
    majority_accuracy: f64,
    correct: usize,
    n: usize,
    result: &'a attrib::ClusteringResult,
}

pub(super) fn classify(args: &ClassifyArgs) -> Result<(), CliError> {
    let authors = parse_authors("authors", &args.authors)?;
    if authors.len() != 2 {
        return Err(CliError::Usage("--authors must name exactly two authors".into()));
    }
    let emb = leading_pcs(&load_embeddings(&args.embeddings)?, args.pcs)?;
    let mut inputs = vec![args.embeddings.clone()];

    let mut disputed_rows = Vec::new();
    if let Some(path) = &args.disputed {
        inputs.push(path.clone());
        for title in read_titles(path)? {
            let matches = emb.indices_where(|m| m.title == title);
            if matches.is_empty() {
                return Err(CliError::input(path, format!("disputed song {title:?} is not in the embeddings")));
            }
            disputed_rows.extend(matches);
        }
    }
    let disputed_set: BTreeSet<usize> = disputed_rows.iter().copied().collect();
    let train_rows: Vec<usize> = (0..emb.n())
        .filter(|i| !disputed_set.contains(i) && authors.contains(&emb.rows[*i].author))
        .collect();
    let train = LabeledScores::from_embeddings(&emb.select_rows(&train_rows), authors[0], authors[1])?;
    train.require_both_classes()?;

    let methods: Vec<Method> = match args.method {
        MethodArg::Logreg => vec![Method::Logreg { ridge: args.ridge }],
        MethodArg::Knn => vec![Method::Knn {
            k_neighbors: args.k_neighbors,
        }],
        MethodArg::Rf => vec![Method::Rf {
            n_trees: args.n_trees,
            mtry: args.mtry,
            seed: args.seed,
        }],
        MethodArg::All => vec![
            Method::Logreg { ridge: args.ridge },
            Method::Knn {
                k_neighbors: args.k_neighbors,
            },
            Method::Rf {
                n_trees: args.n_trees,
                mtry: args.mtry,
                seed: args.seed,
            },
        ],
    };

    let mut out = OutDir::create(&args.out)?;
    for method in &methods {
        let report = attrib::loo_evaluate(method, &train, Execution::Parallel)?;
        out.write_with(&format!("loo_{}.csv", method.name()), |w| report.write_csv(w))?;
        out.write_json(&format!("loo_{}.json", method.name()), &report)?;
        println!("classify: {} leave-one-out accuracy {:.4} (n={})", method.name(), report.accuracy, train.n());
    }

    let kcfg = KMeansConfig {
        k: 2,
        n_init: args.kmeans_restarts,
        seed: args.seed,
        ..KMeansConfig::default()
    };
    let clusters = attrib::kmeans(&train.scores, &kcfg, Execution::Parallel)?;
    let accuracy = clusters.majority_accuracy(&train.labels);
    out.write_json(
        "kmeans.json",
        &KMeansReport {
            k: kcfg.k,
            n_init: kcfg.n_init,
            seed: kcfg.seed,
            majority_accuracy: accuracy,
            correct: (accuracy * train.n() as f64).round() as usize,
            n: train.n(),
            result: &clusters,
        },
    )?;
    out.write_with("kmeans.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["title", "author", "cluster"])?;
        for i in 0..train.n() {
            w.write_record([
                train.titles[i].clone(),
                train.author(train.labels[i]).to_string(),
                clusters.assignments[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    println!("classify: k-means majority accuracy {accuracy:.4}");

    if !disputed_rows.is_empty() {
        let external = match &args.external {
            Some(path) => {
                inputs.push(path.clone());
                Some(attrib::read_external_predictions(open(path)?).map_err(|e| CliError::input(path, e))?)
            }
            None => None,
        };
        let scores = emb.scores.select_rows(&disputed_rows);
        let titles: Vec<String> = disputed_rows.iter().map(|&i| emb.rows[i].title.clone()).collect();
        let table = attrib::predict_disputed(&methods, &train, &scores, &titles, external.as_ref(), Execution::Parallel)?;
        out.write_with("disputed.csv", |w| table.write_csv(w))?;
        out.write_json("disputed.json", &table)?;
        let agree = table.rows.iter().filter(|r| r.agreement).count();
        println!("classify: {agree} of {} disputed songs with full agreement", table.rows.len());
    } else if args.external.is_some() {
        return Err(CliError::Usage("--external needs --disputed".into()));
    }
    out.finish(&Command::Classify(args.clone()), inputs)?;
    Ok(())
}
