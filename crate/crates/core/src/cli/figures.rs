use serde::Serialize;

use super::commands::{load_corpus, load_embeddings, open, parse_authors, require_rows};
use super::output::OutDir;
use super::svg::{render_bars, render_chart, Chart, Series, Style};
use super::{AnalyzeArgs, CliError, Command};
use crate::analysis::{self, author_album_key, GroupKey};
use crate::corpus::{Author, Corpus, SongMeta};
use crate::lpca::{Embeddings, LpcaModel};
use crate::robust::{self, OgkConfig, OutlierReport};

/// Figure names accepted by `analyze --figures`, with their file stems.
pub const FIGURES: [(&str, &str); 7] = [
    ("scatter", "fig2"),
    ("centroids", "fig3"),
    ("author-scatter", "fig4"),
    ("centroid-distance", "fig5"),
    ("dispersion", "fig6"),
    ("harrison", "fig7"),
    ("outlier-features", "fig8"),
];

struct Context<'a> {
    args: &'a AnalyzeArgs,
    emb: Embeddings,
    corpus: Corpus,
    authors: Vec<Author>,
    subject: Author,
}

fn requested(names: &[String]) -> Result<Vec<(&'static str, &'static str)>, CliError> {
    if names.iter().any(|n| n.trim() == "all") {
        return Ok(FIGURES.to_vec());
    }
    let mut out = Vec::new();
    for name in names {
        let fig = FIGURES
            .iter()
            .find(|(n, stem)| *n == name.trim() || *stem == name.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = FIGURES.iter().map(|f| f.0).collect();
                CliError::Usage(format!("unknown figure {name:?}; known: {}, all", known.join(", ")))
            })?;
        if !out.contains(fig) {
            out.push(*fig);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--figures is empty".into()));
    }
    Ok(out)
}

fn check_alignment(emb: &Embeddings, corpus: &Corpus) -> Result<(), CliError> {
    if emb.n() != corpus.n() {
        return Err(CliError::Usage(format!(
            "embeddings have {} rows but the corpus has {}",
            emb.n(),
            corpus.n()
        )));
    }
    for (i, (e, s)) in emb.rows.iter().zip(corpus.songs()).enumerate() {
        if e.title != s.meta.title || e.author != s.meta.author {
            return Err(CliError::Usage(format!(
                "embeddings row {} ({:?}) does not match corpus row ({:?})",
                i + 1,
                e.title,
                s.meta.title
            )));
        }
    }
    Ok(())
}

pub(super) fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let figures = requested(&args.figures)?;
    let authors = parse_authors("authors", &args.authors)?;
    let subject = parse_authors("subject", std::slice::from_ref(&args.subject))?[0];
    let emb = load_embeddings(&args.embeddings)?;
    let corpus = load_corpus(&args.corpus)?;
    check_alignment(&emb, &corpus)?;
    require_rows(&emb, "authors", &authors)?;
    let ctx = Context {
        args,
        emb,
        corpus,
        authors,
        subject,
    };
    let mut inputs = vec![args.embeddings.clone(), args.corpus.clone()];
    let mut out = OutDir::create(&args.out)?;
    for (name, stem) in &figures {
        let fig = match *name {
            "scatter" => scatter(&ctx)?,
            "centroids" => centroid_paths(&ctx)?,
            "author-scatter" => author_scatter(&ctx)?,
            "centroid-distance" => centroid_distance(&ctx)?,
            "dispersion" => dispersion(&ctx)?,
            "harrison" => subject_distances(&ctx)?,
            "outlier-features" => {
                if let Some(m) = &args.model {
                    inputs.push(m.clone());
                }
                if let Some(o) = &args.outliers {
                    inputs.push(o.clone());
                }
                outlier_features(&ctx)?
            }
            _ => unreachable!("figure names are validated"),
        };
        out.write(&format!("{stem}.csv"), &fig.csv)?;
        out.write(&format!("{stem}.json"), fig.json.as_bytes())?;
        out.write(&format!("{stem}.svg"), fig.svg.as_bytes())?;
    }
    let written = out.finish(&Command::Analyze(args.clone()), inputs)?;
    println!("analyze: wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

struct Figure {
    csv: Vec<u8>,
    json: String,
    svg: String,
}

fn figure<T: Serialize>(rows: &[T], header: &[&str], record: impl Fn(&T) -> Vec<String>, svg: String) -> Result<Figure, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(crate::Error::from)?;
    for r in rows {
        w.write_record(record(r)).map_err(crate::Error::from)?;
    }
    let csv = w.into_inner().map_err(|e| CliError::Compute(e.to_string()))?;
    let json = serde_json::to_string_pretty(rows).map_err(crate::Error::from)? + "\n";
    Ok(Figure { csv, json, svg })
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn need_two_components(emb: &Embeddings, figure: &str) -> Result<(), CliError> {
    if emb.k() < 2 {
        return Err(CliError::Compute(format!("figure {figure} needs at least 2 components, embeddings have {}", emb.k())));
    }
    Ok(())
}

fn filtered_key(authors: &[Author]) -> impl Fn(&SongMeta) -> Option<GroupKey> + '_ {
    move |m| author_album_key(m).filter(|k| authors.contains(&k.author))
}

#[derive(Serialize)]
struct ScatterRow {
    kind: &'static str,
    title: String,
    author: Author,
    album: String,
    album_ordinal: u32,
    count: usize,
    pc1: f64,
    pc2: f64,
}

fn scatter_record(r: &ScatterRow) -> Vec<String> {
    vec![
        r.kind.to_string(),
        r.title.clone(),
        r.author.to_string(),
        r.album.clone(),
        r.album_ordinal.to_string(),
        r.count.to_string(),
        f(r.pc1),
        f(r.pc2),
    ]
}

const SCATTER_HEADER: [&str; 8] = ["kind", "title", "author", "album", "album_ordinal", "count", "pc1", "pc2"];

fn song_rows(emb: &Embeddings, keep: impl Fn(&SongMeta) -> bool) -> Vec<ScatterRow> {
    (0..emb.n())
        .filter(|&i| keep(&emb.rows[i]))
        .map(|i| {
            let m = &emb.rows[i];
            ScatterRow {
                kind: "song",
                title: m.title.clone(),
                author: m.author,
                album: m.album.clone(),
                album_ordinal: m.album_ordinal,
                count: 1,
                pc1: emb.scores[(i, 0)],
                pc2: emb.scores[(i, 1)],
            }
        })
        .collect()
}

fn by_author_series(rows: &[ScatterRow], kind: &str, style: Style, radius: f64) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for a in Author::ALL {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kind == kind && r.author == a)
            .map(|r| (r.pc1, r.pc2))
            .collect();
        if !pts.is_empty() {
            let name = if kind == "song" { a.to_string() } else { format!("{a} {kind}") };
            series.push(Series::new(name, pts, style).with_radius(radius));
        }
    }
    series
}

/// All songs in the first two components with the album centroids of the
/// selected authors.
fn scatter(ctx: &Context) -> Result<Figure, CliError> {
    need_two_components(&ctx.emb, "scatter")?;
    let mut rows = song_rows(&ctx.emb, |_| true);
    for c in analysis::centroids(&ctx.emb, filtered_key(&ctx.authors))? {
        rows.push(ScatterRow {
            kind: "centroid",
            title: String::new(),
            author: c.key.author,
            album: c.key.album,
            album_ordinal: c.key.album_ordinal,
            count: c.count,
            pc1: c.mean[0],
            pc2: c.mean[1],
        });
    }
    let mut series = by_author_series(&rows, "song", Style::Points, 2.5);
    series.extend(by_author_series(&rows, "centroid", Style::Points, 6.0));
    let svg = render_chart(&Chart {
        title: "Songs and album centroids".into(),
        x_label: "PC1".into(),
        y_label: "PC2".into(),
        series,
    });
    figure(&rows, &SCATTER_HEADER, scatter_record, svg)
}

#[derive(Serialize)]
struct CentroidRow {
    author: Author,
    album_ordinal: u32,
    album: String,
    count: usize,
    pc1: f64,
    pc2: f64,
}

/// Album centroid trajectories of the selected authors.
fn centroid_paths(ctx: &Context) -> Result<Figure, CliError> {
    need_two_components(&ctx.emb, "centroids")?;
    let mut rows: Vec<CentroidRow> = analysis::centroids(&ctx.emb, filtered_key(&ctx.authors))?
        .into_iter()
        .map(|c| CentroidRow {
            author: c.key.author,
            album_ordinal: c.key.album_ordinal,
            album: c.key.album,
            count: c.count,
            pc1: c.mean[0],
            pc2: c.mean[1],
        })
        .collect();
    rows.sort_by(|a, b| (a.author, a.album_ordinal).cmp(&(b.author, b.album_ordinal)));
    let series = ctx
        .authors
        .iter()
        .map(|&a| {
            let pts = rows.iter().filter(|r| r.author == a).map(|r| (r.pc1, r.pc2)).collect();
            Series::new(a.to_string(), pts, Style::LinePoints)
        })
        .collect();
    let svg = render_chart(&Chart {
        title: "Album centroid trajectories".into(),
        x_label: "PC1".into(),
        y_label: "PC2".into(),
        series,
    });
    figure(
        &rows,
        &["author", "album_ordinal", "album", "count", "pc1", "pc2"],
        |r| {
            vec![
                r.author.to_string(),
                r.album_ordinal.to_string(),
                r.album.clone(),
                r.count.to_string(),
                f(r.pc1),
                f(r.pc2),
            ]
        },
        svg,
    )
}

/// Songs of the selected authors only.
fn author_scatter(ctx: &Context) -> Result<Figure, CliError> {
    need_two_components(&ctx.emb, "author-scatter")?;
    let rows = song_rows(&ctx.emb, |m| ctx.authors.contains(&m.author));
    let svg = render_chart(&Chart {
        title: "Songs by author".into(),
        x_label: "PC1".into(),
        y_label: "PC2".into(),
        series: by_author_series(&rows, "song", Style::Points, 3.0),
    });
    figure(&rows, &SCATTER_HEADER, scatter_record, svg)
}

#[derive(Serialize)]
struct DistanceRow {
    album_ordinal: u32,
    album: String,
    distance: f64,
}

/// Per-album distance between the centroids of the first two authors.
fn centroid_distance(ctx: &Context) -> Result<Figure, CliError> {
    if ctx.authors.len() < 2 {
        return Err(CliError::Usage("figure centroid-distance needs two --authors".into()));
    }
    let (a, b) = (ctx.authors[0], ctx.authors[1]);
    let res = analysis::centroid_distance_series(&ctx.emb, a, b)?;
    for album in &res.skipped {
        eprintln!("notice: album {album:?} skipped: not both {a} and {b} present");
    }
    let rows: Vec<DistanceRow> = res
        .series
        .points
        .into_iter()
        .map(|p| DistanceRow {
            album_ordinal: p.album_ordinal,
            album: p.album,
            distance: p.value,
        })
        .collect();
    let pts = rows.iter().map(|r| (r.album_ordinal as f64, r.distance)).collect();
    let svg = render_chart(&Chart {
        title: format!("Distance between {a} and {b} album centroids"),
        x_label: "album ordinal".into(),
        y_label: "Euclidean distance".into(),
        series: vec![Series::new(format!("{a} vs {b}"), pts, Style::LinePoints)],
    });
    figure(
        &rows,
        &["album_ordinal", "album", "distance"],
        |r| vec![r.album_ordinal.to_string(), r.album.clone(), f(r.distance)],
        svg,
    )
}

#[derive(Serialize)]
struct DispersionRow {
    author: Author,
    album_ordinal: u32,
    album: String,
    dispersion: f64,
}

/// Root mean squared distance to the album centroid, per author and album.
fn dispersion(ctx: &Context) -> Result<Figure, CliError> {
    let by_author = analysis::within_group_dispersion(&ctx.emb, filtered_key(&ctx.authors))?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (author, s) in &by_author {
        series.push(Series::new(
            author.to_string(),
            s.points.iter().map(|p| (p.album_ordinal as f64, p.value)).collect(),
            Style::LinePoints,
        ));
        rows.extend(s.points.iter().map(|p| DispersionRow {
            author: *author,
            album_ordinal: p.album_ordinal,
            album: p.album.clone(),
            dispersion: p.value,
        }));
    }
    let svg = render_chart(&Chart {
        title: "Within-album dispersion".into(),
        x_label: "album ordinal".into(),
        y_label: "root mean squared distance to centroid".into(),
        series,
    });
    figure(
        &rows,
        &["author", "album_ordinal", "album", "dispersion"],
        |r| vec![r.author.to_string(), r.album_ordinal.to_string(), r.album.clone(), f(r.dispersion)],
        svg,
    )
}

#[derive(Serialize)]
struct SubjectRow {
    title: String,
    album_ordinal: u32,
    album: String,
    reference_author: Author,
    distance: Option<f64>,
    note: String,
}

/// Distance from each of the subject's songs to every selected author's
/// centroid on the same album.
fn subject_distances(ctx: &Context) -> Result<Figure, CliError> {
    let songs = ctx.emb.indices_where(|m| m.author == ctx.subject);
    if songs.is_empty() {
        return Err(CliError::Compute(format!("--subject {}: the filter selects no songs", ctx.subject)));
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &reference in ctx.authors.iter().filter(|&&a| a != ctx.subject) {
        let dists = analysis::song_to_centroid_distances(&ctx.emb, &songs, reference)?;
        series.push(Series::new(
            format!("to {reference}"),
            dists
                .iter()
                .filter_map(|d| d.distance.as_ref().ok().map(|v| (d.album_ordinal as f64, *v)))
                .collect(),
            Style::Points,
        ));
        rows.extend(dists.into_iter().map(|d| SubjectRow {
            title: d.title,
            album_ordinal: d.album_ordinal,
            album: d.album,
            reference_author: d.reference_author,
            note: d.distance.as_ref().err().cloned().unwrap_or_default(),
            distance: d.distance.ok(),
        }));
    }
    let svg = render_chart(&Chart {
        title: format!("{} songs: distance to album centroids", ctx.subject),
        x_label: "album ordinal".into(),
        y_label: "Euclidean distance".into(),
        series,
    });
    figure(
        &rows,
        &["title", "album_ordinal", "album", "reference_author", "distance", "note"],
        |r| {
            vec![
                r.title.clone(),
                r.album_ordinal.to_string(),
                r.album.clone(),
                r.reference_author.to_string(),
                r.distance.map(f).unwrap_or_default(),
                r.note.clone(),
            ]
        },
        svg,
    )
}

#[derive(Serialize)]
struct FeatureRow {
    feature: String,
    column: usize,
    category: String,
    frequency: usize,
}

fn outlier_rows(ctx: &Context) -> Result<Vec<usize>, CliError> {
    if let Some(path) = &ctx.args.outliers {
        let text = std::io::read_to_string(open(path)?).map_err(|e| CliError::input(path, e))?;
        let report: OutlierReport = serde_json::from_str(&text).map_err(|e| CliError::input(path, e))?;
        let rows = report.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= ctx.emb.n()) {
            return Err(CliError::input(path, format!("row {bad} is beyond the embeddings")));
        }
        return Ok(rows);
    }
    let rows = ctx.emb.indices_where(|m| ctx.authors.contains(&m.author));
    let subset = ctx.emb.select_rows(&rows);
    let config = OgkConfig::default();
    let rc = robust::ogk_estimate(&subset.scores, &config)?;
    let report = robust::flag_outliers(&rc, &config, None)?;
    Ok(report.rows().into_iter().map(|r| rows[r]).collect())
}

/// How often each feature is among the largest deviance contributions of
/// the outlying songs.
fn outlier_features(ctx: &Context) -> Result<Figure, CliError> {
    let model_path = ctx
        .args
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("figure outlier-features needs --model".into()))?;
    let text = std::io::read_to_string(open(model_path)?).map_err(|e| CliError::input(model_path, e))?;
    let model = LpcaModel::from_json(&text).map_err(|e| CliError::input(model_path, e))?;
    let x = ctx.corpus.matrix();
    let residuals = analysis::deviance_residual_matrix(&model, &x)?;
    let outliers = outlier_rows(ctx)?;
    let rows: Vec<FeatureRow> = if outliers.is_empty() {
        eprintln!("notice: no outliers flagged; outlier-features is empty");
        Vec::new()
    } else {
        analysis::top_residual_features(&residuals, &outliers, ctx.corpus.schema(), ctx.args.top)?
            .frequencies
            .into_iter()
            .map(|fr| FeatureRow {
                feature: fr.name,
                column: fr.column,
                category: fr.category.as_str().to_string(),
                frequency: fr.frequency,
            })
            .collect()
    };
    let bars: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.frequency > 0)
        .take(20)
        .map(|r| (r.feature.clone(), r.frequency as f64))
        .collect();
    let svg = render_bars(
        &format!("Features among the top {} residuals of {} outliers", ctx.args.top, outliers.len()),
        "number of outliers",
        &bars,
    );
    figure(
        &rows,
        &["feature", "column", "category", "frequency"],
        |r| vec![r.feature.clone(), r.column.to_string(), r.category.clone(), r.frequency.to_string()],
        svg,
    )
}
