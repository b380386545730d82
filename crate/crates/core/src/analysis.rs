//! Centroid, dispersion and residual analytics on embeddings.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{Author, BinaryMatrix, FeatureCategory, FeatureSchema, SongMeta};
use crate::error::{Error, Result};
use crate::lpca::{deviance_term, reconstruct, Embeddings, LpcaModel};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub album_ordinal: u32,
    pub author: Author,
    pub album: String,
}

/// Author × album grouping; songs by [`Author::Other`] are left out.
pub fn author_album_key(meta: &SongMeta) -> Option<GroupKey> {
    (meta.author != Author::Other).then(|| GroupKey {
        album_ordinal: meta.album_ordinal,
        author: meta.author,
        album: meta.album.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCentroid {
    pub key: GroupKey,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Groups rows with `group_by` (rows mapped to `None` are skipped) and
/// returns one centroid per group ordered by (album ordinal, author, album).
/// Members are summed in a canonical order so the result does not depend on
/// the order of the input rows.
pub fn centroids<F>(emb: &Embeddings, group_by: F) -> Result<Vec<GroupCentroid>>
where
    F: Fn(&SongMeta) -> Option<GroupKey>,
{
    if emb.n() == 0 {
        return Err(Error::Empty("no embedding rows".into()));
    }
    Ok(grouped_rows(emb, group_by)
        .into_iter()
        .map(|(key, members)| GroupCentroid {
            mean: mean_of(&members),
            count: members.len(),
            key,
        })
        .collect())
}

fn grouped_rows<F>(emb: &Embeddings, group_by: F) -> BTreeMap<GroupKey, Vec<Vec<f64>>>
where
    F: Fn(&SongMeta) -> Option<GroupKey>,
{
    let mut groups: BTreeMap<GroupKey, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, meta) in emb.rows.iter().enumerate() {
        if let Some(key) = group_by(meta) {
            groups.entry(key).or_default().push(emb.row(i));
        }
    }
    for members in groups.values_mut() {
        members.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
    groups
}

fn mean_of(members: &[Vec<f64>]) -> Vec<f64> {
    let k = members[0].len();
    let mut mean = vec![0.0; k];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    crate::linalg::squared_distance(a, b).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub album_ordinal: u32,
    pub album: String,
    pub value: f64,
}

/// Album-indexed series with strictly increasing ordinals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSeries {
    pub points: Vec<SeriesPoint>,
}

impl DistanceSeries {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistances {
    pub series: DistanceSeries,
    /// Albums skipped because one of the authors has no songs on them.
    pub skipped: Vec<String>,
}

/// Per album, the Euclidean distance between the centroid of `author_a`'s
/// songs and the centroid of `author_b`'s songs, over all components.
pub fn centroid_distance_series(emb: &Embeddings, author_a: Author, author_b: Author) -> Result<CentroidDistances> {
    let cents = centroids(emb, author_album_key)?;
    let mut by_album: BTreeMap<(u32, String), HashMap<Author, &GroupCentroid>> = BTreeMap::new();
    for c in &cents {
        by_album
            .entry((c.key.album_ordinal, c.key.album.clone()))
            .or_default()
            .insert(c.key.author, c);
    }
    let mut series = DistanceSeries::default();
    let mut skipped = Vec::new();
    for ((ordinal, album), authors) in by_album {
        match (authors.get(&author_a), authors.get(&author_b)) {
            (Some(a), Some(b)) => series.points.push(SeriesPoint {
                album_ordinal: ordinal,
                album,
                value: euclidean(&a.mean, &b.mean),
            }),
            _ => skipped.push(album),
        }
    }
    if series.points.is_empty() {
        return Err(Error::NoCommonAlbums {
            a: author_a.to_string(),
            b: author_b.to_string(),
        });
    }
    Ok(CentroidDistances { series, skipped })
}

/// Square root of the mean squared distance of each group's members to the
/// group centroid, as one album series per author.
pub fn within_group_dispersion<F>(emb: &Embeddings, group_by: F) -> Result<BTreeMap<Author, DistanceSeries>>
where
    F: Fn(&SongMeta) -> Option<GroupKey>,
{
    if emb.n() == 0 {
        return Err(Error::Empty("no embedding rows".into()));
    }
    let mut out: BTreeMap<Author, DistanceSeries> = BTreeMap::new();
    for (key, members) in grouped_rows(emb, group_by) {
        let centre = mean_of(&members);
        let mean_sq = members
            .iter()
            .map(|m| crate::linalg::squared_distance(m, &centre))
            .sum::<f64>()
            / members.len() as f64;
        out.entry(key.author).or_default().points.push(SeriesPoint {
            album_ordinal: key.album_ordinal,
            album: key.album,
            value: mean_sq.sqrt(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongDistance {
    pub row: usize,
    pub title: String,
    pub album: String,
    pub album_ordinal: u32,
    pub reference_author: Author,
    /// `Err` when the reference author has no centroid on the song's album.
    pub distance: std::result::Result<f64, String>,
}

/// Distance from each listed song to `reference_author`'s centroid on the
/// same album.
pub fn song_to_centroid_distances(emb: &Embeddings, songs: &[usize], reference_author: Author) -> Result<Vec<SongDistance>> {
    let cents = centroids(emb, author_album_key)?;
    let lookup: HashMap<(u32, &str), &GroupCentroid> = cents
        .iter()
        .filter(|c| c.key.author == reference_author)
        .map(|c| ((c.key.album_ordinal, c.key.album.as_str()), c))
        .collect();
    songs
        .iter()
        .map(|&row| {
            let meta = emb
                .rows
                .get(row)
                .ok_or_else(|| Error::InvalidArgument(format!("row {row} out of range")))?;
            let distance = match lookup.get(&(meta.album_ordinal, meta.album.as_str())) {
                Some(c) => Ok(euclidean(&emb.row(row), &c.mean)),
                None => Err(format!("no {reference_author} centroid for album \"{}\"", meta.album)),
            };
            Ok(SongDistance {
                row,
                title: meta.title.clone(),
                album: meta.album.clone(),
                album_ordinal: meta.album_ordinal,
                reference_author,
                distance,
            })
        })
        .collect()
}

/// Entrywise deviance contributions `−2(x log p + (1 − x) log(1 − p))` of
/// the model's fitted probabilities.
pub fn deviance_residual_matrix(model: &LpcaModel, x: &BinaryMatrix) -> Result<DMatrix<f64>> {
    let (theta, _) = reconstruct(model, x)?;
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        deviance_term(theta[(i, j)], x.get(i, j))
    }))
}

/// Row-major sum, matching the summation order of the deviance.
pub fn residual_total(residuals: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..residuals.nrows() {
        for j in 0..residuals.ncols() {
            total += residuals[(i, j)];
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierContributions {
    pub row: usize,
    pub contributions: Vec<f64>,
    /// Columns of the `t` largest contributions, largest first.
    pub top: Vec<usize>,
}

impl OutlierContributions {
    pub fn total(&self) -> f64 {
        self.contributions.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrequency {
    pub column: usize,
    pub name: String,
    pub category: FeatureCategory,
    pub frequency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub t: usize,
    pub outliers: Vec<OutlierContributions>,
    /// Every feature, by frequency descending then column ascending.
    pub frequencies: Vec<FeatureFrequency>,
}

/// Counts, for every feature, how many outlier rows have it among their `t`
/// largest contributions (ties broken by lower column index).
pub fn top_residual_features(
    residuals: &DMatrix<f64>,
    outlier_rows: &[usize],
    schema: &FeatureSchema,
    t: usize,
) -> Result<ResidualReport> {
    let d = residuals.ncols();
    if schema.len() != d {
        return Err(Error::Shape(format!("schema has {} features, residuals {d}", schema.len())));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    if outlier_rows.is_empty() {
        return Err(Error::Empty("no outlier rows".into()));
    }
    let mut counts = vec![0usize; d];
    let mut outliers = Vec::with_capacity(outlier_rows.len());
    for &row in outlier_rows {
        if row >= residuals.nrows() {
            return Err(Error::InvalidArgument(format!("row {row} out of range")));
        }
        let contributions: Vec<f64> = residuals.row(row).iter().copied().collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| contributions[b].total_cmp(&contributions[a]).then(a.cmp(&b)));
        order.truncate(t.min(d));
        for &c in &order {
            counts[c] += 1;
        }
        outliers.push(OutlierContributions {
            row,
            contributions,
            top: order,
        });
    }
    let mut frequencies: Vec<FeatureFrequency> = counts
        .into_iter()
        .enumerate()
        .map(|(column, frequency)| FeatureFrequency {
            column,
            name: schema.name(column).to_string(),
            category: schema.features()[column].category,
            frequency,
        })
        .collect();
    frequencies.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.column.cmp(&b.column)));
    Ok(ResidualReport {
        t,
        outliers,
        frequencies,
    })
}
