//! Song-by-feature data model.
//!
//! A [`Corpus`] pairs an ordered [`FeatureSchema`] with one [`SongRecord`] per
//! row. Feature values are strictly binary; [`BinaryMatrix`] is the dense
//! row-major view consumed by the numerical modules.
//!
//! CSV layout: `title, author, album, [album_ordinal], feature_1, …, feature_d`
//! with every feature cell exactly `0` or `1`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    Pitch,
    Chord,
    PitchTransition,
    HarmonicTransition,
    Contour,
    /// Named column whose category is not known.
    Opaque,
}

impl FeatureCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Pitch => "pitch",
            FeatureCategory::Chord => "chord",
            FeatureCategory::PitchTransition => "pitch_transition",
            FeatureCategory::HarmonicTransition => "harmonic_transition",
            FeatureCategory::Contour => "contour",
            FeatureCategory::Opaque => "opaque",
        }
    }

    /// Best-effort category from a column name, used when the schema is taken
    /// from the CSV header.
    pub fn infer(name: &str) -> Self {
        let lower = name.to_ascii_lowercase();
        if lower.ends_with("contour") {
            FeatureCategory::Contour
        } else if lower.starts_with("harmonic transition") || lower.starts_with("chord transition") {
            FeatureCategory::HarmonicTransition
        } else if lower.starts_with("pitch transition") || lower.starts_with("note transition") {
            FeatureCategory::PitchTransition
        } else if lower.ends_with("chord") {
            FeatureCategory::Chord
        } else if lower.starts_with("pitch") {
            FeatureCategory::Pitch
        } else {
            FeatureCategory::Opaque
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub category: FeatureCategory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Feature>", into = "Vec<Feature>")]
pub struct FeatureSchema {
    features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("feature schema has no features".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Format(format!("duplicate feature name \"{}\"", f.name)));
            }
        }
        Ok(Self { features })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| Feature {
                    name: n.as_ref().to_string(),
                    category: FeatureCategory::infer(n.as_ref()),
                })
                .collect(),
        )
    }

    /// 137 columns: 12 pitch classes, 27 melodic contours (all up/down/same
    /// triples) and 98 opaque columns standing in for the remaining harmonic
    /// and transition features.
    pub fn beatles_shaped() -> Self {
        const PITCHES: [&str; 12] = [
            "1", "b2", "2", "b3", "3", "4", "#4", "5", "b6", "6", "b7", "7",
        ];
        const DIRS: [char; 3] = ['U', 'D', 'S'];
        let mut features = Vec::with_capacity(137);
        for p in PITCHES {
            features.push(Feature {
                name: format!("Pitch {p}"),
                category: FeatureCategory::Pitch,
            });
        }
        for a in DIRS {
            for b in DIRS {
                for c in DIRS {
                    features.push(Feature {
                        name: format!("({a}, {b}, {c}) Contour"),
                        category: FeatureCategory::Contour,
                    });
                }
            }
        }
        for i in 1..=98 {
            features.push(Feature {
                name: format!("Feature {i:03}"),
                category: FeatureCategory::Opaque,
            });
        }
        Self { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn name(&self, column: usize) -> &str {
        &self.features[column].name
    }

    pub fn count(&self, category: FeatureCategory) -> usize {
        self.features.iter().filter(|f| f.category == category).count()
    }

    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        Self::new(columns.iter().map(|&c| self.features[c].clone()).collect())
    }
}

impl TryFrom<Vec<Feature>> for FeatureSchema {
    type Error = Error;
    fn try_from(v: Vec<Feature>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FeatureSchema> for Vec<Feature> {
    fn from(s: FeatureSchema) -> Self {
        s.features
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Author {
    Lennon,
    McCartney,
    Harrison,
    /// Jointly written, unknown or disputed.
    Other,
}

impl Author {
    pub const ALL: [Author; 4] = [Author::Lennon, Author::McCartney, Author::Harrison, Author::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Author::Lennon => "Lennon",
            Author::McCartney => "McCartney",
            Author::Harrison => "Harrison",
            Author::Other => "Other",
        }
    }

    /// Unknown strings map to [`Author::Other`].
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "lennon" => Author::Lennon,
            "mccartney" => Author::McCartney,
            "harrison" => Author::Harrison,
            _ => Author::Other,
        }
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Author {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Author::parse_lenient(s))
    }
}

/// Per-row metadata carried alongside features and embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SongMeta {
    pub title: String,
    pub author: Author,
    pub album: String,
    pub album_ordinal: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SongRecord {
    #[serde(flatten)]
    pub meta: SongMeta,
    pub features: Vec<u8>,
}

/// Dense row-major matrix whose entries are all 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "entry ({}, {}) = {} is not binary",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Converts a real matrix whose entries are exactly 0.0 or 1.0.
    pub fn from_real(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v == 0.0 {
                    data.push(0);
                } else if v == 1.0 {
                    data.push(1);
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) = {v} is not binary"
                    )));
                }
            }
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_real(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| f64::from(self.get(i, j)))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            data.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// Bitwise complement `1 − X`.
    pub fn complement(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0usize; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += usize::from(v);
            }
        }
        sums.into_iter()
            .map(|s| s as f64 / self.rows.max(1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CorpusRepr")]
pub struct Corpus {
    schema: FeatureSchema,
    songs: Vec<SongRecord>,
}

#[derive(Deserialize)]
struct CorpusRepr {
    schema: FeatureSchema,
    songs: Vec<SongRecord>,
}

impl TryFrom<CorpusRepr> for Corpus {
    type Error = Error;
    fn try_from(r: CorpusRepr) -> Result<Self> {
        Corpus::new(r.schema, r.songs)
    }
}

impl Corpus {
    /// Validates feature lengths, binary values and album ordinal consistency.
    /// An empty song list is allowed; numerical operations reject it themselves.
    pub fn new(schema: FeatureSchema, songs: Vec<SongRecord>) -> Result<Self> {
        let d = schema.len();
        let mut ordinals: HashMap<&str, u32> = HashMap::new();
        for (i, s) in songs.iter().enumerate() {
            if s.features.len() != d {
                return Err(Error::Shape(format!(
                    "song {} (\"{}\") has {} features, schema has {d}",
                    i + 1,
                    s.meta.title,
                    s.features.len()
                )));
            }
            if let Some(j) = s.features.iter().position(|&v| v > 1) {
                return Err(Error::Parse {
                    row: i + 1,
                    column: schema.name(j).to_string(),
                    message: format!("feature value {} is not 0 or 1", s.features[j]),
                });
            }
            match ordinals.get(s.meta.album.as_str()) {
                Some(&o) if o != s.meta.album_ordinal => {
                    return Err(Error::Format(format!(
                        "album \"{}\" has inconsistent ordinals {o} and {}",
                        s.meta.album, s.meta.album_ordinal
                    )))
                }
                Some(_) => {}
                None => {
                    ordinals.insert(&s.meta.album, s.meta.album_ordinal);
                }
            }
        }
        Ok(Self { schema, songs })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn songs(&self) -> &[SongRecord] {
        &self.songs
    }

    pub fn n(&self) -> usize {
        self.songs.len()
    }

    pub fn d(&self) -> usize {
        self.schema.len()
    }

    pub fn metadata(&self) -> Vec<SongMeta> {
        self.songs.iter().map(|s| s.meta.clone()).collect()
    }

    pub fn matrix(&self) -> BinaryMatrix {
        let mut data = Vec::with_capacity(self.n() * self.d());
        for s in &self.songs {
            data.extend_from_slice(&s.features);
        }
        BinaryMatrix {
            rows: self.n(),
            cols: self.d(),
            data,
        }
    }

    /// Keeps rows matching `pred`, in order. The result may be empty.
    pub fn subset_rows<F: Fn(&SongRecord) -> bool>(&self, pred: F) -> Corpus {
        Corpus {
            schema: self.schema.clone(),
            songs: self.songs.iter().filter(|s| pred(s)).cloned().collect(),
        }
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<Corpus> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.d()) {
            return Err(Error::InvalidArgument(format!("column {c} out of range")));
        }
        let schema = self.schema.select(columns)?;
        let songs = self
            .songs
            .iter()
            .map(|s| SongRecord {
                meta: s.meta.clone(),
                features: columns.iter().map(|&c| s.features[c]).collect(),
            })
            .collect();
        Ok(Corpus { schema, songs })
    }

    /// Writes the CSV layout, always including the `album_ordinal` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["title", "author", "album", "album_ordinal"];
        header.extend(self.schema.features.iter().map(|f| f.name.as_str()));
        w.write_record(&header)?;
        for s in &self.songs {
            let mut rec = vec![
                s.meta.title.clone(),
                s.meta.author.to_string(),
                s.meta.album.clone(),
                s.meta.album_ordinal.to_string(),
            ];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug)]
pub enum SchemaMode {
    /// Feature names from the header, categories inferred from the names.
    HeaderDerived,
    /// Header feature names must equal this schema's names, in order.
    Explicit(FeatureSchema),
}

#[derive(Clone, Debug)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

/// Parses a corpus CSV. Albums get ordinals by first appearance unless an
/// `album_ordinal` column is present.
pub fn parse_corpus<R: Read>(source: R, mode: SchemaMode) -> Result<ParsedCorpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    let fixed = ["title", "author", "album"];
    for (i, want) in fixed.iter().enumerate() {
        match header.get(i) {
            Some(h) if h.trim().eq_ignore_ascii_case(want) => {}
            other => {
                return Err(Error::Format(format!(
                    "header column {} must be \"{want}\", found {:?}",
                    i + 1,
                    other.unwrap_or("<missing>")
                )))
            }
        }
    }
    let has_ordinal = header
        .get(3)
        .is_some_and(|h| h.trim().eq_ignore_ascii_case("album_ordinal"));
    let first_feature = if has_ordinal { 4 } else { 3 };
    let names: Vec<&str> = header.iter().skip(first_feature).collect();
    if names.is_empty() {
        return Err(Error::Format("header has no feature columns".into()));
    }
    let schema = match mode {
        SchemaMode::HeaderDerived => FeatureSchema::from_names(&names)?,
        SchemaMode::Explicit(schema) => {
            let matches = schema.len() == names.len()
                && schema.features.iter().zip(&names).all(|(f, n)| f.name == *n);
            if !matches {
                return Err(Error::Format(
                    "header feature names do not match the explicit schema".into(),
                ));
            }
            schema
        }
    };
    let width = header.len();
    let mut songs = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_titles: HashSet<String> = HashSet::new();
    let mut album_ordinals: HashMap<String, u32> = HashMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let title = record[0].to_string();
        if !seen_titles.insert(title.clone()) {
            warnings.push(format!("row {row}: duplicate title \"{title}\""));
        }
        let author = Author::parse_lenient(&record[1]);
        let album = record[2].to_string();
        let album_ordinal = if has_ordinal {
            record[3].trim().parse::<u32>().map_err(|_| Error::Parse {
                row,
                column: header[3].to_string(),
                message: format!("\"{}\" is not a non-negative integer", &record[3]),
            })?
        } else {
            let next = album_ordinals.len() as u32;
            *album_ordinals.entry(album.clone()).or_insert(next)
        };
        let mut features = Vec::with_capacity(names.len());
        for (j, cell) in record.iter().skip(first_feature).enumerate() {
            features.push(match cell.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        row,
                        column: names[j].to_string(),
                        message: format!("\"{other}\" is not 0 or 1"),
                    })
                }
            });
        }
        songs.push(SongRecord {
            meta: SongMeta {
                title,
                author,
                album,
                album_ordinal,
            },
            features,
        });
    }
    if songs.is_empty() {
        return Err(Error::Empty("corpus file has no data rows".into()));
    }
    Ok(ParsedCorpus {
        corpus: Corpus::new(schema, songs)?,
        warnings,
    })
}

/// Parameters of the low-rank generative model
/// `P(x_ij = 1) = σ(μ_j + (A·Bᵀ)_ij)`.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub mu: Vec<f64>,
    /// n × k_true row factors.
    pub a: DMatrix<f64>,
    /// d × k_true column loadings.
    pub b: DMatrix<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Pure main-effect model (k_true = 0).
    pub fn independent(n: usize, mu: Vec<f64>, seed: u64) -> Self {
        let d = mu.len();
        Self {
            n,
            d,
            mu,
            a: DMatrix::zeros(n, 0),
            b: DMatrix::zeros(d, 0),
            seed,
        }
    }

    /// Factors `A`, `B` with i.i.d. N(0, scale²) entries drawn from `seed`.
    pub fn random_low_rank(n: usize, d: usize, k_true: usize, scale: f64, mu: f64, seed: u64) -> Self {
        let mut rng = exec::rng(exec::derive_seed(seed, 0xA));
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let a = DMatrix::from_fn(n, k_true, |_, _| scale * normal());
        let b = DMatrix::from_fn(d, k_true, |_, _| scale * normal());
        Self {
            n,
            d,
            mu: vec![mu; d],
            a,
            b,
            seed,
        }
    }

    pub fn k_true(&self) -> usize {
        self.a.ncols()
    }

    /// Natural parameters `1μᵀ + ABᵀ`.
    pub fn natural_params(&self) -> DMatrix<f64> {
        let mut theta = if self.k_true() == 0 {
            DMatrix::zeros(self.n, self.d)
        } else {
            &self.a * self.b.transpose()
        };
        for j in 0..self.d {
            for i in 0..self.n {
                theta[(i, j)] += self.mu[j];
            }
        }
        theta
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidArgument("n and d must be positive".into()));
        }
        if self.mu.len() != self.d
            || self.a.nrows() != self.n
            || self.b.nrows() != self.d
            || self.a.ncols() != self.b.ncols()
        {
            return Err(Error::Shape(format!(
                "mu {} / A {}x{} / B {}x{} inconsistent with n={} d={}",
                self.mu.len(),
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols(),
                self.n,
                self.d
            )));
        }
        let theta = self.natural_params();
        if let Some(bad) = theta.iter().find(|&&t| {
            let p = sigmoid(t);
            !(p > 0.0 && p < 1.0)
        }) {
            return Err(Error::InvalidArgument(format!(
                "natural parameter {bad} gives a probability outside (0, 1)"
            )));
        }
        Ok(())
    }
}

/// How synthetic rows receive author and album labels.
#[derive(Clone, Debug)]
pub enum AuthorRule {
    /// Even rows go to `authors[0]`, odd rows to `authors[1]`; albums are
    /// consecutive blocks of `album_size` rows named "Album 1", "Album 2", ….
    AlternatingAlbums { authors: [Author; 2], album_size: usize },
    /// One metadata entry per row.
    Explicit(Vec<SongMeta>),
}

/// Draws `X_ij ~ Bernoulli(σ(μ_j + (ABᵀ)_ij))` row-major from the seeded
/// generator named in [`exec::PRNG_ALGORITHM`].
pub fn synthesize_corpus(spec: &SyntheticSpec, rule: &AuthorRule) -> Result<Corpus> {
    spec.validate()?;
    let metas: Vec<SongMeta> = match rule {
        AuthorRule::AlternatingAlbums { authors, album_size } => {
            if *album_size == 0 {
                return Err(Error::InvalidArgument("album_size must be positive".into()));
            }
            (0..spec.n)
                .map(|i| {
                    let album = i / album_size;
                    SongMeta {
                        title: format!("Song {:03}", i + 1),
                        author: authors[i % 2],
                        album: format!("Album {}", album + 1),
                        album_ordinal: album as u32,
                    }
                })
                .collect()
        }
        AuthorRule::Explicit(metas) => {
            if metas.len() != spec.n {
                return Err(Error::Shape(format!(
                    "{} metadata rows for n={}",
                    metas.len(),
                    spec.n
                )));
            }
            metas.clone()
        }
    };
    let theta = spec.natural_params();
    let mut rng = exec::rng(spec.seed);
    let songs = metas
        .into_iter()
        .enumerate()
        .map(|(i, meta)| {
            let features = (0..spec.d)
                .map(|j| u8::from(rng.random::<f64>() < sigmoid(theta[(i, j)])))
                .collect();
            SongRecord { meta, features }
        })
        .collect();
    let schema = if spec.d == 137 {
        FeatureSchema::beatles_shaped()
    } else {
        FeatureSchema::new(
            (1..=spec.d)
                .map(|j| Feature {
                    name: format!("Feature {j:03}"),
                    category: FeatureCategory::Opaque,
                })
                .collect(),
        )?
    };
    Corpus::new(schema, songs)
}

pub const BEATLES_ALBUMS: [&str; 7] = [
    "Please Please Me",
    "With the Beatles",
    "A Hard Day's Night",
    "Beatles for Sale",
    "Help!",
    "Rubber Soul",
    "Revolver",
];

/// Metadata and latent factors for a 90 × 137 synthetic corpus with the
/// shape of the 1962–66 catalogue: seven albums, five Lennon and five
/// McCartney songs per album, eight Harrison songs and twelve
/// jointly-written/disputed songs. The two songwriters' latent means start
/// far apart and converge album by album while within-album spread grows.
pub fn beatles_shaped_spec(seed: u64) -> (SyntheticSpec, Vec<SongMeta>) {
    const K_TRUE: usize = 4;
    const D: usize = 137;
    const HARRISON_ALBUMS: [usize; 8] = [1, 3, 4, 4, 5, 5, 6, 6];
    const OTHER_ALBUMS: [usize; 12] = [0, 0, 1, 1, 2, 2, 3, 3, 4, 5, 5, 6];

    let mut rng = exec::rng(exec::derive_seed(seed, 0xB1));
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut metas = Vec::new();
    let mut rows: Vec<[f64; K_TRUE]> = Vec::new();
    let mut track = 0usize;
    for (ordinal, album) in BEATLES_ALBUMS.iter().enumerate() {
        let t = ordinal as f64 / (BEATLES_ALBUMS.len() - 1) as f64;
        let gap = 2.2 - 1.6 * t;
        let spread = 0.5 + 0.6 * t;
        let mut authors = Vec::new();
        for _ in 0..5 {
            authors.push(Author::Lennon);
            authors.push(Author::McCartney);
        }
        authors.extend(HARRISON_ALBUMS.iter().filter(|&&a| a == ordinal).map(|_| Author::Harrison));
        authors.extend(OTHER_ALBUMS.iter().filter(|&&a| a == ordinal).map(|_| Author::Other));
        for author in authors {
            track += 1;
            let (offset, wobble) = match author {
                Author::Lennon => (gap, 0.4 * (1.7 * ordinal as f64).sin()),
                Author::McCartney => (-gap, 0.15 * (1.3 * ordinal as f64).cos()),
                Author::Harrison => (0.6 * gap, 0.0),
                Author::Other => (0.0, 0.0),
            };
            let mut z = [0.0; K_TRUE];
            for v in z.iter_mut() {
                *v = spread * normal();
            }
            z[0] += offset;
            z[1] += wobble;
            rows.push(z);
            metas.push(SongMeta {
                title: format!("Track {track:02}"),
                author,
                album: (*album).to_string(),
                album_ordinal: ordinal as u32,
            });
        }
    }
    let n = rows.len();
    let a = DMatrix::from_fn(n, K_TRUE, |i, c| rows[i][c]);
    let b = DMatrix::from_fn(D, K_TRUE, |_, _| 0.9 * normal());
    let mu = (0..D).map(|_| -0.6 + 0.8 * normal()).collect();
    let spec = SyntheticSpec {
        n,
        d: D,
        mu,
        a,
        b,
        seed,
    };
    (spec, metas)
}

/// Seed of the bundled `data/synthetic_beatles.csv`.
pub const BUNDLED_SEED: u64 = 1964;

/// The bundled 90 × 137 synthetic corpus used by the end-to-end pipeline.
pub fn beatles_shaped_synthetic(seed: u64) -> Result<Corpus> {
    let (spec, metas) = beatles_shaped_spec(seed);
    synthesize_corpus(&spec, &AuthorRule::Explicit(metas))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "title,author,album,Tonic Chord,Dominant Chord,Flat Third,\"(U, D, U) Contour\"\n\
        Love Me Do,McCartney,Please Please Me,1,0,1,0\n\
        Misery,Lennon,Please Please Me,1,1,0,0\n\
        It Won't Be Long,Lennon,With the Beatles,0,1,1,1\n";

    #[test]
    fn parses_small_file() {
        let parsed = parse_corpus(SMALL.as_bytes(), SchemaMode::HeaderDerived).unwrap();
        let c = parsed.corpus;
        assert_eq!((c.n(), c.d()), (3, 4));
        assert!(parsed.warnings.is_empty());
        assert_eq!(c.songs()[2].meta.album_ordinal, 1);
        assert_eq!(c.songs()[1].meta.author, Author::Lennon);
        assert_eq!(c.matrix().row(2), &[0, 1, 1, 1]);
        assert_eq!(c.schema().features()[3].category, FeatureCategory::Contour);
        assert_eq!(c.schema().features()[1].category, FeatureCategory::Chord);
    }

    #[test]
    fn non_binary_cell_names_row_and_column() {
        let bad = SMALL.replace("Misery,Lennon,Please Please Me,1,1", "Misery,Lennon,Please Please Me,1,2");
        let err = parse_corpus(bad.as_bytes(), SchemaMode::HeaderDerived).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "Dominant Chord");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_an_error() {
        let bad = SMALL.replace(",1,1,1\n", ",1,1\n");
        assert!(matches!(
            parse_corpus(bad.as_bytes(), SchemaMode::HeaderDerived),
            Err(Error::Parse { row: 3, .. })
        ));
    }

    #[test]
    fn duplicate_titles_warn() {
        let dup = SMALL.replace("Misery", "Love Me Do");
        let parsed = parse_corpus(dup.as_bytes(), SchemaMode::HeaderDerived).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn unknown_author_maps_to_other() {
        let s = SMALL.replace("Misery,Lennon", "Misery,Lennon/McCartney");
        let c = parse_corpus(s.as_bytes(), SchemaMode::HeaderDerived).unwrap().corpus;
        assert_eq!(c.songs()[1].meta.author, Author::Other);
    }

    #[test]
    fn explicit_ordinals_must_be_consistent() {
        let s = "title,author,album,album_ordinal,f1\na,Lennon,X,0,1\nb,Lennon,X,3,0\n";
        assert!(matches!(
            parse_corpus(s.as_bytes(), SchemaMode::HeaderDerived),
            Err(Error::Format(_))
        ));
        let s = "title,author,album,album_ordinal,f1\na,Lennon,X,4,1\nb,Lennon,Y,2,0\n";
        let c = parse_corpus(s.as_bytes(), SchemaMode::HeaderDerived).unwrap().corpus;
        assert_eq!(c.songs()[0].meta.album_ordinal, 4);
    }

    #[test]
    fn explicit_schema_must_match_header() {
        let schema = FeatureSchema::from_names(&["a", "b", "c", "d"]).unwrap();
        assert!(parse_corpus(SMALL.as_bytes(), SchemaMode::Explicit(schema)).is_err());
        let schema = FeatureSchema::from_names(&[
            "Tonic Chord",
            "Dominant Chord",
            "Flat Third",
            "(U, D, U) Contour",
        ])
        .unwrap();
        assert!(parse_corpus(SMALL.as_bytes(), SchemaMode::Explicit(schema)).is_ok());
    }

    #[test]
    fn missing_header_is_rejected() {
        let s = "Love Me Do,McCartney,Please Please Me,1,0\n";
        assert!(matches!(
            parse_corpus(s.as_bytes(), SchemaMode::HeaderDerived),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let c = parse_corpus(SMALL.as_bytes(), SchemaMode::HeaderDerived).unwrap().corpus;
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = parse_corpus(buf.as_slice(), SchemaMode::HeaderDerived).unwrap().corpus;
        assert_eq!(back, c);
        let json = c.to_json().unwrap();
        assert!(json.contains("\"album_ordinal\""));
        assert_eq!(Corpus::from_json(&json).unwrap(), c);
    }

    #[test]
    fn beatles_schema_counts() {
        let s = FeatureSchema::beatles_shaped();
        assert_eq!(s.len(), 137);
        assert_eq!(s.count(FeatureCategory::Pitch), 12);
        assert_eq!(s.count(FeatureCategory::Contour), 27);
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(FeatureSchema::from_names(&["a", "a"]).is_err());
        assert!(FeatureSchema::new(vec![]).is_err());
    }

    #[test]
    fn binary_matrix_rejects_non_binary() {
        assert!(BinaryMatrix::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMatrix::from_rows(&[vec![0u8, 1], vec![1]]).is_err());
    }

    #[test]
    fn synthetic_fair_coin_means() {
        // Law of large numbers: sd of a column mean is 0.5/sqrt(1000) ≈ 0.016.
        let spec = SyntheticSpec::independent(1000, vec![0.0; 10], 7);
        let c = synthesize_corpus(
            &spec,
            &AuthorRule::AlternatingAlbums {
                authors: [Author::Lennon, Author::McCartney],
                album_size: 100,
            },
        )
        .unwrap();
        for m in c.matrix().column_means() {
            assert!((m - 0.5).abs() < 0.05, "column mean {m}");
        }
        assert_eq!(c.songs()[999].meta.album_ordinal, 9);
    }

    #[test]
    fn synthetic_strong_main_effect_is_all_ones() {
        let spec = SyntheticSpec::independent(200, vec![10.0; 10], 1);
        let rule = AuthorRule::AlternatingAlbums {
            authors: [Author::Lennon, Author::McCartney],
            album_size: 10,
        };
        let c = synthesize_corpus(&spec, &rule).unwrap();
        let mean: f64 = c.matrix().column_means().iter().sum::<f64>() / 10.0;
        assert!(mean > 0.99);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::random_low_rank(50, 12, 2, 1.0, 0.0, 99);
        let rule = AuthorRule::AlternatingAlbums {
            authors: [Author::Lennon, Author::McCartney],
            album_size: 5,
        };
        let a = synthesize_corpus(&spec, &rule).unwrap();
        let b = synthesize_corpus(&spec, &rule).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 100, ..spec };
        assert_ne!(synthesize_corpus(&other, &rule).unwrap(), a);
    }

    #[test]
    fn synthetic_rejects_saturated_probabilities() {
        let spec = SyntheticSpec::independent(5, vec![50.0; 3], 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn subset_rows_filters_in_order() {
        let c = beatles_shaped_synthetic(0).unwrap();
        assert_eq!((c.n(), c.d()), (90, 137));
        let lm = c.subset_rows(|s| matches!(s.meta.author, Author::Lennon | Author::McCartney));
        assert_eq!(lm.n(), 70);
        assert_eq!(c.subset_rows(|_| true), c);
        assert_eq!(c.subset_rows(|_| false).n(), 0);
        let harrison = c.subset_rows(|s| s.meta.author == Author::Harrison);
        assert_eq!(harrison.n(), 8);
    }

    #[test]
    fn subset_commutes_with_column_selection() {
        let c = beatles_shaped_synthetic(3).unwrap();
        let cols = [0, 5, 40, 136];
        let pred = |s: &SongRecord| s.meta.album_ordinal % 2 == 0;
        let a = c.subset_rows(pred).select_columns(&cols).unwrap();
        let b = c.select_columns(&cols).unwrap().subset_rows(pred);
        assert_eq!(a, b);
    }
}
