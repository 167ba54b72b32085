//! MovieLens-1M reader (`ratings.dat`, `users.dat`, `movies.dat`, all
//! `::`-delimited, `movies.dat` in Latin-1).
//!
//! Ratings of 4 or 5 become positive labels; everything else negative.
//! Features: user id, gender, age, occupation, movie id, release year and the
//! genre list (a sequence feature). Title tokens are an optional second
//! sequence feature.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::data::{CountChannel, Dataset, FeatureValue, Sample, Split};
use crate::error::{Error, Result};
use crate::schema::{FeatureClass, FeatureKind, FeatureSchema, FeatureSpec};

pub const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

const AGES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];

/// Ratings at or above this value are positives.
pub const POSITIVE_RATING: u32 = 4;

#[derive(Clone, Copy, Debug, Default)]
pub struct MovieLensOptions {
    pub titles: bool,
}

pub fn binarize(rating: u32) -> u8 {
    u8::from(rating >= POSITIVE_RATING)
}

struct User {
    gender: u32,
    age: u32,
    occupation: u32,
}

struct Movie {
    year: Option<u32>,
    genres: Vec<u32>,
    title_tokens: Vec<String>,
}

fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn corrupt(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    }
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split("::").collect();
    if f.len() != n {
        return Err(corrupt(path, line_no, format!("expected {n} `::` fields, found {}", f.len())));
    }
    Ok(f)
}

fn parse_u32(path: &Path, line_no: usize, s: &str) -> Result<u32> {
    s.trim().parse().map_err(|e| corrupt(path, line_no, format!("`{s}`: {e}")))
}

fn parse_users(path: &Path) -> Result<BTreeMap<u32, User>> {
    let text = read_latin1(path)?;
    let mut users = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = fields(path, i + 1, line, 5)?;
        let id = parse_u32(path, i + 1, f[0])?;
        let gender = match f[1] {
            "M" => 1,
            "F" => 2,
            other => return Err(corrupt(path, i + 1, format!("unknown gender `{other}`"))),
        };
        let age_code = parse_u32(path, i + 1, f[2])?;
        let age = AGES
            .iter()
            .position(|&a| a == age_code)
            .map_or(0, |p| p as u32 + 1);
        let occupation = parse_u32(path, i + 1, f[3])? + 1;
        if users.insert(id, User { gender, age, occupation }).is_some() {
            return Err(corrupt(path, i + 1, format!("user {id} listed twice")));
        }
    }
    Ok(users)
}

fn split_title(title: &str) -> (String, Option<u32>) {
    let t = title.trim();
    if t.ends_with(')') {
        if let Some(open) = t.rfind('(') {
            if let Ok(y) = t[open + 1..t.len() - 1].parse::<u32>() {
                return (t[..open].trim().to_string(), Some(y));
            }
        }
    }
    (t.to_string(), None)
}

fn tokenize(title: &str) -> Vec<String> {
    title
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn parse_movies(path: &Path) -> Result<BTreeMap<u32, Movie>> {
    let text = read_latin1(path)?;
    let mut movies = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = fields(path, i + 1, line, 3)?;
        let id = parse_u32(path, i + 1, f[0])?;
        let (name, year) = split_title(f[1]);
        let genres = f[2]
            .split('|')
            .filter(|g| !g.is_empty())
            .map(|g| GENRES.iter().position(|&k| k == g).map_or(0, |p| p as u32 + 1))
            .collect();
        let movie = Movie {
            year,
            genres,
            title_tokens: tokenize(&name),
        };
        if movies.insert(id, movie).is_some() {
            return Err(corrupt(path, i + 1, format!("movie {id} listed twice")));
        }
    }
    Ok(movies)
}

pub fn schema(dim: usize, max_user: u32, max_movie: u32, years: usize, title_vocab: Option<usize>) -> Result<FeatureSchema> {
    use FeatureClass::*;
    use FeatureKind::*;
    let mut features = vec![
        FeatureSpec::new("user_id", User, IdBased, max_user as usize + 1),
        FeatureSpec::new("gender", User, Meta, 3),
        FeatureSpec::new("age", User, Meta, AGES.len() + 1),
        FeatureSpec::new("occupation", User, Meta, 22),
        FeatureSpec::new("movie_id", Item, IdBased, max_movie as usize + 1),
        FeatureSpec::new("year", Item, Meta, years + 1),
        FeatureSpec::new("genres", Item, IdBased, GENRES.len() + 1)
            .sequence()
            .with_state_id(false),
    ];
    if let Some(v) = title_vocab {
        features.push(
            FeatureSpec::new("title", Item, IdBased, v + 1)
                .sequence()
                .with_state_id(false),
        );
    }
    FeatureSchema::new(dim, features)
}

/// Reads the three MovieLens-1M files from `dir`.
pub fn load_movielens(dir: &Path, dim: usize, opts: MovieLensOptions) -> Result<Dataset> {
    let path = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::Data {
                path: p,
                message: "MovieLens file not found".into(),
            });
        }
        Ok(p)
    };
    let (ratings_path, users_path, movies_path) = (path("ratings.dat")?, path("users.dat")?, path("movies.dat")?);
    let users = parse_users(&users_path)?;
    let movies = parse_movies(&movies_path)?;

    let years: BTreeSet<u32> = movies.values().filter_map(|m| m.year).collect();
    let year_index: BTreeMap<u32, u32> = years.iter().enumerate().map(|(i, &y)| (y, i as u32 + 1)).collect();
    let token_index: BTreeMap<String, u32> = if opts.titles {
        let vocab: BTreeSet<&String> = movies.values().flat_map(|m| &m.title_tokens).collect();
        vocab.into_iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 1)).collect()
    } else {
        BTreeMap::new()
    };

    let text = read_latin1(&ratings_path)?;
    let mut samples = Vec::with_capacity(1_000_209);
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = fields(&ratings_path, i + 1, line, 4)?;
        let uid = parse_u32(&ratings_path, i + 1, f[0])?;
        let mid = parse_u32(&ratings_path, i + 1, f[1])?;
        let rating = parse_u32(&ratings_path, i + 1, f[2])?;
        let ts: i64 = f[3]
            .trim()
            .parse()
            .map_err(|e| corrupt(&ratings_path, i + 1, format!("timestamp: {e}")))?;
        let user = users
            .get(&uid)
            .ok_or_else(|| corrupt(&ratings_path, i + 1, format!("unknown user {uid}")))?;
        let movie = movies
            .get(&mid)
            .ok_or_else(|| corrupt(&ratings_path, i + 1, format!("unknown movie {mid}")))?;
        let mut features = vec![
            FeatureValue::Id(uid),
            FeatureValue::Id(user.gender),
            FeatureValue::Id(user.age),
            FeatureValue::Id(user.occupation),
            FeatureValue::Id(mid),
            FeatureValue::Id(movie.year.and_then(|y| year_index.get(&y).copied()).unwrap_or(0)),
            FeatureValue::Seq(movie.genres.clone()),
        ];
        if opts.titles {
            features.push(FeatureValue::Seq(
                movie.title_tokens.iter().map(|t| token_index[t]).collect(),
            ));
        }
        samples.push(Sample {
            features,
            label: binarize(rating),
            user: uid,
            item: mid,
            timestamp: Some(ts),
            comment: false,
        });
    }
    let max_user = users.keys().max().copied().unwrap_or(0);
    let max_movie = movies.keys().max().copied().unwrap_or(0);
    let schema = schema(
        dim,
        max_user.max(1),
        max_movie.max(1),
        years.len(),
        opts.titles.then_some(token_index.len()),
    )?;
    // Rating events are the only interaction type MovieLens records.
    Dataset::new(schema, samples, Split::All, vec![CountChannel::Impression])
}
