//! Annotated query sets, click sessions, session filtering and feature
//! standardization.
//!
//! Two line-oriented text formats are supported. Lines starting with `#` and
//! blank lines are ignored by both loaders.
//!
//! Annotated queries, one document per line:
//!
//! ```text
//! 3 qid:7 1:0.5 2:0.1 ... 14:1.2
//! ```
//!
//! Sessions, one displayed list per line, documents separated by `|`:
//!
//! ```text
//! qid:7 | pos:1 click:1 1:0.5 ... 14:1.2 | pos:2 click:0 1:0.3 ... 14:0.9
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Number of features per query-document pair.
pub const NUM_FEATURES: usize = 14;
/// Length of every training list after filtering.
pub const TRAIN_LIST_LEN: usize = 10;
pub const MAX_GRADE: u8 = 4;

pub type Features = [f64; NUM_FEATURES];

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDoc {
    pub features: Features,
    /// 1-based display position.
    pub position: usize,
    pub click: bool,
}

/// One displayed list for a query with per-position clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub query_id: String,
    /// Sorted by position; positions are exactly `1..=len`.
    pub docs: Vec<SessionDoc>,
}

impl Session {
    /// Validates positions and sorts documents by position.
    pub fn new(query_id: impl Into<String>, mut docs: Vec<SessionDoc>) -> Result<Self> {
        let query_id = query_id.into();
        let err = |msg: String| Error::InvalidSession {
            query_id: query_id.clone(),
            msg,
        };
        if docs.is_empty() {
            return Err(err("no documents".into()));
        }
        docs.sort_by_key(|d| d.position);
        for (i, d) in docs.iter().enumerate() {
            if i > 0 && docs[i - 1].position == d.position {
                return Err(err(format!("duplicate position {}", d.position)));
            }
            if d.position != i + 1 {
                return Err(err(format!("missing position {}", i + 1)));
            }
        }
        Ok(Self { query_id, docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn clicks(&self) -> impl Iterator<Item = bool> + '_ {
        self.docs.iter().map(|d| d.click)
    }

    pub fn num_clicks(&self) -> usize {
        self.docs.iter().filter(|d| d.click).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDoc {
    pub features: Features,
    pub grade: u8,
}

/// Expert-labelled candidate list for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedQuery {
    pub query_id: String,
    pub docs: Vec<AnnotatedDoc>,
}

impl AnnotatedQuery {
    pub fn grades(&self) -> Vec<u8> {
        self.docs.iter().map(|d| d.grade).collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))
}

fn is_skipped(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// Parses `k:value` feature tokens into a dense vector; missing indices are 0.
fn parse_features<'a>(
    tokens: impl Iterator<Item = &'a str>,
    src: &str,
    line: usize,
) -> Result<Features> {
    let mut f = [0.0; NUM_FEATURES];
    let mut seen = [false; NUM_FEATURES];
    for tok in tokens {
        let (k, v) = tok
            .split_once(':')
            .ok_or_else(|| Error::parse(src, line, format!("malformed feature `{tok}`")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::parse(src, line, format!("bad feature index `{k}`")))?;
        if !(1..=NUM_FEATURES).contains(&k) {
            return Err(Error::parse(
                src,
                line,
                format!("feature index {k} outside 1..={NUM_FEATURES}"),
            ));
        }
        if seen[k - 1] {
            return Err(Error::parse(src, line, format!("feature {k} repeated")));
        }
        let v: f64 = v
            .parse()
            .map_err(|_| Error::parse(src, line, format!("bad feature value `{v}`")))?;
        if !v.is_finite() {
            return Err(Error::parse(src, line, format!("non-finite feature {k}")));
        }
        seen[k - 1] = true;
        f[k - 1] = v;
    }
    Ok(f)
}

fn write_features(out: &mut String, f: &Features) {
    use std::fmt::Write as _;
    for (k, v) in f.iter().enumerate() {
        let _ = write!(out, " {}:{}", k + 1, v);
    }
}

/// Parses annotated lines, grouping by query id in first-seen order.
pub fn parse_annotated(text: &str, src: &str) -> Result<Vec<AnnotatedQuery>> {
    let mut queries: Vec<AnnotatedQuery> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if is_skipped(raw) {
            continue;
        }
        let content = raw.split('#').next().unwrap_or_default();
        let mut tokens = content.split_whitespace();
        let grade_tok = tokens
            .next()
            .ok_or_else(|| Error::parse(src, line, "missing grade"))?;
        let grade: i64 = grade_tok
            .parse()
            .map_err(|_| Error::parse(src, line, format!("bad grade `{grade_tok}`")))?;
        if !(0..=MAX_GRADE as i64).contains(&grade) {
            return Err(Error::parse(
                src,
                line,
                format!("grade {grade} outside 0..={MAX_GRADE}"),
            ));
        }
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .filter(|q| !q.is_empty())
            .ok_or_else(|| Error::parse(src, line, "missing qid"))?;
        let features = parse_features(tokens, src, line)?;
        let doc = AnnotatedDoc {
            features,
            grade: grade as u8,
        };
        match index.get(qid) {
            Some(&qi) => queries[qi].docs.push(doc),
            None => {
                index.insert(qid.to_string(), queries.len());
                queries.push(AnnotatedQuery {
                    query_id: qid.to_string(),
                    docs: vec![doc],
                });
            }
        }
    }
    Ok(queries)
}

pub fn load_annotated(path: impl AsRef<Path>) -> Result<Vec<AnnotatedQuery>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotated(&text, &path.display().to_string())
}

pub fn format_annotated(queries: &[AnnotatedQuery]) -> String {
    let mut out = String::new();
    for q in queries {
        for d in &q.docs {
            out.push_str(&format!("{} qid:{}", d.grade, q.query_id));
            write_features(&mut out, &d.features);
            out.push('\n');
        }
    }
    out
}

pub fn format_session(s: &Session) -> String {
    let mut out = format!("qid:{}", s.query_id);
    for d in &s.docs {
        out.push_str(&format!(" | pos:{} click:{}", d.position, u8::from(d.click)));
        write_features(&mut out, &d.features);
    }
    out
}

pub fn parse_session_line(raw: &str, src: &str, line: usize) -> Result<Session> {
    let mut groups = raw.split('|');
    let head = groups.next().unwrap_or_default().trim();
    let qid = head
        .strip_prefix("qid:")
        .filter(|q| !q.is_empty() && !q.contains(char::is_whitespace))
        .ok_or_else(|| Error::parse(src, line, format!("expected `qid:<id>`, got `{head}`")))?;
    let mut docs = Vec::new();
    for group in groups {
        let mut tokens = group.split_whitespace();
        let pos = tokens
            .next()
            .and_then(|t| t.strip_prefix("pos:"))
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(src, line, "missing or bad `pos:<i>`"))?;
        let click = match tokens.next().and_then(|t| t.strip_prefix("click:")) {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(Error::parse(src, line, "missing or bad `click:<0|1>`")),
        };
        let features = parse_features(tokens, src, line)?;
        docs.push(SessionDoc {
            features,
            position: pos,
            click,
        });
    }
    Session::new(qid, docs)
}

pub fn parse_sessions(text: &str, src: &str) -> Result<Vec<Session>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !is_skipped(l))
        .map(|(i, l)| parse_session_line(l, src, i + 1))
        .collect()
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let src = path.display().to_string();
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !is_skipped(l))
        .map(|(i, l)| parse_session_line(l, &src, i + 1))
        .collect()
}

pub fn write_sessions<W: Write>(mut w: W, sessions: &[Session]) -> std::io::Result<()> {
    for s in sessions {
        writeln!(w, "{}", format_session(s))?;
    }
    Ok(())
}

/// Keeps sessions whose positions 1..=10 are all recorded and that have at
/// least one click there; survivors are truncated to their top 10 positions.
pub fn filter_sessions(sessions: &[Session]) -> Vec<Session> {
    sessions
        .iter()
        .filter_map(|s| {
            let top: Vec<SessionDoc> = s
                .docs
                .iter()
                .filter(|d| (1..=TRAIN_LIST_LEN).contains(&d.position))
                .cloned()
                .collect();
            let mut present = [false; TRAIN_LIST_LEN];
            for d in &top {
                present[d.position - 1] = true;
            }
            let complete = top.len() == TRAIN_LIST_LEN && present.iter().all(|&p| p);
            if !complete || !top.iter().any(|d| d.click) {
                return None;
            }
            let mut docs = top;
            docs.sort_by_key(|d| d.position);
            Some(Session {
                query_id: s.query_id.clone(),
                docs,
            })
        })
        .collect()
}

/// Per-dimension mean and standard deviation of the training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Features,
    pub std: Features,
}

const MIN_STD: f64 = 1e-12;

impl FeatureStats {
    /// Population statistics over every document of every session.
    pub fn fit(train: &[Session]) -> Result<Self> {
        let rows: Vec<&Features> = train
            .iter()
            .flat_map(|s| s.docs.iter().map(|d| &d.features))
            .collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit feature statistics on an empty training set".into(),
            ));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; NUM_FEATURES];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.map(|s| (s / n).sqrt());
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &Features) -> Features {
        let mut out = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            out[k] = if self.std[k] < MIN_STD {
                0.0
            } else {
                (f[k] - self.mean[k]) / self.std[k]
            };
        }
        out
    }

    pub fn normalize_sessions(&self, sessions: &[Session]) -> Vec<Session> {
        sessions
            .iter()
            .map(|s| Session {
                query_id: s.query_id.clone(),
                docs: s
                    .docs
                    .iter()
                    .map(|d| SessionDoc {
                        features: self.apply(&d.features),
                        ..d.clone()
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn normalize_queries(&self, queries: &[AnnotatedQuery]) -> Vec<AnnotatedQuery> {
        queries
            .iter()
            .map(|q| AnnotatedQuery {
                query_id: q.query_id.clone(),
                docs: q
                    .docs
                    .iter()
                    .map(|d| AnnotatedDoc {
                        features: self.apply(&d.features),
                        grade: d.grade,
                    })
                    .collect(),
            })
            .collect()
    }

    /// Two lines: means, then standard deviations.
    pub fn to_text(&self) -> String {
        let join = |v: &Features| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("mean {}\nstd {}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_text(text: &str, src: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for (i, raw) in text.lines().enumerate() {
            if is_skipped(raw) {
                continue;
            }
            let mut tokens = raw.split_whitespace();
            let key = tokens.next().unwrap_or_default();
            let vals: Vec<f64> = tokens
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(src, i + 1, e.to_string()))?;
            let arr: Features = vals.try_into().map_err(|v: Vec<f64>| {
                Error::parse(src, i + 1, format!("expected {NUM_FEATURES} values, got {}", v.len()))
            })?;
            match key {
                "mean" => mean = Some(arr),
                "std" => std = Some(arr),
                other => return Err(Error::parse(src, i + 1, format!("unknown key `{other}`"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) => Ok(Self { mean, std }),
            _ => Err(Error::parse(src, 0, "feature stats need `mean` and `std` lines")),
        }
    }
}

/// Standardizes `train` and every set in `others` with statistics fitted on
/// `train` alone.
pub fn fit_and_apply_normalization(
    train: &[Session],
    others: &[&[AnnotatedQuery]],
) -> Result<(Vec<Session>, Vec<Vec<AnnotatedQuery>>, FeatureStats)> {
    let stats = FeatureStats::fit(train)?;
    let sessions = stats.normalize_sessions(train);
    let rest = others.iter().map(|q| stats.normalize_queries(q)).collect();
    Ok((sessions, rest, stats))
}
