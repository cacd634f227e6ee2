//! Ranking metrics, paired significance tests and propensity reporting.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{AnnotatedQuery, Session, MAX_GRADE, TRAIN_LIST_LEN};
use crate::error::{Error, Result};
use crate::models::PropensityVector;

/// Rank cutoffs reported for every metric.
pub const CUTOFFS: [usize; 4] = [1, 3, 5, 10];

/// Significance threshold for comparison marks.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Normalized propensity curve reported for a real mobile web-search click
/// log, kept as a shape reference for propensity reports.
pub const MOBILE_SEARCH_REFERENCE_PROPENSITY: [f64; TRAIN_LIST_LEN] =
    [1.000, 0.994, 0.962, 0.924, 0.897, 0.897, 0.893, 0.890, 0.889, 0.888];

fn gain(grade: u8) -> f64 {
    f64::from((1u32 << grade) - 1)
}

fn dcg(grades: &[u8], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k with gain `2^g - 1` and discount `1/log2(rank + 1)`; 0 when the
/// ideal DCG is 0.
pub fn ndcg_at_k(grades: &[u8], k: usize) -> f64 {
    let mut ideal = grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg <= 0.0 {
        return 0.0;
    }
    dcg(grades, k) / idcg
}

/// ERR@k with stop probability `(2^g - 1) / 2^4`.
pub fn err_at_k(grades: &[u8], k: usize) -> f64 {
    let denom = f64::from(1u32 << MAX_GRADE);
    let mut continue_prob = 1.0;
    let mut err = 0.0;
    for (i, &g) in grades.iter().take(k).enumerate() {
        let r = gain(g) / denom;
        err += continue_prob * r / (i + 1) as f64;
        continue_prob *= 1.0 - r;
    }
    err
}

/// Document indices sorted by descending score; ties keep the original order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Kendall's tau-a between two score vectors over the same items; tied pairs
/// count as neither concordant nor discordant. Lists shorter than 2 give 1.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "kendall tau: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let x = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] != a[j] && b[i] != b[j] {
                s += x as i64;
            }
        }
    }
    Ok(s as f64 / (n * (n - 1) / 2) as f64)
}

/// Two-sided paired t-test on per-query differences.
///
/// Zero variance of the differences gives `p = 1` when their mean is zero
/// and `p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired t-test: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Ndcg,
    Err,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Ndcg => "ndcg",
            MetricKind::Err => "err",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    /// nDCG at each of [`CUTOFFS`].
    pub ndcg: [f64; 4],
    /// ERR at each of [`CUTOFFS`].
    pub err: [f64; 4],
}

impl QueryMetrics {
    /// Metrics of a list of grades already in ranked order.
    pub fn from_ranked_grades(query_id: impl Into<String>, grades: &[u8]) -> Self {
        Self {
            query_id: query_id.into(),
            ndcg: CUTOFFS.map(|k| ndcg_at_k(grades, k)),
            err: CUTOFFS.map(|k| err_at_k(grades, k)),
        }
    }

    pub fn get(&self, metric: MetricKind, cutoff_index: usize) -> f64 {
        match metric {
            MetricKind::Ndcg => self.ndcg[cutoff_index],
            MetricKind::Err => self.err[cutoff_index],
        }
    }
}

/// Per-query metrics of one ranker on one annotated set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub per_query: Vec<QueryMetrics>,
}

const TSV_COLUMNS: [&str; 9] = [
    "query_id", "ndcg@1", "ndcg@3", "ndcg@5", "ndcg@10", "err@1", "err@3", "err@5", "err@10",
];

impl EvalReport {
    /// Scores every query with `score` and ranks by descending score.
    pub fn evaluate(
        method: impl Into<String>,
        queries: &[AnnotatedQuery],
        mut score: impl FnMut(&AnnotatedQuery) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut per_query = Vec::with_capacity(queries.len());
        for q in queries {
            let scores = score(q)?;
            if scores.len() != q.docs.len() {
                return Err(Error::InvalidArgument(format!(
                    "query `{}`: {} scores for {} documents",
                    q.query_id,
                    scores.len(),
                    q.docs.len()
                )));
            }
            let ranked: Vec<u8> = rank_by_scores(&scores)
                .into_iter()
                .map(|i| q.docs[i].grade)
                .collect();
            per_query.push(QueryMetrics::from_ranked_grades(q.query_id.clone(), &ranked));
        }
        Ok(Self {
            method: method.into(),
            per_query,
        })
    }

    pub fn mean(&self, metric: MetricKind, cutoff_index: usize) -> f64 {
        if self.per_query.is_empty() {
            return 0.0;
        }
        self.per_query
            .iter()
            .map(|q| q.get(metric, cutoff_index))
            .sum::<f64>()
            / self.per_query.len() as f64
    }

    pub fn column(&self, metric: MetricKind, cutoff_index: usize) -> Vec<f64> {
        self.per_query
            .iter()
            .map(|q| q.get(metric, cutoff_index))
            .collect()
    }

    /// Per-query TSV preceded by `# ` header lines.
    pub fn to_tsv(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# method={}", self.method);
        let _ = writeln!(out, "{}", TSV_COLUMNS.join("\t"));
        for q in &self.per_query {
            out.push_str(&q.query_id);
            for v in q.ndcg.iter().chain(&q.err) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, src: &str) -> Result<Self> {
        let mut method = None;
        let mut per_query = Vec::new();
        let mut seen_header = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(m) = c.trim().strip_prefix("method=") {
                    method = Some(m.to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !seen_header {
                if cols != TSV_COLUMNS {
                    return Err(Error::parse(src, i + 1, "unexpected report columns"));
                }
                seen_header = true;
                continue;
            }
            if cols.len() != TSV_COLUMNS.len() {
                return Err(Error::parse(src, i + 1, format!("expected {} columns", TSV_COLUMNS.len())));
            }
            let vals = cols[1..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(src, i + 1, e.to_string()))?;
            per_query.push(QueryMetrics {
                query_id: cols[0].to_string(),
                ndcg: [vals[0], vals[1], vals[2], vals[3]],
                err: [vals[4], vals[5], vals[6], vals[7]],
            });
        }
        if !seen_header {
            return Err(Error::parse(src, 0, "missing report header"));
        }
        Ok(Self {
            method: method.unwrap_or_default(),
            per_query,
        })
    }

    /// Aggregate lines `method=<m> k=<k> metric=<ndcg|err> value=<v> p_value=<p|->`.
    pub fn to_structured_text(&self, p_values: Option<&[ComparisonRow]>) -> String {
        let mut out = String::new();
        for metric in [MetricKind::Ndcg, MetricKind::Err] {
            for (ci, k) in CUTOFFS.iter().enumerate() {
                let p = p_values
                    .and_then(|rows| rows.iter().find(|r| r.metric == metric && r.cutoff == *k))
                    .map_or_else(|| "-".to_string(), |r| r.p_value.to_string());
                let _ = writeln!(
                    out,
                    "method={} k={k} metric={} value={} p_value={p}",
                    self.method,
                    metric.as_str(),
                    self.mean(metric, ci)
                );
            }
        }
        out
    }
}

/// One metric/cutoff line of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: MetricKind,
    pub cutoff: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

impl ComparisonRow {
    pub fn significant(&self) -> bool {
        self.p_value <= SIGNIFICANCE_LEVEL
    }
}

/// Paired t-tests of `a` against `b` for every metric and cutoff. Both
/// reports must cover the same queries in the same order.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<ComparisonRow>> {
    if a.per_query.len() != b.per_query.len()
        || a.per_query
            .iter()
            .zip(&b.per_query)
            .any(|(x, y)| x.query_id != y.query_id)
    {
        return Err(Error::InvalidArgument(
            "reports cover different queries".into(),
        ));
    }
    let mut rows = Vec::with_capacity(8);
    for metric in [MetricKind::Ndcg, MetricKind::Err] {
        for (ci, &cutoff) in CUTOFFS.iter().enumerate() {
            rows.push(ComparisonRow {
                metric,
                cutoff,
                mean_a: a.mean(metric, ci),
                mean_b: b.mean(metric, ci),
                p_value: paired_t_test(&a.column(metric, ci), &b.column(metric, ci))?,
            });
        }
    }
    Ok(rows)
}

/// TSV significance table; `*` marks rows with `p <= 0.05`.
pub fn format_comparison(a: &EvalReport, b: &EvalReport, rows: &[ComparisonRow], header: &str) -> String {
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "metric\tk\t{}\t{}\tp_value\tsignificant", label(a, "a"), label(b, "b"));
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.metric.as_str(),
            r.cutoff,
            r.mean_a,
            r.mean_b,
            r.p_value,
            if r.significant() { "*" } else { "" }
        );
    }
    out
}

fn label<'a>(r: &'a EvalReport, fallback: &'a str) -> &'a str {
    if r.method.is_empty() {
        fallback
    } else {
        &r.method
    }
}

/// Fraction of sessions with a click at each position 1..=10.
pub fn mean_ctr(sessions: &[Session]) -> Vec<f64> {
    let mut clicks = [0usize; TRAIN_LIST_LEN];
    let mut shown = [0usize; TRAIN_LIST_LEN];
    for s in sessions {
        for d in s.docs.iter().filter(|d| d.position <= TRAIN_LIST_LEN) {
            shown[d.position - 1] += 1;
            clicks[d.position - 1] += usize::from(d.click);
        }
    }
    clicks
        .iter()
        .zip(&shown)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityRow {
    pub position: usize,
    pub learned: f64,
    pub truth: Option<f64>,
    pub ctr: Option<f64>,
    pub deviation: Option<f64>,
}

/// Learned normalized propensity per position next to the optional ground
/// truth, mean CTR and absolute deviation from the truth.
pub fn propensity_report(
    learned: &PropensityVector,
    truth: Option<&[f64]>,
    ctr: Option<&[f64]>,
) -> Result<Vec<PropensityRow>> {
    let n = learned.normalized.len();
    for (name, v) in [("truth", truth), ("ctr", ctr)] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} positions, learned propensity has {n}",
                    v.len()
                )));
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let l = learned.normalized[i];
            let t = truth.map(|t| t[i]);
            PropensityRow {
                position: i + 1,
                learned: l,
                truth: t,
                ctr: ctr.map(|c| c[i]),
                deviation: t.map(|t| (l - t).abs()),
            }
        })
        .collect())
}

pub fn format_propensity_report(rows: &[PropensityRow], header: &str) -> String {
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("position\tlearned\ttruth\tctr\tdeviation\treference\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    for r in rows {
        let reference = MOBILE_SEARCH_REFERENCE_PROPENSITY.get(r.position - 1).copied();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.position,
            r.learned,
            opt(r.truth),
            opt(r.ctr),
            opt(r.deviation),
            opt(reference)
        );
    }
    out
}
