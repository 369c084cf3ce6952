//! Retrieval and embedding-structure metrics with bootstrap standard errors.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::labels::{collapse_polarity, shares_label, MoralLabelVector, PolarityClass};
use crate::linalg::{dot, l2_norm, Matrix};
use crate::rng::{stream_rng, streams};

pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Which embedding of a record to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// The record's image feature.
    Image,
    /// The record's primary caption.
    Text,
}

/// Unit-normalized embeddings keyed by record id, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    ids: Vec<String>,
    unit: Matrix,
    labels: Vec<MoralLabelVector>,
}

impl LabeledEmbeddings {
    pub fn new(
        ids: Vec<String>,
        embeddings: &Matrix,
        labels: Vec<MoralLabelVector>,
    ) -> Result<Self> {
        if ids.len() != embeddings.rows() || labels.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.rows(),
                found: ids.len().min(labels.len()),
            });
        }
        let mut unit = embeddings.clone();
        for i in 0..unit.rows() {
            let n = l2_norm(unit.row(i));
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "embedding {:?} has norm {n}",
                    ids[i]
                )));
            }
            unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(LabeledEmbeddings { ids, unit, labels })
    }

    /// One row per record, taken from the image or text bank.
    pub fn from_records(
        records: &[SampleRecord],
        bank: &FeatureBank,
        modality: Modality,
    ) -> Result<Self> {
        let keys: Vec<&str> = records
            .iter()
            .map(|r| match modality {
                Modality::Image => r.image_feature_id.as_str(),
                Modality::Text => r.primary_caption(),
            })
            .collect();
        let m = bank.gather(&keys)?;
        LabeledEmbeddings::new(
            records.iter().map(|r| r.id.clone()).collect(),
            &m,
            records.iter().map(|r| r.label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[MoralLabelVector] {
        &self.labels
    }

    pub fn unit(&self) -> &Matrix {
        &self.unit
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Pairwise cosine similarities within this set.
    fn self_cosines(&self) -> Matrix {
        self.unit.matmul_t(&self.unit)
    }
}

/// Average precision of a ranked relevance pattern; `None` when nothing is relevant.
pub fn average_precision(relevant_by_rank: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant_by_rank.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub value: f64,
    /// AP of every scored query, in query order.
    pub per_query: Vec<f64>,
    /// Queries with no relevant corpus item.
    pub skipped: usize,
}

/// Corpus indices ordered by descending cosine; ties go to the smaller id.
fn ranking(query: &[f64], corpus: &LabeledEmbeddings, exclude: Option<&str>) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..corpus.len())
        .filter(|&j| exclude != Some(corpus.ids[j].as_str()))
        .map(|j| (j, dot(query, corpus.unit.row(j))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| corpus.ids[a.0].cmp(&corpus.ids[b.0]))
    });
    scored
}

/// Mean over queries of average precision under the shared-label relevance
/// rule, with full cosine ranking of the corpus.
pub fn mean_average_precision(
    queries: &LabeledEmbeddings,
    corpus: &LabeledEmbeddings,
    exclude_self: bool,
) -> Result<MapReport> {
    if queries.is_empty() || corpus.is_empty() {
        return Err(Error::UndefinedMetric(
            "MAP needs non-empty queries and corpus".into(),
        ));
    }
    if queries.unit.cols() != corpus.unit.cols() {
        return Err(Error::DimensionMismatch {
            expected: queries.unit.cols(),
            found: corpus.unit.cols(),
        });
    }
    let mut per_query = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in 0..queries.len() {
        let exclude = exclude_self.then(|| queries.ids[q].as_str());
        let ranked = ranking(queries.unit.row(q), corpus, exclude);
        let rel: Vec<bool> = ranked
            .iter()
            .map(|&(j, _)| shares_label(&queries.labels[q], &corpus.labels[j]))
            .collect();
        match average_precision(&rel) {
            Some(ap) => per_query.push(ap),
            None => skipped += 1,
        }
    }
    if per_query.is_empty() {
        return Err(Error::UndefinedMetric(
            "no query has a relevant corpus item".into(),
        ));
    }
    let value = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(MapReport {
        value,
        per_query,
        skipped,
    })
}

fn dp_on(cos: &Matrix, labels: &[MoralLabelVector], idx: &[usize]) -> Result<f64> {
    let (mut share_sum, mut share_n, mut other_sum, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            if shares_label(&labels[i], &labels[j]) {
                share_sum += cos[(i, j)];
                share_n += 1;
            } else {
                other_sum += cos[(i, j)];
                other_n += 1;
            }
        }
    }
    if share_n == 0 || other_n == 0 {
        return Err(Error::UndefinedMetric(
            "discriminative power needs both sharing and non-sharing pairs".into(),
        ));
    }
    let denom = other_sum / other_n as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "mean non-sharing similarity is zero".into(),
        ));
    }
    Ok((share_sum / share_n as f64) / denom)
}

/// Mean cosine over label-sharing pairs divided by mean cosine over
/// non-sharing pairs, over unordered pairs.
pub fn discriminative_power(set: &LabeledEmbeddings) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    dp_on(&set.self_cosines(), &set.labels, &idx)
}

fn silhouette_on(cos: &Matrix, classes: &[Option<usize>], idx: &[usize]) -> Result<f64> {
    let members: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| classes[i].is_some())
        .collect();
    let n_classes = PolarityClass::ALL.len();
    let mut present = vec![0usize; n_classes];
    for &i in &members {
        present[classes[i].unwrap()] += 1;
    }
    if present.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::UndefinedMetric(
            "silhouette needs at least two polarity classes".into(),
        ));
    }
    let mut total = 0.0;
    for (a_pos, &i) in members.iter().enumerate() {
        let own = classes[i].unwrap();
        if present[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; n_classes];
        for (b_pos, &j) in members.iter().enumerate() {
            if a_pos != b_pos {
                sums[classes[j].unwrap()] += 1.0 - cos[(i, j)];
            }
        }
        let a = sums[own] / (present[own] - 1) as f64;
        let b = (0..n_classes)
            .filter(|&c| c != own && present[c] > 0)
            .map(|c| sums[c] / present[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / members.len() as f64)
}

fn silhouette_classes(labels: &[MoralLabelVector]) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|l| match collapse_polarity(l) {
            PolarityClass::Mixed => None,
            c => Some(c.index()),
        })
        .collect()
}

/// Silhouette over collapsed polarity classes with cosine distance; Mixed
/// samples are left out and singleton-class samples score 0.
pub fn silhouette(set: &LabeledEmbeddings) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    silhouette_on(&set.self_cosines(), &silhouette_classes(&set.labels), &idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub se: f64,
    pub n_bootstrap: usize,
}

/// Bootstraps `metric` over `n_items` units: `metric` receives the index
/// multiset of one resample. The point value uses every item once.
pub fn bootstrap<F>(
    name: &str,
    n_items: usize,
    metric: F,
    n: usize,
    seed: u64,
) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    if n_items == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{name}: nothing to resample"
        )));
    }
    let all: Vec<usize> = (0..n_items).collect();
    let value = metric(&all)?;
    let mut rng = stream_rng(seed, streams::BOOTSTRAP);
    let mut values = Vec::with_capacity(n);
    let mut undefined = 0usize;
    let mut idx = vec![0usize; n_items];
    for _ in 0..n {
        idx.iter_mut()
            .for_each(|i| *i = rng.random_range(0..n_items));
        match metric(&idx) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if undefined * 10 > n {
        return Err(Error::UndefinedMetric(format!(
            "{name}: undefined on {undefined} of {n} resamples"
        )));
    }
    Ok(MetricReport {
        metric: name.to_string(),
        value,
        se: std_dev(&values),
        n_bootstrap: n,
    })
}

/// Sample standard deviation (n - 1 denominator).
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// MAP with queries resampled.
pub fn bootstrap_map(
    name: &str,
    queries: &LabeledEmbeddings,
    corpus: &LabeledEmbeddings,
    exclude_self: bool,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    let report = mean_average_precision(queries, corpus, exclude_self)?;
    let aps = report.per_query;
    bootstrap(
        name,
        aps.len(),
        |idx| Ok(idx.iter().map(|&i| aps[i]).sum::<f64>() / idx.len() as f64),
        n,
        seed,
    )
}

pub fn bootstrap_dp(
    name: &str,
    set: &LabeledEmbeddings,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    let cos = set.self_cosines();
    bootstrap(
        name,
        set.len(),
        |idx| dp_on(&cos, &set.labels, idx),
        n,
        seed,
    )
}

pub fn bootstrap_silhouette(
    name: &str,
    set: &LabeledEmbeddings,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    let cos = set.self_cosines();
    let classes = silhouette_classes(&set.labels);
    bootstrap(
        name,
        set.len(),
        |idx| silhouette_on(&cos, &classes, idx),
        n,
        seed,
    )
}

/// The full metric table for one pair of image/text embedding sets: MAP in
/// four directions, DP and silhouette per modality.
pub fn evaluate_embeddings(
    images: &LabeledEmbeddings,
    texts: &LabeledEmbeddings,
    n_bootstrap: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    Ok(vec![
        bootstrap_map("map_i2i", images, images, true, n_bootstrap, seed)?,
        bootstrap_map("map_t2t", texts, texts, true, n_bootstrap, seed)?,
        bootstrap_map("map_i2t", images, texts, false, n_bootstrap, seed)?,
        bootstrap_map("map_t2i", texts, images, false, n_bootstrap, seed)?,
        bootstrap_dp("dp_image", images, n_bootstrap, seed)?,
        bootstrap_dp("dp_text", texts, n_bootstrap, seed)?,
        bootstrap_silhouette("silhouette_image", images, n_bootstrap, seed)?,
        bootstrap_silhouette("silhouette_text", texts, n_bootstrap, seed)?,
    ])
}

pub fn write_metric_reports<W: Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value", "se", "n"])?;
    for r in reports {
        w.write_record([
            r.metric.clone(),
            r.value.to_string(),
            r.se.to_string(),
            r.n_bootstrap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_reports<R: Read>(input: R) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let num = |i: usize, what: &str| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::validation(what, format!("not a number: {:?}", field(i))))
        };
        out.push(MetricReport {
            metric: field(0).to_string(),
            value: num(1, "value")?,
            se: num(2, "se")?,
            n_bootstrap: field(3)
                .parse()
                .map_err(|_| Error::validation("n", format!("not an integer: {:?}", field(3))))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    I2I,
    T2T,
    I2T,
    T2I,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::I2I,
        Direction::T2T,
        Direction::I2T,
        Direction::T2I,
    ];

    fn is_unimodal(self) -> bool {
        matches!(self, Direction::I2I | Direction::T2T)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::I2I => "i2i",
            Direction::T2T => "t2t",
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i2i" => Ok(Direction::I2I),
            "t2t" => Ok(Direction::T2T),
            "i2t" => Ok(Direction::I2T),
            "t2i" => Ok(Direction::T2I),
            _ => Err(Error::invalid(format!("unknown retrieval direction {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub item_id: String,
    pub similarity: f64,
    pub shares_label: bool,
    pub label: MoralLabelVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub direction: Direction,
    pub query_label: MoralLabelVector,
    pub items: Vec<RetrievedItem>,
}

/// Image and text embeddings of the same records, for retrieval in any direction.
pub struct RetrievalCorpus {
    pub images: LabeledEmbeddings,
    pub texts: LabeledEmbeddings,
}

impl RetrievalCorpus {
    pub fn rank_retrieve(
        &self,
        query_id: &str,
        direction: Direction,
        k: usize,
    ) -> Result<RetrievalResult> {
        let (source, target) = match direction {
            Direction::I2I => (&self.images, &self.images),
            Direction::T2T => (&self.texts, &self.texts),
            Direction::I2T => (&self.images, &self.texts),
            Direction::T2I => (&self.texts, &self.images),
        };
        let q = source
            .position(query_id)
            .ok_or_else(|| Error::UnknownId(query_id.to_string()))?;
        let exclude = direction.is_unimodal().then_some(query_id);
        let query_label = source.labels[q];
        let items = ranking(source.unit.row(q), target, exclude)
            .into_iter()
            .take(k)
            .map(|(j, sim)| RetrievedItem {
                item_id: target.ids[j].clone(),
                similarity: sim,
                shares_label: shares_label(&query_label, &target.labels[j]),
                label: target.labels[j],
            })
            .collect();
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            direction,
            query_label,
            items,
        })
    }
}

pub fn write_retrievals(results: &[RetrievalResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_retrievals(path: impl AsRef<Path>) -> Result<Vec<RetrievalResult>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
