//! Paragraph-vector embeddings of review text (distributed bag of words with
//! negative sampling) and latent-space isolation instruments.
//!
//! Documents are trained in chronological blocks: all documents dated `t` are
//! trained after every block dated `< t`, with a negative-sampling table built
//! from word counts up to `t` and a random stream seeded per block. An entity
//! row for period `t` is therefore a function of documents dated `<= t` only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{MarketPanel, ObsKey, Period, Review};

pub const ISOL_MEAN: &str = "iv_isol_mean";
pub const ISOL_STD: &str = "iv_isol_std";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordLayer {
    Frozen,
    #[default]
    Trainable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocUnit {
    /// All reviews of an alternative available at `t` form one document.
    #[default]
    PerAltPeriod,
    /// Each available review is its own document, tagged with the
    /// alternative-period entity.
    PerReview,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Entity dimensions `q`.
    pub dims: usize,
    /// Word dimensions; the dot-product objective needs it equal to `dims`.
    pub word_dims: Option<usize>,
    /// Negative samples per positive pair.
    pub negative: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to `min_learning_rate`.
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub word_layer: WordLayer,
    pub doc_unit: DocUnit,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dims: 32,
            word_dims: None,
            negative: 5,
            epochs: 100,
            learning_rate: 0.025,
            min_learning_rate: 0.025 * 1e-4,
            seed: 1,
            word_layer: WordLayer::Trainable,
            doc_unit: DocUnit::PerAltPeriod,
        }
    }
}

impl EmbeddingConfig {
    pub fn word_dims(&self) -> usize {
        self.word_dims.unwrap_or(self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(Error::config("embedding dims must be at least 2"));
        }
        if self.negative < 1 || self.epochs < 1 {
            return Err(Error::config("negative samples and epochs must be at least 1"));
        }
        if self.word_dims() != self.dims {
            return Err(Error::config(format!(
                "word dims {} must equal entity dims {} for the bag-of-words objective",
                self.word_dims(),
                self.dims
            )));
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Lowercase, split on non-alphanumerics, drop tokens shorter than 2 chars.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityKey {
    pub alt: String,
    pub period: Period,
}

/// Training sequences tagged with their entity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub entities: Vec<EntityKey>,
    /// `(entity index, text)`.
    pub sequences: Vec<(usize, String)>,
}

impl Corpus {
    /// One entity per `(alternative, period)` in `docs`, one sequence each.
    pub fn from_documents(docs: &BTreeMap<(String, Period), String>) -> Self {
        let mut corpus = Corpus::default();
        for ((alt, period), text) in docs {
            corpus.entities.push(EntityKey {
                alt: alt.clone(),
                period: *period,
            });
            corpus.sequences.push((corpus.entities.len() - 1, text.clone()));
        }
        corpus
    }

    /// Builds the corpus for every `(alternative, period)` of the panel from
    /// the reviews available at that period (dated `<= t`).
    pub fn from_panel(panel: &MarketPanel, unit: DocUnit) -> Self {
        let pairs: BTreeSet<(String, Period)> = panel
            .keys
            .iter()
            .map(|k| (k.alt.clone(), k.period))
            .collect();
        Self::from_reviews(&panel.reviews, &pairs, unit)
    }

    pub fn from_reviews(
        reviews: &[Review],
        pairs: &BTreeSet<(String, Period)>,
        unit: DocUnit,
    ) -> Self {
        let mut by_alt: HashMap<&str, Vec<&Review>> = HashMap::new();
        for r in reviews {
            by_alt.entry(r.alt_id.as_str()).or_default().push(r);
        }
        for list in by_alt.values_mut() {
            list.sort_by_key(|r| r.period);
        }
        let mut corpus = Corpus::default();
        for (alt, period) in pairs {
            let available: Vec<&Review> = by_alt
                .get(alt.as_str())
                .map(|l| l.iter().copied().filter(|r| r.period <= *period).collect())
                .unwrap_or_default();
            if available.iter().all(|r| r.text.trim().is_empty()) {
                continue;
            }
            corpus.entities.push(EntityKey {
                alt: alt.clone(),
                period: *period,
            });
            let e = corpus.entities.len() - 1;
            match unit {
                DocUnit::PerAltPeriod => {
                    let text = available
                        .iter()
                        .map(|r| r.text.as_str())
                        .collect::<Vec<_>>()
                        .join(" ");
                    corpus.sequences.push((e, text));
                }
                DocUnit::PerReview => {
                    for r in available {
                        corpus.sequences.push((e, r.text.clone()));
                    }
                }
            }
        }
        corpus
    }
}

/// Pre-trained word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub dims: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    /// Text format: one line per word, token followed by space-separated
    /// decimals. An optional `count dims` header line is skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut dims = None;
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            let v = values
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::config(format!("word vectors line {}: bad number", i + 1)))?;
            match dims {
                None => dims = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::config(format!(
                        "word vectors line {}: expected {d} values, found {}",
                        i + 1,
                        v.len()
                    )))
                }
                _ => {}
            }
            vectors.insert(token.to_string(), v);
        }
        let dims = dims.ok_or_else(|| Error::config("word vector file is empty"))?;
        Ok(Self { dims, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Entity matrix `D` (one row per alternative-period document) and word
/// matrix `W`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    pub entities: Vec<EntityKey>,
    pub entity_matrix: Vec<f64>,
    pub vocab: Vec<String>,
    pub word_matrix: Vec<f64>,
    /// False when the entity's documents had no in-vocabulary words.
    pub trained: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    j_docs: usize,
    v: usize,
    q: usize,
    q_w: usize,
    config: EmbeddingConfig,
    entities: Vec<EntityKey>,
    vocab: Vec<String>,
    trained: Vec<bool>,
}

impl EmbeddingModel {
    pub fn dims(&self) -> usize {
        self.config.dims
    }

    pub fn entity_row(&self, i: usize) -> &[f64] {
        let q = self.dims();
        &self.entity_matrix[i * q..(i + 1) * q]
    }

    pub fn word_row(&self, i: usize) -> &[f64] {
        let q = self.config.word_dims();
        &self.word_matrix[i * q..(i + 1) * q]
    }

    pub fn entity_index(&self) -> HashMap<(&str, Period), usize> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.alt.as_str(), e.period), i))
            .collect()
    }

    /// One JSON header line, then `D` and `W` rows as little-endian `f64`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ModelHeader {
            j_docs: self.entities.len(),
            v: self.vocab.len(),
            q: self.dims(),
            q_w: self.config.word_dims(),
            config: self.config.clone(),
            entities: self.entities.clone(),
            vocab: self.vocab.clone(),
            trained: self.trained.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in self.entity_matrix.iter().chain(&self.word_matrix) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: ModelHeader = serde_json::from_str(line.trim_end())?;
        let mut read_rows = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let entity_matrix = read_rows(h.j_docs * h.q)?;
        let word_matrix = read_rows(h.v * h.q_w)?;
        Ok(Self {
            config: h.config,
            entities: h.entities,
            entity_matrix,
            vocab: h.vocab,
            word_matrix,
            trained: h.trained,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// FNV-1a, used to derive per-row and per-block seeds.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_row(seed: u64, tag: &str, dims: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, tag.as_bytes()));
    let half = 0.5 / dims as f64;
    (0..dims).map(|_| rng.random_range(-half..half)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains entity and word vectors on `corpus`, optionally starting the word
/// layer from pre-trained vectors.
pub fn train_embeddings(
    corpus: &Corpus,
    config: &EmbeddingConfig,
    pretrained: Option<&WordVectors>,
) -> Result<EmbeddingModel> {
    config.validate()?;
    if let Some(p) = pretrained {
        if p.dims != config.word_dims() {
            return Err(Error::config(format!(
                "pre-trained vectors have {} dims, config expects {}",
                p.dims,
                config.word_dims()
            )));
        }
    }
    let nonempty = corpus
        .sequences
        .iter()
        .filter(|(_, t)| !tokenize(t).is_empty())
        .map(|(e, _)| *e)
        .collect::<BTreeSet<_>>()
        .len();
    if nonempty < 2 {
        return Err(Error::EmptyCorpus(format!(
            "need at least 2 nonempty documents, found {nonempty}"
        )));
    }
    let q = config.dims;
    let frozen = config.word_layer == WordLayer::Frozen;

    // Blocks by entity period; vocabulary indices in chronological
    // first-appearance order so that later documents only append words.
    let mut blocks: BTreeMap<Period, Vec<usize>> = BTreeMap::new();
    for (s, (e, _)) in corpus.sequences.iter().enumerate() {
        blocks.entry(corpus.entities[*e].period).or_default().push(s);
    }
    let mut vocab: Vec<String> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); corpus.sequences.len()];
    for seqs in blocks.values() {
        for &s in seqs {
            for tok in tokenize(&corpus.sequences[s].1) {
                if let Some(&w) = word_index.get(&tok) {
                    tokens[s].push(w);
                    continue;
                }
                let known = pretrained.is_some_and(|p| p.vectors.contains_key(&tok));
                if frozen && pretrained.is_some() && !known {
                    continue;
                }
                let w = vocab.len();
                word_index.insert(tok.clone(), w);
                vocab.push(tok);
                tokens[s].push(w);
            }
        }
    }

    let mut word_matrix = Vec::with_capacity(vocab.len() * q);
    for word in &vocab {
        match pretrained.and_then(|p| p.vectors.get(word)) {
            Some(v) => word_matrix.extend_from_slice(v),
            None => word_matrix.extend(init_row(config.seed, &format!("w:{word}"), q)),
        }
    }
    let mut entity_matrix = Vec::with_capacity(corpus.entities.len() * q);
    for e in &corpus.entities {
        entity_matrix.extend(init_row(config.seed, &format!("d:{}:{}", e.alt, e.period), q));
    }
    let mut trained = vec![false; corpus.entities.len()];
    for (s, (e, _)) in corpus.sequences.iter().enumerate() {
        if !tokens[s].is_empty() {
            trained[*e] = true;
        }
    }

    let mut counts = vec![0u64; vocab.len()];
    let mut grad = vec![0.0; q];
    for (period, seqs) in &blocks {
        for &s in seqs {
            for &w in &tokens[s] {
                counts[w] += 1;
            }
        }
        // unigram^(3/4) over words seen so far
        let mut cumulative = Vec::with_capacity(vocab.len());
        let mut acc = 0.0;
        for &c in &counts {
            acc += (c as f64).powf(0.75);
            cumulative.push(acc);
        }
        let total_words: usize = seqs.iter().map(|&s| tokens[s].len()).sum();
        if total_words == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(config.seed, &period.to_le_bytes()));
        let mut order = seqs.clone();
        let steps = (total_words * config.epochs) as f64;
        let mut step = 0usize;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &s in &order {
                let e = corpus.sequences[s].0;
                for &w in &tokens[s] {
                    let progress = step as f64 / steps;
                    let lr = config.learning_rate
                        - (config.learning_rate - config.min_learning_rate) * progress;
                    step += 1;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for d in 0..=config.negative {
                        let (target, label) = if d == 0 {
                            (w, 1.0)
                        } else {
                            let u = rng.random::<f64>() * acc;
                            let n = cumulative.partition_point(|&c| c <= u).min(vocab.len() - 1);
                            if n == w {
                                continue;
                            }
                            (n, 0.0)
                        };
                        let ent = &entity_matrix[e * q..(e + 1) * q];
                        let word = &mut word_matrix[target * q..(target + 1) * q];
                        let g = (label - sigmoid(dot(ent, word))) * lr;
                        for k in 0..q {
                            grad[k] += g * word[k];
                        }
                        if !frozen {
                            for k in 0..q {
                                word[k] += g * ent[k];
                            }
                        }
                    }
                    let ent = &mut entity_matrix[e * q..(e + 1) * q];
                    for k in 0..q {
                        ent[k] += grad[k];
                    }
                }
            }
        }
    }

    Ok(EmbeddingModel {
        config: config.clone(),
        entities: corpus.entities.clone(),
        entity_matrix,
        vocab,
        word_matrix,
        trained,
    })
}

/// `arccos(cos(u, v)) / pi`, in `[0, 1]`.
pub fn angular_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::domain("angular distance of a zero or non-finite vector"));
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationScope {
    /// Distances to every rival in the market.
    #[default]
    Market,
    /// Distances to rivals in the same category only.
    Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReason {
    /// The alternative has no trained entity row at or before `t`.
    NoEntityRow,
    /// Fewer than two eligible alternatives in the comparison set.
    TooFewAlternatives,
    /// Missing in a non-isolation column.
    MissingValue,
}

/// Per-observation instruments keyed like the panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSet {
    pub keys: Vec<ObsKey>,
    /// `NaN` = missing.
    pub columns: BTreeMap<String, Vec<f64>>,
    /// Reason the isolation pair is missing, if it is.
    pub isolation_mask: Vec<Option<MaskReason>>,
    /// Period of the entity row used for the alternative itself when it is
    /// not the observation's own period (latest available `<= t`).
    pub source_period: Vec<Option<Period>>,
    /// Rivals whose row came from an earlier period.
    pub rival_fallbacks: Vec<usize>,
    pub std_convention: String,
}

impl InstrumentSet {
    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.keys.len() {
            return Err(Error::Misalignment(format!(
                "instrument `{name}` has {} values for {} keys",
                values.len(),
                self.keys.len()
            )));
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }

    /// Copies every instrument column into the panel as derived columns.
    pub fn attach(&self, panel: &mut MarketPanel) -> Result<()> {
        if panel.keys != self.keys {
            return Err(Error::Misalignment("instrument keys differ from panel keys".into()));
        }
        for (name, values) in &self.columns {
            panel.set_column(name, crate::panel::ColumnRole::Derived, values.clone())?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["market".to_string(), "alt".into(), "period".into()];
        header.extend(self.columns.keys().cloned());
        header.push("isolation_mask".into());
        w.write_record(&header)?;
        for (i, k) in self.keys.iter().enumerate() {
            let mut rec = vec![k.market.clone(), k.alt.clone(), k.period.to_string()];
            rec.extend(self.columns.values().map(|c| {
                if c[i].is_nan() {
                    String::new()
                } else {
                    c[i].to_string()
                }
            }));
            rec.push(match self.isolation_mask[i] {
                None => String::new(),
                Some(MaskReason::NoEntityRow) => "no_entity_row".into(),
                Some(MaskReason::TooFewAlternatives) => "too_few_alternatives".into(),
                Some(MaskReason::MissingValue) => "missing_value".into(),
            });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and population standard deviation of angular distances from each
/// alternative to its rivals in the same market-period.
pub fn isolation_instruments(
    model: &EmbeddingModel,
    panel: &MarketPanel,
    scope: IsolationScope,
) -> InstrumentSet {
    let n = panel.len();
    let index = model.entity_index();
    // latest trained row per alternative at or before each period
    let mut history: HashMap<&str, Vec<(Period, usize)>> = HashMap::new();
    for (i, e) in model.entities.iter().enumerate() {
        if model.trained[i] && model.entity_row(i).iter().any(|&v| v != 0.0) {
            history.entry(e.alt.as_str()).or_default().push((e.period, i));
        }
    }
    for h in history.values_mut() {
        h.sort_unstable();
    }
    let lookup = |alt: &str, t: Period| -> Option<(usize, Period)> {
        if let Some(&i) = index.get(&(alt, t)) {
            if model.trained[i] && model.entity_row(i).iter().any(|&v| v != 0.0) {
                return Some((i, t));
            }
        }
        let h = history.get(alt)?;
        let pos = h.partition_point(|&(p, _)| p <= t);
        (pos > 0).then(|| (h[pos - 1].1, h[pos - 1].0))
    };

    let mut mean = vec![f64::NAN; n];
    let mut std = vec![f64::NAN; n];
    let mut mask = vec![None; n];
    let mut source_period = vec![None; n];
    let mut rival_fallbacks = vec![0; n];
    for cell in panel.cells() {
        let rows: Vec<(usize, Option<(usize, Period)>)> = cell
            .rows
            .iter()
            .map(|&i| (i, lookup(&panel.keys[i].alt, cell.period)))
            .collect();
        for &(i, own) in &rows {
            let Some((own_row, own_period)) = own else {
                mask[i] = Some(MaskReason::NoEntityRow);
                continue;
            };
            if own_period != cell.period {
                source_period[i] = Some(own_period);
            }
            let mut dists = Vec::new();
            for &(k, rival) in &rows {
                if k == i {
                    continue;
                }
                if scope == IsolationScope::Category && panel.category[k] != panel.category[i] {
                    continue;
                }
                if let Some((row, p)) = rival {
                    if p != cell.period {
                        rival_fallbacks[i] += 1;
                    }
                    let d = angular_distance(model.entity_row(own_row), model.entity_row(row))
                        .expect("nonzero rows");
                    dists.push(d);
                }
            }
            if dists.is_empty() {
                mask[i] = Some(MaskReason::TooFewAlternatives);
                continue;
            }
            let m = dists.iter().sum::<f64>() / dists.len() as f64;
            let var = dists.iter().map(|d| (d - m).powi(2)).sum::<f64>() / dists.len() as f64;
            mean[i] = m;
            std[i] = var.sqrt();
        }
    }
    InstrumentSet {
        keys: panel.keys.clone(),
        columns: BTreeMap::from([(ISOL_MEAN.to_string(), mean), (ISOL_STD.to_string(), std)]),
        isolation_mask: mask,
        source_period,
        rival_fallbacks,
        std_convention: "population".into(),
    }
}

/// Trains on the panel's reviews and computes isolation instruments.
pub fn panel_isolation(
    panel: &MarketPanel,
    config: &EmbeddingConfig,
    pretrained: Option<&WordVectors>,
    scope: IsolationScope,
) -> Result<(EmbeddingModel, InstrumentSet)> {
    let corpus = Corpus::from_panel(panel, config.doc_unit);
    let model = train_embeddings(&corpus, config, pretrained)?;
    let set = isolation_instruments(&model, panel, scope);
    Ok((model, set))
}
