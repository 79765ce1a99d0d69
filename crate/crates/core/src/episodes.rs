//! Datasets, episodic sampling, the synthetic paired-modality generator and
//! the plain-text embedding file format.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Lu, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// Visual features per sample and one semantic vector per class. Every class
/// belongs to exactly one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_ids: Vec<String>,
    features: Matrix,
    labels: Vec<usize>,
    class_ids: Vec<u64>,
    class_attributes: Matrix,
    class_splits: Vec<Split>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        sample_ids: Vec<String>,
        features: Matrix,
        labels: Vec<usize>,
        class_ids: Vec<u64>,
        class_attributes: Matrix,
        class_splits: Vec<Split>,
    ) -> Result<Self> {
        let classes = class_ids.len();
        if class_attributes.rows() != classes || class_splits.len() != classes {
            return Err(Error::invalid("one attribute row and split per class required"));
        }
        if features.rows() != labels.len() || sample_ids.len() != labels.len() {
            return Err(Error::invalid("one label and id per feature row required"));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            let slot = by_class.get_mut(l).ok_or_else(|| {
                Error::invalid(format!("sample {i} references class index {l} without attributes"))
            })?;
            slot.push(i);
        }
        Ok(Self {
            sample_ids,
            features,
            labels,
            class_ids,
            class_attributes,
            class_splits,
            by_class,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.class_attributes.cols()
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_attributes(&self) -> &Matrix {
        &self.class_attributes
    }

    pub fn class_split(&self, class: usize) -> Split {
        self.class_splits[class]
    }

    pub fn class_id(&self, class: usize) -> u64 {
        self.class_ids[class]
    }

    /// Class indices belonging to `split`, in dataset order.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.class_count())
            .filter(|&c| self.class_splits[c] == split)
            .collect()
    }

    pub fn samples_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    /// Writes the features and attributes files.
    pub fn write_files(&self, features_path: &Path, attributes_path: &Path) -> Result<()> {
        let write = |path: &Path, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            body(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))
        };
        write(features_path, &|w| {
            writeln!(w, "#features {} {}", self.sample_count(), self.feature_dim())?;
            for (i, id) in self.sample_ids.iter().enumerate() {
                write!(w, "{} {}", id, self.class_ids[self.labels[i]])?;
                for v in self.features.row(i) {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
        write(attributes_path, &|w| {
            writeln!(w, "#attributes {} {}", self.class_count(), self.attribute_dim())?;
            for c in 0..self.class_count() {
                write!(w, "{} {}", self.class_ids[c], self.class_splits[c])?;
                for v in self.class_attributes.row(c) {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })
    }
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Non-empty lines with 1-based numbers, split on single spaces.
fn records(path: &Path, text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(' ').map(str::to_owned).collect();
        if fields.iter().any(String::is_empty) {
            return Err(format_err(path, i + 1, "fields must be separated by single spaces"));
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

fn parse_header(path: &Path, recs: &[(usize, Vec<String>)], tag: &str) -> Result<(usize, usize)> {
    let Some((line, fields)) = recs.first() else {
        return Err(format_err(path, 1, format!("missing `{tag}` header")));
    };
    if fields.len() != 3 || fields[0] != tag {
        return Err(format_err(path, *line, format!("malformed header, expected `{tag} <count> <dim>`")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, *line, format!("bad header number `{s}`")))
    };
    Ok((num(&fields[1])?, num(&fields[2])?))
}

fn parse_floats(path: &Path, line: usize, fields: &[String]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| match f.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format_err(path, line, format!("bad number `{f}`"))),
        })
        .collect()
}

/// Reads a features file and an attributes file into a [`Dataset`].
pub fn load_embeddings(features_path: &Path, attributes_path: &Path) -> Result<Dataset> {
    let attr_text = fs::read_to_string(attributes_path).map_err(|e| Error::io(attributes_path, e))?;
    let feat_text = fs::read_to_string(features_path).map_err(|e| Error::io(features_path, e))?;

    let recs = records(attributes_path, &attr_text)?;
    let (class_count, d_a) = parse_header(attributes_path, &recs, "#attributes")?;
    let body = &recs[1..];
    if body.len() != class_count {
        let line = body.last().map_or(recs[0].0, |r| r.0);
        return Err(format_err(
            attributes_path,
            line,
            format!("header declares {class_count} classes, found {}", body.len()),
        ));
    }
    let mut class_ids = Vec::with_capacity(class_count);
    let mut splits = Vec::with_capacity(class_count);
    let mut attrs = Vec::with_capacity(class_count * d_a);
    let mut index_of = HashMap::new();
    for (line, fields) in body {
        if fields.len() != d_a + 2 {
            return Err(format_err(
                attributes_path,
                *line,
                format!("expected {} fields, found {}", d_a + 2, fields.len()),
            ));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| format_err(attributes_path, *line, format!("bad class id `{}`", fields[0])))?;
        let split: Split = fields[1]
            .parse()
            .map_err(|m: String| format_err(attributes_path, *line, m))?;
        if index_of.insert(id, class_ids.len()).is_some() {
            return Err(format_err(attributes_path, *line, format!("duplicate class id {id}")));
        }
        class_ids.push(id);
        splits.push(split);
        attrs.extend(parse_floats(attributes_path, *line, &fields[2..])?);
    }

    let recs = records(features_path, &feat_text)?;
    let (sample_count, d_v) = parse_header(features_path, &recs, "#features")?;
    let body = &recs[1..];
    if body.len() != sample_count {
        let line = body.last().map_or(recs[0].0, |r| r.0);
        return Err(format_err(
            features_path,
            line,
            format!("header declares {sample_count} samples, found {}", body.len()),
        ));
    }
    let mut ids = Vec::with_capacity(sample_count);
    let mut labels = Vec::with_capacity(sample_count);
    let mut feats = Vec::with_capacity(sample_count * d_v);
    for (line, fields) in body {
        if fields.len() != d_v + 2 {
            return Err(format_err(
                features_path,
                *line,
                format!("expected {} fields, found {}", d_v + 2, fields.len()),
            ));
        }
        let class: u64 = fields[1]
            .parse()
            .map_err(|_| format_err(features_path, *line, format!("bad class id `{}`", fields[1])))?;
        let &label = index_of.get(&class).ok_or_else(|| {
            format_err(features_path, *line, format!("class id {class} is not in the attributes file"))
        })?;
        ids.push(fields[0].clone());
        labels.push(label);
        feats.extend(parse_floats(features_path, *line, &fields[2..])?);
    }

    Dataset::new(
        ids,
        Matrix::new(sample_count, d_v, feats)?,
        labels,
        class_ids,
        Matrix::new(class_count, d_a, attrs)?,
        splits,
    )
}

/// One N-way K-shot task. Support rows are class-major: the first K rows are
/// episode class 0, and so on. Query labels are only reachable through
/// [`Episode::query_labels_for_eval`].
#[derive(Debug, Clone, Serialize)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    support_features: Matrix,
    support_attributes: Matrix,
    support_labels: Vec<usize>,
    query_features: Matrix,
    #[serde(skip)]
    query_labels: Vec<usize>,
}

impl Episode {
    pub fn new(
        n_way: usize,
        k_shot: usize,
        support_features: Matrix,
        support_attributes: Matrix,
        support_labels: Vec<usize>,
        query_features: Matrix,
        query_labels: Vec<usize>,
    ) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::InvalidEpisode("N and K must be positive".into()));
        }
        let nk = n_way * k_shot;
        if support_features.rows() != nk || support_attributes.rows() != nk || support_labels.len() != nk {
            return Err(Error::InvalidEpisode(format!(
                "expected {nk} support samples with features, attributes and labels"
            )));
        }
        for class in 0..n_way {
            let count = support_labels.iter().filter(|&&l| l == class).count();
            if count != k_shot {
                return Err(Error::InvalidEpisode(format!(
                    "class {class} has {count} support samples, expected {k_shot}"
                )));
            }
        }
        if query_features.rows() != query_labels.len() {
            return Err(Error::InvalidEpisode("one label per query required".into()));
        }
        if query_features.cols() != support_features.cols() {
            return Err(Error::InvalidEpisode("query and support feature dims differ".into()));
        }
        if let Some(&bad) = query_labels.iter().find(|&&l| l >= n_way) {
            return Err(Error::InvalidEpisode(format!("query label {bad} outside 0..{n_way}")));
        }
        Ok(Self {
            n_way,
            k_shot,
            support_features,
            support_attributes,
            support_labels,
            query_features,
            query_labels,
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn support_count(&self) -> usize {
        self.support_labels.len()
    }

    pub fn query_count(&self) -> usize {
        self.query_features.rows()
    }

    pub fn support_features(&self) -> &Matrix {
        &self.support_features
    }

    pub fn support_attributes(&self) -> &Matrix {
        &self.support_attributes
    }

    pub fn support_labels(&self) -> &[usize] {
        &self.support_labels
    }

    pub fn query_features(&self) -> &Matrix {
        &self.query_features
    }

    /// Ground truth for scoring and for the training loss. The forward pass
    /// itself never reads these.
    pub fn query_labels_for_eval(&self) -> &[usize] {
        &self.query_labels
    }
}

/// Draws an N-way K-shot episode with `t` queries (`t / n` per class) from
/// the classes of `split`, uniformly and without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    split: Split,
    n: usize,
    k: usize,
    t: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig("N and K must be positive".into()));
    }
    if t % n != 0 {
        return Err(Error::InvalidConfig(format!(
            "query count {t} is not a multiple of N = {n}"
        )));
    }
    let per_class_queries = t / n;
    let classes = ds.classes_in(split);
    if classes.len() < n {
        return Err(Error::InvalidConfig(format!(
            "split {split} has {} classes, episode needs {n}",
            classes.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, classes.len(), n)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let need = k + per_class_queries;
    let dv = ds.feature_dim();
    let da = ds.attribute_dim();
    let mut sf = Vec::with_capacity(n * k * dv);
    let mut sa = Vec::with_capacity(n * k * da);
    let mut sl = Vec::with_capacity(n * k);
    let mut qf = Vec::with_capacity(t * dv);
    let mut ql = Vec::with_capacity(t);
    for (label, &class) in chosen.iter().enumerate() {
        let pool = ds.samples_of(class);
        if pool.len() < need {
            return Err(Error::InvalidConfig(format!(
                "class {} has {} samples, episode needs {need}",
                ds.class_id(class),
                pool.len()
            )));
        }
        let picks = index::sample(rng, pool.len(), need).into_vec();
        for (slot, &p) in picks.iter().enumerate() {
            let sample = pool[p];
            if slot < k {
                sf.extend_from_slice(ds.features.row(sample));
                sa.extend_from_slice(ds.class_attributes.row(class));
                sl.push(label);
            } else {
                qf.extend_from_slice(ds.features.row(sample));
                ql.push(label);
            }
        }
    }
    Episode::new(
        n,
        k,
        Matrix::from_vec_unchecked(n * k, dv, sf),
        Matrix::from_vec_unchecked(n * k, da, sa),
        sl,
        Matrix::from_vec_unchecked(t, dv, qf),
        ql,
    )
}

/// Parameters of the synthetic paired-modality generator.
///
/// Each class gets a sparse binary attribute vector `a`. Its visual centre is
/// `M·a + perturbation·ε_c`, with `M` a fixed Gaussian map scaled by
/// `coupling / √d_a`, and each sample adds `noise·ε` on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub noise: f64,
    pub perturbation: f64,
    pub coupling: f64,
    /// Probability that an attribute is off.
    pub sparsity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_classes: 50,
            val_classes: 10,
            test_classes: 20,
            samples_per_class: 40,
            d_v: 32,
            d_a: 16,
            noise: 0.75,
            perturbation: 0.25,
            coupling: 1.0,
            sparsity: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let classes = self.train_classes + self.val_classes + self.test_classes;
        if classes == 0 {
            return Err(Error::InvalidConfig("synthetic spec has no classes".into()));
        }
        if self.samples_per_class == 0 || self.d_v == 0 || self.d_a == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_class, d_v and d_a must be positive".into(),
            ));
        }
        if !(self.noise > 0.0) {
            return Err(Error::InvalidConfig(format!("noise must be > 0, got {}", self.noise)));
        }
        if !(self.perturbation >= 0.0) || !(self.coupling > 0.0) {
            return Err(Error::InvalidConfig(
                "perturbation must be >= 0 and coupling > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig(format!(
                "sparsity must lie in [0, 1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Rank test on the Gram matrix of the smaller side.
fn is_full_rank(m: &Matrix) -> bool {
    let gram = if m.rows() >= m.cols() {
        m.transpose().matmul(m)
    } else {
        m.matmul(&m.transpose())
    };
    gram.is_ok_and(|g| Lu::factor(&g).is_ok())
}

/// Deterministic synthetic dataset for `seed`. Class ids are `0..C`, with
/// train classes first, then val, then test.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.train_classes + spec.val_classes + spec.test_classes;
    let scale = spec.coupling / (spec.d_a as f64).sqrt();
    let coupling = Matrix::from_fn(spec.d_v, spec.d_a, |_, _| scale * gaussian(&mut rng));
    if !is_full_rank(&coupling) {
        return Err(Error::InvalidConfig("coupling map is rank deficient".into()));
    }

    let mut attrs = Vec::with_capacity(classes * spec.d_a);
    for _ in 0..classes {
        let mut row: Vec<f64> = (0..spec.d_a)
            .map(|_| if rng.random::<f64>() < spec.sparsity { 0.0 } else { 1.0 })
            .collect();
        if row.iter().all(|&v| v == 0.0) {
            let k = rng.random_range(0..spec.d_a);
            row[k] = 1.0;
        }
        attrs.extend(row);
    }
    let attributes = Matrix::from_vec_unchecked(classes, spec.d_a, attrs);
    let centres = attributes.matmul(&coupling.transpose())?;

    let n = classes * spec.samples_per_class;
    let mut feats = Vec::with_capacity(n * spec.d_v);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for c in 0..classes {
        let centre: Vec<f64> = centres
            .row(c)
            .iter()
            .map(|&v| v + spec.perturbation * gaussian(&mut rng))
            .collect();
        for s in 0..spec.samples_per_class {
            feats.extend(centre.iter().map(|&v| v + spec.noise * gaussian(&mut rng)));
            labels.push(c);
            ids.push(format!("s{}", c * spec.samples_per_class + s));
        }
    }
    let splits = (0..classes)
        .map(|c| {
            if c < spec.train_classes {
                Split::Train
            } else if c < spec.train_classes + spec.val_classes {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    Dataset::new(
        ids,
        Matrix::from_vec_unchecked(n, spec.d_v, feats),
        labels,
        (0..classes as u64).collect(),
        attributes,
        splits,
    )
}
