use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::micronet::Matrix;
use crate::{Error, Result};

/// Labelled feature rows with labels dense in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    Csv { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Fraction of every class that goes to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Unit-covariance Gaussian clusters whose means lie on a sphere of radius
/// `separation`, split 80/20 per class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs classes, dim and per_class >= 1".into(),
        ));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Config(format!(
            "separation must be a nonnegative finite number, got {}",
            spec.separation
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm * spec.separation).collect();
            }
        })
        .collect();

    let n_train = ((spec.per_class as f64 * TRAIN_FRACTION).round() as usize).max(1);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (label, mean) in means.iter().enumerate() {
        for i in 0..spec.per_class {
            let row: Vec<f64> = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let split = if i < n_train { &mut train } else { &mut test };
            split.0.extend(row);
            split.1.push(label);
        }
    }
    let build = |(data, labels): (Vec<f64>, Vec<usize>)| -> Result<Samples> {
        Ok(Samples {
            features: Matrix::from_vec(labels.len(), spec.dim, data)?,
            labels,
            num_classes: spec.classes,
        })
    };
    Ok(Dataset {
        train: build(train)?,
        test: build(test)?,
        provenance: Provenance::Synthetic(spec.clone()),
    })
}

/// Reads `f0,...,f{D-1},label` rows.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Samples> {
    let path = path.as_ref();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse_err(1, "missing column `label`".into()))?;
    if label_col + 1 != headers.len() {
        return Err(parse_err(
            1,
            "column `label` must be the last column".into(),
        ));
    }
    for (i, h) in headers.iter().take(label_col).enumerate() {
        if h.trim() != format!("f{i}") {
            return Err(parse_err(1, format!("expected column `f{i}`, found `{h}`")));
        }
    }
    let dim = label_col;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} cells, found {}", dim + 1, record.len()),
            ));
        }
        for (i, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{i}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{i}: non-finite value")));
            }
            data.push(v);
        }
        let cell = &record[dim];
        let label: usize = cell
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("column label: `{cell}` is not a class index")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    let num_classes = distinct.len();
    if distinct.iter().copied().ne(0..num_classes) {
        return Err(parse_err(
            1,
            format!(
                "labels {:?} are not dense in 0..{num_classes}; relabel them to 0..{}",
                distinct,
                num_classes - 1
            ),
        ));
    }
    Ok(Samples {
        features: Matrix::from_vec(labels.len(), dim, data)?,
        labels,
        num_classes,
    })
}

/// Writes samples in the `load_csv` format with LF line endings.
pub fn write_csv(samples: &Samples, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header: Vec<String> = (0..samples.dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (r, label) in samples.labels.iter().enumerate() {
        let mut row: Vec<String> = samples.features.row(r).iter().map(f64::to_string).collect();
        row.push(label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
