use crate::micronet::Matrix;
use crate::{Error, Result};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of queries whose `k` nearest neighbours (self excluded, ties by
/// lower index) contain a sample with the same label.
pub fn recall_at_k(embeddings: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "recall@k needs at least two samples".into(),
        ));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "k must lie in 1..{n}, got {k}"
        )));
    }
    let mut hits = 0usize;
    let mut neighbours: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        let query = embeddings.row(q);
        neighbours.clear();
        neighbours.extend(
            (0..n)
                .filter(|&j| j != q)
                .map(|j| (squared_distance(query, embeddings.row(j)), j)),
        );
        if neighbours.iter().any(|(d, _)| d.is_nan()) {
            return Err(Error::NonFinite("embedding distance".into()));
        }
        neighbours.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        if neighbours[..k].iter().any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
