//! Pixel-level confusion counts and the five challenge metrics.
//!
//! Any ratio whose denominator is zero counts as agreement and evaluates to
//! 1.0. Concretely, an empty ground truth with an empty prediction scores 1
//! everywhere, while an empty ground truth with a non-empty prediction gets
//! JA = DI = 0 and SE = 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Category;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Count agreement between two binary masks of equal shape.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("confusion", pred.shape(), gt.shape()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (binary(p)?, binary(g)?);
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn binary(v: f64) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(Error::config(format!("mask value {v} is not binary")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "AC")]
    pub ac: f64,
    #[serde(rename = "DI")]
    pub di: f64,
    #[serde(rename = "JA")]
    pub ja: f64,
    #[serde(rename = "SE")]
    pub se: f64,
    #[serde(rename = "SP")]
    pub sp: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["AC", "DI", "JA", "SE", "SP"];

    pub fn values(&self) -> [f64; 5] {
        [self.ac, self.di, self.ja, self.se, self.sp]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            ac: v[0],
            di: v[1],
            ja: v[2],
            se: v[3],
            sp: v[4],
        }
    }

    /// Values as percentages rounded to one decimal.
    pub fn percent(&self) -> Metrics {
        Metrics::from_values(self.values().map(|v| (v * 1000.0).round() / 10.0))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &Confusion) -> Metrics {
    Metrics {
        ac: ratio(c.tp + c.tn, c.total()),
        di: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
        ja: ratio(c.tp, c.tp + c.fn_ + c.fp),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub id: String,
    pub category: Category,
    pub metrics: Metrics,
}

impl Record {
    pub fn from_masks(id: impl Into<String>, category: Category, pred: &Tensor, gt: &Tensor) -> Result<Self> {
        Ok(Record {
            id: id.into(),
            category,
            metrics: compute_metrics(&confusion(pred, gt)?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<Record>,
    pub overall: Metrics,
    pub per_category: BTreeMap<Category, Metrics>,
    pub histogram: Vec<Bin>,
}

fn mean(records: &[&Record]) -> Metrics {
    let mut acc = [0.0; 5];
    for r in records {
        for (a, v) in acc.iter_mut().zip(r.metrics.values()) {
            *a += v;
        }
    }
    Metrics::from_values(acc.map(|a| a / records.len() as f64))
}

/// JA counts over `bins` equal bins on `[0, 1]`; 1.0 falls in the last bin.
pub fn ja_histogram(records: &[Record], bins: usize) -> Vec<Bin> {
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            bin_left: i as f64 / bins as f64,
            bin_right: (i + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for r in records {
        let i = ((r.metrics.ja * bins as f64) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Unweighted per-image means, overall and per category.
pub fn aggregate(records: Vec<Record>, bins: usize) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::config("cannot aggregate zero records"));
    }
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let all: Vec<&Record> = records.iter().collect();
    let overall = mean(&all);
    let per_category = Category::ALL
        .iter()
        .filter_map(|&cat| {
            let group: Vec<&Record> = records.iter().filter(|r| r.category == cat).collect();
            (!group.is_empty()).then(|| (cat, mean(&group)))
        })
        .collect();
    let histogram = ja_histogram(&records, bins);
    Ok(MetricsReport {
        records,
        overall,
        per_category,
        histogram,
    })
}

impl MetricsReport {
    /// `{"overall": {AC, DI, JA, SE, SP}, "<category>": {...}}` in percent.
    pub fn aggregates_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("overall".into(), serde_json::json!(self.overall.percent()));
        for (cat, m) in &self.per_category {
            map.insert(cat.to_string(), serde_json::json!(m.percent()));
        }
        serde_json::Value::Object(map)
    }

    pub fn write_records_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["id", "category", "AC", "DI", "JA", "SE", "SP"])
            .map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), r.category.to_string()];
            row.extend(r.metrics.values().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.aggregates_json()).expect("metrics serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for b in &self.histogram {
            w.serialize(b).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(v: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn worked_example() {
        let c = confusion(&mask(&[1., 1., 0., 0.]), &mask(&[1., 0., 0., 0.])).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 0, tn: 2 });
        let m = compute_metrics(&c);
        assert!(close(m.ja, 0.5) && close(m.di, 2.0 / 3.0) && close(m.ac, 0.75));
        assert!(close(m.se, 1.0) && close(m.sp, 2.0 / 3.0));
    }

    #[test]
    fn perfect_and_inverse() {
        let g = mask(&[1., 0., 1., 1.]);
        let c = confusion(&g, &g).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(compute_metrics(&c).values(), [1.0; 5]);
        let inv = g.map(|v| 1.0 - v);
        let c = confusion(&inv, &g).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn degenerate_conventions() {
        let empty = mask(&[0.; 4]);
        assert_eq!(compute_metrics(&confusion(&empty, &empty).unwrap()).values(), [1.0; 5]);
        let m = compute_metrics(&confusion(&mask(&[1., 0., 0., 0.]), &empty).unwrap());
        assert_eq!((m.ja, m.di, m.se), (0.0, 0.0, 1.0));
    }

    #[test]
    fn shape_and_value_errors() {
        assert!(confusion(&mask(&[1.]), &mask(&[1., 0.])).is_err());
        assert!(confusion(&mask(&[0.5]), &mask(&[1.])).is_err());
    }

    fn rec(id: &str, cat: Category, ja: f64) -> Record {
        Record {
            id: id.into(),
            category: cat,
            metrics: Metrics::from_values([ja; 5]),
        }
    }

    #[test]
    fn aggregation() {
        let single = aggregate(vec![rec("a", Category::Melanoma, 0.3)], 10).unwrap();
        assert_eq!(single.overall, single.records[0].metrics);
        let r = aggregate(
            vec![rec("a", Category::Melanoma, 0.4), rec("b", Category::NonMelanoma, 0.6)],
            10,
        )
        .unwrap();
        assert!(close(r.overall.ja, 0.5));
        assert!(close(r.per_category[&Category::Melanoma].ja, 0.4));
        assert!(aggregate(vec![], 10).is_err());
    }

    #[test]
    fn histogram_conserves_count() {
        let records: Vec<Record> = (0..8).map(|i| rec("x", Category::Melanoma, i as f64 / 7.0)).collect();
        let r = aggregate(records, 10).unwrap();
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 8);
        assert_eq!(r.histogram[9].count, 1);
    }

    #[test]
    fn json_groups_have_exact_keys() {
        let r = aggregate(vec![rec("a", Category::Melanoma, 0.8765)], 4).unwrap();
        let j = r.aggregates_json();
        for group in ["overall", "melanoma-like"] {
            let keys: Vec<&String> = j[group].as_object().unwrap().keys().collect();
            assert_eq!(keys, ["AC", "DI", "JA", "SE", "SP"]);
        }
        assert_eq!(j["overall"]["JA"], 87.7);
    }
}
