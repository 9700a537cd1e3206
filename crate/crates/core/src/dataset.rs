//! Labeled regression datasets, train/val/test splits and the CSV format.
//!
//! CSV layout: a header `f0,...,f{d-1},target` with an optional `split`
//! column (`train`, `val` or `test`). When the split column is absent rows
//! are split at random 7 : 1.5 : 1.5.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ensure_finite;
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != targets.len() {
            return Err(Error::shape(format!("{} targets", features.len()), targets.len()));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::InvalidInput("feature rows are empty".into()));
        }
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::shape(format!("row {i} of width {dim}"), row.len()));
            }
            ensure_finite(row, "features")?;
        }
        ensure_finite(&targets, "targets")?;
        Ok(LabeledDataset {
            name: name.into(),
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features.iter().map(Vec::as_slice).zip(self.targets.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        LabeledDataset::new(
            self.name.clone(),
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.targets[i]).collect(),
        )
    }

    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        LabeledDataset::new(self.name.clone(), self.features.clone(), targets)
    }

    /// Concatenates datasets with equal input dimension.
    pub fn concat(name: impl Into<String>, parts: &[&LabeledDataset]) -> Result<Self> {
        let features = parts.iter().flat_map(|p| p.features.iter().cloned()).collect();
        let targets = parts.iter().flat_map(|p| p.targets.iter().copied()).collect();
        LabeledDataset::new(name, features, targets)
    }

    /// Random split by `ratios` (train, val, test), deterministic in `seed`.
    /// Every split receives at least one row.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
        let m = self.len();
        if m < 3 {
            return Err(Error::TooFewSamples { needed: 3, got: m });
        }
        let total: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(*r > 0.0)) || !total.is_finite() {
            return Err(Error::InvalidInput(format!("bad split ratios {ratios:?}")));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, &[0x5_9117])));
        let n_train = ((ratios[0] / total * m as f64).round() as usize).clamp(1, m - 2);
        let n_val = ((ratios[1] / total * m as f64).round() as usize).clamp(1, m - n_train - 1);
        let (train, rest) = order.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        Ok(SplitDataset {
            train: self.subset(train)?,
            val: self.subset(val)?,
            test: self.subset(test)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl SplitDataset {
    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn name(&self) -> &str {
        &self.train.name
    }
}

/// Affine map to zero-mean, unit-variance targets, fit on a train split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler { mean: 0.0, std: 1.0 };

    /// Population statistics of `targets`; a constant column gets `std = 1`.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(TargetScaler {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        })
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn standardize_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.standardize(y)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Rows of a CSV file, with split tags when the file carries them.
#[derive(Debug, Clone)]
pub struct CsvData {
    pub dataset: LabeledDataset,
    pub splits: Option<Vec<SplitTag>>,
}

impl CsvData {
    /// Honors the split column if present, otherwise splits at random.
    pub fn into_split(self, seed: u64) -> Result<SplitDataset> {
        match self.splits {
            None => self.dataset.split(DEFAULT_SPLIT_RATIOS, seed),
            Some(tags) => {
                let pick = |want: SplitTag| -> Vec<usize> {
                    tags.iter()
                        .enumerate()
                        .filter(|(_, t)| **t == want)
                        .map(|(i, _)| i)
                        .collect()
                };
                let part = |want: SplitTag, label: &str| -> Result<LabeledDataset> {
                    let idx = pick(want);
                    if idx.is_empty() {
                        return Err(Error::InvalidInput(format!("split column has no `{label}` rows")));
                    }
                    self.dataset.subset(&idx)
                };
                Ok(SplitDataset {
                    train: part(SplitTag::Train, "train")?,
                    val: part(SplitTag::Val, "val")?,
                    test: part(SplitTag::Test, "test")?,
                })
            }
        }
    }
}

pub fn read_csv(path: &Path) -> Result<CsvData> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(file, &shown, name)
}

pub fn parse_csv(reader: impl std::io::Read, source: &str, name: String) -> Result<CsvData> {
    let err = |row: usize, column: usize, message: String| Error::Csv {
        path: source.to_string(),
        row,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, 0, e.to_string()))?.clone();

    let mut feature_cols = Vec::new();
    let (mut target_col, mut split_col) = (None, None);
    for (c, field) in header.iter().enumerate() {
        match field {
            "target" => target_col = Some(c),
            "split" => split_col = Some(c),
            f => match f.strip_prefix('f').and_then(|n| n.parse::<usize>().ok()) {
                Some(k) if k == feature_cols.len() => feature_cols.push(c),
                _ => {
                    return Err(err(
                        1,
                        c + 1,
                        format!("unexpected header `{f}`, expected f{}", feature_cols.len()),
                    ))
                }
            },
        }
    }
    let target_col = target_col.ok_or_else(|| err(1, 0, "missing `target` column".into()))?;
    if feature_cols.is_empty() {
        return Err(err(1, 0, "no feature columns".into()));
    }

    let parse = |record: &csv::StringRecord, row: usize, c: usize| -> Result<f64> {
        let raw = record.get(c).unwrap_or("");
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(row, c + 1, format!("`{raw}` is not a finite number"))),
        }
    };

    let (mut features, mut targets, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| err(row, 0, e.to_string()))?;
        if record.len() != header.len() {
            return Err(err(
                row,
                record.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        features.push(
            feature_cols
                .iter()
                .map(|&c| parse(&record, row, c))
                .collect::<Result<Vec<_>>>()?,
        );
        targets.push(parse(&record, row, target_col)?);
        if let Some(c) = split_col {
            splits.push(match record.get(c).unwrap_or("") {
                "train" => SplitTag::Train,
                "val" => SplitTag::Val,
                "test" => SplitTag::Test,
                other => return Err(err(row, c + 1, format!("unknown split `{other}`"))),
            });
        }
    }
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(CsvData {
        dataset: LabeledDataset::new(name, features, targets)?,
        splits: split_col.map(|_| splits),
    })
}

/// Writes `data` in the CSV layout above, tagging rows when `splits` is given.
pub fn write_csv(path: &Path, data: &LabeledDataset, splits: Option<&[SplitTag]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..data.input_dim()).map(|i| format!("f{i}")).collect();
    header.push("target".into());
    if splits.is_some() {
        header.push("split".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    for (i, (x, y)) in data.iter().enumerate() {
        let mut record: Vec<String> = x.iter().map(f64::to_string).collect();
        record.push(y.to_string());
        if let Some(tags) = splits {
            record.push(
                match tags[i] {
                    SplitTag::Train => "train",
                    SplitTag::Val => "val",
                    SplitTag::Test => "test",
                }
                .into(),
            );
        }
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a split dataset as one CSV with a `split` column.
pub fn write_split_csv(path: &Path, data: &SplitDataset) -> Result<()> {
    let all = LabeledDataset::concat(data.name(), &[&data.train, &data.val, &data.test])?;
    let tags: Vec<SplitTag> = std::iter::repeat_n(SplitTag::Train, data.train.len())
        .chain(std::iter::repeat_n(SplitTag::Val, data.val.len()))
        .chain(std::iter::repeat_n(SplitTag::Test, data.test.len()))
        .collect();
    write_csv(path, &all, Some(&tags))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(m: usize) -> LabeledDataset {
        LabeledDataset::new(
            "toy",
            (0..m).map(|i| vec![i as f64, 1.0]).collect(),
            (0..m).map(|i| i as f64 * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let data = toy(100);
        let s = data.split(DEFAULT_SPLIT_RATIOS, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        assert_eq!(s, data.split(DEFAULT_SPLIT_RATIOS, 3).unwrap());
        let mut seen: Vec<f64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.features().iter().map(|r| r[0]))
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        assert_ne!(s.train, data.split(DEFAULT_SPLIT_RATIOS, 4).unwrap().train);
        assert!(toy(2).split(DEFAULT_SPLIT_RATIOS, 0).is_err());
        let tiny = toy(3).split(DEFAULT_SPLIT_RATIOS, 0).unwrap();
        assert_eq!((tiny.train.len(), tiny.val.len(), tiny.test.len()), (1, 1, 1));
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(LabeledDataset::new("e", vec![], vec![]), Err(Error::EmptyDataset)));
        assert!(LabeledDataset::new("r", vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(LabeledDataset::new("n", vec![vec![1.0]], vec![f64::NAN]).is_err());
    }

    #[test]
    fn csv_round_trip_with_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let split = toy(20).split(DEFAULT_SPLIT_RATIOS, 1).unwrap();
        write_split_csv(&path, &split).unwrap();
        let back = read_csv(&path).unwrap().into_split(99).unwrap();
        assert_eq!(back.train.features(), split.train.features());
        assert_eq!(back.test.targets(), split.test.targets());
    }

    #[test]
    fn csv_diagnostics() {
        let bad = "f0,f1,target\n1,2,3\n4,x,6\n";
        match parse_csv(bad.as_bytes(), "mem", "m".into()) {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        let bad = "f0,f2,target\n1,2,3\n";
        assert!(matches!(parse_csv(bad.as_bytes(), "mem", "m".into()), Err(Error::Csv { row: 1, column: 2, .. })));
        let bad = "f0,f1\n1,2\n";
        assert!(matches!(parse_csv(bad.as_bytes(), "mem", "m".into()), Err(Error::Csv { row: 1, .. })));
        let bad = "f0,target,split\n1,2,dev\n";
        assert!(matches!(parse_csv(bad.as_bytes(), "mem", "m".into()), Err(Error::Csv { row: 2, column: 3, .. })));
        let ok = "target,f0\n1.5,2\n";
        let d = parse_csv(ok.as_bytes(), "mem", "m".into()).unwrap();
        assert_eq!(d.dataset.targets(), &[1.5]);
        assert_eq!(d.dataset.features(), &[vec![2.0]]);
    }

    proptest! {
        #[test]
        fn scaler_round_trip(ys in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            let s = TargetScaler::fit(&ys).unwrap();
            for &y in &ys {
                prop_assert!((s.destandardize(s.standardize(y)) - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
