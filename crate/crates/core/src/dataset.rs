//! Labeled covariate/target pairs, deterministic fold splits and the CSV
//! exchange format (`x0..x{p-1}, y0..y{d-1}`).

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PcpError, Result};
use crate::rng::{self, Domain};

/// One observation: covariates `x` (length p) and target `y` (length d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(PcpError::data("covariate and target must be non-empty"));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(PcpError::data("non-finite entry in labeled point"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fold {
    Train,
    Val,
    Cal,
    Test,
}

/// Fractions of the data assigned to each fold. The remainder (if the
/// fractions sum to less than one) is left unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.1,
            cal: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.cal, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(PcpError::config("split fractions must be finite and >= 0"));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(PcpError::config("split fractions sum to more than 1"));
        }
        Ok(())
    }

    fn count(frac: f64, n: usize) -> usize {
        (frac * n as f64 + 1e-9).floor() as usize
    }
}

/// Disjoint index lists into the point list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` with the split stream of `seed` and cuts it into
    /// consecutive folds.
    pub fn generate(n: usize, fractions: &SplitFractions, seed: u64) -> Result<Self> {
        fractions.validate()?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, Domain::Split, 0));

        let sizes = [
            SplitFractions::count(fractions.train, n),
            SplitFractions::count(fractions.val, n),
            SplitFractions::count(fractions.cal, n),
            SplitFractions::count(fractions.test, n),
        ];
        let mut cursor = 0;
        let mut take = |len: usize| {
            let part = order[cursor..cursor + len].to_vec();
            cursor += len;
            part
        };
        Ok(Self {
            train: take(sizes[0]),
            val: take(sizes[1]),
            cal: take(sizes[2]),
            test: take(sizes[3]),
        })
    }

    pub fn fold(&self, fold: Fold) -> &[usize] {
        match fold {
            Fold::Train => &self.train,
            Fold::Val => &self.val,
            Fold::Cal => &self.cal,
            Fold::Test => &self.test,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.cal)
            .chain(&self.test)
        {
            if i >= n {
                return Err(PcpError::data(format!("split index {i} out of range (n = {n})")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(PcpError::data(format!("split index {i} appears twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    points: Vec<LabeledPoint>,
    p: usize,
    d: usize,
    splits: Splits,
    seed: u64,
}

impl LabeledDataset {
    /// Builds an unsplit dataset; every point must share the same (p, d).
    pub fn new(points: Vec<LabeledPoint>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| PcpError::data("dataset has no points"))?;
        let (p, d) = (first.x.len(), first.y.len());
        for pt in &points {
            PcpError::check_dim(p, pt.x.len())?;
            PcpError::check_dim(d, pt.y.len())?;
        }
        Ok(Self {
            points,
            p,
            d,
            splits: Splits::default(),
            seed: 0,
        })
    }

    /// Re-splits the points; the split is a pure function of `(n, seed, fractions)`.
    pub fn split(mut self, fractions: &SplitFractions, seed: u64) -> Result<Self> {
        self.splits = Splits::generate(self.points.len(), fractions, seed)?;
        self.seed = seed;
        Ok(self)
    }

    /// Installs explicit split indices.
    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.points.len())?;
        self.splits = splits;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold(&self, fold: Fold) -> Vec<LabeledPoint> {
        self.splits
            .fold(fold)
            .iter()
            .map(|&i| self.points[i].clone())
            .collect()
    }

    /// Keeps only the listed target coordinates, preserving the split.
    pub fn select_targets(&self, targets: &[usize]) -> Result<Self> {
        if targets.is_empty() {
            return Err(PcpError::config("at least one target column must be kept"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.d) {
            return Err(PcpError::config(format!(
                "target column {bad} out of range (d = {})",
                self.d
            )));
        }
        let points = self
            .points
            .iter()
            .map(|pt| LabeledPoint {
                x: pt.x.clone(),
                y: targets.iter().map(|&t| pt.y[t]).collect(),
            })
            .collect();
        Ok(Self {
            points,
            p: self.p,
            d: targets.len(),
            splits: self.splits.clone(),
            seed: self.seed,
        })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let (p, d) = parse_header(&headers)?;

        let mut points = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != p + d {
                return Err(PcpError::data(format!(
                    "row {}: expected {} columns, found {}",
                    row + 1,
                    p + d,
                    record.len()
                )));
            }
            let mut values = Vec::with_capacity(p + d);
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    PcpError::data(format!("row {}: cannot parse {field:?} as a real", row + 1))
                })?;
                values.push(v);
            }
            let y = values.split_off(p);
            points.push(
                LabeledPoint::new(values, y)
                    .map_err(|e| PcpError::data(format!("row {}: {e}", row + 1)))?,
            );
        }
        Self::new(points)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.p)
            .map(|j| format!("x{j}"))
            .chain((0..self.d).map(|j| format!("y{j}")))
            .collect();
        wtr.write_record(&header)?;
        for pt in &self.points {
            wtr.write_record(pt.x.iter().chain(pt.y.iter()).map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn parse_header(headers: &csv::StringRecord) -> Result<(usize, usize)> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let p = names.iter().take_while(|n| n.starts_with('x')).count();
    let d = names.len() - p;
    if p == 0 || d == 0 {
        return Err(PcpError::data("header must contain x0.. and y0.. columns"));
    }
    for (j, name) in names[..p].iter().enumerate() {
        if *name != format!("x{j}") {
            return Err(PcpError::data(format!("expected column x{j}, found {name:?}")));
        }
    }
    for (j, name) in names[p..].iter().enumerate() {
        if *name != format!("y{j}") {
            return Err(PcpError::data(format!("expected column y{j}, found {name:?}")));
        }
    }
    Ok((p, d))
}
