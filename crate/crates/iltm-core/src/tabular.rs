//! Dataset containers, schema and split I/O, label encoding, and metrics.
//!
//! A [`TabularTask`] owns a column-major table of numeric and categorical
//! cells plus a classification or regression target and named row splits.
//! Numeric cells use NaN as the missing marker; categorical cells store dense
//! vocabulary indices with two reserved values: `vocab_len` for out-of-vocab
//! ("unknown") and [`CAT_MISSING`] for absent cells. Missing categoricals are
//! deliberately distinct from unknown ones so they can act as their own
//! category downstream.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::collections::HashSet;
use std::path::Path;

/// Reserved index marking a missing categorical cell.
pub const CAT_MISSING: u32 = u32::MAX;

/// Placeholder written for out-of-vocabulary categorical cells when a table
/// is re-serialized; parses back to the unknown index.
pub const UNKNOWN_TOKEN: &str = "__unknown__";

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Numeric,
    /// Declared vocabulary; cell indices 0..len-1 refer into it.
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    /// Class label vocabulary; labels are encoded 1..=K in vocabulary order.
    Classification(Vec<String>),
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub features: Vec<ColumnSpec>,
    pub target_name: String,
    pub target: TargetKind,
}

impl Schema {
    pub fn class_count(&self) -> usize {
        match &self.target {
            TargetKind::Classification(v) => v.len(),
            TargetKind::Regression => 0,
        }
    }

    /// Parse the sidecar schema text: one line per column, whitespace
    /// separated: `name numeric`, `name categorical v1 v2 ...`, or
    /// `name target [class1 class2 ...]` (no classes = regression target).
    pub fn parse(text: &str) -> Result<Schema> {
        let mut features = Vec::new();
        let mut target: Option<(String, TargetKind)> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap().to_string();
            let kind = parts.next().ok_or_else(|| {
                Error::schema(format!("line {}: column '{}' has no kind", lineno + 1, name))
            })?;
            let rest: Vec<String> = parts.map(|s| s.to_string()).collect();
            match kind {
                "numeric" => features.push(ColumnSpec { name, kind: ColumnKind::Numeric }),
                "categorical" => {
                    if rest.is_empty() {
                        return Err(Error::schema(format!(
                            "categorical column '{}' has an empty vocabulary",
                            name
                        )));
                    }
                    features.push(ColumnSpec { name, kind: ColumnKind::Categorical(rest) })
                }
                "target" => {
                    if target.is_some() {
                        return Err(Error::schema("more than one target column"));
                    }
                    let tk = if rest.is_empty() {
                        TargetKind::Regression
                    } else {
                        TargetKind::Classification(rest)
                    };
                    target = Some((name, tk));
                }
                other => {
                    return Err(Error::schema(format!(
                        "line {}: unknown column kind '{}'",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        let (target_name, target) =
            target.ok_or_else(|| Error::schema("schema declares no target column"))?;
        if features.is_empty() {
            return Err(Error::schema("schema declares no feature columns"));
        }
        let mut seen = HashSet::new();
        for c in features.iter().map(|c| &c.name).chain(std::iter::once(&target_name)) {
            if !seen.insert(c.clone()) {
                return Err(Error::schema(format!("duplicate column name '{}'", c)));
            }
        }
        Ok(Schema { features, target_name, target })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.features {
            match &c.kind {
                ColumnKind::Numeric => out.push_str(&format!("{} numeric\n", c.name)),
                ColumnKind::Categorical(v) => {
                    out.push_str(&format!("{} categorical {}\n", c.name, v.join(" ")))
                }
            }
        }
        match &self.target {
            TargetKind::Classification(v) => {
                out.push_str(&format!("{} target {}\n", self.target_name, v.join(" ")))
            }
            TargetKind::Regression => out.push_str(&format!("{} target\n", self.target_name)),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    /// NaN marks a missing cell.
    Numeric(Vec<f64>),
    /// 0..V-1 declared, V unknown, CAT_MISSING missing.
    Categorical(Vec<u32>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetData {
    /// Class indices in 1..=K.
    Classes(Vec<u32>),
    Reals(Vec<f64>),
}

impl TargetData {
    pub fn len(&self) -> usize {
        match self {
            TargetData::Classes(v) => v.len(),
            TargetData::Reals(v) => v.len(),
        }
    }
}

/// Named, disjoint row-index partitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn all_train(n: usize) -> Splits {
        Splits { train: (0..n).collect(), val: Vec::new(), test: Vec::new() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, part) in
            [("train", &self.train), ("val", &self.val), ("test", &self.test)]
        {
            for &i in part {
                if i >= n {
                    return Err(Error::data(format!(
                        "{} split index {} out of range for {} rows",
                        name, i, n
                    )));
                }
                if seen[i] {
                    return Err(Error::data(format!(
                        "row {} appears in more than one split",
                        i
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// One dataset: feature table, target, and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTask {
    pub name: String,
    pub schema: Schema,
    pub columns: Vec<ColumnData>,
    pub target: TargetData,
    /// Class count; 0 for regression.
    pub k: usize,
    pub splits: Splits,
}

/// Borrowed view of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellValue<'a> {
    Num(f64),
    Missing,
    Cat(&'a str),
    CatUnknown,
}

impl TabularTask {
    pub fn new(
        name: String,
        schema: Schema,
        columns: Vec<ColumnData>,
        target: TargetData,
        splits: Splits,
    ) -> Result<TabularTask> {
        let n = target.len();
        if n == 0 {
            return Err(Error::data("task has zero rows"));
        }
        if columns.is_empty() {
            return Err(Error::data("task has zero feature columns"));
        }
        if columns.len() != schema.features.len() {
            return Err(Error::schema(format!(
                "{} columns but schema declares {}",
                columns.len(),
                schema.features.len()
            )));
        }
        for (c, spec) in columns.iter().zip(&schema.features) {
            if c.len() != n {
                return Err(Error::data(format!(
                    "column '{}' has {} rows, target has {}",
                    spec.name,
                    c.len(),
                    n
                )));
            }
        }
        let k = schema.class_count();
        match (&target, &schema.target) {
            (TargetData::Classes(y), TargetKind::Classification(_)) => {
                for &label in y {
                    if label < 1 || label as usize > k {
                        return Err(Error::data(format!(
                            "class label {} outside 1..={}",
                            label, k
                        )));
                    }
                }
            }
            (TargetData::Reals(_), TargetKind::Regression) => {}
            _ => return Err(Error::schema("target data does not match schema target kind")),
        }
        splits.validate(n)?;
        Ok(TabularTask { name, schema, columns, target, k, splits })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.target, TargetData::Reals(_))
    }

    /// Class labels (1..=K). Errors for regression tasks.
    pub fn labels(&self) -> Result<&[u32]> {
        match &self.target {
            TargetData::Classes(v) => Ok(v),
            TargetData::Reals(_) => Err(Error::data("regression task has no class labels")),
        }
    }

    pub fn reals(&self) -> Result<&[f64]> {
        match &self.target {
            TargetData::Reals(v) => Ok(v),
            TargetData::Classes(_) => Err(Error::data("classification task has no real targets")),
        }
    }

    pub fn labels_of(&self, rows: &[usize]) -> Result<Vec<u32>> {
        let all = self.labels()?;
        Ok(rows.iter().map(|&r| all[r]).collect())
    }

    pub fn reals_of(&self, rows: &[usize]) -> Result<Vec<f64>> {
        let all = self.reals()?;
        Ok(rows.iter().map(|&r| all[r]).collect())
    }

    pub fn cell(&self, row: usize, col: usize) -> CellValue<'_> {
        match (&self.columns[col], &self.schema.features[col].kind) {
            (ColumnData::Numeric(v), _) => {
                if v[row].is_nan() {
                    CellValue::Missing
                } else {
                    CellValue::Num(v[row])
                }
            }
            (ColumnData::Categorical(v), ColumnKind::Categorical(vocab)) => {
                let idx = v[row];
                if idx == CAT_MISSING {
                    CellValue::Missing
                } else if (idx as usize) < vocab.len() {
                    CellValue::Cat(&vocab[idx as usize])
                } else {
                    CellValue::CatUnknown
                }
            }
            (ColumnData::Categorical(_), ColumnKind::Numeric) => {
                unreachable!("schema/data kind mismatch is rejected at construction")
            }
        }
    }

    /// Dense numeric view of the selected rows: categorical cells become
    /// their index as f64, missing cells (either kind) become NaN. This is
    /// the canonical input the GBDT consumes.
    pub fn numeric_view(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.columns.len()));
        for (j, col) in self.columns.iter().enumerate() {
            match col {
                ColumnData::Numeric(v) => {
                    for (i, &r) in rows.iter().enumerate() {
                        out[[i, j]] = v[r];
                    }
                }
                ColumnData::Categorical(v) => {
                    for (i, &r) in rows.iter().enumerate() {
                        out[[i, j]] = if v[r] == CAT_MISSING { f64::NAN } else { v[r] as f64 };
                    }
                }
            }
        }
        out
    }

    /// New task restricted to the given feature columns (used by feature
    /// bagging). Target and splits are shared unchanged.
    pub fn select_features(&self, keep: &[usize]) -> Result<TabularTask> {
        if keep.is_empty() {
            return Err(Error::data("feature selection kept zero columns"));
        }
        let mut features = Vec::with_capacity(keep.len());
        let mut columns = Vec::with_capacity(keep.len());
        for &j in keep {
            if j >= self.columns.len() {
                return Err(Error::data(format!("feature index {} out of range", j)));
            }
            features.push(self.schema.features[j].clone());
            columns.push(self.columns[j].clone());
        }
        let schema = Schema {
            features,
            target_name: self.schema.target_name.clone(),
            target: self.schema.target.clone(),
        };
        TabularTask::new(self.name.clone(), schema, columns, self.target.clone(), self.splits.clone())
    }
}

/// Parse a CSV file against a schema. Unparseable numeric cells and empty
/// cells become missing; categorical values outside the vocabulary map to the
/// reserved unknown index without erroring.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TabularTask> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::data(e.to_string()))?.iter().map(String::from).collect();

    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.clone()) {
            return Err(Error::data(format!("duplicate column name '{}' in header", h)));
        }
    }
    let pos_of = |name: &str| headers.iter().position(|h| h == name);
    let target_pos = pos_of(&schema.target_name)
        .ok_or_else(|| Error::data(format!("missing target column '{}'", schema.target_name)))?;
    let mut feature_pos = Vec::with_capacity(schema.features.len());
    for spec in &schema.features {
        let p = pos_of(&spec.name)
            .ok_or_else(|| Error::data(format!("missing feature column '{}'", spec.name)))?;
        feature_pos.push(p);
    }

    let mut columns: Vec<ColumnData> = schema
        .features
        .iter()
        .map(|spec| match &spec.kind {
            ColumnKind::Numeric => ColumnData::Numeric(Vec::new()),
            ColumnKind::Categorical(_) => ColumnData::Categorical(Vec::new()),
        })
        .collect();
    let mut target = match &schema.target {
        TargetKind::Classification(_) => TargetData::Classes(Vec::new()),
        TargetKind::Regression => TargetData::Reals(Vec::new()),
    };

    for record in reader.records() {
        let record = record.map_err(|e| Error::data(e.to_string()))?;
        for ((spec, &p), col) in schema.features.iter().zip(&feature_pos).zip(&mut columns) {
            let raw = record.get(p).unwrap_or("");
            match (&spec.kind, col) {
                (ColumnKind::Numeric, ColumnData::Numeric(v)) => {
                    let parsed = raw.trim().parse::<f64>().ok().filter(|x| x.is_finite());
                    v.push(parsed.unwrap_or(f64::NAN));
                }
                (ColumnKind::Categorical(vocab), ColumnData::Categorical(v)) => {
                    let idx = if raw.is_empty() {
                        CAT_MISSING
                    } else {
                        vocab
                            .iter()
                            .position(|s| s == raw)
                            .map(|i| i as u32)
                            .unwrap_or(vocab.len() as u32)
                    };
                    v.push(idx);
                }
                _ => unreachable!(),
            }
        }
        let raw_y = record.get(target_pos).unwrap_or("");
        match (&schema.target, &mut target) {
            (TargetKind::Classification(classes), TargetData::Classes(y)) => {
                let idx = classes.iter().position(|s| s == raw_y).ok_or_else(|| {
                    Error::data(format!("target label '{}' not in schema vocabulary", raw_y))
                })?;
                y.push(idx as u32 + 1);
            }
            (TargetKind::Regression, TargetData::Reals(y)) => {
                let v = raw_y.trim().parse::<f64>().map_err(|_| {
                    Error::data(format!("unparseable regression target '{}'", raw_y))
                })?;
                y.push(v);
            }
            _ => unreachable!(),
        }
    }
    if target.len() == 0 {
        return Err(Error::data(format!("{}: zero data rows", path.display())));
    }
    let n = target.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".to_string());
    TabularTask::new(name, schema.clone(), columns, target, Splits::all_train(n))
}

/// Serialize a task back to CSV in canonical form: shortest round-trip
/// decimals, empty string for missing, vocabulary strings for categoricals.
pub fn save_csv(task: &TabularTask, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let mut header: Vec<&str> = task.schema.features.iter().map(|c| c.name.as_str()).collect();
    header.push(&task.schema.target_name);
    writer.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    for i in 0..task.n_rows() {
        let mut row: Vec<String> = Vec::with_capacity(task.n_features() + 1);
        for j in 0..task.n_features() {
            row.push(match task.cell(i, j) {
                CellValue::Num(x) => format!("{}", x),
                CellValue::Missing => String::new(),
                CellValue::Cat(s) => s.to_string(),
                CellValue::CatUnknown => UNKNOWN_TOKEN.to_string(),
            });
        }
        match &task.target {
            TargetData::Classes(y) => {
                let classes = match &task.schema.target {
                    TargetKind::Classification(c) => c,
                    TargetKind::Regression => unreachable!(),
                };
                row.push(classes[(y[i] - 1) as usize].clone());
            }
            TargetData::Reals(y) => row.push(format!("{}", y[i])),
        }
        writer.write_record(&row).map_err(|e| Error::data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Newline-separated row indices.
pub fn load_split_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx = line.parse::<usize>().map_err(|_| {
            Error::data(format!("{}:{}: not a row index: '{}'", path.display(), lineno + 1, line))
        })?;
        out.push(idx);
    }
    Ok(out)
}

pub fn save_split_file(path: &Path, indices: &[usize]) -> Result<()> {
    let mut text = String::new();
    for &i in indices {
        text.push_str(&format!("{}\n", i));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// One-hot encode class labels (1..=K) into an N x K matrix.
pub fn one_hot_labels(y: &[u32], k: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((y.len(), k));
    for (i, &label) in y.iter().enumerate() {
        if label < 1 || label as usize > k {
            return Err(Error::data(format!("label {} outside 1..={}", label, k)));
        }
        out[[i, (label - 1) as usize]] = 1.0;
    }
    Ok(out)
}

/// Average ranks (1-based, ties averaged) of the given values, where the
/// highest value receives rank 1 when `higher_is_better`.
fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal);
        if higher_is_better {
            cmp.reverse()
        } else {
            cmp
        }
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC with tie correction for one binary problem.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let ranks = average_ranks(scores, false); // ascending: higher score, higher rank
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter_map(|(&r, &p)| if p { Some(r) } else { None })
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of per-class scores against labels in 1..=K. Binary tasks use the
/// Mann-Whitney statistic on the class-2 score; multiclass tasks macro-average
/// one-vs-rest AUCs over the classes present in `y`.
pub fn auc(scores: &ArrayView2<f64>, y: &[u32]) -> Result<f64> {
    if scores.nrows() != y.len() {
        return Err(Error::data(format!(
            "auc: {} score rows vs {} labels",
            scores.nrows(),
            y.len()
        )));
    }
    let mut present: Vec<u32> = y.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedMetric("AUC undefined with a single class".into()));
    }
    let k = scores.ncols();
    if k == 2 {
        let col: Vec<f64> = scores.column(1).to_vec();
        let pos: Vec<bool> = y.iter().map(|&label| label == 2).collect();
        return binary_auc(&col, &pos);
    }
    let mut total = 0.0;
    for &class in &present {
        let col: Vec<f64> = scores.column((class - 1) as usize).to_vec();
        let pos: Vec<bool> = y.iter().map(|&label| label == class).collect();
        total += binary_auc(&col, &pos)?;
    }
    Ok(total / present.len() as f64)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(Error::data(format!(
            "rmse: length mismatch or empty ({} vs {})",
            pred.len(),
            y.len()
        )));
    }
    let ms: f64 =
        pred.iter().zip(y).map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(ms.sqrt())
}

/// Per-method mean rank over tasks. `score_table` is methods x tasks; ranks
/// are per-task competition ranks with tie averaging, rank 1 = best.
pub fn mean_rank(score_table: &ArrayView2<f64>, higher_is_better: bool) -> Result<Vec<f64>> {
    let (n_methods, n_tasks) = score_table.dim();
    if n_methods == 0 || n_tasks == 0 {
        return Err(Error::data("mean_rank: empty score table"));
    }
    let mut sums = vec![0.0; n_methods];
    for t in 0..n_tasks {
        let col: Vec<f64> = score_table.column(t).to_vec();
        let ranks = average_ranks(&col, higher_is_better);
        for (s, r) in sums.iter_mut().zip(&ranks) {
            *s += r;
        }
    }
    Ok(sums.into_iter().map(|s| s / n_tasks as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_schema() -> Schema {
        Schema::parse("a numeric\nb categorical p q\ny target 1 2\n").unwrap()
    }

    #[test]
    fn parse_two_row_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "a,b,y\n1,p,1\n2,q,2\n").unwrap();
        let task = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(task.n_rows(), 2);
        assert_eq!(task.n_features(), 2);
        assert_eq!(task.k, 2);
        assert_eq!(task.labels().unwrap(), &[1, 2]);
        assert_eq!(task.cell(0, 0), CellValue::Num(1.0));
        assert_eq!(task.cell(1, 1), CellValue::Cat("q"));
    }

    #[test]
    fn empty_numeric_cell_becomes_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b,y\n,p,1\nx,q,2\n").unwrap();
        let task = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(task.cell(0, 0), CellValue::Missing);
        // unparseable numeric cell also becomes missing
        assert_eq!(task.cell(1, 0), CellValue::Missing);
    }

    #[test]
    fn out_of_vocab_categorical_maps_to_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, "a,b,y\n1,zzz,1\n2,,2\n").unwrap();
        let task = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(task.cell(0, 1), CellValue::CatUnknown);
        assert_eq!(task.cell(1, 1), CellValue::Missing);
    }

    #[test]
    fn load_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let no_target = dir.path().join("nt.csv");
        std::fs::write(&no_target, "a,b\n1,p\n").unwrap();
        assert!(load_csv(&no_target, &toy_schema()).is_err());

        let empty = dir.path().join("e.csv");
        std::fs::write(&empty, "a,b,y\n").unwrap();
        assert!(load_csv(&empty, &toy_schema()).is_err());

        let dup = dir.path().join("d.csv");
        std::fs::write(&dup, "a,a,b,y\n1,2,p,1\n").unwrap();
        assert!(load_csv(&dup, &toy_schema()).is_err());
    }

    #[test]
    fn csv_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        std::fs::write(&path, "a,b,y\n1.5,p,1\n,zzz,2\n-0.25,,1\n").unwrap();
        let schema = toy_schema();
        let first = load_csv(&path, &schema).unwrap();
        let round = dir.path().join("rt2.csv");
        save_csv(&first, &round).unwrap();
        let second = load_csv(&round, &schema).unwrap();
        assert_eq!(first.columns.len(), second.columns.len());
        for (a, b) in first.columns.iter().zip(&second.columns) {
            match (a, b) {
                (ColumnData::Numeric(x), ColumnData::Numeric(y)) => {
                    assert_eq!(x.len(), y.len());
                    for (u, v) in x.iter().zip(y) {
                        assert!(u.to_bits() == v.to_bits(), "{} vs {}", u, v);
                    }
                }
                (a, b) => assert_eq!(a, b),
            }
        }
        assert_eq!(first.target, second.target);
    }

    #[test]
    fn one_hot_examples() {
        let m = one_hot_labels(&[1, 3, 2], 3).unwrap();
        assert_eq!(m, array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        assert_eq!(one_hot_labels(&[1], 1).unwrap(), array![[1.0]]);
        assert!(one_hot_labels(&[4], 3).is_err());
    }

    #[test]
    fn one_hot_row_and_column_sums() {
        let y = [2_u32, 2, 1, 3, 2];
        let m = one_hot_labels(&y, 3).unwrap();
        for row in m.rows() {
            assert_eq!(row.sum(), 1.0);
        }
        let counts: Vec<f64> = (0..3).map(|j| m.column(j).sum()).collect();
        assert_eq!(counts, vec![1.0, 3.0, 1.0]);
    }

    #[test]
    fn binary_auc_examples() {
        let perfect = array![[0.1, 0.9], [0.2, 0.8], [0.8, 0.2], [0.9, 0.1]];
        let y = [2_u32, 2, 1, 1];
        assert_eq!(auc(&perfect.view(), &y).unwrap(), 1.0);
        let y_rev = [1_u32, 1, 2, 2];
        assert_eq!(auc(&perfect.view(), &y_rev).unwrap(), 0.0);
        let tie = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(auc(&tie.view(), &[2, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        let s = array![[0.4, 0.6], [0.3, 0.7]];
        let err = auc(&s.view(), &[2, 2]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(5, &[1]);
        for _ in 0..10 {
            let n = 30;
            let mut scores = Array2::zeros((n, 2));
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let p: f64 = rng.gen();
                scores[[i, 1]] = p;
                scores[[i, 0]] = 1.0 - p;
                y.push(if rng.gen_bool(0.5) { 2 } else { 1 });
            }
            if y.iter().all(|&c| c == y[0]) {
                continue;
            }
            let base = auc(&scores.view(), &y).unwrap();
            let transformed = scores.mapv(|v| (3.0 * v).exp() + 7.0);
            let t = auc(&transformed.view(), &y).unwrap();
            assert!((base - t).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_auc_macro_averages_present_classes() {
        // Perfectly separating scores for 3 classes.
        let s = array![
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.1, 0.1, 0.8],
            [0.7, 0.2, 0.1]
        ];
        let y = [1_u32, 2, 3, 1];
        assert_eq!(auc(&s.view(), &y).unwrap(), 1.0);
        // Class 3 absent: macro average runs over classes 1 and 2 only.
        // Class 1 one-vs-rest is perfectly ordered (1.0); class 2 scores
        // [0.1,0.8,0.1,0.2] with positives at rows 1,2 give ranks {4, 1.5},
        // U = 5.5 - 3 = 2.5, AUC 2.5/4 = 0.625. Macro: (1.0+0.625)/2.
        let y2 = [1_u32, 2, 2, 1];
        let value = auc(&s.view(), &y2).unwrap();
        assert!((value - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 5.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        // homogeneity: scaling residuals by c scales rmse by |c|
        let base = rmse(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        let scaled = rmse(&[0.0, 0.0], &[-3.0, -6.0]).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn mean_rank_examples() {
        let t = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(mean_rank(&t.view(), true).unwrap(), vec![1.0, 2.0]);
        let tie = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(mean_rank(&tie.view(), true).unwrap(), vec![1.5, 1.5]);
        // Three methods, one task, AUCs 0.859 / 0.866 / 0.855: ranks 2, 1, 3.
        let col = array![[0.859], [0.866], [0.855]];
        assert_eq!(mean_rank(&col.view(), true).unwrap(), vec![2.0, 1.0, 3.0]);
    }

    #[test]
    fn mean_rank_invariant_under_per_task_monotone_transform() {
        let t = array![[0.1, 0.9, 0.3], [0.2, 0.5, 0.7], [0.05, 0.6, 0.7]];
        let base = mean_rank(&t.view(), true).unwrap();
        let mut warped = t.clone();
        for (j, factor) in [(0, 10.0), (1, 2.0), (2, 100.0)] {
            warped.column_mut(j).mapv_inplace(|v| (factor * v).ln_1p());
        }
        assert_eq!(base, mean_rank(&warped.view(), true).unwrap());
    }

    #[test]
    fn splits_validation() {
        let ok = Splits { train: vec![0, 1], val: vec![2], test: vec![3] };
        assert!(ok.validate(4).is_ok());
        let overlap = Splits { train: vec![0, 1], val: vec![1], test: vec![] };
        assert!(overlap.validate(4).is_err());
        let out = Splits { train: vec![9], val: vec![], test: vec![] };
        assert!(out.validate(4).is_err());
    }

    #[test]
    fn schema_text_round_trip() {
        let s = toy_schema();
        let again = Schema::parse(&s.to_text()).unwrap();
        assert_eq!(s, again);
        let reg = Schema::parse("f0 numeric\ny target\n").unwrap();
        assert_eq!(reg.target, TargetKind::Regression);
        assert!(Schema::parse("a numeric\n").is_err());
        assert!(Schema::parse("a numeric\na categorical x\ny target\n").is_err());
    }
}
