//! Task file handling for the CLI: schema inference over a CSV, an optional
//! `<stem>.splits.csv` sidecar carrying train/val/test row assignments, and
//! directory loading in sorted order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use iltm_core::tabular::{
    load_csv, save_csv, ColumnKind, ColumnSpec, Schema, Splits, TabularTask, TargetKind,
};
use iltm_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Auto,
    Classification,
    Regression,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "auto" => Ok(TaskKind::Auto),
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::config(format!(
                "unknown task kind '{}' (expected auto, classification, or regression)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskLoadOptions {
    /// Name of the target column; the last header column when empty.
    pub target_column: Option<String>,
    pub kind: TaskKind,
}

impl Default for TaskLoadOptions {
    fn default() -> TaskLoadOptions {
        TaskLoadOptions { target_column: None, kind: TaskKind::Auto }
    }
}

fn parses_as_number(s: &str) -> bool {
    s.parse::<f64>().is_ok()
}

/// Infer a schema by scanning the file: a column is numeric when every
/// non-empty cell parses as a number, categorical otherwise with the sorted
/// distinct values as vocabulary. The target is classification when any
/// non-empty value fails to parse (or always, when forced by `kind`), with
/// sorted distinct values as the class vocabulary.
pub fn infer_schema(path: &Path, opts: &TaskLoadOptions) -> Result<Schema> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::data(e.to_string()))?.iter().map(String::from).collect();
    if headers.is_empty() {
        return Err(Error::data(format!("{}: no columns", path.display())));
    }
    let target_name = match &opts.target_column {
        Some(name) => {
            if !headers.contains(name) {
                return Err(Error::config(format!(
                    "target column '{}' not present in {}",
                    name,
                    path.display()
                )));
            }
            name.clone()
        }
        None => headers.last().unwrap().clone(),
    };
    let target_idx = headers.iter().position(|h| *h == target_name).unwrap();

    let n_cols = headers.len();
    let mut all_numeric = vec![true; n_cols];
    let mut values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_cols];
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            if !parses_as_number(cell) {
                all_numeric[j] = false;
            }
            values[j].insert(cell.to_string());
        }
    }

    let features = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(j, name)| ColumnSpec {
            name: name.clone(),
            kind: if all_numeric[j] {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical(values[j].iter().cloned().collect())
            },
        })
        .collect();
    if headers.len() == 1 {
        return Err(Error::data(format!("{}: target column only, no features", path.display())));
    }

    let classification = match opts.kind {
        TaskKind::Classification => true,
        TaskKind::Regression => false,
        TaskKind::Auto => !all_numeric[target_idx],
    };
    let target = if classification {
        TargetKind::Classification(values[target_idx].iter().cloned().collect())
    } else {
        TargetKind::Regression
    };
    Ok(Schema { features, target_name, target })
}

pub fn splits_sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.splits.csv"))
}

fn load_splits(path: &Path, n_rows: usize) -> Result<Splits> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut splits = Splits::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
        if record.len() != 2 {
            return Err(Error::data(format!(
                "{}: expected two columns (row, split)",
                path.display()
            )));
        }
        let row: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("{}: bad row index '{}'", path.display(), &record[0])))?;
        match record[1].trim() {
            "train" => splits.train.push(row),
            "val" => splits.val.push(row),
            "test" => splits.test.push(row),
            other => {
                return Err(Error::data(format!(
                    "{}: unknown split part '{}' (expected train, val, or test)",
                    path.display(),
                    other
                )))
            }
        }
    }
    splits.validate(n_rows)?;
    Ok(splits)
}

/// Load a task: inferred schema, CSV body, splits from the sidecar when one
/// exists (every row is a train row otherwise). The task is named after the
/// file stem.
pub fn load_task(path: &Path, opts: &TaskLoadOptions) -> Result<TabularTask> {
    let schema = infer_schema(path, opts)?;
    let mut task = load_csv(path, &schema)?;
    task.name = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let sidecar = splits_sidecar_path(path);
    if sidecar.exists() {
        task.splits = load_splits(&sidecar, task.n_rows())?;
    }
    Ok(task)
}

/// Save a task CSV plus a splits sidecar when the split structure carries
/// information beyond all-train.
pub fn save_task(task: &TabularTask, path: &Path) -> Result<()> {
    save_csv(task, path)?;
    let all_train = task.splits.val.is_empty()
        && task.splits.test.is_empty()
        && task.splits.train.len() == task.n_rows();
    if !all_train {
        let mut out = String::from("row,split\n");
        for (name, part) in
            [("train", &task.splits.train), ("val", &task.splits.val), ("test", &task.splits.test)]
        {
            for &row in part.iter() {
                out.push_str(&format!("{row},{name}\n"));
            }
        }
        std::fs::write(splits_sidecar_path(path), out)?;
    }
    Ok(())
}

/// All `*.csv` files in a directory except `*.splits.csv` sidecars, sorted
/// by file name for deterministic ordering.
pub fn list_task_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read task directory {}: {}", dir.display(), e)))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::data(e.to_string()))?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        if name.ends_with(".csv") && !name.ends_with(".splits.csv") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no task CSV files in {}", dir.display())));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use iltm_core::synth;
    use iltm_core::tabular::{CellValue, TargetData};

    #[test]
    fn synthetic_task_round_trips_through_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::blobs("roundtrip", 5, 3, 80, 4).unwrap();
        let path = dir.path().join("roundtrip.csv");
        save_task(&task, &path).unwrap();
        assert!(splits_sidecar_path(&path).exists());
        let back = load_task(&path, &TaskLoadOptions::default()).unwrap();
        assert_eq!(back.name, "roundtrip");
        assert_eq!(back.k, 3);
        assert_eq!(back.splits, task.splits);
        assert_eq!(back.n_rows(), task.n_rows());
        for i in 0..task.n_rows() {
            for j in 0..task.n_features() {
                match (task.cell(i, j), back.cell(i, j)) {
                    (CellValue::Num(a), CellValue::Num(b)) => {
                        assert_eq!(a, b, "cell {i},{j}")
                    }
                    (a, b) => panic!("cell kind changed: {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn regression_target_is_inferred_from_numeric_values() {
        let dir = tempfile::tempdir().unwrap();
        let task = synth::friedman("reg", 6, 40, 0.1, 1.0, 0.0, 9).unwrap();
        let path = dir.path().join("reg.csv");
        save_task(&task, &path).unwrap();
        let back = load_task(&path, &TaskLoadOptions::default()).unwrap();
        assert_eq!(back.k, 0);
        assert!(matches!(back.target, TargetData::Reals(_)));
    }

    #[test]
    fn numeric_labels_can_be_forced_to_classification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b,label\n1,2,1\n3,4,2\n5,6,1\n").unwrap();
        let auto = load_task(&path, &TaskLoadOptions::default()).unwrap();
        assert_eq!(auto.k, 0);
        let forced = load_task(
            &path,
            &TaskLoadOptions { target_column: None, kind: TaskKind::Classification },
        )
        .unwrap();
        assert_eq!(forced.k, 2);
    }

    #[test]
    fn mixed_feature_columns_become_categorical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "color,n,label\nred,1,a\nblue,2,b\n,3,a\n").unwrap();
        let task = load_task(&path, &TaskLoadOptions::default()).unwrap();
        match &task.schema.features[0].kind {
            ColumnKind::Categorical(vocab) => assert_eq!(vocab, &["blue", "red"]),
            other => panic!("expected categorical, got {other:?}"),
        }
        assert!(matches!(task.schema.features[1].kind, ColumnKind::Numeric));
    }

    #[test]
    fn explicit_target_column_moves_the_target() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "y,a,b\nu,1,2\nv,3,4\n").unwrap();
        let opts =
            TaskLoadOptions { target_column: Some("y".to_string()), kind: TaskKind::Auto };
        let task = load_task(&path, &opts).unwrap();
        assert_eq!(task.schema.target_name, "y");
        assert_eq!(task.k, 2);
        assert_eq!(task.n_features(), 2);
        let missing =
            TaskLoadOptions { target_column: Some("zzz".to_string()), kind: TaskKind::Auto };
        assert!(load_task(&path, &missing).is_err());
    }

    #[test]
    fn bad_sidecars_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,label\n1,x\n2,y\n").unwrap();
        std::fs::write(dir.path().join("t.splits.csv"), "row,split\n0,train\n5,test\n").unwrap();
        assert!(load_task(&path, &TaskLoadOptions::default()).is_err());
        std::fs::write(dir.path().join("t.splits.csv"), "row,split\n0,nope\n").unwrap();
        assert!(load_task(&path, &TaskLoadOptions::default()).is_err());
        std::fs::write(dir.path().join("t.splits.csv"), "row,split\n0,train\n1,test\n").unwrap();
        let ok = load_task(&path, &TaskLoadOptions::default()).unwrap();
        assert_eq!(ok.splits.train, vec![0]);
        assert_eq!(ok.splits.test, vec![1]);
    }

    #[test]
    fn directory_listing_is_sorted_and_skips_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.csv"), "a,l\n1,x\n").unwrap();
        std::fs::write(dir.path().join("a.csv"), "a,l\n1,x\n").unwrap();
        std::fs::write(dir.path().join("a.splits.csv"), "row,split\n0,train\n").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let files = list_task_files(dir.path()).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().to_string())
            .collect();
        assert_eq!(names, ["a.csv", "b.csv"]);
    }
}
