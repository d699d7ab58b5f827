//! Dataset directories on disk.
//!
//! A dataset is a directory of plain text files:
//!
//! - `features.csv` — one row per node, numeric columns, optional single
//!   header line (any first line that does not parse as numbers).
//! - `labels.csv` — one integer class id per line, aligned with the rows.
//! - `edges.txt` *(optional)* — one undirected edge per line as two
//!   whitespace-separated node indices.
//! - `splits/{train,dev,test}.txt` *(optional)* — one node index per line;
//!   when present they override the split counts in the config.
//!
//! Parse errors carry `file:line:` so a broken row is a one-glance fix.
//! [`save_dataset`] writes the same format back with round-trip-exact float
//! formatting, so save → load reproduces a dataset bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use glearn_core::dataset::{
    make_splits, row_normalize_l1, standardize_columns, Dataset, SplitCounts, SplitMasks,
};
use glearn_core::numkit::Mat;

use crate::config::{ExperimentConfig, Normalize};
use crate::{CliError, Result};

/// Reads the dataset named by `cfg`, applies feature scaling, and installs
/// splits (fixed files if the dataset ships them, a seeded stratified draw
/// from the config counts otherwise). Returns the dataset plus any warnings
/// the split draw produced.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Vec<String>)> {
    let dir = Path::new(&cfg.data_dir);
    if !dir.is_dir() {
        return Err(CliError::data(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }

    let features = read_features(&dir.join("features.csv"))?;
    let features = match cfg.normalize {
        Normalize::Standardize => standardize_columns(&features),
        Normalize::L1 => row_normalize_l1(&features),
        Normalize::None => features,
    };
    let n = features.rows();

    let labels = read_labels(&dir.join("labels.csv"), n)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);

    let edges_path = dir.join("edges.txt");
    let adjacency =
        if edges_path.exists() { Some(read_edges(&edges_path, n)?) } else { None };

    let mut dataset =
        Dataset::new(&cfg.dataset_name(), features, labels.into(), classes, adjacency)?;

    let splits_dir = dir.join("splits");
    let mut warnings = Vec::new();
    if splits_dir.is_dir() {
        let masks = SplitMasks {
            train: read_indices(&splits_dir.join("train.txt"), n)?,
            dev: read_indices(&splits_dir.join("dev.txt"), n)?,
            test: read_indices(&splits_dir.join("test.txt"), n)?,
        };
        dataset.set_splits(masks).map_err(|e| {
            CliError::data(format!("{}: {e}", splits_dir.display()))
        })?;
    } else {
        let counts = SplitCounts {
            train: cfg.split_train,
            dev: cfg.split_dev,
            test: cfg.split_test,
        };
        if counts.train == 0 || counts.dev == 0 || counts.test == 0 {
            return Err(CliError::data(format!(
                "dataset {} has no splits/ directory; set split_train, split_dev, and \
                 split_test in the config",
                dir.display()
            )));
        }
        let draw = make_splits(&dataset, counts, cfg.split_seed)?;
        warnings = draw.warnings;
        dataset.set_splits(draw.masks)?;
    }

    Ok((dataset, warnings))
}

/// Writes `dataset` into `dir` in the exact on-disk format [`load_dataset`]
/// reads. Floats use shortest round-trip formatting, so reloading (with
/// `normalize = "none"`) reproduces features, labels, edges, and masks bit
/// for bit.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let x = &dataset.features;
    let mut csv = String::new();
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            if j > 0 {
                csv.push(',');
            }
            write!(csv, "{v}").unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("features.csv"), csv)?;

    let mut labels = String::new();
    for y in dataset.labels.iter() {
        writeln!(labels, "{y}").unwrap();
    }
    std::fs::write(dir.join("labels.csv"), labels)?;

    if let Some(a) = &dataset.initial_adjacency {
        let mut edges = String::new();
        for i in 0..a.rows() {
            for j in (i + 1)..a.cols() {
                if a[(i, j)] != 0.0 {
                    writeln!(edges, "{i} {j}").unwrap();
                }
            }
        }
        std::fs::write(dir.join("edges.txt"), edges)?;
    }

    let masks = &dataset.splits;
    if !(masks.train.is_empty() && masks.dev.is_empty() && masks.test.is_empty()) {
        let splits = dir.join("splits");
        std::fs::create_dir_all(&splits)?;
        for (name, mask) in
            [("train.txt", &masks.train), ("dev.txt", &masks.dev), ("test.txt", &masks.test)]
        {
            let mut body = String::new();
            for idx in mask.iter() {
                writeln!(body, "{idx}").unwrap();
            }
            std::fs::write(splits.join(name), body)?;
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_owned()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn read_features(path: &Path) -> Result<Mat> {
    let lines = read_lines(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(lines.len());
    let mut width = None;
    let mut saw_header = false;
    for (lineno, line) in &lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            // A non-numeric first line is the (single, optional) header.
            Err(_) if rows.is_empty() && !saw_header => {
                saw_header = true;
                continue;
            }
            Err(_) => {
                let bad = fields.iter().find(|f| f.parse::<f64>().is_err()).unwrap();
                return Err(CliError::data(format!(
                    "{}:{lineno}: not a number: '{bad}'",
                    path.display()
                )));
            }
        };
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CliError::data(format!(
                "{}:{lineno}: features must be finite",
                path.display()
            )));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(CliError::data(format!(
                    "{}:{lineno}: expected {w} columns, found {}",
                    path.display(),
                    values.len()
                )));
            }
            Some(_) => {}
        }
        rows.push(values);
    }
    let d = width.ok_or_else(|| {
        CliError::data(format!("{}: no feature rows", path.display()))
    })?;
    let mut m = Mat::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(row);
    }
    Ok(m)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let lines = read_lines(path)?;
    let mut labels = Vec::with_capacity(lines.len());
    for (lineno, line) in &lines {
        let y: u32 = line.parse().map_err(|_| {
            CliError::data(format!("{}:{lineno}: not a class id: '{line}'", path.display()))
        })?;
        labels.push(y);
    }
    if labels.len() != n {
        return Err(CliError::data(format!(
            "{}: {} labels for {n} feature rows",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

fn read_edges(path: &Path, n: usize) -> Result<Mat> {
    let lines = read_lines(path)?;
    let mut a = Mat::zeros(n, n);
    for (lineno, line) in &lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let &[i, j] = fields.as_slice() else {
            return Err(CliError::data(format!(
                "{}:{lineno}: expected two node indices, found '{line}'",
                path.display()
            )));
        };
        let parse = |f: &str| -> Result<usize> {
            let idx: usize = f.parse().map_err(|_| {
                CliError::data(format!("{}:{lineno}: not a node index: '{f}'", path.display()))
            })?;
            if idx >= n {
                return Err(CliError::data(format!(
                    "{}:{lineno}: node {idx} out of range (dataset has {n} nodes)",
                    path.display()
                )));
            }
            Ok(idx)
        };
        let (i, j) = (parse(i)?, parse(j)?);
        if i == j {
            return Err(CliError::data(format!(
                "{}:{lineno}: self-loop on node {i}",
                path.display()
            )));
        }
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    Ok(a)
}

fn read_indices(path: &Path, n: usize) -> Result<Rc<[u32]>> {
    let lines = read_lines(path)?;
    let mut idx = Vec::with_capacity(lines.len());
    for (lineno, line) in &lines {
        let i: usize = line.parse().map_err(|_| {
            CliError::data(format!("{}:{lineno}: not a node index: '{line}'", path.display()))
        })?;
        if i >= n {
            return Err(CliError::data(format!(
                "{}:{lineno}: node {i} out of range (dataset has {n} nodes)",
                path.display()
            )));
        }
        idx.push(i as u32);
    }
    idx.sort_unstable();
    if idx.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::data(format!("{}: duplicate node index", path.display())));
    }
    Ok(idx.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;

    fn dir_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data_dir: dir.to_string_lossy().into_owned(),
            name: None,
            normalize: Normalize::None,
            split_train: 4,
            split_dev: 4,
            split_test: 4,
            split_seed: 0,
            lambda: 0.5,
            eta: 0.5,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            knn: 3,
            epsilon: 0.5,
            heads: 2,
            stop_delta: 1e-3,
            max_iters: 3,
            hidden: 8,
            dropout: 0.5,
            iter_dropout: 0.5,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            max_epochs: 5,
            patience: 5,
            seeds: vec![0],
            ablation: Ablation::Full,
        }
    }

    fn write_basic(dir: &Path, header: bool) {
        let mut features = String::new();
        if header {
            features.push_str("a,b\n");
        }
        for i in 0..12 {
            features.push_str(&format!("{}.5,{}\n", i, 12 - i));
        }
        std::fs::write(dir.join("features.csv"), features).unwrap();
        let labels: String = (0..12).map(|i| format!("{}\n", i % 2)).collect();
        std::fs::write(dir.join("labels.csv"), labels).unwrap();
    }

    #[test]
    fn loads_with_and_without_a_header() {
        for header in [false, true] {
            let tmp = tempfile::tempdir().unwrap();
            write_basic(tmp.path(), header);
            let (ds, warnings) = load_dataset(&dir_config(tmp.path())).unwrap();
            assert_eq!(ds.nodes(), 12);
            assert_eq!(ds.feature_dim(), 2);
            assert_eq!(ds.classes, 2);
            assert_eq!(ds.features[(0, 0)], 0.5);
            assert!(ds.initial_adjacency.is_none());
            assert_eq!(ds.splits.train.len(), 4);
            assert!(warnings.is_empty());
        }
    }

    #[test]
    fn parse_errors_carry_file_and_line() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), true);
        std::fs::write(tmp.path().join("features.csv"), "a,b\n1.0,2.0\n1.0,oops\n").unwrap();
        std::fs::write(tmp.path().join("labels.csv"), "0\n1\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("features.csv:3") && msg.contains("oops"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ragged_rows_and_non_finite_values_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("features.csv"), "1.0,2.0\n3.0\n").unwrap();
        std::fs::write(tmp.path().join("labels.csv"), "0\n1\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        assert!(format!("{err}").contains("expected 2 columns"), "{err}");

        std::fs::write(tmp.path().join("features.csv"), "1.0,2.0\n3.0,inf\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        assert!(format!("{err}").contains("finite"), "{err}");
    }

    #[test]
    fn label_count_must_match_feature_rows() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), false);
        std::fs::write(tmp.path().join("labels.csv"), "0\n1\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        assert!(format!("{err}").contains("2 labels for 12"), "{err}");
    }

    #[test]
    fn edges_build_a_symmetric_graph_and_are_validated() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), false);
        std::fs::write(tmp.path().join("edges.txt"), "0 1\n1 2\n 3   4 \n").unwrap();
        let (ds, _) = load_dataset(&dir_config(tmp.path())).unwrap();
        let a = ds.initial_adjacency.as_ref().unwrap();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(1, 0)], 1.0);
        assert_eq!(a[(3, 4)], 1.0);
        assert_eq!(a.support(), 6);

        for (body, needle) in [
            ("0\n", "two node indices"),
            ("0 99\n", "out of range"),
            ("5 5\n", "self-loop"),
            ("0 x\n", "not a node index"),
        ] {
            std::fs::write(tmp.path().join("edges.txt"), body).unwrap();
            let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
            assert!(format!("{err}").contains(needle), "{body:?} -> {err}");
        }
    }

    #[test]
    fn split_files_override_config_counts() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), false);
        let splits = tmp.path().join("splits");
        std::fs::create_dir(&splits).unwrap();
        std::fs::write(splits.join("train.txt"), "3\n0\n1\n").unwrap();
        std::fs::write(splits.join("dev.txt"), "4\n5\n").unwrap();
        std::fs::write(splits.join("test.txt"), "6\n7\n8\n9\n").unwrap();
        let (ds, warnings) = load_dataset(&dir_config(tmp.path())).unwrap();
        assert_eq!(ds.splits.train.as_ref(), &[0, 1, 3]);
        assert_eq!(ds.splits.dev.as_ref(), &[4, 5]);
        assert_eq!(ds.splits.test.len(), 4);
        assert!(warnings.is_empty());

        std::fs::write(splits.join("dev.txt"), "4\n4\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        assert!(format!("{err}").contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_splits_and_counts_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), false);
        let mut cfg = dir_config(tmp.path());
        cfg.split_test = 0;
        let err = load_dataset(&cfg).unwrap_err();
        assert!(format!("{err}").contains("split_test"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_directory_and_files_name_the_path() {
        let mut cfg = dir_config(Path::new("/nonexistent/nowhere"));
        cfg.data_dir = "/nonexistent/nowhere".into();
        let err = load_dataset(&cfg).unwrap_err();
        assert!(format!("{err}").contains("/nonexistent/nowhere"), "{err}");

        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("labels.csv"), "0\n").unwrap();
        let err = load_dataset(&dir_config(tmp.path())).unwrap_err();
        assert!(format!("{err}").contains("features.csv"), "{err}");
    }

    #[test]
    fn save_then_load_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        write_basic(tmp.path(), false);
        std::fs::write(tmp.path().join("edges.txt"), "0 1\n2 9\n4 5\n").unwrap();
        let mut cfg = dir_config(tmp.path());
        cfg.normalize = Normalize::Standardize; // exercise awkward floats
        let (ds, _) = load_dataset(&cfg).unwrap();

        let out = tempfile::tempdir().unwrap();
        save_dataset(&ds, out.path()).unwrap();
        let mut back_cfg = dir_config(out.path());
        back_cfg.normalize = Normalize::None;
        let (back, _) = load_dataset(&back_cfg).unwrap();

        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.initial_adjacency, ds.initial_adjacency);
        assert_eq!(back.splits.train, ds.splits.train);
        assert_eq!(back.splits.dev, ds.splits.dev);
        assert_eq!(back.splits.test, ds.splits.test);
        assert_eq!(back.classes, ds.classes);
    }
}
