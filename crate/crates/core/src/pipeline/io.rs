//! File formats: BOLD and other dense matrices (CSV or NPY, chosen by
//! extension), event tables (TSV), fold labels, dataset directories.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{npy, Dataset, Session};
use crate::design::{Event, EventTable};
use crate::error::{Error, Result};
use crate::simulate::{gen_betas, gen_session_with_betas, truth_record, SimSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatrixFormat {
    Csv,
    Npy,
}

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(with_path(path))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(with_path(path))
}

/// Whole file as text, with the path in any I/O error.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(with_path(path))
}

fn format_of(path: &Path) -> Result<MatrixFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("csv") => Ok(MatrixFormat::Csv),
        Some("npy") => Ok(MatrixFormat::Npy),
        _ => Err(Error::invalid(format!("{}: expected a .csv or .npy file", path.display()))),
    }
}

fn located(path: &Path, err: Error) -> Error {
    match err {
        Error::Format { location, message } => Error::Format {
            location: format!("{}, {location}", path.display()),
            message,
        },
        other => other,
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::format(
            format!("line {}", pos.map_or(0, |p| p.line())),
            format!("expected {expected_len} fields, found {len}"),
        ),
        other => Error::format(format!("line {}", line.unwrap_or(0)), format!("{other:?}")),
    }
}

/// Voxel column names `v0, v1, ...`.
pub fn bold_header(v: usize) -> Vec<String> {
    (0..v).map(|j| format!("v{j}")).collect()
}

/// Read an `n x v` BOLD matrix. CSV files must have the header `v0,v1,...`.
pub fn read_bold(path: &Path) -> Result<DMatrix<f64>> {
    read_dense(path, true)
}

/// Write an `n x v` BOLD matrix; CSV values use the shortest exact decimal form.
pub fn write_bold(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_matrix(path, m, &bold_header(m.ncols()))
}

/// Read a dense matrix; CSV files need a header row with any column names.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    read_dense(path, false)
}

/// Write a dense matrix, with `header` naming the CSV columns.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: &[String]) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::EmptyData(format!("refusing to write a {}x{} matrix", m.nrows(), m.ncols())));
    }
    match format_of(path)? {
        MatrixFormat::Npy => {
            let mut out = BufWriter::new(create(path)?);
            npy::write_npy(&mut out, m)?;
            out.flush()?;
            Ok(())
        }
        MatrixFormat::Csv => {
            if header.len() != m.ncols() {
                return Err(Error::invalid(format!("{} header names for {} columns", header.len(), m.ncols())));
            }
            let mut w = csv::Writer::from_writer(create(path)?);
            w.write_record(header).map_err(csv_error)?;
            for i in 0..m.nrows() {
                w.write_record(m.row(i).iter().map(|v| format!("{v:?}"))).map_err(csv_error)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn read_dense(path: &Path, bold_names: bool) -> Result<DMatrix<f64>> {
    match format_of(path)? {
        MatrixFormat::Npy => npy::read_npy(&mut BufReader::new(open(path)?)).map_err(|e| located(path, e)),
        MatrixFormat::Csv => read_csv_matrix(open(path)?, bold_names).map_err(|e| located(path, e)),
    }
}

fn read_csv_matrix(input: impl std::io::Read, bold_names: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::EmptyData("CSV file has no header".into()));
    }
    if bold_names {
        for (j, name) in header.iter().enumerate() {
            if name.trim() != format!("v{j}") {
                return Err(Error::format("line 1", format!("column {} is named `{name}`, expected `v{j}`", j + 1)));
            }
        }
    }
    let v = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, field) in record.iter().enumerate() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("line {line}"), format!("column {}: `{field}` is not a number", j + 1)))?;
            values.push(x);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyData("CSV file has a header but no rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, v, &values))
}

/// Read a tab-separated event table with header `onset<TAB>condition`.
/// Lines starting with `#` are comments. The condition count is
/// `num_conditions` when given, else the largest id plus one.
pub fn read_events(path: &Path, num_conditions: Option<usize>) -> Result<EventTable> {
    let session = path.file_stem().and_then(|s| s.to_str()).unwrap_or("session").to_string();
    parse_events(open(path)?, num_conditions, session).map_err(|e| located(path, e))
}

pub fn parse_events(input: impl std::io::Read, num_conditions: Option<usize>, session: String) -> Result<EventTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    let header_line = reader.position().line().saturating_sub(1).max(1);
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["onset", "condition"] {
        return Err(Error::format(
            format!("line {header_line}"),
            format!("expected header `onset<TAB>condition`, found `{}`", names.join("<TAB>")),
        ));
    }
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let loc = format!("line {}", record.position().map_or(0, |p| p.line()));
        let onset: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(&loc, format!("onset `{}` is not a number", &record[0])))?;
        let condition: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::format(&loc, format!("condition `{}` is not a non-negative integer", &record[1])))?;
        if !onset.is_finite() || onset < 0.0 {
            return Err(Error::format(&loc, format!("onset {onset} must be finite and non-negative")));
        }
        if num_conditions.is_some_and(|p| condition >= p) {
            return Err(Error::format(&loc, format!("condition {condition} is out of range")));
        }
        events.push(Event { onset, condition });
    }
    match num_conditions {
        Some(p) => EventTable::new(events, p, session),
        None => EventTable::from_events(events, session),
    }
}

pub fn write_events(path: &Path, events: &EventTable) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "onset\tcondition")?;
    for e in events.events() {
        writeln!(out, "{:?}\t{}", e.onset, e.condition)?;
    }
    out.flush()?;
    Ok(())
}

/// One fold label per line (an optional first line `fold` is a header).
/// Labels are mapped to dense ids in sorted order.
pub fn read_folds(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let labels: Vec<&str> = text
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(i, l)| !l.is_empty() && !l.starts_with('#') && !(*i == 0 && *l == "fold"))
        .map(|(_, l)| l)
        .collect();
    if labels.is_empty() {
        return Err(Error::EmptyData(format!("{}: no fold labels", path.display())));
    }
    let mut distinct: Vec<&str> = labels.clone();
    // numeric labels sort numerically
    distinct.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    distinct.dedup();
    Ok(labels.iter().map(|l| distinct.iter().position(|d| d == l).expect("label present")).collect())
}

/// File name of the dataset description inside a dataset directory.
pub const DATASET_FILE: &str = "dataset.txt";

fn session_dir(dir: &Path, s: usize) -> PathBuf {
    dir.join(format!("session{s:02}"))
}

fn key_values(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Write `dataset` as a directory: `dataset.txt` plus one `sessionNN/`
/// folder per session holding `events.tsv`, `bold.<ext>` and `confounds.csv`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, bold_ext: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut desc = String::new();
    desc.push_str(&format!("tr = {:?}\n", dataset.tr()));
    desc.push_str(&format!("sessions = {}\n", dataset.sessions().len()));
    desc.push_str(&format!("conditions = {}\n", dataset.num_conditions()));
    desc.push_str(&format!("bold = bold.{bold_ext}\n"));
    std::fs::write(dir.join(DATASET_FILE), desc)?;
    for (s, session) in dataset.sessions().iter().enumerate() {
        let sd = session_dir(dir, s);
        std::fs::create_dir_all(&sd)?;
        write_events(&sd.join("events.tsv"), &session.events)?;
        write_bold(&sd.join(format!("bold.{bold_ext}")), &session.bold)?;
        if session.confounds.ncols() > 0 {
            let names: Vec<String> = (0..session.confounds.ncols()).map(|j| format!("c{j}")).collect();
            write_matrix(&sd.join("confounds.csv"), &session.confounds, &names)?;
        }
    }
    Ok(())
}

/// Inverse of [`write_dataset`]. A session without `confounds.csv` gets an
/// intercept only.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let desc_path = dir.join(DATASET_FILE);
    let text = read_text(&desc_path)?;
    let (mut tr, mut count, mut conditions, mut bold) = (None, None, None, "bold.csv".to_string());
    for (k, v, line) in key_values(&text).map_err(|e| located(&desc_path, e))? {
        let bad = || Error::format(format!("{}, line {line}", desc_path.display()), format!("invalid value `{v}` for `{k}`"));
        match k.as_str() {
            "tr" => tr = Some(v.parse::<f64>().map_err(|_| bad())?),
            "sessions" => count = Some(v.parse::<usize>().map_err(|_| bad())?),
            "conditions" => conditions = Some(v.parse::<usize>().map_err(|_| bad())?),
            "bold" => bold = v,
            _ => {}
        }
    }
    let missing = |k: &str| Error::format(desc_path.display().to_string(), format!("missing `{k}`"));
    let tr = tr.ok_or_else(|| missing("tr"))?;
    let count = count.ok_or_else(|| missing("sessions"))?;
    let mut sessions = Vec::with_capacity(count);
    for s in 0..count {
        let sd = session_dir(dir, s);
        let mut events = read_events(&sd.join("events.tsv"), conditions)?;
        events = EventTable::new(events.events().to_vec(), events.num_conditions(), format!("session{s:02}"))?;
        let bold = read_bold(&sd.join(&bold))?;
        let conf_path = sd.join("confounds.csv");
        let confounds = if conf_path.exists() {
            read_matrix(&conf_path)?
        } else {
            DMatrix::zeros(bold.nrows(), 0)
        };
        sessions.push(Session::new(events, bold, confounds)?);
    }
    if conditions.is_none() {
        // align condition counts inferred per session
        let p = sessions.iter().map(|s| s.events.num_conditions()).max().unwrap_or(0);
        for s in &mut sessions {
            s.events = EventTable::new(s.events.events().to_vec(), p, s.events.session_id().to_string())?;
        }
    }
    Dataset::new(sessions, tr)
}

/// Generate every session of `spec` and write it as a dataset directory,
/// together with `truth.txt`, `truth_hrf.csv`, `truth_beta.csv` and per
/// session `truth_w.csv` and `truth_sigma.csv`.
pub fn write_simulation(dir: &Path, spec: &SimSpec, bold_ext: &str) -> Result<()> {
    spec.validate()?;
    let beta = gen_betas(spec)?;
    let sims = (0..spec.sessions)
        .map(|s| gen_session_with_betas(spec, s, &beta))
        .collect::<Result<Vec<_>>>()?;
    let sessions = sims
        .iter()
        .map(|s| Session::new(s.events.clone(), s.bold.clone(), s.confounds.clone()))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(dir, &Dataset::new(sessions, spec.tr)?, bold_ext)?;
    std::fs::write(dir.join("truth.txt"), truth_record(spec)?)?;
    let h = spec.hrf_samples()?;
    let mut hrf = DMatrix::zeros(h.len(), 2);
    for (i, v) in h.iter().enumerate() {
        hrf[(i, 0)] = i as f64 * spec.tr;
        hrf[(i, 1)] = *v;
    }
    write_matrix(&dir.join("truth_hrf.csv"), &hrf, &["time".into(), "h".into()])?;
    write_matrix(&dir.join("truth_beta.csv"), &beta, &bold_header(spec.voxels))?;
    for (s, sim) in sims.iter().enumerate() {
        let sd = session_dir(dir, s);
        write_matrix(&sd.join("truth_w.csv"), &sim.truth.w, &bold_header(spec.voxels))?;
        let sigma = DMatrix::from_row_slice(1, spec.voxels, &sim.truth.sigma);
        write_matrix(&sd.join("truth_sigma.csv"), &sigma, &bold_header(spec.voxels))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bold_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bold.csv");
        let m = DMatrix::from_fn(5, 3, |i, j| (i as f64 * 0.1 + 1.0 / 3.0).powi(j as i32 + 1) * 1e-7 + j as f64);
        write_bold(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("v0,v1,v2\n"));
        assert_eq!(read_bold(&path).unwrap(), m);
    }

    #[test]
    fn npy_path_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bold.npy");
        let m = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64 / 7.0);
        write_bold(&path, &m).unwrap();
        assert_eq!(read_bold(&path).unwrap(), m);
        assert!(matches!(write_bold(&dir.path().join("e.npy"), &DMatrix::zeros(0, 0)), Err(Error::EmptyData(_))));
        assert!(write_bold(&dir.path().join("bold.txt"), &m).is_err());
    }

    #[test]
    fn csv_errors_name_lines() {
        let err = |text: &str| read_csv_matrix(text.as_bytes(), true).unwrap_err();
        match err("v0,v1\n1,2\n3,x\n") {
            Error::Format { location, message } => {
                assert_eq!(location, "line 3");
                assert!(message.contains("column 2"));
            }
            other => panic!("{other:?}"),
        }
        match err("v0,v2\n1,2\n") {
            Error::Format { location, .. } => assert_eq!(location, "line 1"),
            other => panic!("{other:?}"),
        }
        match err("v0,v1\n1,2\n3\n") {
            Error::Format { location, .. } => assert_eq!(location, "line 3"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(err("v0\n"), Error::EmptyData(_)));
        assert!(read_csv_matrix("a,b\n1,2\n".as_bytes(), false).is_ok());
    }

    #[test]
    fn events_parse_with_comments() {
        let text = "# session one\nonset\tcondition\n0.0\t1\n# pause\n12.5\t0\n";
        let ev = parse_events(text.as_bytes(), Some(2), "s".into()).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev.events()[1], Event { onset: 12.5, condition: 0 });
        match parse_events("onset\tcondition\n1.0\tx\n".as_bytes(), None, "s".into()) {
            Err(Error::Format { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_events("time\tcond\n".as_bytes(), None, "s".into()),
            Err(Error::Format { .. })
        ));
        assert!(parse_events("onset\tcondition\n1.0\t3\n".as_bytes(), Some(2), "s".into()).is_err());
    }

    #[test]
    fn events_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run1.tsv");
        let ev = EventTable::new(
            vec![Event { onset: 0.1 + 0.2, condition: 2 }, Event { onset: 7.0, condition: 0 }],
            3,
            "run1",
        )
        .unwrap();
        write_events(&path, &ev).unwrap();
        assert_eq!(read_events(&path, Some(3)).unwrap(), ev);
    }

    #[test]
    fn folds_map_to_dense_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.txt");
        std::fs::write(&path, "fold\n10\n2\n10\n3\n").unwrap();
        assert_eq!(read_folds(&path).unwrap(), vec![2, 0, 2, 1]);
    }

    #[test]
    fn simulation_directory_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SimSpec {
            n: 80,
            p: 2,
            voxels: 3,
            sessions: 2,
            ..SimSpec::default()
        };
        write_simulation(dir.path(), &spec, "npy").unwrap();
        let data = read_dataset(dir.path()).unwrap();
        assert_eq!(data.sessions().len(), 2);
        assert_eq!(data.num_voxels(), 3);
        assert_eq!(data.num_conditions(), 2);
        let direct = crate::simulate::gen_session(&spec, 1).unwrap();
        assert_eq!(data.sessions()[1].bold, direct.bold);
        assert_eq!(data.sessions()[1].confounds, direct.confounds);
        assert_eq!(data.sessions()[1].events.events(), direct.events.events());
        let truth = std::fs::read_to_string(dir.path().join("truth.txt")).unwrap();
        assert!(truth.contains("rng = "));
    }

    #[test]
    fn dataset_without_confounds_or_condition_count() {
        let dir = tempfile::tempdir().unwrap();
        let sd = dir.path().join("session00");
        std::fs::create_dir_all(&sd).unwrap();
        std::fs::write(dir.path().join(DATASET_FILE), "tr = 2\nsessions = 1\n").unwrap();
        std::fs::write(sd.join("events.tsv"), "onset\tcondition\n0\t0\n10\t2\n").unwrap();
        write_bold(&sd.join("bold.csv"), &DMatrix::from_element(20, 2, 1.5)).unwrap();
        let data = read_dataset(dir.path()).unwrap();
        assert_eq!(data.num_conditions(), 3);
        assert_eq!(data.sessions()[0].confounds.ncols(), 0);
        assert_eq!(data.tr(), 2.0);
        std::fs::write(dir.path().join(DATASET_FILE), "sessions = 1\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
