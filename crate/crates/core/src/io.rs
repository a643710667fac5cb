//! Text file formats and atomic persistence.
//!
//! All indices in files are 1-based; everything returned from here is
//! 0-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MatchError, Result};
use crate::metrics::MatchSet;
use crate::model::{AffinityInput, FeatureIndexMap, VALIDATION_TOL};
use crate::pairwise::DescriptorSet;
use crate::synth::CellResult;

/// Metadata line marking an affinity file as simulator output.
const SYNTHETIC_MARKER: &str = "#source synthetic";

/// Descriptor norms further than this from 1 trigger a warning.
const NORM_WARN_TOL: f64 = 1e-6;

pub const SWEEP_CSV_HEADER: &str =
    "axis1,axis2,solver,repeats,mean_error,std_error,mean_input_error,mean_iters,mean_seconds";

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so `path` never holds a partial write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| MatchError::Io(e.error))?;
    Ok(())
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> MatchError {
    MatchError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Numbered, trimmed, non-blank lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<T: std::str::FromStr>(tok: &str, what: &str, path: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} '{tok}'")))
}

/// Parses the two header lines and returns the index map and the
/// remaining lines.
fn parse_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    path: &str,
) -> Result<FeatureIndexMap> {
    let (ln, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing '#images' header"))?;
    let n: usize = match first.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["#images", n] => parse_field(n, "image count", path, ln)?,
        _ => return Err(parse_err(path, ln, "expected '#images <n>'")),
    };
    let (ln, second) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln + 1, "missing '#features' header"))?;
    let mut toks = second.split_whitespace();
    if toks.next() != Some("#features") {
        return Err(parse_err(path, ln, "expected '#features p_1 ... p_n'"));
    }
    let counts = toks
        .map(|t| parse_field::<usize>(t, "feature count", path, ln))
        .collect::<Result<Vec<_>>>()?;
    if counts.len() != n {
        return Err(parse_err(
            path,
            ln,
            format!("'#features' lists {} counts for {n} images", counts.len()),
        ));
    }
    FeatureIndexMap::new(&counts).map_err(|e| parse_err(path, ln, e.to_string()))
}

/// Parses a 1-based `(image, feature)` pair into a 0-based global row.
fn parse_feature(
    map: &FeatureIndexMap,
    image: &str,
    feature: &str,
    path: &str,
    line: usize,
) -> Result<(usize, usize)> {
    let i: usize = parse_field(image, "image index", path, line)?;
    let a: usize = parse_field(feature, "feature index", path, line)?;
    if i == 0 || i > map.n_images() {
        return Err(parse_err(
            path,
            line,
            format!("image {i} outside 1..={}", map.n_images()),
        ));
    }
    if a == 0 || a > map.count(i - 1) {
        return Err(parse_err(
            path,
            line,
            format!("feature {a} outside 1..={} for image {i}", map.count(i - 1)),
        ));
    }
    Ok((i - 1, map.offset(i - 1) + a - 1))
}

fn header_text(map: &FeatureIndexMap) -> String {
    let mut out = format!("#images {}\n#features", map.n_images());
    for p in map.counts() {
        let _ = write!(out, " {p}");
    }
    out.push('\n');
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => {
            parse_err(&path.display().to_string(), 0, "not valid UTF-8")
        }
        _ => MatchError::Io(e),
    })
}

/// A loaded affinity file.
#[derive(Debug, Clone)]
pub struct AffinityFile {
    pub input: AffinityInput,
    /// Set when the file carries the simulator's `#source synthetic` line.
    pub synthetic: bool,
}

/// Parses affinity file text. `path` is only used in error messages.
pub fn parse_affinity(text: &str, path: &str) -> Result<AffinityFile> {
    let mut lines = content_lines(text);
    let map = parse_header(&mut lines, path)?;
    let n = map.n_images();
    let mut synthetic = false;
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut observed = DMatrix::from_element(n, n, false);

    for (ln, line) in lines {
        if line.starts_with('#') {
            if line.split_whitespace().collect::<Vec<_>>() == ["#source", "synthetic"] {
                synthetic = true;
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 'i a j b score', found {} fields", toks.len()),
            ));
        }
        let (i, r) = parse_feature(&map, toks[0], toks[1], path, ln)?;
        let (j, c) = parse_feature(&map, toks[2], toks[3], path, ln)?;
        if i == j {
            return Err(parse_err(
                path,
                ln,
                format!("scores within image {} are not allowed", i + 1),
            ));
        }
        let score: f64 = parse_field(toks[4], "score", path, ln)?;
        if !score.is_finite() {
            return Err(parse_err(
                path,
                ln,
                format!("non-finite score '{}'", toks[4]),
            ));
        }
        if !(score > 0.0 && score <= 1.0) {
            return Err(parse_err(path, ln, format!("score {score} outside (0, 1]")));
        }
        if directed.insert((r, c), score).is_some() {
            return Err(parse_err(path, ln, "duplicate entry"));
        }
        observed[(i, j)] = true;
        observed[(j, i)] = true;
    }

    let m = map.total();
    let mut scores = DMatrix::zeros(m, m);
    let mut asymmetric = 0usize;
    for (&(r, c), &v) in &directed {
        let value = match directed.get(&(c, r)) {
            Some(&w) => {
                if (v - w).abs() > VALIDATION_TOL {
                    asymmetric += 1;
                }
                0.5 * (v + w)
            }
            None => v,
        };
        scores[(r, c)] = value;
        scores[(c, r)] = value;
    }
    if asymmetric > 0 {
        log::warn!(
            "{path}: {} score pairs differ between directions; averaged",
            asymmetric / 2
        );
    }
    let input =
        AffinityInput::new(map, scores, observed).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(AffinityFile { input, synthetic })
}

pub fn read_affinity_file(path: &Path) -> Result<AffinityFile> {
    parse_affinity(&read_text(path)?, &path.display().to_string())
}

/// Loads the scores of an affinity file.
pub fn load_affinity(path: &Path) -> Result<AffinityInput> {
    Ok(read_affinity_file(path)?.input)
}

/// Affinity file text. Each nonzero score is written once, from the lower
/// global row to the higher one.
pub fn format_affinity(input: &AffinityInput, synthetic: bool) -> String {
    let map = input.index();
    let mut out = header_text(map);
    if synthetic {
        out.push_str(SYNTHETIC_MARKER);
        out.push('\n');
    }
    let s = input.scores();
    let m = map.total();
    for r in 0..m {
        for c in (r + 1)..m {
            let v = s[(r, c)];
            if v != 0.0 {
                let (i, a) = map.local_index(r).expect("row in range");
                let (j, b) = map.local_index(c).expect("row in range");
                let _ = writeln!(out, "{} {} {} {} {}", i + 1, a + 1, j + 1, b + 1, v);
            }
        }
    }
    out
}

pub fn save_affinity(path: &Path, input: &AffinityInput, synthetic: bool) -> Result<()> {
    write_atomic(path, format_affinity(input, synthetic).as_bytes())
}

/// Matches file text: the affinity header followed by `i a j b` lines.
pub fn format_matches(map: &FeatureIndexMap, matches: &MatchSet) -> Result<String> {
    matches.check_bounds(map)?;
    let mut out = header_text(map);
    for &(i, a, j, b) in matches.iter() {
        let _ = writeln!(out, "{} {} {} {}", i + 1, a + 1, j + 1, b + 1);
    }
    Ok(out)
}

pub fn save_matches(path: &Path, map: &FeatureIndexMap, matches: &MatchSet) -> Result<()> {
    write_atomic(path, format_matches(map, matches)?.as_bytes())
}

pub fn parse_matches(text: &str, path: &str) -> Result<(FeatureIndexMap, MatchSet)> {
    let mut lines = content_lines(text);
    let map = parse_header(&mut lines, path)?;
    let mut set = MatchSet::new();
    for (ln, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 'i a j b', found {} fields", toks.len()),
            ));
        }
        let (i, r) = parse_feature(&map, toks[0], toks[1], path, ln)?;
        let (j, c) = parse_feature(&map, toks[2], toks[3], path, ln)?;
        if i == j {
            return Err(parse_err(path, ln, format!("match within image {}", i + 1)));
        }
        set.insert(i, r - map.offset(i), j, c - map.offset(j))
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
    }
    Ok((map, set))
}

pub fn load_matches(path: &Path) -> Result<(FeatureIndexMap, MatchSet)> {
    parse_matches(&read_text(path)?, &path.display().to_string())
}

/// Parses one descriptor file: `dim <d>` then one row of `d` reals per
/// feature. Rows are normalized to unit length.
pub fn parse_descriptors(text: &str, path: &str, image: usize) -> Result<DescriptorSet> {
    let mut lines = content_lines(text);
    let (ln, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing 'dim <d>' header"))?;
    let d: usize = match first.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["dim", d] => parse_field(d, "dimension", path, ln)?,
        _ => return Err(parse_err(path, ln, "expected 'dim <d>'")),
    };
    if d == 0 {
        return Err(parse_err(path, ln, "dimension must be positive"));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut off_unit = 0usize;
    for (ln, line) in lines {
        let row = line
            .split_whitespace()
            .map(|t| parse_field::<f64>(t, "descriptor value", path, ln))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != d {
            return Err(parse_err(
                path,
                ln,
                format!("expected {d} values, found {}", row.len()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, ln, "non-finite descriptor value"));
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(parse_err(path, ln, "zero descriptor cannot be normalized"));
        }
        if (norm - 1.0).abs() > NORM_WARN_TOL {
            off_unit += 1;
        }
        values.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, ln, "no descriptors"));
    }
    if off_unit > 0 {
        log::warn!("{path}: normalized {off_unit} descriptors that were not unit length");
    }
    DescriptorSet::normalized(image, DMatrix::from_row_slice(rows, d, &values))
}

/// Loads every regular file in `dir`, in file-name order, as one image.
pub fn load_descriptor_dir(dir: &Path) -> Result<Vec<DescriptorSet>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(MatchError::invalid(format!(
            "no descriptor files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .enumerate()
        .map(|(image, p)| parse_descriptors(&read_text(p)?, &p.display().to_string(), image))
        .collect()
}

/// `(image, feature)` list, 1-based, one per line.
pub fn format_kept(kept: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for &(i, a) in kept {
        let _ = writeln!(out, "{} {}", i + 1, a + 1);
    }
    out
}

pub fn format_sweep_csv(rows: &[CellResult]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.axis1,
            r.axis2,
            r.solver,
            r.repeats,
            r.mean_error,
            r.std_error,
            r.mean_input_error,
            r.mean_iters,
            r.mean_seconds
        );
    }
    out
}

pub fn save_sweep_csv(path: &Path, rows: &[CellResult]) -> Result<()> {
    write_atomic(path, format_sweep_csv(rows).as_bytes())
}

/// Reads a sweep CSV back; used to check reports.
pub fn parse_sweep_csv(text: &str, path: &str) -> Result<Vec<CellResult>> {
    let mut lines = content_lines(text);
    match lines.next() {
        Some((_, h)) if h == SWEEP_CSV_HEADER => {}
        Some((ln, _)) => return Err(parse_err(path, ln, "unexpected CSV header")),
        None => return Err(parse_err(path, 1, "empty CSV")),
    }
    lines
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(parse_err(
                    path,
                    ln,
                    format!("expected 9 columns, found {}", f.len()),
                ));
            }
            let num = |k: usize| parse_field::<f64>(f[k], "number", path, ln);
            Ok(CellResult {
                axis1: num(0)?,
                axis2: num(1)?,
                solver: f[2].to_string(),
                repeats: parse_field(f[3], "repeat count", path, ln)?,
                mean_error: num(4)?,
                std_error: num(5)?,
                mean_input_error: num(6)?,
                mean_iters: num(7)?,
                mean_seconds: num(8)?,
            })
        })
        .collect()
}

/// Diagnostics written next to a `solve` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual_trace: Vec<f64>,
    pub change_residual_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub psd_gap: f64,
    pub binarity: f64,
    pub nuclear_norm: f64,
    pub wall_seconds: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub mu: f64,
    pub k: usize,
    pub m_prime: f64,
}

pub fn save_diagnostics(path: &Path, report: &DiagnosticsReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| MatchError::invalid(format!("cannot serialize diagnostics: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
