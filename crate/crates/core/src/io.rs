//! On-disk dataset layout.
//!
//! ```text
//! manifest.json     {n, C, leads, length, class_names, superclass_of, files}
//! signals.f32       little-endian f32, [n × leads × length]
//! labels.csv        instance_id,labels            (labels: "0;3")
//! candidates.csv    instance_id,candidates,ambiguous_flag
//! splits.csv        instance_id,split
//! features.csv      instance_id,f0,f1,...
//! provenance.json   generation descriptor
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, LabelSet, LabelSpace, PartialDataset, Provenance, SignalRecord, Split};
use crate::error::{CoreError, Result};
use crate::similarity::{MatrixKind, TransitionMatrix};

pub const MANIFEST: &str = "manifest.json";
pub const SIGNALS: &str = "signals.f32";
pub const LABELS: &str = "labels.csv";
pub const CANDIDATES: &str = "candidates.csv";
pub const SPLITS: &str = "splits.csv";
pub const FEATURES: &str = "features.csv";
pub const PROVENANCE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub leads: usize,
    pub length: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub superclass_of: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CoreError::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| CoreError::format(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CoreError::format(path, e))
}

fn csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv_reader(path)?;
    rdr.records()
        .map(|r| r.map_err(|e| CoreError::format(path, e)))
        .collect()
}

pub fn format_labels(set: &LabelSet) -> String {
    set.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn parse_labels(text: &str, c: usize, path: &Path) -> Result<LabelSet> {
    let mut out = LabelSet::new();
    for part in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let k: usize = part
            .parse()
            .map_err(|_| CoreError::format(path, format!("bad label index {part:?}")))?;
        if k >= c {
            return Err(CoreError::format(path, format!("label index {k} outside 0..{c}")));
        }
        out.insert(k);
    }
    Ok(out)
}

fn parse_f64(text: &str, path: &Path) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|_| CoreError::format(path, format!("bad number {text:?}")))
}

pub fn read_signals(path: &Path, n: usize, width: usize) -> Result<Vec<Arc<[f64]>>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != n * width * 4 {
        return Err(CoreError::format(
            path,
            format!("expected {} bytes for {n}×{width} floats, found {}", n * width * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(width * 4)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect::<Vec<f64>>()
                .into()
        })
        .collect())
}

pub fn write_signals(path: &Path, signals: &[&[f64]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(signals.iter().map(|s| s.len()).sum::<usize>() * 4);
    for s in signals {
        for &v in s.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| CoreError::format(path, e);
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    finish(w, path)
}

pub fn write_candidates(path: &Path, ds: &PartialDataset) -> Result<()> {
    let rows: Vec<Vec<String>> = ds
        .records
        .iter()
        .map(|r| {
            vec![
                r.instance_id.clone(),
                format_labels(&r.candidate),
                u8::from(r.ambiguous).to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["instance_id".into(), "candidates".into(), "ambiguous_flag".into()],
        &rows,
    )
}

/// Writes the complete dataset directory.
pub fn save_dataset(ds: &PartialDataset, dir: &Path) -> Result<()> {
    let signals: Vec<&[f64]> = ds.records.iter().map(|r| &r.signal[..]).collect();
    write_signals(&dir.join(SIGNALS), &signals)?;
    let labels: Vec<Vec<String>> = ds
        .records
        .iter()
        .map(|r| vec![r.instance_id.clone(), format_labels(&r.ground_truth)])
        .collect();
    write_csv(&dir.join(LABELS), &["instance_id".into(), "labels".into()], &labels)?;
    write_candidates(&dir.join(CANDIDATES), ds)?;
    let splits: Vec<Vec<String>> = ds
        .records
        .iter()
        .map(|r| vec![r.instance_id.clone(), r.split.as_str().into()])
        .collect();
    write_csv(&dir.join(SPLITS), &["instance_id".into(), "split".into()], &splits)?;

    let mut files = BTreeMap::new();
    files.insert("signals".into(), SIGNALS.into());
    files.insert("labels".into(), LABELS.into());
    files.insert("candidates".into(), CANDIDATES.into());
    files.insert("splits".into(), SPLITS.into());
    if let Some(p) = &ds.provenance {
        write_json(&dir.join(PROVENANCE), p)?;
        files.insert("provenance".into(), PROVENANCE.into());
    }
    if dir.join(FEATURES).exists() {
        files.insert("features".into(), FEATURES.into());
    }
    let manifest = Manifest {
        n: ds.records.len(),
        c: ds.num_classes(),
        leads: ds.leads,
        length: ds.length,
        class_names: ds.label_space.class_names().to_vec(),
        superclass_of: ds.label_space.superclass_map(),
        files,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn file_in(dir: &Path, manifest: &Manifest, key: &str, default: &str) -> PathBuf {
    dir.join(manifest.files.get(key).map_or(default, String::as_str))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

/// Loads a dataset directory. Without a candidates file every record is clean.
pub fn load_dataset(dir: &Path) -> Result<PartialDataset> {
    let manifest = read_manifest(dir)?;
    let space = LabelSpace::with_superclass_map(manifest.class_names.clone(), &manifest.superclass_of)?;
    if space.num_classes() != manifest.c {
        return Err(CoreError::format(
            dir.join(MANIFEST),
            format!("C = {} but {} class names", manifest.c, space.num_classes()),
        ));
    }
    let c = manifest.c;
    let width = manifest.leads * manifest.length;
    let signals = read_signals(&file_in(dir, &manifest, "signals", SIGNALS), manifest.n, width)?;

    let labels_path = file_in(dir, &manifest, "labels", LABELS);
    let label_rows = csv_rows(&labels_path)?;
    if label_rows.len() != manifest.n {
        return Err(CoreError::format(
            &labels_path,
            format!("{} rows but manifest says n = {}", label_rows.len(), manifest.n),
        ));
    }

    let splits_path = file_in(dir, &manifest, "splits", SPLITS);
    let mut splits = HashMap::new();
    if splits_path.exists() {
        for row in csv_rows(&splits_path)? {
            let split = match row.get(1).map(str::trim) {
                Some("train") => Split::Train,
                Some("test") => Split::Test,
                other => {
                    return Err(CoreError::format(&splits_path, format!("bad split {other:?}")))
                }
            };
            splits.insert(row.get(0).unwrap_or_default().to_string(), split);
        }
    }

    let cand_path = file_in(dir, &manifest, "candidates", CANDIDATES);
    let mut candidates = HashMap::new();
    if cand_path.exists() {
        for row in csv_rows(&cand_path)? {
            let id = row.get(0).unwrap_or_default().to_string();
            let set = parse_labels(row.get(1).unwrap_or_default(), c, &cand_path)?;
            let flag = match row.get(2).map(str::trim) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") | None => false,
                Some(other) => {
                    return Err(CoreError::format(&cand_path, format!("bad ambiguous_flag {other:?}")))
                }
            };
            candidates.insert(id, (set, flag));
        }
    }

    let mut records = Vec::with_capacity(manifest.n);
    for (row, signal) in label_rows.iter().zip(signals) {
        let id = row.get(0).unwrap_or_default().to_string();
        let truth = parse_labels(row.get(1).unwrap_or_default(), c, &labels_path)?;
        let (candidate, ambiguous) = match candidates.remove(&id) {
            Some(entry) => entry,
            None if candidates.is_empty() => (truth.clone(), false),
            None => {
                return Err(CoreError::format(&cand_path, format!("no candidate row for {id}")))
            }
        };
        let split = splits.get(&id).copied().unwrap_or(Split::Train);
        records.push(SignalRecord {
            instance_id: id,
            signal,
            ground_truth: truth,
            candidate,
            ambiguous,
            split,
        });
    }
    let prov_path = file_in(dir, &manifest, "provenance", PROVENANCE);
    let provenance: Option<Provenance> = if prov_path.exists() {
        Some(read_json(&prov_path)?)
    } else {
        None
    };
    Ok(PartialDataset {
        label_space: space,
        leads: manifest.leads,
        length: manifest.length,
        records,
        provenance,
    })
}

pub fn write_features(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut header = vec!["instance_id".to_string()];
    header.extend((0..table.dim()).map(|i| format!("f{i}")));
    let rows: Vec<Vec<String>> = table
        .ids()
        .iter()
        .zip(table.rows())
        .map(|(id, row)| {
            std::iter::once(id.clone())
                .chain(row.iter().map(|v| v.to_string()))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Reads a feature table; rows with missing attributes are rejected.
pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in csv_rows(path)? {
        let mut it = rec.iter();
        ids.push(it.next().unwrap_or_default().to_string());
        let mut row = Vec::new();
        for cell in it {
            if cell.trim().is_empty() {
                return Err(CoreError::format(path, format!("{}: missing attribute", ids.last().unwrap())));
            }
            row.push(parse_f64(cell, path)?);
        }
        rows.push(row);
    }
    FeatureTable::new(ids, rows).map_err(|e| CoreError::format(path, e))
}

/// Writes a transition matrix: a header of class names, then one row of
/// floats per matrix row, each in shortest round-trip form.
pub fn write_matrix(path: &Path, t: &TransitionMatrix) -> Result<()> {
    let rows: Vec<Vec<String>> = t
        .values
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect())
        .collect();
    write_csv(path, &t.col_labels, &rows)
}

/// Raw matrix contents: header and numeric rows.
pub fn read_matrix_raw(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CoreError::format(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CoreError::format(path, e))?;
        let row = rec.iter().map(|c| parse_f64(c, path)).collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(CoreError::format(path, "row width differs from header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Reads an instance-level matrix whose rows follow the dataset's record order.
pub fn read_instance_matrix(path: &Path, ds: &PartialDataset) -> Result<TransitionMatrix> {
    let (header, rows) = read_matrix_raw(path)?;
    let mut order = Vec::with_capacity(header.len());
    for name in &header {
        order.push(
            ds.label_space
                .index_of(name)
                .ok_or_else(|| CoreError::UnknownClass(name.clone()))?,
        );
    }
    let c = ds.num_classes();
    let mut values = vec![vec![0.0; c]; rows.len()];
    for (dst, src) in values.iter_mut().zip(&rows) {
        for (&k, &v) in order.iter().zip(src) {
            dst[k] = v;
        }
    }
    let ids = ds.records.iter().map(|r| r.instance_id.clone()).collect::<Vec<_>>();
    if ids.len() != values.len() {
        return Err(CoreError::format(
            path,
            format!("instance-level matrix has {} rows, dataset has {}", values.len(), ids.len()),
        ));
    }
    TransitionMatrix::new(
        MatrixKind::Instance,
        ids,
        ds.label_space.class_names().to_vec(),
        values,
    )
}
