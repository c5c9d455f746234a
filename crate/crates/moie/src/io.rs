//! Dataset files (CSV and JSON-lines) and JSON checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use moie_core::data::{default_class_names, Dataset, GenSpec};
use moie_core::numcore::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const EMB: &str = "emb_";
const CONCEPT: &str = "concept_";
const TRUTH: &str = "truth_";
const META: &str = "meta_";

/// Pretty JSON; floats keep their exact value through a save/load cycle.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::write(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))
        }
        _ => Ok(()),
    }
}

/// Columns `emb_*`, `concept_<name>`, optional `truth_<name>`, `label`,
/// optional `subgroup` and `meta_*`. The class count is the largest label
/// plus one.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::read(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let at = |msg: String| invalid(format!("{}: {msg}", path.display()));
    let headers = reader.headers().map_err(|e| at(e.to_string()))?.clone();
    let cols = |prefix: &str| -> Vec<(usize, String)> {
        headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix).map(|n| (i, n.to_string())))
            .collect()
    };
    let (emb, concepts, truth, meta) = (cols(EMB), cols(CONCEPT), cols(TRUTH), cols(META));
    let label = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| at("missing required column `label`".into()))?;
    let subgroup = headers.iter().position(|h| h == "subgroup");
    if emb.is_empty() {
        return Err(at("no `emb_*` columns".into()));
    }
    if concepts.is_empty() {
        return Err(at("no `concept_*` columns".into()));
    }
    if !truth.is_empty() && truth.len() != concepts.len() {
        return Err(at(
            "`truth_*` columns must pair with the `concept_*` columns".into(),
        ));
    }
    log::info!(
        "{}: {} embedding, {} concept, {} truth, {} metadata columns{}",
        path.display(),
        emb.len(),
        concepts.len(),
        truth.len(),
        meta.len(),
        if subgroup.is_some() {
            ", subgroups"
        } else {
            ""
        }
    );

    let (mut e, mut c, mut t, mut md) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|err| at(format!("row {row}: {err}")))?;
        if rec.len() != headers.len() {
            return Err(at(format!(
                "row {row}: expected {} cells, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            let cell = rec[i].trim();
            let v: f64 = cell.parse().map_err(|_| {
                at(format!(
                    "row {row}: column `{}` is not a number: {cell:?}",
                    &headers[i]
                ))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(at(format!(
                    "row {row}: column `{}` is not finite",
                    &headers[i]
                )))
            }
        };
        let int = |i: usize| -> Result<usize> {
            let cell = rec[i].trim();
            cell.parse().map_err(|_| {
                at(format!(
                    "row {row}: column `{}` is not a class id: {cell:?}",
                    &headers[i]
                ))
            })
        };
        for &(i, _) in &emb {
            e.push(num(i)?);
        }
        for &(i, _) in &concepts {
            c.push(num(i)?);
        }
        for &(i, _) in &truth {
            t.push(num(i)?);
        }
        for &(i, _) in &meta {
            md.push(num(i)?);
        }
        labels.push(int(label)?);
        if let Some(i) = subgroup {
            groups.push(int(i)?);
        }
    }
    let m = labels.len();
    if m == 0 {
        return Err(at("no data rows".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |&y| y + 1).max(2);
    let name = path
        .file_stem()
        .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    let ds = Dataset {
        name,
        seed: 0,
        num_classes,
        class_names: default_class_names(num_classes),
        concept_names: concepts.into_iter().map(|(_, n)| n).collect(),
        embeddings: Matrix::from_vec(m, emb.len(), e)?,
        labels,
        concepts: Matrix::from_vec(m, c.len() / m, c)?,
        true_concepts: (!truth.is_empty())
            .then(|| Matrix::from_vec(m, truth.len(), t))
            .transpose()?,
        subgroups: subgroup.map(|_| groups),
        metadata: (!meta.is_empty())
            .then(|| Matrix::from_vec(m, meta.len(), md))
            .transpose()?,
    };
    ds.validate().map_err(|err| at(err.to_string()))?;
    Ok(ds)
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::write(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wr = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut header: Vec<String> = (0..data.embedding_dim())
        .map(|i| format!("{EMB}{i}"))
        .collect();
    header.extend(data.concept_names.iter().map(|n| format!("{CONCEPT}{n}")));
    if data.true_concepts.is_some() {
        header.extend(data.concept_names.iter().map(|n| format!("{TRUTH}{n}")));
    }
    header.push("label".into());
    if data.subgroups.is_some() {
        header.push("subgroup".into());
    }
    if let Some(md) = &data.metadata {
        header.extend((0..md.cols()).map(|i| format!("{META}{i}")));
    }
    w.write_record(&header).map_err(wr)?;
    for j in 0..data.len() {
        let mut rec: Vec<String> = data.embeddings.row(j).iter().map(f64::to_string).collect();
        rec.extend(data.concepts.row(j).iter().map(f64::to_string));
        if let Some(t) = &data.true_concepts {
            rec.extend(t.row(j).iter().map(f64::to_string));
        }
        rec.push(data.labels[j].to_string());
        if let Some(g) = &data.subgroups {
            rec.push(g[j].to_string());
        }
        if let Some(md) = &data.metadata {
            rec.extend(md.row(j).iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(wr)?;
    }
    w.flush().map_err(|e| Error::write(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonRow {
    embedding: Vec<f64>,
    label: usize,
    concepts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subgroup: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<Vec<f64>>,
}

/// Everything about a split except its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub concept_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub schema_version: u32,
    pub seed: u64,
    /// Present when the data was generated.
    pub spec: Option<GenSpec>,
    pub splits: Vec<SplitInfo>,
}

pub fn save_jsonl(data: &Dataset, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::write(path, e))?;
    let mut w = BufWriter::new(file);
    for j in 0..data.len() {
        let row = JsonRow {
            embedding: data.embeddings.row(j).to_vec(),
            label: data.labels[j],
            concepts: data.concepts.row(j).to_vec(),
            truth: data.true_concepts.as_ref().map(|t| t.row(j).to_vec()),
            subgroup: data.subgroups.as_ref().map(|g| g[j]),
            metadata: data.metadata.as_ref().map(|m| m.row(j).to_vec()),
        };
        serde_json::to_writer(&mut w, &row)
            .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| Error::write(path, e))?;
    }
    w.flush().map_err(|e| Error::write(path, e))
}

pub fn load_jsonl(path: &Path, info: &SplitInfo, seed: u64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::read(path, e))?;
    let at = |msg: String| invalid(format!("{}: {msg}", path.display()));
    let rows: Vec<JsonRow> = BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::read(path, e))?;
            serde_json::from_str(&line).map_err(|e| at(format!("row {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    if rows.len() != info.rows {
        return Err(at(format!(
            "manifest lists {} rows, file has {}",
            info.rows,
            rows.len()
        )));
    }
    let m = rows.len();
    let width = |f: &dyn Fn(&JsonRow) -> usize| rows.first().map_or(0, f);
    let stack =
        |get: &dyn Fn(&JsonRow) -> Option<&Vec<f64>>, what: &str| -> Result<Option<Matrix>> {
            if rows.first().and_then(get).is_none() {
                return Ok(None);
            }
            let w = width(&|r| get(r).map_or(0, Vec::len));
            let mut out = Vec::with_capacity(m * w);
            for (i, r) in rows.iter().enumerate() {
                let v = get(r).ok_or_else(|| at(format!("row {}: missing {what}", i + 1)))?;
                if v.len() != w {
                    return Err(at(format!(
                        "row {}: {what} has {} values, expected {w}",
                        i + 1,
                        v.len()
                    )));
                }
                out.extend_from_slice(v);
            }
            Ok(Some(Matrix::from_vec(m, w, out)?))
        };
    let embeddings =
        stack(&|r| Some(&r.embedding), "embedding")?.unwrap_or_else(|| Matrix::zeros(0, 0));
    let concepts =
        stack(&|r| Some(&r.concepts), "concepts")?.unwrap_or_else(|| Matrix::zeros(0, 0));
    let subgroups = if rows.first().is_some_and(|r| r.subgroup.is_some()) {
        Some(
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    r.subgroup
                        .ok_or_else(|| at(format!("row {}: missing subgroup", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let ds = Dataset {
        name: info.name.clone(),
        seed,
        num_classes: info.num_classes,
        class_names: info.class_names.clone(),
        concept_names: info.concept_names.clone(),
        embeddings,
        labels: rows.iter().map(|r| r.label).collect(),
        concepts,
        true_concepts: stack(&|r| r.truth.as_ref(), "truth")?,
        subgroups,
        metadata: stack(&|r| r.metadata.as_ref(), "metadata")?,
    };
    ds.validate().map_err(|e| at(e.to_string()))?;
    Ok(ds)
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `<name>.jsonl` per split plus a manifest into `dir`.
pub fn save_splits(
    dir: &Path,
    splits: &[&Dataset],
    seed: u64,
    spec: Option<&GenSpec>,
) -> Result<DataManifest> {
    let mut infos = Vec::with_capacity(splits.len());
    for d in splits {
        let file = format!("{}.jsonl", d.name);
        save_jsonl(d, &dir.join(&file))?;
        infos.push(SplitInfo {
            name: d.name.clone(),
            file,
            rows: d.len(),
            num_classes: d.num_classes,
            class_names: d.class_names.clone(),
            concept_names: d.concept_names.clone(),
        });
    }
    let manifest = DataManifest {
        schema_version: SCHEMA_VERSION,
        seed,
        spec: spec.cloned(),
        splits: infos,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_splits(dir: &Path) -> Result<(DataManifest, Vec<Dataset>)> {
    let manifest: DataManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(invalid(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            dir.join(MANIFEST).display(),
            manifest.schema_version
        )));
    }
    let data = manifest
        .splits
        .iter()
        .map(|s| load_jsonl(&dir.join(&s.file), s, manifest.seed))
        .collect::<Result<_>>()?;
    Ok((manifest, data))
}
