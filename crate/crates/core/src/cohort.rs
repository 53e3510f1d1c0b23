//! Metadata ingestion, record normalization, X-ray/CT pairing and cohort
//! manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the metadata columns holding each field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub patient: String,
    pub finding: String,
    pub modality: String,
    pub filename: String,
    pub offset: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            patient: "patientid".into(),
            finding: "finding".into(),
            modality: "modality".into(),
            filename: "filename".into(),
            offset: "offset".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub patient_id: String,
    pub finding: String,
    pub modality: String,
    pub filename: String,
    pub offset: Option<i64>,
    /// Every unmapped column, passed through untouched.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Xray,
    Ct,
}

impl Modality {
    /// "CT" anywhere in the string means CT; common X-ray spellings mean X-ray.
    pub fn parse_free_text(s: &str) -> Option<Modality> {
        let up = s.trim().to_ascii_uppercase();
        if up.contains("CT") {
            return Some(Modality::Ct);
        }
        let squashed: String = up.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match squashed.as_str() {
            "XRAY" | "XR" | "CXR" => Some(Modality::Xray),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Xray => "xray",
            Modality::Ct => "ct",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xray" => Ok(Modality::Xray),
            "ct" => Ok(Modality::Ct),
            other => Err(Error::InvalidInput(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_finding(finding: &str) -> Label {
        let positive = finding
            .split('/')
            .any(|tok| tok.trim().eq_ignore_ascii_case("COVID-19"));
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Class index used by the losses: 0 negative, 1 positive.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" | "0" => Ok(Label::Negative),
            "positive" | "1" => Ok(Label::Positive),
            other => Err(Error::InvalidInput(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub patient_id: String,
    /// The filename as given in the metadata; stable across machines.
    pub image_id: String,
    pub image_path: PathBuf,
    pub modality: Modality,
    pub label: Label,
    pub offset: Option<i64>,
}

impl ImageRecord {
    /// A raw row that normalizes back to this record.
    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            patient_id: self.patient_id.clone(),
            finding: match self.label {
                Label::Positive => "COVID-19".into(),
                Label::Negative => "non-COVID".into(),
            },
            modality: match self.modality {
                Modality::Xray => "X-ray".into(),
                Modality::Ct => "CT".into(),
            },
            filename: self.image_id.clone(),
            offset: self.offset,
            extra: BTreeMap::new(),
        }
    }

    fn sort_key(&self) -> (&str, &Path) {
        (&self.patient_id, &self.image_path)
    }
}

/// Why rows were dropped during normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropTally {
    pub todo: usize,
    pub missing_file: usize,
    pub unknown_modality: usize,
}

impl DropTally {
    pub fn total(&self) -> usize {
        self.todo + self.missing_file + self.unknown_modality
    }
}

impl fmt::Display for DropTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dropped todo={} missing_file={} unknown_modality={}",
            self.todo, self.missing_file, self.unknown_modality
        )
    }
}

fn parse_offset(s: &str) -> Option<i64> {
    let t = s.trim();
    t.parse::<i64>().ok().or_else(|| {
        // Integral floats such as "3.0" occur in exported spreadsheets.
        t.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && v.fract() == 0.0)
            .map(|v| v as i64)
    })
}

/// Reads the metadata table; one record per data row, in file order.
pub fn ingest_metadata(csv_path: &Path, columns: &ColumnMap) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(csv_path)
        .map_err(|e| Error::io(format!("read {}", csv_path.display()), e))?;
    if text.trim().is_empty() {
        return Err(Error::Empty(format!("{} is empty", csv_path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("metadata has no column '{name}'")))
    };
    let idx = [
        find(&columns.patient)?,
        find(&columns.finding)?,
        find(&columns.modality)?,
        find(&columns.filename)?,
        find(&columns.offset)?,
    ];
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let extra = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !idx.contains(i))
            .map(|(i, h)| (h.to_string(), row.get(i).unwrap_or("").to_string()))
            .collect();
        out.push(RawRecord {
            patient_id: get(idx[0]),
            finding: get(idx[1]),
            modality: get(idx[2]),
            filename: get(idx[3]),
            offset: parse_offset(&get(idx[4])),
            extra,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "{} has a header but no rows",
            csv_path.display()
        )));
    }
    Ok(out)
}

/// Filters and binarizes raw rows. Dropped rows are counted, never fatal.
pub fn normalize_records(raw: &[RawRecord], image_root: &Path) -> (Vec<ImageRecord>, DropTally) {
    let mut tally = DropTally::default();
    let mut out = Vec::new();
    for r in raw {
        if r.finding.trim().eq_ignore_ascii_case("todo") {
            tally.todo += 1;
            continue;
        }
        let Some(modality) = Modality::parse_free_text(&r.modality) else {
            tally.unknown_modality += 1;
            continue;
        };
        let path = image_root.join(&r.filename);
        if r.patient_id.is_empty() || r.filename.is_empty() || !path.is_file() {
            tally.missing_file += 1;
            continue;
        }
        out.push(ImageRecord {
            patient_id: r.patient_id.clone(),
            image_id: r.filename.clone(),
            image_path: path,
            modality,
            label: Label::from_finding(&r.finding),
            offset: r.offset,
        });
    }
    (out, tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetGap {
    Days(u64),
    Unknown,
}

impl fmt::Display for OffsetGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OffsetGap::Days(d) => write!(f, "{d}"),
            OffsetGap::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for OffsetGap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "unknown" {
            return Ok(OffsetGap::Unknown);
        }
        s.parse()
            .map(OffsetGap::Days)
            .map_err(|_| Error::InvalidInput(format!("bad offset gap '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSample {
    pub xray: ImageRecord,
    pub ct: ImageRecord,
    pub offset_gap: OffsetGap,
}

fn gap(a: Option<i64>, b: Option<i64>) -> OffsetGap {
    match (a, b) {
        (Some(a), Some(b)) => OffsetGap::Days(a.abs_diff(b)),
        _ => OffsetGap::Unknown,
    }
}

/// Matches every X-ray to its closest same-patient CT. Known gaps beat
/// unknown ones; ties go to the lexicographically smallest CT path.
/// X-rays without a same-patient CT are left out.
pub fn pair_xray_to_ct(xrays: &[ImageRecord], cts: &[ImageRecord]) -> Vec<PairedSample> {
    let mut by_patient: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for ct in cts.iter().filter(|c| c.modality == Modality::Ct) {
        by_patient.entry(&ct.patient_id).or_default().push(ct);
    }
    let mut out = Vec::new();
    for x in xrays.iter().filter(|x| x.modality == Modality::Xray) {
        let Some(candidates) = by_patient.get(x.patient_id.as_str()) else {
            continue;
        };
        let best = candidates
            .iter()
            .min_by(|a, b| {
                (gap(x.offset, a.offset), &a.image_path)
                    .cmp(&(gap(x.offset, b.offset), &b.image_path))
            })
            .expect("non-empty candidate list");
        out.push(PairedSample {
            xray: x.clone(),
            ct: (*best).clone(),
            offset_gap: gap(x.offset, best.offset),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_images: usize,
    pub n_patients: usize,
    pub n_positive_images: usize,
    pub n_negative_images: usize,
    pub n_positive_patients: usize,
    pub n_negative_patients: usize,
}

/// Any-positive patient labels, keyed by patient id.
pub fn patient_labels(records: &[ImageRecord]) -> BTreeMap<String, Label> {
    let mut out: BTreeMap<String, Label> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.patient_id.clone()).or_insert(Label::Negative);
        if r.label.is_positive() {
            *e = Label::Positive;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    AllXray,
    AllCt,
    PairedXrayTarget,
}

impl ManifestKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            ManifestKind::AllXray => "all_xray",
            ManifestKind::AllCt => "all_ct",
            ManifestKind::PairedXrayTarget => "paired_xray_target",
        }
    }
}

/// An ordered set of images. For the paired kind, `records` are the X-ray
/// targets and `pairs` holds the matched CT for each of them, index-aligned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ManifestKind,
    pub records: Vec<ImageRecord>,
    pub pairs: Vec<PairedSample>,
}

impl Manifest {
    pub fn new(kind: ManifestKind, mut records: Vec<ImageRecord>) -> Result<Self> {
        let want = match kind {
            ManifestKind::AllXray => Modality::Xray,
            ManifestKind::AllCt => Modality::Ct,
            ManifestKind::PairedXrayTarget => {
                return Err(Error::InvalidInput(
                    "paired manifests are built from pairs".into(),
                ))
            }
        };
        if let Some(r) = records.iter().find(|r| r.modality != want) {
            return Err(Error::InvalidInput(format!("{} is not {want}", r.image_id)));
        }
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Ok(Self {
            kind,
            records,
            pairs: Vec::new(),
        })
    }

    pub fn paired(mut pairs: Vec<PairedSample>) -> Self {
        pairs.sort_by(|a, b| a.xray.sort_key().cmp(&b.xray.sort_key()));
        Self {
            kind: ManifestKind::PairedXrayTarget,
            records: pairs.iter().map(|p| p.xray.clone()).collect(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    /// The paired CT for an X-ray image id, if this is a paired manifest.
    pub fn paired_ct(&self, xray_image_id: &str) -> Option<&ImageRecord> {
        self.pairs
            .iter()
            .find(|p| p.xray.image_id == xray_image_id)
            .map(|p| &p.ct)
    }

    pub fn stats(&self) -> Result<CohortStats> {
        cohort_stats(&self.records)
    }
}

pub fn cohort_stats(records: &[ImageRecord]) -> Result<CohortStats> {
    if records.is_empty() {
        return Err(Error::Empty(
            "cannot compute statistics of an empty manifest".into(),
        ));
    }
    let pos = records.iter().filter(|r| r.label.is_positive()).count();
    let patients = patient_labels(records);
    let pos_patients = patients.values().filter(|l| l.is_positive()).count();
    Ok(CohortStats {
        n_images: records.len(),
        n_patients: patients.len(),
        n_positive_images: pos,
        n_negative_images: records.len() - pos,
        n_positive_patients: pos_patients,
        n_negative_patients: patients.len() - pos_patients,
    })
}

/// The three cohort manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifests {
    pub all_xray: Manifest,
    pub all_ct: Manifest,
    pub paired: Manifest,
}

impl Manifests {
    pub fn build(records: &[ImageRecord]) -> Result<Self> {
        let (xr, ct): (Vec<ImageRecord>, Vec<ImageRecord>) = records
            .iter()
            .cloned()
            .partition(|r| r.modality == Modality::Xray);
        let all_xray = Manifest::new(ManifestKind::AllXray, xr)?;
        let all_ct = Manifest::new(ManifestKind::AllCt, ct)?;
        let paired = Manifest::paired(pair_xray_to_ct(&all_xray.records, &all_ct.records));
        Ok(Self {
            all_xray,
            all_ct,
            paired,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Manifest> {
        [&self.all_xray, &self.all_ct, &self.paired].into_iter()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        self.iter()
            .map(|m| {
                let path = dir.join(format!("{}.csv", m.kind.file_stem()));
                write_manifest(&path, m)?;
                Ok(path)
            })
            .collect()
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let load = |k: ManifestKind| read_manifest(&dir.join(format!("{}.csv", k.file_stem())));
        Ok(Self {
            all_xray: load(ManifestKind::AllXray)?,
            all_ct: load(ManifestKind::AllCt)?,
            paired: load(ManifestKind::PairedXrayTarget)?,
        })
    }
}

const RECORD_COLUMNS: [&str; 6] = [
    "patient_id",
    "image_id",
    "image_path",
    "modality",
    "label",
    "offset",
];
const PAIR_COLUMNS: [&str; 4] = ["ct_image_id", "ct_image_path", "ct_offset", "offset_gap"];

fn opt(v: Option<i64>) -> String {
    v.map(|d| d.to_string()).unwrap_or_default()
}

/// Renders a manifest: `# key=value` stats lines, then a header and one
/// record per line.
pub fn render_manifest(m: &Manifest) -> String {
    let mut out = format!("# kind={}\n", m.kind.file_stem());
    match cohort_stats(&m.records) {
        Ok(s) => {
            for (k, v) in [
                ("images", s.n_images),
                ("patients", s.n_patients),
                ("positive_images", s.n_positive_images),
                ("negative_images", s.n_negative_images),
                ("positive_patients", s.n_positive_patients),
                ("negative_patients", s.n_negative_patients),
            ] {
                out.push_str(&format!("# {k}={v}\n"));
            }
        }
        Err(_) => out.push_str("# images=0\n"),
    }
    let paired = m.kind == ManifestKind::PairedXrayTarget;
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<&str> = RECORD_COLUMNS.to_vec();
    if paired {
        header.extend(PAIR_COLUMNS);
    }
    w.write_record(&header).expect("in-memory write");
    for (i, r) in m.records.iter().enumerate() {
        let mut row = vec![
            r.patient_id.clone(),
            r.image_id.clone(),
            r.image_path.display().to_string(),
            r.modality.to_string(),
            r.label.as_str().to_string(),
            opt(r.offset),
        ];
        if paired {
            let p = &m.pairs[i];
            row.extend([
                p.ct.image_id.clone(),
                p.ct.image_path.display().to_string(),
                opt(p.ct.offset),
                p.offset_gap.to_string(),
            ]);
        }
        w.write_record(&row).expect("in-memory write");
    }
    out.push_str(
        &String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields"),
    );
    out
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    fs::write(path, render_manifest(m))
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let kind = text
        .lines()
        .find_map(|l| l.strip_prefix("# kind="))
        .ok_or_else(|| Error::InvalidInput(format!("{} has no kind line", path.display())))?;
    let kind = match kind.trim() {
        "all_xray" => ManifestKind::AllXray,
        "all_ct" => ManifestKind::AllCt,
        "paired_xray_target" => ManifestKind::PairedXrayTarget,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown manifest kind '{other}'"
            )))
        }
    };
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let parse_opt = |s: &str| -> Result<Option<i64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("bad offset '{s}'")))
        }
    };
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for row in reader.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let rec = ImageRecord {
            patient_id: f(0).to_string(),
            image_id: f(1).to_string(),
            image_path: PathBuf::from(f(2)),
            modality: f(3).parse()?,
            label: f(4).parse()?,
            offset: parse_opt(f(5))?,
        };
        if kind == ManifestKind::PairedXrayTarget {
            let ct = ImageRecord {
                patient_id: rec.patient_id.clone(),
                image_id: f(6).to_string(),
                image_path: PathBuf::from(f(7)),
                modality: Modality::Ct,
                label: rec.label,
                offset: parse_opt(f(8))?,
            };
            pairs.push(PairedSample {
                xray: rec.clone(),
                ct,
                offset_gap: f(9).parse()?,
            });
        }
        records.push(rec);
    }
    Ok(Manifest {
        kind,
        records,
        pairs,
    })
}
