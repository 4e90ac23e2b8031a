//! On-disk formats: ECG1 record files, label CSVs and dataset directories.
//!
//! ECG1 layout: magic `ECG1`, u32 LE header length, UTF-8 JSON header
//! `{"id","sample_rate_hz","leads","n_samples"}`, then `12 * n_samples`
//! little-endian f32 samples, lead-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::record::{Dataset, EcgRecord, Label, LabelVector, LabeledRecord, RecordError, Split, LEAD_NAMES, NUM_LEADS};

pub const RECORD_MAGIC: &[u8; 4] = b"ECG1";
pub const RECORD_EXTENSION: &str = "ecg1";
pub const LABELS_FILE: &str = "labels.csv";
pub const LABEL_HEADER: [&str; 9] = ["record_id", "AF", "FDAVB", "CRBBB", "LAFB", "PVC", "PAC", "ER", "TWC"];

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("non-binary cell {value:?} in row {row}")]
    NonBinary { row: usize, value: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("labels missing for record {0:?}")]
    MissingLabels(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    id: String,
    sample_rate_hz: u32,
    leads: Vec<String>,
    n_samples: usize,
}

/// Serializes a record into ECG1 bytes.
pub fn encode_record(record: &EcgRecord) -> Vec<u8> {
    let header = RecordHeader {
        id: record.id().to_string(),
        sample_rate_hz: record.sample_rate_hz(),
        leads: LEAD_NAMES.iter().map(|s| s.to_string()).collect(),
        n_samples: record.n_samples(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + record.signal().len() * 4);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in record.signal() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses ECG1 bytes.
pub fn decode_record(bytes: &[u8]) -> Result<EcgRecord, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::HeaderMismatch(format!("file of {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != RECORD_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::HeaderMismatch("header length exceeds file".into()))?;
    let header: RecordHeader =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    if header.leads.len() != NUM_LEADS || header.leads.iter().zip(LEAD_NAMES).any(|(a, b)| a != b) {
        return Err(FormatError::BadHeader(format!("unexpected lead list {:?}", header.leads)));
    }
    let payload = &bytes[header_end..];
    let expected = header.n_samples * NUM_LEADS * 4;
    if payload.len() != expected {
        return Err(FormatError::HeaderMismatch(format!(
            "header declares {} samples per lead ({expected} bytes) but payload has {} bytes",
            header.n_samples,
            payload.len()
        )));
    }
    let mut signal = Vec::with_capacity(header.n_samples * NUM_LEADS);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        signal.push(v);
    }
    Ok(EcgRecord::new(header.id, header.sample_rate_hz, signal)?)
}

pub fn save_record(record: &EcgRecord, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, encode_record(record)).map_err(io_err(path))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<EcgRecord, FormatError> {
    let path = path.as_ref();
    decode_record(&fs::read(path).map_err(io_err(path))?)
}

/// Parses a label CSV. Rows with no abnormality set become Normal.
pub fn parse_labels<R: io::Read>(reader: R) -> Result<BTreeMap<String, LabelVector>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if let Some(bad) = headers.iter().find(|h| !LABEL_HEADER.contains(h)) {
        return Err(FormatError::UnknownColumn(bad.to_string()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FormatError::HeaderMismatch(format!("missing column {name}")))
    };
    let id_col = column("record_id")?;
    let label_cols: Vec<(Label, usize)> =
        Label::ABNORMALITIES.iter().map(|&l| column(l.name()).map(|c| (l, c))).collect::<Result<_, _>>()?;

    let mut out = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let mut set = Vec::new();
        for &(label, col) in &label_cols {
            match rec.get(col).unwrap_or_default() {
                "0" => {}
                "1" => set.push(label),
                other => return Err(FormatError::NonBinary { row: row + 1, value: other.to_string() }),
            }
        }
        if out.insert(id.clone(), LabelVector::from_abnormalities(set)).is_some() {
            return Err(FormatError::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, LabelVector>, FormatError> {
    let path = path.as_ref();
    parse_labels(fs::File::open(path).map_err(io_err(path))?)
}

/// Writes label rows in the given order.
pub fn write_labels<'a, W, I>(writer: W, rows: I) -> Result<(), FormatError>
where
    W: io::Write,
    I: IntoIterator<Item = (&'a str, &'a LabelVector)>,
{
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(LABEL_HEADER)?;
    for (id, labels) in rows {
        let mut row = vec![id.to_string()];
        row.extend(Label::ABNORMALITIES.iter().map(|&l| if labels.get(l) { "1" } else { "0" }.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| FormatError::Io { path: PathBuf::from("<labels>"), source: e })?;
    Ok(())
}

/// Writes every record as `<dir>/<id>.ecg1` plus `<dir>/labels.csv`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in dataset.records() {
        save_record(&r.record, dir.join(format!("{}.{RECORD_EXTENSION}", r.record.id())))?;
    }
    let path = dir.join(LABELS_FILE);
    let mut buf = Vec::new();
    write_labels(&mut buf, dataset.records().iter().map(|r| (r.record.id(), &r.labels)))?;
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&buf).map_err(io_err(&path))
}

/// Loads a dataset directory written by [`save_dataset`]. Records are
/// returned in label-file id order.
pub fn load_dataset(dir: impl AsRef<Path>, split: Split) -> Result<Dataset, FormatError> {
    let dir = dir.as_ref();
    let labels = load_labels(dir.join(LABELS_FILE))?;
    let mut records = Vec::with_capacity(labels.len());
    for (id, lv) in labels {
        let path = dir.join(format!("{id}.{RECORD_EXTENSION}"));
        if !path.exists() {
            return Err(FormatError::MissingLabels(id));
        }
        let record = load_record(&path)?;
        if record.id() != id {
            return Err(FormatError::HeaderMismatch(format!("file {} holds record {:?}", path.display(), record.id())));
        }
        records.push(LabeledRecord { record, labels: lv });
    }
    Ok(Dataset::new(split, records)?)
}

/// Lists `*.ecg1` files in a directory, sorted by name.
pub fn list_records(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, FormatError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == RECORD_EXTENSION))
        .collect();
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_record(n: usize) -> EcgRecord {
        EcgRecord::new("zeros", 500, vec![0.0; 12 * n]).unwrap()
    }

    #[test]
    fn file_size_follows_layout() {
        let bytes = encode_record(&zero_record(4500));
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 4 + 4 + header_len + 12 * 4500 * 4);
        assert_eq!(&bytes[..4], b"ECG1");
    }

    #[test]
    fn encoding_is_deterministic() {
        let r = zero_record(10);
        assert_eq!(encode_record(&r), encode_record(&r));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_record(&zero_record(8));
        bytes[..4].copy_from_slice(b"XYZ1");
        assert!(matches!(decode_record(&bytes), Err(FormatError::BadMagic(m)) if &m == b"XYZ1"));
    }

    #[test]
    fn truncated_or_padded_payload() {
        let full = encode_record(&zero_record(4500));
        let short = encode_record(&zero_record(4000));
        // Splice a 4500-sample header onto a 4000-sample payload.
        let hl = u32::from_le_bytes(full[4..8].try_into().unwrap()) as usize;
        let shl = u32::from_le_bytes(short[4..8].try_into().unwrap()) as usize;
        let mut spliced = full[..8 + hl].to_vec();
        spliced.extend_from_slice(&short[8 + shl..]);
        assert!(matches!(decode_record(&spliced), Err(FormatError::HeaderMismatch(_))));

        let mut trailing = full.clone();
        trailing.push(0);
        assert!(matches!(decode_record(&trailing), Err(FormatError::HeaderMismatch(_))));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = encode_record(&zero_record(4));
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_record(&bytes), Err(FormatError::NonFinite(47))));
    }

    #[test]
    fn labels_normal_and_multi() {
        let csv = "record_id,AF,FDAVB,CRBBB,LAFB,PVC,PAC,ER,TWC\n\
                   r1,0,0,0,0,0,0,0,0\n\
                   r2,1,0,0,0,0,1,0,0\n";
        let m = parse_labels(csv.as_bytes()).unwrap();
        assert!(m["r1"].is_normal());
        let r2 = m["r2"];
        assert!(r2.get(Label::Af) && r2.get(Label::Pac) && !r2.is_normal());
        assert_eq!(r2.active().count(), 2);
    }

    #[test]
    fn label_errors() {
        let dup = "record_id,AF,FDAVB,CRBBB,LAFB,PVC,PAC,ER,TWC\nr1,0,0,0,0,0,0,0,0\nr1,1,0,0,0,0,0,0,0\n";
        assert!(matches!(parse_labels(dup.as_bytes()), Err(FormatError::DuplicateId(id)) if id == "r1"));
        let unknown = "record_id,AF,FDAVB,CRBBB,LAFB,PVC,PAC,ER,TWC,XX\nr1,0,0,0,0,0,0,0,0,0\n";
        assert!(matches!(parse_labels(unknown.as_bytes()), Err(FormatError::UnknownColumn(c)) if c == "XX"));
        let nonbin = "record_id,AF,FDAVB,CRBBB,LAFB,PVC,PAC,ER,TWC\nr1,2,0,0,0,0,0,0,0\n";
        assert!(matches!(parse_labels(nonbin.as_bytes()), Err(FormatError::NonBinary { .. })));
    }

    #[test]
    fn labels_write_parse() {
        let a = LabelVector::from_abnormalities([Label::Twc, Label::Er]);
        let n = LabelVector::normal();
        let mut buf = Vec::new();
        write_labels(&mut buf, [("a", &a), ("n", &n)]).unwrap();
        let m = parse_labels(buf.as_slice()).unwrap();
        assert_eq!(m["a"], a);
        assert_eq!(m["n"], n);
    }

    proptest! {
        #[test]
        fn save_load_is_bitwise_identity(
            n in 1usize..64,
            seed in any::<u64>(),
            rate in 1u32..2000,
        ) {
            let mut x = seed;
            let signal: Vec<f32> = (0..12 * n)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = f32::from_bits((x >> 32) as u32);
                    if v.is_finite() { v } else { 0.5 }
                })
                .collect();
            let rec = EcgRecord::new(format!("p{seed}"), rate, signal).unwrap();
            let back = decode_record(&encode_record(&rec)).unwrap();
            prop_assert_eq!(back.id(), rec.id());
            prop_assert_eq!(back.sample_rate_hz(), rec.sample_rate_hz());
            let same = back.signal().iter().zip(rec.signal()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
