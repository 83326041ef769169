//! CSV contracts for recordings, annotations, manifests and taxonomies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::taxonomy::TopBin;
use super::{
    AnnotationEvent, BehaviorTaxonomy, DataError, DatasetManifest, Gap, ManifestEntry, Recording,
    SensorLocation, SAMPLE_RATE_HZ,
};

pub const RECORDING_HEADER: [&str; 6] = ["t_s", "acc_x", "acc_y", "acc_z", "eda_uS", "temp_C"];
pub const ANNOTATION_HEADER: [&str; 3] = ["behavior", "start_s", "end_s"];
pub const MANIFEST_HEADER: [&str; 5] = [
    "subject_id",
    "session_id",
    "sensor_location",
    "data_path",
    "annotation_path",
];
pub const TAXONOMY_HEADER: [&str; 3] = ["raw", "secondary", "top"];

fn open_reader(path: &Path) -> Result<csv::Reader<File>, DataError> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::FileNotFound(path.to_path_buf()),
        _ => DataError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(f))
}

fn csv_err(e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DataError::MalformedRow {
        line,
        reason: e.to_string(),
    }
}

fn check_header(rdr: &mut csv::Reader<File>, want: &[&str]) -> Result<(), DataError> {
    let h = rdr.headers().map_err(csv_err)?;
    let got: Vec<&str> = h.iter().collect();
    if got != want {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: format!(
                "expected header {:?}, found {:?}",
                want.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Parses a recording CSV for a manifest entry.
///
/// Rows with empty fields and skipped time steps are treated as missing
/// samples: each channel is filled by linear interpolation between its
/// neighbouring valid samples (held constant at the edges) and the run is
/// logged in [`Recording::gaps`]. Runs of one second or longer are filled
/// the same way so no NaN survives, but count toward session dropout.
pub fn load_recording(entry: &ManifestEntry) -> Result<Recording, DataError> {
    let path = &entry.data_path;
    let mut rdr = open_reader(path)?;
    check_header(&mut rdr, &RECORDING_HEADER)?;
    let rate = SAMPLE_RATE_HZ as f64;

    let mut rows: Vec<(usize, [Option<f64>; 5])> = Vec::new();
    let mut t0: Option<f64> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != RECORDING_HEADER.len() {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        let t: f64 = rec[0].parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("bad timestamp {:?}", &rec[0]),
        })?;
        let start = *t0.get_or_insert(t);
        let pos = (t - start) * rate;
        let idx = pos.round();
        if (pos - idx).abs() > 0.2 {
            return Err(DataError::SampleRateMismatch {
                expected: SAMPLE_RATE_HZ,
                found: format!("timestamp {t} off the 1/30 s grid (line {line})"),
            });
        }
        if idx < 0.0 || rows.last().is_some_and(|(prev, _)| idx as usize <= *prev) {
            return Err(DataError::MalformedRow {
                line,
                reason: "timestamps must increase monotonically".into(),
            });
        }
        let mut vals = [None; 5];
        for (c, v) in vals.iter_mut().enumerate() {
            let field = &rec[c + 1];
            if !field.is_empty() {
                let x: f64 = field.parse().map_err(|_| DataError::MalformedRow {
                    line,
                    reason: format!("bad value {field:?} in column {}", RECORDING_HEADER[c + 1]),
                })?;
                if !x.is_finite() {
                    return Err(DataError::MalformedRow {
                        line,
                        reason: "non-finite value".into(),
                    });
                }
                *v = Some(x);
            }
        }
        rows.push((idx as usize, vals));
    }
    let Some(&(last, _)) = rows.last() else {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: "no data rows".into(),
        });
    };
    if rows.len() >= 2 {
        let mut steps: Vec<usize> = rows.windows(2).map(|w| w[1].0 - w[0].0).collect();
        steps.sort_unstable();
        let median = steps[steps.len() / 2];
        if median != 1 {
            return Err(DataError::SampleRateMismatch {
                expected: SAMPLE_RATE_HZ,
                found: format!("{:.3} Hz", rate / median as f64),
            });
        }
    }

    let n = last + 1;
    let mut chans: Vec<Vec<Option<f64>>> = vec![vec![None; n]; 5];
    for (idx, vals) in &rows {
        for c in 0..5 {
            chans[c][*idx] = vals[c];
        }
    }
    let missing: Vec<bool> = (0..n)
        .map(|i| chans.iter().any(|c| c[i].is_none()))
        .collect();
    let mut filled = Vec::with_capacity(5);
    for (c, chan) in chans.iter().enumerate() {
        filled.push(interpolate(chan).ok_or_else(|| DataError::MalformedRow {
            line: 1,
            reason: format!("column {} has no values", RECORDING_HEADER[c + 1]),
        })?);
    }
    let gaps = runs(&missing);
    let temp = filled.pop().unwrap();
    let eda = filled.pop().unwrap();
    let z = filled.pop().unwrap();
    let y = filled.pop().unwrap();
    let x = filled.pop().unwrap();
    Recording::new(
        entry.subject_id.clone(),
        entry.session_id.clone(),
        entry.sensor_location,
        SAMPLE_RATE_HZ,
        [x, y, z],
        eda,
        temp,
        t0.unwrap_or(0.0),
        gaps,
    )
}

fn interpolate(x: &[Option<f64>]) -> Option<Vec<f64>> {
    let first = x.iter().position(Option::is_some)?;
    let mut out = vec![0.0; x.len()];
    let mut prev = first;
    let v0 = x[first].unwrap();
    out[..=first].iter_mut().for_each(|o| *o = v0);
    for i in first + 1..x.len() {
        if let Some(v) = x[i] {
            let pv = out[prev];
            let span = (i - prev) as f64;
            for (j, o) in out.iter_mut().enumerate().take(i).skip(prev + 1) {
                let a = (j - prev) as f64 / span;
                *o = pv + a * (v - pv);
            }
            out[i] = v;
            prev = i;
        }
    }
    let pv = out[prev];
    out[prev + 1..].iter_mut().for_each(|o| *o = pv);
    Some(out)
}

fn runs(mask: &[bool]) -> Vec<Gap> {
    let mut gaps = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let s = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            gaps.push(Gap {
                start_sample: s,
                len_samples: i - s,
            });
        } else {
            i += 1;
        }
    }
    gaps
}

/// Writes a recording in the CSV contract. Values use the shortest
/// representation that parses back to the same `f64`, so a reload is
/// bit-exact.
pub fn write_recording(rec: &Recording, path: &Path) -> Result<(), DataError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let rate = rec.sample_rate_hz as f64;
    let mut buf = String::with_capacity(64);
    writeln!(w, "{}", RECORDING_HEADER.join(",")).map_err(io_err(path))?;
    for i in 0..rec.len() {
        use std::fmt::Write as _;
        buf.clear();
        let _ = write!(
            buf,
            "{},{},{},{},{},{}",
            rec.start_epoch_s + i as f64 / rate,
            rec.accel[0][i],
            rec.accel[1][i],
            rec.accel[2][i],
            rec.eda[i],
            rec.temp[i]
        );
        w.write_all(buf.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationEvent>, DataError> {
    let mut rdr = open_reader(path)?;
    check_header(&mut rdr, &ANNOTATION_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| DataError::MalformedRow { line, reason };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let s: f64 = rec[1].parse().map_err(|_| bad("bad start_s".into()))?;
        let e: f64 = rec[2].parse().map_err(|_| bad("bad end_s".into()))?;
        let ev = AnnotationEvent::new(&rec[0], s, e)
            .ok_or_else(|| bad(format!("interval [{s}, {e}) is empty or non-finite")))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_annotations(events: &[AnnotationEvent], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let wrap = |e: csv::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(ANNOTATION_HEADER).map_err(wrap)?;
    for e in events {
        w.write_record([
            e.behavior_raw.clone(),
            e.start_s.to_string(),
            e.end_s.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads a manifest; relative data paths resolve against the manifest's
/// directory. The taxonomy defaults to `taxonomy.csv` next to it.
pub fn load_manifest(
    path: &Path,
    taxonomy_path: Option<&Path>,
) -> Result<DatasetManifest, DataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut rdr = open_reader(path)?;
    check_header(&mut rdr, &MANIFEST_HEADER)?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 5 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let loc = SensorLocation::parse(&rec[2]).ok_or_else(|| DataError::MalformedRow {
            line,
            reason: format!("unknown sensor location {:?}", &rec[2]),
        })?;
        entries.push(ManifestEntry {
            subject_id: rec[0].to_string(),
            session_id: rec[1].to_string(),
            sensor_location: loc,
            data_path: resolve(&rec[3]),
            annotation_path: resolve(&rec[4]),
        });
    }
    let m = DatasetManifest {
        entries,
        taxonomy_path: taxonomy_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| base.join("taxonomy.csv")),
    };
    m.validate()?;
    Ok(m)
}

/// Writes the manifest CSV; paths under `relative_to` are written relative.
pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rel = |p: &Path| -> String {
        p.strip_prefix(&base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let wrap = |e: csv::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for e in &m.entries {
        w.write_record([
            e.subject_id.clone(),
            e.session_id.clone(),
            e.sensor_location.as_str().to_string(),
            rel(&e.data_path),
            rel(&e.annotation_path),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_taxonomy(path: &Path) -> Result<BehaviorTaxonomy, DataError> {
    let mut rdr = open_reader(path)?;
    check_header(&mut rdr, &TAXONOMY_HEADER)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let top = TopBin::parse(&rec[2]).ok_or_else(|| DataError::MalformedRow {
            line,
            reason: format!("unknown top bin {:?}", &rec[2]),
        })?;
        rows.push((rec[0].to_string(), rec[1].to_string(), top));
    }
    BehaviorTaxonomy::from_rows(rows.iter().map(|(r, s, t)| (r.as_str(), s.as_str(), *t)))
}

pub fn write_taxonomy(t: &BehaviorTaxonomy, path: &Path) -> Result<(), DataError> {
    let wrap = |e: csv::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(TAXONOMY_HEADER).map_err(wrap)?;
    for (r, s, top) in t.rows() {
        w.write_record([r, s, top.as_str().to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}
