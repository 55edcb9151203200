//! On-disk formats for node signals.
//!
//! Per-gauge CSV `gauge_<id>.csv`: header
//! `timestamp,discharge_m3s,precip_mm,topsoil_moisture,air_temp_c,surface_pressure_hpa`,
//! ISO-8601 hourly timestamps, '.' decimal separator, empty field = missing.
//!
//! Binary signal cache (all integers little-endian):
//!   magic "RFSC" | version u8 | n u32 | hours u32 | channels u32 |
//!   start unix seconds i64 | gauge ids u64 * n |
//!   mu f64 * (n*channels) | sigma f64 * (n*channels) |
//!   values f64, row-major (gauge, time, channel)

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use ndarray::{Array2, Array3};

use crate::data::{NodeSignal, NormalizationParams, CHANNELS, CHANNEL_COLUMNS};
use crate::error::{Error, Result};
use crate::graph::GaugeId;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const CACHE_MAGIC: &[u8; 4] = b"RFSC";
const CACHE_VERSION: u8 = 1;

pub fn gauge_file_name(id: GaugeId) -> String {
    format!("gauge_{id}.csv")
}

/// Writes one CSV per gauge into `dir`. NaN markers become empty fields.
pub fn save_gauge_csvs(signal: &NodeSignal, dir: &Path) -> Result<()> {
    for (gi, &gauge) in signal.gauges.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(gauge_file_name(gauge)))?;
        let mut header = vec!["timestamp"];
        header.extend(CHANNEL_COLUMNS);
        w.write_record(&header)?;
        for t in 0..signal.hours() {
            let mut record = vec![signal.timestamp(t).format(TIMESTAMP_FORMAT).to_string()];
            for c in 0..CHANNELS {
                let v = signal.values[[gi, t, c]];
                record.push(if v.is_nan() { String::new() } else { format!("{v}") });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads the per-gauge CSVs for `gauges` from `dir`. All files must cover the
/// identical hourly time axis; a missing file or a diverging axis is a data
/// error naming the gauge.
pub fn load_gauge_csvs(dir: &Path, gauges: &BTreeSet<GaugeId>) -> Result<NodeSignal> {
    if gauges.is_empty() {
        return Err(Error::data("no gauges requested"));
    }
    let mut start: Option<NaiveDateTime> = None;
    let mut hours: Option<usize> = None;
    let gauge_list: Vec<GaugeId> = gauges.iter().copied().collect();
    let mut values: Option<Array3<f64>> = None;

    for (gi, &gauge) in gauge_list.iter().enumerate() {
        let path = dir.join(gauge_file_name(gauge));
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        {
            let headers = reader.headers()?;
            let mut expected = vec!["timestamp"];
            expected.extend(CHANNEL_COLUMNS);
            let got: Vec<&str> = headers.iter().collect();
            if got != expected {
                return Err(Error::data(format!(
                    "gauge {gauge}: unexpected header {got:?}"
                )));
            }
        }

        let mut rows: Vec<(NaiveDateTime, [f64; CHANNELS])> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let ts = NaiveDateTime::parse_from_str(
                record.get(0).unwrap_or_default(),
                TIMESTAMP_FORMAT,
            )
            .map_err(|e| Error::data(format!("gauge {gauge}: bad timestamp: {e}")))?;
            let mut row = [f64::NAN; CHANNELS];
            for (c, slot) in row.iter_mut().enumerate() {
                let field = record.get(c + 1).unwrap_or_default();
                if !field.is_empty() {
                    *slot = field.parse().map_err(|e| {
                        Error::data(format!(
                            "gauge {gauge}: bad {} value {field:?}: {e}",
                            CHANNEL_COLUMNS[c]
                        ))
                    })?;
                }
            }
            rows.push((ts, row));
        }
        if rows.len() < 2 {
            return Err(Error::data(format!("gauge {gauge}: series too short")));
        }
        for win in rows.windows(2) {
            if win[1].0 - win[0].0 != TimeDelta::hours(1) {
                return Err(Error::data(format!(
                    "gauge {gauge}: timestamps are not strictly hourly at {}",
                    win[1].0
                )));
            }
        }

        match (start, hours) {
            (None, None) => {
                start = Some(rows[0].0);
                hours = Some(rows.len());
                values = Some(Array3::zeros((gauge_list.len(), rows.len(), CHANNELS)));
            }
            (Some(s), Some(h)) => {
                if rows[0].0 != s || rows.len() != h {
                    return Err(Error::data(format!(
                        "gauge {gauge}: time axis differs from the other gauges"
                    )));
                }
            }
            _ => unreachable!(),
        }
        let values = values.as_mut().expect("initialized with the first gauge");
        for (t, (_, row)) in rows.iter().enumerate() {
            for c in 0..CHANNELS {
                values[[gi, t, c]] = row[c];
            }
        }
    }

    Ok(NodeSignal {
        gauges: gauge_list,
        start: start.expect("at least one gauge"),
        values: values.expect("at least one gauge"),
    })
}

/// Writes the normalized signal plus its normalization parameters.
pub fn save_cache(path: &Path, signal: &NodeSignal, params: &NormalizationParams) -> Result<()> {
    let (n, hours, channels) = signal.values.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&[CACHE_VERSION])?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(hours as u32).to_le_bytes())?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    w.write_all(&signal.start.and_utc().timestamp().to_le_bytes())?;
    for g in &signal.gauges {
        w.write_all(&g.0.to_le_bytes())?;
    }
    for &x in params.mu.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    for &x in params.sigma.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    for &x in signal.values.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(NodeSignal, NormalizationParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::data(format!(
            "{} is not a signal cache (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CACHE_VERSION {
        return Err(Error::data(format!(
            "unsupported signal cache version {}",
            version[0]
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let hours = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let channels = u32::from_le_bytes(u32buf) as usize;
    let mut i64buf = [0u8; 8];
    r.read_exact(&mut i64buf)?;
    let start = DateTime::from_timestamp(i64::from_le_bytes(i64buf), 0)
        .ok_or_else(|| Error::data("bad start timestamp in cache"))?
        .naive_utc();

    let mut gauges = Vec::with_capacity(n);
    let mut u64buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut u64buf)?;
        gauges.push(GaugeId(u64::from_le_bytes(u64buf)));
    }

    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let mu = Array2::from_shape_vec((n, channels), read_f64s(n * channels)?)
        .map_err(|e| Error::data(format!("bad cache layout: {e}")))?;
    let sigma = Array2::from_shape_vec((n, channels), read_f64s(n * channels)?)
        .map_err(|e| Error::data(format!("bad cache layout: {e}")))?;
    let values = Array3::from_shape_vec((n, hours, channels), read_f64s(n * hours * channels)?)
        .map_err(|e| Error::data(format!("bad cache layout: {e}")))?;

    Ok((
        NodeSignal { gauges, start, values },
        NormalizationParams { mu, sigma },
    ))
}
