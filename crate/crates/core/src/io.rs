//! Dataset persistence: one CSV row per product-market plus a JSON truth
//! sidecar. Floats are written in shortest round-trip form, so re-import is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::dgp::{Dataset, DatasetTruth};
use crate::error::{HdBlpError, Result};
use crate::market::{check_panel, MarketData};
use crate::shares::ShareVector;

pub fn dataset_header(dim_z: usize, dim_x: usize) -> Vec<String> {
    let mut header = vec!["j".to_string(), "t".into(), "s".into(), "p".into()];
    header.extend((1..=dim_z).map(|i| format!("z{i}")));
    header.extend((1..=dim_x).map(|k| format!("x{k}")));
    header
}

/// Write observables as CSV with columns `j,t,s,p,z1..,x1..` (1-based indices).
pub fn write_dataset_csv(markets: &[MarketData], path: &Path) -> Result<()> {
    let (j, dx, dz) = check_panel(markets)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| HdBlpError::csv(path, e))?;
    w.write_record(dataset_header(dz, dx))
        .map_err(|e| HdBlpError::csv(path, e))?;
    let mut record = Vec::with_capacity(4 + dz + dx);
    for (t, m) in markets.iter().enumerate() {
        for jj in 0..j {
            record.clear();
            record.push((jj + 1).to_string());
            record.push((t + 1).to_string());
            record.push(m.shares.as_slice()[jj].to_string());
            record.push(m.p[jj].to_string());
            record.extend((0..dz).map(|i| m.z[(jj, i)].to_string()));
            record.extend((0..dx).map(|k| m.x[(jj, k)].to_string()));
            w.write_record(&record).map_err(|e| HdBlpError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| HdBlpError::io(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<MarketData>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HdBlpError::csv(path, e))?;
    let header = r.headers().map_err(|e| HdBlpError::csv(path, e))?.clone();
    let dz = header.iter().filter(|h| h.starts_with('z')).count();
    let dx = header.iter().filter(|h| h.starts_with('x')).count();
    if header.len() != 4 + dz + dx
        || header.iter().collect::<Vec<_>>() != dataset_header(dz, dx)
    {
        return Err(HdBlpError::InvalidArgument(format!(
            "{}: unexpected header, want j,t,s,p,z1..,x1..",
            path.display()
        )));
    }
    // t -> j -> (s, p, z, x)
    type Row = (f64, f64, Vec<f64>, Vec<f64>);
    let mut rows: BTreeMap<usize, BTreeMap<usize, Row>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| HdBlpError::csv(path, e))?;
        let bad = |what: &str| {
            HdBlpError::InvalidArgument(format!(
                "{}: row {}: cannot parse {what}",
                path.display(),
                line + 2
            ))
        };
        let idx = |k: usize, what: &str| -> Result<usize> {
            rec[k].trim().parse::<usize>().map_err(|_| bad(what))
        };
        let num = |k: usize| -> Result<f64> { rec[k].trim().parse::<f64>().map_err(|_| bad(&header[k])) };
        let jj = idx(0, "j")?;
        let t = idx(1, "t")?;
        let z = (0..dz).map(|i| num(4 + i)).collect::<Result<Vec<_>>>()?;
        let x = (0..dx).map(|k| num(4 + dz + k)).collect::<Result<Vec<_>>>()?;
        if rows.entry(t).or_default().insert(jj, (num(2)?, num(3)?, z, x)).is_some() {
            return Err(HdBlpError::InvalidArgument(format!(
                "{}: duplicate row for j={jj}, t={t}",
                path.display()
            )));
        }
    }
    let mut markets = Vec::with_capacity(rows.len());
    for (expected_t, (t, products)) in rows.into_iter().enumerate() {
        if t != expected_t + 1 {
            return Err(HdBlpError::InvalidArgument(format!(
                "{}: markets must be numbered 1..T without gaps (missing t={})",
                path.display(),
                expected_t + 1
            )));
        }
        let j = products.len();
        let mut x = DMatrix::zeros(j, dx);
        let mut z = DMatrix::zeros(j, dz);
        let mut p = Vec::with_capacity(j);
        let mut s = Vec::with_capacity(j);
        for (row, (jj, (share, price, zr, xr))) in products.into_iter().enumerate() {
            if jj != row + 1 {
                return Err(HdBlpError::InvalidArgument(format!(
                    "{}: products in market {t} must be numbered 1..J",
                    path.display()
                )));
            }
            s.push(share);
            p.push(price);
            for (i, v) in zr.into_iter().enumerate() {
                z[(row, i)] = v;
            }
            for (k, v) in xr.into_iter().enumerate() {
                x[(row, k)] = v;
            }
        }
        markets.push(MarketData::new(x, p, z, ShareVector::new(s)?)?);
    }
    check_panel(&markets)?;
    Ok(markets)
}

pub fn write_truth_json(truth: &DatasetTruth, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| HdBlpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, truth)?;
    w.write_all(b"\n").map_err(|e| HdBlpError::io(path, e))?;
    w.flush().map_err(|e| HdBlpError::io(path, e))
}

pub fn read_truth_json(path: &Path) -> Result<DatasetTruth> {
    let file = File::open(path).map_err(|e| HdBlpError::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Write `<stem>.csv` and, when present, `<stem>.truth.json` into `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HdBlpError::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    write_dataset_csv(&data.markets, &csv_path)?;
    let mut written = vec![csv_path];
    if let Some(truth) = &data.truth {
        let json_path = dir.join(format!("{stem}.truth.json"));
        write_truth_json(truth, &json_path)?;
        written.push(json_path);
    }
    Ok(written)
}

/// Load a CSV dataset, attaching the sidecar when a path is given.
pub fn read_dataset(csv_path: &Path, truth_path: Option<&Path>) -> Result<Dataset> {
    let markets = read_dataset_csv(csv_path)?;
    let truth = truth_path.map(read_truth_json).transpose()?;
    if let Some(t) = &truth {
        if t.shocks.len() != markets.len() {
            return Err(HdBlpError::dim("truth sidecar markets", markets.len(), t.shocks.len()));
        }
    }
    Ok(Dataset { markets, truth })
}
