//! CSV and JSON artifact readers and writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::Trajectory;

/// Read `dim0,...,dim{D-1}[,label]` rows.
pub fn read_samples_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Option<Vec<u32>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let has_label = headers.iter().next_back() == Some("label");
    let dim = headers.len() - usize::from(has_label);
    for (i, h) in headers.iter().take(dim).enumerate() {
        if h != format!("dim{i}") {
            return Err(Error::Config(format!(
                "{}: expected column 'dim{i}', found '{h}'",
                path.display()
            )));
        }
    }
    if dim == 0 {
        return Err(Error::Config(format!("{}: no data columns", path.display())));
    }
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            let v: f64 = rec[j].trim().parse().map_err(|_| {
                Error::Config(format!("{}: row {} column {j} is not a number", path.display(), row + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Config(format!("{}: row {} is not finite", path.display(), row + 1)));
            }
            Ok(v)
        };
        samples.push((0..dim).map(parse).collect::<Result<Vec<_>>>()?);
        if has_label {
            labels.push(rec[dim].trim().parse().map_err(|_| {
                Error::Config(format!("{}: row {} has a bad label", path.display(), row + 1))
            })?);
        }
    }
    Ok((samples, has_label.then_some(labels)))
}

pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>], labels: Option<&[u32]>) -> Result<()> {
    let dim = samples.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("dim{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut rec: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `tau,t,dim0,...` rows.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = traj.points.first().map_or(0, |p| p.x.len());
    let mut header = vec!["tau".to_string(), "t".to_string()];
    header.extend((0..dim).map(|i| format!("dim{i}")));
    w.write_record(&header)?;
    for p in &traj.points {
        let mut rec = vec![p.tau.to_string(), p.t.to_string()];
        rec.extend(p.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
