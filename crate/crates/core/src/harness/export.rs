//! Alignment matrices of a trained model for one instance, written as CSV.
//!
//! For every layer `n` and variate `k` the directory receives
//! `layer{n}_variate{k}.csv`, the `L_n x L_{n-1}` transform without a header,
//! and `layer{n}_variate{k}_times.csv` with the input and output anchor times.
//! Layers are numbered from 1; layer 1 maps the raw grid onto itself.

use std::fs;
use std::path::{Path, PathBuf};

use super::train::{csv_err, LoadedRun};
use crate::dataio::{Batch, Instance};
use crate::error::Result;
use crate::nn::ForwardCtx;
use crate::tensor::Tape;

/// One exported `(layer, variate)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentFile {
    pub layer: usize,
    pub variate: usize,
    pub rows: usize,
    pub cols: usize,
    pub matrix: PathBuf,
    pub times: PathBuf,
}

/// Runs the model on `instance` (raw values; the run's normalization is
/// applied here) and writes every transform into `out`.
pub fn export_alignment(run: &LoadedRun, instance: &Instance, out: &Path) -> Result<Vec<AlignmentFile>> {
    fs::create_dir_all(out)?;
    let mut grid = instance.grid.clone();
    run.norm.apply(&mut grid);
    let batch = Batch::new(&[&grid], None)?;
    let k = batch.num_variates;
    let mut tape = Tape::new();
    let fwd = run.model.forward(&mut tape, &run.store, &batch, &mut ForwardCtx::eval())?;

    let mut files = Vec::new();
    let raw_times = &batch.times;
    for (n, layer) in fwd.layers.iter().enumerate() {
        let a = layer.transform.to_tensor(&tape, 1, k);
        let (rows, cols) = (a.shape()[2], a.shape()[3]);
        let t_out = tape.value(layer.t).data();
        let m_out = tape.value(layer.m).data();
        let t_in: Vec<f64> = match n {
            0 => raw_times.repeat(k),
            _ => tape.value(fwd.layers[n - 1].t).data().to_vec(),
        };
        for v in 0..k {
            let stem = format!("layer{}_variate{v}", n + 1);
            let matrix = out.join(format!("{stem}.csv"));
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&matrix).map_err(csv_err)?;
            for r in 0..rows {
                let start = (v * rows + r) * cols;
                w.write_record(a.data()[start..start + cols].iter().map(|x| format!("{x:?}")))
                    .map_err(csv_err)?;
            }
            w.flush()?;

            let times = out.join(format!("{stem}_times.csv"));
            let mut w = csv::Writer::from_path(&times).map_err(csv_err)?;
            w.write_record(["side", "index", "time", "mask"]).map_err(csv_err)?;
            for i in 0..cols {
                let time = t_in[v * cols + i];
                let mask = match n {
                    0 => batch.mask[v * cols + i],
                    _ => tape.value(fwd.layers[n - 1].m).data()[v * cols + i],
                };
                w.write_record(["input".to_string(), i.to_string(), format!("{time:?}"), format!("{mask:?}")])
                    .map_err(csv_err)?;
            }
            for j in 0..rows {
                w.write_record([
                    "output".to_string(),
                    j.to_string(),
                    format!("{:?}", t_out[v * rows + j]),
                    format!("{:?}", m_out[v * rows + j]),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
            files.push(AlignmentFile {
                layer: n + 1,
                variate: v,
                rows,
                cols,
                matrix,
                times,
            });
        }
    }
    Ok(files)
}

/// Reads an exported matrix back as rows.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|x| {
                x.parse::<f64>().map_err(|e| crate::Error::Parse {
                    path: path.to_path_buf(),
                    line: rows.len() + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
