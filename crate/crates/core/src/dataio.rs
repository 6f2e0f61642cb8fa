//! Event-tuple datasets and the union-timestamp grid representation.
//!
//! # Dataset files
//!
//! A dataset directory holds `meta.toml` plus `train.txt`, `val.txt` and
//! `test.txt`. `meta.toml` declares the variate count, class count and task
//! kind:
//!
//! ```toml
//! num_variates = 3
//! num_classes = 2
//! task = "sequence"   # or "per_step", "multi_label"
//! ```
//!
//! Each split file is UTF-8, one instance per line, three tab-separated
//! fields:
//!
//! ```text
//! <id> TAB <labels> TAB <observations>
//! ```
//!
//! * `labels` is a comma-separated list of non-negative integers: one class
//!   index for `sequence`, one class index per union timestamp for
//!   `per_step`, and one 0/1 flag per class for `multi_label`.
//! * `observations` is a space-separated list of `variate:time:value`
//!   triples with `variate` in `0..num_variates` (may be empty).
//!
//! Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw irregular observations: per variate, `(time, value)` pairs in strictly
/// increasing time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventSeries {
    pub variates: Vec<Vec<(f64, f64)>>,
}

impl EventSeries {
    pub fn new(num_variates: usize) -> Self {
        Self {
            variates: vec![Vec::new(); num_variates],
        }
    }

    pub fn num_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn observation_count(&self) -> usize {
        self.variates.iter().map(Vec::len).sum()
    }
}

/// Union time axis with `K x L` value, type and mask tables.
///
/// `types[k, j]` is `k + 1` where variate `k` is observed at `times[j]` and 0
/// otherwise, so row 0 of a type table can serve as the "no observation"
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub types: Vec<usize>,
    pub mask: Vec<f64>,
    num_variates: usize,
}

impl Grid {
    pub fn num_variates(&self) -> usize {
        self.num_variates
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed(&self, k: usize, j: usize) -> bool {
        self.mask[k * self.len() + j] != 0.0
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.len() + j]
    }

    pub fn observation_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Reads the observations back out of the grid.
    pub fn events(&self) -> EventSeries {
        let l = self.len();
        let variates = (0..self.num_variates)
            .map(|k| {
                (0..l)
                    .filter(|&j| self.observed(k, j))
                    .map(|j| (self.times[j], self.values[k * l + j]))
                    .collect()
            })
            .collect();
        EventSeries { variates }
    }
}

/// Builds the union-timestamp grid. Timestamps are merged by exact equality.
pub fn build_grid(events: &EventSeries) -> Result<Grid> {
    let k = events.num_variates();
    let mut times: Vec<f64> = Vec::with_capacity(events.observation_count());
    for (variate, obs) in events.variates.iter().enumerate() {
        for (position, pair) in obs.windows(2).enumerate() {
            if !(pair[1].0 > pair[0].0) {
                return Err(Error::DuplicateTime {
                    variate,
                    position: position + 1,
                    time: pair[1].0,
                });
            }
        }
        if let Some(&(t, _)) = obs.iter().find(|(t, _)| !t.is_finite()) {
            return Err(Error::DuplicateTime {
                variate,
                position: 0,
                time: t,
            });
        }
        times.extend(obs.iter().map(|&(t, _)| t));
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let l = times.len();
    let mut values = vec![0.0; k * l];
    let mut types = vec![0; k * l];
    let mut mask = vec![0.0; k * l];
    for (variate, obs) in events.variates.iter().enumerate() {
        // both sequences are sorted, so a single forward walk suffices
        let mut j = 0;
        for &(t, x) in obs {
            while times[j] != t {
                j += 1;
            }
            values[variate * l + j] = x;
            types[variate * l + j] = variate + 1;
            mask[variate * l + j] = 1.0;
        }
    }
    Ok(Grid {
        times,
        values,
        types,
        mask,
        num_variates: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Sequence,
    PerStep,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Steps(Vec<usize>),
    Multi(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub grid: Grid,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_variates: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub task: TaskKind,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

pub fn parse_line(line: &str, meta: &DatasetMeta) -> std::result::Result<Instance, String> {
    let mut fields = line.splitn(3, '\t');
    let id = fields.next().unwrap_or_default().trim();
    if id.is_empty() {
        return Err("missing instance id".into());
    }
    let labels_field = fields.next().ok_or("missing label field")?;
    let obs_field = fields.next().ok_or("missing observation field")?;

    let mut events = EventSeries::new(meta.num_variates);
    for token in obs_field.split_whitespace() {
        let mut parts = token.split(':');
        let (Some(v), Some(t), Some(x), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("malformed observation `{token}`"));
        };
        let variate: usize = v.parse().map_err(|_| format!("bad variate id `{v}`"))?;
        if variate >= meta.num_variates {
            return Err(format!(
                "unknown variate id {variate} (dataset has {})",
                meta.num_variates
            ));
        }
        let time: f64 = t.parse().map_err(|_| format!("bad time `{t}`"))?;
        let value: f64 = x.parse().map_err(|_| format!("bad value `{x}`"))?;
        events.variates[variate].push((time, value));
    }
    for obs in &mut events.variates {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let grid = build_grid(&events).map_err(|e| e.to_string())?;

    let labels: Vec<usize> = labels_field
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad label `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    let c = meta.num_classes;
    let label = match meta.task {
        TaskKind::Sequence => match labels.as_slice() {
            [y] if *y < c => Label::Class(*y),
            [y] => return Err(format!("label {y} out of range for {c} classes")),
            _ => return Err(format!("expected one label, found {}", labels.len())),
        },
        TaskKind::PerStep => {
            if labels.len() != grid.len() {
                return Err(format!(
                    "expected {} step labels, found {}",
                    grid.len(),
                    labels.len()
                ));
            }
            if let Some(y) = labels.iter().find(|&&y| y >= c) {
                return Err(format!("label {y} out of range for {c} classes"));
            }
            Label::Steps(labels)
        }
        TaskKind::MultiLabel => {
            if labels.len() != c || labels.iter().any(|&y| y > 1) {
                return Err(format!("expected {c} 0/1 flags"));
            }
            Label::Multi(labels.iter().map(|&y| y == 1).collect())
        }
    };
    Ok(Instance {
        id: id.to_string(),
        grid,
        label,
    })
}

pub fn load_dataset(path: &Path, meta: &DatasetMeta) -> Result<Vec<Instance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let inst = parse_line(&line, meta).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn format_line(inst: &Instance) -> String {
    let labels = match &inst.label {
        Label::Class(y) => y.to_string(),
        Label::Steps(ys) => join(ys.iter()),
        Label::Multi(flags) => join(flags.iter().map(|&f| f as usize)),
    };
    let mut obs = String::new();
    for (k, series) in inst.grid.events().variates.iter().enumerate() {
        for (t, x) in series {
            if !obs.is_empty() {
                obs.push(' ');
            }
            let _ = write!(obs, "{k}:{t:?}:{x:?}");
        }
    }
    format!("{}\t{labels}\t{obs}", inst.id)
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&format_line(inst));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// The three splits of a dataset directory.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl DataDir {
    pub fn load(root: &Path) -> Result<Self> {
        let meta = DatasetMeta::load(&root.join("meta.toml"))?;
        let split = |name: &str| -> Result<Vec<Instance>> {
            let p = root.join(name);
            if p.exists() {
                load_dataset(&p, &meta)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: split("train.txt")?,
            val: split("val.txt")?,
            test: split("test.txt")?,
            meta,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        self.meta.save(&root.join("meta.toml"))?;
        write_dataset(&root.join("train.txt"), &self.train)?;
        write_dataset(&root.join("val.txt"), &self.val)?;
        write_dataset(&root.join("test.txt"), &self.test)?;
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&Instance> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .find(|inst| inst.id == id)
    }
}

/// Per-variate z-score statistics fitted on observed training entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(grids: &[&Grid], num_variates: usize) -> Self {
        let mut sum = vec![0.0; num_variates];
        let mut count = vec![0usize; num_variates];
        for g in grids {
            for k in 0..num_variates {
                for j in 0..g.len() {
                    if g.observed(k, j) {
                        sum[k] += g.value(k, j);
                        count[k] += 1;
                    }
                }
            }
        }
        let mean: Vec<f64> = (0..num_variates)
            .map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; num_variates];
        for g in grids {
            for k in 0..num_variates {
                for j in 0..g.len() {
                    if g.observed(k, j) {
                        let d = g.value(k, j) - mean[k];
                        sq[k] += d * d;
                    }
                }
            }
        }
        let std = (0..num_variates)
            .map(|k| {
                if count[k] == 0 {
                    return 1.0;
                }
                let s = (sq[k] / count[k] as f64).sqrt();
                if s < 1e-8 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, grid: &mut Grid) {
        let l = grid.len();
        for k in 0..grid.num_variates {
            for j in 0..l {
                let i = k * l + j;
                if grid.mask[i] != 0.0 {
                    grid.values[i] = (grid.values[i] - self.mean[k]) / self.std[k];
                }
            }
        }
    }

    pub fn apply_all(&self, instances: &mut [Instance]) {
        for inst in instances {
            self.apply(&mut inst.grid);
        }
    }

    /// CSV with header `variate,mean,std`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("variate,mean,std\n");
        for k in 0..self.mean.len() {
            let _ = writeln!(text, "{k},{:?},{:?}", self.mean[k], self.std[k]);
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(parse_err(format!("expected 3 columns, found {}", cols.len())));
            }
            let m: f64 = cols[1].parse().map_err(|_| parse_err("bad mean".into()))?;
            let s: f64 = cols[2].parse().map_err(|_| parse_err("bad std".into()))?;
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std })
    }
}

/// Median instance length (union timestamps) over a split.
pub fn median_length(instances: &[Instance]) -> f64 {
    let mut lens: Vec<usize> = instances.iter().map(|i| i.grid.len()).collect();
    if lens.is_empty() {
        return 0.0;
    }
    lens.sort_unstable();
    let n = lens.len();
    if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    }
}

/// Padded stacks of several grids.
///
/// `values`, `types` and `mask` are `[B, K, L]`; `times` is `[B, L]`.
/// Padding columns carry mask 0 and repeat the instance's last real time.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub num_variates: usize,
    pub len: usize,
    pub values: Vec<f64>,
    pub types: Vec<usize>,
    pub mask: Vec<f64>,
    pub times: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(grids: &[&Grid], pad_to: Option<usize>) -> Result<Self> {
        let k = grids.first().map_or(0, |g| g.num_variates());
        if grids.iter().any(|g| g.num_variates() != k) {
            return Err(Error::Config("batch mixes variate counts".into()));
        }
        let max_len = grids.iter().map(|g| g.len()).max().unwrap_or(0);
        let l = pad_to.unwrap_or(max_len);
        if l < max_len {
            return Err(Error::Config(format!(
                "pad_to {l} is shorter than the longest instance ({max_len})"
            )));
        }
        let b = grids.len();
        let mut batch = Batch {
            size: b,
            num_variates: k,
            len: l,
            values: vec![0.0; b * k * l],
            types: vec![0; b * k * l],
            mask: vec![0.0; b * k * l],
            times: vec![0.0; b * l],
            lengths: grids.iter().map(|g| g.len()).collect(),
        };
        for (bi, g) in grids.iter().enumerate() {
            let n = g.len();
            let last = g.times.last().copied().unwrap_or(0.0);
            for j in 0..l {
                batch.times[bi * l + j] = if j < n { g.times[j] } else { last };
            }
            for kk in 0..k {
                let dst = (bi * k + kk) * l;
                batch.values[dst..dst + n].copy_from_slice(&g.values[kk * n..(kk + 1) * n]);
                batch.types[dst..dst + n].copy_from_slice(&g.types[kk * n..(kk + 1) * n]);
                batch.mask[dst..dst + n].copy_from_slice(&g.mask[kk * n..(kk + 1) * n]);
            }
        }
        Ok(batch)
    }

    /// `[B, L]` indicator of real (non-padding) columns.
    pub fn valid(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.size * self.len];
        for (bi, &n) in self.lengths.iter().enumerate() {
            v[bi * self.len..bi * self.len + n].fill(1.0);
        }
        v
    }
}
