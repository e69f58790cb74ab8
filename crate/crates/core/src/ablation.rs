//! Ablation grids over query count, the multi-mask projector and the query
//! estimator, rendered as aligned text tables with a JSON twin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::numerics::DType;
use crate::synth::Sample;
use crate::train::train;

pub const QUERY_COUNTS: [usize; 7] = [32, 24, 16, 8, 4, 2, 1];
pub const MMP_QUERY_COUNTS: [usize; 3] = [24, 16, 8];
pub const METRIC_COLUMNS: [&str; 6] = ["IoU", "Pr@50", "Pr@60", "Pr@70", "Pr@80", "Pr@90"];
const CHECK: &str = "✓";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Query count sweep.
    Nq,
    /// Multi-mask projector on/off per query count.
    Mmp,
    /// Global visual feature and query estimator on/off.
    Mqe,
}

impl std::str::FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nq" => Ok(Study::Nq),
            "mmp" => Ok(Study::Mmp),
            "mqe" => Ok(Study::Mqe),
            _ => Err(Error::Config(format!("unknown study {s:?}; expected nq, mmp or mqe"))),
        }
    }
}

impl Study {
    pub fn title(self) -> &'static str {
        match self {
            Study::Nq => "Influence of query number",
            Study::Mmp => "Multi-mask projector on/off",
            Study::Mqe => "Global visual feature and multi-query estimator on/off",
        }
    }

    pub fn key_columns(self) -> &'static [&'static str] {
        match self {
            Study::Nq => &["N_q"],
            Study::Mmp => &["N_q", "MMP"],
            Study::Mqe => &["f_vg", "MQE"],
        }
    }

    /// Row keys and the config of every cell, in table order.
    pub fn cells(self, base: &TrainConfig) -> Vec<(Vec<String>, TrainConfig)> {
        let mark = |on: bool| if on { CHECK.to_string() } else { String::new() };
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Study::Nq => QUERY_COUNTS
                .iter()
                .map(|&n| (vec![n.to_string()], with(&|c| c.model.num_queries = n)))
                .collect(),
            Study::Mmp => MMP_QUERY_COUNTS
                .iter()
                .flat_map(|&n| {
                    [true, false].map(|mmp| {
                        let key = vec![if mmp { n.to_string() } else { String::new() }, mark(mmp)];
                        (key, with(&|c| {
                            c.model.num_queries = n;
                            c.model.use_mmp = mmp;
                        }))
                    })
                })
                .collect(),
            Study::Mqe => [(true, true), (false, true), (true, false), (false, false)]
                .into_iter()
                .map(|(fvg, mqe)| {
                    (vec![mark(fvg), mark(mqe)], with(&|c| {
                        c.model.use_fvg = fvg;
                        c.model.use_mqe = mqe;
                    }))
                })
                .collect(),
        }
    }
}

/// Table values in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub iou: f64,
    pub pr50: f64,
    pub pr60: f64,
    pub pr70: f64,
    pub pr80: f64,
    pub pr90: f64,
}

impl RowMetrics {
    pub fn from_report(r: &EvalReport) -> Self {
        let p = r.prec.values();
        RowMetrics { iou: 100.0 * r.iou, pr50: 100.0 * p[0], pr60: 100.0 * p[1], pr70: 100.0 * p[2], pr80: 100.0 * p[3], pr90: 100.0 * p[4] }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.iou, self.pr50, self.pr60, self.pr70, self.pr80, self.pr90]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        RowMetrics { iou: v[0], pr50: v[1], pr60: v[2], pr70: v[3], pr80: v[4], pr90: v[5] }
    }

    /// Column-wise median; the mean of the two middle values for even counts.
    pub fn median(rows: &[RowMetrics]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let col = |i: usize| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.values()[i]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        Some(Self::from_values(std::array::from_fn(col)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub keys: Vec<String>,
    /// Median over seeds; absent when any seed failed.
    pub metrics: Option<RowMetrics>,
    pub per_seed: Vec<RowMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub study: Study,
    pub title: String,
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(study: Study, seeds: &[u64], rows: Vec<Row>) -> Self {
        let columns = study.key_columns().iter().chain(METRIC_COLUMNS.iter()).map(|s| s.to_string()).collect();
        Table { study, title: study.title().to_string(), columns, seeds: seeds.to_vec(), rows }
    }

    fn cells(row: &Row) -> Vec<String> {
        let metrics: Vec<String> = match &row.metrics {
            Some(m) => m.values().iter().map(|v| format!("{v:.2}")).collect(),
            None => vec!["failed".to_string(); METRIC_COLUMNS.len()],
        };
        row.keys.iter().cloned().chain(metrics).collect()
    }

    /// UTF-8 text with every column padded to its widest entry.
    pub fn render(&self) -> String {
        let body: Vec<Vec<String>> = self.rows.iter().map(Self::cells).collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &body {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            padded.join(" | ").trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.columns));
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("-+-"));
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(&body) {
            out.push_str(&line(cells));
            if let Some(e) = &row.error {
                out.push_str(&format!("  ({e})"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains and evaluates every cell of `study` once per seed, running at most
/// `jobs` trainings at a time. Failed cells are kept and marked.
pub fn run_study(
    base: &TrainConfig,
    study: Study,
    seeds: &[u64],
    jobs: usize,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<Table> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Input("an ablation needs a validation split".into()));
    }
    let cells = study.cells(base);
    let tasks: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let results: Vec<Result<RowMetrics>> = pool.install(|| {
        tasks
            .par_iter()
            .with_max_len(1)
            .map(|&(c, seed)| {
                let cfg = TrainConfig { seed, ..cells[c].1.clone() };
                run_cell(&cfg, train_set, val_set)
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (c, (keys, _)) in cells.into_iter().enumerate() {
        let mine = &results[c * seeds.len()..(c + 1) * seeds.len()];
        let per_seed: Vec<RowMetrics> = mine.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let error = mine.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string()));
        let metrics = if error.is_none() { RowMetrics::median(&per_seed) } else { None };
        rows.push(Row { keys, metrics, per_seed, error });
    }
    Ok(Table::new(study, seeds, rows))
}

fn run_cell(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<RowMetrics> {
    let report = match cfg.dtype {
        DType::F32 => train::<f32>(cfg, train_set, val_set, &mut |_| Ok(()))?.last_eval,
        DType::F64 => train::<f64>(cfg, train_set, val_set, &mut |_| Ok(()))?.last_eval,
    };
    let report = report.ok_or_else(|| Error::Internal("training finished without an evaluation".into()))?;
    Ok(RowMetrics::from_report(&report))
}
