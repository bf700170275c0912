//! Text table, CSV and JSON renderings of the report types.
//!
//! Tables round for reading (percentages to one decimal, ratios to two);
//! CSV cells carry the shortest round-trip form of every number and JSON
//! serializes the report value itself, so all three agree numerically.

use std::fmt::Write as _;

use clap::ValueEnum;
use serde::Serialize;

use qsmodel_core::autotune::{AutotuneResult, PlanReport};
use qsmodel_core::qs::{QsReport, Table1Row};
use qsmodel_core::report::{CompareRow, PairedRow, SweepResult, VariantOutcome};
use qsmodel_core::specs::ParallelismPlan;

use crate::eval::AttributionReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

/// Display precision of a numeric cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prec {
    /// Percent, one decimal.
    Pct,
    /// Ratio, two decimals.
    Ratio,
    Fixed(usize),
    /// Significant digits.
    Sig(usize),
    /// Scientific with three decimals (seconds, bytes).
    Sci,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Num(f64, Prec),
    Text(String),
    Missing,
}

impl Cell {
    fn opt(v: Option<f64>, p: Prec) -> Cell {
        v.map_or(Cell::Missing, |x| Cell::Num(x, p))
    }

    fn text(s: impl Into<String>) -> Cell {
        Cell::Text(s.into())
    }

    fn plan(p: Option<ParallelismPlan>) -> Cell {
        p.map_or(Cell::Missing, |p| Cell::Text(p.to_string()))
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Cell::Int(_) | Cell::Num(..))
    }

    pub fn display(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v, p) => format_num(*v, *p),
            Cell::Text(s) => s.clone(),
            Cell::Missing => "-".to_string(),
        }
    }

    pub fn raw(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v, _) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

/// Rounds half away from zero (as printed tables do), then formats.
fn fixed(v: f64, decimals: usize) -> String {
    let scale = 10f64.powi(decimals as i32);
    let r = (v * scale).round() / scale;
    format!("{r:.decimals$}")
}

pub fn format_num(v: f64, p: Prec) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    match p {
        // One decimal, but never fewer than two significant digits.
        Prec::Pct if v != 0.0 && v.abs() < 1.0 => format_num(v, Prec::Sig(2)),
        Prec::Pct => fixed(v, 1),
        Prec::Ratio => fixed(v, 2),
        Prec::Fixed(n) => fixed(v, n),
        Prec::Sci => format!("{v:.3e}"),
        Prec::Sig(n) => {
            if v == 0.0 {
                return "0".to_string();
            }
            let mag = v.abs().log10().floor() as i32;
            fixed(v, (n as i32 - 1 - mag).max(0) as usize)
        }
    }
}

/// Column headers plus rows of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub headers: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Grid {
    pub fn table(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::display).collect()).collect();
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|i| cells.iter().map(|r| r[i].chars().count()).chain([self.headers[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, vals: Vec<(String, bool)>| {
            let parts: Vec<String> = vals
                .into_iter()
                .zip(&widths)
                .map(|((v, right), w)| if right { format!("{v:>w$}") } else { format!("{v:<w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        let numeric: Vec<bool> = (0..self.headers.len()).map(|i| self.rows.iter().any(|r| r[i].is_numeric())).collect();
        line(&mut out, self.headers.iter().zip(&numeric).map(|(h, n)| (h.to_string(), *n)).collect());
        line(&mut out, widths.iter().zip(&numeric).map(|(w, n)| ("-".repeat(*w), *n)).collect());
        for (row, shown) in self.rows.iter().zip(cells) {
            line(&mut out, row.iter().zip(shown).zip(&numeric).map(|((_, s), n)| (s, *n)).collect());
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::raw)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

/// A report with a tabular form.
pub trait Tabular: Serialize {
    fn grid(&self) -> Grid;
}

pub fn render<T: Tabular + ?Sized>(value: &T, format: Format) -> String {
    match format {
        Format::Table => value.grid().table(),
        Format::Csv => value.grid().csv(),
        Format::Json => to_json(value),
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

impl Tabular for [Table1Row] {
    fn grid(&self) -> Grid {
        Grid {
            headers: vec!["model", "E", "k", "s", "q_lo", "q_hi", "qs_lo", "qs_hi"],
            rows: self
                .iter()
                .map(|r| {
                    vec![
                        Cell::text(&r.name),
                        Cell::Int(r.num_experts.into()),
                        Cell::Int(r.top_k.into()),
                        Cell::Num(r.s, Prec::Sig(2)),
                        Cell::Num(r.q_lo, Prec::Sig(2)),
                        Cell::Num(r.q_hi, Prec::Sig(2)),
                        Cell::Num(r.qs_lo, Prec::Sig(2)),
                        Cell::Num(r.qs_hi, Prec::Sig(2)),
                    ]
                })
                .collect(),
        }
    }
}

impl Tabular for [QsReport] {
    fn grid(&self) -> Grid {
        Grid {
            headers: vec!["dense_model", "q", "s", "qs", "verdict", "ffn_traffic_ratio", "dense_target_params", "dense_params"],
            rows: self
                .iter()
                .map(|r| {
                    let c = &r.criterion;
                    vec![
                        Cell::text(&r.dense_baseline.name),
                        Cell::Num(c.q, Prec::Ratio),
                        Cell::Num(c.s, Prec::Fixed(4)),
                        Cell::Num(c.qs, Prec::Fixed(3)),
                        Cell::text(c.verdict.as_str()),
                        Cell::Num(c.ffn_traffic_ratio, Prec::Ratio),
                        Cell::Num(r.dense_target_params, Prec::Sci),
                        Cell::Int(r.dense_achieved_params),
                    ]
                })
                .collect(),
        }
    }
}

fn batch_cell(v: &VariantOutcome, oom: &str) -> Cell {
    if v.feasible {
        Cell::Int(v.batch_aggregate)
    } else {
        Cell::text(oom)
    }
}

impl Tabular for [PairedRow] {
    fn grid(&self) -> Grid {
        Grid {
            headers: vec![
                "model", "gpus", "q", "E", "k", "s", "qs", "B_moe", "B_dense", "R_moe", "R_dense", "E/k", "B_dense/B_moe",
                "R_dense/R_moe", "verdict", "moe_plan", "dense_plan",
            ],
            rows: self
                .iter()
                .map(|r| {
                    let reuse = r.reuse.as_ref().filter(|_| r.dense.feasible);
                    vec![
                        Cell::text(&r.model),
                        Cell::Int(r.num_gpus.into()),
                        Cell::Num(r.q, Prec::Sig(2)),
                        Cell::Int(r.num_experts.into()),
                        Cell::Int(r.top_k.into()),
                        Cell::Num(r.s, Prec::Fixed(4)),
                        Cell::Num(r.qs, Prec::Fixed(3)),
                        batch_cell(&r.moe, "OOM"),
                        if r.moe.feasible { batch_cell(&r.dense, "OOM") } else { Cell::Missing },
                        Cell::opt(reuse.map(|g| g.r_moe), Prec::Ratio),
                        Cell::opt(reuse.map(|g| g.r_dense), Prec::Ratio),
                        Cell::Num(r.routing_factor, Prec::Fixed(1)),
                        Cell::opt(reuse.map(|g| g.capacity_factor), Prec::Ratio),
                        Cell::opt(reuse.map(|g| g.total_gap), Prec::Ratio),
                        Cell::text(r.verdict.as_str()),
                        Cell::plan(r.moe.plan),
                        Cell::plan(r.dense.plan),
                    ]
                })
                .collect(),
        }
    }
}

impl Tabular for SweepResult {
    fn grid(&self) -> Grid {
        Grid {
            headers: vec!["context", "B_moe", "B_dense", "moe_rel_pct", "dense_rel_pct", "speedup", "moe_plan", "dense_plan"],
            rows: self
                .rows
                .iter()
                .map(|r| {
                    vec![
                        Cell::Int(r.context_length),
                        Cell::Int(r.b_moe),
                        Cell::Int(r.b_dense),
                        Cell::opt(r.tput_moe_rel, Prec::Pct),
                        Cell::opt(r.tput_dense_rel, Prec::Pct),
                        Cell::opt(r.speedup, Prec::Ratio),
                        Cell::plan(r.moe_plan),
                        Cell::plan(r.dense_plan),
                    ]
                })
                .collect(),
        }
    }
}

impl Tabular for AttributionReport {
    fn grid(&self) -> Grid {
        let mut rows = Vec::new();
        for (row, point) in self.table.rows.iter().zip(&self.points) {
            for (label, costs, outcome) in [("moe", row.moe, &point.moe), ("dense", row.dense, &point.dense)] {
                let is_moe = label == "moe";
                rows.push(vec![
                    Cell::Int(row.context_length),
                    Cell::text(label),
                    Cell::opt(costs.map(|c| c.hbm), Prec::Ratio),
                    Cell::opt(costs.map(|c| c.compute), Prec::Ratio),
                    Cell::opt(costs.map(|c| c.comm), Prec::Ratio),
                    if is_moe { row.gap_driver.map_or(Cell::Missing, |d| Cell::text(d.label())) } else { Cell::Missing },
                    if is_moe { Cell::opt(row.gap, Prec::Ratio) } else { Cell::Missing },
                    Cell::plan(outcome.plan),
                ]);
            }
        }
        Grid { headers: vec!["context", "variant", "hbm", "compute", "comm", "gap_driver", "gap", "plan"], rows }
    }
}

impl Tabular for [CompareRow] {
    fn grid(&self) -> Grid {
        Grid {
            headers: vec!["model", "q", "context", "B_moe", "B_dense", "moe_rel_pct", "dense_rel_pct", "moe_plan", "dense_plan"],
            rows: self
                .iter()
                .map(|r| {
                    let p = &r.point;
                    vec![
                        Cell::text(&r.model),
                        Cell::Num(r.q, Prec::Sig(2)),
                        Cell::Int(r.context_length),
                        batch_cell(&p.moe, "infeasible"),
                        if p.moe.feasible { batch_cell(&p.dense, "infeasible") } else { Cell::Missing },
                        if p.moe.feasible { Cell::Num(100.0, Prec::Pct) } else { Cell::Missing },
                        Cell::opt(r.dense_rel_pct, Prec::Pct),
                        Cell::plan(p.moe.plan),
                        Cell::plan(p.dense.plan),
                    ]
                })
                .collect(),
        }
    }
}

fn plan_cells(r: &PlanReport) -> Vec<Cell> {
    let lat = r.latency.as_ref();
    vec![
        Cell::Int(r.batch_aggregate()),
        Cell::opt(r.tokens_per_s(), Prec::Fixed(1)),
        Cell::opt(lat.map(|l| l.t_token), Prec::Sci),
        Cell::opt(lat.map(|l| l.t_compute), Prec::Sci),
        Cell::opt(lat.map(|l| l.t_hbm), Prec::Sci),
        Cell::opt(lat.map(|l| l.t_comm_exposed), Prec::Sci),
        r.reason.as_ref().map_or(Cell::Missing, Cell::text),
    ]
}

const PLAN_HEADERS: [&str; 7] = ["B", "tokens_per_s", "t_token_s", "t_compute_s", "t_hbm_s", "t_comm_exposed_s", "reason"];

impl Tabular for AutotuneResult {
    fn grid(&self) -> Grid {
        let mut headers = vec!["rank", "plan", "feasible"];
        headers.extend(PLAN_HEADERS);
        let rows = self
            .ranking
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = vec![Cell::Int(i as u64 + 1), Cell::text(r.plan.to_string()), Cell::text(r.feasible.to_string())];
                row.extend(plan_cells(r));
                row
            })
            .collect();
        Grid { headers, rows }
    }
}

impl Tabular for PlanReport {
    fn grid(&self) -> Grid {
        let mut headers = vec!["plan", "feasible", "budget_bytes", "resident_weight_bytes", "kv_bytes_per_seq_per_gpu", "n_eff_max"];
        headers.extend(PLAN_HEADERS);
        let m = self.memory.as_ref();
        let mut row = vec![
            Cell::text(self.plan.to_string()),
            Cell::text(self.feasible.to_string()),
            Cell::opt(m.map(|m| m.budget_bytes), Prec::Sci),
            Cell::opt(m.map(|m| m.resident_weight_bytes), Prec::Sci),
            Cell::opt(m.map(|m| m.kv_bytes_per_seq_per_gpu), Prec::Sci),
            m.map_or(Cell::Missing, |m| Cell::Int(m.n_eff_max)),
        ];
        row.extend(plan_cells(self));
        Grid { headers, rows: vec![row] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_rules() {
        assert_eq!(format_num(99.96, Prec::Pct), "100.0");
        assert_eq!(format_num(0.0412, Prec::Pct), "0.041");
        assert_eq!(format_num(0.0, Prec::Pct), "0.0");
        assert_eq!(format_num(0.3125, Prec::Fixed(3)), "0.313");
        assert_eq!(format_num(0.03125, Prec::Fixed(4)), "0.0313");
        assert_eq!(format_num(1.0 / 2048.0, Prec::Sig(2)), "0.00049");
        assert_eq!(format_num(0.0078125, Prec::Sig(2)), "0.0078");
        assert_eq!(format_num(5.0, Prec::Sig(2)), "5.0");
        assert_eq!(format_num(1.5e-3, Prec::Sci), "1.500e-3");
    }

    #[test]
    fn table_aligns_numbers_right() {
        let g = Grid { headers: vec!["name", "x"], rows: vec![vec![Cell::text("a"), Cell::Int(5)], vec![Cell::text("bb"), Cell::Missing]] };
        assert_eq!(g.table(), "name  x\n----  -\na     5\nbb    -\n");
        assert_eq!(g.csv(), "name,x\na,5\nbb,\n");
    }
}
