//! Per-epoch metrics, unlabelled-data utilisation, the `metrics.csv` writer
//! and the ablation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossValues;

pub const CSV_HEADER: &str = "epoch,loss_sup,loss_unsup,loss_con,loss_supcon,loss_inv,loss_total,util_pl,util_inv,util_con,util_any,aha_easy_frac,inv_k_mean,test_oa,test_macc,pl_correct_frac";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub pl: f64,
    pub inv: f64,
    pub con: f64,
    pub any: f64,
}

/// Fractions of samples that passed the confidence mask, received a
/// non-empty inverse mask, took part in the contrastive loss, or any of these.
pub fn utilization(
    pl_mask: &[bool],
    inv_class_counts: &[usize],
    con: &[bool],
) -> Result<Utilization> {
    let n = pl_mask.len();
    if inv_class_counts.len() != n || con.len() != n {
        return Err(Error::InvalidArgument(format!(
            "utilization vectors differ in length: {n}, {}, {}",
            inv_class_counts.len(),
            con.len()
        )));
    }
    if n == 0 {
        return Ok(Utilization::default());
    }
    let frac = |c: usize| c as f64 / n as f64;
    let mut any = 0;
    for i in 0..n {
        if pl_mask[i] || inv_class_counts[i] > 0 || con[i] {
            any += 1;
        }
    }
    Ok(Utilization {
        pl: frac(pl_mask.iter().filter(|&&b| b).count()),
        inv: frac(inv_class_counts.iter().filter(|&&c| c > 0).count()),
        con: frac(con.iter().filter(|&&b| b).count()),
        any: frac(any),
    })
}

/// Confusion matrix indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Confusion {
            classes: counts.len(),
            counts,
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    /// Element-wise sum, for merging evaluation shards.
    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.classes).map(|k| self.counts[k][k]).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Mean per-class recall; fails if a class has no samples.
    pub fn mean_accuracy(&self) -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..self.classes {
            let row: u64 = self.counts[k].iter().sum();
            if row == 0 {
                return Err(Error::InvalidArgument(format!(
                    "class {k} absent from the evaluation set; per-class recall undefined"
                )));
            }
            acc += self.counts[k][k] as f64 / row as f64;
        }
        Ok(acc / self.classes as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub losses: LossValues,
    pub util: Utilization,
    pub aha_easy_frac: f64,
    pub inv_k_mean: Option<f64>,
    pub test_oa: f64,
    pub test_macc: f64,
    pub pl_correct_frac: Option<f64>,
}

fn fmt6(x: f64) -> String {
    // +0.0 folds -0.0 into 0.0 so zero never prints as "-0.000000"
    format!("{:.6}", x + 0.0)
}

pub fn csv_row(m: &EpochMetrics) -> String {
    let opt = |x: Option<f64>| x.map(fmt6).unwrap_or_default();
    let l = &m.losses;
    let mut s = m.epoch.to_string();
    for x in [
        l.sup,
        l.unsup,
        l.con,
        l.supcon,
        l.inv,
        l.total,
        m.util.pl,
        m.util.inv,
        m.util.con,
        m.util.any,
        m.aha_easy_frac,
    ] {
        s.push(',');
        s.push_str(&fmt6(x));
    }
    let _ = write!(
        s,
        ",{},{},{},{}",
        opt(m.inv_k_mean),
        fmt6(m.test_oa),
        fmt6(m.test_macc),
        opt(m.pl_correct_frac)
    );
    s
}

/// Appends rows to `path`, writing the header first if the file is new or
/// empty.
pub fn append_epoch_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(CSV_HEADER);
        buf.push('\n');
    }
    for r in rows {
        buf.push_str(&csv_row(r));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a complete metrics file (header plus one row per epoch).
pub fn write_epoch_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_epoch_csv(path, rows)
}

/// One parsed `metrics.csv` row; empty optional fields become `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub epoch: u64,
    pub fields: BTreeMap<String, Option<f64>>,
}

impl CsvRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.get(key).copied().flatten()
    }
}

pub fn read_epoch_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected metrics header in {}", path.display()),
        });
    }
    let cols: Vec<&str> = header.split(',').collect();
    let mut rows = Vec::new();
    let mut offset = header.len() as u64 + 1;
    for line in lines {
        let vals: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| Error::Format {
            offset,
            message: msg,
        };
        if vals.len() != cols.len() {
            return Err(bad(format!(
                "expected {} fields, got {}",
                cols.len(),
                vals.len()
            )));
        }
        let epoch = vals[0]
            .parse()
            .map_err(|_| bad(format!("bad epoch `{}`", vals[0])))?;
        let mut fields = BTreeMap::new();
        for (c, v) in cols.iter().zip(&vals).skip(1) {
            let parsed = if v.is_empty() {
                None
            } else {
                Some(
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("bad value `{v}` in {c}")))?,
                )
            };
            fields.insert(c.to_string(), parsed);
        }
        rows.push(CsvRow { epoch, fields });
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

/// Which contributions were active in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flags {
    pub inverse: bool,
    pub aha: bool,
    pub contrastive: bool,
    pub supcon: bool,
}

impl Flags {
    pub const ALL_ON: Flags = Flags {
        inverse: true,
        aha: true,
        contrastive: true,
        supcon: true,
    };
    pub const ALL_OFF: Flags = Flags {
        inverse: false,
        aha: false,
        contrastive: false,
        supcon: false,
    };

    /// The eight on/off combinations of (inverse, AHA, contrastive learning)
    /// in the conventional ablation-table order; contrastive learning toggles
    /// both contrastive terms.
    pub fn table_order() -> [Flags; 8] {
        let f = |inverse, aha, cl| Flags {
            inverse,
            aha,
            contrastive: cl,
            supcon: cl,
        };
        [
            f(true, true, true),
            f(true, true, false),
            f(true, false, true),
            f(false, true, true),
            f(false, false, true),
            f(true, false, false),
            f(false, true, false),
            f(false, false, false),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.inverse {
            parts.push("inv");
        }
        if self.aha {
            parts.push("aha");
        }
        match (self.contrastive, self.supcon) {
            (true, true) => parts.push("cl"),
            (true, false) => parts.push("con"),
            (false, true) => parts.push("supcon"),
            _ => {}
        }
        if parts.is_empty() {
            "fixmatch".into()
        } else {
            parts.join("+")
        }
    }
}

/// Summary of one finished run, as needed by the ablation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub flags: Flags,
    pub seed: u64,
    pub final_oa: f64,
    pub best_oa: f64,
    pub final_macc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Stat {
        Stat {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: Flags,
    pub label: String,
    pub seeds: Vec<u64>,
    pub final_oa: Stat,
    pub best_oa: Stat,
    /// Mean final accuracy minus that of the all-off row, when present.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Groups runs by flag combination (aggregating seeds) and orders rows like
/// the standard eight-row ablation table; other combinations follow.
pub fn ablation_report(runs: &[RunSummary]) -> Result<AblationReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(
            "an ablation report needs at least two runs".into(),
        ));
    }
    let mut groups: BTreeMap<Flags, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        let g = groups.entry(r.flags).or_default();
        if g.iter().any(|o| o.seed == r.seed) {
            return Err(Error::InvalidArgument(format!(
                "duplicate run for flags `{}` and seed {}",
                r.flags.label(),
                r.seed
            )));
        }
        g.push(r);
    }
    let order = Flags::table_order();
    let mut keys: Vec<Flags> = groups.keys().copied().collect();
    keys.sort_by_key(|f| (order.iter().position(|o| o == f).unwrap_or(order.len()), *f));
    let baseline = groups
        .get(&Flags::ALL_OFF)
        .map(|g| g.iter().map(|r| r.final_oa).sum::<f64>() / g.len() as f64);
    let rows = keys
        .into_iter()
        .map(|f| {
            let g = &groups[&f];
            let finals: Vec<f64> = g.iter().map(|r| r.final_oa).collect();
            let bests: Vec<f64> = g.iter().map(|r| r.best_oa).collect();
            let final_oa = Stat::of(&finals);
            AblationRow {
                flags: f,
                label: f.label(),
                seeds: g.iter().map(|r| r.seed).collect(),
                delta_vs_baseline: baseline.map(|b| final_oa.mean - b),
                final_oa,
                best_oa: Stat::of(&bests),
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let tick = |b: bool| if b { "x" } else { " " };
        let mut s = String::from(
            "| Inv. | AHA | Con | SupCon | runs | final OA (mean) | final OA [min, max] | best OA (mean) | delta vs all-off |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.4} | [{:.4}, {:.4}] | {:.4} | {} |",
                tick(r.flags.inverse),
                tick(r.flags.aha),
                tick(r.flags.contrastive),
                tick(r.flags.supcon),
                r.seeds.len(),
                r.final_oa.mean,
                r.final_oa.min,
                r.final_oa.max,
                r.best_oa.mean,
                r.delta_vs_baseline
                    .map(|d| format!("{d:+.4}"))
                    .unwrap_or_default(),
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: u64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            losses: LossValues {
                sup: 1.0,
                unsup: -0.0,
                con: 0.5,
                supcon: 2.25,
                inv: 0.125,
                total: 3.9,
            },
            util: Utilization {
                pl: 0.25,
                inv: 1.0,
                con: 1.0,
                any: 1.0,
            },
            aha_easy_frac: 0.0,
            inv_k_mean: Some(3.5),
            test_oa: 0.5,
            test_macc: 0.4375,
            pl_correct_frac: None,
        }
    }

    #[test]
    fn utilization_fractions() {
        let mut pl = vec![false; 12];
        pl[..3].iter_mut().for_each(|b| *b = true);
        let u = utilization(&pl, &[0; 12], &[false; 12]).unwrap();
        assert_eq!(u.pl, 0.25);
        assert_eq!(u.any, 0.25);
        let u = utilization(&pl, &[0; 12], &[true; 12]).unwrap();
        assert_eq!(u.con, 1.0);
        assert_eq!(u.any, 1.0);
        let u = utilization(&[false; 4], &[0; 4], &[false; 4]).unwrap();
        assert_eq!(u.any, 0.0);
        assert!(utilization(&[false; 4], &[0; 3], &[false; 4]).is_err());
    }

    #[test]
    fn accuracy_from_confusion() {
        let c = Confusion::from_counts(vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(c.overall_accuracy().unwrap(), 0.75);
        assert_eq!(c.mean_accuracy().unwrap(), 0.75);
        let c = Confusion::from_counts(vec![vec![9, 0], vec![1, 0]]);
        assert_eq!(c.overall_accuracy().unwrap(), 0.9);
        assert_eq!(c.mean_accuracy().unwrap(), 0.5);
        let c = Confusion::from_counts(vec![vec![3, 0], vec![0, 0]]);
        assert!(c.mean_accuracy().is_err());
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let rows: Vec<_> = (1..=60).map(row).collect();
        write_epoch_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 61);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "1,1.000000,0.000000,0.500000,2.250000,0.125000,3.900000,0.250000,1.000000,1.000000,1.000000,0.000000,3.500000,0.500000,0.437500,"
        );
        write_epoch_csv(&p, &rows).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), text);

        let parsed = read_epoch_csv(&p).unwrap();
        assert_eq!(parsed.len(), 60);
        assert_eq!(parsed[0].get("loss_supcon"), Some(2.25));
        assert_eq!(parsed[0].get("pl_correct_frac"), None);
    }

    fn run(flags: Flags, seed: u64, oa: f64) -> RunSummary {
        RunSummary {
            flags,
            seed,
            final_oa: oa,
            best_oa: oa + 0.01,
            final_macc: oa,
        }
    }

    #[test]
    fn full_sweep_follows_table_order() {
        let runs: Vec<_> = Flags::table_order()
            .into_iter()
            .rev()
            .enumerate()
            .map(|(i, f)| run(f, 1, 0.5 + i as f64 * 0.01))
            .collect();
        let rep = ablation_report(&runs).unwrap();
        assert_eq!(rep.rows.len(), 8);
        let flags: Vec<Flags> = rep.rows.iter().map(|r| r.flags).collect();
        assert_eq!(flags, Flags::table_order().to_vec());
        assert_eq!(rep.to_markdown().lines().count(), 10);
    }

    #[test]
    fn two_runs_with_delta() {
        let rep =
            ablation_report(&[run(Flags::ALL_OFF, 1, 0.5), run(Flags::ALL_ON, 1, 0.75)]).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].flags, Flags::ALL_ON);
        assert_eq!(rep.rows[0].delta_vs_baseline, Some(0.25));
    }

    #[test]
    fn seeds_aggregate_and_duplicates_fail() {
        let rep = ablation_report(&[
            run(Flags::ALL_ON, 1, 0.5),
            run(Flags::ALL_ON, 2, 0.7),
            run(Flags::ALL_ON, 3, 0.6),
        ])
        .unwrap();
        assert_eq!(rep.rows.len(), 1);
        let s = &rep.rows[0].final_oa;
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.5, 0.7));
        assert!(
            ablation_report(&[run(Flags::ALL_ON, 1, 0.5), run(Flags::ALL_ON, 1, 0.6)]).is_err()
        );
        assert!(ablation_report(&[run(Flags::ALL_ON, 1, 0.5)]).is_err());
    }
}
