use super::{MetricError, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const CSV_HEADER: &str = "condition,noise_kind,snr_db,system,metric,mean,count";

/// Pseudo noise kind of the rows pooling every kind of a condition.
pub const ALL_KINDS: &str = "all";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Stoi,
    /// Stands in for the PESQ column.
    SiSdr,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Stoi => "STOI",
            Metric::SiSdr => "SISDR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "STOI" => Some(Metric::Stoi),
            "SISDR" => Some(Metric::SiSdr),
            _ => None,
        }
    }
}

/// One metric value of one enhanced (or noisy) test item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemResult {
    pub condition: String,
    pub noise_kind: String,
    pub snr_db: f64,
    pub system: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrCell {
    Db(f64),
    /// Mean of the per-SNR means.
    Average,
}

impl fmt::Display for SnrCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrCell::Db(v) => write!(f, "{v}"),
            SnrCell::Average => f.write_str("avg"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub noise_kind: String,
    pub snr: SnrCell,
    pub system: String,
    pub metric: Metric,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

/// SNRs are grouped on a milli-dB grid so that keys order numerically.
fn snr_key(db: f64) -> i64 {
    (db * 1000.0).round() as i64
}

type CellKey = (String, String, i64, String, Metric);

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-(condition, kind, SNR, system, metric) means, the same pooled over
/// kinds (`noise_kind = all`), and for each of those an `avg` row holding
/// the mean of its per-SNR means. Rows are sorted by key.
pub fn aggregate_report(items: &[ItemResult]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(MetricError::Input("no results to aggregate".into()));
    }
    let mut cells: BTreeMap<CellKey, (f64, Vec<f64>)> = BTreeMap::new();
    for it in items {
        if !it.snr_db.is_finite() {
            return Err(MetricError::Input(format!("non-finite SNR in {it:?}")));
        }
        for kind in [it.noise_kind.as_str(), ALL_KINDS] {
            let key = (
                it.condition.clone(),
                kind.to_string(),
                snr_key(it.snr_db),
                it.system.clone(),
                it.metric,
            );
            cells
                .entry(key)
                .or_insert_with(|| (it.snr_db, Vec::new()))
                .1
                .push(it.value);
        }
    }
    type GroupKey = (String, String, String, Metric);
    let mut groups: BTreeMap<GroupKey, Vec<ReportRow>> = BTreeMap::new();
    for ((cond, kind, _, sys, metric), (snr, vals)) in cells {
        groups
            .entry((cond.clone(), kind.clone(), sys.clone(), metric))
            .or_default()
            .push(ReportRow {
                condition: cond,
                noise_kind: kind,
                snr: SnrCell::Db(snr),
                system: sys,
                metric,
                mean: mean(&vals),
                count: vals.len(),
            });
    }
    let mut rows = Vec::new();
    for ((cond, kind, sys, metric), per_snr) in groups {
        let means: Vec<f64> = per_snr.iter().map(|r| r.mean).collect();
        let count = per_snr.iter().map(|r| r.count).sum();
        rows.extend(per_snr);
        rows.push(ReportRow {
            condition: cond,
            noise_kind: kind,
            snr: SnrCell::Average,
            system: sys,
            metric,
            mean: mean(&means),
            count,
        });
    }
    let order = |r: &ReportRow| {
        (
            r.condition.clone(),
            r.noise_kind.clone(),
            match r.snr {
                SnrCell::Db(v) => (0, snr_key(v)),
                SnrCell::Average => (1, 0),
            },
            r.system.clone(),
            r.metric,
        )
    };
    rows.sort_by_key(order);
    Ok(MetricReport { rows })
}

impl MetricReport {
    pub fn get(
        &self,
        condition: &str,
        kind: &str,
        snr: SnrCell,
        system: &str,
        metric: Metric,
    ) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.condition == condition
                && r.noise_kind == kind
                && r.system == system
                && r.metric == metric
                && r.snr == snr
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.condition,
                r.noise_kind,
                r.snr,
                r.system,
                r.metric.name(),
                r.mean,
                r.count
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(MetricError::Input("missing report header".into()));
        }
        let bad = |l: &str| MetricError::Input(format!("malformed report line `{l}`"));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 7 {
                    return Err(bad(l));
                }
                Ok(ReportRow {
                    condition: f[0].into(),
                    noise_kind: f[1].into(),
                    snr: match f[2] {
                        "avg" => SnrCell::Average,
                        v => SnrCell::Db(v.parse().map_err(|_| bad(l))?),
                    },
                    system: f[3].into(),
                    metric: Metric::parse(f[4]).ok_or_else(|| bad(l))?,
                    mean: f[5].parse().map_err(|_| bad(l))?,
                    count: f[6].parse().map_err(|_| bad(l))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(cond: &str, kind: &str, snr: f64, sys: &str, v: f64) -> ItemResult {
        ItemResult {
            condition: cond.into(),
            noise_kind: kind.into(),
            snr_db: snr,
            system: sys.into(),
            metric: Metric::Stoi,
            value: v,
        }
    }

    #[test]
    fn single_item_mean_is_the_item() {
        let r = aggregate_report(&[item("matched", "white", -5.0, "noisy", 0.42)]).unwrap();
        let row = r
            .get("matched", "white", SnrCell::Db(-5.0), "noisy", Metric::Stoi)
            .unwrap();
        assert_eq!((row.mean, row.count), (0.42, 1));
        let avg = r
            .get("matched", "all", SnrCell::Average, "noisy", Metric::Stoi)
            .unwrap();
        assert_eq!(avg.mean, 0.42);
    }

    #[test]
    fn average_row_is_mean_of_snr_means() {
        // Unequal counts per SNR: the average weights SNRs, not items.
        let mut items = vec![];
        for (snr, vals) in [
            (-10.0, vec![1.0]),
            (-5.0, vec![1.5, 2.5]),
            (0.0, vec![3.0]),
            (5.0, vec![4.0, 4.0, 4.0]),
        ] {
            for v in vals {
                items.push(item("mismatched", "pink", snr, "se", v));
            }
        }
        let r = aggregate_report(&items).unwrap();
        let avg = r
            .get("mismatched", "pink", SnrCell::Average, "se", Metric::Stoi)
            .unwrap();
        assert!((avg.mean - 2.5).abs() < 1e-12);
        assert_eq!(avg.count, 7);
    }

    #[test]
    fn pooled_rows_cover_all_kinds() {
        let items = [
            item("matched", "white", 0.0, "s", 1.0),
            item("matched", "pink", 0.0, "s", 3.0),
        ];
        let r = aggregate_report(&items).unwrap();
        let all = r
            .get("matched", ALL_KINDS, SnrCell::Db(0.0), "s", Metric::Stoi)
            .unwrap();
        assert_eq!((all.mean, all.count), (2.0, 2));
    }

    #[test]
    fn row_order_is_independent_of_input_order() {
        let mut items = vec![
            item("matched", "white", 5.0, "b", 1.0),
            item("matched", "white", -10.0, "a", 2.0),
            item("mismatched", "babble-a", -11.0, "a", 3.0),
            item("matched", "pink", 0.0, "a", 4.0),
        ];
        let a = aggregate_report(&items).unwrap();
        items.reverse();
        assert_eq!(a, aggregate_report(&items).unwrap());
        let snrs: Vec<String> = a
            .rows
            .iter()
            .filter(|r| r.noise_kind == "white" && r.system == "a")
            .map(|r| r.snr.to_string())
            .collect();
        assert_eq!(snrs, ["-10", "avg"]);
    }

    #[test]
    fn csv_round_trip() {
        let items = [
            item("matched", "white", -5.0, "noisy", 0.1 + 0.2),
            item("matched", "white", 10.0, "noisy", 1.0 / 3.0),
        ];
        let r = aggregate_report(&items).unwrap();
        let text = r.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(MetricReport::from_csv(&text).unwrap(), r);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(aggregate_report(&[]).is_err());
    }
}
