//! Comparison tables: rows keyed by (dataset, modality, method) with
//! Dice, IoU and HD95 summaries, rendered as CSV and Markdown.
//!
//! The Markdown layout has one table per dataset, methods as rows and a
//! Dice ↑ / IoU ↑ / HD95 ↓ column triple per modality. In every column the
//! best mean is bolded: highest for Dice and IoU, lowest for HD95. Ties are
//! all bolded and failed rows never are.

use cfdcam_core::SummaryStat;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cells {
    pub dice: SummaryStat,
    pub iou: SummaryStat,
    pub hd95: SummaryStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub modality: String,
    pub method: String,
    /// `Err` holds the failure message of a method that could not run.
    pub result: std::result::Result<Cells, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Iou,
    Hd95,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Iou, Metric::Hd95];

    pub fn header(self) -> &'static str {
        match self {
            Metric::Dice => "Dice ↑",
            Metric::Iou => "IoU ↑",
            Metric::Hd95 => "HD95 ↓",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Hd95
    }

    pub fn of(self, c: &Cells) -> &SummaryStat {
        match self {
            Metric::Dice => &c.dice,
            Metric::Iou => &c.iou,
            Metric::Hd95 => &c.hd95,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkReport {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "dataset",
    "modality",
    "method",
    "n",
    "dice",
    "iou",
    "hd95",
    "dice_mean",
    "dice_std",
    "iou_mean",
    "iou_std",
    "hd95_mean",
    "hd95_std",
    "status",
    "error",
];

impl BenchmarkReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; a second row for the same key is an error.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if self
            .rows
            .iter()
            .any(|r| r.dataset == row.dataset && r.modality == row.modality && r.method == row.method)
        {
            return Err(Error::Config(format!(
                "duplicate report row ({}, {}, {})",
                row.dataset, row.modality, row.method
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, dataset: &str, modality: &str, method: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.modality == modality && r.method == method)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.result.is_err())
    }

    fn ensure_non_empty(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("cannot render an empty report".into()));
        }
        Ok(())
    }

    pub fn render_csv(&self) -> Result<String> {
        self.ensure_non_empty()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.dataset.clone(), r.modality.clone(), r.method.clone()];
            match &r.result {
                Ok(c) => {
                    rec.push(c.dice.count.to_string());
                    rec.extend(Metric::ALL.iter().map(|m| m.of(c).render()));
                    for m in Metric::ALL {
                        rec.push(m.of(c).mean.to_string());
                        rec.push(m.of(c).std.to_string());
                    }
                    rec.push("ok".into());
                    rec.push(String::new());
                }
                Err(msg) => {
                    rec.push(String::new());
                    rec.extend(std::iter::repeat_n("failed".to_string(), 3));
                    rec.extend(std::iter::repeat_n(String::new(), 6));
                    rec.push("failed".into());
                    rec.push(msg.clone());
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Inverse of [`render_csv`](Self::render_csv); the title is not stored
    /// in the CSV.
    pub fn parse_csv(title: &str, text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("report CSV: {m}"));
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
            return Err(bad(format!("unexpected header {headers:?}")));
        }
        let mut report = Self::new(title);
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", CSV_COLUMNS[i])));
            let result = match &rec[13] {
                "ok" => {
                    let count = rec[3].parse::<usize>().map_err(|e| bad(e.to_string()))?;
                    let stat = |i: usize| -> Result<SummaryStat> {
                        Ok(SummaryStat {
                            mean: num(i)?,
                            std: num(i + 1)?,
                            count,
                        })
                    };
                    Ok(Cells {
                        dice: stat(7)?,
                        iou: stat(9)?,
                        hd95: stat(11)?,
                    })
                }
                "failed" => Err(rec[14].to_string()),
                other => return Err(bad(format!("unknown status `{other}`"))),
            };
            report.push(ReportRow {
                dataset: rec[0].into(),
                modality: rec[1].into(),
                method: rec[2].into(),
                result,
            })?;
        }
        Ok(report)
    }

    /// Rows that hold the best mean of `metric` among the successful rows
    /// of `(dataset, modality)`.
    pub fn best_rows(&self, dataset: &str, modality: &str, metric: Metric) -> Vec<usize> {
        let group: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.dataset == dataset && r.modality == modality)
            .filter_map(|(i, r)| r.result.as_ref().ok().map(|c| (i, metric.of(c).mean)))
            .collect();
        let best = group.iter().map(|&(_, v)| v).fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(a) if metric.higher_is_better() => a.max(v),
                Some(a) => a.min(v),
            })
        });
        group
            .into_iter()
            .filter(|&(_, v)| Some(v) == best)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn render_markdown(&self) -> Result<String> {
        self.ensure_non_empty()?;
        let mut datasets: Vec<&str> = Vec::new();
        let mut modalities: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            for (list, v) in [
                (&mut datasets, &r.dataset),
                (&mut modalities, &r.modality),
                (&mut methods, &r.method),
            ] {
                if !list.contains(&v.as_str()) {
                    list.push(v);
                }
            }
        }
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&format!("### {}\n\n", self.title));
        }
        for (di, &dataset) in datasets.iter().enumerate() {
            if di > 0 {
                out.push('\n');
            }
            let mods: Vec<&str> = modalities
                .iter()
                .copied()
                .filter(|m| self.rows.iter().any(|r| r.dataset == dataset && r.modality == *m))
                .collect();
            let best: Vec<Vec<Vec<usize>>> = mods
                .iter()
                .map(|m| Metric::ALL.iter().map(|&k| self.best_rows(dataset, m, k)).collect())
                .collect();
            out.push_str(&format!("**{dataset}**\n\n| Method |"));
            for m in &mods {
                for k in Metric::ALL {
                    out.push_str(&format!(" {m} {} |", k.header()));
                }
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(mods.len() * 3));
            out.push('\n');
            for &method in &methods {
                if !self.rows.iter().any(|r| r.dataset == dataset && r.method == method) {
                    continue;
                }
                out.push_str(&format!("| {method} |"));
                for (mi, m) in mods.iter().enumerate() {
                    let idx = self
                        .rows
                        .iter()
                        .position(|r| r.dataset == dataset && r.modality == *m && r.method == method);
                    for (ki, k) in Metric::ALL.iter().enumerate() {
                        let cell = match idx.map(|i| (i, &self.rows[i].result)) {
                            None => "–".to_string(),
                            Some((_, Err(_))) => "failed".to_string(),
                            Some((i, Ok(c))) => {
                                let s = k.of(c).render();
                                if best[mi][ki].contains(&i) {
                                    format!("**{s}**")
                                } else {
                                    s
                                }
                            }
                        };
                        out.push_str(&format!(" {cell} |"));
                    }
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(mean: f64, std: f64) -> SummaryStat {
        SummaryStat { mean, std, count: 4 }
    }

    fn row(method: &str, dice: f64, hd: f64) -> ReportRow {
        ReportRow {
            dataset: "synthetic".into(),
            modality: "T2-FLAIR".into(),
            method: method.into(),
            result: Ok(Cells {
                dice: stat(dice, 0.1),
                iou: stat(dice / (2.0 - dice), 0.1),
                hd95: stat(hd, 1.0),
            }),
        }
    }

    #[test]
    fn single_row_renders_header_and_one_row() {
        let mut r = BenchmarkReport::new("");
        r.push(row("Grad-CAM", 0.5, 3.0)).unwrap();
        let csv = r.render_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        let md = r.render_markdown().unwrap();
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 2);
        assert!(md.contains("**0.500±0.100**"));
    }

    #[test]
    fn empty_and_duplicate() {
        let mut r = BenchmarkReport::new("t");
        assert!(r.render_csv().is_err());
        assert!(r.render_markdown().is_err());
        r.push(row("A", 0.5, 1.0)).unwrap();
        assert!(r.push(row("A", 0.6, 1.0)).is_err());
    }

    #[test]
    fn best_marks_follow_direction() {
        let mut r = BenchmarkReport::new("t");
        r.push(row("A", 0.4, 2.0)).unwrap();
        r.push(row("B", 0.7, 5.0)).unwrap();
        assert_eq!(r.best_rows("synthetic", "T2-FLAIR", Metric::Dice), vec![1]);
        assert_eq!(r.best_rows("synthetic", "T2-FLAIR", Metric::Hd95), vec![0]);
        let md = r.render_markdown().unwrap();
        assert!(md.contains("| B | **0.700±0.100** |"));
        assert!(md.contains("**2.000±1.000**"));
    }

    #[test]
    fn failed_rows_render_and_round_trip() {
        let mut r = BenchmarkReport::new("t");
        r.push(row("A", 0.123456789, 2.5)).unwrap();
        r.push(ReportRow {
            result: Err("boom, with a comma".into()),
            ..row("B", 0.0, 0.0)
        })
        .unwrap();
        let md = r.render_markdown().unwrap();
        assert!(md.contains("| B | failed | failed | failed |"));
        let back = BenchmarkReport::parse_csv("t", &r.render_csv().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
