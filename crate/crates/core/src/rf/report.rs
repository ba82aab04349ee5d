//! Tabular RF/SR/parameter report over several graphs.

use super::{enumerate_samples, longest_path_side, rf_sr_aspp, AnalysisError, RfSrResult};
use crate::model::{count_graph_params, CountPolicy};
use crate::netspec::{Builtin, ChannelProfile, GraphSpec, ASPP_RATES};
use serde::Serialize;
use std::fmt::Write;

/// Values printed in the published comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Published {
    pub rf_side: u64,
    pub sr: f64,
    pub params_millions: f64,
}

impl Published {
    pub fn for_builtin(b: Builtin) -> Option<Published> {
        let p = |rf_side, sr, params_millions| Published {
            rf_side,
            sr,
            params_millions,
        };
        match b {
            Builtin::Aspp => Some(p(73, 0.006, 18.9)),
            Builtin::DenseAspp => Some(p(147, 0.070, 25.6)),
            Builtin::SupernetUntuned => Some(p(219, 0.125, 6.29)),
            Builtin::GpsUntuned => Some(p(219, 0.125, 6.3)),
            Builtin::GpsTuned => Some(p(199, 0.843, 6.3)),
            Builtin::SupernetTuned => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportInput {
    pub method: String,
    pub dilations: String,
    pub graph: GraphSpec,
    pub params: Option<u64>,
    /// Closed-form result for graphs that have one.
    pub closed_form: Option<RfSrResult>,
    pub published: Option<Published>,
}

impl ReportInput {
    /// A builtin at reference widths, with weights-only parameter count.
    pub fn builtin(b: Builtin) -> Result<ReportInput, AnalysisError> {
        let graph = b
            .build(ChannelProfile::Reference)
            .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
        let params = count_graph_params(&graph, CountPolicy::WEIGHTS_ONLY)
            .map_err(|e| AnalysisError::Invalid(e.to_string()))?
            .total;
        let closed_form = match b {
            Builtin::Aspp => Some(rf_sr_aspp(3, &ASPP_RATES)?),
            _ => None,
        };
        Ok(ReportInput {
            method: b.name().to_string(),
            dilations: b.dilation_setting(),
            graph,
            params: Some(params),
            closed_form,
            published: Published::for_builtin(b),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedFormDelta {
    /// Enumerated side minus longest-path side.
    pub rf_side: i64,
    /// Enumerated count minus closed-form count, where one exists.
    pub sample_count: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedDelta {
    pub rf_side: u64,
    pub sr: f64,
    pub params_millions: f64,
    /// Ours minus published.
    pub rf_side_delta: i64,
    pub sr_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub dilations: String,
    pub rf_side: u64,
    pub rf_area: u64,
    pub sample_count: u64,
    pub sr: f64,
    pub params: Option<u64>,
    pub closed_form_delta: ClosedFormDelta,
    /// Sample count at the exit alone, next to the per-branch union count.
    pub exit_sample_count: u64,
    pub published: Option<PublishedDelta>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub rows: Vec<ReportRow>,
}

pub fn analysis_report(inputs: &[ReportInput]) -> Result<AnalysisReport, AnalysisError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let e = enumerate_samples(&input.graph)?;
        let side = if e.branches.is_empty() {
            e.exit_union.rf_side()
        } else {
            e.branches.values().map(|s| s.rf_side()).max().unwrap_or(0)
        };
        let enumerated = RfSrResult::new(input.method.clone(), side, e.branch_union().len() as u64);
        let closed_side = longest_path_side(&input.graph)?;
        let closed_form_delta = ClosedFormDelta {
            rf_side: enumerated.rf_side as i64 - closed_side as i64,
            sample_count: input
                .closed_form
                .as_ref()
                .map(|c| enumerated.sample_count as i64 - c.sample_count as i64),
        };
        let published = input.published.map(|p| PublishedDelta {
            rf_side: p.rf_side,
            sr: p.sr,
            params_millions: p.params_millions,
            rf_side_delta: enumerated.rf_side as i64 - p.rf_side as i64,
            sr_delta: enumerated.sr - p.sr,
        });
        rows.push(ReportRow {
            method: input.method.clone(),
            dilations: input.dilations.clone(),
            rf_side: enumerated.rf_side,
            rf_area: enumerated.rf_area,
            sample_count: enumerated.sample_count,
            sr: enumerated.sr,
            params: input.params,
            closed_form_delta,
            exit_sample_count: e.exit_union.len() as u64,
            published,
        });
    }
    Ok(AnalysisReport { rows })
}

/// The five rows of the published comparison.
pub fn reference_report() -> Result<AnalysisReport, AnalysisError> {
    let inputs = [
        Builtin::Aspp,
        Builtin::DenseAspp,
        Builtin::SupernetUntuned,
        Builtin::GpsUntuned,
        Builtin::GpsTuned,
    ]
    .into_iter()
    .map(ReportInput::builtin)
    .collect::<Result<Vec<_>, _>>()?;
    analysis_report(&inputs)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let header = [
            "method", "dilations", "rf", "rf_area", "samples", "sr", "params", "d_rf_cf", "d_n_cf", "exit_n",
            "pub_rf", "pub_sr", "pub_params", "d_rf_pub", "d_sr_pub",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let p = r.published.as_ref();
            table.push(vec![
                r.method.clone(),
                r.dilations.clone(),
                r.rf_side.to_string(),
                r.rf_area.to_string(),
                r.sample_count.to_string(),
                format!("{:.5}", r.sr),
                opt(r.params),
                r.closed_form_delta.rf_side.to_string(),
                opt(r.closed_form_delta.sample_count),
                r.exit_sample_count.to_string(),
                opt(p.map(|p| p.rf_side)),
                opt(p.map(|p| format!("{:.3}", p.sr))),
                opt(p.map(|p| format!("{}M", p.params_millions))),
                opt(p.map(|p| format!("{:+}", p.rf_side_delta))),
                opt(p.map(|p| format!("{:+.5}", p.sr_delta))),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
        }
        if !self.rows.is_empty() {
            out.push_str(
                "\nrf: side of the enclosing square; sr = samples / rf_area; params: conv weights only.\n\
                 d_rf_cf / d_n_cf: enumerated minus closed form (longest path side; closed-form count where one exists).\n\
                 exit_n: samples at the exit alone; samples: union over branch sets.\n\
                 The deformable-conv formula uses (max - min) spans without +1; it is not part of this table.\n",
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report() {
        let r = analysis_report(&[]).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.to_text().lines().count(), 1);
    }

    #[test]
    fn reference_rows() {
        let r = reference_report().unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["aspp", "denseaspp", "supernet-untuned", "gps-untuned", "gps-tuned"]);
        let aspp = &r.rows[0];
        assert_eq!((aspp.rf_side, aspp.sample_count, aspp.params), (73, 33, Some(18_874_368)));
        assert_eq!(aspp.closed_form_delta.sample_count, Some(0));
        let tuned = &r.rows[4];
        let p = tuned.published.as_ref().unwrap();
        assert_eq!((p.rf_side, p.sr), (199, 0.843));
        assert_eq!(p.rf_side_delta, tuned.rf_side as i64 - 199);
        for row in &r.rows {
            assert_eq!(row.closed_form_delta.rf_side, 0);
        }
        let text = r.to_text();
        assert!(text.contains("gps-tuned"));
        assert!(text.contains("{(1,3),(11,13),(23,29),(33,37)}"));
    }

    #[test]
    fn deterministic_bytes() {
        let a = reference_report().unwrap();
        let b = reference_report().unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.to_json(), b.to_json());
    }
}
