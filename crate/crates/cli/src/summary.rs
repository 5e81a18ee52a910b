//! Per-stratum group sizes and covariate balance, before and after
//! propensity weighting.

use serde::Serialize;

use strata_u::data::{split_groups, HFunction, Stratum};
use strata_u::propensity::{prepare_stratum, TrimPolicy};
use strata_u::report::{fmt17, serialize_f64, serialize_opt_f64};

#[derive(Debug, Serialize)]
pub struct MeanSd {
    #[serde(serialize_with = "serialize_f64")]
    pub mean: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub sd: f64,
}

#[derive(Debug, Serialize)]
pub struct CovariateRow {
    pub covariate: String,
    pub treated: MeanSd,
    pub control: MeanSd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_treated: Option<MeanSd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted_control: Option<MeanSd>,
}

#[derive(Debug, Serialize)]
pub struct StratumSummary {
    pub stratum: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub trimmed: usize,
    #[serde(serialize_with = "serialize_opt_f64")]
    pub outcome_mean_treated: Option<f64>,
    #[serde(serialize_with = "serialize_opt_f64")]
    pub outcome_mean_control: Option<f64>,
    pub covariates: Vec<CovariateRow>,
    /// Why the weighted columns are missing, if they are.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighting_error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct DatasetSummary {
    pub num_strata: usize,
    pub total_n: usize,
    pub h: HFunction,
    pub trim: TrimPolicy,
    pub strata: Vec<StratumSummary>,
    pub notes: Vec<String>,
}

fn mean_sd(x: &[f64], w: Option<&[f64]>) -> MeanSd {
    let ones = vec![1.0; x.len()];
    let w = w.unwrap_or(&ones);
    let total: f64 = w.iter().sum();
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let var = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / total;
    MeanSd { mean, sd: var.sqrt() }
}

fn summarise_stratum(s: &Stratum, names: &[String], h: HFunction, trim: TrimPolicy) -> StratumSummary {
    let groups = split_groups(s);
    let x = s.covariates();
    let column = |idx: &[usize], j: usize| idx.iter().map(|&i| x[(i, j + 1)]).collect::<Vec<f64>>();
    let weighted = prepare_stratum(s, h, trim);
    let mut rows: Vec<CovariateRow> = names
        .iter()
        .enumerate()
        .map(|(j, name)| CovariateRow {
            covariate: name.clone(),
            treated: mean_sd(&column(&groups.treated, j), None),
            control: mean_sd(&column(&groups.control, j), None),
            weighted_treated: None,
            weighted_control: None,
        })
        .collect();
    let mut trimmed = 0;
    let mut weighting_error = None;
    match &weighted {
        Ok(ws) => {
            trimmed = ws.trim.as_ref().map_or(0, |t| t.removed());
            let wx = ws.stratum.covariates();
            let wcol = |idx: &[usize], j: usize| idx.iter().map(|&i| wx[(i, j + 1)]).collect::<Vec<f64>>();
            for (j, row) in rows.iter_mut().enumerate() {
                row.weighted_treated = Some(mean_sd(&wcol(&ws.groups.treated, j), Some(&ws.weights.treated)));
                row.weighted_control = Some(mean_sd(&wcol(&ws.groups.control, j), Some(&ws.weights.control)));
            }
        }
        Err(e) => weighting_error = Some(e.to_string()),
    }
    let y = s.outcomes();
    let ymean = |idx: &[usize]| Some(idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64);
    StratumSummary {
        stratum: s.id().to_string(),
        n_treated: groups.treated.len(),
        n_control: groups.control.len(),
        trimmed,
        outcome_mean_treated: ymean(&groups.treated),
        outcome_mean_control: ymean(&groups.control),
        covariates: rows,
        weighting_error,
    }
}

pub fn summarise(strata: &[Stratum], names: &[String], h: HFunction, trim: TrimPolicy) -> DatasetSummary {
    let mut notes = Vec::new();
    if strata.len() < 2 {
        notes.push("S >= 2 required for testing".to_string());
    }
    DatasetSummary {
        num_strata: strata.len(),
        total_n: strata.iter().map(Stratum::len).sum(),
        h,
        trim,
        strata: strata.iter().map(|s| summarise_stratum(s, names, h, trim)).collect(),
        notes,
    }
}

fn cell(m: &Option<MeanSd>) -> String {
    m.as_ref().map_or("-".into(), |v| format!("{:.3} ({:.3})", v.mean, v.sd))
}

impl DatasetSummary {
    pub fn human(&self) -> String {
        let mut s = format!("strata: {}  subjects: {}  h: {}  trim: {}\n", self.num_strata, self.total_n, self.h, self.trim.name());
        for st in &self.strata {
            s.push_str(&format!(
                "\n[{}] treated {}  control {}  trimmed {}\n",
                st.stratum, st.n_treated, st.n_control, st.trimmed
            ));
            s.push_str("  covariate        treated          control          w.treated        w.control\n");
            for r in &st.covariates {
                s.push_str(&format!(
                    "  {:<16} {:<16} {:<16} {:<16} {:<16}\n",
                    r.covariate,
                    format!("{:.3} ({:.3})", r.treated.mean, r.treated.sd),
                    format!("{:.3} ({:.3})", r.control.mean, r.control.sd),
                    cell(&r.weighted_treated),
                    cell(&r.weighted_control),
                ));
            }
            if let Some(e) = &st.weighting_error {
                s.push_str(&format!("  weighting unavailable: {e}\n"));
            }
        }
        for n in &self.notes {
            s.push_str(&format!("\nnote: {n}\n"));
        }
        s
    }

    pub fn tsv(&self) -> String {
        let mut s = String::from(
            "stratum\tcovariate\tn_treated\tn_control\tmean_treated\tsd_treated\tmean_control\tsd_control\twmean_treated\twsd_treated\twmean_control\twsd_control\n",
        );
        let opt = |m: &Option<MeanSd>| match m {
            Some(v) => format!("{}\t{}", fmt17(v.mean), fmt17(v.sd)),
            None => "null\tnull".into(),
        };
        for st in &self.strata {
            for r in &st.covariates {
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    st.stratum,
                    r.covariate,
                    st.n_treated,
                    st.n_control,
                    fmt17(r.treated.mean),
                    fmt17(r.treated.sd),
                    fmt17(r.control.mean),
                    fmt17(r.control.sd),
                    opt(&r.weighted_treated),
                    opt(&r.weighted_control),
                ));
            }
        }
        s
    }
}
