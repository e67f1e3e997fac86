//! Overlap and confusion metrics per tumor region, and dataset reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask, RegionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// Both masks were empty; the overlap score is defined as 1.
    BothEmpty,
    /// A confusion ratio had a zero denominator and is reported as 0.
    DivisionByZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, truth: &Mask) -> Result<Self> {
        same_dims(pred, truth)?;
        let mut c = Self::default();
        for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("mask dims {:?} and {:?} differ", a.dims, b.dims)));
    }
    Ok(())
}

/// A metric value with the flag that qualified it, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub flag: Option<MetricFlag>,
}

impl Score {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score {
            value: 0.0,
            flag: Some(MetricFlag::DivisionByZero),
        }
    } else {
        Score::plain(num as f64 / den as f64)
    }
}

fn overlap(pred: &Mask, truth: &Mask) -> Result<(u64, u64, u64)> {
    same_dims(pred, truth)?;
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        inter += u64::from(p && t);
        a += u64::from(p);
        b += u64::from(t);
    }
    Ok((inter, a, b))
}

const BOTH_EMPTY: Score = Score {
    value: 1.0,
    flag: Some(MetricFlag::BothEmpty),
};

/// Dice similarity `2|A∩B| / (|A| + |B|)`.
pub fn dsc(pred: &Mask, truth: &Mask) -> Result<Score> {
    let (i, a, b) = overlap(pred, truth)?;
    Ok(if a + b == 0 {
        BOTH_EMPTY
    } else {
        Score::plain(2.0 * i as f64 / (a + b) as f64)
    })
}

/// Jaccard index `|A∩B| / |A∪B|`.
pub fn jcs(pred: &Mask, truth: &Mask) -> Result<Score> {
    let (i, a, b) = overlap(pred, truth)?;
    Ok(if a + b == 0 {
        BOTH_EMPTY
    } else {
        Score::plain(i as f64 / (a + b - i) as f64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: Score,
    pub prec: Score,
    pub sen: Score,
    pub spe: Score,
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    ClassificationMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        prec: ratio(c.tp, c.tp + c.fp),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: RegionId,
    pub counts: ConfusionCounts,
    pub dsc: Score,
    pub jcs: Score,
    pub acc: Score,
    pub prec: Score,
    pub sen: Score,
    pub spe: Score,
}

impl RegionMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.dsc, self.jcs, self.acc, self.prec, self.sen, self.spe].map(|s| s.value)
    }

    pub fn flags(&self) -> Vec<(&'static str, MetricFlag)> {
        METRIC_NAMES
            .iter()
            .zip([self.dsc, self.jcs, self.acc, self.prec, self.sen, self.spe])
            .filter_map(|(&n, s)| s.flag.map(|f| (n, f)))
            .collect()
    }
}

pub const METRIC_NAMES: [&str; 6] = ["dsc", "jcs", "acc", "prec", "sen", "spe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub regions: Vec<RegionMetrics>,
    /// Mean over the three regions, in [`METRIC_NAMES`] order.
    pub mean: [f64; 6],
}

pub fn region_metrics(region: RegionId, pred: &LabelVolume, truth: &LabelVolume) -> Result<RegionMetrics> {
    let (p, t) = (pred.region_mask(region), truth.region_mask(region));
    let counts = ConfusionCounts::from_masks(&p, &t)?;
    let cm = classification_metrics(&counts);
    Ok(RegionMetrics {
        region,
        counts,
        dsc: dsc(&p, &t)?,
        jcs: jcs(&p, &t)?,
        acc: cm.acc,
        prec: cm.prec,
        sen: cm.sen,
        spe: cm.spe,
    })
}

pub fn evaluate_case(case_id: &str, pred: &LabelVolume, truth: &LabelVolume) -> Result<CaseScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.dims(),
            truth.dims()
        ))
        .in_case(case_id));
    }
    let regions = RegionId::ALL
        .iter()
        .map(|&r| region_metrics(r, pred, truth))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = [0.0; 6];
    for r in &regions {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / regions.len() as f64;
        }
    }
    Ok(CaseScores {
        case_id: case_id.to_string(),
        regions,
        mean,
    })
}

/// One row of a dataset report: metric means over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub modality: String,
    /// A region name, or `m_t` for the mean over regions.
    pub region: String,
    pub cases: usize,
    pub dsc: f64,
    pub jcs: f64,
    pub acc: f64,
    pub prec: f64,
    pub sen: f64,
    pub spe: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub cases: Vec<CaseScores>,
}

fn row(dataset: &str, modality: &str, region: &str, cases: usize, v: [f64; 6], flagged: usize) -> ReportRow {
    ReportRow {
        dataset: dataset.into(),
        modality: modality.into(),
        region: region.into(),
        cases,
        dsc: v[0],
        jcs: v[1],
        acc: v[2],
        prec: v[3],
        sen: v[4],
        spe: v[5],
        flagged,
    }
}

/// Aggregates per-case scores grouped by modality. Each modality gets one
/// row per region plus an `m_t` row; with more than one modality, `m_m`
/// rows average the modalities.
pub fn build_report(dataset: &str, by_modality: &[(String, Vec<CaseScores>)]) -> Result<Report> {
    let mut rows = Vec::new();
    let mut per_region: BTreeMap<String, Vec<[f64; 6]>> = BTreeMap::new();
    let mut all_cases = Vec::new();
    for (modality, cases) in by_modality {
        if cases.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = cases.len();
        for (k, region) in RegionId::ALL.iter().enumerate() {
            let mut v = [0.0; 6];
            let mut flagged = 0;
            for c in cases {
                let r = &c.regions[k];
                debug_assert_eq!(r.region, *region);
                for (a, b) in v.iter_mut().zip(r.values()) {
                    *a += b / n as f64;
                }
                flagged += usize::from(!r.flags().is_empty());
            }
            per_region.entry(region.name().into()).or_default().push(v);
            rows.push(row(dataset, modality, region.name(), n, v, flagged));
        }
        let mut mt = [0.0; 6];
        for c in cases {
            for (a, b) in mt.iter_mut().zip(c.mean) {
                *a += b / n as f64;
            }
        }
        per_region.entry("m_t".into()).or_default().push(mt);
        rows.push(row(dataset, modality, "m_t", n, mt, 0));
        all_cases.extend(cases.iter().cloned());
    }
    if by_modality.len() > 1 {
        for region in RegionId::ALL.iter().map(|r| r.name()).chain(["m_t"]) {
            let vs = &per_region[region];
            let mut mm = [0.0; 6];
            for v in vs {
                for (a, b) in mm.iter_mut().zip(v) {
                    *a += b / vs.len() as f64;
                }
            }
            rows.push(row(dataset, "m_m", region, by_modality[0].1.len(), mm, 0));
        }
    }
    Ok(Report { rows, cases: all_cases })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,modality,region,cases,dsc,jcs,acc,prec,sen,spe,flagged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.dataset, r.modality, r.region, r.cases, r.dsc, r.jcs, r.acc, r.prec, r.sen, r.spe, r.flagged
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[bool]) -> Mask {
        Mask {
            dims: [1, 1, bits.len()],
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn half_overlap() {
        let a = mask(&[true, true, true, true, false, false]);
        let b = mask(&[false, false, true, true, true, true]);
        assert_eq!(dsc(&a, &b).unwrap().value, 0.5);
        assert!((jcs(&a, &b).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        let c = mask(&[false, false, false, false, true, true]);
        assert_eq!(dsc(&a, &c).unwrap().value, 0.0);
        assert_eq!(dsc(&a, &a).unwrap().value, 1.0);
    }

    #[test]
    fn both_empty_is_flagged_one() {
        let e = mask(&[false; 4]);
        assert_eq!(dsc(&e, &e).unwrap(), BOTH_EMPTY);
        assert_eq!(jcs(&e, &e).unwrap(), BOTH_EMPTY);
        assert!(dsc(&e, &mask(&[false; 3])).is_err());
    }

    #[test]
    fn confusion_hand_case() {
        let c = ConfusionCounts { tp: 3, fp: 1, tn: 5, fn_: 1 };
        let m = classification_metrics(&c);
        assert!((m.acc.value - 0.8).abs() < 1e-12);
        assert!((m.prec.value - 0.75).abs() < 1e-12);
        assert!((m.sen.value - 0.75).abs() < 1e-12);
        assert!((m.spe.value - 5.0 / 6.0).abs() < 1e-12);
        let d = classification_metrics(&ConfusionCounts { tp: 2, fp: 0, tn: 0, fn_: 1 });
        assert_eq!(d.spe, Score { value: 0.0, flag: Some(MetricFlag::DivisionByZero) });
    }

    #[test]
    fn perfect_case_scores_one() {
        let mut labels = vec![0u8; 27];
        labels[4] = 2;
        labels[13] = 4;
        labels[14] = 1;
        let v = LabelVolume::new([3, 3, 3], [1.0; 3], labels).unwrap();
        let s = evaluate_case("c", &v, &v).unwrap();
        assert!(s.mean.iter().all(|&x| x == 1.0));
        assert!(s.regions.iter().all(|r| r.flags().is_empty()));
    }

    #[test]
    fn report_groups_and_averages() {
        let t = LabelVolume::new([1, 1, 4], [1.0; 3], vec![0, 2, 4, 1]).unwrap();
        let p = LabelVolume::new([1, 1, 4], [1.0; 3], vec![0, 2, 2, 1]).unwrap();
        let a = evaluate_case("a", &t, &t).unwrap();
        let b = evaluate_case("b", &p, &t).unwrap();
        let rep = build_report("d", &[("all".into(), vec![a, b])]).unwrap();
        assert_eq!(rep.rows.len(), 4);
        let et = rep.rows.iter().find(|r| r.region == "ET").unwrap();
        assert_eq!(et.dsc, 0.5);
        assert_eq!(et.flagged, 1);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 5);
        let two = build_report("d", &[("x".into(), rep.cases.clone()), ("y".into(), rep.cases.clone())]).unwrap();
        assert_eq!(two.rows.iter().filter(|r| r.modality == "m_m").count(), 4);
    }

    proptest! {
        #[test]
        fn overlap_identities(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let (ma, mb) = (mask(&a), mask(&b));
            let d = dsc(&ma, &mb).unwrap().value;
            let j = jcs(&ma, &mb).unwrap().value;
            prop_assert_eq!(d, dsc(&mb, &ma).unwrap().value);
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
            prop_assert!(j <= d + 1e-15);
            let c = ConfusionCounts::from_masks(&ma, &mb).unwrap();
            prop_assert_eq!(c.total() as usize, a.len());
        }
    }
}
