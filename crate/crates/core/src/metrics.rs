//! Voxel and lesion level segmentation metrics.
//!
//! Degenerate cases follow fixed conventions: Dice and Jaccard of two empty
//! masks are 1, PPV with an empty prediction and TPR/LTPR with an empty ground
//! truth are undefined (`None`), and LFPR with an empty prediction is 0.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::volume::{write_json, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    pred.dims().check_same(&gt.dims())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

pub fn ppv(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fp;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

pub fn tpr(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// Voxel neighborhood used to connect lesion voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Shared faces.
    Six,
    /// Shared faces or edges.
    Eighteen,
    /// Shared faces, edges or corners.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidSpec(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets `(dx, dy, dz)`.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut v = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// Component label per voxel (0 for background, then `1..=count` in order of
/// first appearance in an x-fastest scan).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub count: usize,
    /// Voxel indices of each component, ascending; `components[k]` has label `k + 1`.
    pub components: Vec<Vec<usize>>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub(crate) fn neighbor(dims: Dims, i: usize, d: [isize; 3]) -> Option<usize> {
    let [x, y, z] = dims.coords(i);
    let nx = x as isize + d[0];
    let ny = y as isize + d[1];
    let nz = z as isize + d[2];
    if nx < 0
        || ny < 0
        || nz < 0
        || nx >= dims.nx as isize
        || ny >= dims.ny as isize
        || nz >= dims.nz as isize
    {
        return None;
    }
    Some(dims.index(nx as usize, ny as usize, nz as usize))
}

/// Two-pass union-find labeling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let dims = mask.dims();
    let values = mask.values();
    // neighbors that precede the current voxel in scan order
    let back: Vec<[isize; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|d| (d[2], d[1], d[0]) < (0, 0, 0))
        .collect();
    let mut parent: Vec<usize> = (0..values.len()).collect();
    for i in 0..values.len() {
        if values[i] == 0 {
            continue;
        }
        for &d in &back {
            if let Some(j) = neighbor(dims, i, d) {
                if values[j] == 1 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; values.len()];
    let mut root_label = vec![0u32; values.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..values.len() {
        if values[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] == 0 {
            components.push(Vec::new());
            root_label[r] = components.len() as u32;
        }
        let l = root_label[r];
        labels[i] = l;
        components[l as usize - 1].push(i);
    }
    ComponentLabeling {
        dims,
        labels,
        count: components.len(),
        components,
    }
}

/// When a lesion counts as detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionCriteria {
    pub connectivity: Connectivity,
    /// Minimum fraction of a component's voxels that must overlap; 0 means any
    /// single overlapping voxel suffices.
    pub min_overlap_fraction: f64,
    /// Components smaller than this are ignored.
    pub min_lesion_voxels: usize,
}

impl Default for LesionCriteria {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::TwentySix,
            min_overlap_fraction: 0.0,
            min_lesion_voxels: 1,
        }
    }
}

impl LesionCriteria {
    pub fn with_connectivity(connectivity: Connectivity) -> Self {
        Self {
            connectivity,
            ..Default::default()
        }
    }

    fn hits(&self, component: &[usize], other: &BinaryMask) -> bool {
        let overlap = component.iter().filter(|&&i| other.values()[i] == 1).count();
        overlap >= 1 && overlap as f64 >= self.min_overlap_fraction * component.len() as f64
    }

    /// Returns `(hit, considered)` component counts of `mask` against `other`.
    fn count_hits(&self, mask: &BinaryMask, other: &BinaryMask) -> (usize, usize) {
        let cc = connected_components(mask, self.connectivity);
        let kept: Vec<_> = cc
            .components
            .iter()
            .filter(|c| c.len() >= self.min_lesion_voxels)
            .collect();
        let hit = kept.iter().filter(|c| self.hits(c, other)).count();
        (hit, kept.len())
    }
}

/// Fraction of ground-truth lesions touched by the prediction.
pub fn ltpr(pred: &BinaryMask, gt: &BinaryMask, criteria: &LesionCriteria) -> Result<Option<f64>> {
    pred.dims().check_same(&gt.dims())?;
    let (hit, total) = criteria.count_hits(gt, pred);
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Fraction of predicted lesions that touch no ground-truth lesion.
pub fn lfpr(pred: &BinaryMask, gt: &BinaryMask, criteria: &LesionCriteria) -> Result<f64> {
    pred.dims().check_same(&gt.dims())?;
    let (hit, total) = criteria.count_hits(pred, gt);
    Ok(if total == 0 {
        0.0
    } else {
        (total - hit) as f64 / total as f64
    })
}

/// The six reported metrics; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub lfpr: Option<f64>,
    pub ltpr: Option<f64>,
}

impl MetricSet {
    pub const COLUMNS: [&'static str; 6] = ["DSC", "Jaccard", "PPV", "TPR", "LFPR", "LTPR"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.dsc, self.jaccard, self.ppv, self.tpr, self.lfpr, self.ltpr]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        Self {
            dsc: v[0],
            jaccard: v[1],
            ppv: v[2],
            tpr: v[3],
            lfpr: v[4],
            ltpr: v[5],
        }
    }

    /// Column-wise mean over the sets where each value is defined.
    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        let cols: Vec<[Option<f64>; 6]> = sets.iter().map(|s| s.values()).collect();
        MetricSet::from_values(std::array::from_fn(|k| {
            let defined: Vec<f64> = cols.iter().filter_map(|c| c[k]).collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        }))
    }
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask, criteria: &LesionCriteria) -> Result<MetricSet> {
    let c = confusion(pred, gt)?;
    Ok(MetricSet {
        dsc: Some(dice(&c)),
        jaccard: Some(jaccard(&c)),
        ppv: ppv(&c),
        tpr: tpr(&c),
        lfpr: Some(lfpr(pred, gt, criteria)?),
        ltpr: ltpr(pred, gt, criteria)?,
    })
}

pub const CONVENTIONS: &str = "dice/jaccard of two empty masks = 1; ppv undefined for empty prediction; \
tpr and ltpr undefined for empty ground truth; lfpr = 0 for empty prediction; \
undefined values are excluded from averages";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rater_a: MetricSet,
    pub rater_b: MetricSet,
    pub average: MetricSet,
}

/// Metrics against each rater separately, plus their arithmetic mean.
pub fn evaluate_two_raters(
    pred: &BinaryMask,
    gt_a: &BinaryMask,
    gt_b: &BinaryMask,
    criteria: &LesionCriteria,
) -> Result<MetricsReport> {
    let rater_a = evaluate(pred, gt_a, criteria)?;
    let rater_b = evaluate(pred, gt_b, criteria)?;
    Ok(MetricsReport {
        rater_a,
        rater_b,
        average: MetricSet::mean(&[rater_a, rater_b]),
    })
}

/// Report for one evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
struct ReportFile<'a> {
    criteria: &'a LesionCriteria,
    conventions: &'a str,
    cases: &'a [CaseReport],
}

pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".into(),
    }
}

/// One row per `(case, rater)` with raters `A`, `B` and `avg`.
pub fn report_csv(cases: &[CaseReport]) -> String {
    let mut out = String::from("case,rater");
    for c in MetricSet::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for c in cases {
        for (rater, set) in [
            ("A", &c.report.rater_a),
            ("B", &c.report.rater_b),
            ("avg", &c.report.average),
        ] {
            let _ = write!(out, "{},{rater}", c.case);
            for v in set.values() {
                let _ = write!(out, ",{}", format_value(v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_reports(
    dir: impl AsRef<Path>,
    cases: &[CaseReport],
    criteria: &LesionCriteria,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("report.json"),
        &ReportFile {
            criteria,
            conventions: CONVENTIONS,
            cases,
        },
    )?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(cases)).map_err(|e| Error::io(&csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> BinaryMask {
        let mut m = BinaryMask::zeros(dims);
        for &[x, y, z] in on {
            m.set(x, y, z, true);
        }
        m
    }

    fn d8() -> Dims {
        Dims::cube(8).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let d = Dims::cube(3).unwrap();
        let m = mask(d, &[[0, 0, 0], [1, 1, 1], [2, 2, 2], [0, 1, 2], [2, 0, 1]]);
        assert_eq!(
            confusion(&m, &m).unwrap(),
            ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 22 }
        );
        let c = confusion(&BinaryMask::zeros(d), &m).unwrap();
        assert_eq!(c.fn_, 5);
        assert_eq!(c.total(), 27);
        assert!(confusion(&m, &BinaryMask::zeros(d8())).is_err());
    }

    #[test]
    fn overlap_metric_examples() {
        let same = ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 10 };
        assert_eq!(
            [dice(&same), jaccard(&same), ppv(&same).unwrap(), tpr(&same).unwrap()],
            [1.0; 4]
        );
        let disjoint = ConfusionCounts { tp: 0, fp: 3, fn_: 2, tn: 10 };
        assert_eq!(
            [dice(&disjoint), jaccard(&disjoint), ppv(&disjoint).unwrap(), tpr(&disjoint).unwrap()],
            [0.0; 4]
        );
        // pred has 4 voxels, gt has 6, 3 shared
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 3, tn: 0 };
        assert!((dice(&c) - 0.6).abs() < 1e-15);
        assert!((jaccard(&c) - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        let empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 };
        assert_eq!(dice(&empty), 1.0);
        assert_eq!(jaccard(&empty), 1.0);
        assert_eq!(ppv(&empty), None);
        assert_eq!(tpr(&empty), None);
        let e = BinaryMask::zeros(d8());
        let crit = LesionCriteria::default();
        assert_eq!(lfpr(&e, &e, &crit).unwrap(), 0.0);
        assert_eq!(ltpr(&e, &e, &crit).unwrap(), None);
    }

    #[test]
    fn neighborhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert!(Connectivity::try_from(8).is_err());
    }

    #[test]
    fn face_and_corner_neighbors() {
        let face = mask(d8(), &[[2, 2, 2], [3, 2, 2]]);
        let corner = mask(d8(), &[[2, 2, 2], [3, 3, 3]]);
        let edge = mask(d8(), &[[2, 2, 2], [3, 3, 2]]);
        for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            assert_eq!(connected_components(&face, c).count, 1);
        }
        assert_eq!(connected_components(&corner, Connectivity::Six).count, 2);
        assert_eq!(connected_components(&corner, Connectivity::Eighteen).count, 2);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).count, 1);
        assert_eq!(connected_components(&edge, Connectivity::Six).count, 2);
        assert_eq!(connected_components(&edge, Connectivity::Eighteen).count, 1);
    }

    #[test]
    fn labels_follow_scan_order() {
        // U shape whose arms meet only at a later row
        let m = mask(d8(), &[[5, 0, 0], [1, 0, 0], [1, 1, 0], [5, 1, 0], [1, 2, 0], [2, 2, 0], [3, 2, 0], [4, 2, 0], [5, 2, 0], [7, 7, 7]]);
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.count, 2);
        assert_eq!(cc.labels[d8().index(1, 0, 0)], 1);
        assert_eq!(cc.labels[d8().index(5, 0, 0)], 1);
        assert_eq!(cc.labels[d8().index(7, 7, 7)], 2);
        assert_eq!(cc.components[1], vec![d8().index(7, 7, 7)]);
    }

    #[test]
    fn lesion_metric_examples() {
        let crit = LesionCriteria::default();
        let three = mask(d8(), &[[0, 0, 0], [1, 0, 0], [4, 4, 4], [7, 7, 7], [7, 6, 7]]);
        assert_eq!(ltpr(&three, &three, &crit).unwrap(), Some(1.0));
        assert_eq!(lfpr(&three, &three, &crit).unwrap(), 0.0);
        let empty = BinaryMask::zeros(d8());
        assert_eq!(ltpr(&empty, &three, &crit).unwrap(), Some(0.0));
        assert_eq!(lfpr(&three, &empty, &crit).unwrap(), 1.0);

        let gt = mask(d8(), &[[1, 1, 1], [1, 2, 1], [6, 6, 6]]);
        let pred = mask(d8(), &[[1, 2, 1], [1, 3, 1], [4, 0, 0]]);
        // gt lesions: {(1,1,1),(1,2,1)} touched, {(6,6,6)} missed
        assert_eq!(ltpr(&pred, &gt, &crit).unwrap(), Some(0.5));
        // pred lesions: {(1,2,1),(1,3,1)} overlaps, {(4,0,0)} does not
        assert_eq!(lfpr(&pred, &gt, &crit).unwrap(), 0.5);
    }

    #[test]
    fn overlap_fraction_and_size_thresholds() {
        let gt = mask(d8(), &[[1, 1, 1], [1, 2, 1], [1, 3, 1], [1, 4, 1], [6, 6, 6]]);
        let pred = mask(d8(), &[[1, 1, 1], [6, 6, 6]]);
        let strict = LesionCriteria { min_overlap_fraction: 0.5, ..Default::default() };
        assert_eq!(ltpr(&pred, &gt, &strict).unwrap(), Some(0.5));
        let big_only = LesionCriteria { min_lesion_voxels: 2, ..Default::default() };
        assert_eq!(ltpr(&pred, &gt, &big_only).unwrap(), Some(1.0));
    }

    #[test]
    fn two_rater_examples() {
        let crit = LesionCriteria::default();
        let a = mask(d8(), &[[1, 1, 1], [1, 2, 1]]);
        let b = mask(d8(), &[[5, 5, 5]]);
        let same = evaluate_two_raters(&a, &a, &a, &crit).unwrap();
        assert_eq!(same.average, same.rater_a);
        let r = evaluate_two_raters(&a, &a, &b, &crit).unwrap();
        assert_eq!(r.average.dsc, Some(0.5));
        assert_eq!(r.rater_b.dsc, Some(0.0));
    }

    #[test]
    fn mean_skips_undefined() {
        let a = MetricSet { ppv: Some(0.4), tpr: None, ..Default::default() };
        let b = MetricSet { ppv: Some(0.8), tpr: Some(0.3), ..Default::default() };
        let m = MetricSet::mean(&[a, b]);
        assert!((m.ppv.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(m.tpr, Some(0.3));
        assert_eq!(m.dsc, None);
    }

    #[test]
    fn csv_shape() {
        let r = evaluate_two_raters(
            &BinaryMask::zeros(d8()),
            &BinaryMask::zeros(d8()),
            &BinaryMask::zeros(d8()),
            &LesionCriteria::default(),
        )
        .unwrap();
        let csv = report_csv(&[CaseReport { case: "s0".into(), report: r }]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "case,rater,DSC,Jaccard,PPV,TPR,LFPR,LTPR");
        assert_eq!(lines[3], "s0,avg,1.000000,1.000000,NA,NA,0.000000,NA");
    }
}
