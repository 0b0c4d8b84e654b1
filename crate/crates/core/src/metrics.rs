//! Evaluation metrics: Dice overlap and the 95th-percentile Hausdorff
//! distance between segmentation surfaces.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Shape3, Spacing};

fn check_shapes(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "label shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2 |P ∩ G| / (|P| + |G|)` for one class; 1 when the class is absent
/// from both volumes.
pub fn dice_metric(pred: &LabelVolume, gt: &LabelVolume, class: u32) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        inter += usize::from(ia && ib);
        p += usize::from(ia);
        g += usize::from(ib);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask; the
/// volume border counts as outside.
pub fn surface_voxels(mask: &LabelVolume, class: u32) -> Vec<Shape3> {
    let s = mask.shape();
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < s[0]
            && (j as usize) < s[1]
            && (k as usize) < s[2]
            && mask.get(i as usize, j as usize, k as usize) == class
    };
    let mut out = Vec::new();
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                if mask.get(i, j, k) != class {
                    continue;
                }
                let (a, b, c) = (i as isize, j as isize, k as isize);
                let neighbours = [
                    (a - 1, b, c),
                    (a + 1, b, c),
                    (a, b - 1, c),
                    (a, b + 1, c),
                    (a, b, c - 1),
                    (a, b, c + 1),
                ];
                if neighbours.iter().any(|&(x, y, z)| !inside(x, y, z)) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Physical distance between two voxel indices.
#[inline]
pub fn voxel_distance(a: Shape3, b: Shape3, spacing: Spacing) -> f64 {
    let d = |axis: usize| (a[axis] as f64 - b[axis] as f64) * spacing[axis];
    (d(0) * d(0) + d(1) * d(1) + d(2) * d(2)).sqrt()
}

/// Percentile with linear interpolation between order statistics of the
/// ascending-sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// For every query point, the distance to its nearest target point.
///
/// Targets are sorted along the first axis; the scan around each query
/// stops once the axial gap alone exceeds the best distance, so the result
/// is the same minimum a full scan would produce.
pub fn nearest_distances(queries: &[Shape3], targets: &[Shape3], spacing: Spacing) -> Vec<f64> {
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    let axial = |p: &Shape3| p[0] as f64 * spacing[0];
    queries
        .iter()
        .map(|q| {
            let start = sorted.partition_point(|t| t[0] < q[0]);
            let mut best = f64::INFINITY;
            for t in &sorted[start..] {
                if (axial(t) - axial(q)).abs() > best {
                    break;
                }
                best = best.min(voxel_distance(*q, *t, spacing));
            }
            for t in sorted[..start].iter().rev() {
                if (axial(q) - axial(t)).abs() > best {
                    break;
                }
                best = best.min(voxel_distance(*q, *t, spacing));
            }
            best
        })
        .collect()
}

/// Symmetric 95th-percentile surface distance in millimeters: the 95th
/// percentile of each directed nearest-surface distance set, then the
/// larger of the two. `None` when either volume lacks the class.
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class: u32, spacing: Spacing) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let sp = surface_voxels(pred, class);
    let sg = surface_voxels(gt, class);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    Ok(Some(hd95_points(&sp, &sg, spacing)))
}

/// [`hd95`] on explicit surface point sets.
pub fn hd95_points(pred: &[Shape3], gt: &[Shape3], spacing: Spacing) -> f64 {
    let directed = |from: &[Shape3], to: &[Shape3]| {
        let mut d = nearest_distances(from, to, spacing);
        d.sort_by(f64::total_cmp);
        percentile(&d, 95.0)
    };
    directed(pred, gt).max(directed(gt, pred))
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case_id: String,
    pub class: u32,
    pub dice: f64,
    /// `None` when the class is missing from prediction or ground truth.
    pub hd95_mm: Option<f64>,
}

pub const CSV_HEADER: &str = "case_id,class,dice,hd95_mm";

/// CSV report; missing HD95 values are written as `NA`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let hd = r.hd95_mm.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
        out.push_str(&format!("{},{},{},{}\n", r.case_id, r.class, r.dice, hd));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> std::result::Result<Vec<MetricRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(format!("expected header `{CSV_HEADER}`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || format!("line {}: malformed row `{line}`", n + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                case_id: f[0].to_string(),
                class: f[1].parse().map_err(|_| bad())?,
                dice: f[2].parse().map_err(|_| bad())?,
                hd95_mm: match f[3] {
                    "NA" => None,
                    v => Some(v.parse().map_err(|_| bad())?),
                },
            })
        })
        .collect()
}
