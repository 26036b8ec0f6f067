//! Point-to-box matching and average precision.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{scale_bin, BBox, Dataset, ScaleBin};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::localizer::{ImagePredictions, LocalizedObject};

/// Box-normalized distance between a point and a box center.
pub fn point_box_distance(p: Point, bbox: &BBox) -> Result<f64> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::Input(format!("degenerate box {bbox:?}")));
    }
    Ok(((p.x - bbox.cx) / bbox.w).hypot((p.y - bbox.cy) / bbox.h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Tp,
    Fp,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMatch {
    pub prediction: usize,
    pub gt: Option<usize>,
    pub distance: Option<f64>,
    pub verdict: Verdict,
}

/// Ground truth of one category in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub bbox: BBox,
    pub ignore: bool,
}

/// A scored point of one category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPred {
    pub point: Point,
    pub score: f64,
}

/// Greedy matching of predictions (already sorted by descending score).
///
/// Each prediction takes the closest still-unmatched regular ground truth
/// with `d < τ` (ties: lower index). Failing that it is ignored when some
/// ignore-flagged ground truth lies within `τ`, and a false positive otherwise.
pub fn match_image(preds: &[EvalPred], gts: &[EvalGt], tau: f64) -> Result<Vec<EvalMatch>> {
    let mut dist = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for g in gts {
            dist.push(point_box_distance(p.point, &g.bbox)?);
        }
    }
    let n = gts.len();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(preds.len());
    for i in 0..preds.len() {
        let row = &dist[i * n..(i + 1) * n];
        let mut best: Option<usize> = None;
        for g in 0..n {
            if gts[g].ignore || taken[g] || !(row[g] < tau) {
                continue;
            }
            if best.is_none_or(|b| row[g] < row[b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            out.push(EvalMatch {
                prediction: i,
                gt: Some(g),
                distance: Some(row[g]),
                verdict: Verdict::Tp,
            });
            continue;
        }
        let mut ign: Option<usize> = None;
        for g in 0..n {
            if gts[g].ignore && row[g] < tau && ign.is_none_or(|b| row[g] < row[b]) {
                ign = Some(g);
            }
        }
        out.push(match ign {
            Some(g) => EvalMatch {
                prediction: i,
                gt: Some(g),
                distance: Some(row[g]),
                verdict: Verdict::Ignored,
            },
            None => EvalMatch {
                prediction: i,
                gt: None,
                distance: None,
                verdict: Verdict::Fp,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// 101-point interpolated average precision from scored TP/FP decisions.
///
/// `decisions` holds `(score, is_tp)` for every non-ignored prediction of the
/// category across the dataset. Returns `None` when there are no ground truths.
pub fn average_precision(decisions: &[(f64, bool)], num_gts: usize) -> Option<PrCurve> {
    if num_gts == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..decisions.len()).collect();
    order.sort_by(|&a, &b| {
        decisions[b]
            .0
            .partial_cmp(&decisions[a].0)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if decisions[i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    // precision envelope, right to left
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    Some(PrCurve {
        precision,
        recall,
        ap: total / 101.0,
    })
}

/// One row of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub tau: f64,
    /// Mean AP over categories with ground truth, in `[0, 1]`.
    pub map: f64,
    pub per_category: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub categories: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MapReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.map)
    }

    /// Aligned plain-text table, AP in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
        let _ = write!(s, "{:<width$}  {:>6}", "metric", "mAP");
        for c in &self.categories {
            let _ = write!(s, "  {:>10}", truncate(c, 10));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}  {:>6.2}", r.name, 100.0 * r.map);
            for v in &r.per_category {
                match v {
                    Some(v) => {
                        let _ = write!(s, "  {:>10.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, "  {:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("metrics.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// AP of every category at one threshold. `keep` decides which ground truths
/// count; the others behave as ignore regions.
fn per_category_ap(
    preds: &HashMap<u64, &[LocalizedObject]>,
    dataset: &Dataset,
    tau: f64,
    keep: &dyn Fn(&BBox) -> bool,
) -> Result<Vec<Option<f64>>> {
    let k = dataset.num_categories();
    let mut decisions: Vec<Vec<(f64, bool)>> = vec![Vec::new(); k];
    let mut num_gts = vec![0usize; k];
    for img in &dataset.images {
        let image_preds = preds.get(&img.image_id).copied().unwrap_or(&[]);
        for c in 0..k {
            let gts: Vec<EvalGt> = img
                .objects
                .iter()
                .filter(|o| o.category == c)
                .map(|o| EvalGt {
                    bbox: o.bbox,
                    ignore: o.ignore || !keep(&o.bbox),
                })
                .collect();
            num_gts[c] += gts.iter().filter(|g| !g.ignore).count();
            let mut ps: Vec<EvalPred> = image_preds
                .iter()
                .filter(|p| p.category == c)
                .map(|p| EvalPred {
                    point: Point::new(p.x, p.y),
                    score: p.score,
                })
                .collect();
            ps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            for m in match_image(&ps, &gts, tau)? {
                match m.verdict {
                    Verdict::Tp => decisions[c].push((ps[m.prediction].score, true)),
                    Verdict::Fp => decisions[c].push((ps[m.prediction].score, false)),
                    Verdict::Ignored => {}
                }
            }
        }
    }
    Ok((0..k)
        .map(|c| average_precision(&decisions[c], num_gts[c]).map(|pr| pr.ap))
        .collect())
}

fn mean_present(v: &[Option<f64>], names: &[String], row: &str) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    for (i, x) in v.iter().enumerate() {
        if x.is_none() {
            log::warn!("{row}: category {} has no ground truth; skipped", names[i]);
        }
    }
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// mAP at each τ, plus small/medium/large mAP at τ = 1.
pub fn map_report(predictions: &[ImagePredictions], dataset: &Dataset, taus: &[f64]) -> Result<MapReport> {
    let preds: HashMap<u64, &[LocalizedObject]> = predictions
        .iter()
        .map(|p| (p.image_id, p.predictions.as_slice()))
        .collect();
    let names: Vec<String> = dataset.categories.iter().map(|c| c.name.clone()).collect();
    let mut rows = Vec::new();
    for &tau in taus {
        let per = per_category_ap(&preds, dataset, tau, &|_| true)?;
        let name = format!("mAP_{tau}");
        rows.push(MetricRow {
            map: mean_present(&per, &names, &name),
            name,
            tau,
            per_category: per,
        });
    }
    for bin in ScaleBin::ALL {
        let per = per_category_ap(&preds, dataset, 1.0, &|b| scale_bin(b) == bin)?;
        let name = format!("mAP_{}", bin.name());
        rows.push(MetricRow {
            map: mean_present(&per, &names, &name),
            name,
            tau: 1.0,
            per_category: per,
        });
    }
    Ok(MapReport {
        categories: names,
        rows,
    })
}
