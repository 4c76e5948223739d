//! Metrics: normalized L2 distance, average precision, angular error,
//! heatmap decoding, per-primary-image aggregation and scene splits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::GazeVector;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("score and label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no records")]
    EmptyInput,
    #[error("zero-length vector")]
    ZeroVector,
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Head/target visibility in the reference view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "HV-TV")]
    HeadVisibleTargetVisible,
    #[serde(rename = "HV-TN")]
    HeadVisibleTargetNotVisible,
    #[serde(rename = "HN-TV")]
    HeadNotVisibleTargetVisible,
    #[serde(rename = "HN-TN")]
    HeadNotVisibleTargetNotVisible,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::HeadVisibleTargetVisible,
        Category::HeadVisibleTargetNotVisible,
        Category::HeadNotVisibleTargetVisible,
        Category::HeadNotVisibleTargetNotVisible,
    ];

    pub fn from_visibility(head_visible: bool, target_visible: bool) -> Self {
        match (head_visible, target_visible) {
            (true, true) => Self::HeadVisibleTargetVisible,
            (true, false) => Self::HeadVisibleTargetNotVisible,
            (false, true) => Self::HeadNotVisibleTargetVisible,
            (false, false) => Self::HeadNotVisibleTargetNotVisible,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::HeadVisibleTargetVisible => "HV-TV",
            Self::HeadVisibleTargetNotVisible => "HV-TN",
            Self::HeadNotVisibleTargetVisible => "HN-TV",
            Self::HeadNotVisibleTargetNotVisible => "HN-TN",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One (primary image, reference camera) evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord<T> {
    pub primary_image_id: String,
    pub reference_camera_id: String,
    /// Normalized `(x, y)` in `[0, 1]²`.
    pub predicted_point: [T; 2],
    /// Normalized ground truth; absent for out-of-frame targets.
    pub gt_point: Option<[T; 2]>,
    pub p_in: T,
    pub gt_in: bool,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_gaze: Option<[T; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_gaze: Option<[T; 3]>,
}

/// Argmax cell center of a row-major `width × height` map in `[0, 1]²`.
/// Ties resolve to the first cell in row-major order.
pub fn decode_heatmap<T: Real>(values: &[T], width: usize, height: usize) -> [T; 2] {
    assert_eq!(values.len(), width * height, "heatmap size");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let (x, y) = (best % width, best / width);
    [
        (T::from_usize_lossy(x) + T::lit(0.5)) / T::from_usize_lossy(width),
        (T::from_usize_lossy(y) + T::lit(0.5)) / T::from_usize_lossy(height),
    ]
}

/// Euclidean distance in the unit square.
pub fn normalized_l2<T: Real>(pred: [T; 2], gt: [T; 2]) -> T {
    (pred[0] - gt[0]).hypot(pred[1] - gt[1])
}

/// Angle between two vectors in degrees, in `[0, 180]`.
pub fn angular_error<T: Real>(pred: GazeVector<T>, gt: GazeVector<T>) -> Result<T, EvalError> {
    if !(pred.norm() > T::zero() && gt.norm() > T::zero()) {
        return Err(EvalError::ZeroVector);
    }
    let (a, b) = (pred.normalized().expect("nonzero"), gt.normalized().expect("nonzero"));
    let deg = a.cross(b).norm().atan2(a.dot(b)).to_degrees();
    Ok(deg.max(T::zero()).min(T::lit(180.0)))
}

/// Average precision with all-points interpolation.
///
/// Scores are ranked high to low. Equal scores form one group; the
/// precision at the end of a group is credited to every positive in it.
/// Generic over the numeric type so it can run on exact rationals.
pub fn average_precision<S>(scores: &[S], labels: &[bool]) -> Result<S, EvalError>
where
    S: Clone + PartialOrd + Num,
{
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("comparable scores"));

    let count = |n: usize| (0..n).fold(S::zero(), |acc, _| acc + S::one());
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut total = S::zero();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_pos += labels[order[j]] as usize;
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        if group_pos > 0 {
            total = total + count(group_pos) * count(tp) / count(seen);
        }
        i = j;
    }
    Ok(total / count(positives))
}

/// Metrics for one category (or all records when `category` is `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics<T> {
    pub category: Option<Category>,
    pub record_count: usize,
    pub primary_images: usize,
    pub dist_mean: Option<T>,
    pub dist_count: usize,
    pub ap: Option<T>,
    pub ap_count: usize,
    pub angular_error_mean: Option<T>,
    pub angular_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub overall: CategoryMetrics<T>,
    pub per_category: Vec<CategoryMetrics<T>>,
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean<T: Real>(mut v: Vec<T>) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = T::from_usize_lossy(v.len());
    Some(v.into_iter().sum::<T>() / n)
}

fn metrics_for<T: Real>(category: Option<Category>, records: &[&EvalRecord<T>]) -> Result<CategoryMetrics<T>, EvalError> {
    let mut by_image: BTreeMap<&str, Vec<&EvalRecord<T>>> = BTreeMap::new();
    for r in records {
        by_image.entry(r.primary_image_id.as_str()).or_default().push(r);
    }

    let mut dists = Vec::new();
    let mut p_in = Vec::new();
    let mut labels = Vec::new();
    let mut angles = Vec::new();
    for group in by_image.values() {
        let d: Vec<T> = group
            .iter()
            .filter(|r| r.gt_in)
            .filter_map(|r| r.gt_point.map(|gt| normalized_l2(r.predicted_point, gt)))
            .collect();
        if let Some(m) = stable_mean(d) {
            dists.push(m);
        }
        p_in.push(stable_mean(group.iter().map(|r| r.p_in).collect()).expect("nonempty group"));
        labels.push(group.iter().any(|r| r.gt_in));
        let mut a = Vec::new();
        for r in group {
            if let (Some(p), Some(g)) = (r.predicted_gaze, r.gt_gaze) {
                a.push(angular_error(GazeVector::from_array(p), GazeVector::from_array(g))?);
            }
        }
        if let Some(m) = stable_mean(a) {
            angles.push(m);
        }
    }

    let ap = match average_precision(&p_in, &labels) {
        Ok(v) => Some(v),
        Err(EvalError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    Ok(CategoryMetrics {
        category,
        record_count: records.len(),
        primary_images: by_image.len(),
        dist_count: dists.len(),
        dist_mean: stable_mean(dists),
        ap,
        ap_count: p_in.len(),
        angular_count: angles.len(),
        angular_error_mean: stable_mean(angles),
    })
}

/// Averages every metric per primary image first, then across images,
/// per category and overall. Distance uses only in-frame targets; AP uses
/// each image's mean `p_in`.
pub fn aggregate_by_primary<T: Real>(records: &[EvalRecord<T>]) -> Result<MetricsReport<T>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let all: Vec<&EvalRecord<T>> = records.iter().collect();
    let overall = metrics_for(None, &all)?;
    let per_category = Category::ALL
        .iter()
        .map(|&c| {
            let subset: Vec<_> = records.iter().filter(|r| r.category == c).collect();
            metrics_for(Some(c), &subset)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport { overall, per_category })
}

impl<T: Real> MetricsReport<T> {
    pub fn rows(&self) -> impl Iterator<Item = &CategoryMetrics<T>> {
        std::iter::once(&self.overall).chain(self.per_category.iter())
    }

    /// CSV with header `category,metric,value,count`. Undefined metrics are `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,metric,value,count\n");
        let fmt = |v: Option<T>| v.map_or("NaN".to_string(), |x| format!("{}", x.as_f64()));
        for m in self.rows() {
            let cat = m.category.map_or("ALL", Category::label);
            out.push_str(&format!("{cat},dist,{},{}\n", fmt(m.dist_mean), m.dist_count));
            out.push_str(&format!("{cat},ap,{},{}\n", fmt(m.ap), m.ap_count));
            out.push_str(&format!(
                "{cat},angular_error_deg,{},{}\n",
                fmt(m.angular_error_mean),
                m.angular_count
            ));
            out.push_str(&format!("{cat},records,{},{}\n", m.record_count, m.record_count));
        }
        out
    }

    /// Writes the CSV to `csv_path` and its JSON mirror next to it.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<(), EvalError>
    where
        T: Serialize,
    {
        let csv_path = csv_path.as_ref();
        std::fs::File::create(csv_path)?.write_all(self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(csv_path.with_extension("json"), json)?;
        Ok(())
    }
}

/// Anything that belongs to a named scene.
pub trait SceneScoped {
    fn scene_id(&self) -> &str;
}

/// `(train, eval)` with `eval` holding exactly the held-out scene's items.
pub fn split_leave_one_scene_out<S: SceneScoped + Clone>(items: &[S], held_out: &str) -> Result<(Vec<S>, Vec<S>), EvalError> {
    if !items.iter().any(|s| s.scene_id() == held_out) {
        return Err(EvalError::UnknownScene(held_out.to_string()));
    }
    let (eval, train): (Vec<S>, Vec<S>) = items.iter().cloned().partition(|s| s.scene_id() == held_out);
    Ok((train, eval))
}
