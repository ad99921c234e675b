//! Dice ratio, modified Hausdorff distance and its direction-independent
//! 3D average.
//!
//! For the Hausdorff variants a `D × H × W` map is read as a set of binary
//! vectors: under axis `D`, one `D`-long fiber per `(h, w)` pair, and so on.
//! Every fiber takes part, including all-zero ones; duplicates collapse
//! since the distances are defined over sets.

use std::fmt::Write as _;

use crate::data::LabelVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "binary map",
                shape: dims.to_vec(),
                reason: format!("{} bits supplied", bits.len()),
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.bits[(d * self.dims[1] + h) * self.dims[2] + w]
    }
}

pub fn binarize(classmap: &LabelVolume, class_id: u8) -> BinaryMap {
    BinaryMap {
        dims: classmap.dims,
        bits: classmap.labels.iter().map(|&l| l == class_id).collect(),
    }
}

fn same_dims(op: &'static str, p: &BinaryMap, l: &BinaryMap) -> Result<()> {
    if p.dims != l.dims {
        return Err(Error::Dimension {
            op,
            lhs: p.dims.to_vec(),
            rhs: l.dims.to_vec(),
        });
    }
    Ok(())
}

/// `2|P ∩ L| / (|P| + |L|)`; undefined when both maps are empty.
pub fn dice_ratio(p: &BinaryMap, l: &BinaryMap) -> Result<f64> {
    same_dims("dice_ratio", p, l)?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&a, &b) in p.bits.iter().zip(&l.bits) {
        both += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric {
            metric: "dice_ratio",
            reason: "both maps are empty".into(),
        });
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// MHD between two finite point sets in a common Euclidean space.
pub fn mhd_vectors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "mhd",
            reason: "empty vector set".into(),
        });
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != a[0].len()) {
        return Err(Error::Dimension {
            op: "mhd_vectors",
            lhs: vec![a[0].len()],
            rhs: vec![v.len()],
        });
    }
    let directed = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .map(|u| {
                y.iter()
                    .map(|v| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(directed(a, b).max(directed(b, a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::D, Axis::H, Axis::W];

    fn index(self) -> usize {
        self as usize
    }
}

/// Distinct fibers along `axis`, each packed into 64-bit words.
fn fibers(m: &BinaryMap, axis: Axis) -> Vec<Vec<u64>> {
    let dims = m.dims;
    let a = axis.index();
    let (o1, o2) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let len = dims[a];
    let words = len.div_ceil(64);
    let mut out = Vec::with_capacity(dims[o1] * dims[o2]);
    let mut idx = [0usize; 3];
    for i in 0..dims[o1] {
        for j in 0..dims[o2] {
            idx[o1] = i;
            idx[o2] = j;
            let mut f = vec![0u64; words];
            for k in 0..len {
                idx[a] = k;
                if m.get(idx[0], idx[1], idx[2]) {
                    f[k / 64] |= 1 << (k % 64);
                }
            }
            out.push(f);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Mean over `x` of the distance to the nearest member of `y`. For binary
/// vectors the squared Euclidean distance is the Hamming distance.
fn directed_binary(x: &[Vec<u64>], y: &[Vec<u64>]) -> f64 {
    let total: f64 = x
        .iter()
        .map(|u| {
            let nearest = y
                .iter()
                .map(|v| u.iter().zip(v).map(|(p, q)| (p ^ q).count_ones()).sum::<u32>())
                .min()
                .expect("non-empty set");
            (nearest as f64).sqrt()
        })
        .sum();
    total / x.len() as f64
}

fn require_nonempty(metric: &'static str, p: &BinaryMap, l: &BinaryMap) -> Result<()> {
    for (m, which) in [(p, "prediction"), (l, "reference")] {
        if m.count() == 0 {
            return Err(Error::UndefinedMetric {
                metric,
                reason: format!("{which} map is empty"),
            });
        }
    }
    Ok(())
}

pub fn mhd_directional(p: &BinaryMap, l: &BinaryMap, axis: Axis) -> Result<f64> {
    same_dims("mhd_directional", p, l)?;
    require_nonempty("mhd", p, l)?;
    let (a, b) = (fibers(p, axis), fibers(l, axis));
    Ok(directed_binary(&a, &b).max(directed_binary(&b, &a)))
}

/// Mean of the three directional MHDs.
pub fn mhd_3d(p: &BinaryMap, l: &BinaryMap) -> Result<f64> {
    let mut sum = 0.0;
    for axis in Axis::ALL {
        sum += mhd_directional(p, l, axis)?;
    }
    Ok(sum / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: u8,
    pub name: String,
    /// `None` when undefined for this pair of maps.
    pub dice: Option<f64>,
    pub mhd_3d: Option<f64>,
}

/// Per-class DR and 3D-MHD plus unweighted means over the defined values.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationReport {
    pub classes: Vec<ClassReport>,
    pub average_dice: Option<f64>,
    pub average_mhd_3d: Option<f64>,
    /// Classes left out of an average because a metric was undefined.
    pub excluded: Vec<u8>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores `pred` against `truth` for each of `classes` (id and display name).
pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume, classes: &[(u8, &str)]) -> Result<SegmentationReport> {
    if pred.dims != truth.dims {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: pred.dims.to_vec(),
            rhs: truth.dims.to_vec(),
        });
    }
    let classes: Vec<ClassReport> = classes
        .iter()
        .map(|&(id, name)| {
            let (p, l) = (binarize(pred, id), binarize(truth, id));
            Ok(ClassReport {
                class_id: id,
                name: name.to_string(),
                dice: undefined_to_none(dice_ratio(&p, &l))?,
                mhd_3d: undefined_to_none(mhd_3d(&p, &l))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SegmentationReport {
        average_dice: mean(classes.iter().map(|c| c.dice)),
        average_mhd_3d: mean(classes.iter().map(|c| c.mhd_3d)),
        excluded: classes
            .iter()
            .filter(|c| c.dice.is_none() || c.mhd_3d.is_none())
            .map(|c| c.class_id)
            .collect(),
        classes,
    })
}

impl SegmentationReport {
    /// Flat `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let mut s = String::new();
        for c in &self.classes {
            let _ = writeln!(s, "{}.class_id={}", c.name, c.class_id);
            let _ = writeln!(s, "{}.dice={}", c.name, fmt(c.dice));
            let _ = writeln!(s, "{}.mhd_3d={}", c.name, fmt(c.mhd_3d));
        }
        let _ = writeln!(s, "average.dice={}", fmt(self.average_dice));
        let _ = writeln!(s, "average.mhd_3d={}", fmt(self.average_mhd_3d));
        let excluded: Vec<String> = self.excluded.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "average.excluded={}", excluded.join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(dims: [usize; 3], ones: &[usize]) -> BinaryMap {
        let mut bits = vec![false; dims.iter().product()];
        for &i in ones {
            bits[i] = true;
        }
        BinaryMap::new(dims, bits).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = map([2, 2, 2], &[0, 1]);
        let b = map([2, 2, 2], &[0, 1, 2, 3]);
        assert_eq!(dice_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_ratio(&a, &map([2, 2, 2], &[5])).unwrap(), 0.0);
        assert_eq!(dice_ratio(&a, &b).unwrap(), 2.0 / 3.0);
        let e = map([2, 2, 2], &[]);
        assert!(matches!(dice_ratio(&e, &e), Err(Error::UndefinedMetric { .. })));
    }

    #[test]
    fn scalar_set_example() {
        let a = vec![vec![0.0]];
        let b = vec![vec![3.0], vec![4.0]];
        assert_eq!(mhd_vectors(&a, &b).unwrap(), 3.5);
        assert!(mhd_vectors(&a, &[]).is_err());
    }

    #[test]
    fn long_fibers_span_words() {
        let mut p = map([70, 1, 1], &[0]);
        let l = map([70, 1, 1], &[0, 65, 69]);
        assert_eq!(mhd_directional(&p, &l, Axis::D).unwrap(), 2f64.sqrt());
        p.bits[69] = true;
        assert_eq!(mhd_directional(&p, &l, Axis::D).unwrap(), 1.0);
    }

    #[test]
    fn identical_maps_score_perfectly() {
        let truth = LabelVolume::new([2, 2, 2], vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let r = evaluate(&truth, &truth, &[(1, "csf"), (2, "gm"), (3, "wm")]).unwrap();
        assert_eq!(r.classes.iter().map(|c| c.class_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(r.classes.iter().all(|c| c.dice == Some(1.0) && c.mhd_3d == Some(0.0)));
        assert_eq!(r.average_dice, Some(1.0));
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn undefined_classes_are_flagged() {
        let truth = LabelVolume::new([1, 1, 2], vec![0, 1]).unwrap();
        let r = evaluate(&truth, &truth, &[(1, "csf"), (2, "gm")]).unwrap();
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.average_dice, Some(1.0));
        assert!(r.to_text().contains("gm.dice=undefined"));
    }

    #[test]
    fn mismatched_dims_name_both() {
        let a = LabelVolume::new([1, 1, 2], vec![0, 1]).unwrap();
        let b = LabelVolume::new([1, 2, 1], vec![0, 1]).unwrap();
        let err = evaluate(&a, &b, &[(1, "csf")]).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 2]") && err.contains("[1, 2, 1]"), "{err}");
    }
}
