//! Accuracy as a function of the inference step or of the patch size.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{evaluate_network, foreground_classes, train, TrainConfig, TrainData};
use crate::data::{sliding_positions, LabelVolume, PatchSpec, Volume};
use crate::error::{Error, Result};
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Vary the sliding-window step of one trained network.
    Overlap,
    /// Train and evaluate one network per patch size.
    PatchSize,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Overlap => "overlap",
            SweepAxis::PatchSize => "patch_size",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(SweepAxis::Overlap),
            "patch_size" | "patch-size" => Ok(SweepAxis::PatchSize),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected overlap or patch_size"
            ))),
        }
    }
}

pub struct SweepSetup<'a> {
    pub train: &'a TrainConfig,
    pub data: &'a TrainData,
    pub test_volume: &'a Volume,
    pub test_labels: &'a LabelVolume,
    /// Inference step for the patch-size axis (clamped to each size).
    pub overlap_step: usize,
    /// Network evaluated on the overlap axis; trained from `train` if absent.
    pub network: Option<&'a Network<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub patch_count: Option<usize>,
    /// Per foreground class, in class order.
    pub dice: Vec<Option<f64>>,
    pub average_dice: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub class_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Runs one evaluation per value. A value that fails at run time yields a
/// row carrying the error and the sweep moves on; values that can never be
/// valid for the configuration are rejected up front.
pub fn sweep(axis: SweepAxis, values: &[usize], setup: &SweepSetup<'_>) -> Result<SweepTable> {
    let net_cfg = setup.train.network_config();
    if axis == SweepAxis::PatchSize {
        let m = net_cfg.size_multiple().max(4);
        if let Some(v) = values.iter().find(|&&v| v == 0 || v % m != 0) {
            return Err(Error::Config(format!(
                "patch size {v} is not a positive multiple of {m}"
            )));
        }
    }
    let classes = foreground_classes(net_cfg.num_classes);
    let trained;
    let fixed = match (axis, setup.network) {
        (SweepAxis::Overlap, Some(n)) => Some(n),
        (SweepAxis::Overlap, None) => {
            trained = train(setup.train, setup.data)?.network;
            Some(&trained)
        }
        (SweepAxis::PatchSize, _) => None,
    };
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let run = || -> Result<SweepRow> {
            let (spec, report) = match fixed {
                Some(net) => {
                    let spec = PatchSpec::new(setup.train.patch_size, value)?;
                    (spec, evaluate_network(net, setup.test_volume, setup.test_labels, spec)?)
                }
                None => {
                    let mut cfg = setup.train.clone();
                    cfg.patch_size = value;
                    cfg.val_overlap_step = cfg.val_overlap_step.min(value);
                    cfg.checkpoint = None;
                    cfg.loss_log = None;
                    let net = train(&cfg, setup.data)?.network;
                    let spec = PatchSpec::new(value, setup.overlap_step.min(value))?;
                    (
                        spec,
                        evaluate_network(&net, setup.test_volume, setup.test_labels, spec)?,
                    )
                }
            };
            Ok(SweepRow {
                value,
                patch_count: Some(sliding_positions(setup.test_volume.dims, spec.patch_size, spec.overlap_step)?.len()),
                dice: report.classes.iter().map(|c| c.dice).collect(),
                average_dice: report.average_dice,
                error: None,
            })
        };
        rows.push(run().unwrap_or_else(|e| SweepRow {
            value,
            patch_count: None,
            dice: vec![None; classes.len()],
            average_dice: None,
            error: Some(format!("{}: {e}", e.code())),
        }));
    }
    Ok(SweepTable {
        axis,
        class_names: classes.into_iter().map(|(_, n)| n).collect(),
        rows,
    })
}

fn cell(v: Option<impl ToString>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl SweepTable {
    /// Tab-separated: `value, patch_count, dice_<class>..., dice_average, error`.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\tpatch_count", self.axis);
        for n in &self.class_names {
            let _ = write!(s, "\tdice_{n}");
        }
        s.push_str("\tdice_average\terror\n");
        for r in &self.rows {
            let _ = write!(s, "{}\t{}", r.value, cell(r.patch_count));
            for d in &r.dice {
                let _ = write!(s, "\t{}", cell(*d));
            }
            let err = r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " ");
            let _ = writeln!(s, "\t{}\t{err}", cell(r.average_dice));
        }
        s
    }

    /// Whitespace-separated columns for plotting; failed rows are skipped.
    pub fn to_plot_data(&self) -> String {
        let mut s = format!("# {} dice_average patch_count\n", self.axis);
        for r in self.rows.iter().filter(|r| r.error.is_none()) {
            let _ = writeln!(s, "{} {} {}", r.value, cell(r.average_dice), cell(r.patch_count));
        }
        s
    }
}
