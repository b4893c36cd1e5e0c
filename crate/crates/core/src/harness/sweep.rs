//! The conv2-width (primary-capsule count) sweep and the CFC K x D grid.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{CapsuleMode, ModelConfig};

pub const NK_VALUES: [usize; 5] = [32, 64, 128, 192, 256];
pub const K_VALUES: [usize; 3] = [1, 2, 3];
pub const D_VALUES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    PcCount,
    KdGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nk: usize,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub primary_caps: usize,
    pub params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Model configurations of a sweep, derived from `base`.
pub fn sweep_configs(kind: SweepKind, base: &ModelConfig) -> Vec<ModelConfig> {
    match kind {
        SweepKind::PcCount => NK_VALUES
            .iter()
            .map(|&nk| {
                let mut c = base.clone().with_nk(nk);
                c.mode = CapsuleMode::Baseline;
                c
            })
            .collect(),
        SweepKind::KdGrid => K_VALUES
            .iter()
            .flat_map(|&k| D_VALUES.iter().map(move |&d| (k, d)))
            .map(|(k, d)| {
                let mut c = base.clone();
                c.mode = CapsuleMode::Cfc;
                c.cfc_kernel = k;
                c.cfc_dim = d;
                c
            })
            .collect(),
    }
}

/// Parameter and capsule counts for every grid point.
pub fn sweep(kind: SweepKind, base: &ModelConfig) -> Result<Vec<SweepRow>> {
    sweep_configs(kind, base)
        .into_iter()
        .map(|c| {
            Ok(SweepRow {
                nk: c.conv2.channels,
                k: (kind == SweepKind::KdGrid).then_some(c.cfc_kernel),
                d: (kind == SweepKind::KdGrid).then_some(c.cfc_dim),
                primary_caps: c.primary_count()?,
                params: c.param_count()?,
                test_accuracy: None,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["nk", "k", "d", "primary_caps", "params", "test_accuracy"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        out.write_record([
            r.nk.to_string(),
            opt(r.k.map(|v| v.to_string())),
            opt(r.d.map(|v| v.to_string())),
            r.primary_caps.to_string(),
            r.params.to_string(),
            opt(r.test_accuracy.map(|v| v.to_string())),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CIFAR_SHAPE;

    #[test]
    fn pc_count_endpoints() {
        let rows = sweep(SweepKind::PcCount, &ModelConfig::baseline(CIFAR_SHAPE)).unwrap();
        let pcs: Vec<usize> = rows.iter().map(|r| r.primary_caps).collect();
        assert_eq!(pcs, [256, 512, 1024, 1536, 2048]);
        assert_eq!(rows[0].params, 4_810_272);
        assert_eq!(rows[1].params, 5_801_536);
        assert_eq!(rows[4].params, 11_749_120);
    }

    #[test]
    fn kd_grid_monotone() {
        let rows = sweep(SweepKind::KdGrid, &ModelConfig::cfc(CIFAR_SHAPE, 1, 8)).unwrap();
        assert_eq!(rows.len(), 9);
        let p = |k: usize, d: usize| rows.iter().find(|r| r.k == Some(k) && r.d == Some(d)).unwrap().params;
        for d in D_VALUES {
            assert!(p(1, d) < p(2, d) && p(2, d) < p(3, d));
        }
        for k in K_VALUES {
            assert!(p(k, 8) < p(k, 16) && p(k, 16) < p(k, 32));
        }
    }
}
