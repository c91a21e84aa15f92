use std::fmt;

use super::Model;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer parameter and multiply-accumulate counts for one forward pass.
///
/// Parameter rows group tensors by name without the final component
/// (`enc.0.conv1.weight` and `.bias` form `enc.0.conv1`). Attention score
/// and mixing products appear under the attention layer's own name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub patch: usize,
    pub rows: Vec<CostRow>,
    pub params: u64,
    pub macs: u64,
}

impl CostReport {
    /// Builds a report from rows; totals are their sums.
    pub fn from_rows(patch: usize, rows: Vec<CostRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let macs = rows.iter().map(|r| r.macs).sum();
        CostReport {
            patch,
            rows,
            params,
            macs,
        }
    }

    /// Floating-point operations under the `FLOPs = 2·MACs` convention.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn row(&self, layer: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.params, r.macs));
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(0).max(5);
        writeln!(
            f,
            "# one forward pass, batch 1, {p}×{p} patch; FLOPs ≈ 2 × MACs",
            p = self.patch
        )?;
        writeln!(f, "{:<width$}  {:>12}  {:>16}", "layer", "params", "MACs")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>12}  {:>16}", r.layer, r.params, r.macs)?;
        }
        writeln!(f, "{:<width$}  {:>12}  {:>16}", "total", self.params, self.macs)?;
        write!(
            f,
            "params {:.3} M, MACs {:.3} G, FLOPs {:.3} G",
            self.params as f64 / 1e6,
            self.macs as f64 / 1e9,
            self.flops() as f64 / 1e9
        )
    }
}

fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(layer, _)| layer)
}

pub(super) fn count(model: &Model) -> Result<CostReport> {
    let c = model.config();
    let mut rows: Vec<CostRow> = Vec::new();
    for (name, t) in model.params().iter() {
        let layer = layer_of(name);
        match rows.iter_mut().find(|r| r.layer == layer) {
            Some(r) => r.params += t.numel() as u64,
            None => rows.push(CostRow {
                layer: layer.to_string(),
                params: t.numel() as u64,
                macs: 0,
            }),
        }
    }

    let tape = Tape::inference();
    tape.enable_mac_meter();
    let bound = model.params().bind(&tape);
    let x = tape.constant(Tensor::zeros([1, c.in_channels, c.patch, c.patch]));
    model.forward(&bound, &x)?;

    for (scope, macs) in tape.mac_counts() {
        if let Some(r) = rows.iter_mut().find(|r| r.layer == scope) {
            r.macs += macs;
            continue;
        }
        // Parameter-free products go right after the layers they belong to.
        let prefix = format!("{scope}.");
        let at = rows
            .iter()
            .rposition(|r| r.layer.starts_with(&prefix))
            .map_or(rows.len(), |i| i + 1);
        rows.insert(
            at,
            CostRow {
                layer: scope,
                params: 0,
                macs,
            },
        );
    }
    Ok(CostReport::from_rows(c.patch, rows))
}
