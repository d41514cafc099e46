//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as one FLOP. Activations, pooling,
//! upsampling and shortcut additions are free.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layer::SineFMConfig;
use crate::network::{ArchDescriptor, LayerSpec};

/// Per-operation costs. The version changes whenever a constant does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostTable {
    pub version: u32,
    pub conv_mac: u64,
    /// Per generated element for the fixed transform.
    pub transform: u64,
    /// Per generated element for map normalisation (mean, centre, square, divide).
    pub normalize: u64,
    pub relu: u64,
    pub pool: u64,
    pub upsample: u64,
    pub add: u64,
}

impl CostTable {
    pub const V1: CostTable = CostTable {
        version: 1,
        conv_mac: 1,
        transform: 1,
        normalize: 4,
        relu: 0,
        pool: 0,
        upsample: 0,
        add: 0,
    };
}

impl Default for CostTable {
    fn default() -> Self {
        Self::V1
    }
}

/// FLOPs of a dense convolution producing an `h_out × w_out` map:
/// `c_in · K² · h_out · w_out · c_out`.
pub fn conv_flops(c_in: usize, kernel: usize, h_out: usize, w_out: usize, c_out: usize) -> u64 {
    (c_in * kernel * kernel) as u64 * (h_out * w_out) as u64 * c_out as u64
}

/// FLOPs of a SineFM layer producing an `h_out × w_out` map: seed
/// convolution, transforms, normalisation and the 1×1 combination.
pub fn sinefm_flops(cfg: &SineFMConfig, h_out: usize, w_out: usize) -> u64 {
    sinefm_flops_with(cfg, h_out, w_out, &CostTable::V1)
}

pub fn sinefm_flops_with(cfg: &SineFMConfig, h_out: usize, w_out: usize, table: &CostTable) -> u64 {
    let hw = (h_out * w_out) as u64;
    let seed = conv_flops(cfg.c_in, cfg.kernel, h_out, w_out, cfg.c_s) * table.conv_mac;
    if cfg.c_out <= cfg.c_s {
        return seed;
    }
    let generated = (cfg.fanout * cfg.c_s) as u64 * hw;
    let combine = generated * (cfg.c_out - cfg.c_s) as u64 * table.conv_mac;
    seed + generated * (table.transform + table.normalize) + combine
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// Output `(C, H, W)`.
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub table_version: u32,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// Counts parameters and FLOPs of `desc` at its nominal input size, or at
/// `hw` when given.
pub fn model_cost(desc: &ArchDescriptor, hw: Option<(usize, usize)>, table: &CostTable) -> Result<CostReport> {
    let hw = hw.unwrap_or((desc.input.1, desc.input.2));
    let traces = desc.trace(hw)?;
    let mut layers = Vec::with_capacity(traces.len());
    for (index, (spec, t)) in desc.layers.iter().zip(&traces).enumerate() {
        let (_, ho, wo) = t.output;
        let (ci, hi, wi) = t.input;
        let flops = match spec {
            LayerSpec::StandardConv(s) => conv_flops(s.c_in, s.kernel, ho, wo, s.c_out) * table.conv_mac,
            LayerSpec::SineFM(cfg) => sinefm_flops_with(cfg, ho, wo, table),
            LayerSpec::DenseHead { c_in, classes } => (*c_in * *classes) as u64 * table.conv_mac,
            LayerSpec::SegHead { c_in, classes } => conv_flops(*c_in, 1, ho, wo, *classes) * table.conv_mac,
            LayerSpec::AddProj { c_in, c_out, .. } => {
                conv_flops(*c_in, 1, ho, wo, *c_out) * table.conv_mac + (c_out * ho * wo) as u64 * table.add
            }
            LayerSpec::Relu => (ci * hi * wi) as u64 * table.relu,
            LayerSpec::MaxPool => (ci * ho * wo) as u64 * table.pool,
            LayerSpec::NearestUpsample => (ci * ho * wo) as u64 * table.upsample,
            LayerSpec::Add => (ci * hi * wi) as u64 * table.add,
            LayerSpec::GlobalAvgPool | LayerSpec::Save => 0,
        };
        layers.push(LayerCost {
            index,
            kind: spec.keyword(),
            params: spec.learnable_params() as u64,
            flops,
            output: t.output,
        });
    }
    Ok(CostReport {
        table_version: table.version,
        input: (desc.input.0, hw.0, hw.1),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// How many times larger `reference` is than `candidate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostComparison {
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

pub fn compare(candidate: &CostReport, reference: &CostReport) -> Result<CostComparison> {
    if candidate.input != reference.input {
        return Err(Error::arg(format!(
            "reports use different inputs: {:?} vs {:?}",
            candidate.input, reference.input
        )));
    }
    Ok(CostComparison {
        param_ratio: reference.total_params as f64 / candidate.total_params as f64,
        flop_ratio: reference.total_flops as f64 / candidate.total_flops as f64,
    })
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {}x{}x{}  (cost table v{})",
            self.input.0, self.input.1, self.input.2, self.table_version
        );
        let _ = writeln!(s, "{:>5}  {:<8} {:>16} {:>12} {:>16}", "layer", "kind", "output", "params", "flops");
        for l in &self.layers {
            let out = format!("{}x{}x{}", l.output.0, l.output.1, l.output.2);
            let _ = writeln!(s, "{:>5}  {:<8} {:>16} {:>12} {:>16}", l.index, l.kind, out, l.params, l.flops);
        }
        let _ = writeln!(s, "total params {}", self.total_params);
        let _ = writeln!(s, "total flops  {} ({:.3} GFLOPs)", self.total_flops, self.total_flops as f64 / 1e9);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,out_c,out_h,out_w,params,flops\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                l.index, l.kind, l.output.0, l.output.1, l.output.2, l.params, l.flops
            );
        }
        let _ = writeln!(s, "total,,,,,{},{}", self.total_params, self.total_flops);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
