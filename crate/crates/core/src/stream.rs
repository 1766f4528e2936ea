//! MAC accounting and a deterministic simulator of double-buffered weight
//! streaming (L3→L2 chunks, L2→L1 tiles) with a per-op throughput model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{bail, Result};
use crate::model::ModelConfig;

/// Memory sizes, bandwidths (bytes per cycle), clock and average power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemHierarchy {
    pub l1_bytes: u64,
    pub l2_bytes: u64,
    pub l3_chunk_bytes: u64,
    /// L3→L2 DMA bandwidth.
    pub l2_bandwidth: f64,
    /// L2→L1 DMA bandwidth.
    pub l1_bandwidth: f64,
    pub clock_hz: f64,
    pub avg_power_w: f64,
}

impl Default for MemHierarchy {
    fn default() -> Self {
        Self {
            l1_bytes: 131_072,
            l2_bytes: 1_572_864,
            l3_chunk_bytes: 81_920,
            l2_bandwidth: 0.5,
            l1_bandwidth: 8.0,
            clock_hz: 3.7e8,
            avg_power_w: 0.0441,
        }
    }
}

impl MemHierarchy {
    pub fn validate(&self) -> Result<()> {
        if self.l1_bytes == 0 || self.l2_bytes == 0 || self.l3_chunk_bytes == 0 {
            bail!(Config, "memory sizes must be positive");
        }
        if !(self.l2_bandwidth > 0.0 && self.l1_bandwidth > 0.0 && self.clock_hz > 0.0 && self.avg_power_w > 0.0) {
            bail!(Config, "bandwidths, clock and power must be positive");
        }
        if 2 * self.l3_chunk_bytes > self.l2_bytes {
            bail!(Config, "two chunks of {} bytes do not fit L2 ({} bytes)", self.l3_chunk_bytes, self.l2_bytes);
        }
        Ok(())
    }
}

/// How scan work is counted in MAC-equivalents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanAccounting {
    /// A fixed number of MAC-equivalents per channel and time step.
    PerStep(u64),
    /// `3·d_state + 1` multiplies per channel-step (decay, input, readout,
    /// skip).
    Analytic,
}

/// Throughputs in MACs/cycle and fixed cycle budgets of non-MAC ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub input_proj: f64,
    pub output_proj: f64,
    pub conv: f64,
    pub scan: f64,
    pub scan_accounting: ScanAccounting,
    pub patch_embed_cycles: f64,
    pub pos_embed_cycles: f64,
    /// Reversal of the sequence before the backward branch and of its
    /// output afterwards.
    pub reverse_in_cycles: f64,
    pub reverse_out_cycles: f64,
    pub fusion_cycles: f64,
    pub pool_cycles: f64,
    pub classifier_cycles: f64,
    /// Bytes per stored weight.
    pub weight_bytes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            input_proj: 2.65,
            output_proj: 3.91,
            conv: 0.11,
            scan: 0.32,
            scan_accounting: ScanAccounting::PerStep(256),
            patch_embed_cycles: 8.0e6,
            pos_embed_cycles: 2.3e6,
            reverse_in_cycles: 1.6e6,
            reverse_out_cycles: 1.0e6,
            fusion_cycles: 2.1e6,
            pool_cycles: 0.5e6,
            classifier_cycles: 0.05e6,
            weight_bytes: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let t = [self.input_proj, self.output_proj, self.conv, self.scan];
        if t.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            bail!(Config, "throughputs must be positive");
        }
        let fixed = [
            self.patch_embed_cycles,
            self.pos_embed_cycles,
            self.reverse_in_cycles,
            self.reverse_out_cycles,
            self.fusion_cycles,
            self.pool_cycles,
            self.classifier_cycles,
        ];
        if fixed.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.weight_bytes > 0.0) {
            bail!(Config, "fixed budgets must be non-negative and weight bytes positive");
        }
        Ok(())
    }
}

/// MACs of the sub-ops of one Mamba block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacTable {
    pub input_proj: u64,
    pub output_proj: u64,
    pub conv: u64,
    pub scan: u64,
}

impl MacTable {
    pub fn total(&self) -> u64 {
        self.input_proj + self.output_proj + self.conv + self.scan
    }
}

pub fn mac_count(c: &ModelConfig, scan: ScanAccounting) -> MacTable {
    let (t, d, e) = (c.n_tokens as u64, c.d_model as u64, c.d_inner as u64);
    let per_step = match scan {
        ScanAccounting::PerStep(k) => k,
        ScanAccounting::Analytic => 3 * c.d_state as u64 + 1,
    };
    MacTable { input_proj: t * d * 2 * e, output_proj: t * e * d, conv: t * e * c.d_conv as u64, scan: per_step * t * e }
}

/// Kind of work a sub-op does, selecting its throughput.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    InputProj,
    OutputProj,
    Conv,
    Scan,
    /// Fixed cycle budget, no MAC throughput.
    Fixed,
}

/// One streamed or computed step of the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub layer: usize,
    pub subop: usize,
    /// Byte range of the weight tensor in L3 (empty for compute-only steps).
    pub l3_range: (u64, u64),
    /// Double-buffer slot in L2.
    pub slot: u8,
    /// L2→L1 tile sizes inside this chunk.
    pub l1_tiles: Vec<u64>,
    pub macs: f64,
    /// Cycles for fixed-budget steps.
    pub fixed_cycles: f64,
}

impl Tile {
    pub fn bytes(&self) -> u64 {
        self.l3_range.1 - self.l3_range.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubOp {
    pub name: String,
    pub class: OpClass,
    pub macs: u64,
    pub weight_bytes: u64,
    /// Width of one indivisible weight row in bytes.
    pub row_bytes: u64,
    pub fixed_cycles: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub subops: Vec<SubOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub layers: Vec<LayerSpec>,
    pub tiles: Vec<Tile>,
}

impl StreamPlan {
    pub fn total_bytes(&self) -> u64 {
        self.tiles.iter().map(Tile::bytes).sum()
    }
}

fn bytes(n: u64, cm: &CostModel) -> u64 {
    libm::ceil(n as f64 * cm.weight_bytes) as u64
}

/// Per-layer work of a configuration, rows in report order.
pub fn layer_specs(c: &ModelConfig, cm: &CostModel) -> Vec<LayerSpec> {
    let macs = mac_count(c, cm.scan_accounting);
    let (d, e, n, r) = (c.d_model as u64, c.d_inner as u64, c.d_state as u64, c.dt_rank as u64);
    let fixed = |name: &str, cycles: f64| SubOp {
        name: name.into(),
        class: OpClass::Fixed,
        macs: 0,
        weight_bytes: 0,
        row_bytes: 0,
        fixed_cycles: cycles,
    };
    let tok_cols = (c.n_channels * c.patch_size) as u64;
    let tok_rows = (c.groups() * c.d_model) as u64;
    let mut layers = Vec::new();
    layers.push(LayerSpec {
        name: "patch_embed".into(),
        subops: vec_one(SubOp {
            name: "patch_embed".into(),
            class: OpClass::Fixed,
            macs: 0,
            weight_bytes: bytes(tok_rows * tok_cols, cm),
            row_bytes: bytes(tok_cols, cm),
            fixed_cycles: cm.patch_embed_cycles,
        }),
    });
    layers.push(LayerSpec { name: "pos_embed".into(), subops: vec_one(fixed("pos_embed", cm.pos_embed_cycles)) });
    for b in 0..c.n_blocks {
        let subops = alloc::vec![
            SubOp {
                name: "input_proj".into(),
                class: OpClass::InputProj,
                macs: macs.input_proj,
                weight_bytes: bytes(2 * e * d, cm),
                row_bytes: bytes(d, cm),
                fixed_cycles: 0.0,
            },
            SubOp {
                name: "local_conv".into(),
                class: OpClass::Conv,
                macs: macs.conv,
                weight_bytes: bytes(e * c.d_conv as u64, cm),
                row_bytes: bytes(c.d_conv as u64, cm),
                fixed_cycles: 0.0,
            },
            SubOp {
                name: "selective_scan".into(),
                class: OpClass::Scan,
                macs: macs.scan,
                weight_bytes: bytes((r + 2 * n) * e + e * r, cm),
                row_bytes: bytes(e, cm),
                fixed_cycles: 0.0,
            },
            fixed("sequence_reversal_in", cm.reverse_in_cycles),
            fixed("sequence_reversal_out", cm.reverse_out_cycles),
            SubOp {
                name: "output_proj".into(),
                class: OpClass::OutputProj,
                macs: macs.output_proj,
                weight_bytes: bytes(d * e, cm),
                row_bytes: bytes(e, cm),
                fixed_cycles: 0.0,
            },
            fixed("bidirectional_fusion", cm.fusion_cycles),
        ];
        layers.push(LayerSpec { name: format!("mamba_blocks.{b}"), subops });
    }
    layers.push(LayerSpec { name: "global_pool".into(), subops: vec_one(fixed("global_pool", cm.pool_cycles)) });
    layers.push(LayerSpec {
        name: "classifier".into(),
        subops: vec_one(SubOp {
            name: "classifier".into(),
            class: OpClass::Fixed,
            macs: 0,
            weight_bytes: bytes(c.n_classes as u64 * d, cm),
            row_bytes: bytes(d, cm),
            fixed_cycles: cm.classifier_cycles,
        }),
    });
    layers
}

fn vec_one(s: SubOp) -> Vec<SubOp> {
    alloc::vec![s]
}

/// Splits every weight tensor into L3 chunks and each chunk into L1 tiles.
pub fn plan_stream(layers: &[LayerSpec], h: &MemHierarchy) -> Result<StreamPlan> {
    h.validate()?;
    let half_l1 = h.l1_bytes / 2;
    let mut tiles = Vec::new();
    let mut slot = 0u8;
    for (li, layer) in layers.iter().enumerate() {
        for (si, op) in layer.subops.iter().enumerate() {
            if op.weight_bytes == 0 {
                tiles.push(Tile {
                    layer: li,
                    subop: si,
                    l3_range: (0, 0),
                    slot: 0,
                    l1_tiles: Vec::new(),
                    macs: op.macs as f64,
                    fixed_cycles: op.fixed_cycles,
                });
                continue;
            }
            if op.row_bytes > half_l1 {
                bail!(Planning, "{}/{}: a {}-byte row does not fit half of L1 ({} bytes)", layer.name, op.name, op.row_bytes, half_l1);
            }
            let n_chunks = op.weight_bytes.div_ceil(h.l3_chunk_bytes);
            let mut start = 0;
            for _ in 0..n_chunks {
                let end = (start + h.l3_chunk_bytes).min(op.weight_bytes);
                let len = end - start;
                let mut l1_tiles = Vec::with_capacity(len.div_ceil(half_l1) as usize);
                let mut left = len;
                while left > 0 {
                    let t = left.min(half_l1);
                    l1_tiles.push(t);
                    left -= t;
                }
                let share = len as f64 / op.weight_bytes as f64;
                tiles.push(Tile {
                    layer: li,
                    subop: si,
                    l3_range: (start, end),
                    slot,
                    l1_tiles,
                    macs: op.macs as f64 * share,
                    fixed_cycles: op.fixed_cycles * share,
                });
                slot ^= 1;
                start = end;
            }
        }
    }
    Ok(StreamPlan { layers: layers.to_vec(), tiles })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubOpReport {
    pub name: String,
    pub macs: u64,
    pub cycles: f64,
}

impl SubOpReport {
    pub fn macs_per_cycle(&self) -> f64 {
        if self.cycles > 0.0 {
            self.macs as f64 / self.cycles
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    /// Wall-clock cycles attributed to the layer, stalls included.
    pub cycles: f64,
    pub macs: u64,
    pub transfer_cycles: f64,
    pub hidden_transfer_cycles: f64,
    pub subops: Vec<SubOpReport>,
}

impl LayerReport {
    /// Hidden share of the layer's transfers; 100 when nothing is moved.
    pub fn overlap_pct(&self) -> f64 {
        if self.transfer_cycles > 0.0 {
            (100.0 * self.hidden_transfer_cycles / self.transfer_cycles).min(100.0)
        } else {
            100.0
        }
    }

    pub fn macs_per_cycle(&self) -> f64 {
        if self.cycles > 0.0 {
            self.macs as f64 / self.cycles
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub layers: Vec<LayerReport>,
    pub total_cycles: f64,
    pub latency_s: f64,
    pub energy_j: f64,
    /// Cycles of the leading transfer that fills the pipeline.
    pub fill_cycles: f64,
}

impl CycleReport {
    pub fn percent(&self, layer: usize) -> f64 {
        if self.total_cycles > 0.0 {
            100.0 * self.layers[layer].cycles / self.total_cycles
        } else {
            0.0
        }
    }

    pub fn overlap_pct(&self) -> f64 {
        let t: f64 = self.layers.iter().map(|l| l.transfer_cycles).sum();
        let hdn: f64 = self.layers.iter().map(|l| l.hidden_transfer_cycles).sum();
        if t > 0.0 {
            (100.0 * hdn / t).min(100.0)
        } else {
            100.0
        }
    }
}

fn throughput(cm: &CostModel, c: OpClass) -> Option<f64> {
    match c {
        OpClass::InputProj => Some(cm.input_proj),
        OpClass::OutputProj => Some(cm.output_proj),
        OpClass::Conv => Some(cm.conv),
        OpClass::Scan => Some(cm.scan),
        OpClass::Fixed => None,
    }
}

/// Compute cycles of a chunk: its L1 tiles run double-buffered, the first
/// tile's load is exposed and every later load overlaps the previous
/// tile's compute.
fn chunk_compute(tile: &Tile, class: OpClass, cm: &CostModel, h: &MemHierarchy) -> f64 {
    let mac_cycles = throughput(cm, class).map_or(0.0, |t| tile.macs / t);
    let work = mac_cycles + tile.fixed_cycles;
    let Some(&first) = tile.l1_tiles.first() else {
        return work;
    };
    let total: u64 = tile.l1_tiles.iter().sum();
    let load = |b: u64| b as f64 / h.l1_bandwidth;
    let mut cycles = load(first);
    for (i, &b) in tile.l1_tiles.iter().enumerate() {
        let next = tile.l1_tiles.get(i + 1).map_or(0.0, |&n| load(n));
        cycles += (work * b as f64 / total as f64).max(next);
    }
    cycles
}

/// Event simulation of the plan.
///
/// One DMA queue moves chunks in plan order into two alternating L2 slots; a
/// chunk's transfer may start once the chunk two places earlier has been
/// consumed. Compute starts when its chunk has arrived. A transfer is hidden
/// to the extent compute was busy while it ran; the very first transfer
/// fills the pipeline and is reported separately.
pub fn simulate(plan: &StreamPlan, cm: &CostModel, h: &MemHierarchy) -> Result<CycleReport> {
    cm.validate()?;
    h.validate()?;
    let mut layers: Vec<LayerReport> = plan
        .layers
        .iter()
        .map(|l| LayerReport {
            name: l.name.clone(),
            cycles: 0.0,
            macs: l.subops.iter().map(|s| s.macs).sum(),
            transfer_cycles: 0.0,
            hidden_transfer_cycles: 0.0,
            subops: l.subops.iter().map(|s| SubOpReport { name: s.name.clone(), macs: s.macs, cycles: 0.0 }).collect(),
        })
        .collect();
    let mut dma_end = 0.0f64;
    let mut compute_end = 0.0f64;
    // compute end times of the last two streamed chunks (slot reuse)
    let mut consumed = [0.0f64; 2];
    let mut fill = 0.0;
    let mut first_transfer = true;
    for tile in &plan.tiles {
        let op = &plan.layers[tile.layer].subops[tile.subop];
        let compute = chunk_compute(tile, op.class, cm, h);
        let before = compute_end;
        let start = if tile.bytes() > 0 {
            let xfer = tile.bytes() as f64 / h.l2_bandwidth;
            let t0 = dma_end.max(consumed[0]);
            dma_end = t0 + xfer;
            let stall = (dma_end - compute_end).max(0.0);
            let rep = &mut layers[tile.layer];
            if first_transfer {
                fill = xfer;
                first_transfer = false;
            } else {
                rep.transfer_cycles += xfer;
                rep.hidden_transfer_cycles += (xfer - stall).max(0.0);
            }
            compute_end.max(dma_end)
        } else {
            compute_end
        };
        compute_end = start + compute;
        if tile.bytes() > 0 {
            consumed = [consumed[1], compute_end];
        }
        let rep = &mut layers[tile.layer];
        rep.cycles += compute_end - before;
        rep.subops[tile.subop].cycles += compute_end - before;
    }
    let total = compute_end;
    let latency = total / h.clock_hz;
    Ok(CycleReport { layers, total_cycles: total, latency_s: latency, energy_j: latency * h.avg_power_w, fill_cycles: fill })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

pub const CSV_HEADER: &str = "layer,subop,cycles,percent,overlap_pct,macs,macs_per_cycle";

/// Renders per-layer rows followed by each layer's sub-op rows.
pub fn report(cr: &CycleReport, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for (i, l) in cr.layers.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},,{:.0},{:.3},{:.3},{},{:.4}",
                    l.name,
                    l.cycles,
                    cr.percent(i),
                    l.overlap_pct(),
                    l.macs,
                    l.macs_per_cycle()
                );
            }
            for l in &cr.layers {
                if l.subops.len() < 2 {
                    continue;
                }
                for so in &l.subops {
                    let pct = if l.cycles > 0.0 { 100.0 * so.cycles / l.cycles } else { 0.0 };
                    let _ = writeln!(s, "{},{},{:.0},{:.3},,{},{:.4}", l.name, so.name, so.cycles, pct, so.macs, so.macs_per_cycle());
                }
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(s, "{:<16} {:>14} {:>8} {:>9} {:>14} {:>9}", "layer", "cycles", "%", "overlap%", "MACs", "MACs/cyc");
            for (i, l) in cr.layers.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:<16} {:>14.0} {:>8.2} {:>9.2} {:>14} {:>9.3}",
                    l.name,
                    l.cycles,
                    cr.percent(i),
                    l.overlap_pct(),
                    l.macs,
                    l.macs_per_cycle()
                );
            }
            for l in &cr.layers {
                if l.subops.len() < 2 {
                    continue;
                }
                let _ = writeln!(s, "\n{}", l.name);
                for so in &l.subops {
                    let pct = if l.cycles > 0.0 { 100.0 * so.cycles / l.cycles } else { 0.0 };
                    let _ = writeln!(
                        s,
                        "  {:<22} {:>14.0} {:>8.2} {:>14} {:>9.3}",
                        so.name,
                        so.cycles,
                        pct,
                        so.macs,
                        so.macs_per_cycle()
                    );
                }
            }
            let _ = writeln!(
                s,
                "\ntotal {:.0} cycles, {:.4} s, {:.3} mJ, overlap {:.2}%",
                cr.total_cycles,
                cr.latency_s,
                cr.energy_j * 1e3,
                cr.overlap_pct()
            );
        }
    }
    s
}

/// Plan and simulate a configuration in one step.
pub fn bench(c: &ModelConfig, cm: &CostModel, h: &MemHierarchy) -> Result<CycleReport> {
    cm.validate()?;
    let plan = plan_stream(&layer_specs(c, cm), h)?;
    simulate(&plan, cm, h)
}
