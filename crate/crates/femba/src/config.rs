//! Key-value configuration file.
//!
//! The file is flat TOML: `key = value` lines, `#` comments. Every key is
//! optional and unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `model` | `"tiny"` | `tiny` (deployed shapes) or `micro` |
//! | `n_classes` | 2 | classifier outputs |
//! | `fusion` | `"sum"` | `sum`, `mean` or `concat_project` |
//! | `l1_bytes`, `l2_bytes`, `l3_chunk_bytes` | 131072, 1572864, 81920 | memory sizes |
//! | `l2_bandwidth`, `l1_bandwidth` | 0.5, 8.0 | DMA bytes per cycle |
//! | `clock_hz`, `avg_power_w` | 3.7e8, 0.0441 | clock and average power |
//! | `input_proj_throughput`, `output_proj_throughput`, `conv_throughput`, `scan_throughput` | 2.65, 3.91, 0.11, 0.32 | MACs per cycle |
//! | `scan_accounting` | `"per_step"` | `per_step` or `analytic` |
//! | `scan_macs_per_step` | 256 | MAC-equivalents per channel-step |
//! | `patch_embed_cycles`, `pos_embed_cycles`, `reverse_in_cycles`, `reverse_out_cycles`, `fusion_cycles`, `pool_cycles`, `classifier_cycles` | see [`CostModel::default`] | fixed budgets |
//! | `weight_bytes` | 1.0 | bytes per streamed weight |
//! | `bandpass_lo_hz`, `bandpass_hi_hz` | 1, 75 | band-pass edges |
//! | `notch_hz` | 60 | notch centre, 0 disables |
//! | `target_rate_hz` | 256 | resampling target |
//! | `iqr_scope` | `"window"` | `window` or `recording` |
//! | `calib_percentile`, `calib_max_exponent` | 99.9, 15 | activation calibration |

use std::path::Path;

use femba_core::model::{Fusion, ModelConfig};
use femba_core::quant::CalibConfig;
use femba_core::signal::{IqrScope, PreprocessConfig};
use femba_core::stream::{CostModel, MemHierarchy, ScanAccounting};
use serde::Deserialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub n_classes: Option<usize>,
    pub fusion: Option<String>,

    pub l1_bytes: Option<u64>,
    pub l2_bytes: Option<u64>,
    pub l3_chunk_bytes: Option<u64>,
    pub l2_bandwidth: Option<f64>,
    pub l1_bandwidth: Option<f64>,
    pub clock_hz: Option<f64>,
    pub avg_power_w: Option<f64>,

    pub input_proj_throughput: Option<f64>,
    pub output_proj_throughput: Option<f64>,
    pub conv_throughput: Option<f64>,
    pub scan_throughput: Option<f64>,
    pub scan_accounting: Option<String>,
    pub scan_macs_per_step: Option<u64>,
    pub patch_embed_cycles: Option<f64>,
    pub pos_embed_cycles: Option<f64>,
    pub reverse_in_cycles: Option<f64>,
    pub reverse_out_cycles: Option<f64>,
    pub fusion_cycles: Option<f64>,
    pub pool_cycles: Option<f64>,
    pub classifier_cycles: Option<f64>,
    pub weight_bytes: Option<f64>,

    pub bandpass_lo_hz: Option<f64>,
    pub bandpass_hi_hz: Option<f64>,
    pub notch_hz: Option<f64>,
    pub target_rate_hz: Option<f64>,
    pub iqr_scope: Option<String>,

    pub calib_percentile: Option<f64>,
    pub calib_max_exponent: Option<i32>,
}

impl FileConfig {
    pub fn parse(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.message().to_owned()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let n = self.n_classes.unwrap_or(2);
        let mut c = match self.model.as_deref().unwrap_or("tiny") {
            "tiny" => ModelConfig::femba_tiny(n),
            "micro" => ModelConfig { n_classes: n, ..ModelConfig::micro() },
            m => return Err(Error::Config(format!("unknown model `{m}`"))),
        };
        c.fusion = match self.fusion.as_deref().unwrap_or("sum") {
            "sum" => Fusion::Sum,
            "mean" => Fusion::Mean,
            "concat_project" => Fusion::ConcatProject,
            f => return Err(Error::Config(format!("unknown fusion `{f}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn hierarchy(&self) -> Result<MemHierarchy> {
        let d = MemHierarchy::default();
        let h = MemHierarchy {
            l1_bytes: self.l1_bytes.unwrap_or(d.l1_bytes),
            l2_bytes: self.l2_bytes.unwrap_or(d.l2_bytes),
            l3_chunk_bytes: self.l3_chunk_bytes.unwrap_or(d.l3_chunk_bytes),
            l2_bandwidth: self.l2_bandwidth.unwrap_or(d.l2_bandwidth),
            l1_bandwidth: self.l1_bandwidth.unwrap_or(d.l1_bandwidth),
            clock_hz: self.clock_hz.unwrap_or(d.clock_hz),
            avg_power_w: self.avg_power_w.unwrap_or(d.avg_power_w),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        let d = CostModel::default();
        let scan_accounting = match self.scan_accounting.as_deref().unwrap_or("per_step") {
            "per_step" => ScanAccounting::PerStep(self.scan_macs_per_step.unwrap_or(256)),
            "analytic" => ScanAccounting::Analytic,
            s => return Err(Error::Config(format!("unknown scan accounting `{s}`"))),
        };
        let cm = CostModel {
            input_proj: self.input_proj_throughput.unwrap_or(d.input_proj),
            output_proj: self.output_proj_throughput.unwrap_or(d.output_proj),
            conv: self.conv_throughput.unwrap_or(d.conv),
            scan: self.scan_throughput.unwrap_or(d.scan),
            scan_accounting,
            patch_embed_cycles: self.patch_embed_cycles.unwrap_or(d.patch_embed_cycles),
            pos_embed_cycles: self.pos_embed_cycles.unwrap_or(d.pos_embed_cycles),
            reverse_in_cycles: self.reverse_in_cycles.unwrap_or(d.reverse_in_cycles),
            reverse_out_cycles: self.reverse_out_cycles.unwrap_or(d.reverse_out_cycles),
            fusion_cycles: self.fusion_cycles.unwrap_or(d.fusion_cycles),
            pool_cycles: self.pool_cycles.unwrap_or(d.pool_cycles),
            classifier_cycles: self.classifier_cycles.unwrap_or(d.classifier_cycles),
            weight_bytes: self.weight_bytes.unwrap_or(d.weight_bytes),
        };
        cm.validate()?;
        Ok(cm)
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        let d = PreprocessConfig::default();
        let iqr_scope = match self.iqr_scope.as_deref().unwrap_or("window") {
            "window" => IqrScope::Window,
            "recording" => IqrScope::Recording,
            s => return Err(Error::Config(format!("unknown iqr scope `{s}`"))),
        };
        Ok(PreprocessConfig {
            bandpass_hz: (self.bandpass_lo_hz.unwrap_or(d.bandpass_hz.0), self.bandpass_hi_hz.unwrap_or(d.bandpass_hz.1)),
            notch_hz: match self.notch_hz {
                Some(0.0) => None,
                Some(f) => Some(f),
                None => d.notch_hz,
            },
            target_rate_hz: self.target_rate_hz.unwrap_or(d.target_rate_hz),
            iqr_scope,
        })
    }

    pub fn calibration(&self) -> CalibConfig {
        let d = CalibConfig::default();
        CalibConfig {
            percentile: self.calib_percentile.unwrap_or(d.percentile),
            max_exponent: self.calib_max_exponent.unwrap_or(d.max_exponent),
        }
    }
}
