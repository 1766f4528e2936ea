//! Float forward pass with quantize→dequantize inserted at every weight and
//! activation point, and bias correction against the float model.

use alloc::vec;
use alloc::vec::Vec;

use super::calib::ActScales;
use super::image::{quantize_layer, QuantMode};
use crate::error::{bail, Result};
use crate::fixed::{pow2, quantize_i8};
use crate::model::{forward_with, ActPoint, FembaWeights, Hook, LayerId};
use crate::tensor::Matrix;

/// Bit width that disables quantization.
pub const PASSTHROUGH_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FakeQuantConfig {
    /// 2, 4, 8, or 32 for float weights.
    pub weight_bits: u32,
    /// 8, or 32 for float activations.
    pub act_bits: u32,
}

impl FakeQuantConfig {
    pub const DISABLED: Self = Self { weight_bits: PASSTHROUGH_BITS, act_bits: PASSTHROUGH_BITS };

    pub fn from_mode(mode: QuantMode) -> Self {
        Self { weight_bits: mode.weight_bits(), act_bits: 8 }
    }

    fn layer_bits(&self, layer: LayerId) -> u32 {
        match layer {
            LayerId::Classifier => self.weight_bits.max(8),
            _ => self.weight_bits,
        }
    }
}

fn pow2_i8_fake(x: &[f64]) -> Vec<f64> {
    let n = super::image::param_exponent(x);
    x.iter().map(|&v| quantize_i8(v, n) as f64 * pow2(-n)).collect()
}

/// Weights as the integer image represents them: dequantized per-channel
/// linear weights, power-of-two `pos_embed` and `D`. `A_log` stays float.
pub fn fake_quant_weights(w: &FembaWeights, cfg: &FakeQuantConfig) -> Result<FembaWeights> {
    if cfg.weight_bits == PASSTHROUGH_BITS {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    for id in LayerId::all(&w.config) {
        let bits = cfg.layer_bits(id);
        let pq = quantize_layer(&id.get(w).weight, bits)?;
        id.get_mut(&mut out).weight = pq.dequantize();
    }
    let pos = pow2_i8_fake(w.pos_embed.data());
    out.pos_embed = Matrix::from_vec(w.pos_embed.rows(), w.pos_embed.cols(), pos)?;
    for blk in &mut out.blocks {
        for br in [&mut blk.fwd, &mut blk.bwd] {
            br.d = pow2_i8_fake(&br.d);
        }
    }
    Ok(out)
}

/// Rounds every activation to its power-of-two grid.
pub struct FakeQuantHook<'a> {
    scales: &'a ActScales,
    enabled: bool,
}

impl<'a> FakeQuantHook<'a> {
    pub fn new(scales: &'a ActScales, act_bits: u32) -> Self {
        Self { scales, enabled: act_bits != PASSTHROUGH_BITS }
    }
}

impl Hook for FakeQuantHook<'_> {
    fn act(&mut self, point: ActPoint, x: &mut [f64]) {
        if !self.enabled {
            return;
        }
        let q = self.scales[&point];
        for v in x.iter_mut() {
            *v = q.fake(*v);
        }
    }
}

fn check_scales(w: &FembaWeights, scales: &ActScales) -> Result<()> {
    for p in ActPoint::all(&w.config) {
        if !scales.contains_key(&p) {
            bail!(Config, "missing activation scale for {}", p.name());
        }
    }
    Ok(())
}

/// Forward pass of already fake-quantized weights (see
/// [`fake_quant_weights`]) with activation fake-quantization.
pub fn fake_quant_forward_prepared(x: &Matrix, wq: &FembaWeights, scales: &ActScales, act_bits: u32) -> Result<Vec<f64>> {
    if act_bits != PASSTHROUGH_BITS {
        check_scales(wq, scales)?;
    }
    forward_with(x, wq, &mut FakeQuantHook::new(scales, act_bits))
}

pub fn fake_quant_forward(x: &Matrix, w: &FembaWeights, cfg: &FakeQuantConfig, scales: &ActScales) -> Result<Vec<f64>> {
    let wq = fake_quant_weights(w, cfg)?;
    fake_quant_forward_prepared(x, &wq, scales, cfg.act_bits)
}

/// Captures the input and pre-activation output of one layer while
/// fake-quantizing activations.
struct Capture<'a> {
    inner: FakeQuantHook<'a>,
    layer: LayerId,
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl Hook for Capture<'_> {
    fn act(&mut self, point: ActPoint, x: &mut [f64]) {
        self.inner.act(point, x);
    }

    fn linear(&mut self, layer: LayerId, input: &Matrix, output: &mut Matrix) {
        if layer == self.layer {
            self.inputs.push(input.clone());
            self.outputs.push(output.clone());
        }
    }
}

/// Sequential bias correction in evaluation order.
///
/// For each layer, the deployed model (with corrections so far) is run on the
/// calibration set; the layer's captured input is pushed through the
/// `reference` weights, and the per-channel mean of
/// `reference_output - deployed_output` is added to the deployed bias.
pub fn bias_correct_against(
    reference: &FembaWeights,
    deployed: &FembaWeights,
    windows: &[Matrix],
    scales: &ActScales,
    act_bits: u32,
) -> Result<FembaWeights> {
    if act_bits != PASSTHROUGH_BITS {
        check_scales(deployed, scales)?;
    }
    let mut out = deployed.clone();
    for id in LayerId::all(&deployed.config) {
        let mut cap = Capture { inner: FakeQuantHook::new(scales, act_bits), layer: id, inputs: vec![], outputs: vec![] };
        for x in windows {
            forward_with(x, &out, &mut cap)?;
        }
        let n_out = id.get(&out).out_features();
        let mut sum = vec![0.0; n_out];
        let mut rows = 0usize;
        for (inp, got) in cap.inputs.iter().zip(&cap.outputs) {
            let want = id.apply(reference, inp);
            for r in 0..got.rows() {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += want.get(r, c) - got.get(r, c);
                }
            }
            rows += got.rows();
        }
        if rows == 0 {
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        id.get_mut(&mut out).add_bias(&mean);
    }
    Ok(out)
}

/// Bias correction of the fake-quantized model against the float one.
/// Returns the float checkpoint with corrected biases.
pub fn bias_correct(w: &FembaWeights, windows: &[Matrix], scales: &ActScales, cfg: &FakeQuantConfig) -> Result<FembaWeights> {
    if windows.is_empty() {
        bail!(Calibration, "bias correction needs at least one window");
    }
    let wq = fake_quant_weights(w, cfg)?;
    let corrected = bias_correct_against(w, &wq, windows, scales, cfg.act_bits)?;
    let mut out = w.clone();
    for id in LayerId::all(&w.config) {
        out_bias(&mut out, id, &corrected);
    }
    Ok(out)
}

fn out_bias(out: &mut FembaWeights, id: LayerId, from: &FembaWeights) {
    id.get_mut(out).bias = id.get(from).bias.clone();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::quant::calib::{calibrate, CalibConfig};

    fn windows(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Matrix> {
        (0..n)
            .map(|k| {
                Matrix::from_fn(cfg.n_channels, cfg.n_samples, |c, t| {
                    let ph = (seed * 7 + k as u64 * 13 + c as u64 * 3) as f64;
                    libm::sin(t as f64 * 0.3 + ph) + 0.3 * libm::cos(t as f64 * 1.1 + ph * 0.5)
                })
            })
            .collect()
    }

    #[test]
    fn disabled_equals_float_bitwise() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 3);
        let ws = windows(&cfg, 3, 1);
        let scales = ActScales::new();
        for x in &ws {
            let a = forward(x, &w).unwrap();
            let b = fake_quant_forward(x, &w, &FakeQuantConfig::DISABLED, &scales).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn missing_scale_is_config_error() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 3);
        let x = &windows(&cfg, 1, 0)[0];
        let mut scales = calibrate(&w, core::slice::from_ref(x), &CalibConfig::default()).unwrap();
        scales.remove(&ActPoint::Pooled);
        let r = fake_quant_forward(x, &w, &FakeQuantConfig::from_mode(QuantMode::W8A8), &scales);
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn w2a8_is_reproducible() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 9);
        let ws = windows(&cfg, 2, 4);
        let scales = calibrate(&w, &ws, &CalibConfig::default()).unwrap();
        let fq = FakeQuantConfig::from_mode(QuantMode::W2A8);
        let a = fake_quant_forward(&ws[0], &w, &fq, &scales).unwrap();
        let b = fake_quant_forward(&ws[0], &w, &fq, &scales).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn no_correction_when_identical() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 5);
        let ws = windows(&cfg, 2, 2);
        let c = bias_correct(&w, &ws, &ActScales::new(), &FakeQuantConfig::DISABLED).unwrap();
        for id in LayerId::all(&cfg) {
            let (a, b) = (id.get(&w), id.get(&c));
            for o in 0..a.out_features() {
                assert_eq!(a.bias_or_zero(o), b.bias_or_zero(o), "{}", id.name());
            }
        }
    }

    #[test]
    fn injected_offset_is_removed() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 6);
        let ws = windows(&cfg, 2, 3);
        let mut shifted = w.clone();
        let offsets: Vec<f64> = (0..cfg.d_model).map(|j| 0.05 * (j as f64 - 3.0)).collect();
        let id = LayerId::Branch { block: 1, dir: crate::model::Direction::Bwd, layer: crate::model::BranchLayer::OutProj };
        id.get_mut(&mut shifted).add_bias(&offsets);
        let fixed = bias_correct_against(&w, &shifted, &ws, &ActScales::new(), PASSTHROUGH_BITS).unwrap();
        for o in 0..cfg.d_model {
            assert!((id.get(&fixed).bias_or_zero(o) - id.get(&w).bias_or_zero(o)).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_layers_have_zero_mean_error() {
        let cfg = ModelConfig::micro();
        let w = FembaWeights::random(&cfg, 8);
        let ws = windows(&cfg, 3, 5);
        let scales = calibrate(&w, &ws, &CalibConfig::default()).unwrap();
        let fq = FakeQuantConfig::from_mode(QuantMode::W4A8);
        let wq = fake_quant_weights(&w, &fq).unwrap();
        let corrected = bias_correct_against(&w, &wq, &ws, &scales, fq.act_bits).unwrap();
        // recompute the last layer's residual mean directly
        let id = LayerId::Classifier;
        let mut cap = Capture { inner: FakeQuantHook::new(&scales, 8), layer: id, inputs: vec![], outputs: vec![] };
        for x in &ws {
            forward_with(x, &corrected, &mut cap).unwrap();
        }
        for c in 0..cfg.n_classes {
            let mut s = 0.0;
            for (inp, got) in cap.inputs.iter().zip(&cap.outputs) {
                s += id.apply(&w, inp).get(0, c) - got.get(0, c);
            }
            assert!((s / ws.len() as f64).abs() <= 1e-6);
        }
    }
}
