use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibStats, DEFAULT_ALPHA, DEFAULT_DAMPING};
use crate::error::{Result, SqError};
use crate::format::{decode_weight, quantize_uniform, Granularity, PrecisionPair, SqConfig};
use crate::matrix::{relative_frobenius, Matrix};
use crate::perfmodel::{equivalent_bits_activation, equivalent_bits_weight, static_split_speedup};
use crate::quantizers::{
    activation_channel_importance, build_activation_plan, quantize_activations_dynamic,
    quantize_activations_static, PreparedWeights,
};

use super::synth::{gen_synthetic_layer, SynthSpec};

/// Quantization methods evaluated by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SqWeights,
    SqActStatic,
    SqActDynamic,
    /// Weights at `h_low` bits with one scale per (bank, column) group.
    Uniform,
    /// SQ with `b = 4`, `s = 0.5`, `h_low = 0`.
    Sparse24,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SqWeights,
        Method::SqActStatic,
        Method::SqActDynamic,
        Method::Uniform,
        Method::Sparse24,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SqWeights => "sq_weights",
            Method::SqActStatic => "sq_act_static",
            Method::SqActDynamic => "sq_act_dynamic",
            Method::Uniform => "uniform",
            Method::Sparse24 => "sparse24",
        }
    }

    fn is_weight_side(&self) -> bool {
        matches!(self, Method::SqWeights | Method::Uniform | Method::Sparse24)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SqError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SqError::param(format!("unknown method '{s}'")))
    }
}

/// A synthetic layer shape; `m` rows are drawn for calibration and again for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub k: usize,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub bank_sizes: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub precisions: Vec<PrecisionPair>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub shapes: Vec<LayerShape>,
    pub outlier_frac: f64,
    pub outlier_scale: f64,
    pub alpha: f64,
    pub damping: f64,
    /// End-to-end speedup of full low precision, fed to the speedup model.
    pub full_low_speedup: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let pp = |h, l| PrecisionPair::new(h, l).expect("valid default precision");
        Self {
            bank_sizes: vec![4, 8, 16, 32, 64, 128],
            sparsities: vec![0.5, 0.75, 0.875, 0.9375],
            precisions: vec![pp(8, 4), pp(8, 3), pp(8, 2), pp(4, 2)],
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            shapes: vec![LayerShape { k: 512, n: 512, m: 64 }],
            outlier_frac: 0.01,
            outlier_scale: 50.0,
            alpha: DEFAULT_ALPHA,
            damping: DEFAULT_DAMPING,
            full_low_speedup: 1.92,
        }
    }
}

/// One grid point result. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: Method,
    pub b: usize,
    pub s: f64,
    pub h_high: u8,
    pub h_low: u8,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Relative reconstruction error of the quantized operand.
    pub w_err: f64,
    /// Relative error of the layer output against the float product.
    pub out_err: f64,
    pub eq_bits: f64,
    pub model_speedup: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    /// Human-readable reasons for skipped grid points.
    pub skipped: Vec<String>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| SqError::Report(e.to_string()))
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Mean of `out_err` over seeds for each matching grid point.
    pub fn mean_out_err(&self, method: Method, b: usize, s: f64, precision: PrecisionPair) -> Option<f64> {
        let errs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.method == method
                    && r.b == b
                    && r.s == s
                    && r.h_high == precision.high()
                    && r.h_low == precision.low()
            })
            .map(|r| r.out_err)
            .collect();
        if errs.is_empty() {
            None
        } else {
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    }
}

fn valid_configs(cfg: &SweepConfig, k: usize, skipped: &mut Vec<String>) -> Vec<SqConfig> {
    let mut out = Vec::new();
    for &precision in &cfg.precisions {
        for &b in &cfg.bank_sizes {
            for &s in &cfg.sparsities {
                match SqConfig::new(b, s, precision.high(), precision.low()) {
                    Ok(c) if k % b == 0 => out.push(c),
                    Ok(_) => skipped.push(format!("b={b} s={s} ({precision}): b does not divide K={k}")),
                    Err(e) => skipped.push(format!("b={b} s={s} ({precision}): {e}")),
                }
            }
        }
    }
    out
}

struct Task {
    shape: LayerShape,
    seed: u64,
    configs: Vec<SqConfig>,
}

/// Runs every method over every valid grid point, seed and layer shape.
///
/// Tasks run in parallel per (shape, seed); the record order is fixed by the
/// input order, so identical configurations produce identical reports.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.methods.is_empty() || cfg.seeds.is_empty() || cfg.shapes.is_empty() {
        return Err(SqError::param("sweep needs at least one method, seed and shape"));
    }
    if !(cfg.full_low_speedup > 0.0) {
        return Err(SqError::param("full low-precision speedup must be positive"));
    }
    let mut skipped = Vec::new();
    let mut tasks = Vec::new();
    for &shape in &cfg.shapes {
        let configs = valid_configs(cfg, shape.k, &mut skipped);
        for &seed in &cfg.seeds {
            tasks.push(Task {
                shape,
                seed,
                configs: configs.clone(),
            });
        }
    }
    skipped.sort();
    skipped.dedup();
    for reason in &skipped {
        info!("skipping grid point {reason}");
    }
    let per_task: Vec<Result<Vec<SweepRecord>>> = tasks.par_iter().map(|t| run_task(cfg, t)).collect();
    let mut records = Vec::new();
    for r in per_task {
        records.extend(r?);
    }
    Ok(SweepReport { records, skipped })
}

fn run_task(cfg: &SweepConfig, task: &Task) -> Result<Vec<SweepRecord>> {
    let LayerShape { k, n, m } = task.shape;
    let layer = gen_synthetic_layer(&SynthSpec {
        k,
        n,
        m,
        outlier_frac: cfg.outlier_frac,
        outlier_scale: cfg.outlier_scale,
        seed: task.seed,
    })?;
    let stats = CalibStats::from_batch(&layer.calib)?;
    let prepared = PreparedWeights::new(&layer.w, &stats, cfg.alpha, cfg.damping)?;
    let w_s = &prepared.smooth.w_smoothed;
    let a_s = prepared.smooth.smooth_activations(&layer.eval)?;
    let y_true = layer.eval.matmul(&layer.w)?;
    let out_err = |y_hat: &Matrix| relative_frobenius(&y_true, y_hat);
    let speedup = |s: f64| static_split_speedup(s, cfg.full_low_speedup, 0.0);

    let record = |method: Method, c: &SqConfig, w_err: f64, out_err: f64| -> Result<SweepRecord> {
        let s = c.banking.sparsity();
        let eq_bits = if method.is_weight_side() {
            equivalent_bits_weight(c.precision, s)
        } else {
            equivalent_bits_activation(c.precision, s)
        };
        Ok(SweepRecord {
            method,
            b: c.banking.bank_size(),
            s,
            h_high: c.precision.high(),
            h_low: c.precision.low(),
            seed: task.seed,
            k,
            n,
            w_err,
            out_err,
            eq_bits,
            model_speedup: speedup(s)?,
        })
    };

    let mut records = Vec::new();
    for &method in &cfg.methods {
        match method {
            Method::SqWeights => {
                for c in &task.configs {
                    let w_hat = decode_weight(&prepared.quantize(*c)?)?;
                    let e = out_err(&a_s.matmul(&w_hat)?)?;
                    records.push(record(method, c, relative_frobenius(w_s, &w_hat)?, e)?);
                }
            }
            Method::SqActStatic | Method::SqActDynamic => {
                let abar = prepared.smooth.smooth_abar(&stats.abar());
                let importance = activation_channel_importance(&abar, w_s)?;
                for c in &task.configs {
                    let split = if method == Method::SqActStatic {
                        let plan = build_activation_plan(&importance, c.banking, c.precision)?;
                        quantize_activations_static(&a_s, &plan)?
                    } else {
                        quantize_activations_dynamic(&a_s, c.banking, c.precision)?
                    };
                    let a_hat = split.dequantize();
                    let e = out_err(&a_hat.matmul(w_s)?)?;
                    records.push(record(method, c, relative_frobenius(&a_s, &a_hat)?, e)?);
                }
            }
            Method::Uniform => {
                let mut seen = Vec::new();
                for c in &task.configs {
                    let key = (c.banking.bank_size(), c.precision);
                    if seen.contains(&key) {
                        continue;
                    }
                    seen.push(key);
                    if c.precision.low() < 2 {
                        continue;
                    }
                    let q = quantize_uniform(
                        &layer.w,
                        c.precision.low(),
                        Granularity::PerBankColumn {
                            bank_size: c.banking.bank_size(),
                        },
                    )?;
                    let w_hat = q.dequantize();
                    let e = out_err(&layer.eval.matmul(&w_hat)?)?;
                    let bits = f64::from(c.precision.low());
                    records.push(SweepRecord {
                        method,
                        b: c.banking.bank_size(),
                        s: 1.0,
                        h_high: c.precision.high(),
                        h_low: c.precision.low(),
                        seed: task.seed,
                        k,
                        n,
                        w_err: relative_frobenius(&layer.w, &w_hat)?,
                        out_err: e,
                        eq_bits: bits,
                        model_speedup: speedup(1.0)?,
                    });
                }
            }
            Method::Sparse24 => {
                let mut highs: Vec<u8> = cfg.precisions.iter().map(|p| p.high()).collect();
                highs.sort_unstable();
                highs.dedup();
                if k % 4 != 0 {
                    continue;
                }
                for h in highs {
                    let c = SqConfig::new(4, 0.5, h, 0)?;
                    let w_hat = decode_weight(&prepared.quantize(c)?)?;
                    let e = out_err(&a_s.matmul(&w_hat)?)?;
                    records.push(record(method, &c, relative_frobenius(w_s, &w_hat)?, e)?);
                }
            }
        }
    }
    Ok(records)
}
