use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use sqformat::calibration::{smooth, CalibStats};
use sqformat::format::{decode_weight, quantize_uniform, Granularity};
use sqformat::gemm::{gemm_oracle, gemm_sq_activations, gemm_sq_weights};
use sqformat::harness::{
    gen_synthetic_layer, relative_reconstruction_error, run_sweep, Container,
    LayerShape, Method, Payload, SweepConfig, SynthSpec,
};
use sqformat::matrix::{relative_frobenius, Matrix};
use sqformat::perfmodel::{
    equivalent_bits_activation, equivalent_bits_weight, estimate_mask_storage, min_hidden_sparsity,
    static_split_speedup, LayerDims,
};
use sqformat::quantizers::{
    plan_static_activations, quantize_activations_dynamic, quantize_activations_static,
    quantize_weights_for_plan, ActivationSplit, PreparedWeights,
};
use sqformat::{PrecisionPair, Result, SqConfig, SqError};

use crate::{
    Cli, Command, GemmCheckArgs, GenActPlanArgs, GenSynthArgs, LayerInput, ModelQuery, Preset,
    QuantizeActsArgs, QuantizeWeightsArgs, ReportFormat, Side, SweepArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let out = OutDir(cli.out_dir);
    match cli.command {
        Command::GenSynth(args) => gen_synth(&out, args),
        Command::QuantizeWeights(args) => quantize_weights(&out, args),
        Command::GenActPlan(args) => gen_act_plan(&out, args),
        Command::QuantizeActs(args) => quantize_acts(&out, args),
        Command::GemmCheck(args) => gemm_check(args),
        Command::Sweep(args) => sweep(&out, args),
        Command::Model { query } => model(query),
    }
}

struct OutDir(Option<PathBuf>);

impl OutDir {
    /// Relative paths land in the output directory when one is set.
    fn resolve(&self, path: &Path) -> Result<PathBuf> {
        match &self.0 {
            Some(dir) if path.is_relative() => {
                std::fs::create_dir_all(dir)?;
                Ok(dir.join(path))
            }
            _ => Ok(path.to_path_buf()),
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn row_vector(v: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, v.len(), v.to_vec())
}

fn gen_synth(out: &OutDir, args: GenSynthArgs) -> Result<()> {
    let layer = gen_synthetic_layer(&SynthSpec {
        k: args.k,
        n: args.n,
        m: args.m,
        outlier_frac: args.outlier_frac,
        outlier_scale: args.outlier_scale,
        seed: args.seed,
    })?;
    let outliers: Vec<f64> = layer.outlier_channels.iter().map(|&c| c as f64).collect();
    let mut c = Container::new();
    c.push_float("w", layer.w)
        .push_float("calib", layer.calib)
        .push_float("eval", layer.eval)
        .push_float("outlier_channels", row_vector(&outliers)?);
    let path = out.resolve(&args.output)?;
    c.write_file(&path)?;
    info!("wrote synthetic layer to {}", path.display());
    print_json(&json!({
        "output": path,
        "k": args.k,
        "n": args.n,
        "m": args.m,
        "outlier_channels": layer.outlier_channels,
    }))
}

struct Layer {
    w: Matrix,
    stats: CalibStats,
    container: Container,
}

fn load_layer(input: &LayerInput) -> Result<Layer> {
    let container = Container::read_file(&input.input)?;
    let w = container.float(&input.weights)?.clone();
    let stats = match container.get(&input.calib) {
        Some(Payload::Calib(stats)) => stats.clone(),
        _ => CalibStats::from_batch(container.float(&input.calib)?)?,
    };
    Ok(Layer { w, stats, container })
}

fn quantize_weights(out: &OutDir, args: QuantizeWeightsArgs) -> Result<()> {
    let config: SqConfig = args.config.parse()?;
    let layer = load_layer(&args.layer)?;
    let prepared = PreparedWeights::new(&layer.w, &layer.stats, args.layer.alpha, args.damping)?;
    let sq = prepared.quantize(config)?;
    let w_err = relative_reconstruction_error(&prepared.smooth.w_smoothed, &decode_weight(&sq)?)?;

    let mut c = Container::new();
    c.push("w_sq", Payload::Sq { weight: sq, plan: None })
        .push_float("channel_scale", row_vector(&prepared.smooth.channel_scale)?);
    let path = out.resolve(&args.output)?;
    c.write_file(&path)?;
    print_json(&json!({
        "output": path,
        "config": config.to_string(),
        "k": layer.w.rows(),
        "n": layer.w.cols(),
        "w_err": w_err,
        "eq_bits": equivalent_bits_weight(config.precision, config.banking.sparsity()),
    }))
}

fn gen_act_plan(out: &OutDir, args: GenActPlanArgs) -> Result<()> {
    let config: SqConfig = args.config.parse()?;
    let layer = load_layer(&args.layer)?;
    let (plan, sm) = plan_static_activations(&layer.w, &layer.stats, config, args.layer.alpha)?;
    let high_channels: Vec<usize> = (0..plan.k()).filter(|&j| plan.channel_mask()[j]).collect();

    let mut c = Container::new();
    c.push("plan", Payload::Plan(plan))
        .push_float("channel_scale", row_vector(&sm.channel_scale)?)
        .push("calib_stats", Payload::Calib(layer.stats));
    let path = out.resolve(&args.output)?;
    c.write_file(&path)?;
    print_json(&json!({
        "output": path,
        "config": config.to_string(),
        "high_channels": high_channels.len(),
        "mask_bytes": layer.w.rows(),
    }))
}

fn split_summary(split: &ActivationSplit) -> serde_json::Value {
    json!({
        "rows": split.rows(),
        "k": split.k(),
        "high_width": split.high_width(),
        "low_width": split.low_width(),
    })
}

fn quantize_acts(out: &OutDir, args: QuantizeActsArgs) -> Result<()> {
    let input = Container::read_file(&args.input)?;
    let a = input.float(&args.acts)?;
    let (split, reference) = match (&args.plan, args.dynamic) {
        (Some(plan_path), _) => {
            let plan_file = Container::read_file(plan_path)?;
            let plan = plan_file.plan("plan")?;
            let scale = plan_file.float("channel_scale")?;
            let a_s = a.div_columns(scale.as_slice())?;
            (quantize_activations_static(&a_s, plan)?, a_s)
        }
        (None, true) => {
            let config: SqConfig = args
                .config
                .as_deref()
                .ok_or_else(|| SqError::Param("--dynamic needs --config".into()))?
                .parse()?;
            (quantize_activations_dynamic(a, config.banking, config.precision)?, a.clone())
        }
        (None, false) => {
            return Err(SqError::Param("pass --plan for a static split or --dynamic".into()))
        }
    };
    let a_hat = split.dequantize();
    let err = relative_reconstruction_error(&reference, &a_hat)?;
    let mut summary = split_summary(&split);
    summary["a_err"] = json!(err);
    if let Some(output) = &args.output {
        let path = out.resolve(output)?;
        let mut c = Container::new();
        c.push_float("a_hat", a_hat);
        c.write_file(&path)?;
        summary["output"] = json!(path);
    }
    print_json(&summary)
}

fn gemm_check(args: GemmCheckArgs) -> Result<()> {
    let config: SqConfig = args.config.parse()?;
    let layer = load_layer(&args.layer)?;
    let a = layer.container.float(&args.acts)?;
    let y_true = a.matmul(&layer.w)?;
    let (result, oracle) = match args.side {
        Side::Weights => {
            let prepared = PreparedWeights::new(&layer.w, &layer.stats, args.layer.alpha, args.damping)?;
            let sq = prepared.quantize(config)?;
            let a_s = prepared.smooth.smooth_activations(a)?;
            let a_q = quantize_uniform(&a_s, args.uniform_bits, Granularity::PerRow)?;
            let oracle = gemm_oracle(&a_q.dequantize(), &decode_weight(&sq)?)?;
            (gemm_sq_weights(&a_q, &sq)?, oracle)
        }
        Side::ActsStatic => {
            let (plan, sm) = plan_static_activations(&layer.w, &layer.stats, config, args.layer.alpha)?;
            let split = quantize_activations_static(&sm.smooth_activations(a)?, &plan)?;
            let w_q = quantize_weights_for_plan(&sm.w_smoothed, &plan, args.uniform_bits)?;
            let w_deq = w_q.dequantize().permute_rows(&plan.inverse_perm())?;
            let oracle = gemm_oracle(&split.dequantize(), &w_deq)?;
            (gemm_sq_activations(&split, &w_q)?, oracle)
        }
        Side::ActsDynamic => {
            let sm = smooth(&layer.w, &layer.stats, args.layer.alpha)?;
            let split = quantize_activations_dynamic(&sm.smooth_activations(a)?, config.banking, config.precision)?;
            let w_q = quantize_uniform(
                &sm.w_smoothed,
                args.uniform_bits,
                Granularity::PerBankColumn {
                    bank_size: config.banking.bank_size(),
                },
            )?;
            let oracle = gemm_oracle(&split.dequantize(), &w_q.dequantize())?;
            (gemm_sq_activations(&split, &w_q)?, oracle)
        }
    };
    let deviation = relative_frobenius(&oracle, &result.y)?;
    let out_err = relative_frobenius(&y_true, &result.y)?;
    print_json(&json!({
        "config": config.to_string(),
        "deviation": deviation,
        "tol": args.tol,
        "out_err": out_err,
        "high_macs": result.path_stats.high_macs,
        "low_macs": result.path_stats.low_macs,
        "low_fraction": result.path_stats.low_fraction(),
    }))?;
    if deviation > args.tol {
        return Err(SqError::Numerical(format!(
            "hybrid GEMM deviates from the oracle by {deviation:e} (tolerance {:e})",
            args.tol
        )));
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<LayerShape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| SqError::Param(format!("bad shape '{s}', expected KxNxM")))?;
    match dims[..] {
        [k, n, m] => Ok(LayerShape { k, n, m }),
        _ => Err(SqError::Param(format!("bad shape '{s}', expected KxNxM"))),
    }
}

fn sweep(out: &OutDir, args: SweepArgs) -> Result<()> {
    let cfg = SweepConfig {
        bank_sizes: args.bank_sizes,
        sparsities: args.sparsities,
        precisions: args
            .precisions
            .iter()
            .map(|p| p.parse::<PrecisionPair>())
            .collect::<Result<_>>()?,
        methods: args.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?,
        seeds: args.seeds,
        shapes: args.shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?,
        outlier_frac: args.outlier_frac,
        outlier_scale: args.outlier_scale,
        alpha: args.alpha,
        damping: args.damping,
        full_low_speedup: args.full_low_speedup,
    };
    let report = run_sweep(&cfg)?;
    for reason in &report.skipped {
        info!("skipped {reason}");
    }
    let write = |w: &mut dyn Write| -> Result<()> {
        match args.format {
            ReportFormat::Csv => report.write_csv(w),
            ReportFormat::Json => report.write_json(w),
        }
    };
    match &args.output {
        Some(p) => {
            let path = out.resolve(p)?;
            let mut f = BufWriter::new(File::create(&path)?);
            write(&mut f)?;
            f.flush()?;
            eprintln!("{} records written to {}", report.records.len(), path.display());
        }
        None => write(&mut io::stdout().lock())?,
    }
    Ok(())
}

fn parse_layer(s: &str) -> Result<(usize, usize)> {
    let bad = || SqError::Param(format!("bad layer '{s}', expected K:count"));
    let (k, count) = s.split_once(':').ok_or_else(bad)?;
    Ok((k.trim().parse().map_err(|_| bad())?, count.trim().parse().map_err(|_| bad())?))
}

fn model(query: ModelQuery) -> Result<()> {
    match query {
        ModelQuery::EqBits { precision, sparsity } => {
            let pp: PrecisionPair = precision.parse()?;
            if !(0.0..=1.0).contains(&sparsity) {
                return Err(SqError::Param(format!("sparsity {sparsity} outside [0, 1]")));
            }
            print_json(&json!({
                "precision": pp.to_string(),
                "sparsity": sparsity,
                "weight_bits": equivalent_bits_weight(pp, sparsity),
                "activation_bits": equivalent_bits_activation(pp, sparsity),
            }))
        }
        ModelQuery::MinSparsity { rate } => print_json(&json!({
            "rate": rate,
            "min_sparsity": min_hidden_sparsity(rate)?,
        })),
        ModelQuery::Speedup {
            sparsity,
            full_low_speedup,
            overhead,
        } => print_json(&json!({
            "sparsity": sparsity,
            "full_low_speedup": full_low_speedup,
            "overhead": overhead,
            "speedup": static_split_speedup(sparsity, full_low_speedup, overhead)?,
        })),
        ModelQuery::MaskStorage { preset, layers } => {
            let dims = match preset {
                Some(Preset::Llama3_70b) => LayerDims::llama3_70b(),
                Some(Preset::Llama3_8b) => LayerDims::llama3_8b(),
                None => LayerDims::new(layers.iter().map(|l| parse_layer(l)).collect::<Result<_>>()?)?,
            };
            let bytes = estimate_mask_storage(&dims);
            print_json(&json!({
                "bytes": bytes,
                "mib": bytes as f64 / (1024.0 * 1024.0),
            }))
        }
    }
}
