use std::fs;
use std::path::{Path, PathBuf};

use rope2d::analysis::{
    attention_stats, count_costs, fft_reconstruct, mixed_comparison_set, AttnStats, CostReport,
    ReconReport,
};
use rope2d::attention::AttentionResult;
use rope2d::check::{run_checks, CheckOptions};
use rope2d::io::{csv_string, fmt_f64, matrix_from_csv, matrix_to_csv};
use rope2d::posembed::make_grid;
use rope2d::rope::{
    freqs_1d, freqs_axial, freqs_mixed_init, rotation_to_csv, FrequencySet, RotationDoc,
    RotationTable, DEFAULT_BASE_1D, DEFAULT_BASE_AXIAL,
};
use rope2d::tinyvit::{
    fit_frequencies, forward, random_tokens, AttentionRecipe, FitOptions, ModelConfig, Params,
    TrainTrace,
};
use rope2d::{Execution, RopeError};

use crate::{
    AnalyzeCommand, AttnArgs, CheckArgs, Cli, Command, FftArgs, Format, Mode, RotationArgs,
    TrainArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Property(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Property(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<RopeError> for CliError {
    fn from(e: RopeError) -> Self {
        match e {
            RopeError::Io(e) => CliError::Io(e.to_string()),
            RopeError::Numeric(m) => CliError::Divergence(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    out_dir: PathBuf,
    format: Format,
    exec: Execution,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_json<T: serde::Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<()> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> CliResult<ModelConfig> {
    Ok(ModelConfig::from_json(&read(path)?)?)
}

fn load_freqs(path: &Path) -> CliResult<FrequencySet> {
    Ok(FrequencySet::from_json(&read(path)?)?)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Ctx {
        out_dir: cli.out_dir.clone(),
        format: cli.format,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match &cli.command {
        Command::Rotation(a) => rotation(&ctx, a),
        Command::Check(a) => check(&ctx, a),
        Command::Analyze(AnalyzeCommand::Cost { config }) => cost(&ctx, config),
        Command::Analyze(AnalyzeCommand::Fft(a)) => fft(&ctx, a),
        Command::Analyze(AnalyzeCommand::Attn(a)) => attn(&ctx, a),
        Command::Train(a) => train(&ctx, a),
    }
}

fn rotation(ctx: &Ctx, a: &RotationArgs) -> CliResult<()> {
    let (w, h) = match (a.mode, a.grid, a.tokens) {
        (_, Some(_), Some(_)) => {
            return Err(CliError::Usage("give either --grid or --tokens".into()))
        }
        (Mode::OneD, None, Some(n)) if n > 0 => (n, 1),
        (_, Some(g), None) => g,
        (Mode::OneD, _, _) => {
            return Err(CliError::Usage(
                "1d tables need --tokens N or --grid WxH".into(),
            ))
        }
        _ => {
            return Err(CliError::Usage(
                "axial and mixed tables need --grid WxH".into(),
            ))
        }
    };
    let grid = make_grid(w, h, a.class_token)?;
    let freqs = match &a.freqs {
        Some(p) => load_freqs(p)?,
        None => match a.mode {
            Mode::OneD => freqs_1d(a.dhead, a.base.unwrap_or(DEFAULT_BASE_1D))?,
            Mode::Axial => freqs_axial(a.dhead, a.base.unwrap_or(DEFAULT_BASE_AXIAL))?,
            Mode::Mixed => freqs_mixed_init(a.dhead, 0)?,
        },
    };
    if freqs.d_head() != a.dhead {
        return Err(CliError::Usage(format!(
            "frequency set has d_head {}, --dhead is {}",
            freqs.d_head(),
            a.dhead
        )));
    }
    let table = RotationTable::build(&freqs, &grid);
    match ctx.format {
        Format::Csv => ctx.write("rotation.csv", &rotation_to_csv(&table)?)?,
        Format::Json => ctx.write_json("rotation.json", &RotationDoc::from(&table))?,
    }
    ctx.write_json("frequencies.json", &freqs)
}

fn check(ctx: &Ctx, a: &CheckArgs) -> CliResult<()> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let opts = CheckOptions {
        seed: a.seed,
        identity_trials: a.trials,
        inject_fault: a.inject_fault,
    };
    let report = run_checks(&opts, ctx.exec);
    print!("{}", report.to_text());
    match ctx.format {
        Format::Csv => {
            let rows = report.results.iter().map(|r| {
                vec![
                    r.name.clone(),
                    r.passed.to_string(),
                    r.trials.to_string(),
                    fmt_f64(r.max_error),
                    fmt_f64(r.tolerance),
                ]
            });
            let text = csv_string(
                ["property", "passed", "trials", "max_error", "tolerance"],
                rows,
            )?;
            ctx.write("check.csv", &text)?;
        }
        Format::Json => ctx.write_json("check.json", &report)?,
    }
    let failing = report.failing();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Property(format!(
            "failing properties: {}",
            failing.join(", ")
        )))
    }
}

fn metric_csv(rows: Vec<(String, String)>) -> CliResult<String> {
    Ok(csv_string(
        ["metric", "value"],
        rows.into_iter().map(|(k, v)| [k, v]),
    )?)
}

fn cost(ctx: &Ctx, config: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let c: CostReport = count_costs(&cfg);
    println!(
        "rotation ops {} ({}), extra params {}, total params {}, total flops {}",
        c.rotation_ops, c.convention, c.extra_params, c.total_params, c.total_flops
    );
    match ctx.format {
        Format::Json => ctx.write_json("cost.json", &c),
        Format::Csv => {
            let mut rows = vec![
                ("convention".to_string(), c.convention.clone()),
                ("rotation_ops".into(), c.rotation_ops.to_string()),
                (
                    "rotation_real_flops".into(),
                    c.rotation_real_flops.to_string(),
                ),
                ("total_flops".into(), c.total_flops.to_string()),
                ("extra_params".into(), c.extra_params.to_string()),
                ("total_params".into(), c.total_params.to_string()),
                ("rotation_flop_ratio".into(), fmt_f64(c.rotation_flop_ratio)),
                ("extra_param_ratio".into(), fmt_f64(c.extra_param_ratio)),
            ];
            for item in &c.breakdown {
                rows.push((format!("flops.{}", item.name), item.flops.to_string()));
                rows.push((format!("params.{}", item.name), item.params.to_string()));
            }
            ctx.write("cost.csv", &metric_csv(rows)?)
        }
    }
}

fn fft(ctx: &Ctx, a: &FftArgs) -> CliResult<()> {
    let (freqs, seed) = match (&a.freqs, a.mode) {
        (Some(p), _) => (load_freqs(p)?, None),
        (None, Mode::OneD) => {
            return Err(CliError::Usage(
                "fft needs a 2D mode (axial or mixed)".into(),
            ))
        }
        (None, Mode::Axial) => (freqs_axial(a.dhead, DEFAULT_BASE_AXIAL)?, None),
        (None, Mode::Mixed) => {
            let (set, s) = mixed_comparison_set(a.dhead, a.size, a.seed)?;
            (set, Some(s))
        }
    };
    let r: ReconReport = fft_reconstruct(&freqs, a.size)?;
    println!(
        "bins {}, error {}, axial energy fraction {}",
        r.kept_bins.len(),
        fmt_f64(r.error),
        fmt_f64(r.axial_energy_fraction)
    );
    match ctx.format {
        Format::Json => {
            let image: Vec<Vec<f64>> = r.image.rows().into_iter().map(|row| row.to_vec()).collect();
            let doc = serde_json::json!({
                "size": r.size,
                "mode": freqs.mode(),
                "d_head": freqs.d_head(),
                "comparison_seed": seed,
                "frequencies": freqs.values(),
                "kept_bins": r.kept_bins,
                "error": r.error,
                "axial_energy_fraction": r.axial_energy_fraction,
                "image": image,
            });
            ctx.write_json("fft.json", &doc)
        }
        Format::Csv => {
            let mut rows = vec![
                ("size".to_string(), r.size.to_string()),
                ("bins".into(), r.kept_bins.len().to_string()),
                ("error".into(), fmt_f64(r.error)),
                (
                    "axial_energy_fraction".into(),
                    fmt_f64(r.axial_energy_fraction),
                ),
            ];
            if let Some(s) = seed {
                rows.push(("comparison_seed".into(), s.to_string()));
            }
            ctx.write("fft.csv", &metric_csv(rows)?)?;
            let bins = r
                .kept_bins
                .iter()
                .map(|(kx, ky)| [kx.to_string(), ky.to_string()]);
            ctx.write("fft_bins.csv", &csv_string(["kx", "ky"], bins)?)?;
            ctx.write("fft_image.csv", &matrix_to_csv(&r.image)?)
        }
    }
}

fn attn(ctx: &Ctx, a: &AttnArgs) -> CliResult<()> {
    let (stats, grid_note): (AttnStats, String) = match (&a.input, &a.config) {
        (Some(path), _) => {
            let (w, h) = a
                .grid
                .ok_or_else(|| CliError::Usage("--input needs --grid".into()))?;
            let grid = make_grid(w, h, a.class_token)?;
            let probs = matrix_from_csv(&read(path)?)?;
            let result = AttentionResult {
                head: 0,
                d_head: 0,
                mode: "input".into(),
                logits: probs.clone(),
                probs,
            };
            (
                attention_stats(&[vec![result]], &grid, ctx.exec)?,
                format!("{w}x{h}"),
            )
        }
        (None, Some(path)) => {
            let cfg = load_config(path)?;
            let params = Params::init(&cfg)?;
            let tokens = random_tokens(&cfg, a.seed)?;
            let out = forward(&cfg, &params, &tokens, ctx.exec)?;
            let grid = cfg.grid()?;
            (
                attention_stats(&out.attention, &grid, ctx.exec)?,
                format!("{}x{}", cfg.grid_width, cfg.grid_height),
            )
        }
        (None, None) => return Err(CliError::Usage("give --input or --config".into())),
    };
    for s in &stats.heads {
        println!(
            "layer {} head {}: distance {} entropy {}",
            s.layer,
            s.head,
            fmt_f64(s.distance),
            fmt_f64(s.entropy)
        );
    }
    match ctx.format {
        Format::Json => {
            let doc = serde_json::json!({ "grid": grid_note, "stats": stats });
            ctx.write_json("attn.json", &doc)
        }
        Format::Csv => {
            let rows = stats.heads.iter().map(|s| {
                [
                    s.layer.to_string(),
                    s.head.to_string(),
                    fmt_f64(s.distance),
                    fmt_f64(s.entropy),
                ]
            });
            ctx.write(
                "attn.csv",
                &csv_string(["layer", "head", "distance", "entropy"], rows)?,
            )
        }
    }
}

fn train(ctx: &Ctx, a: &TrainArgs) -> CliResult<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => ModelConfig::toy(4, 4, 8, 1, 1, AttentionRecipe::RopeMixed),
    };
    let mut teacher = match &a.teacher {
        Some(p) => load_freqs(p)?,
        None => freqs_mixed_init(cfg.d_head(), a.seed)?,
    };
    for &(c, dx, dy) in &a.perturb {
        let values = teacher.values_mut()?;
        if 2 * c + 1 >= values.len() {
            return Err(CliError::Usage(format!(
                "perturbed channel {c} does not exist"
            )));
        }
        values[2 * c] += dx;
        values[2 * c + 1] += dy;
    }
    let opts = FitOptions {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        batch: a.batch,
        input_scale: a.input_scale,
    };
    let trace: TrainTrace = fit_frequencies(&teacher, &cfg, &opts, ctx.exec)?;
    match ctx.format {
        Format::Csv => ctx.write("trace.csv", &trace.to_csv()?)?,
        Format::Json => ctx.write_json("trace.json", &trace)?,
    }
    if let Some(step) = trace.diverged_at {
        let last = trace.last_finite_loss().map_or("none".to_string(), fmt_f64);
        return Err(CliError::Divergence(format!(
            "loss became non-finite at step {step}; last finite loss {last}"
        )));
    }
    if let Some(row) = trace.final_row() {
        println!("final step {} loss {}", row.step, fmt_f64(row.loss));
        let f: Vec<String> = row.freqs.iter().map(|&v| fmt_f64(v)).collect();
        println!("frequencies {}", f.join(" "));
        let t: Vec<String> = teacher.values().iter().map(|&v| fmt_f64(v)).collect();
        println!("teacher {}", t.join(" "));
    }
    Ok(())
}
