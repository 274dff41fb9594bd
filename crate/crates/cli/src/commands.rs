//! Subcommand implementations.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use plot_core::dataio::{self, PlanImageMeta};
use plot_core::encoders::{encode_prompts, gen_synthetic, Dataset, SynthConfig};
use plot_core::head::{plot_distances, Method, MethodKind};
use plot_core::numerics::Rng;
use plot_core::ot::{self, CostMat, DiscreteMeasure};
use plot_core::trainer::{evaluate, grad_check, train, TrainConfig};
use plot_core::{Mat, SinkhornConfig};

use crate::args::*;

/// Usage errors exit 1, runtime/validation failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("config file {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", p.display())))
        }
    }
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

/// Generator config from flags over file over defaults; validated before any
/// work starts.
fn resolve_synth(flags: &GenFlags, file: &FileConfig, seed: Option<u64>) -> Result<SynthConfig, CliError> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_classes: pick(&flags.classes, &file.classes, d.n_classes),
        n_attributes: pick(&flags.attributes, &file.attributes, d.n_attributes),
        shots: pick(&flags.shots, &file.shots, d.shots),
        test_per_class: pick(&flags.test, &file.test, d.test_per_class),
        m_locals: pick(&flags.m, &file.m, d.m_locals),
        feat_dim: pick(&flags.dim, &file.dim, d.feat_dim),
        noise_sigma: pick(&flags.sigma, &file.sigma, d.noise_sigma),
        background_prototypes: pick(&flags.bg, &file.bg, d.background_prototypes),
        seed: pick(&seed, &file.seed, d.seed),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Training config from flags over file over defaults; validated before any
/// work starts.
fn resolve_train(flags: &TrainFlags, file: &FileConfig, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let method_tag = pick(&flags.method, &file.method, "plot".to_string());
    let kind = MethodKind::from_tag(&method_tag).map_err(usage)?;
    let method = match pick(&flags.beta, &file.beta, f64::NAN) {
        beta if beta.is_nan() => Method::new(kind),
        beta => Method::with_var_weight(kind, beta).map_err(usage)?,
    };
    let sinkhorn = SinkhornConfig {
        lambda: pick(&flags.lambda, &file.lambda, 0.1),
        max_iter: pick(&flags.max_iter, &file.max_iter, 100),
        delta: pick(&flags.delta, &file.delta, 0.01),
        log_stabilized: flags.stabilized || file.stabilized.unwrap_or(false),
    };
    let head = plot_core::head::HeadConfig {
        tau: pick(&flags.tau, &file.tau, 0.01),
        sinkhorn,
        n_prompts: pick(&flags.n_prompts, &file.n_prompts, 4),
    };
    let cfg = TrainConfig {
        lr: pick(&flags.lr, &file.lr, d.lr),
        epochs: pick(&flags.epochs, &file.epochs, d.epochs),
        batch_size: pick(&flags.batch_size, &file.batch_size, d.batch_size),
        warmup_lr: pick(&flags.warmup_lr, &file.warmup_lr, d.warmup_lr),
        seed: pick(&seed, &file.seed, d.seed),
        method,
        head,
        shuffle: if flags.no_shuffle { false } else { file.shuffle.unwrap_or(true) },
        ctx_len: pick(&flags.ctx_len, &file.ctx_len, d.ctx_len),
        embed_dim: flags.embed_dim.or(file.embed_dim),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let cfg = resolve_synth(&args.gen, &file, args.seed)?;
    let dataset = gen_synthetic(&cfg).map_err(runtime)?;
    dataio::save_dataset(&dataset, &args.out).map_err(runtime)?;
    println!(
        "wrote {} ({} images: {} train + {} test)",
        args.out.display(),
        dataset.images.len(),
        cfg.n_train(),
        cfg.n_test()
    );
    println!(
        "K={} A={} M={} C={} shots={} test/class={} sigma={} bg={} seed={}",
        cfg.n_classes,
        cfg.n_attributes,
        cfg.m_locals,
        cfg.feat_dim,
        cfg.shots,
        cfg.test_per_class,
        cfg.noise_sigma,
        cfg.background_prototypes,
        cfg.seed
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let config = resolve_train(&args.train, &file, args.seed)?;
    let dataset = dataio::load_dataset(&args.data).map_err(runtime)?;
    let model = train(&dataset, &config).map_err(runtime)?;
    for (epoch, stats) in model.train_log.iter().enumerate() {
        println!("epoch {epoch}: loss {:.6} lr {:.6}", stats.loss, stats.lr);
    }
    dataio::save_model(&model, &args.out).map_err(runtime)?;
    println!(
        "wrote {} (method {}, {} prompts, {} epochs)",
        args.out.display(),
        model.method.kind.tag(),
        model.head.n_prompts,
        model.train_log.len()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let dataset = dataio::load_dataset(&args.data).map_err(runtime)?;
    let model = dataio::load_model(&args.model).map_err(runtime)?;
    let report = evaluate(&dataset, &model).map_err(runtime)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut name = args.model.as_os_str().to_os_string();
        name.push(".eval.json");
        PathBuf::from(name)
    });
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(&report_path, json).map_err(runtime)?;
    println!(
        "accuracy {:.4} ({}/{} correct)",
        report.accuracy, report.n_correct, report.n_test
    );
    for (k, (acc, n)) in report
        .per_class_accuracy
        .iter()
        .zip(&report.per_class_counts)
        .enumerate()
    {
        println!("class {k}: accuracy {acc:.4} over {n} images");
    }
    println!(
        "mean inner iterations {:.2}, {:.2} us/image, report {}",
        report.mean_inner_iterations,
        report.wall_clock_per_image * 1e6,
        report_path.display()
    );
    Ok(())
}

/// One row of the ablation table.
struct AblationRow {
    section: &'static str,
    setting: String,
    method: Method,
    n_prompts: usize,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let base_train = resolve_train(&args.train, &file, None)?;
    let synth = resolve_synth(&args.gen, &file, None)?;
    let seeds = args
        .seeds
        .clone()
        .or_else(|| file.seeds.clone())
        .unwrap_or_else(|| vec![0, 1, 2, 3, 4]);
    if seeds.is_empty() {
        return Err(usage("need at least one seed"));
    }
    let shared_data = match &args.data {
        Some(p) => Some(dataio::load_dataset(p).map_err(runtime)?),
        None => None,
    };

    let default_n = base_train.head.n_prompts;
    let mut rows: Vec<AblationRow> = MethodKind::ALL
        .into_iter()
        .map(|kind| AblationRow {
            section: "ablation",
            setting: kind.label().to_string(),
            method: method_for(kind, &base_train),
            n_prompts: if kind.single_prompt() { 1 } else { default_n },
        })
        .collect();
    // Prompt-count sweep; the run matching the default count reuses the
    // method-table run.
    for n in [1, 2, 4, 8] {
        rows.push(AblationRow {
            section: "prompt_count",
            setting: format!("N={n}"),
            method: Method::new(MethodKind::Plot),
            n_prompts: n,
        });
    }

    // Distinct (method, n_prompts) configurations to actually run.
    let mut jobs: Vec<(Method, usize)> = Vec::new();
    for row in &rows {
        let key = (row.method, row.n_prompts);
        if !jobs.contains(&key) {
            jobs.push(key);
        }
    }

    let t0 = Instant::now();
    let accuracies = run_ablation_jobs(&jobs, &seeds, &base_train, &synth, shared_data.as_ref())?;

    let mut csv = String::from("section,setting,n_prompts,n_seeds,mean_accuracy,std_accuracy\n");
    println!("section,setting,n_prompts,n_seeds,mean_accuracy,std_accuracy");
    for row in &rows {
        let job_idx = jobs
            .iter()
            .position(|&(m, n)| m == row.method && n == row.n_prompts)
            .expect("every row has a job");
        let accs = &accuracies[job_idx];
        let (mean, std) = mean_std(accs);
        let line = format!(
            "{},{},{},{},{:.6},{:.6}",
            row.section,
            row.setting,
            row.n_prompts,
            accs.len(),
            mean,
            std
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    std::fs::write(&args.out, csv).map_err(runtime)?;
    println!(
        "wrote {} ({} configurations x {} seeds in {:.1}s)",
        args.out.display(),
        jobs.len(),
        seeds.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn method_for(kind: MethodKind, base: &TrainConfig) -> Method {
    if kind.uses_variance_regularizer() {
        // carry the beta that the base method resolved, when it has one
        let beta = if base.method.kind.uses_variance_regularizer() {
            base.method.var_weight
        } else {
            plot_core::head::DEFAULT_VAR_WEIGHT
        };
        Method { kind, var_weight: beta }
    } else {
        Method::new(kind)
    }
}

/// Train+evaluate every (configuration, seed) pair, optionally in parallel
/// (`PLOT_THREADS`; 0 or unset runs sequentially). Results are slotted by
/// index, so the output order never depends on scheduling.
fn run_ablation_jobs(
    jobs: &[(Method, usize)],
    seeds: &[u64],
    base_train: &TrainConfig,
    synth: &SynthConfig,
    shared_data: Option<&Dataset>,
) -> Result<Vec<Vec<f64>>, CliError> {
    let threads: usize = std::env::var("PLOT_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let total = jobs.len() * seeds.len();
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..total).collect());
    let slots: Mutex<Vec<Option<Result<f64, String>>>> = Mutex::new(vec![None; total]);

    let run_one = |task: usize| -> Result<f64, String> {
        let job = &jobs[task / seeds.len()];
        let seed = seeds[task % seeds.len()];
        let config = TrainConfig {
            seed,
            method: job.0,
            head: plot_core::head::HeadConfig {
                n_prompts: job.1,
                ..base_train.head.clone()
            },
            ..base_train.clone()
        };
        let owned;
        let dataset = match shared_data {
            Some(d) => d,
            None => {
                owned = gen_synthetic(&SynthConfig { seed, ..synth.clone() })
                    .map_err(|e| e.to_string())?;
                &owned
            }
        };
        let model = train(dataset, &config).map_err(|e| e.to_string())?;
        Ok(evaluate(dataset, &model).map_err(|e| e.to_string())?.accuracy)
    };

    let worker = || {
        loop {
            let task = match queue.lock().unwrap().pop_front() {
                Some(t) => t,
                None => break,
            };
            let result = run_one(task);
            slots.lock().unwrap()[task] = Some(result);
        }
    };

    if threads <= 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..threads.min(total) {
                scope.spawn(worker);
            }
        });
    }

    let slots = slots.into_inner().unwrap();
    let mut out = vec![Vec::with_capacity(seeds.len()); jobs.len()];
    for (task, slot) in slots.into_iter().enumerate() {
        let acc = slot
            .expect("every task ran")
            .map_err(|e| runtime(format!("job {task}: {e}")))?;
        out[task / seeds.len()].push(acc);
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

pub fn cmd_oracle_check(args: &OracleCheckArgs) -> Result<(), CliError> {
    let rows = args.rows.unwrap_or(4);
    let cols = args.cols.unwrap_or(4);
    let trials = args.trials.unwrap_or(100);
    let lambda = args.lambda.unwrap_or(0.01);
    if rows == 0 || cols == 0 {
        return Err(usage("rows and cols must be >= 1"));
    }
    let lcm = rows / gcd(rows, cols) * cols;
    if lcm > 10 {
        return Err(usage(format!(
            "lcm({rows}, {cols}) = {lcm} exceeds the oracle's enumeration cap of 10"
        )));
    }
    if trials == 0 {
        return Err(usage("trials must be >= 1"));
    }
    let cfg = SinkhornConfig {
        lambda,
        max_iter: args.max_iter.unwrap_or(100),
        delta: args.delta.unwrap_or(0.01),
        log_stabilized: false,
    };
    cfg.validate().map_err(usage)?;

    let mut rng = Rng::with_seed(args.seed.unwrap_or(0));
    let u = DiscreteMeasure::uniform(rows).map_err(runtime)?;
    let v = DiscreteMeasure::uniform(cols).map_err(runtime)?;
    let t0 = Instant::now();
    let mut max_gap = 0.0_f64;
    let mut sum_gap = 0.0_f64;
    let mut max_residual = 0.0_f64;
    let mut sum_residual = 0.0_f64;
    for _ in 0..trials {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform01()).collect();
        let cost = CostMat::new(Mat::new(rows, cols, data).map_err(runtime)?).map_err(runtime)?;
        let (exact, _) = ot::exact_ot_uniform(&cost).map_err(runtime)?;
        let res = ot::sinkhorn(&cost, &u, &v, &cfg).map_err(runtime)?;
        let gap = (res.cost - exact).abs();
        max_gap = max_gap.max(gap);
        sum_gap += gap;
        max_residual = max_residual.max(res.marginal_residual);
        sum_residual += res.marginal_residual;
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let report = serde_json::json!({
        "rows": rows,
        "cols": cols,
        "trials": trials,
        "lambda": lambda,
        "delta": cfg.delta,
        "max_iter": cfg.max_iter,
        "max_abs_gap": max_gap,
        "mean_abs_gap": sum_gap / trials as f64,
        "max_marginal_residual": max_residual,
        "mean_marginal_residual": sum_residual / trials as f64,
        "seconds": elapsed,
    });
    println!("{report}");
    println!(
        "{trials} x {rows}x{cols} instances at lambda {lambda}: max |gap| {max_gap:.6}, mean |gap| {:.6} ({elapsed:.2}s)",
        sum_gap / trials as f64
    );
    Ok(())
}

pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<(), CliError> {
    let eps = args.eps.unwrap_or(1e-5);
    let samples = args.samples.unwrap_or(120);
    let start = args.image_index.unwrap_or(0);
    let batch_size = args.batch_size.unwrap_or(4);
    if batch_size == 0 {
        return Err(usage("batch size must be >= 1"));
    }
    let dataset = dataio::load_dataset(&args.data).map_err(runtime)?;
    let model = dataio::load_model(&args.model).map_err(runtime)?;
    if start >= dataset.images.len() {
        return Err(runtime(format!(
            "image index {start} out of range ({} images)",
            dataset.images.len()
        )));
    }
    let end = (start + batch_size).min(dataset.images.len());
    let batch: Vec<_> = dataset.images[start..end].iter().collect();
    let report =
        grad_check(&model, &batch, eps, samples, args.seed.unwrap_or(0)).map_err(runtime)?;
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    println!(
        "max relative error {:.3e}, mean {:.3e} over {} coordinates ({} saturated)",
        report.max_relative_error, report.mean_relative_error, report.checked, report.skipped_zero
    );
    if report.max_relative_error > 1e-4 {
        return Err(runtime(format!(
            "gradient audit failed: max relative error {} exceeds 1e-4",
            report.max_relative_error
        )));
    }
    Ok(())
}

pub fn cmd_inspect_plan(args: &InspectPlanArgs) -> Result<(), CliError> {
    let dataset = dataio::load_dataset(&args.data).map_err(runtime)?;
    let model = dataio::load_model(&args.model).map_err(runtime)?;
    if model.method.kind != MethodKind::Plot {
        return Err(runtime(format!(
            "method {} produces no transport plans; only plot models can be inspected",
            model.method.kind.tag()
        )));
    }
    let index = args.image_index.unwrap_or(0);
    let image = dataset.images.get(index).ok_or_else(|| {
        runtime(format!(
            "image index {index} out of range ({} images)",
            dataset.images.len()
        ))
    })?;
    if let Some(class) = args.class {
        if class >= dataset.n_classes {
            return Err(runtime(format!(
                "class {class} out of range ({} classes)",
                dataset.n_classes
            )));
        }
    }
    let grid = match (args.grid_h, args.grid_w) {
        (Some(h), Some(w)) => {
            if h * w != dataset.m_locals() {
                return Err(usage(format!(
                    "grid {h}x{w} does not cover M={}",
                    dataset.m_locals()
                )));
            }
            Some((h, w))
        }
        (None, None) => PlanImageMeta::square(index, dataset.m_locals()).grid,
        _ => return Err(usage("provide both --grid-h and --grid-w or neither")),
    };
    if grid.is_none() {
        println!(
            "M={} is not a perfect square and no grid was given: writing CSV only",
            dataset.m_locals()
        );
    }

    let stack = encode_prompts(&model.bank, &model.encoder).map_err(runtime)?;
    let scores = plot_distances(image, &stack, &model.head).map_err(runtime)?;
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("plan_export"));
    let meta = PlanImageMeta {
        image_index: index,
        grid,
    };
    let written = dataio::export_plan(&scores, meta, &out_dir, args.class).map_err(runtime)?;
    println!(
        "wrote {} plan exports to {} (image {index}, label {})",
        written.len(),
        out_dir.display(),
        image.label
    );
    Ok(())
}
