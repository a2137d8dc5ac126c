//! Command-line harness: dataset generation, training, evaluation,
//! cost reporting, attention-map export and the robustness metric.
//!
//! Exit codes: 0 success, 2 usage error, 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lookupvit::checkpoint;
use lookupvit::config::ModelConfig;
use lookupvit::data::{self, Dataset};
use lookupvit::flops;
use lookupvit::model::{feature_deviation, forward, ModelParams};
use lookupvit::rng::SplitMix64;
use lookupvit::tensor::Tape;
use lookupvit::train::{evaluate, train_loop, TrainSettings};

const USAGE: &str = "\
usage: lookupvit <command> [flags]

commands:
  gen-data   --classes N --n N --size S [--channels C] [--seed S] --out FILE
  train      --config FILE --data FILE --out FILE [--metrics FILE]
             [--steps N] [--batch N] [--lr X] [--warmup-frac X]
  eval       --ckpt FILE --data FILE [--grids HxW,HxW,...] [--out FILE]
  flops      --preset b16-224 | --dims N,M,D,DEPTH |
             --sweep --sizes A,B,... --grids HxW,... [--d D] [--depth K]
             [--patch P] [--p P] [--q Q] [--all] [--out FILE]
             or: --empirical --config FILE [--grid HxW] [--out FILE]
  attnmap    --ckpt FILE --data FILE [--index I] [--grid HxW] --out-dir DIR
  robust     --ckpt FILE --data FILE [--samples N] [--severities N]
             [--grid HxW] [--out FILE]
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some((command, rest)) = args.split_first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    let parsed = match Flags::parse(rest) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(&parsed),
        "train" => cmd_train(&parsed),
        "eval" => cmd_eval(&parsed),
        "flops" => cmd_flops(&parsed),
        "attnmap" => cmd_attnmap(&parsed),
        "robust" => cmd_robust(&parsed),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("error: unknown command `{other}`\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

enum CliError {
    Usage(String),
    Run(String),
}

impl From<lookupvit::Error> for CliError {
    fn from(e: lookupvit::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// `--key value` pairs plus boolean switches. Flags no command consumed are
/// reported as unknown.
struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

const SWITCHES: &[&str] = &["all", "sweep", "empirical"];

impl Flags {
    fn parse(args: &[String]) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let Some(key) = a.strip_prefix("--") else {
                return Err(format!("unexpected argument `{a}`"));
            };
            if SWITCHES.contains(&key) {
                switches.push(key.to_string());
                i += 1;
                continue;
            }
            let Some(value) = args.get(i + 1) else {
                return Err(format!("flag --{key} needs a value"));
            };
            if values.insert(key.to_string(), value.clone()).is_some() {
                return Err(format!("flag --{key} given twice"));
            }
            i += 2;
        }
        Ok(Flags { values, switches, consumed: Default::default() })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().push(key.to_string());
        self.values.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("flag --{key}: cannot parse `{v}`"))),
        }
    }

    fn require_num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse::<T>().map_err(|_| CliError::Usage(format!("flag --{key}: cannot parse `{v}`")))
    }

    fn switch(&self, key: &str) -> bool {
        self.consumed.borrow_mut().push(key.to_string());
        self.switches.iter().any(|s| s == key)
    }

    fn finish(&self) -> CliResult {
        let consumed = self.consumed.borrow();
        for key in self.values.keys().chain(self.switches.iter()) {
            if !consumed.iter().any(|c| c == key) {
                return Err(CliError::Usage(format!("unknown flag --{key} for this command")));
            }
        }
        Ok(())
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(CliError::Usage(format!("grid `{s}` is not HxW")));
    }
    let h = parts[0].parse().map_err(|_| CliError::Usage(format!("grid `{s}` is not HxW")))?;
    let w = parts[1].parse().map_err(|_| CliError::Usage(format!("grid `{s}` is not HxW")))?;
    Ok((h, w))
}

fn parse_grid_list(s: &str) -> Result<Vec<(usize, usize)>, CliError> {
    s.split(',').map(parse_grid).collect()
}

fn load_config(path: &str) -> Result<ModelConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("reading {path}: {e}")))?;
    Ok(ModelConfig::from_json_str(&text)?)
}

fn load_checkpoint(path: &str) -> Result<(ModelConfig, ModelParams<f32>, u32), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Run(format!("reading {path}: {e}")))?;
    let crc = checkpoint::crc32(&bytes);
    let (config, params) = checkpoint::from_bytes::<f32>(&bytes)?;
    Ok((config, params, crc))
}

fn write_file(path: &str, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::Run(format!("writing {path}: {e}")))?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────

fn cmd_gen_data(flags: &Flags) -> CliResult {
    let classes: usize = flags.require_num("classes")?;
    let n: usize = flags.require_num("n")?;
    let size: usize = flags.require_num("size")?;
    let channels: usize = flags.parse_num("channels", 1)?;
    let seed: u64 = flags.parse_num("seed", 0)?;
    let out = flags.require("out")?.to_string();
    flags.finish()?;
    let dataset = data::gen_synthetic(classes, n, size, channels, seed)?;
    dataset.save(Path::new(&out))?;
    println!(
        "wrote {} images ({}x{}x{}, {} classes, seed {}) to {}",
        dataset.len(),
        size,
        size,
        channels,
        classes,
        seed,
        out
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn cmd_train(flags: &Flags) -> CliResult {
    let config = load_config(flags.require("config")?)?;
    let data_path = flags.require("data")?.to_string();
    let out = flags.require("out")?.to_string();
    let metrics_path = flags.get("metrics").map(str::to_string);
    let settings = TrainSettings {
        steps: flags.parse_num("steps", 1000)?,
        batch_size: flags.parse_num("batch", 8)?,
        lr: flags.parse_num("lr", 3e-3)?,
        warmup_frac: flags.parse_num("warmup-frac", 0.05)?,
        ..Default::default()
    };
    flags.finish()?;

    let dataset = Dataset::load(Path::new(&data_path))?;
    let mut params = ModelParams::<f32>::init(&config)?;
    let mut csv = String::from("step,loss,acc_p,acc_l,acc_avg,grid\n");
    train_loop(&mut params, &config, &settings, &dataset, |m| {
        csv.push_str(&format!(
            "{},{:.6},{:.4},{:.4},{:.4},{}x{}\n",
            m.step, m.loss, m.acc_p, m.acc_l, m.acc_avg, m.grid.0, m.grid.1
        ));
        if m.step % 50 == 0 || m.step + 1 == settings.steps {
            println!(
                "step {:>5}  loss {:.4}  acc_p {:.3}  acc_l {:.3}  grid {}x{}",
                m.step, m.loss, m.acc_p, m.acc_l, m.grid.0, m.grid.1
            );
        }
    })?;
    checkpoint::save(Path::new(&out), &config, &params)?;
    if let Some(mp) = metrics_path {
        write_file(&mp, &csv)?;
        println!("metrics written to {mp}");
    }
    println!("checkpoint written to {out}");
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

fn cmd_eval(flags: &Flags) -> CliResult {
    let (config, params, crc) = load_checkpoint(flags.require("ckpt")?)?;
    let dataset = Dataset::load(Path::new(flags.require("data")?))?;
    let grids = match flags.get("grids") {
        Some(s) => parse_grid_list(s)?,
        None => config.compressed_grids.iter().map(|g| (g[0], g[1])).collect(),
    };
    let out = flags.get("out").map(str::to_string);
    flags.finish()?;

    let mut csv = String::from("grid_h,grid_w,acc_p,acc_l,acc_avg,checkpoint_crc32\n");
    for grid in grids {
        let (acc_p, acc_l, acc_avg) = evaluate(&params, &config, &dataset, grid)?;
        println!(
            "grid {}x{}: acc_p {:.4}  acc_l {:.4}  acc_avg {:.4}",
            grid.0, grid.1, acc_p, acc_l, acc_avg
        );
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{crc:08x}\n",
            grid.0, grid.1, acc_p, acc_l, acc_avg
        ));
    }
    if let Some(out) = out {
        write_file(&out, &csv)?;
        println!("results written to {out}");
    }
    Ok(())
}

// ── flops ───────────────────────────────────────────────────────────

const FLOPS_HEADER: &str = "size,grid_h,grid_w,N,M,D,depth,gmacs,gflops\n";

fn flops_csv_row(
    size: usize,
    grid: (usize, usize),
    n: u64,
    m: u64,
    d: u64,
    depth: u64,
    macs: u64,
) -> String {
    format!(
        "{size},{},{},{n},{m},{d},{depth},{:.4},{:.4}\n",
        grid.0,
        grid.1,
        macs as f64 / 1e9,
        (macs * flops::MAC_TO_FLOP) as f64 / 1e9
    )
}

fn cmd_flops(flags: &Flags) -> CliResult {
    if flags.switch("empirical") {
        return cmd_flops_empirical(flags);
    }
    let p: u64 = flags.parse_num("p", 4)?;
    let q: u64 = flags.parse_num("q", 2)?;
    let include_all = flags.switch("all");
    let out = flags.get("out").map(str::to_string);

    let mut csv = String::from(FLOPS_HEADER);
    if let Some(preset) = flags.get("preset") {
        if preset != "b16-224" {
            return Err(CliError::Usage(format!("unknown preset `{preset}`")));
        }
        flags.finish()?;
        let (size, patch, d, depth, classes) = (224usize, 16u64, 768u64, 12u64, 1000u64);
        let n = (size as u64 / patch).pow(2);
        let extras =
            if include_all { flops::extras_macs(n, patch * patch * 3, d, classes) } else { 0 };
        let vit = flops::vit_block_macs(n, d) * depth + extras;
        println!("vanilla block stack @ {size}px: {:.2} GFLOPs", (vit * 2) as f64 / 1e9);
        csv.push_str(&flops_csv_row(size, (0, 0), n, 0, d, depth, vit));
        for grid in [(3usize, 3usize), (5, 5), (7, 7), (10, 10)] {
            let m = (grid.0 * grid.1) as u64;
            let macs = flops::lookup_block_macs(n, m, d, p, q)? * depth + extras;
            println!(
                "compression {}x{} @ {size}px: {:.2} GFLOPs",
                grid.0,
                grid.1,
                (macs * 2) as f64 / 1e9
            );
            csv.push_str(&flops_csv_row(size, grid, n, m, d, depth, macs));
        }
    } else if let Some(dims) = flags.get("dims") {
        let parts: Vec<u64> = dims
            .split(',')
            .map(|x| x.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--dims `{dims}` is not N,M,D,DEPTH")))?;
        let [n, m, d, depth]: [u64; 4] = parts
            .try_into()
            .map_err(|_| CliError::Usage(format!("--dims `{dims}` is not N,M,D,DEPTH")))?;
        flags.finish()?;
        let macs = flops::lookup_block_macs(n, m, d, p, q)? * depth;
        let vit = flops::vit_block_macs(n, d) * depth;
        println!(
            "N={n} M={m} D={d} depth={depth}: compression {:.4} GFLOPs, vanilla {:.4} GFLOPs",
            (macs * 2) as f64 / 1e9,
            (vit * 2) as f64 / 1e9
        );
        csv.push_str(&flops_csv_row(0, (0, 0), n, m, d, depth, macs));
    } else if flags.switch("sweep") {
        let sizes: Vec<usize> = flags
            .require("sizes")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage("bad --sizes list".into()))?;
        let grids = parse_grid_list(flags.require("grids")?)?;
        let patch: usize = flags.parse_num("patch", 16)?;
        let d: u64 = flags.parse_num("d", 768)?;
        let depth: u64 = flags.parse_num("depth", 12)?;
        flags.finish()?;
        let rows = flops::scaling_sweep(&sizes, patch, &grids, d, depth, p, q)?;
        let mut last_size = 0usize;
        for row in &rows {
            if row.image_size != last_size {
                last_size = row.image_size;
                let vit_macs = flops::vit_block_macs(row.n, d) * depth;
                csv.push_str(&flops_csv_row(row.image_size, (0, 0), row.n, 0, d, depth, vit_macs));
            }
            println!(
                "size {:>4} grid {:>2}x{:<2}: {:.2} GFLOPs (vanilla {:.2})",
                row.image_size, row.grid.0, row.grid.1, row.lookup_gflops, row.vit_gflops
            );
            let macs = flops::lookup_block_macs(row.n, row.m, d, p, q)? * depth;
            csv.push_str(&flops_csv_row(row.image_size, row.grid, row.n, row.m, d, depth, macs));
        }
    } else {
        return Err(CliError::Usage("flops needs --preset, --dims, --sweep or --empirical".into()));
    }
    if let Some(out) = out {
        write_file(&out, &csv)?;
        println!("cost table written to {out}");
    }
    Ok(())
}

fn cmd_flops_empirical(flags: &Flags) -> CliResult {
    let config = load_config(flags.require("config")?)?;
    let grid = match flags.get("grid") {
        Some(g) => parse_grid(g)?,
        None => (config.compressed_grids[0][0], config.compressed_grids[0][1]),
    };
    let out = flags.get("out").map(str::to_string);
    flags.finish()?;

    let report = flops::empirical_macs(&config, grid)?;
    let n = config.num_lookup_tokens() as u64;
    let m = (grid.0 * grid.1) as u64;
    let analytic =
        flops::lookup_block_terms(n, m, config.dim as u64, config.p as u64, config.q as u64)?;
    let mut csv = String::from(
        "block,attention_cross,attention_quadratic,projections,mlp_compressed,mlp_lookup,neglected,modeled_total,analytic_total,match\n",
    );
    for (i, b) in report.per_block.iter().enumerate() {
        let ok = b.modeled_total() == analytic.modeled_total()
            && b.projections == analytic.projections
            && b.attention_cross == analytic.attention_cross;
        println!(
            "block {i}: modeled {} MACs vs analytic {} -> {}",
            b.modeled_total(),
            analytic.modeled_total(),
            if ok { "exact" } else { "MISMATCH" }
        );
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            b.attention_cross,
            b.attention_quadratic,
            b.projections,
            b.mlp_compressed,
            b.mlp_lookup,
            b.neglected,
            b.modeled_total(),
            analytic.modeled_total(),
            ok
        ));
    }
    println!(
        "tokenize {} MACs, heads {} MACs, neglected fraction {:.4}",
        report.tokenize.total_with_neglected(),
        report.heads.total_with_neglected(),
        report.neglected_fraction()
    );
    if let Some(out) = out {
        write_file(&out, &csv)?;
        println!("per-block counts written to {out}");
    }
    Ok(())
}

// ── attnmap ─────────────────────────────────────────────────────────

fn cmd_attnmap(flags: &Flags) -> CliResult {
    let (config, params, _) = load_checkpoint(flags.require("ckpt")?)?;
    let dataset = Dataset::load(Path::new(flags.require("data")?))?;
    let index: usize = flags.parse_num("index", 0)?;
    let grid = match flags.get("grid") {
        Some(g) => parse_grid(g)?,
        None => (config.compressed_grids[0][0], config.compressed_grids[0][1]),
    };
    let out_dir = PathBuf::from(flags.require("out-dir")?);
    flags.finish()?;

    if config.flags.no_lookup_tokens {
        return Err(CliError::Run(
            "this checkpoint was trained without lookup tokens; no cross-attention maps exist"
                .into(),
        ));
    }
    if index >= dataset.len() {
        return Err(CliError::Run(format!(
            "--index {index} out of range for {} images",
            dataset.len()
        )));
    }
    std::fs::create_dir_all(&out_dir)?;

    let mut tape = Tape::new();
    let img = tape.leaf(dataset.image_tensor::<f32>(index), false);
    let bound = params.bind(&mut tape, false);
    let out = forward(&mut tape, img, &bound, &config, grid)?;
    let (hl, wl) = (config.lookup_grid[0], config.lookup_grid[1]);
    for (layer, attn) in out.attn.iter().enumerate() {
        // Average over heads and over compressed tokens: one weight per
        // lookup position.
        let t = attn.to_tensor(&tape);
        let (heads, m, n) = (attn.heads(), attn.queries, attn.keys);
        let mut map = vec![0.0f64; n];
        for h in 0..heads {
            for q in 0..m {
                for (j, slot) in map.iter_mut().enumerate() {
                    *slot += t.data()[(h * m + q) * n + j] as f64;
                }
            }
        }
        for v in map.iter_mut() {
            *v /= (heads * m) as f64;
        }
        let pgm_text = lookupvit::pgm::to_p2_string(&map, wl, hl)?;
        std::fs::write(out_dir.join(format!("layer{layer:02}.pgm")), pgm_text)?;
        let mut csv = String::new();
        for row in map.chunks(wl) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        std::fs::write(out_dir.join(format!("layer{layer:02}.csv")), csv)?;
    }
    println!(
        "wrote {} attention maps ({}x{}) for image {index} to {}",
        out.attn.len(),
        hl,
        wl,
        out_dir.display()
    );
    Ok(())
}

// ── robust ──────────────────────────────────────────────────────────

fn cmd_robust(flags: &Flags) -> CliResult {
    let (config, params, _) = load_checkpoint(flags.require("ckpt")?)?;
    let dataset = Dataset::load(Path::new(flags.require("data")?))?;
    let samples: usize = flags.parse_num("samples", 20)?;
    let severities: usize = flags.parse_num("severities", 5)?;
    let grid = match flags.get("grid") {
        Some(g) => parse_grid(g)?,
        None => (config.compressed_grids[0][0], config.compressed_grids[0][1]),
    };
    let out = flags.get("out").map(str::to_string);
    flags.finish()?;

    let samples = samples.min(dataset.len());
    if samples == 0 {
        return Err(CliError::Run("dataset is empty".into()));
    }
    let mut csv = String::from("severity,sigma,mean_deviation,samples\n");
    for severity in 1..=severities {
        let sigma = 0.05 * severity as f64;
        let mut rng = SplitMix64::new(config.seed ^ (0xC0_22 + severity as u64));
        let mut total = 0.0;
        for i in 0..samples {
            let clean = dataset.image_tensor::<f32>(i);
            let corrupted = data::corrupt(&clean, sigma, &mut rng);
            total += feature_deviation(&params, &config, &clean, &corrupted, grid)?;
        }
        let mean = total / samples as f64;
        println!("severity {severity} (sigma {sigma:.2}): mean deviation {mean:.6}");
        csv.push_str(&format!("{severity},{sigma:.2},{mean:.6},{samples}\n"));
    }
    if let Some(out) = out {
        write_file(&out, &csv)?;
        println!("deviation table written to {out}");
    }
    Ok(())
}
