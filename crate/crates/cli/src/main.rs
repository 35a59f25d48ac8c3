//! `proci` command-line interface.
//!
//! ```bash
//! proci gen --config exp.toml --seed 1 --out data/
//! proci proci --config exp.toml --seed 1 --oracle scripted:rules.json --out run/
//! proci fit --config exp.toml --seed 1 --out fit/
//! proci experiment rq1 --config exp.toml --out results/ --workers 4
//! proci kcit --data data.csv --y y0,y1 --t t --z x0,x1
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use proci::bench::write_benchmark_dir;
use proci::harness::{fit_entry, output_dir, run_experiment, split_for, Experiment, ExperimentConfig, OracleSpec};
use proci::kernel::{kcit_pvalue, KcitConfig};
use proci::pipeline::run_proci;
use proci::rng::{derive_seed, label_hash};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "proci", version, about = "Progressive confounder imputation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured benchmark dataset for one seed.
    Gen(Common),
    /// Run the imputation loop on the configured dataset for one seed.
    Proci(Common),
    /// Grid-search and fit each configured estimator for one seed.
    Fit(Common),
    /// Run one of the four experiments over the configured seeds.
    Experiment {
        #[arg(value_enum)]
        which: Which,
        #[command(flatten)]
        common: Common,
    },
    /// Standalone conditional-independence test on CSV columns.
    Kcit(KcitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Rq1,
    Rq2,
    Rq3,
    Rq4,
}

impl From<Which> for Experiment {
    fn from(w: Which) -> Self {
        match w {
            Which::Rq1 => Self::Rq1,
            Which::Rq2 => Self::Rq2,
            Which::Rq3 => Self::Rq3,
            Which::Rq4 => Self::Rq4,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML, or JSON with a `.json` extension).
    #[arg(long)]
    config: PathBuf,
    /// Use this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Oracle override: `scripted:<path>` or `http:<url>`.
    #[arg(long)]
    oracle: Option<String>,
    /// Permit a live endpoint oracle.
    #[arg(long)]
    allow_live: bool,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the configured count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct KcitArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated outcome columns.
    #[arg(long, value_delimiter = ',', required = true)]
    y: Vec<String>,
    /// Binary treatment column.
    #[arg(long)]
    t: String,
    /// Comma-separated conditioning columns; may be empty.
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    /// KCIT settings as JSON; missing fields take their defaults.
    #[arg(long)]
    kcit_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Include the null statistics in the output.
    #[arg(long)]
    verbose: bool,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(flag) = &c.oracle {
        let Some(proci) = cfg.proci.as_mut() else {
            bail!("--oracle needs a [proci] section in the config");
        };
        proci.oracle = OracleSpec::parse_flag(flag, Some(&proci.oracle))?;
    }
    if let Some(p) = &cfg.proci {
        if p.oracle.is_live() && !c.allow_live {
            bail!("the configured oracle is a live endpoint; pass --allow-live to use it");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_seed(cfg: &ExperimentConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => bail!("this command runs one seed; pass --seed or list exactly one seed"),
    }
}

fn required_out(cfg: &ExperimentConfig, c: &Common) -> Result<PathBuf> {
    output_dir(cfg, c.out.clone()).context("no output directory; pass --out or set output_dir")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = single_seed(&cfg)?;
    let out = required_out(&cfg, c)?;
    let bench = cfg.dataset.build(seed)?;
    let spec = json!({ "dataset": serde_json::to_value(&cfg.dataset)?, "seed": seed });
    write_benchmark_dir(&bench, &out, Some(spec))?;
    println!("wrote {} units x {} covariates to {}", bench.n(), bench.base.d(), out.display());
    Ok(())
}

fn proci_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = single_seed(&cfg)?;
    let out = required_out(&cfg, c)?;
    let settings = cfg.proci.as_ref().context("the config has no [proci] section")?;
    let bench = cfg.dataset.build(seed)?;
    let mut pipeline = settings.pipeline.clone();
    pipeline.seed = derive_seed(seed, label_hash("proci"));
    pipeline.kcit.seed = derive_seed(seed, label_hash("kcit"));
    let mut session = settings.oracle.session(&bench, settings.batch_size)?;
    let result = run_proci(&bench.base, &pipeline, &mut session)?;
    result.write_run_dir(&out, Some(&session))?;
    println!(
        "{:?} after {} confounder(s); run written to {}",
        result.termination,
        result.confounders.len(),
        out.display()
    );
    Ok(())
}

fn fit(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = single_seed(&cfg)?;
    let out = required_out(&cfg, c)?;
    std::fs::create_dir_all(&out)?;
    let bench = cfg.dataset.build(seed)?;
    let split = split_for(&cfg, &bench, seed)?;
    let mut summary = Vec::new();
    for entry in &cfg.estimators {
        let label = entry.kind.label();
        let (g, inside, outside) = fit_entry(entry, &bench, &split, seed).with_context(|| format!("fitting {label}"))?;
        g.model.save(&out.join(format!("{label}.model.json")))?;
        println!("{label}: out-sample pehe {:?}", outside.pehe);
        summary.push(json!({
            "estimator": label,
            "chosen": g.best,
            "validation_loss": g.model.validation_loss(),
            "in_sample": inside,
            "out_sample": outside,
        }));
    }
    write_json(&out.join("fit.json"), &json!({ "seed": seed, "estimators": summary }))
}

fn experiment(which: Which, c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let out = output_dir(&cfg, c.out.clone());
    let (report, timings) = run_experiment(which.into(), &cfg, out.as_deref())?;
    match &out {
        Some(dir) => {
            report.write(dir, Some(&timings))?;
            println!("report written to {}", dir.display());
        }
        None => print!("{}", report.to_json()?),
    }
    let failed = report.cells.iter().filter(|c| c.status != proci::harness::CellStatus::Ok).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the report for reasons", report.cells.len());
    }
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let mut columns = vec![Vec::new(); header.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .with_context(|| format!("row {} column `{}`: `{field}` is not a number", row + 1, header[j]))?;
            columns[j].push(v);
        }
    }
    Ok((header, columns))
}

fn kcit(a: &KcitArgs) -> Result<()> {
    let (header, columns) = read_csv(&a.data)?;
    let column = |name: &str| -> Result<&Vec<f64>> {
        let j = header.iter().position(|h| h == name).with_context(|| format!("no column `{name}`"))?;
        Ok(&columns[j])
    };
    let block = |names: &[String]| -> Result<DMatrix<f64>> {
        let cols = names.iter().map(|n| column(n)).collect::<Result<Vec<_>>>()?;
        let n = columns.first().map_or(0, Vec::len);
        Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
    };
    let t = column(&a.t)?
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            _ => bail!("treatment row {} is {v}, expected 0 or 1", i + 1),
        })
        .collect::<Result<Vec<u8>>>()?;
    let mut cfg: KcitConfig = match &a.kcit_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => KcitConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let z_names: Vec<String> = a.z.iter().filter(|n| !n.is_empty()).cloned().collect();
    let r = kcit_pvalue(&block(&a.y)?, &t, &block(&z_names)?, &cfg)?;
    let mut out = json!({
        "statistic": r.statistic,
        "p_value": r.p_value,
        "alpha": cfg.alpha,
        "pass": r.pass,
        "n_permutations": cfg.n_permutations,
    });
    if a.verbose {
        out["null_statistics"] = json!(r.null_statistics);
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(c) => gen(&c),
        Command::Proci(c) => proci_cmd(&c),
        Command::Fit(c) => fit(&c),
        Command::Experiment { which, common } => experiment(which, &common),
        Command::Kcit(a) => kcit(&a),
    }
}
