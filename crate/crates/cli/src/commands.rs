use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgm_core::gmamba::{cascade_forward, leakage_ratio, CascadeConfig, CascadeKind};
use dgm_core::gradcheck::{run_gradcheck, GradCheckOptions, GradScope};
use dgm_core::losses::IGNORE_LABEL;
use dgm_core::metrics::{measure_scan_cost, miou};
use dgm_core::priors::make_priors;
use dgm_core::rng::seeded;
use dgm_core::scene::{leakage_scene_with, overfit_scene, OVERFIT_CLASSES};
use dgm_core::train::{train, TinyHead, TrainConfig};
use dgm_core::{CostReport, GeometricPriors, LabelMask, LossReport};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fieldfile::{FieldFile, MAGIC};
use crate::pgm::read_pgm;

pub const VMAP_FILE: &str = "vmap.dgmf";
pub const FLOW_FILE: &str = "flow.dgmf";
pub const CURV_FILE: &str = "curv.dgmf";
pub const DCOARSE_FILE: &str = "dcoarse.dgmf";

#[derive(Debug, Parser)]
#[command(name = "dgm", version, about = "Geometric priors, guided selective scans and their verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute V-map, flow, curvature and boundary map of a label mask.
    Priors(PriorsArgs),
    /// Run the three-layer scan cascade on a feature map.
    Scan(ScanArgs),
    /// Measure guided vs isotropic leakage on the two-region scene.
    Leakage(LeakageArgs),
    /// Multiply-add counts and wall time of the cascade at several sizes.
    Bench(BenchArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy head on the synthetic three-class scene.
    Overfit(OverfitArgs),
    /// Per-class IoU and mean IoU of two label maps.
    Miou(MiouArgs),
}

/// Options shared by every command that builds a model.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub state_size: Option<usize>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.channels {
            c.channels = v;
        }
        if let Some(v) = self.state_size {
            c.state_size = v;
        }
        if let Some(k) = self.kind {
            c.kind = k.into();
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Cascade,
    Iso3,
}

impl From<KindArg> for CascadeKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Cascade => CascadeKind::Cascade,
            KindArg::Iso3 => CascadeKind::Iso3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScanMode {
    Iso,
    Geo,
}

#[derive(Debug, Args)]
pub struct PriorsArgs {
    /// Label mask: binary PGM (P5) or a uint16 field file.
    pub mask: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Input feature map (field file).
    #[arg(long)]
    pub features: PathBuf,
    /// Directory written by `dgm priors`.
    #[arg(long)]
    pub priors: PathBuf,
    #[arg(long, value_enum, default_value = "geo")]
    pub mode: ScanMode,
    /// Output feature map; ΔD is written next to it as `<stem>_delta_d.dgmf`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct LeakageArgs {
    /// Number of consecutive seeds, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Feature value of region A.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub a: f64,
    /// Feature value of region B.
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub b: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated sizes, `N` for N×N or `HxW`.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub sizes: Vec<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    pub scope: GradScope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = dgm_core::gradcheck::INSTANCES)]
    pub instances: u64,
    /// Test hook: scale every reverse-mode gradient by this factor.
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub corrupt: f64,
}

#[derive(Debug, Args)]
pub struct OverfitArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MiouArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = IGNORE_LABEL)]
    pub ignore: u16,
}

/// Runs one parsed command. Tables go to `out`, notes to `err`.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Priors(a) => cmd_priors(a, out),
        Command::Scan(a) => cmd_scan(a, out),
        Command::Leakage(a) => cmd_leakage(a, out, err),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out, err),
        Command::Overfit(a) => cmd_overfit(a, out),
        Command::Miou(a) => cmd_miou(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Reads a label mask from a field file or a binary PGM, by magic bytes.
pub fn read_mask(path: &Path) -> CliResult<LabelMask> {
    let mut head = [0u8; 4];
    let n = {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        f.read(&mut head).map_err(|e| CliError::io(path, e))?
    };
    if n == 4 && &head == MAGIC {
        FieldFile::read(path)?.to_labels()
    } else {
        read_pgm(path)
    }
}

fn summary(name: &str, values: &[f64]) -> String {
    if values.is_empty() {
        return format!("{name} min=0 max=0 mean=0\n");
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    format!("{name} min={min} max={max} mean={mean}\n")
}

pub fn write_priors(dir: &Path, p: &GeometricPriors) -> CliResult<()> {
    create_dir(dir)?;
    FieldFile::from_scalar(&p.vmap).write(&dir.join(VMAP_FILE))?;
    FieldFile::from_vector(&p.flow).write(&dir.join(FLOW_FILE))?;
    FieldFile::from_scalar(&p.curv).write(&dir.join(CURV_FILE))?;
    FieldFile::from_scalar(&p.d_coarse).write(&dir.join(DCOARSE_FILE))
}

pub fn read_priors(dir: &Path) -> CliResult<GeometricPriors> {
    let p = GeometricPriors {
        vmap: FieldFile::read(&dir.join(VMAP_FILE))?.to_scalar()?,
        flow: FieldFile::read(&dir.join(FLOW_FILE))?.to_vector()?,
        curv: FieldFile::read(&dir.join(CURV_FILE))?.to_scalar()?,
        d_coarse: FieldFile::read(&dir.join(DCOARSE_FILE))?.to_scalar()?,
    };
    let dims = p.vmap.dims();
    if p.flow.dims() != dims || p.curv.dims() != dims || p.d_coarse.dims() != dims {
        return Err(CliError::Usage(format!("prior fields in {} disagree in size", dir.display())));
    }
    Ok(p)
}

pub fn cmd_priors(args: &PriorsArgs, out: &mut dyn Write) -> CliResult<()> {
    let mask = read_mask(&args.mask)?;
    let (h, w) = mask.dims();
    let priors = make_priors(&mask)?;
    write_priors(&args.out_dir, &priors)?;
    RunConfig { size: h.max(w), ..RunConfig::default() }.save_into(&args.out_dir)?;
    let mut text = summary("vmap", priors.vmap.data());
    text += &summary("flow", priors.flow.data());
    text += &summary("curv", priors.curv.data());
    text += &summary("dcoarse", priors.d_coarse.data());
    emit(out, &text)
}

/// `out.dgmf` → `out_delta_d.dgmf` in the same directory.
pub fn delta_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_delta_d.dgmf"))
}

pub fn cmd_scan(args: &ScanArgs, out: &mut dyn Write) -> CliResult<()> {
    let features = FieldFile::read(&args.features)?.to_features()?;
    let priors = read_priors(&args.priors)?;
    if priors.dims() != features.dims() {
        return Err(CliError::Usage(format!(
            "features are {}x{} but priors are {}x{}",
            features.height(),
            features.width(),
            priors.dims().0,
            priors.dims().1
        )));
    }
    let mut rc = args.config.resolve()?;
    rc.channels = features.channels();
    rc.size = features.height().max(features.width());
    rc.kind = match args.mode {
        ScanMode::Iso => CascadeKind::Iso3,
        ScanMode::Geo => CascadeKind::Cascade,
    };
    rc.validate()?;
    // Parameters are drawn for the default layout and then relabelled, so
    // both modes share every weight.
    let config =
        CascadeConfig::init(rc.channels, rc.state_size, CascadeKind::Cascade, &mut seeded(rc.seed)).with_kind(rc.kind);
    let result = cascade_forward(&features, &config, &priors)?;
    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    FieldFile::from_features(&result.features).write(&args.out)?;
    FieldFile::from_scalar(&result.delta_d).write(&delta_path(&args.out))?;
    rc.save_into(dir)?;
    let mut text = summary("output", result.features.data());
    text += &summary("delta_d", result.delta_d.data());
    text += &format!("madds {}\n", result.madds);
    emit(out, &text)
}

fn ratio(guided: f64, isotropic: f64) -> f64 {
    guided / isotropic
}

pub fn cmd_leakage(args: &LeakageArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let rc = args.config.resolve()?;
    rc.validate()?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if !(args.a.is_finite() && args.b.is_finite()) {
        return Err(CliError::Usage("region values must be finite".into()));
    }
    let scene = leakage_scene_with(rc.channels, rc.size, args.a, args.b)?;
    let mut csv = String::from("seed,guided,isotropic,ratio\n");
    let mut ratios = Vec::new();
    for seed in rc.seed..rc.seed + args.seeds {
        let config = CascadeConfig::init(rc.channels, rc.state_size, CascadeKind::Cascade, &mut seeded(seed));
        let (g, i) = leakage_ratio(&config, &scene)?;
        let r = ratio(g, i);
        ratios.push(r);
        csv += &format!("{seed},{g},{i},{r}\n");
    }
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("leakage.csv"), &csv)?;
        rc.save_into(dir)?;
    }
    emit(out, &csv)?;
    if ratios.len() > 1 {
        let m = median(&ratios);
        writeln!(err, "median ratio over {} seeds: {m}", ratios.len()).map_err(|e| CliError::io("<stderr>", e))?;
    }
    Ok(())
}

/// Median with NaN sorted last; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("bad size {s:?}, expected N or HxW"));
    let s = s.trim();
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn bench_csv(reports: &[CostReport]) -> String {
    let mut csv = format!("{}\n", CostReport::CSV_HEADER);
    for r in reports {
        csv += &r.csv_row();
        csv.push('\n');
    }
    csv
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let rc = args.config.resolve()?;
    rc.validate()?;
    let sizes = args.sizes.iter().map(|s| parse_size(s)).collect::<CliResult<Vec<_>>>()?;
    let config = CascadeConfig::init(rc.channels, rc.state_size, rc.kind, &mut seeded(rc.seed));
    let reports = measure_scan_cost(&config, &sizes, rc.seed)?;
    let csv = bench_csv(&reports);
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("bench.csv"), &csv)?;
        rc.save_into(dir)?;
    }
    emit(out, &csv)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let options = GradCheckOptions {
        seed: args.seed,
        instances: args.instances,
        corrupt_factor: args.corrupt,
        ..Default::default()
    };
    let s = run_gradcheck(args.scope, &options)?;
    let mut csv = String::from("op,max_rel_error,worst_index,step,status\n");
    for r in &s.reports {
        let status = if r.passes(s.tolerance) { "pass" } else { "FAIL" };
        csv += &format!("{},{:e},{},{:e},{status}\n", r.op, r.max_rel_error, r.worst_index, r.step);
    }
    emit(out, &csv)?;
    let verdict = if s.passes() { "pass" } else { "FAIL" };
    writeln!(
        err,
        "scope {}: {} checks, {} instances, max relative error {:e} (tolerance {:e}): {verdict}",
        s.scope,
        s.reports.len(),
        s.instances,
        s.max_rel_error(),
        s.tolerance
    )
    .map_err(|e| CliError::io("<stderr>", e))?;
    if s.passes() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check {} exceeded tolerance {:e}", s.scope, s.tolerance)))
    }
}

pub fn overfit_csv(log: &[(usize, LossReport)]) -> String {
    let mut csv = format!("step,{}\n", LossReport::CSV_HEADER);
    for (step, r) in log {
        csv += &step.to_string();
        for v in r.csv_fields() {
            csv += &format!(",{v}");
        }
        csv.push('\n');
    }
    csv
}

pub fn cmd_overfit(args: &OverfitArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut rc = args.config.resolve()?;
    if let Some(s) = args.steps {
        rc.steps = s;
    }
    if let Some(lr) = args.learning_rate {
        rc.learning_rate = lr;
    }
    rc.validate()?;
    let scene = overfit_scene(rc.channels, rc.size, rc.seed)?;
    let mut head = TinyHead::init(rc.channels, rc.state_size, OVERFIT_CLASSES, rc.kind, rc.seed);
    let tc = TrainConfig { steps: rc.steps, learning_rate: rc.learning_rate, loss: rc.loss };
    let log = train(&mut head, &scene, &tc)?;
    let csv = overfit_csv(&log);
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("overfit.csv"), &csv)?;
        rc.save_into(dir)?;
    }
    emit(out, &csv)
}

pub fn cmd_miou(args: &MiouArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.classes == 0 {
        return Err(CliError::Usage("--classes must be at least 1".into()));
    }
    let pred = read_mask(&args.pred)?;
    let gt = read_mask(&args.gt)?;
    let report = miou(&pred, &gt, args.classes, args.ignore)?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => csv += &format!("{c},{v}\n"),
            None => csv += &format!("{c},excluded\n"),
        }
    }
    csv += &format!("miou,{}\n", report.miou);
    emit(out, &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64").unwrap(), (64, 64));
        assert_eq!(parse_size("32x128").unwrap(), (32, 128));
        assert!(parse_size("x3").is_err());
        assert!(parse_size("").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn delta_path_sits_next_to_output() {
        assert_eq!(delta_path(Path::new("a/out.dgmf")), Path::new("a/out_delta_d.dgmf"));
    }

    #[test]
    fn summary_format() {
        assert_eq!(summary("v", &[0.0, 1.0, 0.5]), "v min=0 max=1 mean=0.5\n");
    }

    #[test]
    fn clap_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
