//! Command-line interface: `split`, `audit`, `compare` and `synth`.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ascent::MoveStrategy;
use crate::exec::{configure_threads, Execution};
use crate::manifest::{parse_manifest, Dataset};
use crate::pipeline::{
    run_pipeline, Partition, PipelineOptions, PresetName, Ratios, SplitAssignment, SplitPreset,
    StageSpec,
};
use crate::report::{audit, render_comparison, SplitReport};
use crate::synth::{generate, SynthSpec};
use crate::{Error, Result};

pub const SEED_ENV: &str = "SPLITFORGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "splitforge", version, about = "Optimized train/valid/test splits for SLU datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a split and write split files plus an audit report.
    Split(SplitArgs),
    /// Audit an existing set of split files.
    Audit(AuditArgs),
    /// Audit several assignments side by side.
    Compare(CompareArgs),
    /// Generate a synthetic manifest pair.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Utterance manifest CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Speaker metadata CSV.
    #[arg(long)]
    pub speakers: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// unseen, challenge, snips or random (default: unseen).
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<PresetName>,
    /// Falls back to the config file, then $SPLITFORGE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent ascent restarts per stage (default: 5).
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Upper bound on sweeps over all blocks per restart (default: 50).
    #[arg(long)]
    pub max_passes: Option<usize>,
    /// train:valid:test_speaker:test_utterance percentages.
    #[arg(long, value_parser = parse_ratios)]
    pub ratios: Option<Ratios>,
    /// Output directory; required unless the config file sets it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Log progress and write the ascent trace as JSON lines.
    #[arg(long)]
    pub verbose: bool,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    pub emit_config: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Split CSV files, or directories holding them.
    #[arg(long, required = true, num_args = 1..)]
    pub splits: Vec<PathBuf>,
    /// Write report.json and report.txt here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// One directory of split files per assignment, in column order.
    #[arg(long = "splits", required = true, num_args = 1..)]
    pub assignments: Vec<PathBuf>,
    /// Column names; defaults to the directory names.
    #[arg(long = "name")]
    pub names: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML synthetic spec; defaults to the built-in spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit hypotheses identical to the transcripts.
    #[arg(long)]
    pub no_corruption: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<PresetName, String> {
    s.parse()
}

fn parse_ratios(s: &str) -> std::result::Result<Ratios, String> {
    s.parse()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    pub speakers: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_passes: Option<usize>,
    pub strategy: Option<MoveStrategy>,
    pub out: Option<PathBuf>,
}

/// Preset by name, with any field overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSection {
    pub name: PresetName,
    pub ratios: Option<Ratios>,
    pub speaker_stage: Option<StageSpec>,
    pub utterance_stage: Option<StageSpec>,
    pub allow_shared_test_transcripts: Option<bool>,
}

impl PresetSection {
    fn resolve(&self) -> SplitPreset {
        let mut preset = SplitPreset::named(self.name);
        if let Some(r) = self.ratios {
            preset.ratios = r;
        }
        if let Some(s) = &self.speaker_stage {
            preset.speaker_stage = Some(s.clone());
        }
        if let Some(s) = &self.utterance_stage {
            preset.utterance_stage = Some(s.clone());
        }
        if let Some(a) = self.allow_shared_test_transcripts {
            preset.allow_shared_test_transcripts = a;
        }
        preset
    }

    fn inline(preset: &SplitPreset) -> Self {
        PresetSection {
            name: preset.name,
            ratios: Some(preset.ratios),
            speaker_stage: preset.speaker_stage.clone(),
            utterance_stage: preset.utterance_stage.clone(),
            allow_shared_test_transcripts: Some(preset.allow_shared_test_transcripts),
        }
    }
}

/// TOML run configuration for `split`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub run: RunSection,
    pub preset: Option<PresetSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Everything `split` needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub manifest: PathBuf,
    pub speakers: PathBuf,
    pub out: PathBuf,
    pub preset: SplitPreset,
    pub options: PipelineOptions,
}

impl ResolvedRun {
    /// Config that reproduces this run on its own.
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            dataset: DatasetSection {
                manifest: Some(self.manifest.clone()),
                speakers: Some(self.speakers.clone()),
            },
            run: RunSection {
                seed: Some(self.options.seed),
                restarts: Some(self.options.ascent.restarts),
                max_passes: Some(self.options.ascent.max_passes),
                strategy: Some(self.options.ascent.strategy),
                out: Some(self.out.clone()),
            },
            preset: Some(PresetSection::inline(&self.preset)),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_owned()),
        _ => Error::io(path, e),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Merges defaults, the config file, the environment and flags.
pub fn resolve_split(args: &SplitArgs, seed_env: Option<&str>) -> Result<ResolvedRun> {
    let file = match &args.config {
        Some(path) => RunConfig::from_toml(&read_text(path)?)?,
        None => RunConfig::default(),
    };
    let manifest = args
        .dataset
        .manifest
        .clone()
        .or(file.dataset.manifest)
        .ok_or_else(|| Error::Validation("--manifest is required".into()))?;
    let speakers = args
        .dataset
        .speakers
        .clone()
        .or(file.dataset.speakers)
        .ok_or_else(|| Error::Validation("--speakers is required".into()))?;
    let out = args
        .out
        .clone()
        .or(file.run.out)
        .ok_or_else(|| Error::Validation("--out is required".into()))?;

    let env_seed = seed_env
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::Validation(format!("{SEED_ENV}=`{s}`: {e}")))
        })
        .transpose()?;
    let seed = args.seed.or(file.run.seed).or(env_seed).unwrap_or(0);

    let mut preset = match (args.preset, &file.preset) {
        (Some(name), _) => SplitPreset::named(name),
        (None, Some(section)) => section.resolve(),
        (None, None) => SplitPreset::named(PresetName::Unseen),
    };
    if let Some(r) = args.ratios {
        preset.ratios = r;
    }

    let mut options = PipelineOptions::new(seed);
    if let Some(r) = args.restarts.or(file.run.restarts) {
        options.ascent.restarts = r;
    }
    if let Some(p) = args.max_passes.or(file.run.max_passes) {
        options.ascent.max_passes = p;
    }
    if let Some(s) = file.run.strategy {
        options.ascent.strategy = s;
    }
    if options.ascent.restarts == 0 {
        return Err(Error::Validation("restarts must be at least 1".into()));
    }
    if options.ascent.max_passes == 0 {
        return Err(Error::Validation("max_passes must be at least 1".into()));
    }
    if args.threads == Some(0) {
        return Err(Error::Validation("threads must be at least 1".into()));
    }
    if args.threads == Some(1) {
        options.ascent.execution = Execution::Sequential;
    }
    options.ascent.record_trace = args.verbose;
    preset.ratios.validate()?;
    Ok(ResolvedRun {
        manifest,
        speakers,
        out,
        preset,
        options,
    })
}

fn load_dataset(manifest: &Path, speakers: &Path) -> Result<Dataset> {
    let m = read_text(manifest)?;
    let s = read_text(speakers)?;
    Ok(parse_manifest(&m, &s)?)
}

fn dataset_paths(args: &DatasetArgs) -> Result<(PathBuf, PathBuf)> {
    match (&args.manifest, &args.speakers) {
        (Some(m), Some(s)) => Ok((m.clone(), s.clone())),
        _ => Err(Error::Validation("--manifest and --speakers are required".into())),
    }
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let env = std::env::var(SEED_ENV).ok();
    let run = resolve_split(args, env.as_deref())?;
    if args.emit_config {
        print!("{}", run.to_config().to_toml());
        return Ok(());
    }
    configure_threads(args.threads);
    let dataset = load_dataset(&run.manifest, &run.speakers)?;
    run.preset.validate(dataset.has_hypotheses())?;
    log::info!(
        "{} utterances, {} speakers, {} transcripts; preset {:?}, seed {}",
        dataset.len(),
        dataset.speaker_index().len(),
        dataset.transcript_index().len(),
        run.preset.name,
        run.options.seed
    );
    let outcome = run_pipeline(&dataset, &run.preset, &run.options)?;
    for stage in &outcome.stages {
        log::info!(
            "{}: {} of {} blocks, {} utterances (target {} +/- {}), score {:.6}",
            stage.stage,
            stage.selected_blocks,
            stage.blocks,
            stage.selected_utterances,
            stage.target_size,
            stage.size_tolerance,
            stage.best_score
        );
    }
    write_outputs(&run, &outcome.assignment, &outcome.report)?;
    if args.verbose {
        let mut lines = String::new();
        for (stage, event) in &outcome.trace {
            let mut value = serde_json::to_value(event).expect("trace serializes");
            value["stage"] = serde_json::Value::from(stage.as_str());
            lines.push_str(&value.to_string());
            lines.push('\n');
        }
        write_text(&run.out.join("trace.jsonl"), &lines)?;
    }
    print!("{}", outcome.report.render_table());
    Ok(())
}

fn write_outputs(run: &ResolvedRun, assignment: &SplitAssignment, report: &SplitReport) -> Result<()> {
    let splits = run.out.join("splits");
    for p in Partition::ALL {
        write_text(&splits.join(format!("{p}.csv")), &assignment.to_split_csv(p))?;
    }
    write_text(&run.out.join("report.json"), &(report.to_json() + "\n"))?;
    write_text(&run.out.join("report.txt"), &report.render_table())?;
    write_text(&run.out.join("config.toml"), &run.to_config().to_toml())?;
    Ok(())
}

/// Expands directories to their `*.csv` files, sorted by name.
fn split_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else if path.exists() {
            files.push(path.clone());
        } else {
            return Err(Error::MissingInput(path.clone()));
        }
    }
    if files.is_empty() {
        return Err(Error::Validation("no split files found".into()));
    }
    Ok(files)
}

/// Accepts either an output directory (uses its `splits/`) or a split directory.
fn load_assignment(paths: &[PathBuf]) -> Result<SplitAssignment> {
    let paths: Vec<PathBuf> = paths
        .iter()
        .map(|p| {
            let nested = p.join("splits");
            if nested.is_dir() {
                nested
            } else {
                p.clone()
            }
        })
        .collect();
    let texts = split_files(&paths)?
        .iter()
        .map(|p| read_text(p))
        .collect::<Result<Vec<_>>>()?;
    SplitAssignment::from_split_csvs(texts.iter().map(String::as_str))
}

pub fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let (m, s) = dataset_paths(&args.dataset)?;
    let dataset = load_dataset(&m, &s)?;
    let assignment = load_assignment(&args.splits)?;
    let report = audit(&dataset, &assignment)?;
    if let Some(out) = &args.out {
        write_text(&out.join("report.json"), &(report.to_json() + "\n"))?;
        write_text(&out.join("report.txt"), &report.render_table())?;
    }
    print!("{}", report.render_table());
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.assignments.len() < 2 {
        return Err(Error::Validation("compare needs at least two assignments".into()));
    }
    if !args.names.is_empty() && args.names.len() != args.assignments.len() {
        return Err(Error::Validation("give one --name per --splits".into()));
    }
    let (m, s) = dataset_paths(&args.dataset)?;
    let dataset = load_dataset(&m, &s)?;
    let mut reports = Vec::new();
    for (i, path) in args.assignments.iter().enumerate() {
        let name = args.names.get(i).cloned().unwrap_or_else(|| {
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("#{}", i + 1))
        });
        let assignment = load_assignment(std::slice::from_ref(path))?;
        reports.push((name, audit(&dataset, &assignment)?));
    }
    print!("{}", render_comparison(&reports));
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => SynthSpec::from_toml(&read_text(path)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.no_corruption {
        spec = spec.without_corruption();
    }
    let (manifest, metadata) = generate(&spec)?;
    write_text(&args.out.join("manifest.csv"), &manifest)?;
    write_text(&args.out.join("speakers.csv"), &metadata)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let verbose = matches!(&cli.command, Command::Split(a) if a.verbose);
    let _ = env_logger::Builder::new()
        .filter_level(if verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .try_init();
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_args(extra: &[&str]) -> SplitArgs {
        let mut argv = vec!["splitforge", "split", "--manifest", "m.csv", "--speakers", "s.csv", "--out", "o"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Split(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_split(&split_args(&[]), None).unwrap().options.seed, 0);
        assert_eq!(resolve_split(&split_args(&[]), Some("9")).unwrap().options.seed, 9);
        let run = resolve_split(&split_args(&["--seed", "4"]), Some("9")).unwrap();
        assert_eq!(run.options.seed, 4);
        assert!(resolve_split(&split_args(&[]), Some("nine")).is_err());
    }

    #[test]
    fn flags_override_preset() {
        let run = resolve_split(&split_args(&["--preset", "snips", "--ratios", "80:10:10:0"]), None).unwrap();
        assert_eq!(run.preset.name, PresetName::SnipsUnseenCombined);
        assert_eq!(run.preset.ratios, Ratios::new(80.0, 10.0, 10.0, 0.0));
        let bad = resolve_split(&split_args(&["--ratios", "80:10:10:10"]), None);
        assert_eq!(bad.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn emitted_config_round_trips() {
        let run = resolve_split(&split_args(&["--preset", "challenge", "--seed", "3", "--restarts", "2"]), None).unwrap();
        let text = run.to_config().to_toml();
        let config = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, run.to_config());
        assert_eq!(config.preset.unwrap().resolve(), run.preset);
    }

    #[test]
    fn unknown_preset_rejected() {
        let argv = ["splitforge", "split", "--preset", "bogus"];
        assert!(Cli::try_parse_from(argv).is_err());
    }
}
