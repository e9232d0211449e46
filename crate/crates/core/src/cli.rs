//! The `conceptor` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::boolean::{AnyConceptor, ConceptorLike, Expr};
use crate::conceptor::{correlation_matrix, fit_bundle, ConceptorMeta, DEFAULT_APERTURE};
use crate::conceptor_file::{load_conceptor, save_conceptor};
use crate::diagnostics::{layer_sweep_multi, reports_summary_json, reports_to_csv, LayerInput, DEFAULT_LAMBDA};
use crate::error::{Error, ErrorClass, Result};
use crate::evaluation::{
    best_config_select, degeneracy_flag, mcq_tally, parse_jsonl, win_ratio, ConfigRow, McqRecord,
    Objective, ScoredPair, DEGENERACY_THRESHOLD,
};
use crate::geometry::{
    capture_fraction, concept_centroid, diffmean, evr, subspace_overlap, top_k_subspace, DiffMeanVariant,
    DEFAULT_K,
};
use crate::manifest::write_atomic;
use crate::steering::{
    load_plan, save_plan, steer_bundle, Combination, Injection, PlanPayload, PlanScope, SteeringPlan,
};
use crate::store::{load_bundle, pool_poles, save_bundle, ActivationBundle, Placement, PoleSelection, Split};
use crate::synth::{synth_bipolar, synth_concept_pair, synth_layer_suite, SUITE_LAYERS};

#[derive(Debug, Parser)]
#[command(name = "conceptor", version, about = "Conceptor fitting, composition, diagnostics and steering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoleArg {
    Bipolar,
    Pos,
    Neg,
    Neutral,
}

impl From<PoleArg> for PoleSelection {
    fn from(p: PoleArg) -> Self {
        match p {
            PoleArg::Bipolar => PoleSelection::Bipolar,
            PoleArg::Pos => PoleSelection::PositiveOnly,
            PoleArg::Neg => PoleSelection::NegativeOnly,
            PoleArg::Neutral => PoleSelection::NeutralOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CombinationArg {
    Replace,
    Interpolate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Last,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorArg {
    Conceptor,
    Addition,
    Diffmean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlacementArg {
    ResidualPreBlock,
    AttentionOutput,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InjectionArg {
    Once,
    Autoregressive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    BipolarVsNull,
    UnipolarPosMinusNeg,
    UnipolarNegMinusPos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeometryMode {
    Capture,
    Overlap,
    Evr,
    Trace,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvalMode {
    Winratio,
    Degeneracy,
    Mcq,
    Select,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    WinRatio,
    MeanProbability,
    ChoiceRate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a conceptor from a bundle.
    Fit {
        bundle: PathBuf,
        #[arg(long, default_value_t = DEFAULT_APERTURE, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "bipolar")]
        pole: PoleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer quota / EVR / trace / probe-AUC report over a bundle directory.
    Sweep {
        bundle_dir: PathBuf,
        /// One or more apertures (comma-separated or repeated).
        #[arg(long, value_delimiter = ',', default_value = "10", allow_negative_numbers = true)]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Directory of train/test probe bundles, matched to layers.
        #[arg(long)]
        probe_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a Boolean expression over conceptor files, e.g. `AND(a.cpt,NOT(b.cpt))`.
    Compose {
        expr: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subspace diagnostics over one or more bundles.
    Geometry {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: GeometryMode,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Aperture for `trace` mode.
        #[arg(long, default_value_t = DEFAULT_APERTURE, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a steering plan file.
    Plan {
        #[arg(long, value_enum, default_value = "conceptor")]
        operator: OperatorArg,
        /// Conceptor file (conceptor operator).
        #[arg(long)]
        conceptor: Option<PathBuf>,
        /// Bundle the additive vector is computed from (addition, diffmean).
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bipolar-vs-null")]
        variant: VariantArg,
        #[arg(long, value_enum)]
        combination: Option<CombinationArg>,
        #[arg(long, allow_negative_numbers = true)]
        beta: f64,
        /// Defaults to the layer recorded in the conceptor or bundle.
        #[arg(long)]
        layer: Option<u32>,
        #[arg(long, value_enum, default_value = "residual-pre-block")]
        placement: PlacementArg,
        #[arg(long, value_enum, default_value = "last")]
        scope: ScopeArg,
        #[arg(long, value_enum, default_value = "once")]
        injection: InjectionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a plan offline to a bundle whose rows are consecutive token states.
    Steer {
        plan: PathBuf,
        activations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score JSON-lines records.
    Eval {
        #[arg(value_enum)]
        mode: EvalMode,
        input: PathBuf,
        #[arg(long, default_value_t = DEGENERACY_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "win-ratio")]
        objective: ObjectiveArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic bundles.
    Synth {
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Rows per pole (per class for the suite).
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 10.0)]
        gap: f64,
        #[arg(long, default_value_t = 3)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        layer: u32,
        /// Write the multi-layer suite into the `--out` directory.
        #[arg(long, conflicts_with = "shared")]
        suite: bool,
        #[arg(long, default_value_t = SUITE_LAYERS)]
        layers: usize,
        /// Write a concept pair sharing this many of `--k` directions into `--out`.
        #[arg(long)]
        shared: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    let say = |stdout: &mut dyn Write, msg: String| {
        let _ = writeln!(stdout, "{msg}");
    };
    match command {
        Command::Fit {
            bundle,
            alpha,
            pole,
            out,
        } => {
            let b = pool_poles(&load_bundle(&bundle)?, pole.into())?;
            let c = fit_bundle(&b, alpha)?;
            let quota = c.quota();
            save_conceptor(&AnyConceptor::Fitted(c), &out)?;
            say(stdout, format!("wrote {} (quota {quota:.6})", out.display()));
        }
        Command::Sweep {
            bundle_dir,
            alpha,
            k,
            probe_dir,
            lambda,
            out,
        } => {
            let inputs = sweep_inputs(&bundle_dir, probe_dir.as_deref())?;
            let reports = layer_sweep_multi(&inputs, &alpha, k, lambda)?;
            write_atomic(&out, reports_to_csv(&reports).as_bytes())?;
            let summary = sidecar(&out, ".summary.json");
            write_atomic(&summary, reports_summary_json(&reports).as_bytes())?;
            let plot = sidecar(&out, ".gp");
            write_atomic(&plot, gnuplot_script(&out, alpha.len() > 1).as_bytes())?;
            say(
                stdout,
                format!("wrote {} ({} layers), {}", out.display(), inputs.len(), summary.display()),
            );
        }
        Command::Compose { expr, out } => {
            let c = compose(&expr)?;
            let text = c.expression().to_string();
            save_conceptor(&c, &out)?;
            say(stdout, format!("wrote {} = {text}", out.display()));
        }
        Command::Geometry {
            bundles,
            mode,
            k,
            alpha,
            out,
        } => {
            let loaded = bundles.iter().map(load_bundle).collect::<Result<Vec<_>>>()?;
            let csv = geometry_csv(&loaded, mode, k, alpha)?;
            write_atomic(&out, csv.as_bytes())?;
            say(stdout, format!("wrote {}", out.display()));
        }
        Command::Plan {
            operator,
            conceptor,
            bundle,
            variant,
            combination,
            beta,
            layer,
            placement,
            scope,
            injection,
            out,
        } => {
            let (payload, default_layer) = plan_payload(operator, conceptor.as_deref(), bundle.as_deref(), variant)?;
            let plan = SteeringPlan::new(
                payload,
                combination.map(|c| match c {
                    CombinationArg::Replace => Combination::Replace,
                    CombinationArg::Interpolate => Combination::Interpolate,
                }),
                beta,
                layer.unwrap_or(default_layer),
                match placement {
                    PlacementArg::ResidualPreBlock => Placement::ResidualPreBlock,
                    PlacementArg::AttentionOutput => Placement::AttentionOutput,
                },
                match scope {
                    ScopeArg::Last => PlanScope::LastToken,
                    ScopeArg::All => PlanScope::AllTokens,
                },
                match injection {
                    InjectionArg::Once => Injection::Once,
                    InjectionArg::Autoregressive => Injection::Autoregressive,
                },
            )?;
            save_plan(&plan, &out)?;
            say(stdout, format!("wrote {}", out.display()));
        }
        Command::Steer { plan, activations, out } => {
            let plan = load_plan(&plan)?;
            let steered = steer_bundle(&load_bundle(&activations)?, &plan)?;
            save_bundle(&steered, &out)?;
            say(stdout, format!("wrote {}", out.display()));
        }
        Command::Eval {
            mode,
            input,
            threshold,
            objective,
            out,
        } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let csv = eval_csv(mode, &text, threshold, objective, stdout)?;
            write_atomic(&out, csv.as_bytes())?;
            say(stdout, format!("wrote {}", out.display()));
        }
        Command::Synth {
            d,
            n,
            gap,
            rank,
            seed,
            layer,
            suite,
            layers,
            shared,
            k,
            out,
        } => {
            if suite {
                write_suite(&out, d, n, layers, seed)?;
                say(stdout, format!("wrote {layers} layers under {}", out.display()));
            } else if let Some(s) = shared {
                let (a, b) = synth_concept_pair(d, k, s, n, seed)?;
                fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                save_bundle(&a.with_layer(layer), out.join("a.bundle"))?;
                save_bundle(&b.with_layer(layer), out.join("b.bundle"))?;
                say(stdout, format!("wrote a.bundle and b.bundle under {}", out.display()));
            } else {
                let b = synth_bipolar(d, n, gap, rank, seed)?.with_layer(layer);
                save_bundle(&b, &out)?;
                say(stdout, format!("wrote {}", out.display()));
            }
        }
    }
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gnuplot_script(csv: &Path, long: bool) -> String {
    let name = csv.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (x, off) = if long { ("2", 1) } else { ("1", 0) };
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset xlabel 'layer'\n");
    s.push_str(&format!(
        "plot '{name}' using {x}:{} with linespoints, '' using {x}:{} with linespoints, '' using {x}:{} with points\n",
        2 + off,
        3 + off,
        5 + off
    ));
    s
}

fn bundle_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bundle"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptySelection(format!("no .bundle files in {}", dir.display())));
    }
    Ok(files)
}

fn sweep_inputs(dir: &Path, probe_dir: Option<&Path>) -> Result<Vec<LayerInput>> {
    let concepts = bundle_files(dir)?.iter().map(load_bundle).collect::<Result<Vec<_>>>()?;
    let mut probes: Vec<ActivationBundle> = match probe_dir {
        Some(p) => bundle_files(p)?.iter().map(load_bundle).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut inputs = Vec::with_capacity(concepts.len());
    for concept in concepts {
        let layer = concept.manifest().layer;
        let probe = if probe_dir.is_some() {
            let mut take = |split: Split| -> Result<ActivationBundle> {
                let i = probes
                    .iter()
                    .position(|b| b.manifest().layer == layer && b.manifest().split == Some(split))
                    .ok_or_else(|| {
                        Error::EmptySelection(format!("no {split} probe bundle for layer {layer}"))
                    })?;
                Ok(probes.remove(i))
            };
            let train = take(Split::Train)?;
            let test = take(Split::Test)?;
            Some((train, test))
        } else {
            None
        };
        inputs.push(LayerInput { concept, probe });
    }
    Ok(inputs)
}

/// Evaluates an expression whose leaves are conceptor file paths. Double
/// negations cancel before any arithmetic, so `NOT(NOT(x))` reproduces `x`.
pub fn compose(text: &str) -> Result<AnyConceptor> {
    let expr = Expr::parse(text)?.simplify();
    let mut resolve = |path: &str| load_conceptor(path);
    match &expr {
        Expr::Leaf(path) => Ok(match load_conceptor(path)? {
            AnyConceptor::Fitted(c) => {
                let meta = c.meta();
                let tagged = ConceptorMeta {
                    expression: Some(c.expression().to_string()),
                    ..meta.clone()
                };
                AnyConceptor::Fitted(c.with_meta(tagged))
            }
            composed => composed,
        }),
        _ => expr.evaluate(&mut resolve),
    }
}

fn plan_payload(
    operator: OperatorArg,
    conceptor: Option<&Path>,
    bundle: Option<&Path>,
    variant: VariantArg,
) -> Result<(PlanPayload, u32)> {
    match (operator, conceptor, bundle) {
        (OperatorArg::Conceptor, Some(path), None) => {
            let c = load_conceptor(path)?;
            let layer = c.layer();
            Ok((PlanPayload::Conceptor(c), layer))
        }
        (OperatorArg::Addition | OperatorArg::Diffmean, None, Some(path)) => {
            let b = load_bundle(path)?;
            let layer = b.manifest().layer;
            let payload = if operator == OperatorArg::Addition {
                PlanPayload::Addition(concept_centroid(&b)?)
            } else {
                let v = match variant {
                    VariantArg::BipolarVsNull => DiffMeanVariant::BipolarVsNull,
                    VariantArg::UnipolarPosMinusNeg => DiffMeanVariant::UnipolarPosMinusNeg,
                    VariantArg::UnipolarNegMinusPos => DiffMeanVariant::UnipolarNegMinusPos,
                };
                PlanPayload::DiffMean(diffmean(&b, v)?)
            };
            Ok((payload, layer))
        }
        _ => Err(Error::InvalidArgument(
            "the conceptor operator takes --conceptor; addition and diffmean take --bundle".into(),
        )),
    }
}

fn geometry_csv(bundles: &[ActivationBundle], mode: GeometryMode, k: usize, alpha: f64) -> Result<String> {
    let mut out = String::new();
    match mode {
        GeometryMode::Capture => {
            out.push_str("concept,layer,k,capture_bipolar,capture_pos,capture_neg\n");
            for b in bundles {
                let delta = diffmean(b, DiffMeanVariant::UnipolarPosMinusNeg)?;
                let cap = |sel: PoleSelection| -> Result<f64> {
                    capture_fraction(&delta.v, &top_k_subspace(&pool_poles(b, sel)?, k)?)
                };
                out.push_str(&format!(
                    "{},{},{k},{},{},{}\n",
                    b.manifest().concept,
                    b.manifest().layer,
                    cap(PoleSelection::Bipolar)?,
                    cap(PoleSelection::PositiveOnly)?,
                    cap(PoleSelection::NegativeOnly)?,
                ));
            }
        }
        GeometryMode::Overlap => {
            out.push_str("concept_a,concept_b,layer_a,layer_b,k,overlap\n");
            let bases = bundles.iter().map(|b| top_k_subspace(b, k)).collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(usize, usize)> = if bundles.len() == 1 {
                vec![(0, 0)]
            } else {
                (0..bundles.len())
                    .flat_map(|i| (i + 1..bundles.len()).map(move |j| (i, j)))
                    .collect()
            };
            for (i, j) in pairs {
                let (a, b) = (bundles[i].manifest(), bundles[j].manifest());
                out.push_str(&format!(
                    "{},{},{},{},{k},{}\n",
                    a.concept,
                    b.concept,
                    a.layer,
                    b.layer,
                    subspace_overlap(&bases[i], &bases[j])?
                ));
            }
        }
        GeometryMode::Evr => {
            out.push_str("concept,layer,k,evr\n");
            for b in bundles {
                let m = b.manifest();
                out.push_str(&format!("{},{},{k},{}\n", m.concept, m.layer, evr(&correlation_matrix(b), k)?));
            }
        }
        GeometryMode::Trace => {
            // Per-layer traces, then one all-layer mean row per concept.
            out.push_str("concept,layer,alpha,trace\n");
            let mut means: Vec<(String, f64, usize)> = Vec::new();
            for b in bundles {
                let m = b.manifest();
                let t = fit_bundle(b, alpha)?.trace_dim();
                out.push_str(&format!("{},{},{alpha},{t}\n", m.concept, m.layer));
                match means.iter_mut().find(|(c, _, _)| *c == m.concept) {
                    Some(entry) => {
                        entry.1 += t;
                        entry.2 += 1;
                    }
                    None => means.push((m.concept.clone(), t, 1)),
                }
            }
            for (concept, sum, count) in means {
                out.push_str(&format!("{concept},mean,{alpha},{}\n", sum / count as f64));
            }
        }
    }
    Ok(out)
}

fn eval_csv(
    mode: EvalMode,
    text: &str,
    threshold: f64,
    objective: ObjectiveArg,
    stdout: &mut dyn Write,
) -> Result<String> {
    Ok(match mode {
        EvalMode::Winratio => {
            let pairs: Vec<ScoredPair> = parse_jsonl("scored pairs", text)?;
            let w = win_ratio(&pairs)?;
            let _ = writeln!(stdout, "win_ratio {w}");
            format!("pairs,win_ratio\n{},{w}\n", pairs.len())
        }
        EvalMode::Degeneracy => {
            let pairs: Vec<ScoredPair> = parse_jsonl("scored pairs", text)?;
            let d = degeneracy_flag(&pairs, threshold)?;
            let _ = writeln!(stdout, "ratio {} degenerate {}", d.ratio, d.degenerate);
            format!("pairs,ratio,threshold,degenerate\n{},{},{threshold},{}\n", pairs.len(), d.ratio, d.degenerate)
        }
        EvalMode::Mcq => {
            let records: Vec<McqRecord> = parse_jsonl("MCQ records", text)?;
            mcq_tally(&records)?.to_csv()
        }
        EvalMode::Select => {
            let rows: Vec<ConfigRow> = parse_jsonl("config rows", text)?;
            let objective = match objective {
                ObjectiveArg::WinRatio => Objective::WinRatio,
                ObjectiveArg::MeanProbability => Objective::MeanProbability,
                ObjectiveArg::ChoiceRate => Objective::ChoiceRate,
            };
            let s = best_config_select(&rows, objective)?;
            if let Some(w) = &s.warning {
                let _ = writeln!(stdout, "warning: {w}");
            }
            format!(
                "config,win_ratio,degenerate,warning\n{},{},{},{}\n",
                s.row.config,
                s.row.win_ratio,
                s.row.degenerate,
                s.warning.is_some()
            )
        }
    })
}

fn write_suite(out: &Path, d: usize, n: usize, layers: usize, seed: u64) -> Result<()> {
    let suite = synth_layer_suite(d, n, layers, seed)?;
    let concept_dir = out.join("concept");
    let probe_dir = out.join("probe");
    for dir in [&concept_dir, &probe_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (i, layer) in suite.iter().enumerate() {
        save_bundle(&layer.concept, concept_dir.join(format!("layer_{i:02}.bundle")))?;
        save_bundle(&layer.probe_train, probe_dir.join(format!("layer_{i:02}_train.bundle")))?;
        save_bundle(&layer.probe_test, probe_dir.join(format!("layer_{i:02}_test.bundle")))?;
    }
    Ok(())
}
