use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bubblelab::attacks::{robust_accuracy, AttackConfig, RobustTable};
use bubblelab::channel::{
    channel_roundtrip, denoiser_pairs, layout_page, print_scan_page, ChannelConfig, PAGE_CAPACITY,
};
use bubblelab::data::{decode_dataset, encode_dataset, BubbleImage, DatasetSpec, Label, Provenance};
use bubblelab::diagnostics::{
    format_reports, masking_report, precision_sweep, saturated_cnn, MaskingFinding, SaturationConfig,
    ZeroGradReport,
};
use bubblelab::impact::{
    chained_outcome, closed_form_outcome, min_success_to_flip, monte_carlo_outcome, race_table_report,
    FlipThreshold, MonteCarloOutcome, Outcome, RaceReport,
};
use bubblelab::models::{
    AnyClassifier, Architecture, Checkpoint, CheckpointMeta, Classifier, Denoiser, LinearSvm, SimpleCnn,
};
use bubblelab::seed::derive_seed;
use bubblelab::training::{evaluate, train_classifier, train_denoiser, train_svm, Evaluation, TrainConfig, TrainReport};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::{read_bytes, stage, ExperimentConfig, Failure, ModelKind, Resolved};
use crate::GlobalArgs;

/// Repeat-request rate stated for the worked race, kept for comparison.
const STATED_REPEAT_FRACTION: f64 = 0.0013;

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Print the planned counts without generating anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset file; defaults to `<out>/dataset.bbl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Classifier checkpoint; defaults to `<out>/model.bbm`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Samples to attack; fresh bubbles when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Classifier checkpoint; defaults to `<out>/model.bbm`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Samples to probe; fresh bubbles when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Probe a CNN whose head is refit to saturate the softmax instead of
    /// loading a checkpoint.
    #[arg(long, conflicts_with = "model")]
    pub saturated: bool,
}

#[derive(Args, Debug)]
pub struct ChannelArgs {
    /// Classifier checkpoint; when absent an SVM is trained on the
    /// channel section's classifier data.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Clean bubbles to send through the channel; fresh ones when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ImpactArgs {
    /// Race table CSV; overrides the config's `impact.races_csv`.
    #[arg(long)]
    pub races: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {}

fn load_dataset(path: &Path) -> Result<Vec<BubbleImage>> {
    let bytes = read_bytes(path)?;
    decode_dataset(&bytes)
        .with_context(|| format!("decoding {}", path.display()))
        .context(Failure::Data)
}

fn load_classifier(path: &Path) -> Result<AnyClassifier> {
    let bytes = read_bytes(path)?;
    Checkpoint::from_bytes(&bytes)
        .and_then(Checkpoint::into_classifier)
        .with_context(|| format!("loading classifier {}", path.display()))
        .context(Failure::Data)
}

fn fresh_bubbles(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<BubbleImage>> {
    Ok(DatasetSpec {
        bubbles: n,
        swatches: 0,
        ..config.data.dataset.clone()
    }
    .generate(seed)?)
}

/// Samples from `--data`, else fresh evaluation bubbles.
fn samples(run: &Resolved, data: Option<&PathBuf>) -> Result<(Vec<BubbleImage>, String)> {
    match data {
        Some(p) => Ok((load_dataset(p)?, file_tag(p))),
        None => Ok((
            fresh_bubbles(
                &run.config,
                run.config.data.eval_bubbles,
                derive_seed(run.seed(), &[stage::EVAL]),
            )?,
            "fresh-bubbles".into(),
        )),
    }
}

fn file_tag(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn model_path(run: &Resolved, given: Option<&PathBuf>) -> PathBuf {
    given.cloned().unwrap_or_else(|| run.path("model.bbm"))
}

#[derive(Serialize)]
struct GroupStats {
    provenance: &'static str,
    label: &'static str,
    count: usize,
    mean_ink_mass: f64,
    min_ink_mass: f64,
    max_ink_mass: f64,
}

fn group_stats(images: &[BubbleImage]) -> Vec<GroupStats> {
    let mut out = Vec::new();
    for prov in [Provenance::Bubble, Provenance::Swatch, Provenance::PostChannel] {
        for label in [Label::Mark, Label::NonMark] {
            let masses: Vec<f64> = images
                .iter()
                .filter(|i| i.provenance == prov && i.label == label)
                .map(BubbleImage::ink_mass)
                .collect();
            if masses.is_empty() {
                continue;
            }
            out.push(GroupStats {
                provenance: prov.name(),
                label: label.name(),
                count: masses.len(),
                mean_ink_mass: masses.iter().sum::<f64>() / masses.len() as f64,
                min_ink_mass: masses.iter().copied().fold(f64::INFINITY, f64::min),
                max_ink_mass: masses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    out
}

pub fn gen_data(global: &GlobalArgs, args: &GenDataArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let spec = &run.config.data.dataset;
    println!(
        "planned: {} bubbles ({} filled, {} empty) + {} swatches = {} images",
        spec.bubbles,
        spec.bubbles.div_ceil(2),
        spec.bubbles / 2,
        spec.swatches,
        spec.bubbles + spec.swatches
    );
    if args.dry_run {
        return Ok(());
    }
    let images = spec.generate(derive_seed(run.seed(), &[stage::DATA]))?;
    let mut art = Artifacts::new(&run, "gen-data")?;
    art.binary("dataset.bbl", &encode_dataset(&images)?)?;
    let stats = group_stats(&images);
    let mut md = String::from("| Source | Label | Count | Mean ink | Min ink | Max ink |\n|---|---|---:|---:|---:|---:|\n");
    for s in &stats {
        md += &format!(
            "| {} | {} | {} | {:.1} | {:.1} | {:.1} |\n",
            s.provenance, s.label, s.count, s.mean_ink_mass, s.min_ink_mass, s.max_ink_mass
        );
    }
    art.markdown("gen-data.md", &md)?;
    art.summary(&stats)?;
    art.log(&format!("{} images", images.len()))?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    architecture: &'static str,
    examples: usize,
    final_metrics: Option<bubblelab::training::EpochMetrics>,
    eval: Evaluation,
}

fn train_model(kind: ModelKind, data: &[BubbleImage], recipe: &TrainConfig) -> Result<(AnyClassifier, TrainReport)> {
    match kind {
        ModelKind::Svm => {
            let mut m = LinearSvm::new();
            let r = train_svm(&mut m, data, recipe).context(Failure::Data)?;
            Ok((AnyClassifier::Svm(m), r))
        }
        ModelKind::SimpleCnn => {
            let mut m = SimpleCnn::init(&mut ChaCha8Rng::seed_from_u64(derive_seed(recipe.seed, &[1])));
            let r = train_classifier(&mut m, data, recipe).context(Failure::Data)?;
            Ok((AnyClassifier::Cnn(m), r))
        }
    }
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let path = args.data.clone().unwrap_or_else(|| run.path("dataset.bbl"));
    let data = load_dataset(&path)?;
    let recipe = run.config.train_recipe();
    let (model, report) = train_model(run.config.model.architecture, &data, &recipe)?;
    let (eval_set, _) = samples(&run, None)?;
    let eval = evaluate(&model, &eval_set, None, recipe.precision)?;

    let mut art = Artifacts::new(&run, "train")?;
    let ckpt = Checkpoint::new(
        model.architecture(),
        model.params(),
        CheckpointMeta {
            dataset_tag: file_tag(&path),
            seed: run.seed(),
            epoch: recipe.epochs as u32,
        },
    );
    art.binary("model.bbm", &ckpt.to_bytes()?)?;
    art.csv("train.csv", &report.to_csv())?;
    let last = report.metrics.last().cloned();
    let cell = |v: Option<f64>| match v {
        Some(v) if v.is_finite() => format!("{v:.4}"),
        _ => "-".into(),
    };
    let md = format!(
        "| Model | Dataset | Train acc | Val acc | Fresh-bubble acc |\n|---|---|---:|---:|---:|\n| {} | {} | {} | {} | {:.4} |\n",
        model.architecture().tag(),
        file_tag(&path),
        cell(last.as_ref().map(|m| m.train_acc)),
        cell(last.as_ref().map(|m| m.val_acc)),
        eval.accuracy
    );
    art.markdown("train.md", &md)?;
    art.summary(&TrainSummary {
        architecture: model.architecture().tag(),
        examples: data.len(),
        final_metrics: last,
        eval,
    })?;
    art.log(&format!("trained {}", model.architecture().tag()))?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    tables: Vec<RobustTable>,
    masking: Vec<MaskingFinding>,
}

fn robust_markdown(tables: &[RobustTable]) -> String {
    let Some(first) = tables.first() else {
        return String::new();
    };
    let mut eps: Vec<f64> = Vec::new();
    for r in &first.rows {
        if !eps.contains(&r.epsilon) {
            eps.push(r.epsilon);
        }
    }
    let mut md = String::from("| Model | Dataset | Loss | Direction |");
    for e in &eps {
        md += &format!(" {}/255 |", (e * 255.0).round());
    }
    md += "\n|---|---|---|---|";
    md += &"---:|".repeat(eps.len());
    md.push('\n');
    for t in tables {
        for dir in [bubblelab::attacks::Direction::Over, bubblelab::attacks::Direction::Under] {
            let rows: Vec<_> = t.rows.iter().filter(|r| r.direction == dir).collect();
            if rows.is_empty() {
                continue;
            }
            md += &format!("| {} | {} | {} | {} |", t.model, t.dataset, t.loss, dir.name());
            for r in rows {
                md += &format!(" {:.3} |", r.robust_acc);
            }
            md.push('\n');
        }
    }
    md
}

pub fn attack(global: &GlobalArgs, args: &AttackArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let model = load_classifier(&model_path(&run, args.model.as_ref()))?;
    let (data, tag) = samples(&run, args.data.as_ref())?;
    let section = &run.config.attack;
    let eps: Vec<f64> = section.epsilons_255.iter().map(|&e| f64::from(e) / 255.0).collect();
    let mut tables = Vec::new();
    for &loss in &section.losses {
        let cfg = AttackConfig {
            loss,
            ..section.settings.clone()
        };
        tables.push(robust_accuracy(&model, &data, &cfg, &eps, &tag).context(Failure::Data)?);
    }
    let mut masking = Vec::new();
    if eps.len() >= 3 && eps.contains(&1.0) {
        for t in &tables {
            masking.extend(masking_report(t)?);
        }
    }

    let art = Artifacts::new(&run, "attack")?;
    let mut csv = String::new();
    for (i, t) in tables.iter().enumerate() {
        let body = t.to_csv();
        let skip = usize::from(i > 0);
        for line in body.lines().skip(skip) {
            csv += line;
            csv.push('\n');
        }
    }
    art.csv("attack.csv", &csv)?;
    let mut md = robust_markdown(&tables);
    if !masking.is_empty() {
        md += "\n| Model | Loss | Direction | Verdict |\n|---|---|---|---|\n";
        for f in &masking {
            md += &format!("| {} | {} | {} | {} |\n", f.model, f.loss, f.direction.name(), f.verdict());
        }
    }
    art.markdown("attack.md", &md)?;
    art.summary(&AttackSummary { tables, masking })?;
    art.log("attack finished")?;
    print!("{md}");
    Ok(())
}

pub fn diagnose(global: &GlobalArgs, args: &DiagnoseArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let model = if args.saturated {
        let cfg = SaturationConfig {
            seed: derive_seed(run.seed(), &[stage::DIAGNOSE, 1]),
            ..SaturationConfig::default()
        };
        AnyClassifier::Cnn(saturated_cnn(&cfg)?.0)
    } else {
        load_classifier(&model_path(&run, args.model.as_ref()))?
    };
    let (data, _) = samples(&run, args.data.as_ref())?;
    let modes = run.config.modes()?;
    let reports: Vec<ZeroGradReport> =
        precision_sweep(&model, &data, &run.config.diagnose.settings, &modes).context(Failure::Data)?;

    let mut md = String::from(
        "| Model | Precision | Class | Samples | Zero grad at step 1 | Mean zero steps | Confidence (step 1) |\n|---|---|---|---:|---:|---:|---|\n",
    );
    for r in &reports {
        for c in &r.classes {
            md += &format!(
                "| {} | {} | {} | {} | {} | {:.2} | [{:.4}, {:.4}] |\n",
                r.model,
                r.precision,
                c.label.name(),
                c.samples,
                c.first_step_zero,
                c.mean_zero_steps,
                c.mean_confidence_first[0],
                c.mean_confidence_first[1]
            );
        }
    }
    let art = Artifacts::new(&run, "diagnose")?;
    art.markdown("diagnose.md", &md)?;
    art.summary(&reports)?;
    art.log("diagnose finished")?;
    print!("{}", format_reports(&reports));
    Ok(())
}

#[derive(Serialize)]
struct ChannelSummary {
    classifier: String,
    test_bubbles: usize,
    identity_lossless: bool,
    clean: Evaluation,
    post_channel: Evaluation,
    denoised: Option<Evaluation>,
    clean_denoised: Option<Evaluation>,
    denoiser_final_loss: Option<f64>,
}

pub fn channel(global: &GlobalArgs, args: &ChannelArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let section = &run.config.channel;
    let seed = |k: u64| derive_seed(run.seed(), &[stage::CHANNEL, k]);
    let mode = run.config.attack.settings.precision;

    let (model, classifier) = match &args.model {
        Some(p) => (load_classifier(p)?, file_tag(p)),
        None => {
            let data = section.classifier_data.generate(seed(2))?;
            let recipe = TrainConfig {
                seed: seed(6),
                ..TrainConfig::svm()
            };
            let mut svm = LinearSvm::new();
            train_svm(&mut svm, &data, &recipe)?;
            (AnyClassifier::Svm(svm), "svm-swatch-heavy".to_string())
        }
    };
    let test = match &args.data {
        Some(p) => load_dataset(p)?,
        None => fresh_bubbles(&run.config, section.test_bubbles, seed(3))?,
    };
    let post = channel_roundtrip(&test, &section.settings).context(Failure::Data)?;
    let head = &test[..test.len().min(PAGE_CAPACITY)];
    let identity = channel_roundtrip(head, &ChannelConfig::identity())?;
    let identity_lossless = identity
        .iter()
        .zip(head)
        .all(|(a, b)| a.to_levels() == b.to_levels());

    let clean = evaluate(&model, &test, None, mode)?;
    let post_channel = evaluate(&model, &post, None, mode)?;

    let mut art = Artifacts::new(&run, "channel")?;
    art.binary("post-channel.bbl", &encode_dataset(&post)?)?;
    if !head.is_empty() {
        let page = print_scan_page(&layout_page(head)?, &section.settings, 0)?;
        art.binary("scan-page-0.pgm", &page.to_pgm())?;
    }

    let (mut denoised, mut clean_denoised, mut final_loss) = (None, None, None);
    if section.denoiser_bubbles > 0 {
        let clean_pairs = fresh_bubbles(&run.config, section.denoiser_bubbles, seed(4))?;
        let pair_channel = ChannelConfig {
            seed: derive_seed(section.settings.seed, &[1]),
            ..section.settings.clone()
        };
        let pairs = denoiser_pairs(&clean_pairs, &pair_channel)?;
        let mut den = Denoiser::init(&mut ChaCha8Rng::seed_from_u64(seed(5)));
        let report = train_denoiser(&mut den, &pairs, &section.denoiser_train)?;
        final_loss = report.metrics.last().map(|m| m.loss);
        denoised = Some(evaluate(&model, &post, Some(&den), mode)?);
        clean_denoised = Some(evaluate(&model, &test, Some(&den), mode)?);
        let ckpt = Checkpoint::new(
            Architecture::Denoiser,
            den.params(),
            CheckpointMeta {
                dataset_tag: "channel-pairs".into(),
                seed: run.seed(),
                epoch: section.denoiser_train.epochs as u32,
            },
        );
        art.binary("denoiser.bbm", &ckpt.to_bytes()?)?;
    }

    let acc = |e: &Option<Evaluation>| e.as_ref().map_or("-".into(), |e| format!("{:.3}", e.accuracy));
    let md = format!(
        "| Classifier | Clean | Post-channel | Post-channel + denoiser | Clean + denoiser |\n|---|---:|---:|---:|---:|\n| {} | {:.3} | {:.3} | {} | {} |\n\nIdentity channel lossless: {}\n",
        classifier,
        clean.accuracy,
        post_channel.accuracy,
        acc(&denoised),
        acc(&clean_denoised),
        if identity_lossless { "yes" } else { "no" }
    );
    art.markdown("channel.md", &md)?;
    art.summary(&ChannelSummary {
        classifier,
        test_bubbles: test.len(),
        identity_lossless,
        clean,
        post_channel,
        denoised,
        clean_denoised,
        denoiser_final_loss: final_loss,
    })?;
    art.log("channel finished")?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct ImpactSummary {
    closed_form: Outcome,
    chained: Outcome,
    monte_carlo: MonteCarloOutcome,
    stated_repeat_request_fraction: f64,
    min_success_to_flip: FlipThreshold,
    races: Option<RaceReport>,
}

pub fn impact(global: &GlobalArgs, args: &ImpactArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let section = &run.config.impact;
    let p = &section.race;
    let closed = closed_form_outcome(p)?;
    let chained = chained_outcome(p).context(Failure::Config)?;
    let mc = monte_carlo_outcome(p, section.ballots, derive_seed(run.seed(), &[stage::IMPACT]))
        .context(Failure::Config)?;
    let flip = min_success_to_flip(p).context(Failure::Config)?;
    let races = match args.races.as_ref().or(section.races_csv.as_ref()) {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("missing input {}", path.display()))
                .context(Failure::Data)?;
            Some(
                race_table_report(file, &section.races_label, p)
                    .with_context(|| format!("reading {}", path.display()))
                    .context(Failure::Data)?,
            )
        }
        None => None,
    };

    let flip_text = match flip {
        FlipThreshold::Feasible(s) => format!("{s:.6}"),
        FlipThreshold::Infeasible => "infeasible".into(),
    };
    let mut md = format!(
        "| Quantity | Lose | Win |\n|---|---:|---:|\n\
         | Closed form | {:.5} | {:.5} |\n\
         | Chained replacements | {:.5} | {:.5} |\n\
         | Monte Carlo (N = {}) | {:.5} [{:.5}, {:.5}] | {:.5} [{:.5}, {:.5}] |\n\n\
         Repeat requests: {:.4}% simulated, {:.2}% stated (unreconciled).\n\n\
         Minimum success to lead by {}: {}\n",
        closed.lose_final,
        closed.win_final,
        chained.lose_final,
        chained.win_final,
        mc.ballots,
        mc.lose_final.estimate,
        mc.lose_final.ci_low,
        mc.lose_final.ci_high,
        mc.win_final.estimate,
        mc.win_final.ci_low,
        mc.win_final.ci_high,
        100.0 * mc.repeat_request_fraction.estimate,
        100.0 * STATED_REPEAT_FRACTION,
        p.target_margin,
        flip_text
    );
    if let Some(r) = &races {
        md.push('\n');
        md += &r.to_markdown();
    }
    let art = Artifacts::new(&run, "impact")?;
    art.markdown("impact.md", &md)?;
    art.summary(&ImpactSummary {
        closed_form: closed,
        chained,
        monte_carlo: mc,
        stated_repeat_request_fraction: STATED_REPEAT_FRACTION,
        min_success_to_flip: flip,
        races,
    })?;
    art.log("impact finished")?;
    print!("{md}");
    Ok(())
}

const REPORT_ORDER: [(&str, &str); 6] = [
    ("gen-data.md", "Dataset"),
    ("train.md", "Training"),
    ("attack.md", "Robust accuracy"),
    ("diagnose.md", "Zero-gradient probe"),
    ("channel.md", "Print-scan channel"),
    ("impact.md", "Election impact"),
];

pub fn report(global: &GlobalArgs, _args: &ReportArgs) -> Result<()> {
    let run = Resolved::load(global)?;
    let mut doc = String::from("# Run report\n");
    let mut found = 0;
    for (file, title) in REPORT_ORDER {
        let path = run.path(file);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).context(Failure::Data)?;
        doc += &format!("\n## {title}\n\n{text}");
        found += 1;
    }
    if found == 0 {
        return Err(anyhow::anyhow!("no run artifacts in {}", run.out.display()).context(Failure::Data));
    }
    let art = Artifacts::new(&run, "report")?;
    art.markdown("report.md", &doc)?;
    art.log(&format!("merged {found} sections"))?;
    print!("{doc}");
    Ok(())
}
