use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use jndloc_core::config::StudyConfig;
use jndloc_core::critmap;
use jndloc_core::goldgen::{self, GoldSpec};
use jndloc_core::imaging::{BpgAdapter, CodecAdapter, CodecId, JpegAdapter, LadderCache, RasterImage};
use jndloc_core::protocol::{self, CandidateImage};
use jndloc_core::qc::{self, Aggregation, QcReport, ResponseLog};
use jndloc_core::simobserver::{self, GroundTruthScenario, ScenarioParams};
use jndloc_core::study::{self, ImageInfo, StudyDefinition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::inputs::{self, Selection, Selections};
use crate::{
    fail, AnalyzeArgs, Classify, Cli, Command, CompareArgs, ExportArgs, GoldCmd, Kind, LadderCmd, Outcome, QcCmd,
    ServeArgs, SimulateArgs, StudyCmd,
};

pub fn run(cli: &Cli) -> Outcome<()> {
    let out = &cli.global.out;
    match &cli.command {
        Command::Ladder(LadderCmd::Build { images, codec }) => ladder_build(cli, images, *codec),
        Command::Gold(GoldCmd::Synth {
            pilot,
            codec,
            selection,
            images,
        }) => gold_synth(cli, pilot, *codec, selection.as_deref(), images.as_deref()),
        Command::Study(StudyCmd::Init {
            candidates,
            gold,
            candidates_only,
        }) => study_init(cli, candidates, gold.as_deref(), *candidates_only),
        Command::Serve(args) => serve(cli, args),
        Command::Simulate(args) => simulate(cli, args),
        Command::Qc(QcCmd::Run { events, study }) => qc_run(cli, events, study.as_deref()),
        Command::Analyze(args) => analyze(cli, args),
        Command::Export(args) => export(cli, args),
        Command::Compare(args) => compare(args, out),
    }
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))
        .or_fail(Kind::Pipeline)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Outcome<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    qc::write_json(path, value).or_fail(Kind::Pipeline)
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn adapter(cfg: &StudyConfig, codec: CodecId) -> Outcome<Box<dyn CodecAdapter>> {
    if !cfg.codecs.contains(&codec) {
        return fail(Kind::Config, format!("codec {codec} is not in `codecs`"));
    }
    match codec {
        CodecId::Jpeg => Ok(Box::new(JpegAdapter)),
        CodecId::Bpg => match (&cfg.bpg_encoder, &cfg.bpg_decoder) {
            (Some(enc), Some(dec)) => Ok(Box::new(BpgAdapter::new(enc, dec))),
            _ => fail(Kind::Config, "bpg needs `bpg_encoder` and `bpg_decoder`"),
        },
    }
}

fn load_study(path: &Path) -> Outcome<StudyDefinition> {
    StudyDefinition::load(path).or_fail(Kind::Input)
}

#[derive(Serialize)]
struct LadderSummary {
    id: String,
    dir: String,
    width: u32,
    height: u32,
}

fn ladder_build(cli: &Cli, images: &Path, codec: CodecId) -> Outcome<()> {
    let cfg = cli.global.config(None)?;
    let adapter = adapter(&cfg, codec)?;
    adapter.check_available().or_fail(Kind::Config)?;
    let cache = LadderCache::new(cli.global.out.join("ladders"));
    let mut built = Vec::new();
    for (id, path) in inputs::image_files(images)? {
        let source = RasterImage::load(&path).or_fail(Kind::Input)?;
        let ladder = cache
            .get_or_build(&id, &source, codec, adapter.as_ref())
            .or_fail(Kind::Pipeline)?;
        built.push(LadderSummary {
            dir: cache.ladder_dir(&id, codec).display().to_string(),
            width: ladder.meta.width,
            height: ladder.meta.height,
            id,
        });
    }
    if built.is_empty() {
        return fail(Kind::Input, format!("no images in {}", images.display()));
    }
    print_json(&built);
    Ok(())
}

fn gold_synth(
    cli: &Cli,
    pilot: &Path,
    codec: CodecId,
    selection: Option<&Path>,
    images: Option<&Path>,
) -> Outcome<()> {
    let cfg = cli.global.config(None)?;
    let mut pilots: Vec<_> = inputs::read_pilot(pilot)?
        .into_iter()
        .filter(|p| p.codec == codec)
        .collect();
    if let Some(sel) = selection {
        let sel: Selections = inputs::read_json(sel)?;
        let keep: BTreeSet<&String> = sel.get(&codec).map(|s| s.gold.iter().collect()).unwrap_or_default();
        pilots.retain(|p| keep.contains(&p.id));
    }
    if pilots.is_empty() {
        return fail(Kind::Input, format!("no {codec} pilot images to synthesize from"));
    }
    let params = cfg.gold_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut specs = Vec::with_capacity(pilots.len());
    for p in &pilots {
        if p.pjnd_samples.is_empty() || p.clicks.is_empty() {
            return fail(Kind::Input, format!("{} needs pilot levels and clicks", p.id));
        }
        let map = critmap::aggregate_clicks_to_map(&p.click_set(), cfg.sigma_blur, p.width, p.height)
            .or_fail(Kind::Input)?;
        let seed = rng.random();
        let spec = goldgen::synthesize_gold_spec(&p.id, codec, &map, p.candidate().mean(), &params, seed, &mut rng)
            .map_err(|e| anyhow::anyhow!("{}: {e}", p.id))
            .or_fail(Kind::Pipeline)?;
        specs.push(spec);
    }
    let gold_dir = cli.global.out.join("gold");
    for spec in &specs {
        write_json(&gold_dir.join(format!("{}.json", spec.source_id)), spec)?;
    }
    if let Some(dir) = images {
        let adapter = adapter(&cfg, codec)?;
        let files: BTreeMap<String, std::path::PathBuf> = inputs::image_files(dir)?.into_iter().collect();
        let cache = LadderCache::new(cli.global.out.join("ladders"));
        for spec in &specs {
            let path = files
                .get(&spec.source_id)
                .ok_or_else(|| anyhow::anyhow!("no source image for {}", spec.source_id))
                .or_fail(Kind::Input)?;
            let source = RasterImage::load(path).or_fail(Kind::Input)?;
            let ladder = goldgen::build_gold_ladder(&source, adapter.as_ref(), spec).or_fail(Kind::Pipeline)?;
            cache.store(&ladder).or_fail(Kind::Pipeline)?;
        }
    }
    let summary: BTreeMap<&str, [u8; 2]> = specs.iter().map(|s| (s.source_id.as_str(), s.pjnd_range)).collect();
    print_json(&summary);
    Ok(())
}

/// Gold candidates (lowest variance per PJND bin) and evenly spaced study
/// images from the rest, per codec.
fn select(cfg: &StudyConfig, pool: &[inputs::PilotImage]) -> Outcome<Selections> {
    let mut out = Selections::new();
    for &codec in &cfg.codecs {
        let cands: Vec<CandidateImage> = pool.iter().filter(|p| p.codec == codec).map(|p| p.candidate()).collect();
        if cands.is_empty() {
            continue;
        }
        let gold = protocol::select_gold_candidates(&cands, cfg.gold_bins).or_fail(Kind::Input)?;
        let mut rest: Vec<&CandidateImage> = cands.iter().filter(|c| !gold.contains(&c.id)).collect();
        rest.sort_by(|a, b| a.mean().total_cmp(&b.mean()).then_with(|| a.id.cmp(&b.id)));
        let study = protocol::sample_study_images(rest.len(), cfg.study_images_per_codec)
            .or_fail(Kind::Input)?
            .into_iter()
            .map(|i| rest[i].id.clone())
            .collect();
        out.insert(codec, Selection { gold, study });
    }
    if out.is_empty() {
        return fail(Kind::Input, "no candidate matches a configured codec");
    }
    Ok(out)
}

fn study_init(cli: &Cli, candidates: &Path, gold_dir: Option<&Path>, candidates_only: bool) -> Outcome<()> {
    let cfg = cli.global.config(None)?;
    let pool = inputs::read_pilot(candidates)?;
    let selections = select(&cfg, &pool)?;
    let out = &cli.global.out;
    write_json(&out.join("candidates.json"), &selections)?;
    if candidates_only {
        print_json(&selections);
        return Ok(());
    }
    let Some(gold_dir) = gold_dir else {
        return fail(Kind::Input, "--gold is required unless --candidates-only is given");
    };
    let by_id: BTreeMap<&str, &inputs::PilotImage> = pool.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut specs = Vec::new();
    let mut study = Vec::new();
    for (codec, sel) in &selections {
        for id in &sel.gold {
            let spec: GoldSpec = inputs::read_json(&gold_dir.join(format!("{id}.json")))?;
            if spec.codec != *codec || spec.source_id != *id {
                return fail(Kind::Input, format!("gold spec for {id} does not match its candidate"));
            }
            specs.push(spec);
        }
        for id in &sel.study {
            let p = by_id[id.as_str()];
            study.push((
                id.clone(),
                ImageInfo {
                    codec: *codec,
                    width: p.width,
                    height: p.height,
                    gold: false,
                    ladder: format!("{id}-{codec}"),
                },
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let def = StudyDefinition::assemble(&cfg, specs, study, &mut rng).or_fail(Kind::Pipeline)?;
    create_dir(out)?;
    write_json(&out.join(jndloc_server::STUDY_FILE), &def)?;
    print_json(&serde_json::json!({
        "images": def.catalog.images.len(),
        "gold": def.catalog.gold_specs.len(),
        "hits": def.catalog.hits.len(),
    }));
    Ok(())
}

fn serve(cli: &Cli, args: &ServeArgs) -> Outcome<()> {
    let out = &cli.global.out;
    create_dir(out)?;
    let study_path = out.join(jndloc_server::STUDY_FILE);
    if !study_path.exists() {
        let Some(src) = &args.study else {
            return fail(Kind::Input, format!("{} missing; pass --study", study_path.display()));
        };
        std::fs::copy(src, &study_path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", src.display()))
            .or_fail(Kind::Input)?;
    }
    let cfg = jndloc_server::ServerConfig {
        data_dir: out.clone(),
        ladder_root: args.ladders.clone().unwrap_or_else(|| out.join("ladders")),
        admin_token: args.admin_token.clone(),
        snapshot_every: args.snapshot_every,
    };
    if cfg.admin_token.len() < 16 {
        return fail(Kind::Config, "admin token must be at least 16 characters");
    }
    let state = jndloc_server::AppState::open(&cfg).or_fail(Kind::Input)?;
    let rt = tokio::runtime::Runtime::new().or_fail(Kind::Pipeline)?;
    eprintln!("serving {} on http://{}", out.display(), args.addr);
    rt.block_on(jndloc_server::serve(state, args.addr)).or_fail(Kind::Pipeline)
}

#[derive(Serialize)]
struct SimulationSummary {
    events: usize,
    study_responses: usize,
    observers: usize,
    spammers: usize,
    spammer_catch_rate: f64,
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome<()> {
    let cfg = cli.global.config(None)?;
    let defaults = ScenarioParams::default();
    // Planted region geometry scales with the image side.
    let scale = a.size as f64 / defaults.width as f64;
    let params = ScenarioParams {
        region_sigma: defaults.region_sigma * scale,
        region_min_distance: defaults.region_min_distance * scale,
        region_margin: defaults.region_margin * scale,
        pool_size: a.pool,
        study_images: a.images,
        width: a.size,
        height: a.size,
        codec: a.codec,
        observers: a.observers,
        spammers: a.spammers,
        lapsing_spammers: a.lapsing,
        click_jitter_std: a.click_jitter,
        seed: a.scenario_seed,
        ..defaults
    };
    let scenario = GroundTruthScenario::synthetic(&params).or_fail(Kind::Config)?;
    let result = simobserver::run_simulated_study(&scenario, &cfg).or_fail(Kind::Pipeline)?;
    let out = &cli.global.out;
    create_dir(out)?;
    write_json(&out.join(jndloc_server::STUDY_FILE), &result.definition)?;
    let events_path = out.join(jndloc_server::EVENTS_FILE);
    study::write_events(&events_path, &result.events)
        .map_err(|e| anyhow::anyhow!("{}: {e}", events_path.display()))
        .or_fail(Kind::Pipeline)?;
    write_json(&out.join("scenario.json"), &scenario)?;
    write_json(&out.join("outcomes.json"), &result.outcomes)?;
    let truth: BTreeMap<&str, f64> = scenario
        .study
        .iter()
        .map(|id| (id.as_str(), scenario.images[id].true_pjnd))
        .collect();
    write_json(&out.join("truth.json"), &truth)?;
    let log = ResponseLog::from_events(&result.events);
    print_json(&SimulationSummary {
        events: result.events.len(),
        study_responses: log.len(),
        observers: result.outcomes.len(),
        spammers: result.outcomes.iter().filter(|o| o.spammer).count(),
        spammer_catch_rate: result.spammer_catch_rate(),
    });
    Ok(())
}

fn qc_run(cli: &Cli, events: &Path, study_path: Option<&Path>) -> Outcome<()> {
    let def = study_path.map(load_study).transpose()?;
    let cfg = cli.global.config(def.as_ref().map(|d| &d.config))?;
    if !events.is_file() {
        return fail(Kind::Input, format!("{}: no such event log", events.display()));
    }
    let events = study::read_events(events).or_fail(Kind::Input)?;
    let mut log = ResponseLog::from_events(&events);
    let report = qc::run_pipeline(&mut log, &cfg.qc()).or_fail(Kind::Pipeline)?;
    let dir = cli.global.out.join("qc");
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("responses.json"), &log)?;
    print_json(&report);
    Ok(())
}

fn study_ids(def: &StudyDefinition) -> Vec<String> {
    def.catalog
        .images
        .iter()
        .filter(|(_, i)| !i.gold)
        .map(|(id, _)| id.clone())
        .collect()
}

#[derive(Serialize)]
struct CodecSummary {
    images: usize,
    responses: usize,
    mean_of_means: f64,
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Outcome<()> {
    let def = load_study(&a.study)?;
    let log: ResponseLog = inputs::read_json(&a.responses)?;
    let agg = qc::aggregate(&log, &study_ids(&def));
    let mut summary: BTreeMap<String, CodecSummary> = BTreeMap::new();
    for codec in &def.config.codecs {
        let anns: Vec<&qc::ImageAnnotation> = agg.annotations.iter().filter(|x| x.codec == *codec).collect();
        if anns.is_empty() {
            continue;
        }
        let means: Vec<f64> = anns.iter().map(|x| x.mean_pjnd).collect();
        summary.insert(
            codec.to_string(),
            CodecSummary {
                images: anns.len(),
                responses: anns.iter().map(|x| x.pjnd_samples.len()).sum(),
                mean_of_means: qc::mean(&means),
            },
        );
    }
    let dir = cli.global.out.join("analysis");
    write_json(&dir.join("aggregation.json"), &agg)?;
    write_json(&dir.join("summary.json"), &summary)?;
    print_json(&serde_json::json!({ "per_codec": summary, "flagged": agg.flagged }));
    Ok(())
}

fn export(cli: &Cli, a: &ExportArgs) -> Outcome<()> {
    let def = load_study(&a.study)?;
    let cfg = cli.global.config(Some(&def.config))?;
    let agg: Aggregation = inputs::read_json(&a.aggregation)?;
    let report: Option<QcReport> = a.qc_report.as_deref().map(inputs::read_json).transpose()?;
    let dims: BTreeMap<String, (u32, u32)> = def
        .catalog
        .images
        .iter()
        .map(|(id, i)| (id.clone(), (i.width, i.height)))
        .collect();
    let manifest =
        qc::export_dataset(&agg, &dims, cfg.sigma_blur, report.as_ref(), &cli.global.out).or_fail(Kind::Pipeline)?;
    print_json(&manifest);
    Ok(())
}

fn compare(a: &CompareArgs, out: &Path) -> Outcome<()> {
    let ours = qc::load_annotations(&a.dataset).or_fail(Kind::Input)?;
    let reference = qc::load_reference(&a.reference).or_fail(Kind::Input)?;
    let report = qc::compare_datasets(&ours, &reference, a.codec).or_fail(Kind::Pipeline)?;
    create_dir(out)?;
    qc::write_comparison(&report, out).or_fail(Kind::Pipeline)?;
    print_json(&serde_json::json!({
        "codec": report.codec,
        "n": report.n,
        "srocc": report.srocc,
        "slope": report.slope,
        "intercept": report.intercept,
        "bias": report.bias,
    }));
    Ok(())
}
