use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array4, Axis};
use tubekit::anchors::{
    assign_anchor_labels, assign_proposal_labels, generate_anchor_grid, propose_from_maps, AnchorLabel, ProposalLabel,
};
use tubekit::config::{RunConfig, CONFIG_ENV};
use tubekit::evaluation::{
    average_precision, box_recall_count, corloc, ground_truth_boxes, mean_ap, tube_recall_count, tubes_to_detections,
    Detection, MetricReport, RecallCount,
};
use tubekit::geometry::{fit_linear_tube, tube_overlap, Chunk, Track, Tube};
use tubekit::io::{
    read_fvol, read_records, write_fvol, write_records, BatchRecord, LabelKind, LabelRecord, PointTrackRecord,
    RecordKind, SeedRecord, TubeRecord,
};
use tubekit::motion::tube_proposals_from_tracks;
use tubekit::pooling::{toi_pool_batch, FeatureVolume, TemporalMode};
use tubekit::sampling::{
    compose_hard_batch, mine_hard_negatives, sample_batch, Batch, BatchConfig, ChunkPool, ItemRef, LabeledPool,
};
use tubekit::suppression::{nms_boxes, nms_tubes, ScoredBox};
use tubekit::synth::{generate_scene, SceneConfig};

#[derive(Parser)]
#[command(name = "tubekit", version, about = "Tube proposals, pooling, sampling and evaluation over video chunks")]
struct Cli {
    /// Run configuration (TOML). Falls back to the file named by TUBEKIT_CONFIG, then built-in defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: tracks, point tracks, seed boxes, GT tubes and features.
    Synth(SynthArgs),
    /// Fit linear tubes to annotated tracks, one per chunk.
    FitTubes(FitArgs),
    /// Build tube proposals from seed boxes and point tracks.
    TrackProposals(TrackProposalArgs),
    /// Emit the anchor tubes of an H x W feature grid.
    Anchors(AnchorArgs),
    /// Decode score and regression maps into proposals.
    Propose(ProposeArgs),
    /// Non-maximum suppression over tubes or per-frame detections.
    Nms(NmsArgs),
    /// Label anchors or proposals against ground-truth tubes.
    Assign(AssignArgs),
    /// Pool every tube out of a feature volume.
    Pool(PoolArgs),
    /// Write batch manifests from labeled items.
    Sample(SampleArgs),
    /// Select the highest-scoring proposals that miss every ground truth.
    MineHard(MineArgs),
    /// Tube recall, plus box recall when tracks are given.
    EvalRecall(RecallArgs),
    /// Per-class average precision of detections.
    EvalAp(DetectionEvalArgs),
    /// Per-class correct localization of detections.
    EvalCorloc(DetectionEvalArgs),
    /// Merge metric reports and print them as a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Track endpoint jitter radius in pixels.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    objects: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// Chunk length; defaults to the configured tube length.
    #[arg(long)]
    length: Option<usize>,
    /// First frame of the first chunk.
    #[arg(long, default_value_t = 0)]
    t0: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackProposalArgs {
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long)]
    point_tracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// Use the five-ratio anchor set.
    #[arg(long)]
    diverse: bool,
    #[arg(long, default_value = "anchors")]
    video: String,
    #[arg(long, default_value_t = 0)]
    t0: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProposeArgs {
    /// FVOL score map with dims (1, H, W, K).
    #[arg(long)]
    scores: PathBuf,
    /// FVOL regression map with dims (H, W, K, 8).
    #[arg(long)]
    regression: PathBuf,
    #[arg(long)]
    diverse: bool,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value = "video")]
    video: String,
    #[arg(long, default_value_t = 0)]
    t0: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NmsMode {
    Tube,
    Box,
}

#[derive(Args)]
struct NmsArgs {
    /// Scored tube records (tube mode) or detection records (box mode).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = NmsMode::Tube)]
    mode: NmsMode,
    /// Defaults to the configured proposal (tube) or detection (box) threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignMode {
    Anchor,
    Proposal,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth tube records carrying classes.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = AssignMode::Proposal)]
    mode: AssignMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolMode {
    Max,
    Avg,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    tubes: PathBuf,
    /// Pooled side; defaults to the configured size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<PoolMode>,
    /// Output FVOL with dims (tubes, C, size, size).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Classifier,
    ProposalNetwork,
    Hard,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    labels: PathBuf,
    /// Hard-negative labels from `mine-hard`; required by the hard preset.
    #[arg(long)]
    hard: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Classifier)]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Defaults to twice the hard-negative slots of a hard batch.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecallArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Annotated tracks for box recall.
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectionEvalArgs {
    /// Detection records, or scored tube records with --from-tubes.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    from_tubes: bool,
    /// Annotated tracks.
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Synth(a) => synth(&config, a),
        Command::FitTubes(a) => fit_tubes(&config, a),
        Command::TrackProposals(a) => track_proposals(&config, a),
        Command::Anchors(a) => anchors(&config, a),
        Command::Propose(a) => propose(&config, a),
        Command::Nms(a) => nms(&config, a),
        Command::Assign(a) => assign(&config, a),
        Command::Pool(a) => pool(&config, a),
        Command::Sample(a) => sample(&config, a),
        Command::MineHard(a) => mine_hard(&config, a),
        Command::EvalRecall(a) => eval_recall(&config, a),
        Command::EvalAp(a) => eval_detections(&config, a, false),
        Command::EvalCorloc(a) => eval_detections(&config, a, true),
        Command::Report(a) => report(a),
    }
}

type ChunkKey = (String, u32);

/// Groups tube records by `(video, t0)`, keeping file order within a group.
fn by_chunk(records: Vec<TubeRecord>) -> BTreeMap<ChunkKey, Vec<TubeRecord>> {
    let mut groups: BTreeMap<ChunkKey, Vec<TubeRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.video.clone(), r.tube.t0())).or_default().push(r);
    }
    groups
}

fn emit_reports(out: Option<&Path>, reports: &[MetricReport]) -> Result<()> {
    match out {
        Some(p) => write_records(p, RecordKind::Reports, reports)?,
        None => print!("{}", tubekit::io::records_to_string(RecordKind::Reports, reports)?),
    }
    Ok(())
}

fn synth(config: &RunConfig, a: SynthArgs) -> Result<()> {
    let scene_cfg = SceneConfig {
        seed: config.seed,
        track_noise: a.noise.unwrap_or(config.synth.track_noise),
        objects: a.objects.unwrap_or(config.synth.objects),
        ..config.synth.clone()
    };
    let scene = generate_scene(&scene_cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let len = scene_cfg.chunk_len;
    let gt: Vec<TubeRecord> = scene
        .objects
        .iter()
        .map(|o| TubeRecord { class: Some(o.class), ..TubeRecord::new(&scene.video, o.tube) })
        .collect();
    let points: Vec<PointTrackRecord> = scene
        .point_tracks
        .iter()
        .map(|&track| PointTrackRecord { video: scene.video.clone(), t0: 0, len, track })
        .collect();
    let seeds: Vec<SeedRecord> = scene
        .seed_boxes
        .iter()
        .map(|&bbox| SeedRecord { video: scene.video.clone(), frame: 0, bbox, score: None })
        .collect();
    write_records(&a.out.join("tracks.jsonl"), RecordKind::Tracks, &scene.tracks)?;
    write_records(&a.out.join("gt_tubes.jsonl"), RecordKind::Tubes, &gt)?;
    write_records(&a.out.join("point_tracks.jsonl"), RecordKind::PointTracks, &points)?;
    write_records(&a.out.join("seeds.jsonl"), RecordKind::Seeds, &seeds)?;
    let features = FeatureVolume::new(scene.volume.data().mapv(|v| v as f32), scene.volume.stride())?;
    write_fvol(&a.out.join("features.fvol"), &features)?;
    for i in scene.clamped() {
        eprintln!("note: object {i} had its velocity adjusted to stay in frame");
    }
    Ok(())
}

fn fit_tubes(config: &RunConfig, a: FitArgs) -> Result<()> {
    let len = a.length.unwrap_or(config.tube_length);
    ensure!(len >= 1, "chunk length must be >= 1");
    let tracks: Vec<Track> = read_records(&a.tracks, RecordKind::Tracks)?;
    let mut out = Vec::new();
    for (i, track) in tracks.iter().enumerate() {
        let (Some(first), Some(last)) = (track.first_frame(), track.last_frame()) else { continue };
        let first_chunk = first.saturating_sub(a.t0) / len as u32;
        let last_chunk = last.saturating_sub(a.t0) / len as u32;
        for k in first_chunk..=last_chunk {
            let chunk = Chunk { t0: a.t0 + k * len as u32, len };
            match fit_linear_tube(track.entries(), chunk) {
                Ok(fit) => out.push(TubeRecord {
                    class: Some(track.class),
                    coverage: Some(fit.coverage),
                    ..TubeRecord::new(&track.video, fit.tube)
                }),
                Err(e) => eprintln!("track {i}, chunk at {}: skipped ({e})", chunk.t0),
            }
        }
    }
    write_records(&a.out, RecordKind::Tubes, &out)?;
    Ok(())
}

fn track_proposals(config: &RunConfig, a: TrackProposalArgs) -> Result<()> {
    let seeds: Vec<SeedRecord> = read_records(&a.seeds, RecordKind::Seeds)?;
    let points: Vec<PointTrackRecord> = read_records(&a.point_tracks, RecordKind::PointTracks)?;
    let mut chunks: BTreeMap<ChunkKey, (usize, Vec<_>)> = BTreeMap::new();
    for p in points {
        let e = chunks.entry((p.video, p.t0)).or_insert((p.len, Vec::new()));
        ensure!(e.0 == p.len, "point tracks of chunk {} disagree on length", p.t0);
        e.1.push(p.track);
    }
    let mut seeds_by_chunk: BTreeMap<ChunkKey, Vec<_>> = BTreeMap::new();
    for s in seeds {
        seeds_by_chunk.entry((s.video, s.frame)).or_default().push(s.bbox);
    }
    let frame = (config.frame.width, config.frame.height);
    let mut out = Vec::new();
    for (key, boxes) in &seeds_by_chunk {
        let Some((len, tracks)) = chunks.get(key) else {
            eprintln!("{} frame {}: no point tracks start here, seeds skipped", key.0, key.1);
            continue;
        };
        for p in tube_proposals_from_tracks(boxes, tracks, key.1, *len, frame, &config.motion, config.seed)? {
            out.extend(p.tubes.into_iter().map(|t| TubeRecord::new(&key.0, t)));
        }
    }
    write_records(&a.out, RecordKind::Tubes, &out)?;
    Ok(())
}

fn anchor_config(config: &RunConfig, diverse: bool) -> tubekit::AnchorConfig {
    if diverse {
        config.diverse_anchors()
    } else {
        config.anchors.clone()
    }
}

fn anchors(config: &RunConfig, a: AnchorArgs) -> Result<()> {
    let grid = generate_anchor_grid(a.height, a.width, &anchor_config(config, a.diverse), a.t0, config.tube_length)?;
    let out: Vec<TubeRecord> = grid.anchors.iter().map(|&t| TubeRecord::new(&a.video, t)).collect();
    write_records(&a.out, RecordKind::Tubes, &out)?;
    Ok(())
}

fn propose(config: &RunConfig, a: ProposeArgs) -> Result<()> {
    let scores = read_fvol(&a.scores)?;
    let reg = read_fvol(&a.regression)?;
    let [one, h, w, k] = scores.dims();
    ensure!(one == 1, "{}: score map must have dims (1, H, W, K)", a.scores.display());
    ensure!(
        reg.dims() == [h, w, k, 8],
        "{}: regression map dims {:?}, expected {:?}",
        a.regression.display(),
        reg.dims(),
        [h, w, k, 8]
    );
    let grid = generate_anchor_grid(h, w, &anchor_config(config, a.diverse), a.t0, config.tube_length)?;
    let score_map = scores.data().index_axis(Axis(0), 0).mapv(f64::from);
    let reg_map = reg.data().mapv(f64::from);
    let proposals = propose_from_maps(
        score_map.view(),
        reg_map.view(),
        &grid,
        (config.frame.width, config.frame.height),
        a.top_n.unwrap_or(config.nms.top_n),
        a.threshold.unwrap_or(config.nms.proposal),
    )?;
    let out: Vec<TubeRecord> = proposals
        .iter()
        .map(|p| TubeRecord { score: Some(p.score), ..TubeRecord::new(&a.video, p.tube) })
        .collect();
    write_records(&a.out, RecordKind::Tubes, &out)?;
    Ok(())
}

fn nms(config: &RunConfig, a: NmsArgs) -> Result<()> {
    match a.mode {
        NmsMode::Tube => {
            let thr = a.threshold.unwrap_or(config.nms.proposal);
            let mut out = Vec::new();
            for (_, group) in by_chunk(read_records(&a.input, RecordKind::Tubes)?) {
                let scored: Vec<_> = group.iter().map(TubeRecord::scored).collect();
                let mut keep = nms_tubes(&scored, thr)?;
                if let Some(n) = a.top_n {
                    keep.truncate(n);
                }
                out.extend(keep.into_iter().map(|i| group[i].clone()));
            }
            write_records(&a.out, RecordKind::Tubes, &out)?;
        }
        NmsMode::Box => {
            let thr = a.threshold.unwrap_or(config.nms.detection);
            let dets: Vec<Detection> = read_records(&a.input, RecordKind::Detections)?;
            let mut groups: BTreeMap<(String, u32, u32), Vec<Detection>> = BTreeMap::new();
            for d in dets {
                groups.entry((d.video.clone(), d.frame, d.class)).or_default().push(d);
            }
            let mut out = Vec::new();
            for (_, group) in groups {
                let boxes: Vec<ScoredBox> = group
                    .iter()
                    .map(|d| ScoredBox { bbox: d.bbox, frame: d.frame, score: d.score, class: Some(d.class) })
                    .collect();
                out.extend(nms_boxes(&boxes, thr)?.into_iter().map(|i| group[i].clone()));
            }
            write_records(&a.out, RecordKind::Detections, &out)?;
        }
    }
    Ok(())
}

fn assign(config: &RunConfig, a: AssignArgs) -> Result<()> {
    let gts = by_chunk(read_records(&a.gt, RecordKind::Tubes)?);
    let mut out = Vec::new();
    for ((video, t0), group) in by_chunk(read_records(&a.input, RecordKind::Tubes)?) {
        let gt = gts.get(&(video.clone(), t0)).map_or(&[][..], Vec::as_slice);
        let tubes: Vec<Tube> = group.iter().map(|r| r.tube).collect();
        let record = |index: usize, label, overlap| LabelRecord {
            video: video.clone(),
            t0,
            index,
            label,
            overlap,
            class: None,
            gt: None,
            target: None,
            score: group[index].score,
        };
        match a.mode {
            AssignMode::Anchor => {
                let gt_tubes: Vec<Tube> = gt.iter().map(|r| r.tube).collect();
                let labels = assign_anchor_labels(&tubes, &gt_tubes, config.labels.anchor())?;
                for (i, (t, l)) in tubes.iter().zip(labels).enumerate() {
                    let overlap = gt_tubes.iter().map(|g| tube_overlap(t, g)).fold(0.0, f64::max);
                    let kind = match l {
                        AnchorLabel::Positive => LabelKind::Positive,
                        AnchorLabel::Negative => LabelKind::Negative,
                        AnchorLabel::Ignore => LabelKind::Ignore,
                    };
                    out.push(record(i, kind, overlap));
                }
            }
            AssignMode::Proposal => {
                let classed: Vec<(Tube, u32)> = gt.iter().map(|r| (r.tube, r.class.unwrap_or(0))).collect();
                let labels = assign_proposal_labels(&tubes, &classed, config.labels.proposal())?;
                for (i, l) in labels.into_iter().enumerate() {
                    out.push(match l {
                        ProposalLabel::Positive { class, gt, overlap, target } => LabelRecord {
                            class: Some(class),
                            gt: Some(gt),
                            target: Some(target),
                            ..record(i, LabelKind::Positive, overlap)
                        },
                        ProposalLabel::Background { gt, overlap } => {
                            LabelRecord { gt: Some(gt), ..record(i, LabelKind::Negative, overlap) }
                        }
                        ProposalLabel::Excluded { overlap } => record(i, LabelKind::Excluded, overlap),
                    });
                }
            }
        }
    }
    write_records(&a.out, RecordKind::Labels, &out)?;
    Ok(())
}

fn pool(config: &RunConfig, a: PoolArgs) -> Result<()> {
    let volume = read_fvol(&a.features)?;
    let tubes: Vec<TubeRecord> = read_records(&a.tubes, RecordKind::Tubes)?;
    let side = a.size.unwrap_or(config.pooling.side);
    let mode = match a.mode {
        Some(PoolMode::Max) => TemporalMode::Max,
        Some(PoolMode::Avg) => TemporalMode::Average,
        None => config.pooling.temporal,
    };
    let [t_dim, c, _, _] = volume.dims();
    let mut data = Vec::with_capacity(tubes.len() * c * side * side);
    let span: Vec<Tube> = tubes.iter().map(|r| r.tube).collect();
    for (i, (r, pooled)) in tubes.iter().zip(toi_pool_batch(volume.view(), &span, side, mode)).enumerate() {
        let pooled = pooled.with_context(|| {
            format!("tube {i} ({} frames from {}) against a {t_dim}-frame volume", r.tube.len(), r.tube.t0())
        })?;
        data.extend(pooled.values.iter().copied());
    }
    let out = Array4::from_shape_vec((tubes.len(), c, side, side), data)?;
    write_fvol(&a.out, &FeatureVolume::new(out, volume.stride())?)?;
    Ok(())
}

/// Chunk-indexed view of a label file.
struct LabelIndex {
    keys: Vec<ChunkKey>,
    pool: LabeledPool,
}

fn index_labels(labels: &[LabelRecord]) -> LabelIndex {
    let mut slots: BTreeMap<ChunkKey, ChunkPool> = BTreeMap::new();
    for l in labels {
        let c = slots.entry((l.video.clone(), l.t0)).or_default();
        match l.label {
            LabelKind::Positive => c.positives.push(l.index),
            LabelKind::Negative => c.negatives.push(l.index),
            LabelKind::Excluded => c.far_negatives.push(l.index),
            LabelKind::Ignore => {}
        }
    }
    let (keys, chunks) = slots.into_iter().unzip();
    LabelIndex { keys, pool: LabeledPool { chunks } }
}

fn sample(config: &RunConfig, a: SampleArgs) -> Result<()> {
    let labels: Vec<LabelRecord> = read_records(&a.labels, RecordKind::Labels)?;
    let idx = index_labels(&labels);
    let batch_cfg: BatchConfig = match a.preset {
        Preset::Classifier => config.batch.classifier,
        Preset::ProposalNetwork => config.batch.proposal_network,
        Preset::Hard => config.batch.hard,
    };
    let hard: Option<Vec<ItemRef>> = match (&a.hard, a.preset) {
        (Some(path), _) => {
            let mined: Vec<LabelRecord> = read_records(path, RecordKind::Labels)?;
            let mut refs = Vec::new();
            for m in mined {
                let key = (m.video.clone(), m.t0);
                let Some(chunk) = idx.keys.iter().position(|k| *k == key) else {
                    bail!("{}: chunk {} {} has no labels", path.display(), key.0, key.1);
                };
                refs.push(ItemRef { chunk, item: m.index });
            }
            Some(refs)
        }
        (None, Preset::Hard) => bail!("the hard preset needs --hard"),
        (None, _) => None,
    };
    let refs = |pick: fn(&ChunkPool) -> &Vec<usize>| -> Vec<ItemRef> {
        idx.pool
            .chunks
            .iter()
            .enumerate()
            .flat_map(|(chunk, c)| pick(c).iter().map(move |&item| ItemRef { chunk, item }))
            .collect()
    };
    let mut out = Vec::new();
    for b in 0..a.batches {
        let seed = config.seed.wrapping_add(b as u64);
        let batch: Batch = match &hard {
            Some(h) => compose_hard_batch(&refs(|c| &c.positives), h, &refs(|c| &c.negatives), &batch_cfg, seed)?,
            None => sample_batch(&idx.pool, &batch_cfg, seed)?,
        };
        if batch.underfilled {
            eprintln!("batch {b}: only {} of {} items available", batch.items.len(), batch_cfg.batch_size());
        }
        for it in &batch.items {
            let (video, t0) = &idx.keys[it.item.chunk];
            out.push(BatchRecord {
                batch: b,
                video: video.clone(),
                t0: *t0,
                index: it.item.item,
                kind: it.kind,
                underfilled: batch.underfilled,
            });
        }
    }
    write_records(&a.out, RecordKind::Batches, &out)?;
    Ok(())
}

fn mine_hard(config: &RunConfig, a: MineArgs) -> Result<()> {
    let gts = by_chunk(read_records(&a.gt, RecordKind::Tubes)?);
    let top_k = a.top_k.unwrap_or_else(|| tubekit::sampling::default_mining_top_k(&config.batch.hard));
    let mut out = Vec::new();
    for ((video, t0), group) in by_chunk(read_records(&a.proposals, RecordKind::Tubes)?) {
        let gt: Vec<Tube> = gts.get(&(video.clone(), t0)).map_or(vec![], |g| g.iter().map(|r| r.tube).collect());
        let scored: Vec<_> = group.iter().map(TubeRecord::scored).collect();
        for i in mine_hard_negatives(&scored, &gt, top_k) {
            out.push(LabelRecord {
                video: video.clone(),
                t0,
                index: i,
                label: LabelKind::Negative,
                overlap: 0.0,
                class: None,
                gt: None,
                target: None,
                score: group[i].score,
            });
        }
    }
    write_records(&a.out, RecordKind::Labels, &out)?;
    Ok(())
}

fn eval_recall(config: &RunConfig, a: RecallArgs) -> Result<()> {
    let thr = a.threshold.unwrap_or(config.metrics.recall_threshold);
    let proposals = by_chunk(read_records(&a.proposals, RecordKind::Tubes)?);
    let gts = by_chunk(read_records(&a.gt, RecordKind::Tubes)?);
    let tubes_of = |m: &BTreeMap<ChunkKey, Vec<TubeRecord>>, k: &ChunkKey| -> Vec<Tube> {
        m.get(k).map_or(vec![], |g| g.iter().map(|r| r.tube).collect())
    };
    let mut tube_count = RecallCount::default();
    for key in gts.keys() {
        tube_count = tube_count + tube_recall_count(&tubes_of(&proposals, key), &tubes_of(&gts, key), thr);
    }
    let mut reports = vec![MetricReport::new("tube_recall", tube_count.ratio())
        .param("threshold", thr)
        .param("covered", tube_count.covered as f64)
        .param("total", tube_count.total as f64)];

    if let Some(path) = &a.tracks {
        let tracks: Vec<Track> = read_records(path, RecordKind::Tracks)?;
        let mut count = RecallCount::default();
        for ((video, t0), group) in &gts {
            let len = group[0].tube.len();
            let chunk = Chunk { t0: *t0, len };
            let in_video: Vec<Track> = tracks.iter().filter(|t| &t.video == video).cloned().collect();
            count = count + box_recall_count(&tubes_of(&proposals, &(video.clone(), *t0)), &in_video, chunk, thr);
        }
        reports.push(
            MetricReport::new("box_recall", count.ratio())
                .param("threshold", thr)
                .param("covered", count.covered as f64)
                .param("total", count.total as f64),
        );
    }
    emit_reports(a.out.as_deref(), &reports)
}

fn eval_detections(config: &RunConfig, a: DetectionEvalArgs, corloc_metric: bool) -> Result<()> {
    let dets: Vec<Detection> = if a.from_tubes {
        let mut dets = Vec::new();
        for ((video, _), group) in by_chunk(read_records(&a.detections, RecordKind::Tubes)?) {
            let scored: Vec<_> = group.iter().map(TubeRecord::scored).collect();
            dets.extend(tubes_to_detections(&video, &scored, config.nms.detection)?);
        }
        dets
    } else {
        read_records(&a.detections, RecordKind::Detections)?
    };
    let tracks: Vec<Track> = read_records(&a.tracks, RecordKind::Tracks)?;
    let gts = ground_truth_boxes(&tracks);
    let (name, thr) = if corloc_metric {
        ("corloc", a.threshold.unwrap_or(config.metrics.corloc_iou))
    } else {
        ("map", a.threshold.unwrap_or(config.metrics.ap_iou))
    };
    let per_class = if corloc_metric { corloc(&dets, &gts, thr) } else { average_precision(&dets, &gts, thr) };
    let mut report = MetricReport::new(name, mean_ap(&per_class)).param("iou", thr);
    report.per_class = per_class;
    emit_reports(a.out.as_deref(), &[report])
}

fn report(a: ReportArgs) -> Result<()> {
    let mut all: Vec<MetricReport> = Vec::new();
    for p in &a.inputs {
        all.extend(read_records::<MetricReport>(p, RecordKind::Reports)?);
    }
    println!("{:<14} {:>10}  params", "metric", "value");
    for r in &all {
        let value = r.value.map_or("-".to_string(), |v| format!("{v:.4}"));
        let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<14} {value:>10}  {}", r.metric, params.join(" "));
        for (c, v) in &r.per_class {
            println!("  class {c:<6} {:>10}", v.map_or("-".to_string(), |v| format!("{v:.4}")));
        }
    }
    if let Some(out) = &a.out {
        write_records(out, RecordKind::Reports, &all)?;
    }
    Ok(())
}
