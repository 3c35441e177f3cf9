use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;
use versa_core::conditioning::read_wav;
use versa_core::datagen::{load_manifest, load_split};
use versa_core::generator::{
    check_compatible, generate_motion, masked_token_accuracy, train_audio_stage, train_text_stage,
    GenerationManifest, LoadedGenerator, StageLog,
};
use versa_core::io::write_atomic;
use versa_core::motion::write_motion_binary;
use versa_core::pipeline::{
    audio_examples, audio_vs_text_only, bank_templates, evaluate, text_examples, Paired,
};
use versa_core::rng::stream_rng;
use versa_core::token2pose::{retarget, translate_tokens};
use versa_core::vq::{codebook_utilization, read_tokens, train_vqvae, write_tokens, VqStepLog};
use versa_core::{
    Checkpoint, Corpus, Error, GeneratorModel, PoseSequence2D, RelationBank, RunConfig, Sampling,
    Split, Stage, StoredSample, TargetSkeleton, VqModel,
};

use crate::layout::Layout;
use crate::render::{frame_name, frame_svg, load_poses};
use crate::{Cli, Command, TrainStage};

const VQVAE: &str = "vqvae";
const TEXT: &str = "text";
const AUDIO: &str = "audio";

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::DataSynth { out } => data_synth(&cli, out),
        Command::Train { stage, data, ckpt } => match stage {
            TrainStage::Vqvae => train_tokenizer(&cli, data, &Layout::new(ckpt)),
            TrainStage::Text => train_text(&cli, data, &Layout::new(ckpt)),
            TrainStage::Audio => train_audio(&cli, data, &Layout::new(ckpt)),
        },
        Command::BankBuild { data, ckpt } => bank_build(&cli, data, &Layout::new(ckpt)),
        Command::Generate {
            audio,
            text,
            temperature,
            target,
            ckpt,
            out,
        } => generate(
            &cli,
            &Layout::new(ckpt),
            audio,
            text.as_deref(),
            *temperature,
            target.as_deref(),
            out,
        ),
        Command::Translate {
            tokens,
            target,
            ckpt,
            out,
        } => translate(&cli, &Layout::new(ckpt), tokens, target.as_deref(), out),
        Command::Evaluate {
            data,
            ckpt,
            protocol,
            out,
        } => evaluate_cmd(&cli, data, &Layout::new(ckpt), protocol, out),
        Command::Render { input, out } => render(input, out),
    }
}

/// Defaults, then the config file, then `VERSA_SEED`, then `--seed`.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut run = base.with_env_seed()?;
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    Ok(run)
}

/// For commands that run on trained checkpoints: the stored config, which an
/// explicit `--config` must match apart from the seed.
fn checkpoint_config(cli: &Cli, stored: &RunConfig) -> Result<RunConfig> {
    let mut run = stored.clone();
    if cli.config.is_some() {
        let mut given = resolve_config(cli)?;
        given.seed = stored.seed;
        if given != *stored {
            return Err(Error::Compatibility(format!(
                "config hash {} does not match the checkpoint's {}",
                given.hash(),
                stored.hash()
            ))
            .into());
        }
    }
    if std::env::var_os(versa_core::config::SEED_ENV).is_some() {
        run = run.with_env_seed()?;
    }
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    Ok(run)
}

fn require_same_config(stage: &str, stored: &RunConfig, run: &RunConfig) -> Result<()> {
    if stored != run {
        return Err(Error::Compatibility(format!(
            "{stage} checkpoint was trained with config {}, this run uses {}",
            stored.hash(),
            run.hash()
        ))
        .into());
    }
    Ok(())
}

fn require_stage(layout: &Layout, stage: &str, needed_by: &str) -> Result<()> {
    if !layout.exists(stage) {
        return Err(Error::Ordering(format!(
            "{needed_by} needs the {stage} checkpoint in {}; run `versa train {stage}` first",
            layout.dir().display()
        ))
        .into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn load_corpus(dir: &Path, run: &RunConfig, split: Split) -> Result<Vec<StoredSample>> {
    let manifest = load_manifest(dir)
        .with_context(|| format!("reading corpus manifest in {}", dir.display()))?;
    if manifest.fps != run.data.fps {
        return Err(Error::Compatibility(format!(
            "corpus is at {} fps, config expects {}",
            manifest.fps, run.data.fps
        ))
        .into());
    }
    let items = load_split(dir, Some(split))?;
    if items.is_empty() {
        return Err(Error::InsufficientData(format!(
            "the {split:?} split of {} is empty",
            dir.display()
        ))
        .into());
    }
    Ok(items)
}

struct Tokenizer {
    model: VqModel,
    run: RunConfig,
    hash: String,
}

fn load_tokenizer(layout: &Layout) -> Result<Tokenizer> {
    let ck = Checkpoint::load(&layout.stem(VQVAE))?;
    let (model, run) = VqModel::from_checkpoint(&ck)?;
    Ok(Tokenizer {
        model,
        run,
        hash: ck.hash()?,
    })
}

fn load_generator(
    layout: &Layout,
    stage: &str,
    tok: &Tokenizer,
) -> Result<(LoadedGenerator, String)> {
    let ck = Checkpoint::load(&layout.stem(stage))?;
    let g = GeneratorModel::from_checkpoint(&ck)?;
    if g.tokenizer_hash != tok.hash {
        return Err(Error::Compatibility(format!(
            "{stage} checkpoint was trained against tokenizer {}, found {}",
            g.tokenizer_hash, tok.hash
        ))
        .into());
    }
    check_compatible(&tok.run, &g.run)?;
    Ok((g, ck.hash()?))
}

fn load_bank(layout: &Layout, tok: &Tokenizer) -> Result<RelationBank> {
    if !layout.bank().with_extension("json").is_file() {
        return Ok(RelationBank::new(tok.model.downsample()));
    }
    let (bank, hash) = RelationBank::load(&layout.bank())?;
    if hash != tok.hash {
        return Err(Error::Compatibility(format!(
            "bank was built with tokenizer {hash}, found {}",
            tok.hash
        ))
        .into());
    }
    Ok(bank)
}

fn stage_csv(log: &[StageLog]) -> String {
    let mut csv = format!("{}\n", StageLog::CSV_HEADER);
    for e in log {
        csv.push_str(&e.csv_row());
        csv.push('\n');
    }
    csv
}

fn progress(stage: &str, step: usize, total: usize, loss: f32) {
    if step.is_multiple_of(100) || step + 1 == total {
        println!("{stage} step {step}/{total} loss {loss:.5}");
    }
}

fn data_synth(cli: &Cli, out: &Path) -> Result<()> {
    let run = resolve_config(cli)?;
    let corpus = Corpus::generate(&run)?;
    let manifest = corpus.save(out, &run)?;
    println!(
        "wrote {} samples to {} (config {})",
        manifest.samples.len(),
        out.display(),
        manifest.config_hash
    );
    Ok(())
}

fn train_tokenizer(cli: &Cli, data: &Path, layout: &Layout) -> Result<()> {
    let run = resolve_config(cli)?;
    let train: Vec<_> = load_corpus(data, &run, Split::Train)?
        .into_iter()
        .map(|s| s.motion)
        .collect();
    let val: Vec<_> = load_corpus(data, &run, Split::Val)?
        .into_iter()
        .map(|s| s.motion)
        .collect();
    let mut csv = format!("{}\n", VqStepLog::CSV_HEADER);
    let steps = run.vq.steps;
    let out = train_vqvae(&train, &run, |e| {
        csv.push_str(&e.csv_row());
        csv.push('\n');
        progress(VQVAE, e.step, steps, e.loss);
    })?;
    std::fs::create_dir_all(layout.dir())?;
    let ck = out.model.to_checkpoint(&run);
    ck.save(&layout.stem(VQVAE))?;
    write_atomic(&layout.loss_csv(VQVAE), csv.as_bytes())?;
    let manifest = json!({
        "stage": VQVAE,
        "config_hash": run.hash(),
        "seed": run.seed,
        "checkpoint_hash": ck.hash()?,
        "steps": steps,
        "final_loss": out.log.last().map(|e| e.loss),
        "val_recon_l1": out.model.reconstruction_l1(&val)?,
        "val_utilization": codebook_utilization(&out.model, &val)?,
        "train_utilization": codebook_utilization(&out.model, &train)?,
    });
    write_json(&layout.run_manifest(VQVAE), &manifest)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn paired(items: &[StoredSample]) -> Vec<Paired<'_>> {
    items.iter().map(StoredSample::paired).collect()
}

fn train_text(cli: &Cli, data: &Path, layout: &Layout) -> Result<()> {
    let run = resolve_config(cli)?;
    require_stage(layout, VQVAE, "the text stage")?;
    let tok = load_tokenizer(layout)?;
    require_same_config(VQVAE, &tok.run, &run)?;
    let train = load_corpus(data, &run, Split::Train)?;
    let val = load_corpus(data, &run, Split::Val)?;
    let examples = text_examples(&tok.model, &paired(&train))?;
    let mut rng = stream_rng(run.seed, "gen.init");
    let mut model = GeneratorModel::init(&run.generator, tok.model.codebook.size(), &mut rng)?;
    let steps = run.generator.text_steps;
    let (_, log) = train_text_stage(&mut model, &examples, &run, |e| {
        progress(TEXT, e.step, steps, e.loss)
    })?;
    std::fs::create_dir_all(layout.dir())?;
    let ck = model.to_checkpoint(&run, Stage::Text, &tok.hash);
    ck.save(&layout.stem(TEXT))?;
    write_atomic(&layout.loss_csv(TEXT), stage_csv(&log).as_bytes())?;
    let val_examples = text_examples(&tok.model, &paired(&val))?;
    let manifest = json!({
        "stage": TEXT,
        "config_hash": run.hash(),
        "seed": run.seed,
        "checkpoint_hash": ck.hash()?,
        "tokenizer_hash": tok.hash,
        "steps": steps,
        "final_loss": log.last().map(|e| e.loss),
        "val_masked_accuracy": masked_token_accuracy(&model, &val_examples, 0.5, run.seed)?,
    });
    write_json(&layout.run_manifest(TEXT), &manifest)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn train_audio(cli: &Cli, data: &Path, layout: &Layout) -> Result<()> {
    let run = resolve_config(cli)?;
    require_stage(layout, TEXT, "the audio stage")?;
    require_stage(layout, VQVAE, "the audio stage")?;
    let tok = load_tokenizer(layout)?;
    let (loaded, _) = load_generator(layout, TEXT, &tok)?;
    if loaded.stage != Stage::Text {
        return Err(
            Error::Ordering("the text checkpoint does not hold a text-stage model".into()).into(),
        );
    }
    require_same_config(TEXT, &loaded.run, &run)?;
    let mut model = loaded.model;
    let train = load_corpus(data, &run, Split::Train)?;
    let val = load_corpus(data, &run, Split::Val)?;
    let examples = audio_examples(&tok.model, &paired(&train))?;
    let steps = run.generator.audio_steps;
    let (_, log) = train_audio_stage(&mut model, &examples, &run, |e| {
        progress(AUDIO, e.step, steps, e.loss)
    })?;
    let ck = model.to_checkpoint(&run, Stage::Audio, &tok.hash);
    ck.save(&layout.stem(AUDIO))?;
    write_atomic(&layout.loss_csv(AUDIO), stage_csv(&log).as_bytes())?;
    let (fused, baseline) =
        audio_vs_text_only(&model, &audio_examples(&tok.model, &paired(&val))?)?;
    let manifest = json!({
        "stage": AUDIO,
        "config_hash": run.hash(),
        "seed": run.seed,
        "checkpoint_hash": ck.hash()?,
        "tokenizer_hash": tok.hash,
        "steps": steps,
        "final_loss": log.last().map(|e| e.loss),
        "val_audio_accuracy": fused,
        "val_text_only_accuracy": baseline,
    });
    write_json(&layout.run_manifest(AUDIO), &manifest)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn bank_build(cli: &Cli, data: &Path, layout: &Layout) -> Result<()> {
    require_stage(layout, VQVAE, "bank-build")?;
    let tok = load_tokenizer(layout)?;
    let run = checkpoint_config(cli, &tok.run)?;
    let train = load_corpus(data, &run, Split::Train)?;
    let bank = RelationBank::build(&bank_templates(&paired(&train))?, &tok.model)?;
    bank.save(&layout.bank(), &tok.hash)?;
    println!(
        "bank: {} snippets over {} tokens",
        bank.num_snippets(),
        bank.token_ids().count()
    );
    Ok(())
}

fn finish_poses(poses: PoseSequence2D, target: Option<&Path>) -> Result<PoseSequence2D> {
    match target {
        Some(p) => Ok(retarget(&poses, &TargetSkeleton::load(p)?)?),
        None => Ok(poses),
    }
}

fn generate(
    cli: &Cli,
    layout: &Layout,
    audio_path: &Path,
    prompt: Option<&str>,
    temperature: Option<f32>,
    target: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_stage(layout, VQVAE, "generate")?;
    require_stage(layout, AUDIO, "generate")?;
    let tok = load_tokenizer(layout)?;
    let (gen, gen_hash) = load_generator(layout, AUDIO, &tok)?;
    let run = checkpoint_config(cli, &gen.run)?;
    let audio =
        read_wav(audio_path).with_context(|| format!("reading {}", audio_path.display()))?;
    let sampling = match temperature {
        Some(t) => Sampling::Categorical {
            temperature: t,
            seed: run.seed,
        },
        None => Sampling::Greedy,
    };
    let g = generate_motion(&tok.model, &gen.model, &run, &audio, prompt, sampling)?;
    let bank = load_bank(layout, &tok)?;
    let poses = translate_tokens(&g.tokens, &bank, &tok.model, run.data.fps, run.seed)?;
    let poses = finish_poses(poses, target)?;

    std::fs::create_dir_all(out)?;
    write_motion_binary(&out.join("motion.vmot"), &g.motion)?;
    write_tokens(
        &out.join("tokens.txt"),
        &g.tokens,
        tok.model.codebook.size(),
    )?;
    poses.save(&out.join("poses.vp2d"))?;
    let manifest = GenerationManifest {
        audio: audio_path.display().to_string(),
        prompt: prompt
            .unwrap_or(versa_core::conditioning::SPEECH_PROMPT)
            .to_string(),
        seed: run.seed,
        sampling: match sampling {
            Sampling::Greedy => "greedy".into(),
            Sampling::Categorical { temperature, .. } => format!("categorical:{temperature}"),
        },
        tokenizer_hash: tok.hash.clone(),
        generator_hash: gen_hash,
        config_hash: run.hash(),
        tokens: "tokens.txt".into(),
        motion: "motion.vmot".into(),
        poses: Some("poses.vp2d".into()),
        num_tokens: g.tokens.len(),
        num_frames: g.motion.num_frames(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "generated {} tokens, {} frames into {}",
        manifest.num_tokens,
        manifest.num_frames,
        out.display()
    );
    Ok(())
}

fn translate(
    cli: &Cli,
    layout: &Layout,
    tokens: &Path,
    target: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_stage(layout, VQVAE, "translate")?;
    let tok = load_tokenizer(layout)?;
    let run = checkpoint_config(cli, &tok.run)?;
    let (ids, k) = read_tokens(tokens)?;
    if k != tok.model.codebook.size() {
        return Err(Error::Compatibility(format!(
            "token file uses K={k}, tokenizer has K={}",
            tok.model.codebook.size()
        ))
        .into());
    }
    let bank = load_bank(layout, &tok)?;
    let poses = translate_tokens(&ids, &bank, &tok.model, run.data.fps, run.seed)?;
    let poses = finish_poses(poses, target)?;
    poses.save(out)?;
    println!("wrote {} frames to {}", poses.num_frames(), out.display());
    Ok(())
}

fn evaluate_cmd(cli: &Cli, data: &Path, layout: &Layout, protocol: &str, out: &Path) -> Result<()> {
    if protocol != versa_core::metrics::PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "unknown protocol `{protocol}`; this build implements `{}`",
            versa_core::metrics::PROTOCOL_VERSION
        ))
        .into());
    }
    require_stage(layout, VQVAE, "evaluate")?;
    let stage = if layout.exists(AUDIO) { AUDIO } else { TEXT };
    require_stage(layout, stage, "evaluate")?;
    let tok = load_tokenizer(layout)?;
    let (gen, _) = load_generator(layout, stage, &tok)?;
    let run = checkpoint_config(cli, &gen.run)?;
    let fit = load_corpus(data, &run, Split::Train)?;
    let test = load_corpus(data, &run, Split::Test)?;
    let report = evaluate(&tok.model, &gen.model, &run, &paired(&fit), &paired(&test))?;
    write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn render(input: &Path, out: &Path) -> Result<()> {
    let poses = load_poses(input).with_context(|| format!("reading {}", input.display()))?;
    std::fs::create_dir_all(out)?;
    for t in 0..poses.num_frames() {
        write_atomic(&out.join(frame_name(t)), frame_svg(&poses, t).as_bytes())?;
    }
    println!(
        "rendered {} frames into {}",
        poses.num_frames(),
        out.display()
    );
    Ok(())
}
