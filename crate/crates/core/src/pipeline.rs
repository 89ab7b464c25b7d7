//! End-to-end steps shared by the command-line tool and the experiment
//! tests: simulate a corpus, build training examples, train, localize.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{
    partition, read_ground_truth, read_wav, write_atomic, write_ground_truth, write_wav, EngineKind, ExperimentConfig,
    FrameResult, GroundTruthTrack, Interpolation, Manifest, MultichannelAudio, SampleFormat, SequenceEntry, Split,
    SplitSpec,
};
use crate::dsp::{extract_frames, gaussian_target, GccFrame, GccPhat, DEFAULT_EPS_REL};
use crate::error::{Error, Result};
use crate::geometry::{enumerate_pairs, tdoa, Point3};
use crate::net::{AdamState, Architecture, Checkpoint, EncoderDecoderNet, Network, TrainConfig, TrainReport};
use crate::sim::{synthesize, SourceScript, TrainingPair};
use crate::srp::{Engine, PowerMap, SequenceLocalizer};

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Fail early if `dir` cannot hold output files.
pub fn ensure_writable_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Roughly 80/10/10 with at least one validation sequence once there are two.
fn sequence_split(n: usize) -> SplitSpec {
    match n {
        0 | 1 => SplitSpec::Fractions { val: 0.0, test: 0.0 },
        2 => SplitSpec::Fractions { val: 0.5, test: 0.0 },
        _ => {
            let val = (n as f64 * 0.1).round().max(1.0) / n as f64;
            let test = (n as f64 * 0.1).round().max(1.0) / n as f64;
            SplitSpec::Fractions { val, test }
        }
    }
}

/// Render every configured sequence into `out` as a float WAV plus a
/// ground-truth CSV, and write a manifest with a train/val/test split.
pub fn simulate_to_dir(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Manifest> {
    let sim = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Config("configuration has no [simulation] section".into()))?;
    ensure_writable_dir(out)?;
    let room = cfg.room()?;
    let array = cfg.array()?;
    let consts = cfg.consts()?;
    let frames = cfg.frame_spec()?;
    let (lo, hi) = (Point3::from_array(sim.source_min), Point3::from_array(sim.source_max));

    let rendered: Vec<Result<(String, MultichannelAudio, GroundTruthTrack)>> = (0..sim.sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut draw = || {
                let mut axis = |a: f64, b: f64| if b > a { rng.gen_range(a..=b) } else { a };
                Point3::new(axis(lo.x, hi.x), axis(lo.y, hi.y), axis(lo.z, hi.z))
            };
            let start = draw();
            let script = if sim.moving {
                let end = draw();
                SourceScript {
                    trajectory: vec![(0.0, start), (sim.duration, end)],
                    excitation: sim.excitation.clone(),
                    snr_db: sim.snr_db,
                }
            } else {
                SourceScript::fixed(start, sim.excitation.clone(), sim.snr_db)
            };
            let run_seed = rng.gen::<u64>();
            let s = synthesize(&room, &array, &script, sim.duration, &consts, &frames, run_seed)?;
            Ok((format!("seq{i:03}"), s.audio, s.ground_truth))
        })
        .collect();

    let mut manifest = Manifest::default();
    for r in rendered {
        let (name, audio, track) = r?;
        let wav = PathBuf::from(format!("{name}.wav"));
        let gt = PathBuf::from(format!("{name}_gt.csv"));
        write_wav(&out.join(&wav), &audio, SampleFormat::Float32)?;
        write_ground_truth(&out.join(&gt), &track)?;
        manifest.sequences.push(SequenceEntry {
            name,
            audio: wav,
            ground_truth: gt,
            split: None,
        });
    }
    let manifest = partition(&manifest, &sequence_split(manifest.sequences.len()), seed)?;
    manifest.save(&out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// GCC-PHAT of every pair for every whole frame, frame-major.
pub fn gcc_frames(cfg: &ExperimentConfig, audio: &MultichannelAudio) -> Result<Vec<GccFrame>> {
    let array = cfg.array()?;
    check_audio(cfg, audio, array.len())?;
    let frames = cfg.frame_spec()?;
    let gcc = GccPhat::new(frames.frame_len(), cfg.lag_count, DEFAULT_EPS_REL)?;
    let per_channel: Vec<Vec<Vec<f64>>> = audio
        .channels
        .iter()
        .map(|c| extract_frames(c, &frames).frames)
        .collect();
    let pairs = enumerate_pairs(&array);
    let mut out = Vec::new();
    for f in 0..per_channel[0].len() {
        let spectra = per_channel
            .iter()
            .map(|c| gcc.spectrum(&c[f]))
            .collect::<Result<Vec<_>>>()?;
        for &(k, l) in &pairs {
            out.push(GccFrame {
                lags: gcc.correlate(&spectra[k], &spectra[l]),
                pair: (k, l),
                frame_index: f,
                fs: cfg.fs,
            });
        }
    }
    Ok(out)
}

fn check_audio(cfg: &ExperimentConfig, audio: &MultichannelAudio, mics: usize) -> Result<()> {
    if audio.channel_count() != mics {
        return Err(Error::Validation(format!(
            "recording has {} channels, array has {mics} microphones",
            audio.channel_count()
        )));
    }
    if (audio.fs - cfg.fs).abs() > 1e-9 * cfg.fs {
        return Err(Error::Validation(format!(
            "recording is sampled at {} Hz, configuration expects {} Hz",
            audio.fs, cfg.fs
        )));
    }
    Ok(())
}

/// Supervised examples from one labelled recording: every `stride`-th frame,
/// every pair whose true delay fits inside the lag window.
pub fn examples_from_recording(
    cfg: &ExperimentConfig,
    audio: &MultichannelAudio,
    track: &GroundTruthTrack,
    stride: usize,
) -> Result<Vec<TrainingPair>> {
    let array = cfg.array()?;
    let frames = cfg.frame_spec()?;
    let half = (cfg.lag_count / 2) as f64;
    let mut out = Vec::new();
    for g in gcc_frames(cfg, audio)? {
        if g.frame_index % stride.max(1) != 0 {
            continue;
        }
        let (pos, _) = track.query(frames.frame_center_time(g.frame_index, cfg.fs));
        let m = array.mics();
        let tau = tdoa(&pos, &m[g.pair.0], &m[g.pair.1], cfg.sound_speed)?;
        if (tau * cfg.fs).abs() >= half {
            continue;
        }
        let target = gaussian_target(tau, cfg.fs, cfg.lag_count, cfg.sigma)?;
        out.push(TrainingPair { input: g, target });
    }
    Ok(out)
}

/// Examples from every sequence of one split, in manifest order.
pub fn examples_from_manifest(cfg: &ExperimentConfig, manifest: &Manifest, split: Split) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for s in manifest.split(split) {
        let audio = read_wav(&s.audio)?;
        let track = read_ground_truth(&s.ground_truth, Interpolation::Linear)?;
        out.extend(examples_from_recording(cfg, &audio, &track, cfg.training.frame_stride)?);
    }
    Ok(out)
}

/// Train a fresh network on the manifest's train split, early-stopping on
/// its val split.
pub fn train_from_manifest(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    if manifest.split(Split::Train).is_empty() || manifest.split(Split::Val).is_empty() {
        return Err(Error::Validation("manifest needs both train and val sequences".into()));
    }
    let train_set = examples_from_manifest(cfg, manifest, Split::Train)?;
    let val_set = examples_from_manifest(cfg, manifest, Split::Val)?;
    train_on_examples(cfg, &train_set, &val_set, seed)
}

pub fn train_on_examples(
    cfg: &ExperimentConfig,
    train_set: &[TrainingPair],
    val_set: &[TrainingPair],
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    let mut net: EncoderDecoderNet = Network::new(&Architecture::deepgcc(cfg.lag_count), seed)?;
    let t = &cfg.training;
    let mut opt = AdamState::new(&net, t.learning_rate, t.lr_decay);
    let tc = TrainConfig {
        batch_size: t.batch_size,
        patience: t.patience,
        max_epochs: t.max_epochs,
        seed,
    };
    log::info!(
        "training on {} examples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let report = crate::net::train(&mut net, &mut opt, train_set, val_set, &tc)?;
    Ok((
        Checkpoint {
            net,
            optimizer: Some(opt),
        },
        report,
    ))
}

pub fn history_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in &report.history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

/// Localize every frame of a labelled recording. `on_map` receives each
/// power map in frame order.
pub fn localize_recording(
    cfg: &ExperimentConfig,
    audio: &MultichannelAudio,
    track: &GroundTruthTrack,
    engine: Engine<'_>,
    on_map: impl FnMut(usize, &PowerMap) -> Result<()>,
) -> Result<Vec<FrameResult>> {
    let array = cfg.array()?;
    check_audio(cfg, audio, array.len())?;
    let grid = cfg.grid()?;
    let consts = cfg.consts()?;
    let frames = cfg.frame_spec()?;
    let localizer = SequenceLocalizer::new(
        &array,
        &grid,
        &consts,
        &frames,
        cfg.lag_count,
        engine,
        cfg.interpolation,
    )?;
    let estimates = localizer.run(audio, on_map)?;
    Ok(estimates
        .iter()
        .map(|e| FrameResult::new(e.frame_index, e.t, e.position, track.query(e.t).0))
        .collect())
}

/// Write one power map per frame as `frame_NNNNN.txt` under `dir`.
pub fn map_dumper(dir: &Path) -> Result<impl FnMut(usize, &PowerMap) -> Result<()> + '_> {
    ensure_writable_dir(dir)?;
    Ok(move |i: usize, map: &PowerMap| map.save(&dir.join(format!("frame_{i:05}.txt"))))
}

/// Engine selection with the checkpoint requirement checked.
pub fn resolve_engine(kind: EngineKind, checkpoint: Option<&Checkpoint>) -> Result<Engine<'_>> {
    match (kind, checkpoint) {
        (EngineKind::GccPhat, _) => Ok(Engine::GccPhat),
        (EngineKind::DeepGcc, Some(c)) => Ok(Engine::DeepGcc(&c.net)),
        (EngineKind::DeepGcc, None) => Err(Error::Config("engine deepgcc needs a checkpoint".into())),
    }
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
