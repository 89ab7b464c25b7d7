use deepgcc::dataio::{ExperimentConfig, Manifest};
use deepgcc::dsp::{FrameSpec, GccFrame};
use deepgcc::geometry::{Grid3D, MicArray, PhysicalConstants, Point3};
use deepgcc::net::{Architecture, Checkpoint, EncoderDecoderNet, Mode, Network};
use deepgcc::pipeline;
use deepgcc::sim::{synthesize, Excitation, RoomSpec, SourceScript};
use deepgcc::srp::{localize_sequence, Engine, LagInterpolation};

fn setup() -> (RoomSpec, MicArray, Grid3D, PhysicalConstants, FrameSpec) {
    let room = RoomSpec::anechoic([4.0, 4.0, 3.0]);
    let array = MicArray::circular(Point3::new(2.0, 2.0, 1.0), 0.25, 6).unwrap();
    let grid = Grid3D::new(Point3::new(1.0, 1.0, 1.2), Point3::new(3.0, 3.0, 2.0), 0.2).unwrap();
    let consts = PhysicalConstants::with_fs(48_000.0).unwrap();
    let frames = FrameSpec::from_duration(48_000.0, 0.166, 0.5).unwrap();
    (room, array, grid, consts, frames)
}

#[test]
fn anechoic_source_on_a_grid_node_is_found_exactly() {
    let (room, array, grid, consts, frames) = setup();
    let src = grid.point_at(2, 8, 2);
    let script = SourceScript::fixed(src, Excitation::WhiteNoise, None);
    let sim = synthesize(&room, &array, &script, 0.5, &consts, &frames, 3).unwrap();
    let est = localize_sequence(
        &sim.audio,
        &array,
        &grid,
        &consts,
        &frames,
        400,
        Engine::GccPhat,
        LagInterpolation::Linear,
    )
    .unwrap();
    assert!(!est.is_empty());
    for e in &est {
        assert!(
            e.position.distance(&src) < 1e-9,
            "frame {} at {:?}",
            e.frame_index,
            e.position
        );
    }
}

#[test]
fn silent_network_picks_the_first_grid_point() {
    let (room, array, grid, consts, frames) = setup();
    let mut net: EncoderDecoderNet = Network::new(&Architecture::deepgcc(400), 1).unwrap();
    let last = net.blocks_mut().last_mut().unwrap();
    last.gamma.iter_mut().for_each(|g| *g = 0.0);
    last.beta.iter_mut().for_each(|b| *b = 0.0);
    let script = SourceScript::fixed(Point3::new(2.6, 1.4, 1.8), Excitation::WhiteNoise, None);
    let sim = synthesize(&room, &array, &script, 0.3, &consts, &frames, 4).unwrap();
    let est = localize_sequence(
        &sim.audio,
        &array,
        &grid,
        &consts,
        &frames,
        400,
        Engine::DeepGcc(&net),
        LagInterpolation::Linear,
    )
    .unwrap();
    for e in &est {
        assert_eq!(e.position, grid.point(0));
        assert_eq!(e.peak, 0.0);
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let net: EncoderDecoderNet = Network::new(&Architecture::deepgcc(400), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.dgcc");
    Checkpoint { net, optimizer: None }.save(&path).unwrap();
    let a = Checkpoint::load(&path).unwrap();
    let b = Checkpoint::load(&path).unwrap();
    let mut frame = GccFrame {
        lags: (0..400).map(|i| ((i as f64) * 0.37).sin()).collect(),
        pair: (0, 1),
        frame_index: 0,
        fs: 48_000.0,
    };
    frame.lags[200] = 1.0;
    let (mut na, mut nb) = (a.net, b.net);
    let ya = na.forward_frame(&frame, Mode::Infer).unwrap();
    let yb = nb.forward_frame(&frame, Mode::Infer).unwrap();
    assert_eq!(ya, yb);
    assert!(ya.values.iter().all(|v| v.is_finite() && *v >= 0.0));
}

const CONFIG: &str = r#"
[room]
dims = [4.0, 4.5, 3.0]
rt60 = 0.3
max_order = 2

[array.circle]
center = [2.0, 2.2, 0.73]
radius = 0.1
count = 4

[grid]
min = [0.4, 0.4, 0.73]
max = [3.6, 4.1, 2.33]
resolution = 0.4

[simulation]
duration = 0.4
sequences = 5
source_min = [0.5, 0.5, 1.0]
source_max = [3.5, 4.0, 2.0]
"#;

#[test]
fn simulated_corpus_is_reproducible_and_split() {
    let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = pipeline::simulate_to_dir(&cfg, a.path(), 11).unwrap();
    let mb = pipeline::simulate_to_dir(&cfg, b.path(), 11).unwrap();
    assert_eq!(ma, mb);
    for s in &ma.sequences {
        assert!(s.split.is_some());
        let wa = std::fs::read(a.path().join(&s.audio)).unwrap();
        let wb = std::fs::read(b.path().join(&s.audio)).unwrap();
        assert_eq!(wa, wb);
    }
    let loaded = Manifest::load(&a.path().join(pipeline::MANIFEST_NAME)).unwrap();
    assert_eq!(loaded.sequences.len(), 5);
    let examples = pipeline::examples_from_manifest(&cfg, &loaded, deepgcc::dataio::Split::Train).unwrap();
    assert!(!examples.is_empty());
    for ex in &examples {
        let peak = ex.target.values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak > 0.9 && peak <= 1.0);
    }
}
