use super::*;
use crate::attention::HeatStat;
use crate::data::AugmentSizes;

fn cfg(text: &str) -> RunConfig {
    RunConfig::parse(text).unwrap()
}

#[test]
fn parses_comments_blanks_and_duplicates() {
    let c = cfg("# header\n\n tau = 0.5 \nstat=l2\n  # indented comment\ntau = 0.6\n");
    assert_eq!(c.get("tau"), Some("0.6"));
    assert_eq!(c.get("stat"), Some("l2"));
    assert_eq!(c.keys().count(), 2);
}

#[test]
fn malformed_line_reports_its_number() {
    let err = RunConfig::parse("tau = 0.5\nnonsense\n").unwrap_err();
    assert!(err.is_usage());
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(RunConfig::parse(" = 3")
        .unwrap_err()
        .to_string()
        .contains("empty key"));
}

#[test]
fn round_trips_through_text() {
    let c = cfg("b = 2\na = x y\n");
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn train_config_applies_overrides_on_preset() {
    let t = cfg("tau = 0.55\nstat = l1\nstrategy = GL_F\nepochs = 3\nbase_lr = 0.05\nbatch_joint = 5\nseed = 9")
        .train_config()
        .unwrap();
    assert_eq!(t.tau, 0.55);
    assert_eq!(t.stat, HeatStat::L1);
    assert_eq!(t.strategy, Strategy::GLThenF);
    assert_eq!(t.epochs_per_stage, 3);
    assert_eq!(t.base_lr, 0.05);
    assert_eq!(t.batch_joint, 5);
    assert_eq!(t.seed, 9);
    assert_eq!(t.momentum, TrainConfig::desk().momentum);

    let r = cfg("preset = reference").train_config().unwrap();
    assert_eq!(r, TrainConfig::reference());
}

#[test]
fn resolved_train_entries_reproduce_the_config() {
    let t = cfg("tau = 0.3\nstrategy = G_L_F_star\nbackbone = in=1;size=16;widths=4,8\nresize = 18\ncrop = 16")
        .train_config()
        .unwrap();
    let mut echoed = RunConfig::default();
    train_entries(&mut echoed, &t);
    assert_eq!(
        RunConfig::parse(&echoed.to_text())
            .unwrap()
            .train_config()
            .unwrap(),
        t
    );
}

#[test]
fn resolved_synth_entries_reproduce_the_spec() {
    let s = cfg("n_samples = 12\nblob_intensity = 0.7\ndiffuse_finding = Effusion\nseed = 4")
        .synthetic_spec()
        .unwrap();
    assert_eq!(s.n_samples, 12);
    assert_eq!(s.seed, 4);
    assert!(s
        .classes
        .iter()
        .any(|c| c.kind == LesionKind::Blob && c.intensity == 0.7));
    assert!(s
        .classes
        .iter()
        .any(|c| c.kind == LesionKind::Diffuse && c.finding == 2));
    let mut echoed = RunConfig::default();
    synth_entries(&mut echoed, &s);
    assert_eq!(
        RunConfig::parse(&echoed.to_text())
            .unwrap()
            .synthetic_spec()
            .unwrap(),
        s
    );
}

#[test]
fn bad_values_are_usage_errors() {
    for text in [
        "tau = high",
        "tau = 1.5",
        "stat = median",
        "strategy = XYZ",
        "epochs = 0",
        "preset = huge",
        "crop = 80",
    ] {
        let err = cfg(text).train_config().unwrap_err();
        assert!(err.is_usage(), "{text}: {err}");
    }
    for text in [
        "blob_radius_max = 40",
        "diffuse_finding = No Finding",
        "n_samples = 0",
        "noise_level = -1",
    ] {
        let err = cfg(text).synthetic_spec().unwrap_err();
        assert!(err.is_usage(), "{text}: {err}");
    }
}

#[test]
fn unknown_keys_are_rejected_per_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg("tau = 0.5");
    c.set("out", dir.path().display());
    let err = cmd_synth(&c).unwrap_err();
    assert!(err.is_usage() && err.to_string().contains("`tau`"), "{err}");
    assert!(cmd_train(&cfg("colour = red")).unwrap_err().is_usage());
}

#[test]
fn missing_required_settings_are_usage_errors() {
    assert!(cmd_synth(&RunConfig::default()).unwrap_err().is_usage());
    assert!(cmd_train(&cfg("out = x")).unwrap_err().is_usage());
    assert!(cmd_infer(&cfg("checkpoints = x")).unwrap_err().is_usage());
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::EmptyDataset), EXIT_RUNTIME);
    assert_eq!(
        exit_code(&Error::NonFiniteLoss {
            stage: 1,
            epoch: 0,
            iteration: 0
        }),
        EXIT_RUNTIME
    );
    assert_eq!(run(["agcnn", "frobnicate"]), EXIT_USAGE);
    assert_eq!(run(["agcnn", "train", "--tau", "abc"]), EXIT_USAGE);
    assert_eq!(run(["agcnn", "--help"]), EXIT_OK);
}

#[test]
fn taus_parse_as_list() {
    assert_eq!(parse_taus("0.1, 0.5,0.9").unwrap(), vec![0.1, 0.5, 0.9]);
    assert!(parse_taus("0.1,,0.2").unwrap_err().is_usage());
}

fn flat_image(w: usize, h: usize, v: u8) -> GrayImage {
    GrayImage::new(w, h, vec![v; w * h]).unwrap()
}

fn heat(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> HeatMap {
    HeatMap {
        width: w,
        height: h,
        values: (0..w * h).map(|i| f(i % w, i / w)).collect(),
        normalized: true,
        source_stat: HeatStat::MaxAbs,
    }
}

#[test]
fn heat_overlay_keeps_dimensions_and_is_monotone_in_heat() {
    let img = flat_image(20, 12, 100);
    let sizes = AugmentSizes {
        resize: 18,
        crop: 16,
    };
    let frame = EvalFrame::new(20, 12, sizes).unwrap();
    let ramp = heat(16, 16, |x, _| x as f64 / 15.0);
    let out = heat_overlay(&img, &ramp, &frame, 0.5);
    assert_eq!((out.width, out.height), (20, 12));
    // outside the crop only the attenuated image remains
    assert_eq!(out.pixels[0], 50);
    let row = &out.pixels[6 * 20..7 * 20];
    // the centre crop drops the first and last columns
    assert_eq!((row[0], row[19]), (50, 50));
    assert!(row[1..19].windows(2).all(|w| w[0] <= w[1]), "{row:?}");
    assert!(row[18] > 150);

    let zero = heat_overlay(&img, &heat(16, 16, |_, _| 0.0), &frame, 0.5);
    assert!(zero.pixels.iter().all(|&p| p == 50));
}

#[test]
fn box_overlay_draws_contrasting_outline() {
    let mut img = flat_image(10, 8, 30);
    img.pixels[2 * 10 + 5] = 200;
    let b = BoundingBox::new(2, 2, 6, 5).unwrap();
    let out = box_overlay(&img, b);
    assert_eq!((out.width, out.height), (10, 8));
    assert_eq!(out.pixels[2 * 10 + 2], 255);
    assert_eq!(out.pixels[2 * 10 + 5], 0);
    assert_eq!(out.pixels[5 * 10 + 6], 255);
    // interior and exterior untouched
    assert_eq!(out.pixels[3 * 10 + 3], 30);
    assert_eq!(out.pixels[0], 30);
    let changed = out
        .pixels
        .iter()
        .zip(&img.pixels)
        .filter(|(a, b)| a != b)
        .count();
    assert_eq!(changed, 2 * 5 + 2 * 2);
}
