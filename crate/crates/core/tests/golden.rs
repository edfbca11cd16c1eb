//! Committed fixtures, written by `fixtures/make_fixtures.py`, must decode to
//! the documented values and re-encode to the same bytes.

use std::path::PathBuf;

use inrprop::geometry::Canvas;
use inrprop::io::{self, PropagationMode};
use inrprop::maskops::{BinaryMask, ProbabilityField};
use inrprop::numerics::{SirenConfig, SirenNet};
use inrprop::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap()
}

fn assert_truncations_fail<T: std::fmt::Debug>(data: &[u8], decode: impl Fn(&[u8]) -> inrprop::Result<T>) {
    for len in 0..data.len() {
        match decode(&data[..len]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= len as u64, "prefix {len}: offset {offset}"),
            other => panic!("prefix {len}: {other:?}"),
        }
    }
}

#[test]
fn fvol_fixture() {
    let raw = bytes("tiny.fvol");
    let loaded = io::read_fvol(fixture("tiny.fvol")).unwrap();
    assert_eq!(loaded.renormalized, 0);
    let v = &loaded.volume;
    assert_eq!(v.dims(), (1, 2, 2, 2));
    assert_eq!(v.source_tag(), "golden-v1");
    assert_eq!(v.data(), &[0.6, 0.8, 1.0, 0.0, 0.0, -1.0, -0.8, 0.6]);
    assert_eq!(io::encode_fvol(v).unwrap(), raw);
    // the prefix ending at the data block is a valid untagged file
    let untagged = 22 + 32;
    for len in 0..raw.len() {
        let r = io::decode_fvol(&raw[..len]);
        if len == untagged {
            assert!(r.is_ok());
        } else {
            assert!(matches!(r, Err(Error::Format { .. })), "prefix {len}");
        }
    }
}

#[test]
fn mask_fixture() {
    let raw = bytes("mask.pgm");
    let m = io::read_mask(fixture("mask.pgm")).unwrap();
    assert_eq!(m, BinaryMask::from_fn(Canvas::new(4, 3), |x, y| x >= y));
    assert_eq!(io::encode_mask_pgm(&m), raw);
    assert_truncations_fail(&raw, io::decode_mask_pgm);
}

#[test]
fn probability_fixture() {
    let raw = bytes("probability.pgm");
    let p = io::read_probability(fixture("probability.pgm")).unwrap();
    let expected = ProbabilityField::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
    for (a, b) in p.values().iter().zip(expected.values()) {
        assert!((a - b).abs() <= 0.5 / 65535.0);
    }
    assert_eq!(io::encode_probability_pgm(&expected), raw);
    assert_eq!(io::encode_probability_pgm(&p), raw);
    assert_truncations_fail(&raw, io::decode_probability_pgm);
}

#[test]
fn sirn_fixture() {
    let raw = bytes("tiny.sirn");
    let cfg = SirenConfig::sine(2, 3, 1, 2);
    let params: Vec<f64> = (0..cfg.param_count()).map(|i| 0.125 * (i as f64 - 7.0)).collect();
    let expected = SirenNet::from_params(cfg, 5, params).unwrap();
    let net = io::read_net::<f64>(fixture("tiny.sirn")).unwrap();
    assert_eq!(net, expected);
    assert_eq!(io::encode_net(&expected).unwrap(), raw);
    assert_truncations_fail(&raw, io::decode_net::<f64>);
}

#[test]
fn annotation_fixture() {
    let raw = bytes("annotation.json");
    let doc = io::read_annotation(fixture("annotation.json")).unwrap();
    assert_eq!(doc.video_id, "echo-01");
    assert_eq!(doc.canvas, Canvas::square(112));
    let labels: Vec<&str> = doc.points.iter().flatten().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, ["apex", "mitral-left", "mitral-right"]);
    assert_eq!(doc.point_coords()[1], [30.25, 90.0]);
    assert_eq!(doc.extra["annotator"], "reader-2");
    assert_eq!(io::encode_annotation(&doc).unwrap(), raw);
}

#[test]
fn propagation_fixture() {
    let raw = bytes("propagation.json");
    let doc = io::read_propagation(fixture("propagation.json")).unwrap();
    assert_eq!(doc.seed, Some(42));
    assert_eq!(doc.mode, PropagationMode::Points);
    assert_eq!(doc.results[0].predicted, [57.0, 22.0]);
    assert_eq!(io::encode_propagation(&doc).unwrap(), raw);
}

#[test]
fn file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["tiny.fvol", "mask.pgm", "tiny.sirn", "annotation.json", "propagation.json"] {
        let out = dir.path().join(name);
        match name {
            "tiny.fvol" => io::write_fvol(&io::read_fvol(fixture(name)).unwrap().volume, &out).unwrap(),
            "mask.pgm" => io::write_mask(&io::read_mask(fixture(name)).unwrap(), &out).unwrap(),
            "tiny.sirn" => io::write_net(&io::read_net::<f64>(fixture(name)).unwrap(), &out).unwrap(),
            "annotation.json" => io::write_annotation(&io::read_annotation(fixture(name)).unwrap(), &out).unwrap(),
            _ => io::write_propagation(&io::read_propagation(fixture(name)).unwrap(), &out).unwrap(),
        }
        assert_eq!(std::fs::read(&out).unwrap(), bytes(name), "{name}");
    }
}

#[test]
fn decode_errors_carry_the_file_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.fvol");
    std::fs::write(&p, b"XXXXjunk").unwrap();
    let err = io::read_fvol(&p).unwrap_err();
    assert!(matches!(err.root(), Error::Format { offset: 0, .. }));
    assert!(err.to_string().contains("bad.fvol"));
}
