use std::fs;

use f3rnet::volgrid::{
    load_field, load_labels, load_volume, save_field, save_labels, save_volume, DisplacementField,
    LabelMask, Volume,
};
use f3rnet::Error;

fn write_pair(dir: &std::path::Path, name: &str, header: &str, values: &[f32]) -> std::path::PathBuf {
    let base = dir.join(name);
    fs::write(base.with_extension("json"), header).unwrap();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(base.with_extension("raw"), bytes).unwrap();
    base
}

#[test]
fn reads_a_hand_written_pair() {
    let dir = tempfile::tempdir().unwrap();
    let header = r#"{"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}"#;
    let values: Vec<f32> = (0..8).map(|i| i as f32 * 0.25).collect();
    let base = write_pair(dir.path(), "v", header, &values);
    let v = load_volume(&base).unwrap();
    assert_eq!(v.shape(), [2, 2, 2]);
    assert_eq!(v.data(), values.as_slice());
    // Either file of the pair names the volume.
    assert_eq!(load_volume(base.with_extension("json")).unwrap(), v);
    assert_eq!(load_volume(base.with_extension("raw")).unwrap(), v);
}

#[test]
fn short_raw_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let header = r#"{"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}"#;
    let base = write_pair(dir.path(), "v", header, &[0.0; 7]);
    assert!(matches!(load_volume(&base), Err(Error::Format(_))));
}

#[test]
fn malformed_headers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (i, header) in [
        r#"{"shape":[2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}"#,
        r#"{"shape":[2,2,2],"spacing_mm":[1,0,1],"dtype":"f32le"}"#,
        r#"{"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f64le"}"#,
        r#"{"shape":[2,2,2],"spacing_mm":[1,1,1]"#,
    ]
    .iter()
    .enumerate()
    {
        let base = write_pair(dir.path(), &format!("h{i}"), header, &[0.0; 8]);
        assert!(load_volume(&base).is_err(), "header {i} accepted");
    }
    assert!(matches!(load_volume(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn volume_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.731).sin() * 1e3).collect();
    let v = Volume::new([3, 4, 5], [0.8, 1.0, 2.5], data).unwrap();
    save_volume(&v, dir.path().join("a")).unwrap();
    let back = load_volume(dir.path().join("a")).unwrap();
    assert_eq!(back, v);
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn constant_volume_writes_identical_words() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::filled([4, 4, 4], 0.5).unwrap();
    save_volume(&v, dir.path().join("c")).unwrap();
    let raw = fs::read(dir.path().join("c.raw")).unwrap();
    assert_eq!(raw.len(), 64 * 4);
    assert!(raw.chunks_exact(4).all(|w| w == 0.5f32.to_le_bytes()));
}

#[test]
fn labels_and_field_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = LabelMask::new([2, 3, 4], [1.0, 1.0, 1.5], (0..24).map(|i| (i % 4) as u8).collect())
        .unwrap();
    save_labels(&m, dir.path().join("m")).unwrap();
    assert_eq!(load_labels(dir.path().join("m")).unwrap(), m);

    let f = DisplacementField::from_fn([2, 3, 4], |d, h, w| {
        [d as f64 * 0.5, -(h as f64), w as f64 / 3.0]
    })
    .unwrap();
    save_field(&f, dir.path().join("f")).unwrap();
    let header = fs::read_to_string(dir.path().join("f.json")).unwrap();
    assert!(header.contains("\"channels\": 3"));
    assert_eq!(load_field(dir.path().join("f")).unwrap(), f);
    // A field is not a volume and vice versa.
    assert!(load_volume(dir.path().join("f")).is_err());
    save_volume(&Volume::filled([2, 3, 4], 1.0).unwrap(), dir.path().join("v")).unwrap();
    assert!(load_field(dir.path().join("v")).is_err());
}
