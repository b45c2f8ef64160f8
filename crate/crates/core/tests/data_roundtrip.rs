use std::io::Cursor;
use std::path::Path;

use shiftbench::data::{load_csv, read_csv, save_csv, write_csv};
use shiftbench::datagen::{blue_shift_default, gen_colored, gen_latent, latent_spec_a};
use shiftbench::{Error, LabeledDataset, Rng};

fn roundtrip(ds: &LabeledDataset) -> LabeledDataset {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf).unwrap();
    read_csv(Cursor::new(buf), Path::new("mem.csv")).unwrap()
}

#[test]
fn colored_csv_roundtrip_is_exact() {
    let mut spec = blue_shift_default();
    spec.n_per_env = 50;
    let ds = gen_colored(&spec, None, &mut Rng::new(1)).unwrap();
    let back = roundtrip(&ds);
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.envs(), ds.envs());
}

#[test]
fn latent_csv_roundtrip_through_file() {
    let spec = latent_spec_a().with_noise(0.05).unwrap();
    let ds = gen_latent(&spec, 100, &mut Rng::new(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn same_seed_same_data() {
    let spec = latent_spec_a();
    let a = gen_latent(&spec, 200, &mut Rng::new(9)).unwrap();
    let b = gen_latent(&spec, 200, &mut Rng::new(9)).unwrap();
    let c = gen_latent(&spec, 200, &mut Rng::new(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn malformed_csv_reports_line() {
    let text = "env,label,x0\n0,1,0.5\n1,0,abc\n";
    match read_csv(Cursor::new(text), Path::new("bad.csv")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    let header = "env,lbl,x0\n0,1,0.5\n";
    assert!(matches!(
        read_csv(Cursor::new(header), Path::new("bad.csv")),
        Err(Error::Parse { line: 1, .. })
    ));
}
